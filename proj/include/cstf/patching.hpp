#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "cstf/tensor.hpp"

namespace cstf {

enum class EmbedMode { average_pool, convolutional };

/// Tokenization settings shared by all stages. The token grid g fixes the
/// token count P = g*g for every stage; base_patch_size is the reference
/// patch edge used by the per-stage reduction formula and the sweep runner.
struct PatchConfig {
    std::size_t base_patch_size = 13;
    std::size_t token_grid = 4;
    std::vector<std::size_t> embed_dim;  // per stage; empty keeps channel widths
    EmbedMode mode = EmbedMode::average_pool;

    std::size_t token_count() const { return token_grid * token_grid; }
};

template <typename T>
struct StageFeatures {
    std::size_t stage_index = 1;  // 1-based
    Tensor<T> values;             // [c_i x h x w]
};

template <typename T>
struct PatchTokens {
    std::size_t stage_index = 1;
    Tensor<T> tokens;  // [P x c_i]
};

/// Learned pieces of one stage's tokenizer: the pointwise channel-mixing
/// projection, and (convolutional mode only) the per-channel pooling kernel.
template <typename T>
struct PatchEmbedParams {
    Tensor<T> proj_w;  // [e_i x c_i]
    Tensor<T> proj_b;  // [e_i]
    Tensor<T> pool_w;  // [c_i x kh x kw]; unused in average_pool mode
};

/// Per-stage patch edge under the progressive reduction rule
/// base / 2^((i-1)/2), rounded half up with a floor of one pixel.
inline std::size_t stage_patch_size(std::size_t base, std::size_t stage_index) {
    const double reduced =
        static_cast<double>(base) / std::pow(2.0, (static_cast<double>(stage_index) - 1.0) / 2.0);
    const double rounded = std::floor(reduced + 0.5);
    return rounded < 1.0 ? 1 : static_cast<std::size_t>(rounded);
}

namespace detail {

// [c x g x g] map -> [g*g x c] token matrix, row-major over the grid.
template <typename T>
Tensor<T> grid_to_tokens(const Tensor<T>& grid) {
    const std::size_t c = grid.shape()[0];
    const std::size_t p = grid.shape()[1] * grid.shape()[2];
    return transpose(reshape(grid, Shape{c, p}));
}

}  // namespace detail

/// Pools a stage's feature map to the fixed g x g token grid and flattens it
/// to P tokens of c_i channels. Token order is row-major over the grid.
template <typename T>
PatchTokens<T> partition(const StageFeatures<T>& f, const PatchConfig& cfg) {
    const std::size_t g = cfg.token_grid;
    const auto& shape = f.values.shape();
    if (shape.size() != 3) {
        throw ShapeError("partition: stage features must be [c x h x w], got " + shape_str(shape));
    }
    if (g > shape[1] || g > shape[2]) {
        throw ShapeError("partition: token grid " + std::to_string(g) + " exceeds spatial dims " +
                         shape_str(shape));
    }
    return PatchTokens<T>{f.stage_index, detail::grid_to_tokens(adaptive_avg_pool2d(f.values, g, g))};
}

/// Mode-aware partition: convolutional mode swaps the fixed mean kernel for
/// the learned per-channel kernel in params.pool_w (stride = kernel, so the
/// windows match the pooling ones; spatial dims must be divisible by g).
template <typename T>
PatchTokens<T> partition(const StageFeatures<T>& f, const PatchConfig& cfg,
                         const PatchEmbedParams<T>& params) {
    if (cfg.mode == EmbedMode::average_pool) return partition(f, cfg);

    const std::size_t g = cfg.token_grid;
    const auto& shape = f.values.shape();
    if (shape.size() != 3) {
        throw ShapeError("partition: stage features must be [c x h x w], got " + shape_str(shape));
    }
    if (g > shape[1] || g > shape[2]) {
        throw ShapeError("partition: token grid " + std::to_string(g) + " exceeds spatial dims " +
                         shape_str(shape));
    }
    if (shape[1] % g != 0 || shape[2] % g != 0) {
        throw ShapeError("partition: convolutional mode needs spatial dims divisible by grid " +
                         std::to_string(g) + ", got " + shape_str(shape));
    }
    const std::size_t kh = shape[1] / g, kw = shape[2] / g;
    if (params.pool_w.shape() != Shape{shape[0], kh, kw}) {
        throw ShapeError("partition: pooling kernel " + shape_str(params.pool_w.shape()) +
                         " does not match window " + std::to_string(kh) + "x" + std::to_string(kw));
    }
    return PatchTokens<T>{f.stage_index,
                          detail::grid_to_tokens(depthwise_conv2d(f.values, params.pool_w, kh))};
}

/// Pointwise channel-mixing projection of tokens: t * W^T + b.
template <typename T>
PatchTokens<T> embed(const PatchTokens<T>& t, const PatchEmbedParams<T>& params) {
    if (t.tokens.ndim() != 2 || params.proj_w.ndim() != 2 ||
        t.tokens.shape()[1] != params.proj_w.shape()[1]) {
        throw ShapeError("embed: tokens " + shape_str(t.tokens.shape()) + " vs projection " +
                         shape_str(params.proj_w.shape()));
    }
    return PatchTokens<T>{t.stage_index, linear(t.tokens, params.proj_w, params.proj_b)};
}

}  // namespace cstf
