#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "cstf/tensor.hpp"

namespace cstf {

/// How the channel and spatial attention branches are combined with the
/// block input before the output normalization.
enum class FusionMode { ca_only, sca_only, sum, concat, sequential };

inline std::string fusion_mode_name(FusionMode m) {
    switch (m) {
        case FusionMode::ca_only: return "ca_only";
        case FusionMode::sca_only: return "sca_only";
        case FusionMode::sum: return "sum";
        case FusionMode::concat: return "concat";
        case FusionMode::sequential: return "sequential";
    }
    throw ConfigError("unknown fusion mode");
}

inline FusionMode fusion_mode_from_name(const std::string& s) {
    if (s == "ca_only") return FusionMode::ca_only;
    if (s == "sca_only") return FusionMode::sca_only;
    if (s == "sum") return FusionMode::sum;
    if (s == "concat") return FusionMode::concat;
    if (s == "sequential") return FusionMode::sequential;
    throw ConfigError("unknown fusion mode '" + s + "'");
}

/// Learned weights for one stage of the block. All stages project into a
/// shared attention width so cross-stage products are well formed.
template <typename T>
struct StageAttentionParams {
    Tensor<T> ln_in_gain, ln_in_bias;    // [c_i], applied to the block input
    Tensor<T> wq, wk, wv;                // [a x c_i], channel cross attention
    Tensor<T> ca_out;                    // [c_i x a], back to the stage width
    Tensor<T> wq2, wk2, wv2;             // [a x c_i], spatial cross attention
    Tensor<T> w_up;                      // [c_i x a], up-projection
    Tensor<T> cat_proj;                  // [c_i x 2c_i], concat fusion only
    Tensor<T> ln_out_gain, ln_out_bias;  // [c_i], applied after fusion
};

template <typename T>
using AttentionParams = std::vector<StageAttentionParams<T>>;

/// Fan-in scaled uniform initialization for one stage; layer-norm gains
/// start at one, biases at zero.
template <typename T>
StageAttentionParams<T> init_stage_attention_params(std::size_t channels, std::size_t attn_dim,
                                                    Rng& rng) {
    auto uni = [&](Shape shape, std::size_t fan_in) {
        const double s = 1.0 / std::sqrt(static_cast<double>(fan_in));
        return Tensor<T>::uniform(std::move(shape), rng, -s, s);
    };
    StageAttentionParams<T> p;
    p.ln_in_gain = Tensor<T>::ones({channels});
    p.ln_in_bias = Tensor<T>::zeros({channels});
    p.wq = uni({attn_dim, channels}, channels);
    p.wk = uni({attn_dim, channels}, channels);
    p.wv = uni({attn_dim, channels}, channels);
    p.ca_out = uni({channels, attn_dim}, attn_dim);
    p.wq2 = uni({attn_dim, channels}, channels);
    p.wk2 = uni({attn_dim, channels}, channels);
    p.wv2 = uni({attn_dim, channels}, channels);
    p.w_up = uni({channels, attn_dim}, attn_dim);
    p.cat_proj = uni({channels, 2 * channels}, 2 * channels);
    p.ln_out_gain = Tensor<T>::ones({channels});
    p.ln_out_bias = Tensor<T>::zeros({channels});
    return p;
}

/// Softmax(Q K^T / sqrt(a)) with a the projection width. Exposed separately
/// so tests and diagnostics can inspect the weight matrix.
template <typename T>
Tensor<T> attention_weights(const Tensor<T>& q, const Tensor<T>& k) {
    if (q.ndim() != 2 || k.ndim() != 2 || q.shape()[1] != k.shape()[1]) {
        throw ShapeError("attention_weights: " + shape_str(q.shape()) + " vs " + shape_str(k.shape()));
    }
    if (q.shape()[0] == 0 || k.shape()[0] == 0) {
        throw ShapeError("attention_weights: empty token set");
    }
    const T inv_sqrt_dim = T(1) / std::sqrt(static_cast<T>(q.shape()[1]));
    return softmax(scale(matmul(q, transpose(k)), inv_sqrt_dim), 1);
}

/// Softmax(Q K^T / sqrt(a)) V.
template <typename T>
Tensor<T> scaled_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v) {
    if (v.ndim() != 2 || v.shape()[0] != k.shape()[0]) {
        throw ShapeError("scaled_attention: values " + shape_str(v.shape()) + " vs keys " +
                         shape_str(k.shape()));
    }
    return matmul(attention_weights(q, k), v);
}

/// Channel cross attention: per-stage Q/K/V projections, per-stage scaled
/// attention, then the cross-stage sum projected back to each stage's width.
/// Token counts must agree across stages.
template <typename T>
std::vector<Tensor<T>> channel_cross_attention(const std::vector<Tensor<T>>& tokens,
                                               const AttentionParams<T>& params) {
    if (tokens.empty()) throw ContractError("channel_cross_attention: no stages");
    if (params.size() != tokens.size()) {
        throw ContractError("channel_cross_attention: " + std::to_string(params.size()) +
                            " parameter sets for " + std::to_string(tokens.size()) + " stages");
    }
    const std::size_t p = tokens[0].shape()[0];
    for (const auto& t : tokens) {
        if (t.shape()[0] != p) {
            throw ContractError("channel_cross_attention: token counts differ across stages (" +
                                std::to_string(t.shape()[0]) + " vs " + std::to_string(p) + ")");
        }
    }

    Tensor<T> summed;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        auto q = linear(tokens[i], params[i].wq);
        auto k = linear(tokens[i], params[i].wk);
        auto v = linear(tokens[i], params[i].wv);
        auto attn = scaled_attention(q, k, v);
        summed = (i == 0) ? attn : add(summed, attn);
    }

    std::vector<Tensor<T>> enriched;
    enriched.reserve(tokens.size());
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        enriched.push_back(linear(summed, params[i].ca_out));
    }
    return enriched;
}

/// Spatial (intra-stage) cross attention: fresh Q/K/V from the enriched
/// tokens, scaled attention, then up-projection to the stage width.
template <typename T>
Tensor<T> spatial_cross_attention(const Tensor<T>& tokens, const StageAttentionParams<T>& params) {
    auto q = linear(tokens, params.wq2);
    auto k = linear(tokens, params.wk2);
    auto v = linear(tokens, params.wv2);
    return linear(scaled_attention(q, k, v), params.w_up);
}

/// Residual fusion of the attention branches onto the block input.
/// sequential mode expects sca_out to have been computed from ca_out.
template <typename T>
Tensor<T> fuse(const Tensor<T>& ca_out, const Tensor<T>& sca_out, const Tensor<T>& original,
               FusionMode mode, const StageAttentionParams<T>& params) {
    switch (mode) {
        case FusionMode::ca_only:
            return add(original, ca_out);
        case FusionMode::sca_only:
        case FusionMode::sequential:
            return add(original, sca_out);
        case FusionMode::sum:
            return add(add(original, ca_out), sca_out);
        case FusionMode::concat:
            return add(original, linear(concat_cols(ca_out, sca_out), params.cat_proj));
    }
    throw ConfigError("fuse: unknown fusion mode");
}

/// One block: per-stage input LN, attention branches per the fusion mode,
/// residual fusion, then output LN and GELU. Shapes are preserved.
template <typename T>
std::vector<Tensor<T>> cstf_block(const std::vector<Tensor<T>>& tokens,
                                  const AttentionParams<T>& params, FusionMode mode,
                                  T ln_eps = T(1e-5)) {
    if (params.size() != tokens.size()) {
        throw ContractError("cstf_block: " + std::to_string(params.size()) + " parameter sets for " +
                            std::to_string(tokens.size()) + " stages");
    }
    const std::size_t n = tokens.size();

    std::vector<Tensor<T>> normed;
    normed.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        normed.push_back(layer_norm(tokens[i], params[i].ln_in_gain, params[i].ln_in_bias, ln_eps));
    }

    std::vector<Tensor<T>> ca;
    if (mode != FusionMode::sca_only) ca = channel_cross_attention(normed, params);

    std::vector<Tensor<T>> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        Tensor<T> fused;
        switch (mode) {
            case FusionMode::ca_only:
                fused = fuse(ca[i], Tensor<T>(), tokens[i], mode, params[i]);
                break;
            case FusionMode::sca_only:
                fused = fuse(Tensor<T>(), spatial_cross_attention(normed[i], params[i]), tokens[i],
                             mode, params[i]);
                break;
            case FusionMode::sum:
            case FusionMode::concat:
                fused = fuse(ca[i], spatial_cross_attention(normed[i], params[i]), tokens[i], mode,
                             params[i]);
                break;
            case FusionMode::sequential:
                fused = fuse(ca[i], spatial_cross_attention(ca[i], params[i]), tokens[i], mode,
                             params[i]);
                break;
        }
        out.push_back(gelu(layer_norm(fused, params[i].ln_out_gain, params[i].ln_out_bias, ln_eps)));
    }
    return out;
}

}  // namespace cstf
