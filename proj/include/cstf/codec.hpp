#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

#include "cstf/attention.hpp"
#include "cstf/patching.hpp"
#include "cstf/tensor.hpp"

namespace cstf {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct ModelConfig {
    std::size_t stages = 3;  // n; the encoder has n+1 stages, the deepest skips the block
    std::vector<std::size_t> channels = {8, 16, 32, 32};  // n+1 widths
    std::size_t input_height = 32;
    std::size_t input_width = 32;
    std::size_t in_channels = 1;
    std::size_t classes = 2;
    FusionMode fusion = FusionMode::concat;
    std::size_t attn_dim = 8;
    PatchConfig patch;

    std::size_t stage_height(std::size_t i) const { return input_height >> (i - 1); }
    std::size_t stage_width(std::size_t i) const { return input_width >> (i - 1); }

    void validate() const {
        if (stages < 1) throw ConfigError("model: stages must be >= 1");
        if (channels.size() != stages + 1) {
            throw ConfigError("model: need " + std::to_string(stages + 1) + " channel widths, got " +
                              std::to_string(channels.size()));
        }
        for (std::size_t c : channels)
            if (c == 0) throw ConfigError("model: channel widths must be positive");
        const std::size_t div = std::size_t(1) << stages;
        if (input_height % div != 0 || input_width % div != 0) {
            throw ConfigError("model: input " + std::to_string(input_height) + "x" +
                              std::to_string(input_width) + " not divisible by 2^" +
                              std::to_string(stages));
        }
        if (classes < 2) throw ConfigError("model: class count must be >= 2");
        if (attn_dim < 1) throw ConfigError("model: attn_dim must be >= 1");
        const std::size_t g = patch.token_grid;
        if (g < 1) throw ConfigError("model: token grid must be >= 1");
        for (std::size_t i = 1; i <= stages; ++i) {
            if (stage_height(i) % g != 0 || stage_width(i) % g != 0) {
                throw ConfigError("model: stage " + std::to_string(i) + " resolution " +
                                  std::to_string(stage_height(i)) + "x" +
                                  std::to_string(stage_width(i)) + " not divisible by grid " +
                                  std::to_string(g));
            }
        }
        if (!patch.embed_dim.empty()) {
            if (patch.embed_dim.size() < stages) {
                throw ConfigError("model: embed_dim must cover every tokenized stage");
            }
            for (std::size_t i = 0; i < stages; ++i) {
                if (patch.embed_dim[i] != channels[i]) {
                    throw ConfigError("model: embed_dim must match stage channels for the "
                                      "decoder skip path");
                }
            }
        }
    }
};

// ---------------------------------------------------------------------------
// Parameter store
// ---------------------------------------------------------------------------

/// Named learnable tensors. Iteration order is name-sorted, so optimizer
/// sweeps and checkpoints are deterministic.
template <typename T>
class ParameterStore {
public:
    Tensor<T>& create(const std::string& name, Shape shape, Rng& rng, std::size_t fan_in) {
        const double s = 1.0 / std::sqrt(static_cast<double>(fan_in));
        return insert(name, Tensor<T>::uniform(std::move(shape), rng, -s, s));
    }

    Tensor<T>& create_const(const std::string& name, Shape shape, T value) {
        return insert(name, Tensor<T>::full(std::move(shape), value));
    }

    Tensor<T>& at(const std::string& name) {
        auto it = params_.find(name);
        if (it == params_.end()) throw ConfigError("unknown parameter '" + name + "'");
        return it->second;
    }
    const Tensor<T>& at(const std::string& name) const {
        return const_cast<ParameterStore*>(this)->at(name);
    }

    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }
    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }
    std::size_t size() const { return params_.size(); }

    std::size_t value_count() const {
        std::size_t n = 0;
        for (const auto& [name, t] : params_) n += t.size();
        return n;
    }

    void zero_grads() {
        for (auto& [name, t] : params_) t.zero_grad();
    }

private:
    Tensor<T>& insert(const std::string& name, Tensor<T> t) {
        t.set_requires_grad(true);
        auto [it, ok] = params_.emplace(name, std::move(t));
        if (!ok) throw ConfigError("duplicate parameter '" + name + "'");
        return it->second;
    }

    std::map<std::string, Tensor<T>> params_;
};

// ---------------------------------------------------------------------------
// Codec building blocks
// ---------------------------------------------------------------------------

template <typename T>
struct ConvLayerParams {
    Tensor<T> w;  // [cout x cin x kh x kw]
    Tensor<T> b;  // [cout]
};

template <typename T>
struct EncoderParams {
    ConvLayerParams<T> stem;                 // in_channels -> c1, stride 1
    std::vector<ConvLayerParams<T>> down;    // c_i -> c_{i+1}, stride 2
    std::vector<ConvLayerParams<T>> refine;  // c_{i+1} -> c_{i+1}, stride 1
};

template <typename T>
struct DecoderStageParams {
    ConvLayerParams<T> conv;  // c_{i+1} -> c_i, stride 1, pad 1
    Tensor<T> ln_gain, ln_bias;
};

/// n+1 stage features; stage i keeps resolution H/2^(i-1) and the stride-2
/// convolutions between stages do the downsampling.
template <typename T>
std::vector<StageFeatures<T>> encoder_forward(const Tensor<T>& image, const EncoderParams<T>& params,
                                              std::size_t stages) {
    if (image.ndim() != 3) throw ShapeError("encoder: image must be [c x h x w]");
    std::vector<StageFeatures<T>> out;
    out.reserve(stages + 1);
    auto feat = gelu(conv2d(image, params.stem.w, params.stem.b, 1, 1));
    out.push_back({1, feat});
    for (std::size_t i = 0; i < stages; ++i) {
        auto down = conv2d(feat, params.down[i].w, params.down[i].b, 2, 1);
        feat = gelu(conv2d(down, params.refine[i].w, params.refine[i].b, 1, 1));
        out.push_back({i + 2, feat});
    }
    return out;
}

/// Reshapes P = g*g tokens into [c x g x g] and nearest-upsamples to the
/// target resolution. Token order is row-major over the grid.
template <typename T>
Tensor<T> tokens_to_map(const Tensor<T>& tokens, std::size_t target_h, std::size_t target_w) {
    if (tokens.ndim() != 2) throw ShapeError("tokens_to_map: expected [p x c]");
    const std::size_t p = tokens.shape()[0], c = tokens.shape()[1];
    const std::size_t g = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(p))));
    if (g * g != p) {
        throw ContractError("tokens_to_map: token count " + std::to_string(p) + " is not a square");
    }
    if (target_h < g || target_w < g || target_h % g != 0 || target_w % g != 0) {
        throw ShapeError("tokens_to_map: target " + std::to_string(target_h) + "x" +
                         std::to_string(target_w) + " incompatible with grid " + std::to_string(g));
    }
    auto grid = reshape(transpose(tokens), Shape{c, g, g});
    return upsample_nearest(grid, target_h / g, target_w / g);
}

/// Upsample x2, conv block (conv -> LN over channels -> GELU), then the
/// residual skip add.
template <typename T>
Tensor<T> decoder_stage(const Tensor<T>& deeper, const Tensor<T>& skip,
                        const DecoderStageParams<T>& params, T ln_eps = T(1e-5)) {
    auto up = upsample_nearest(deeper, 2);
    auto conv = conv2d(up, params.conv.w, params.conv.b, 1, 1);
    if (conv.shape() != skip.shape()) {
        throw ShapeError("decoder_stage: refined " + shape_str(conv.shape()) + " vs skip " +
                         shape_str(skip.shape()));
    }
    auto refined = gelu(layer_norm(conv, params.ln_gain, params.ln_bias, ln_eps, 0));
    return add(refined, skip);
}

/// 1x1 convolution to class logits, then per-pixel softmax over classes.
template <typename T>
Tensor<T> output_head(const Tensor<T>& features, const ConvLayerParams<T>& params) {
    return softmax(conv2d(features, params.w, params.b, 1, 0), 0);
}

// ---------------------------------------------------------------------------
// Full model
// ---------------------------------------------------------------------------

template <typename T>
struct ForwardResult {
    Tensor<T> probs;                        // [classes x h x w]
    std::vector<Tensor<T>> stage_tokens;    // block outputs, [P x c_i] per stage
    std::vector<Shape> encoder_shapes;      // diagnostics
};

template <typename T>
class CstfModel {
public:
    CstfModel(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
        cfg_.validate();
        Rng rng(seed);
        build(rng);
    }

    const ModelConfig& config() const { return cfg_; }
    ParameterStore<T>& params() { return store_; }
    const ParameterStore<T>& params() const { return store_; }
    std::size_t param_count() const { return store_.value_count(); }

    ForwardResult<T> forward(const Tensor<T>& image) const {
        const Shape expect{cfg_.in_channels, cfg_.input_height, cfg_.input_width};
        if (image.shape() != expect) {
            throw ShapeError("model: image " + shape_str(image.shape()) + ", configured " +
                             shape_str(expect));
        }
        const std::size_t n = cfg_.stages;

        auto features = encoder_forward(image, enc_, n);

        std::vector<Tensor<T>> tokens;
        tokens.reserve(n);
        for (std::size_t i = 0; i < n; ++i) {
            auto part = partition(features[i], cfg_.patch, patch_[i]);
            tokens.push_back(embed(part, patch_[i]).tokens);
        }

        auto enhanced = cstf_block(tokens, attn_, cfg_.fusion);

        auto d = features[n].values;  // deepest stage feeds the decoder directly
        for (std::size_t i = n; i >= 1; --i) {
            auto skip = tokens_to_map(enhanced[i - 1], cfg_.stage_height(i), cfg_.stage_width(i));
            d = decoder_stage(d, skip, dec_[i - 1]);
        }

        ForwardResult<T> result;
        result.probs = output_head(d, head_);
        result.stage_tokens = std::move(enhanced);
        for (const auto& f : features) result.encoder_shapes.push_back(f.values.shape());
        return result;
    }

    /// Unit-length matching descriptors: the block's stage-1 tokens.
    Tensor<T> descriptors(const Tensor<T>& image) const {
        return row_normalize(forward(image).stage_tokens[0]);
    }

private:
    void build(Rng& rng) {
        const std::size_t n = cfg_.stages;
        const auto& ch = cfg_.channels;

        enc_.stem.w = store_.create("enc.stem.w", {ch[0], cfg_.in_channels, 3, 3}, rng,
                                    cfg_.in_channels * 9);
        enc_.stem.b = store_.create_const("enc.stem.b", {ch[0]}, T(0));
        for (std::size_t i = 0; i < n; ++i) {
            const std::string tag = std::to_string(i + 1);
            ConvLayerParams<T> down;
            down.w = store_.create("enc.down" + tag + ".w", {ch[i + 1], ch[i], 3, 3}, rng, ch[i] * 9);
            down.b = store_.create_const("enc.down" + tag + ".b", {ch[i + 1]}, T(0));
            enc_.down.push_back(down);
            ConvLayerParams<T> refine;
            refine.w = store_.create("enc.refine" + tag + ".w", {ch[i + 1], ch[i + 1], 3, 3}, rng,
                                     ch[i + 1] * 9);
            refine.b = store_.create_const("enc.refine" + tag + ".b", {ch[i + 1]}, T(0));
            enc_.refine.push_back(refine);
        }

        const std::size_t g = cfg_.patch.token_grid;
        for (std::size_t i = 0; i < n; ++i) {
            const std::string pre = "patch.s" + std::to_string(i + 1) + ".";
            PatchEmbedParams<T> pe;
            pe.proj_w = store_.create(pre + "proj_w", {ch[i], ch[i]}, rng, ch[i]);
            pe.proj_b = store_.create_const(pre + "proj_b", {ch[i]}, T(0));
            if (cfg_.patch.mode == EmbedMode::convolutional) {
                const std::size_t kh = cfg_.stage_height(i + 1) / g;
                const std::size_t kw = cfg_.stage_width(i + 1) / g;
                pe.pool_w = store_.create(pre + "pool_w", {ch[i], kh, kw}, rng, kh * kw);
            }
            patch_.push_back(pe);
        }

        for (std::size_t i = 0; i < n; ++i) {
            const std::string pre = "attn.s" + std::to_string(i + 1) + ".";
            const std::size_t c = ch[i], a = cfg_.attn_dim;
            StageAttentionParams<T> p;
            p.ln_in_gain = store_.create_const(pre + "ln_in.g", {c}, T(1));
            p.ln_in_bias = store_.create_const(pre + "ln_in.b", {c}, T(0));
            p.wq = store_.create(pre + "wq", {a, c}, rng, c);
            p.wk = store_.create(pre + "wk", {a, c}, rng, c);
            p.wv = store_.create(pre + "wv", {a, c}, rng, c);
            p.ca_out = store_.create(pre + "ca_out", {c, a}, rng, a);
            p.wq2 = store_.create(pre + "wq2", {a, c}, rng, c);
            p.wk2 = store_.create(pre + "wk2", {a, c}, rng, c);
            p.wv2 = store_.create(pre + "wv2", {a, c}, rng, c);
            p.w_up = store_.create(pre + "w_up", {c, a}, rng, a);
            p.cat_proj = store_.create(pre + "cat_proj", {c, 2 * c}, rng, 2 * c);
            p.ln_out_gain = store_.create_const(pre + "ln_out.g", {c}, T(1));
            p.ln_out_bias = store_.create_const(pre + "ln_out.b", {c}, T(0));
            attn_.push_back(p);
        }

        for (std::size_t i = 0; i < n; ++i) {
            const std::string pre = "dec.s" + std::to_string(i + 1) + ".";
            DecoderStageParams<T> d;
            d.conv.w = store_.create(pre + "conv_w", {ch[i], ch[i + 1], 3, 3}, rng, ch[i + 1] * 9);
            d.conv.b = store_.create_const(pre + "conv_b", {ch[i]}, T(0));
            d.ln_gain = store_.create_const(pre + "ln.g", {ch[i]}, T(1));
            d.ln_bias = store_.create_const(pre + "ln.b", {ch[i]}, T(0));
            dec_.push_back(d);
        }

        head_.w = store_.create("head.w", {cfg_.classes, ch[0], 1, 1}, rng, ch[0]);
        head_.b = store_.create_const("head.b", {cfg_.classes}, T(0));
    }

    ModelConfig cfg_;
    ParameterStore<T> store_;
    EncoderParams<T> enc_;
    std::vector<PatchEmbedParams<T>> patch_;
    AttentionParams<T> attn_;
    std::vector<DecoderStageParams<T>> dec_;
    ConvLayerParams<T> head_;
};

// ---------------------------------------------------------------------------
// Checkpoints: versioned JSON map of parameter name -> shape -> values.
// ---------------------------------------------------------------------------

inline constexpr int kCheckpointVersion = 1;

template <typename T>
void save_checkpoint(const ParameterStore<T>& params, const std::string& path) {
    nlohmann::json j;
    j["format"] = "cstf-checkpoint";
    j["version"] = kCheckpointVersion;
    nlohmann::json entries = nlohmann::json::object();
    for (const auto& [name, t] : params) {
        nlohmann::json e;
        e["shape"] = t.shape();
        e["values"] = std::vector<double>(t.data(), t.data() + t.size());
        entries[name] = std::move(e);
    }
    j["params"] = std::move(entries);
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot write checkpoint '" + path + "'");
    out << j.dump();
}

template <typename T>
void load_checkpoint(ParameterStore<T>& params, const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read checkpoint '" + path + "'");
    nlohmann::json j;
    in >> j;
    if (j.value("format", "") != "cstf-checkpoint") {
        throw ConfigError("'" + path + "' is not a checkpoint file");
    }
    if (j.value("version", -1) != kCheckpointVersion) {
        throw ConfigError("unsupported checkpoint version in '" + path + "'");
    }
    const auto& entries = j.at("params");
    for (auto& [name, t] : params) {
        if (!entries.contains(name)) {
            throw ConfigError("checkpoint '" + path + "' is missing parameter '" + name + "'");
        }
        const auto& e = entries.at(name);
        const auto shape = e.at("shape").template get<Shape>();
        if (shape != t.shape()) {
            throw ShapeError("checkpoint parameter '" + name + "' has shape " + shape_str(shape) +
                             ", model expects " + shape_str(t.shape()));
        }
        const auto vals = e.at("values").template get<std::vector<double>>();
        for (std::size_t i = 0; i < vals.size(); ++i) t.data()[i] = static_cast<T>(vals[i]);
    }
}

}  // namespace cstf
