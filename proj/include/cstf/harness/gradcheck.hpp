#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "cstf/attention.hpp"
#include "cstf/codec.hpp"
#include "cstf/matching.hpp"
#include "cstf/patching.hpp"
#include "cstf/tensor.hpp"

namespace cstf::harness {

struct GradCheckResult {
    std::string name;
    double max_rel_err = 0.0;
    bool pass = true;
};

namespace gradcheck_detail {

// The reference derivative is a central difference evaluated in double at
// the exact same parameter point (float values widen losslessly). This keeps
// the probe's truncation and roundoff inside the 32-bit tolerance, which a
// float-evaluated difference cannot achieve through stacked normalizations.
template <typename T>
Tensor<double> widen(const Tensor<T>& t) {
    Tensor<double> out(t.shape());
    for (std::size_t i = 0; i < t.size(); ++i) out.data()[i] = static_cast<double>(t.data()[i]);
    return out;
}

inline double rel_err(double a, double b, double floor_val) {
    const double den = std::max({std::fabs(a), std::fabs(b), floor_val});
    return std::fabs(a - b) / den;
}

template <typename T>
constexpr double err_floor() {
    return std::is_same_v<T, float> ? 1e-2 : 1e-3;
}

/// One check instance: `inputs` in working precision, `make_loss` a generic
/// callable mapping a same-length vector of tensors (any precision) to a
/// scalar tensor. Analytic gradients of the tensors named by `check_idx`
/// are compared against the double-precision central difference; `entries`
/// empty means every entry.
template <typename T, typename MakeLoss>
void check_inputs(GradCheckResult& result, std::vector<Tensor<T>>& inputs,
                  const std::vector<std::size_t>& check_idx, MakeLoss&& make_loss, double tol,
                  double h, Rng* sampler = nullptr, std::size_t sample_count = 0) {
    std::vector<Tensor<double>> wide;
    wide.reserve(inputs.size());
    for (const auto& t : inputs) wide.push_back(widen(t));

    for (std::size_t idx : check_idx) {
        inputs[idx].set_requires_grad(true);
        backward(make_loss(inputs));
        const auto analytic = inputs[idx].grad();
        inputs[idx].set_requires_grad(false);

        std::vector<std::size_t> entries;
        if (sampler && sample_count > 0 && inputs[idx].size() > sample_count) {
            for (std::size_t i = 0; i < sample_count; ++i)
                entries.push_back(sampler->uniform_int(inputs[idx].size()));
        } else {
            entries.resize(inputs[idx].size());
            for (std::size_t i = 0; i < entries.size(); ++i) entries[i] = i;
        }

        NoGradGuard off;
        auto& probe = wide[idx];
        for (std::size_t e : entries) {
            const double keep = probe.data()[e];
            probe.data()[e] = keep + h;
            const double fp = make_loss(wide).value();
            probe.data()[e] = keep - h;
            const double fm = make_loss(wide).value();
            probe.data()[e] = keep;
            const double numeric = (fp - fm) / (2.0 * h);
            const double err =
                rel_err(static_cast<double>(analytic[e]), numeric, err_floor<T>());
            result.max_rel_err = std::max(result.max_rel_err, err);
            result.pass = result.pass && err < tol;
        }
    }
}

}  // namespace gradcheck_detail

/// Backward-vs-central-finite-difference checks for every parameterized
/// operation and the composed model, over `n_seeds` randomized instances.
/// Small operations check every parameter entry; the full model samples
/// entries per parameter tensor.
template <typename T>
std::vector<GradCheckResult> run_gradient_checks(std::uint64_t seed_base, std::size_t n_seeds,
                                                 double tol) {
    namespace gd = gradcheck_detail;
    std::vector<GradCheckResult> results;
    constexpr double kOpStep = 2e-6;

    auto uniform = [](Shape shape, Rng& rng, double lo, double hi) {
        return Tensor<T>::uniform(std::move(shape), rng, lo, hi);
    };

    {
        GradCheckResult r{"embed"};
        for (std::size_t s = 0; s < n_seeds; ++s) {
            Rng rng(seed_base + s);
            // tokens, proj_w, proj_b, weights
            std::vector<Tensor<T>> in{uniform({4, 3}, rng, -1, 1), uniform({3, 3}, rng, -0.6, 0.6),
                                      uniform({3}, rng, -0.2, 0.2), uniform({4, 3}, rng, -1, 1)};
            auto loss = [](const auto& ts) {
                using S = std::decay_t<decltype(ts[0].value())>;
                PatchEmbedParams<S> p{ts[1], ts[2], {}};
                return sum_all(mul(embed(PatchTokens<S>{1, ts[0]}, p).tokens, ts[3]));
            };
            gd::check_inputs(r, in, {1, 2}, loss, tol, kOpStep);
        }
        results.push_back(r);
    }

    {
        GradCheckResult r{"channel_cross_attention"};
        for (std::size_t s = 0; s < n_seeds; ++s) {
            Rng rng(seed_base + 11 * s + 1);
            // t0, t1, wq0, wk0, wv0, out0, wq1, wk1, wv1, out1, weight0, weight1
            std::vector<Tensor<T>> in{
                uniform({3, 3}, rng, -1, 1),    uniform({3, 4}, rng, -1, 1),
                uniform({3, 3}, rng, -0.6, 0.6), uniform({3, 3}, rng, -0.6, 0.6),
                uniform({3, 3}, rng, -0.6, 0.6), uniform({3, 3}, rng, -0.6, 0.6),
                uniform({3, 4}, rng, -0.5, 0.5), uniform({3, 4}, rng, -0.5, 0.5),
                uniform({3, 4}, rng, -0.5, 0.5), uniform({4, 3}, rng, -0.5, 0.5),
                uniform({3, 3}, rng, -1, 1),    uniform({3, 4}, rng, -1, 1)};
            auto loss = [](const auto& ts) {
                using S = std::decay_t<decltype(ts[0].value())>;
                AttentionParams<S> params(2);
                params[0].wq = ts[2];
                params[0].wk = ts[3];
                params[0].wv = ts[4];
                params[0].ca_out = ts[5];
                params[1].wq = ts[6];
                params[1].wk = ts[7];
                params[1].wv = ts[8];
                params[1].ca_out = ts[9];
                auto out = channel_cross_attention<S>({ts[0], ts[1]}, params);
                return add(sum_all(mul(out[0], ts[10])), sum_all(mul(out[1], ts[11])));
            };
            gd::check_inputs(r, in, {2, 3, 4, 5, 6, 7, 8, 9}, loss, tol, kOpStep);
        }
        results.push_back(r);
    }

    {
        GradCheckResult r{"spatial_cross_attention"};
        for (std::size_t s = 0; s < n_seeds; ++s) {
            Rng rng(seed_base + 13 * s + 2);
            // tokens, wq2, wk2, wv2, w_up, weights
            std::vector<Tensor<T>> in{uniform({4, 4}, rng, -1, 1), uniform({3, 4}, rng, -0.5, 0.5),
                                      uniform({3, 4}, rng, -0.5, 0.5), uniform({3, 4}, rng, -0.5, 0.5),
                                      uniform({4, 3}, rng, -0.5, 0.5), uniform({4, 4}, rng, -1, 1)};
            auto loss = [](const auto& ts) {
                using S = std::decay_t<decltype(ts[0].value())>;
                StageAttentionParams<S> p;
                p.wq2 = ts[1];
                p.wk2 = ts[2];
                p.wv2 = ts[3];
                p.w_up = ts[4];
                return sum_all(mul(spatial_cross_attention(ts[0], p), ts[5]));
            };
            gd::check_inputs(r, in, {1, 2, 3, 4}, loss, tol, kOpStep);
        }
        results.push_back(r);
    }

    for (auto mode : {FusionMode::ca_only, FusionMode::sca_only, FusionMode::sum,
                      FusionMode::concat, FusionMode::sequential}) {
        GradCheckResult r{"fuse[" + fusion_mode_name(mode) + "]"};
        for (std::size_t s = 0; s < n_seeds; ++s) {
            Rng rng(seed_base + 17 * s + 3);
            // ca, sca, original, cat_proj, weights
            std::vector<Tensor<T>> in{uniform({4, 3}, rng, -1, 1), uniform({4, 3}, rng, -1, 1),
                                      uniform({4, 3}, rng, -1, 1), uniform({3, 6}, rng, -0.4, 0.4),
                                      uniform({4, 3}, rng, -1, 1)};
            auto loss = [mode](const auto& ts) {
                using S = std::decay_t<decltype(ts[0].value())>;
                StageAttentionParams<S> p;
                p.cat_proj = ts[3];
                return sum_all(mul(fuse(ts[0], ts[1], ts[2], mode, p), ts[4]));
            };
            std::vector<std::size_t> check{2};
            if (mode == FusionMode::ca_only || mode == FusionMode::sum ||
                mode == FusionMode::concat) {
                check.push_back(0);
            }
            if (mode != FusionMode::ca_only) check.push_back(1);
            if (mode == FusionMode::concat) check.push_back(3);
            gd::check_inputs(r, in, check, loss, tol, kOpStep);
        }
        results.push_back(r);
    }

    {
        GradCheckResult r{"decoder_stage"};
        for (std::size_t s = 0; s < n_seeds; ++s) {
            Rng rng(seed_base + 19 * s + 4);
            // deeper, conv_w, conv_b, ln_gain, ln_bias, skip, weights
            std::vector<Tensor<T>> in{
                uniform({3, 3, 3}, rng, -1, 1),     uniform({5, 3, 3, 3}, rng, -0.4, 0.4),
                uniform({5}, rng, -0.1, 0.1),       uniform({5}, rng, 0.6, 1.4),
                uniform({5}, rng, -0.2, 0.2),       uniform({5, 6, 6}, rng, -1, 1),
                uniform({5, 6, 6}, rng, -1, 1)};
            auto loss = [](const auto& ts) {
                using S = std::decay_t<decltype(ts[0].value())>;
                DecoderStageParams<S> p{{ts[1], ts[2]}, ts[3], ts[4]};
                return sum_all(mul(decoder_stage(ts[0], ts[5], p), ts[6]));
            };
            gd::check_inputs(r, in, {1, 2, 3, 4}, loss, tol, kOpStep);
        }
        results.push_back(r);
    }

    {
        GradCheckResult r{"output_head"};
        for (std::size_t s = 0; s < n_seeds; ++s) {
            Rng rng(seed_base + 23 * s + 5);
            // features, head_w, head_b, weights
            std::vector<Tensor<T>> in{uniform({4, 3, 3}, rng, -1, 1),
                                      uniform({3, 4, 1, 1}, rng, -0.5, 0.5),
                                      uniform({3}, rng, -0.2, 0.2), uniform({3, 3, 3}, rng, -1, 1)};
            auto loss = [](const auto& ts) {
                using S = std::decay_t<decltype(ts[0].value())>;
                ConvLayerParams<S> head{ts[1], ts[2]};
                return sum_all(mul(output_head(ts[0], head), ts[3]));
            };
            gd::check_inputs(r, in, {1, 2}, loss, tol, kOpStep);
        }
        results.push_back(r);
    }

    {
        GradCheckResult r{"matching_loss"};
        for (std::size_t s = 0; s < n_seeds; ++s) {
            Rng rng(seed_base + 29 * s + 6);
            std::vector<Tensor<T>> in{uniform({4, 3}, rng, -1, 1), uniform({4, 3}, rng, -1, 1)};
            auto loss = [](const auto& ts) {
                using S = std::decay_t<decltype(ts[0].value())>;
                const std::vector<std::pair<std::size_t, std::size_t>> pairs{
                    {0, 0}, {1, 1}, {2, 2}, {3, 3}};
                auto na = row_normalize(ts[0]);
                auto nb = row_normalize(ts[1]);
                return matching_loss(dual_softmax(similarity_matrix(na, nb, S(0.5))), pairs);
            };
            gd::check_inputs(r, in, {0, 1}, loss, tol, kOpStep);
        }
        results.push_back(r);
    }

    {
        GradCheckResult r{"full_model"};
        for (std::size_t s = 0; s < n_seeds; ++s) {
            Rng rng(seed_base + 31 * s + 7);
            ModelConfig cfg;
            cfg.stages = 2;
            cfg.channels = {4, 6, 6};
            cfg.input_height = cfg.input_width = 16;
            cfg.attn_dim = 4;
            cfg.patch.token_grid = 4;
            CstfModel<T> model(cfg, seed_base + s);
            CstfModel<double> ref(cfg, seed_base + s);
            {
                auto it = model.params().begin();
                auto jt = ref.params().begin();
                for (; it != model.params().end(); ++it, ++jt) {
                    for (std::size_t i = 0; i < it->second.size(); ++i)
                        jt->second.data()[i] = static_cast<double>(it->second.data()[i]);
                }
            }
            auto image = Tensor<T>::uniform({1, 16, 16}, rng, 0, 1);
            auto weights = Tensor<T>::uniform({2, 16, 16}, rng, -1, 1);
            auto image_d = gradcheck_detail::widen(image);
            auto weights_d = gradcheck_detail::widen(weights);

            auto loss_t = [&] { return sum_all(mul(model.forward(image).probs, weights)); };
            auto loss_d = [&] { return sum_all(mul(ref.forward(image_d).probs, weights_d)); };

            auto it = model.params().begin();
            auto jt = ref.params().begin();
            for (; it != model.params().end(); ++it, ++jt) {
                model.params().zero_grads();
                backward(loss_t());
                const auto& analytic = it->second.grad();

                std::vector<std::size_t> entries;
                for (std::size_t i = 0; i < 4 && i < it->second.size(); ++i)
                    entries.push_back(rng.uniform_int(it->second.size()));

                NoGradGuard off;
                // the loss sums hundreds of terms, so the difference quotient
                // carries more roundoff than the small-op probes; a larger
                // step and floor keep the oracle noise inside tolerance
                constexpr double h = 2e-6;
                constexpr double floor_val = 1e-2;
                for (std::size_t e : entries) {
                    auto& probe = jt->second;
                    const double keep = probe.data()[e];
                    probe.data()[e] = keep + h;
                    const double fp = loss_d().value();
                    probe.data()[e] = keep - h;
                    const double fm = loss_d().value();
                    probe.data()[e] = keep;
                    const double numeric = (fp - fm) / (2.0 * h);
                    const double err =
                        gradcheck_detail::rel_err(static_cast<double>(analytic[e]), numeric, floor_val);
                    r.max_rel_err = std::max(r.max_rel_err, err);
                    r.pass = r.pass && err < tol;
                }
            }
        }
        results.push_back(r);
    }

    return results;
}

}  // namespace cstf::harness
