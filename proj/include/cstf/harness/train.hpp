#pragma once

#include <cmath>
#include <cstddef>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "cstf/codec.hpp"
#include "cstf/harness/synthetic.hpp"
#include "cstf/matching.hpp"
#include "cstf/tensor.hpp"

namespace cstf::harness {

struct OptimConfig {
    double learning_rate = 0.2;
    double momentum = 0.9;
    std::size_t steps = 2000;
    double target_loss = 0.05;  // early stop once the mean loss clears this

    void validate() const {
        if (learning_rate < 0.0) throw ConfigError("optimizer: learning rate must be >= 0");
        if (steps < 1) throw ConfigError("optimizer: steps must be >= 1");
        if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("optimizer: momentum in [0, 1)");
    }
};

/// Classic SGD with momentum; velocity buffers keyed by parameter name.
template <typename T>
class SgdOptimizer {
public:
    explicit SgdOptimizer(OptimConfig cfg) : cfg_(cfg) { cfg_.validate(); }

    void step(ParameterStore<T>& params) {
        for (auto& [name, t] : params) {
            auto& vel = velocity_[name];
            if (vel.size() != t.size()) vel.assign(t.size(), T(0));
            const auto& g = t.grad();
            for (std::size_t i = 0; i < t.size(); ++i) {
                vel[i] = static_cast<T>(cfg_.momentum) * vel[i] -
                         static_cast<T>(cfg_.learning_rate) * g[i];
                t.data()[i] += vel[i];
            }
        }
        params.zero_grads();
    }

private:
    OptimConfig cfg_;
    std::map<std::string, std::vector<T>> velocity_;
};

struct TrainResult {
    std::vector<std::pair<std::size_t, double>> loss_log;  // (step, loss)
    double final_loss = 0.0;  // mean loss over the dataset after training
    std::size_t steps_run = 0;
};

/// Mean pixelwise cross entropy of one scene under the current parameters.
template <typename T>
double detection_loss(const CstfModel<T>& model, const SyntheticScene<T>& scene) {
    NoGradGuard off;
    return static_cast<double>(
        mean_neg_log_cells(model.forward(scene.image).probs, label_cells(scene)).value());
}

/// SGD with momentum on the per-pixel cross entropy; one scene per step,
/// cycling through the dataset. Stops early once the freshly evaluated mean
/// loss over all scenes clears the target. Aborts on divergence.
template <typename T>
TrainResult train_detection(CstfModel<T>& model, const std::vector<SyntheticScene<T>>& scenes,
                            const OptimConfig& optim) {
    if (scenes.empty()) throw ContractError("train: empty dataset");
    optim.validate();
    SgdOptimizer<T> opt(optim);
    TrainResult result;

    double rolling = 0.0;
    for (std::size_t step = 0; step < optim.steps; ++step) {
        const auto& scene = scenes[step % scenes.size()];
        model.params().zero_grads();
        auto loss = mean_neg_log_cells(model.forward(scene.image).probs, label_cells(scene));
        const double value = static_cast<double>(loss.value());
        if (!std::isfinite(value)) {
            throw std::runtime_error("training diverged: loss=" + std::to_string(value) +
                                     " at step " + std::to_string(step));
        }
        backward(loss);
        opt.step(model.params());
        result.loss_log.emplace_back(step, value);
        result.steps_run = step + 1;

        rolling += value;
        if ((step + 1) % scenes.size() == 0) {
            rolling /= static_cast<double>(scenes.size());
            if (rolling < optim.target_loss) {
                double fresh = 0.0;
                for (const auto& s : scenes) fresh += detection_loss(model, s);
                fresh /= static_cast<double>(scenes.size());
                if (fresh < optim.target_loss) {
                    result.final_loss = fresh;
                    return result;
                }
            }
            rolling = 0.0;
        }
    }

    double fresh = 0.0;
    for (const auto& s : scenes) fresh += detection_loss(model, s);
    result.final_loss = fresh / static_cast<double>(scenes.size());
    return result;
}

/// Matching objective for a photographed pair: descriptors of both views,
/// dual-softmax confidences, negative log likelihood of the planted
/// diagonal correspondence.
template <typename T>
Tensor<T> matching_pair_loss(const CstfModel<T>& model, const Tensor<T>& image_a,
                             const Tensor<T>& image_b, T tau) {
    auto da = model.descriptors(image_a);
    auto db = model.descriptors(image_b);
    std::vector<std::pair<std::size_t, std::size_t>> diagonal;
    for (std::size_t i = 0; i < da.shape()[0]; ++i) diagonal.emplace_back(i, i);
    return matching_loss(dual_softmax(similarity_matrix(da, db, tau)), diagonal);
}

/// Overfits the matching head on one pair. Same optimizer and divergence
/// contract as detection training.
template <typename T>
TrainResult train_matching(CstfModel<T>& model, const Tensor<T>& image_a, const Tensor<T>& image_b,
                           T tau, const OptimConfig& optim) {
    optim.validate();
    SgdOptimizer<T> opt(optim);
    TrainResult result;
    for (std::size_t step = 0; step < optim.steps; ++step) {
        model.params().zero_grads();
        auto loss = matching_pair_loss(model, image_a, image_b, tau);
        const double value = static_cast<double>(loss.value());
        if (!std::isfinite(value)) {
            throw std::runtime_error("training diverged: loss=" + std::to_string(value) +
                                     " at step " + std::to_string(step));
        }
        backward(loss);
        opt.step(model.params());
        result.loss_log.emplace_back(step, value);
        result.steps_run = step + 1;
        result.final_loss = value;
        if (value < optim.target_loss) break;
    }
    return result;
}

}  // namespace cstf::harness
