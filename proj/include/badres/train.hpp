#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "badres/autograd.hpp"
#include "badres/dataset.hpp"
#include "badres/errors.hpp"
#include "badres/model.hpp"
#include "badres/ops.hpp"

namespace badres {

struct TrainConfig {
    float learning_rate = 1e-4f;
    std::size_t batch_size = 32;
    std::size_t epochs = 5;
    float adam_beta1 = 0.9f;
    float adam_beta2 = 0.999f;
    float adam_epsilon = 1e-8f;
    std::uint64_t seed = 0;
    bool shuffle = true;

    void validate(bool allow_zero_epochs = false) const {
        if (!(learning_rate > 0.0f))
            throw config_error("train: learning_rate must be positive");
        if (batch_size < 1) throw config_error("train: batch_size must be >= 1");
        if (!allow_zero_epochs && epochs < 1)
            throw config_error("train: epochs must be >= 1");
    }
};

struct TrainReport {
    std::vector<double> epoch_loss;     // mean per-sample loss per epoch
    std::vector<double> epoch_seconds;  // wall time per epoch
    TrainConfig config;
    std::string checkpoint;  // set by the harness after saving
};

struct AdamState {
    std::vector<float> m, v;
    std::size_t t = 0;
};

// One Adam update with bias correction. Works elementwise, so identical
// (grad, state) coordinates move identically.
inline void adam_step(std::vector<float>& param, const std::vector<float>& grad,
                      AdamState& state, const TrainConfig& cfg) {
    if (param.size() != grad.size())
        throw usage_error("adam_step: parameter and gradient sizes disagree");
    if (state.m.empty()) {
        state.m.assign(param.size(), 0.0f);
        state.v.assign(param.size(), 0.0f);
    }
    if (state.m.size() != param.size())
        throw usage_error("adam_step: state size does not match parameter");
    state.t += 1;
    const double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.t));
    const double lr = cfg.learning_rate, eps = cfg.adam_epsilon;
    for (std::size_t i = 0; i < param.size(); ++i) {
        const double gi = grad[i];
        const double m = b1 * state.m[i] + (1.0 - b1) * gi;
        const double v = b2 * state.v[i] + (1.0 - b2) * gi * gi;
        state.m[i] = static_cast<float>(m);
        state.v[i] = static_cast<float>(v);
        const double m_hat = m / bc1;
        const double v_hat = v / bc2;
        param[i] = static_cast<float>(param[i] - lr * m_hat / (std::sqrt(v_hat) + eps));
    }
}

class AdamOptimizer {
public:
    AdamOptimizer(const ModelParams& params, TrainConfig cfg)
        : cfg_(cfg), states_(params.entries.size()) {}

    // Applies grads accumulated on the parameters, then clears them.
    void step(ModelParams& params) {
        for (std::size_t i = 0; i < params.entries.size(); ++i) {
            Tensor& t = params.entries[i].second;
            if (!t.has_grad()) continue;
            adam_step(t.mutable_data(), t.grad(), states_[i], cfg_);
            t.zero_grad();
        }
    }

private:
    TrainConfig cfg_;
    std::vector<AdamState> states_;
};

inline Tensor cross_entropy_loss(const Tensor& logits, const std::vector<int>& labels) {
    return cross_entropy_with_logits(logits, labels);
}

// Mini-batch supervised training; updates params in place. Sample order per
// epoch is a pure function of cfg.seed. epochs == 0 is a permitted no-op
// (used by the fine-tune defense to report unchanged metrics).
inline TrainReport train(ModelParams& params, const LabeledDataset& data,
                         const TrainConfig& cfg) {
    cfg.validate(/*allow_zero_epochs=*/true);
    data.validate();
    if (data.count == 0) throw usage_error("train: dataset is empty");
    if (data.height != params.config.image_size || data.width != params.config.image_size ||
        data.channels != params.config.channels)
        throw usage_error("train: dataset geometry " + std::to_string(data.channels) + "x" +
                          std::to_string(data.height) + "x" + std::to_string(data.width) +
                          " does not match model config");

    TrainReport report;
    report.config = cfg;
    AdamOptimizer opt(params, cfg);
    std::mt19937 order_rng = rng::make_engine(cfg.seed);
    std::vector<std::size_t> order(data.count);
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        if (cfg.shuffle) rng::shuffle(order, order_rng);
        double loss_sum = 0.0;
        for (std::size_t start = 0, batch_idx = 0; start < order.size();
             start += cfg.batch_size, ++batch_idx) {
            const std::size_t end = std::min(order.size(), start + cfg.batch_size);
            const std::vector<std::size_t> idx(order.begin() + start, order.begin() + end);
            Tensor batch = data.batch_tensor(idx);
            Tensor logits = model_forward(params, batch);
            Tensor loss = cross_entropy_with_logits(logits, data.batch_labels(idx));
            const float loss_v = loss.item();
            if (!std::isfinite(loss_v))
                throw train_error("training diverged: non-finite loss at epoch " +
                                  std::to_string(epoch) + ", batch " + std::to_string(batch_idx));
            backward(loss);
            opt.step(params);
            loss_sum += static_cast<double>(loss_v) * static_cast<double>(idx.size());
        }
        const auto t1 = std::chrono::steady_clock::now();
        report.epoch_loss.push_back(loss_sum / static_cast<double>(data.count));
        report.epoch_seconds.push_back(std::chrono::duration<double>(t1 - t0).count());
    }
    return report;
}

}  // namespace badres
