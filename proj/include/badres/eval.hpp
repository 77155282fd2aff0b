#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "badres/dataset.hpp"
#include "badres/errors.hpp"
#include "badres/model.hpp"
#include "badres/parallel.hpp"
#include "badres/poison.hpp"
#include "badres/train.hpp"

// Attack metrics and the two defenses: fine-tuning on clean data and
// entropy-based input screening (random clean overlays; confident i.e.
// low-entropy predictions under perturbation point at a trigger).

namespace badres {

struct RunMetrics {
    double asr = -1.0;  // fraction of triggered inputs classified as the target
    double ba = -1.0;   // accuracy on clean inputs
    std::size_t n_poisoned_eval = 0;
    std::size_t n_clean_eval = 0;
    std::size_t n_attack_success = 0;
    std::size_t n_correct = 0;
};

// Inference over a frozen snapshot, chunked across threads; results merge by
// sample index so the outcome is independent of the thread count.
inline std::vector<int> predict_labels(const ModelParams& params, const LabeledDataset& data,
                                       std::size_t batch_size = 64) {
    data.validate();
    if (data.count == 0) throw usage_error("predict_labels: empty dataset");
    const ModelParams frozen = params.frozen_copy();
    std::vector<int> pred(data.count);
    const std::size_t n_batches = (data.count + batch_size - 1) / batch_size;
    detail::parallel_for(n_batches, 1, [&](std::size_t b0, std::size_t b1) {
        for (std::size_t b = b0; b < b1; ++b) {
            const std::size_t lo = b * batch_size;
            const std::size_t hi = std::min(data.count, lo + batch_size);
            std::vector<std::size_t> idx(hi - lo);
            for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = lo + i;
            Tensor logits = model_forward(frozen, data.batch_tensor(idx));
            const std::size_t classes = logits.shape()[1];
            for (std::size_t i = 0; i < idx.size(); ++i) {
                const float* row = logits.data().data() + i * classes;
                pred[lo + i] = static_cast<int>(
                    std::max_element(row, row + classes) - row);
            }
        }
    });
    return pred;
}

inline double benign_accuracy(const ModelParams& params, const LabeledDataset& clean_test) {
    clean_test.validate();
    if (clean_test.count == 0) throw usage_error("benign_accuracy: empty dataset");
    for (std::uint8_t m : clean_test.poisoned_mask)
        if (m) throw usage_error("benign_accuracy: input contains poisoned samples");
    const std::vector<int> pred = predict_labels(params, clean_test);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < pred.size(); ++i)
        if (pred[i] == clean_test.labels[i]) ++correct;
    return static_cast<double>(correct) / static_cast<double>(pred.size());
}

inline double attack_success_rate(const ModelParams& params,
                                  const LabeledDataset& poisoned_test, int target_label) {
    poisoned_test.validate();
    if (poisoned_test.count == 0) throw usage_error("attack_success_rate: empty dataset");
    for (std::size_t i = 0; i < poisoned_test.count; ++i) {
        if (!poisoned_test.poisoned_mask[i])
            throw usage_error("attack_success_rate: sample " + std::to_string(i) +
                              " is not poisoned");
        if (poisoned_test.origin_labels[i] == target_label)
            throw usage_error("attack_success_rate: sample " + std::to_string(i) +
                              " originally belongs to the target class");
    }
    const std::vector<int> pred = predict_labels(params, poisoned_test);
    std::size_t hits = 0;
    for (int p : pred)
        if (p == target_label) ++hits;
    return static_cast<double>(hits) / static_cast<double>(pred.size());
}

inline RunMetrics evaluate_attack(const ModelParams& params, const LabeledDataset& clean_test,
                                  const LabeledDataset& poisoned_test, int target_label) {
    RunMetrics m;
    m.ba = benign_accuracy(params, clean_test);
    m.n_clean_eval = clean_test.count;
    m.n_correct = static_cast<std::size_t>(std::llround(m.ba * static_cast<double>(clean_test.count)));
    m.asr = attack_success_rate(params, poisoned_test, target_label);
    m.n_poisoned_eval = poisoned_test.count;
    m.n_attack_success =
        static_cast<std::size_t>(std::llround(m.asr * static_cast<double>(poisoned_test.count)));
    return m;
}

// ---------------------------------------------------------------------------
// STRIP-style entropy screening.

inline std::vector<std::size_t> strip_overlay_indices(std::size_t pool_size,
                                                      std::size_t n_overlays,
                                                      std::uint64_t seed) {
    if (n_overlays == 0 || n_overlays > pool_size)
        throw usage_error("strip: overlay pool of " + std::to_string(pool_size) +
                          " cannot supply " + std::to_string(n_overlays) + " overlays");
    std::mt19937 g = rng::make_engine(seed);
    return rng::sample_without_replacement(pool_size, n_overlays, g);
}

// Mean prediction entropy of one input under the given clean overlays,
// blended pixelwise 50/50 by default. Bounded by ln(num_classes).
inline double strip_entropy_with_overlays(const ModelParams& params, const float* image,
                                          const LabeledDataset& overlay_pool,
                                          const std::vector<std::size_t>& overlays,
                                          float blend = 0.5f) {
    if (overlays.empty()) throw usage_error("strip: no overlays given");
    const std::size_t px = overlay_pool.sample_size();
    std::vector<float> batch(overlays.size() * px);
    for (std::size_t i = 0; i < overlays.size(); ++i) {
        const float* ov = overlay_pool.sample(overlays[i]);
        float* dst = batch.data() + i * px;
        for (std::size_t j = 0; j < px; ++j)
            dst[j] = (1.0f - blend) * image[j] + blend * ov[j];
    }
    Tensor input({overlays.size(), overlay_pool.channels, overlay_pool.height,
                  overlay_pool.width},
                 std::move(batch));
    Tensor probs = softmax(model_forward(params, input));
    const std::size_t classes = probs.shape()[1];
    double total = 0.0;
    for (std::size_t r = 0; r < overlays.size(); ++r) {
        const float* row = probs.data().data() + r * classes;
        double h = 0.0;
        for (std::size_t c = 0; c < classes; ++c) {
            const double p = static_cast<double>(row[c]);
            if (p > 0.0) h -= p * std::log(p);
        }
        total += h;
    }
    return total / static_cast<double>(overlays.size());
}

inline double strip_entropy(const ModelParams& params, const float* image,
                            const LabeledDataset& overlay_pool, std::size_t n_overlays,
                            std::uint64_t seed, float blend = 0.5f) {
    const auto overlays = strip_overlay_indices(overlay_pool.count, n_overlays, seed);
    return strip_entropy_with_overlays(params, image, overlay_pool, overlays, blend);
}

struct StripConfig {
    std::size_t n_overlays = 100;
    float blend = 0.5f;
    std::uint64_t seed = 0;
    // Percentile of the entropy distribution to report as a threshold, or
    // negative to skip; the method itself only compares entropies.
    double threshold_percentile = -1.0;
};

struct StripReport {
    std::vector<double> entropies;  // one mean entropy per screened input
    std::size_t n_overlays = 0;
    double mean_entropy = 0.0;
    std::optional<double> threshold;
    double flagged_fraction = 0.0;  // entropies below the threshold
};

// Screens every sample of `inputs`, drawing one seeded overlay set per input.
inline StripReport strip_report(const ModelParams& params, const LabeledDataset& inputs,
                                const LabeledDataset& overlay_pool, const StripConfig& cfg) {
    inputs.validate();
    overlay_pool.validate();
    if (inputs.count == 0) throw usage_error("strip: no inputs to screen");
    const ModelParams frozen = params.frozen_copy();
    StripReport report;
    report.n_overlays = cfg.n_overlays;
    report.entropies.resize(inputs.count);
    detail::parallel_for(inputs.count, 1, [&](std::size_t i0, std::size_t i1) {
        for (std::size_t i = i0; i < i1; ++i) {
            const auto overlays = strip_overlay_indices(
                overlay_pool.count, cfg.n_overlays, rng::mix_seed(cfg.seed, i));
            report.entropies[i] = strip_entropy_with_overlays(frozen, inputs.sample(i),
                                                              overlay_pool, overlays, cfg.blend);
        }
    });
    double sum = 0.0;
    for (double e : report.entropies) sum += e;
    report.mean_entropy = sum / static_cast<double>(report.entropies.size());
    if (cfg.threshold_percentile >= 0.0) {
        std::vector<double> sorted = report.entropies;
        std::sort(sorted.begin(), sorted.end());
        const double rank = cfg.threshold_percentile / 100.0 *
                            static_cast<double>(sorted.size() - 1);
        const std::size_t lo = static_cast<std::size_t>(rank);
        const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
        const double frac = rank - static_cast<double>(lo);
        report.threshold = sorted[lo] * (1.0 - frac) + sorted[hi] * frac;
        std::size_t flagged = 0;
        for (double e : report.entropies)
            if (e < *report.threshold) ++flagged;
        report.flagged_fraction =
            static_cast<double>(flagged) / static_cast<double>(report.entropies.size());
    }
    return report;
}

// ---------------------------------------------------------------------------
// Fine-tuning defense: continue training on clean data only, on a copy.

struct FinetuneResult {
    ModelParams defended;
    RunMetrics before;
    RunMetrics after;
    TrainReport report;
};

inline FinetuneResult finetune_defense(const ModelParams& params,
                                       const LabeledDataset& clean_subset,
                                       const TrainConfig& ft_config,
                                       const LabeledDataset& clean_test,
                                       const LabeledDataset& poisoned_test,
                                       int target_label) {
    clean_subset.validate();
    for (std::uint8_t m : clean_subset.poisoned_mask)
        if (m) throw usage_error("finetune_defense: fine-tune data contains poisoned samples");
    FinetuneResult result;
    result.before = evaluate_attack(params, clean_test, poisoned_test, target_label);
    result.defended = params.clone();
    result.report = train(result.defended, clean_subset, ft_config);
    result.after = evaluate_attack(result.defended, clean_test, poisoned_test, target_label);
    return result;
}

}  // namespace badres
