#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "badres/dataset.hpp"
#include "badres/errors.hpp"
#include "badres/rng.hpp"

// Trigger construction and dataset poisoning. Blended mode applies
// x' = (1 - lambda) x + lambda t over the whole image with a scalar lambda;
// paste mode is the same blend with a per-pixel lambda that is 1 inside the
// trigger rectangle and 0 outside, i.e. region replacement.

namespace badres {

enum class TriggerMode { paste, blended };

inline const char* trigger_mode_name(TriggerMode m) {
    return m == TriggerMode::paste ? "paste" : "blended";
}

inline TriggerMode trigger_mode_from_string(const std::string& s) {
    if (s == "paste") return TriggerMode::paste;
    if (s == "blended") return TriggerMode::blended;
    throw config_error("unknown trigger mode '" + s + "' (expected paste|blended)");
}

enum class Corner { bottom_right, bottom_left, top_right, top_left };

inline const char* corner_name(Corner c) {
    switch (c) {
        case Corner::bottom_right: return "bottom-right";
        case Corner::bottom_left: return "bottom-left";
        case Corner::top_right: return "top-right";
        case Corner::top_left: return "top-left";
    }
    return "?";
}

inline Corner corner_from_string(const std::string& s) {
    if (s == "bottom-right") return Corner::bottom_right;
    if (s == "bottom-left") return Corner::bottom_left;
    if (s == "top-right") return Corner::top_right;
    if (s == "top-left") return Corner::top_left;
    throw config_error("unknown corner '" + s + "'");
}

struct TriggerSpec {
    std::vector<float> pattern;  // trigger_size^2 for paste, image-sized for blended
    std::size_t pattern_h = 0;
    std::size_t pattern_w = 0;
    TriggerMode mode = TriggerMode::paste;
    float lambda = 1.0f;  // blended mode only
    Corner corner = Corner::bottom_right;
    int offset_x = 0;  // inward shift from the anchor corner, pixels
    int offset_y = 0;

    void validate(std::size_t img_h, std::size_t img_w) const {
        if (pattern.size() != pattern_h * pattern_w || pattern.empty())
            throw config_error("trigger: pattern size mismatch");
        for (float v : pattern)
            if (v < 0.0f || v > 1.0f)
                throw config_error("trigger: pattern values must lie in [0, 1]");
        if (mode == TriggerMode::blended) {
            if (lambda < 0.0f || lambda > 1.0f)
                throw config_error("trigger: lambda " + std::to_string(lambda) +
                                   " outside [0, 1]");
            if (pattern_h != img_h || pattern_w != img_w)
                throw config_error("trigger: blended pattern must match image size " +
                                   std::to_string(img_h) + "x" + std::to_string(img_w));
        } else {
            const auto [y0, x0] = anchor(img_h, img_w);
            if (y0 < 0 || x0 < 0 || static_cast<std::size_t>(y0) + pattern_h > img_h ||
                static_cast<std::size_t>(x0) + pattern_w > img_w)
                throw config_error("trigger: " + std::to_string(pattern_h) + "x" +
                                   std::to_string(pattern_w) + " patch at " + corner_name(corner) +
                                   " offset (" + std::to_string(offset_x) + ", " +
                                   std::to_string(offset_y) + ") exceeds image bounds " +
                                   std::to_string(img_h) + "x" + std::to_string(img_w));
        }
    }

    // Top-left pixel of the paste rectangle.
    std::pair<long, long> anchor(std::size_t img_h, std::size_t img_w) const {
        const long h = static_cast<long>(img_h), w = static_cast<long>(img_w);
        const long ph = static_cast<long>(pattern_h), pw = static_cast<long>(pattern_w);
        long y0 = 0, x0 = 0;
        switch (corner) {
            case Corner::bottom_right: y0 = h - ph - offset_y; x0 = w - pw - offset_x; break;
            case Corner::bottom_left: y0 = h - ph - offset_y; x0 = offset_x; break;
            case Corner::top_right: y0 = offset_y; x0 = w - pw - offset_x; break;
            case Corner::top_left: y0 = offset_y; x0 = offset_x; break;
        }
        return {y0, x0};
    }
};

struct PoisonConfig {
    float rate = 0.1f;
    int target_label = 0;
    TriggerSpec trigger;
    std::uint64_t seed = 0;

    void validate() const {
        if (rate < 0.0f || rate > 1.0f)
            throw config_error("poison: rate " + std::to_string(rate) + " outside [0, 1]");
        if (target_label < 0)
            throw config_error("poison: target_label must be non-negative");
    }
};

// The four built-in two-color grid patterns, values in {0, 1}.
inline std::vector<float> builtin_trigger_pattern(int id, std::size_t h, std::size_t w) {
    if (id < 1 || id > 4) throw config_error("builtin trigger id must be 1..4");
    std::vector<float> p(h * w, 0.0f);
    const std::size_t cell = std::max<std::size_t>(1, std::min(h, w) / 4);
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            bool on = false;
            switch (id) {
                case 1: on = ((y / cell) + (x / cell)) % 2 == 0; break;  // checker
                case 2: on = ((y / cell) + (x / cell)) % 2 == 1; break;  // inverted checker
                case 3: on = (y / cell) % 2 == 0; break;                 // horizontal stripes
                case 4: on = (x / cell) % 2 == 0; break;                 // vertical stripes
            }
            p[y * w + x] = on ? 1.0f : 0.0f;
        }
    }
    return p;
}

inline TriggerSpec make_builtin_trigger(int id, TriggerMode mode, std::size_t trigger_size,
                                        std::size_t image_size, float lambda,
                                        Corner corner = Corner::bottom_right,
                                        int offset_x = 0, int offset_y = 0) {
    TriggerSpec t;
    t.mode = mode;
    t.lambda = lambda;
    t.corner = corner;
    t.offset_x = offset_x;
    t.offset_y = offset_y;
    const std::size_t side = mode == TriggerMode::blended ? image_size : trigger_size;
    if (side < 2) throw config_error("builtin trigger needs side >= 2 to be two-colored");
    t.pattern_h = t.pattern_w = side;
    t.pattern = builtin_trigger_pattern(id, side, side);
    return t;
}

inline std::vector<TriggerSpec> builtin_triggers(TriggerMode mode, std::size_t trigger_size,
                                                 std::size_t image_size, float lambda) {
    std::vector<TriggerSpec> out;
    for (int id = 1; id <= 4; ++id)
        out.push_back(make_builtin_trigger(id, mode, trigger_size, image_size, lambda));
    return out;
}

// Applies the trigger to one (channels, h, w) image in place; the same 2-D
// pattern is applied to every channel.
inline void apply_trigger_inplace(float* image, std::size_t channels, std::size_t img_h,
                                  std::size_t img_w, const TriggerSpec& t) {
    t.validate(img_h, img_w);
    if (t.mode == TriggerMode::blended) {
        for (std::size_t c = 0; c < channels; ++c) {
            float* plane = image + c * img_h * img_w;
            for (std::size_t i = 0; i < img_h * img_w; ++i)
                plane[i] = (1.0f - t.lambda) * plane[i] + t.lambda * t.pattern[i];
        }
    } else {
        const auto [y0, x0] = t.anchor(img_h, img_w);
        for (std::size_t c = 0; c < channels; ++c) {
            float* plane = image + c * img_h * img_w;
            for (std::size_t py = 0; py < t.pattern_h; ++py)
                for (std::size_t px = 0; px < t.pattern_w; ++px)
                    plane[(static_cast<std::size_t>(y0) + py) * img_w +
                          static_cast<std::size_t>(x0) + px] = t.pattern[py * t.pattern_w + px];
        }
    }
}

inline Tensor apply_trigger(const Tensor& image, const TriggerSpec& t) {
    if (image.rank() != 3)
        throw usage_error("apply_trigger: expected (channels, h, w), got " +
                          shape_str(image.shape()));
    Tensor out = image.detached();
    apply_trigger_inplace(out.mutable_data().data(), out.shape()[0], out.shape()[1],
                          out.shape()[2], t);
    return out;
}

struct PoisonSummary {
    std::size_t n_poisoned = 0;
    // rate > 0 but round(rate * N) == 0: flagged, not an error
    bool rounded_to_zero = false;
    std::vector<std::size_t> indices;  // sorted poisoned sample indices
};

// Poisons round(rate * N) samples chosen uniformly by seed: trigger applied,
// label switched to the target, mask set. Clean samples are untouched;
// poisoned samples replace their originals.
inline LabeledDataset poison_dataset(const LabeledDataset& clean, const PoisonConfig& cfg,
                                     PoisonSummary* summary = nullptr) {
    clean.validate();
    cfg.validate();
    for (std::uint8_t m : clean.poisoned_mask)
        if (m) throw usage_error("poison_dataset: input already contains poisoned samples");
    cfg.trigger.validate(clean.height, clean.width);

    const std::size_t n_poison = static_cast<std::size_t>(
        std::lround(static_cast<double>(cfg.rate) * static_cast<double>(clean.count)));

    LabeledDataset out = clean;
    std::mt19937 g = rng::make_engine(cfg.seed);
    std::vector<std::size_t> picked =
        rng::sample_without_replacement(clean.count, n_poison, g);
    std::sort(picked.begin(), picked.end());

    for (std::size_t i : picked) {
        apply_trigger_inplace(out.sample(i), out.channels, out.height, out.width, cfg.trigger);
        out.labels[i] = cfg.target_label;
        out.poisoned_mask[i] = 1;
    }
    if (summary) {
        summary->n_poisoned = picked.size();
        summary->rounded_to_zero = cfg.rate > 0.0f && picked.empty();
        summary->indices = std::move(picked);
    }
    return out;
}

// Evaluation set for the attack: every sample whose true class differs from
// the target gets the trigger; samples already of the target class are
// dropped. Labels keep their ground-truth values.
inline LabeledDataset make_poisoned_testset(const LabeledDataset& clean_test,
                                            const PoisonConfig& cfg) {
    clean_test.validate();
    cfg.validate();
    cfg.trigger.validate(clean_test.height, clean_test.width);

    std::vector<std::size_t> keep;
    for (std::size_t i = 0; i < clean_test.count; ++i)
        if (clean_test.origin_labels[i] != cfg.target_label) keep.push_back(i);
    if (keep.empty())
        throw usage_error("make_poisoned_testset: every sample belongs to the target class " +
                          std::to_string(cfg.target_label));

    LabeledDataset out = clean_test.select(keep);
    for (std::size_t i = 0; i < out.count; ++i) {
        apply_trigger_inplace(out.sample(i), out.channels, out.height, out.width, cfg.trigger);
        out.poisoned_mask[i] = 1;
    }
    return out;
}

}  // namespace badres
