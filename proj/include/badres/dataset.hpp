#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "badres/errors.hpp"
#include "badres/rng.hpp"
#include "badres/tensor.hpp"

namespace badres {

// Image classification dataset held in memory. Images are flat row-major
// (count, channels, height, width) floats in [0, 1]. poisoned_mask and
// origin_labels track what the poisoning stage did to each sample.
struct LabeledDataset {
    std::size_t count = 0;
    std::size_t channels = 1;
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<float> images;
    std::vector<int> labels;
    std::vector<std::uint8_t> poisoned_mask;
    std::vector<int> origin_labels;

    std::size_t sample_size() const { return channels * height * width; }

    void validate() const {
        if (images.size() != count * sample_size())
            throw usage_error("dataset: image buffer size mismatch");
        if (labels.size() != count || poisoned_mask.size() != count ||
            origin_labels.size() != count)
            throw usage_error("dataset: per-sample field lengths disagree");
    }

    float* sample(std::size_t i) { return images.data() + i * sample_size(); }
    const float* sample(std::size_t i) const { return images.data() + i * sample_size(); }

    // (batch, channels, height, width) tensor for the given sample indices.
    Tensor batch_tensor(const std::vector<std::size_t>& idx) const {
        std::vector<float> data(idx.size() * sample_size());
        for (std::size_t b = 0; b < idx.size(); ++b)
            std::copy(sample(idx[b]), sample(idx[b]) + sample_size(),
                      data.data() + b * sample_size());
        return Tensor({idx.size(), channels, height, width}, std::move(data));
    }

    std::vector<int> batch_labels(const std::vector<std::size_t>& idx) const {
        std::vector<int> out(idx.size());
        for (std::size_t b = 0; b < idx.size(); ++b) out[b] = labels[idx[b]];
        return out;
    }

    LabeledDataset select(const std::vector<std::size_t>& idx) const {
        LabeledDataset out;
        out.count = idx.size();
        out.channels = channels;
        out.height = height;
        out.width = width;
        out.images.resize(idx.size() * sample_size());
        out.labels.resize(idx.size());
        out.poisoned_mask.resize(idx.size());
        out.origin_labels.resize(idx.size());
        for (std::size_t b = 0; b < idx.size(); ++b) {
            std::copy(sample(idx[b]), sample(idx[b]) + sample_size(),
                      out.images.data() + b * sample_size());
            out.labels[b] = labels[idx[b]];
            out.poisoned_mask[b] = poisoned_mask[idx[b]];
            out.origin_labels[b] = origin_labels[idx[b]];
        }
        return out;
    }

    static LabeledDataset from_images(std::size_t channels, std::size_t height,
                                      std::size_t width, std::vector<float> images,
                                      std::vector<int> labels) {
        LabeledDataset d;
        d.count = labels.size();
        d.channels = channels;
        d.height = height;
        d.width = width;
        d.images = std::move(images);
        d.labels = std::move(labels);
        d.poisoned_mask.assign(d.count, 0);
        d.origin_labels = d.labels;
        d.validate();
        return d;
    }
};

// ---------------------------------------------------------------------------
// IDX (the MNIST container format): big-endian magic + dims, then raw bytes.

namespace detail {

constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

inline std::uint32_t read_be32(std::ifstream& f, const std::string& path, std::size_t offset) {
    unsigned char b[4];
    f.read(reinterpret_cast<char*>(b), 4);
    if (f.gcount() != 4)
        throw ingestion_error(path + ": truncated at byte offset " + std::to_string(offset));
    return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) |
           (std::uint32_t(b[2]) << 8) | std::uint32_t(b[3]);
}

inline void write_be32(std::ofstream& f, std::uint32_t v) {
    const unsigned char b[4] = {static_cast<unsigned char>(v >> 24),
                                static_cast<unsigned char>(v >> 16),
                                static_cast<unsigned char>(v >> 8),
                                static_cast<unsigned char>(v)};
    f.write(reinterpret_cast<const char*>(b), 4);
}

}  // namespace detail

inline LabeledDataset load_mnist_idx(const std::string& images_path,
                                     const std::string& labels_path) {
    std::ifstream imf(images_path, std::ios::binary);
    if (!imf) throw ingestion_error("cannot open " + images_path);
    const std::uint32_t im_magic = detail::read_be32(imf, images_path, 0);
    if (im_magic != detail::kIdxImagesMagic)
        throw ingestion_error(images_path + ": bad magic at byte offset 0 (expected 0x00000803)");
    const std::uint32_t n_images = detail::read_be32(imf, images_path, 4);
    const std::uint32_t rows = detail::read_be32(imf, images_path, 8);
    const std::uint32_t cols = detail::read_be32(imf, images_path, 12);

    std::ifstream lbf(labels_path, std::ios::binary);
    if (!lbf) throw ingestion_error("cannot open " + labels_path);
    const std::uint32_t lb_magic = detail::read_be32(lbf, labels_path, 0);
    if (lb_magic != detail::kIdxLabelsMagic)
        throw ingestion_error(labels_path + ": bad magic at byte offset 0 (expected 0x00000801)");
    const std::uint32_t n_labels = detail::read_be32(lbf, labels_path, 4);
    if (n_images != n_labels)
        throw ingestion_error("image count " + std::to_string(n_images) +
                              " does not match label count " + std::to_string(n_labels));

    const std::size_t pixels = std::size_t(n_images) * rows * cols;
    std::vector<unsigned char> raw(pixels);
    imf.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(pixels));
    if (imf.gcount() != static_cast<std::streamsize>(pixels))
        throw ingestion_error(images_path + ": truncated at byte offset " +
                              std::to_string(16 + imf.gcount()));

    std::vector<unsigned char> raw_labels(n_labels);
    lbf.read(reinterpret_cast<char*>(raw_labels.data()), static_cast<std::streamsize>(n_labels));
    if (lbf.gcount() != static_cast<std::streamsize>(n_labels))
        throw ingestion_error(labels_path + ": truncated at byte offset " +
                              std::to_string(8 + lbf.gcount()));

    std::vector<float> images(pixels);
    for (std::size_t i = 0; i < pixels; ++i)
        images[i] = static_cast<float>(raw[i]) * (1.0f / 255.0f);
    std::vector<int> labels(n_labels);
    for (std::size_t i = 0; i < n_labels; ++i) labels[i] = raw_labels[i];

    return LabeledDataset::from_images(1, rows, cols, std::move(images), std::move(labels));
}

// Quantizes [0,1] floats back to bytes; value 1.0 maps to 255.
inline void save_idx(const LabeledDataset& d, const std::string& images_path,
                     const std::string& labels_path) {
    if (d.channels != 1) throw usage_error("idx export supports single-channel images");
    std::ofstream imf(images_path, std::ios::binary | std::ios::trunc);
    if (!imf) throw io_error("cannot open " + images_path + " for writing");
    detail::write_be32(imf, detail::kIdxImagesMagic);
    detail::write_be32(imf, static_cast<std::uint32_t>(d.count));
    detail::write_be32(imf, static_cast<std::uint32_t>(d.height));
    detail::write_be32(imf, static_cast<std::uint32_t>(d.width));
    std::vector<unsigned char> raw(d.images.size());
    for (std::size_t i = 0; i < d.images.size(); ++i) {
        const float v = std::min(1.0f, std::max(0.0f, d.images[i]));
        raw[i] = static_cast<unsigned char>(v * 255.0f + 0.5f);
    }
    imf.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (!imf) throw io_error("write failed for " + images_path);

    std::ofstream lbf(labels_path, std::ios::binary | std::ios::trunc);
    if (!lbf) throw io_error("cannot open " + labels_path + " for writing");
    detail::write_be32(lbf, detail::kIdxLabelsMagic);
    detail::write_be32(lbf, static_cast<std::uint32_t>(d.count));
    for (std::size_t i = 0; i < d.count; ++i)
        lbf.put(static_cast<char>(static_cast<unsigned char>(d.labels[i])));
    if (!lbf) throw io_error("write failed for " + labels_path);
}

// ---------------------------------------------------------------------------
// Synthetic data: one geometric motif per class plus seeded jitter. Serves as
// an offline stand-in for MNIST with the same value range and geometry.

namespace detail {

// Draws class motif c onto a zeroed h*w canvas with unit intensity.
inline void draw_motif(std::vector<float>& img, std::size_t h, std::size_t w, int c,
                       int shift_y, int shift_x) {
    auto set = [&](long y, long x, float v) {
        y += shift_y;
        x += shift_x;
        if (y >= 0 && y < static_cast<long>(h) && x >= 0 && x < static_cast<long>(w))
            img[static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x)] = v;
    };
    const long H = static_cast<long>(h), W = static_cast<long>(w);
    const long cy = H / 2, cx = W / 2;
    const long r = std::min(H, W) / 4;
    switch (c % 10) {
        case 0:  // filled square
            for (long y = cy - r; y <= cy + r; ++y)
                for (long x = cx - r; x <= cx + r; ++x) set(y, x, 1.0f);
            break;
        case 1:  // vertical bar
            for (long y = 2; y < H - 2; ++y)
                for (long x = cx - 2; x <= cx + 2; ++x) set(y, x, 1.0f);
            break;
        case 2:  // horizontal bar
            for (long x = 2; x < W - 2; ++x)
                for (long y = cy - 2; y <= cy + 2; ++y) set(y, x, 1.0f);
            break;
        case 3:  // cross
            for (long y = 2; y < H - 2; ++y)
                for (long x = cx - 2; x <= cx + 2; ++x) set(y, x, 1.0f);
            for (long x = 2; x < W - 2; ++x)
                for (long y = cy - 2; y <= cy + 2; ++y) set(y, x, 1.0f);
            break;
        case 4:  // main diagonal band
            for (long y = 0; y < H; ++y)
                for (long dx = -2; dx <= 2; ++dx) set(y, y * W / H + dx, 1.0f);
            break;
        case 5:  // anti-diagonal band
            for (long y = 0; y < H; ++y)
                for (long dx = -2; dx <= 2; ++dx) set(y, W - 1 - y * W / H + dx, 1.0f);
            break;
        case 6:  // hollow box
            for (long y = cy - r; y <= cy + r; ++y)
                for (long x = cx - r; x <= cx + r; ++x)
                    if (y <= cy - r + 1 || y >= cy + r - 1 || x <= cx - r + 1 || x >= cx + r - 1)
                        set(y, x, 1.0f);
            break;
        case 7:  // T shape
            for (long x = 3; x < W - 3; ++x)
                for (long y = 3; y <= 6; ++y) set(y, x, 1.0f);
            for (long y = 3; y < H - 3; ++y)
                for (long x = cx - 2; x <= cx + 2; ++x) set(y, x, 1.0f);
            break;
        case 8: {  // coarse checkerboard
            const long cell = std::max<long>(3, std::min(H, W) / 7);
            for (long y = 0; y < H; ++y)
                for (long x = 0; x < W; ++x)
                    if (((y / cell) + (x / cell)) % 2 == 0) set(y, x, 1.0f);
            break;
        }
        case 9:  // X shape
            for (long y = 0; y < H; ++y)
                for (long dx = -2; dx <= 2; ++dx) {
                    set(y, y * W / H + dx, 1.0f);
                    set(y, W - 1 - y * W / H + dx, 1.0f);
                }
            break;
    }
}

}  // namespace detail

// Deterministic class-conditional images: per-class motif, random small
// shift, intensity scaling and pixel noise, all driven by one seed.
inline LabeledDataset generate_synthetic_dataset(std::size_t classes,
                                                 std::size_t samples_per_class,
                                                 std::size_t image_size,
                                                 std::uint64_t seed) {
    if (classes < 2) throw config_error("synthetic dataset: need at least 2 classes");
    if (image_size < 12) throw config_error("synthetic dataset: image_size too small");
    std::mt19937 g = rng::make_engine(seed);
    const std::size_t n = classes * samples_per_class;
    const std::size_t px = image_size * image_size;
    std::vector<float> images(n * px, 0.0f);
    std::vector<int> labels(n);

    std::vector<float> canvas(px);
    std::size_t out = 0;
    for (std::size_t c = 0; c < classes; ++c) {
        for (std::size_t s = 0; s < samples_per_class; ++s, ++out) {
            std::fill(canvas.begin(), canvas.end(), 0.0f);
            const int shift_y = static_cast<int>(rng::uniform_index(g, 5)) - 2;
            const int shift_x = static_cast<int>(rng::uniform_index(g, 5)) - 2;
            detail::draw_motif(canvas, image_size, image_size, static_cast<int>(c),
                               shift_y, shift_x);
            const float intensity = rng::uniform_float(g, 0.7f, 1.0f);
            float* dst = images.data() + out * px;
            for (std::size_t i = 0; i < px; ++i) {
                const float noise = rng::uniform_float(g, -0.08f, 0.08f);
                dst[i] = std::min(1.0f, std::max(0.0f, canvas[i] * intensity + noise));
            }
            labels[out] = static_cast<int>(c);
        }
    }
    return LabeledDataset::from_images(1, image_size, image_size, std::move(images),
                                       std::move(labels));
}

// Seeded stratified subset: n samples spread as evenly as possible over the
// classes present.
inline LabeledDataset subset_stratified(const LabeledDataset& d, std::size_t n,
                                        std::uint64_t seed) {
    d.validate();
    if (n == 0 || n > d.count)
        throw usage_error("stratified subset size " + std::to_string(n) +
                          " out of range (dataset has " + std::to_string(d.count) + ")");
    int max_label = 0;
    for (int l : d.labels) max_label = std::max(max_label, l);
    std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(max_label) + 1);
    for (std::size_t i = 0; i < d.count; ++i)
        by_class[static_cast<std::size_t>(d.labels[i])].push_back(i);

    std::mt19937 g = rng::make_engine(seed);
    for (auto& bucket : by_class) rng::shuffle(bucket, g);

    // round-robin over classes until n samples are picked
    std::vector<std::size_t> picked;
    picked.reserve(n);
    std::vector<std::size_t> cursor(by_class.size(), 0);
    while (picked.size() < n) {
        bool advanced = false;
        for (std::size_t c = 0; c < by_class.size() && picked.size() < n; ++c) {
            if (cursor[c] < by_class[c].size()) {
                picked.push_back(by_class[c][cursor[c]++]);
                advanced = true;
            }
        }
        if (!advanced) break;
    }
    std::sort(picked.begin(), picked.end());
    return d.select(picked);
}

}  // namespace badres
