#include <catch2/catch_amalgamated.hpp>

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "badres/dataset.hpp"

using namespace badres;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir() {
    const fs::path dir = fs::temp_directory_path() / "badres_dataset_test";
    fs::create_directories(dir);
    return dir;
}

void write_bytes(const fs::path& p, const std::vector<unsigned char>& bytes) {
    std::ofstream f(p, std::ios::binary | std::ios::trunc);
    f.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
}

void push_be32(std::vector<unsigned char>& v, std::uint32_t x) {
    v.push_back(static_cast<unsigned char>(x >> 24));
    v.push_back(static_cast<unsigned char>(x >> 16));
    v.push_back(static_cast<unsigned char>(x >> 8));
    v.push_back(static_cast<unsigned char>(x));
}

}  // namespace

TEST_CASE("idx loader parses images and labels") {
    const fs::path dir = temp_dir();
    std::vector<unsigned char> img;
    push_be32(img, 0x00000803);
    push_be32(img, 2);  // samples
    push_be32(img, 2);  // rows
    push_be32(img, 3);  // cols
    for (int i = 0; i < 12; ++i) img.push_back(static_cast<unsigned char>(i == 0 ? 255 : i));
    std::vector<unsigned char> lbl;
    push_be32(lbl, 0x00000801);
    push_be32(lbl, 2);
    lbl.push_back(7);
    lbl.push_back(1);
    write_bytes(dir / "imgs", img);
    write_bytes(dir / "lbls", lbl);

    LabeledDataset d = load_mnist_idx((dir / "imgs").string(), (dir / "lbls").string());
    CHECK(d.count == 2);
    CHECK(d.height == 2);
    CHECK(d.width == 3);
    CHECK(d.images[0] == 1.0f);  // 255 scales to exactly 1
    CHECK(d.images[1] == Catch::Approx(1.0 / 255.0));
    CHECK(d.labels == std::vector<int>{7, 1});
    CHECK(d.origin_labels == d.labels);
}

TEST_CASE("idx loader rejects bad files with byte offsets") {
    const fs::path dir = temp_dir();
    std::vector<unsigned char> bad_magic;
    push_be32(bad_magic, 0x12345678);
    push_be32(bad_magic, 0);
    push_be32(bad_magic, 2);
    push_be32(bad_magic, 2);
    write_bytes(dir / "bad", bad_magic);
    std::vector<unsigned char> lbl;
    push_be32(lbl, 0x00000801);
    push_be32(lbl, 0);
    write_bytes(dir / "lbl0", lbl);
    try {
        load_mnist_idx((dir / "bad").string(), (dir / "lbl0").string());
        FAIL("expected ingestion_error");
    } catch (const ingestion_error& e) {
        CHECK(std::string(e.what()).find("offset 0") != std::string::npos);
    }

    // truncated image payload
    std::vector<unsigned char> trunc;
    push_be32(trunc, 0x00000803);
    push_be32(trunc, 2);
    push_be32(trunc, 2);
    push_be32(trunc, 3);
    trunc.push_back(0);  // 1 of 12 pixels
    write_bytes(dir / "trunc", trunc);
    std::vector<unsigned char> lbl2;
    push_be32(lbl2, 0x00000801);
    push_be32(lbl2, 2);
    lbl2.push_back(0);
    lbl2.push_back(1);
    write_bytes(dir / "lbl2", lbl2);
    CHECK_THROWS_AS(load_mnist_idx((dir / "trunc").string(), (dir / "lbl2").string()),
                    ingestion_error);

    // count mismatch
    std::vector<unsigned char> img;
    push_be32(img, 0x00000803);
    push_be32(img, 1);
    push_be32(img, 1);
    push_be32(img, 1);
    img.push_back(9);
    write_bytes(dir / "img1", img);
    CHECK_THROWS_AS(load_mnist_idx((dir / "img1").string(), (dir / "lbl2").string()),
                    ingestion_error);
}

TEST_CASE("idx save/load round trip") {
    const fs::path dir = temp_dir();
    LabeledDataset d = generate_synthetic_dataset(3, 5, 14, 99);
    save_idx(d, (dir / "rt_img").string(), (dir / "rt_lbl").string());
    LabeledDataset back = load_mnist_idx((dir / "rt_img").string(), (dir / "rt_lbl").string());
    REQUIRE(back.count == d.count);
    CHECK(back.labels == d.labels);
    // quantization error is at most half a step
    for (std::size_t i = 0; i < d.images.size(); ++i)
        CHECK(std::abs(back.images[i] - d.images[i]) <= 0.5f / 255.0f + 1e-6f);
}

TEST_CASE("synthetic generation is deterministic and sized as requested") {
    LabeledDataset a = generate_synthetic_dataset(10, 100, 28, 5);
    LabeledDataset b = generate_synthetic_dataset(10, 100, 28, 5);
    CHECK(a.count == 1000);
    CHECK(std::memcmp(a.images.data(), b.images.data(),
                      a.images.size() * sizeof(float)) == 0);
    CHECK(a.labels == b.labels);
    LabeledDataset c = generate_synthetic_dataset(10, 100, 28, 6);
    CHECK(std::memcmp(a.images.data(), c.images.data(),
                      a.images.size() * sizeof(float)) != 0);

    for (float v : a.images) {
        CHECK(v >= 0.0f);
        CHECK(v <= 1.0f);
    }
    std::vector<int> per_class(10, 0);
    for (int l : a.labels) per_class[static_cast<std::size_t>(l)]++;
    for (int n : per_class) CHECK(n == 100);
}

TEST_CASE("synthetic classes are separable by nearest centroid") {
    // independent separability oracle: class centroids from train, nearest
    // centroid on held-out data
    LabeledDataset train = generate_synthetic_dataset(10, 100, 28, 21);
    LabeledDataset test = generate_synthetic_dataset(10, 40, 28, 22);
    const std::size_t px = train.sample_size();
    std::vector<double> centroid(10 * px, 0.0);
    std::vector<int> counts(10, 0);
    for (std::size_t i = 0; i < train.count; ++i) {
        const int c = train.labels[i];
        counts[static_cast<std::size_t>(c)]++;
        for (std::size_t j = 0; j < px; ++j)
            centroid[static_cast<std::size_t>(c) * px + j] += train.sample(i)[j];
    }
    for (int c = 0; c < 10; ++c)
        for (std::size_t j = 0; j < px; ++j)
            centroid[static_cast<std::size_t>(c) * px + j] /= counts[static_cast<std::size_t>(c)];

    std::size_t correct = 0;
    for (std::size_t i = 0; i < test.count; ++i) {
        double best = 1e300;
        int best_c = -1;
        for (int c = 0; c < 10; ++c) {
            double dist = 0.0;
            for (std::size_t j = 0; j < px; ++j) {
                const double d = test.sample(i)[j] - centroid[static_cast<std::size_t>(c) * px + j];
                dist += d * d;
            }
            if (dist < best) {
                best = dist;
                best_c = c;
            }
        }
        if (best_c == test.labels[i]) ++correct;
    }
    const double acc = static_cast<double>(correct) / static_cast<double>(test.count);
    INFO("nearest-centroid accuracy " << acc);
    CHECK(acc >= 0.9);
}

TEST_CASE("stratified subsets balance classes deterministically") {
    LabeledDataset d = generate_synthetic_dataset(10, 50, 14, 3);
    LabeledDataset s1 = subset_stratified(d, 100, 8);
    LabeledDataset s2 = subset_stratified(d, 100, 8);
    CHECK(s1.count == 100);
    CHECK(std::memcmp(s1.images.data(), s2.images.data(),
                      s1.images.size() * sizeof(float)) == 0);
    std::vector<int> per_class(10, 0);
    for (int l : s1.labels) per_class[static_cast<std::size_t>(l)]++;
    for (int n : per_class) CHECK(n == 10);
    CHECK_THROWS_AS(subset_stratified(d, 0, 1), usage_error);
    CHECK_THROWS_AS(subset_stratified(d, d.count + 1, 1), usage_error);
}

TEST_CASE("dataset validation catches inconsistent fields") {
    LabeledDataset d = generate_synthetic_dataset(2, 3, 14, 1);
    d.labels.pop_back();
    CHECK_THROWS_AS(d.validate(), usage_error);
}
