#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>

#include "badres/ops.hpp"

using namespace badres;

namespace {

Tensor t(Shape shape, std::vector<float> data, bool rg = false) {
    return Tensor(std::move(shape), std::move(data), rg);
}

bool same_bits(const Tensor& a, const Tensor& b) {
    return a.shape() == b.shape() &&
           std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(float)) == 0;
}

}  // namespace

TEST_CASE("add computes elementwise sums") {
    Tensor out = add(t({2}, {1, 2}), t({2}, {3, 4}));
    CHECK(out.data() == std::vector<float>{4, 6});
}

TEST_CASE("softmax of equal logits is uniform") {
    Tensor out = softmax(t({2}, {0, 0}));
    CHECK(out.data()[0] == Catch::Approx(0.5));
    CHECK(out.data()[1] == Catch::Approx(0.5));
}

TEST_CASE("matmul of ones matrices") {
    Tensor out = matmul(Tensor::full({2, 3}, 1.0f), Tensor::full({3, 2}, 1.0f));
    REQUIRE(out.shape() == Shape{2, 2});
    for (float v : out.data()) CHECK(v == Catch::Approx(3.0));
}

TEST_CASE("matmul batched with equal leading dims") {
    // two stacked 1x2 @ 2x1 products
    Tensor a = t({2, 1, 2}, {1, 2, 3, 4});
    Tensor b = t({2, 2, 1}, {1, 1, 1, 1});
    Tensor out = matmul(a, b);
    REQUIRE(out.shape() == Shape{2, 1, 1});
    CHECK(out.data()[0] == Catch::Approx(3.0));
    CHECK(out.data()[1] == Catch::Approx(7.0));
}

TEST_CASE("matmul with shared rank-2 rhs broadcasts over the batch") {
    Tensor a = t({2, 1, 2}, {1, 2, 3, 4});
    Tensor b = t({2, 2}, {1, 0, 0, 1});  // identity
    Tensor out = matmul(a, b);
    REQUIRE(out.shape() == Shape{2, 1, 2});
    CHECK(out.data() == std::vector<float>{1, 2, 3, 4});
}

TEST_CASE("shape mismatches name the op and the shapes") {
    try {
        matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 2}));
        FAIL("expected config_error");
    } catch (const config_error& e) {
        const std::string msg = e.what();
        CHECK(msg.find("matmul") != std::string::npos);
        CHECK(msg.find("(2, 3)") != std::string::npos);
        CHECK(msg.find("(2, 2)") != std::string::npos);
    }
    CHECK_THROWS_AS(add(Tensor::zeros({2, 3}), Tensor::zeros({2})), config_error);
    CHECK_THROWS_AS(concat({Tensor::zeros({2, 3}), Tensor::zeros({2, 4})}, 0), config_error);
    CHECK_THROWS_AS(reshape(Tensor::zeros({2, 3}), {7}), config_error);
    CHECK_THROWS_AS(transpose(Tensor::zeros({2, 3}), {0, 0}), config_error);
    CHECK_THROWS_AS(slice(Tensor::zeros({2, 3}), 1, 5), config_error);
}

TEST_CASE("binary ops broadcast a trailing-suffix rhs") {
    Tensor a = t({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor b = t({3}, {10, 20, 30});
    CHECK(add(a, b).data() == std::vector<float>{11, 22, 33, 14, 25, 36});
    CHECK(subtract(a, b).data() == std::vector<float>{-9, -18, -27, -6, -15, -24});
    CHECK(multiply(a, b).data() == std::vector<float>{10, 40, 90, 40, 100, 180});
}

TEST_CASE("scalar_multiply scales every element") {
    CHECK(scalar_multiply(t({3}, {1, -2, 3}), -1.0f).data() ==
          std::vector<float>{-1, 2, -3});
}

TEST_CASE("softmax rows are nonnegative and sum to one") {
    std::mt19937 g = rng::make_engine(11);
    for (int rep = 0; rep < 20; ++rep) {
        Tensor x = Tensor::uniform({4, 7}, -6.0f, 6.0f, g);
        Tensor y = softmax(x);
        for (std::size_t r = 0; r < 4; ++r) {
            double sum = 0.0;
            for (std::size_t c = 0; c < 7; ++c) {
                const float v = y.data()[r * 7 + c];
                CHECK(v >= 0.0f);
                sum += v;
            }
            CHECK(std::abs(sum - 1.0) < 1e-6);
        }
    }
}

TEST_CASE("layer_norm output has zero mean and unit variance per row") {
    std::mt19937 g = rng::make_engine(3);
    Tensor x = Tensor::uniform({5, 16}, -2.0f, 2.0f, g);
    Tensor y = layer_norm(x);
    for (std::size_t r = 0; r < 5; ++r) {
        double mean = 0.0, var = 0.0;
        for (std::size_t c = 0; c < 16; ++c) mean += y.data()[r * 16 + c];
        mean /= 16.0;
        for (std::size_t c = 0; c < 16; ++c) {
            const double d = y.data()[r * 16 + c] - mean;
            var += d * d;
        }
        var /= 16.0;
        CHECK(std::abs(mean) < 1e-5);
        CHECK(var == Catch::Approx(1.0).margin(1e-3));
    }
}

TEST_CASE("transpose permutes axes") {
    Tensor x = t({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor y = transpose(x, {1, 0});
    REQUIRE(y.shape() == Shape{3, 2});
    CHECK(y.data() == std::vector<float>{1, 4, 2, 5, 3, 6});

    // round trip through a rank-3 permutation
    Tensor z = t({2, 2, 2}, {0, 1, 2, 3, 4, 5, 6, 7});
    Tensor w = transpose(transpose(z, {2, 0, 1}), {1, 2, 0});
    CHECK(same_bits(z, w));
}

TEST_CASE("concat joins along the given axis") {
    Tensor a = t({2, 1}, {1, 2});
    Tensor b = t({2, 2}, {3, 4, 5, 6});
    Tensor y = concat({a, b}, 1);
    REQUIRE(y.shape() == Shape{2, 3});
    CHECK(y.data() == std::vector<float>{1, 3, 4, 2, 5, 6});
}

TEST_CASE("slice selects one index and drops the axis") {
    Tensor x = t({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor y = slice(x, 1, 2);
    REQUIRE(y.shape() == Shape{2});
    CHECK(y.data() == std::vector<float>{3, 6});
}

TEST_CASE("repeat_leading tiles along a new first axis") {
    Tensor x = t({2}, {7, 8});
    Tensor y = repeat_leading(x, 3);
    REQUIRE(y.shape() == Shape{3, 2});
    CHECK(y.data() == std::vector<float>{7, 8, 7, 8, 7, 8});
}

TEST_CASE("reductions accumulate correctly") {
    Tensor x = t({4}, {1, 2, 3, 4});
    CHECK(sum_all(x).item() == Catch::Approx(10.0));
    CHECK(mean_all(x).item() == Catch::Approx(2.5));
}

TEST_CASE("forward results are bit-identical across repeated calls") {
    std::mt19937 g = rng::make_engine(5);
    Tensor x = Tensor::uniform({6, 8}, -3.0f, 3.0f, g);
    CHECK(same_bits(softmax(x), softmax(x)));
    CHECK(same_bits(layer_norm(x), layer_norm(x)));
    CHECK(same_bits(gelu(x), gelu(x)));
    Tensor w = Tensor::uniform({8, 8}, -1.0f, 1.0f, g);
    CHECK(same_bits(matmul(x, w), matmul(x, w)));
}

TEST_CASE("forward ops keep finite inputs finite") {
    std::mt19937 g = rng::make_engine(17);
    Tensor x = Tensor::uniform({8, 16}, -30.0f, 30.0f, g);
    CHECK(softmax(x).all_finite());
    CHECK(layer_norm(x).all_finite());
    CHECK(gelu(x).all_finite());
    CHECK(cross_entropy_with_logits(x, std::vector<int>(8, 3)).all_finite());
}

TEST_CASE("tensors reject zero dimensions and length mismatches") {
    CHECK_THROWS_AS(Tensor::zeros({0, 3}), usage_error);
    CHECK_THROWS_AS(Tensor({2}, {1, 2, 3}), usage_error);
}
