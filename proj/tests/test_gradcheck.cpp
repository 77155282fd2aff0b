#include <catch2/catch_amalgamated.hpp>

#include "badres/gradcheck.hpp"
#include "badres/ops.hpp"

using namespace badres;

TEST_CASE("gradcheck on sum of squares is tight") {
    Tensor point({2}, {1, 2});
    const double err = finite_difference_check(
        [](const Tensor& w) { return sum_all(multiply(w, w)); }, point);
    CHECK(err < 1e-4);
}

TEST_CASE("gradcheck on a linear function is near-exact") {
    std::mt19937 g = rng::make_engine(9);
    Tensor point = Tensor::uniform({5}, -1.0f, 1.0f, g);
    const double err =
        finite_difference_check([](const Tensor& w) { return sum_all(w); }, point);
    CHECK(err < 1e-4);
}

TEST_CASE("gradcheck on a layer-norm composite stays within tolerance") {
    std::mt19937 g = rng::make_engine(42);
    Tensor point = Tensor::uniform({3, 8}, -2.0f, 2.0f, g);
    Tensor w = Tensor::uniform({3, 8}, 0.2f, 1.0f, g);
    const double err = finite_difference_check(
        [&](const Tensor& x) { return sum_all(multiply(gelu(layer_norm(x)), w)); }, point);
    CHECK(err < 1e-3);
}

TEST_CASE("gradcheck reports non-finite evaluations with the coordinate") {
    Tensor point({2}, {1.0f, 1e30f});
    try {
        finite_difference_check(
            [](const Tensor& w) { return sum_all(multiply(w, w)); }, point);
        FAIL("expected numeric_error");
    } catch (const numeric_error& e) {
        CHECK(std::string(e.what()).find("non-finite") != std::string::npos);
    }
}

TEST_CASE("gradcheck rejects bad arguments") {
    Tensor point({2}, {1, 2});
    CHECK_THROWS_AS(finite_difference_check(
                        [](const Tensor& w) { return multiply(w, w); }, point),
                    usage_error);  // non-scalar f
    CHECK_THROWS_AS(finite_difference_check(
                        [](const Tensor& w) { return sum_all(w); }, point, 0.0),
                    usage_error);  // bad epsilon
}
