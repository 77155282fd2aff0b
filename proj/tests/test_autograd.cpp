#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <functional>

#include "badres/autograd.hpp"
#include "badres/gradcheck.hpp"
#include "badres/ops.hpp"

using namespace badres;

TEST_CASE("backward of sum of squares gives 2w") {
    Tensor w({2}, {1, 2}, true);
    Tensor loss = sum_all(multiply(w, w));
    backward(loss);
    CHECK(w.grad()[0] == Catch::Approx(2.0));
    CHECK(w.grad()[1] == Catch::Approx(4.0));
}

TEST_CASE("backward on a constant is an error") {
    Tensor c = Tensor::scalar(3.0f);
    CHECK_THROWS_AS(backward(c), usage_error);
}

TEST_CASE("backward requires a scalar loss") {
    Tensor w({2}, {1, 2}, true);
    Tensor y = multiply(w, w);
    CHECK_THROWS_AS(backward(y), usage_error);
}

TEST_CASE("cross entropy gradient is softmax minus one-hot") {
    Tensor logits({1, 2}, {0, 0}, true);
    Tensor loss = cross_entropy_with_logits(logits, {0});
    CHECK(loss.item() == Catch::Approx(std::log(2.0)));
    backward(loss);
    CHECK(logits.grad()[0] == Catch::Approx(-0.5));
    CHECK(logits.grad()[1] == Catch::Approx(0.5));
}

TEST_CASE("fan-out accumulates like the unrolled graph") {
    Tensor w({3}, {0.5f, -1.5f, 2.0f}, true);
    Tensor shared = multiply(w, w);
    Tensor loss = sum_all(add(shared, shared));  // shared used twice
    backward(loss);
    std::vector<float> grads_shared = w.grad();

    Tensor w2({3}, {0.5f, -1.5f, 2.0f}, true);
    Tensor loss2 = sum_all(add(multiply(w2, w2), multiply(w2, w2)));  // duplicated
    backward(loss2);
    for (std::size_t i = 0; i < 3; ++i)
        CHECK(grads_shared[i] == Catch::Approx(w2.grad()[i]));
}

TEST_CASE("gradients accumulate across separate backward calls") {
    Tensor w({2}, {1, 1}, true);
    Tensor loss = sum_all(w);
    backward(loss);
    backward(loss);
    CHECK(w.grad()[0] == Catch::Approx(2.0));
    w.zero_grad();
    CHECK(!w.has_grad());
}

TEST_CASE("topological order puts inputs before consumers, each once") {
    Tensor a({2}, {1, 2}, true);
    Tensor b = multiply(a, a);
    Tensor c = add(b, a);
    Tensor loss = sum_all(c);
    const std::vector<Tensor> order = topo_order(loss);

    std::vector<const void*> seen;
    for (const Tensor& t : order) {
        if (t.node())
            for (const Tensor& in : t.node()->inputs) {
                bool found = false;
                for (const void* id : seen) found = found || id == in.id();
                CHECK(found);
            }
        for (const void* id : seen) CHECK(id != t.id());
        seen.push_back(t.id());
    }
    CHECK(order.back().id() == loss.id());
}

// ---------------------------------------------------------------------------
// Central-difference checks for every op kind, 20 seeded points each.

namespace {

// Scalarizes an op output by a fixed weighting so no gradient component
// cancels structurally.
Tensor weighted_sum(const Tensor& out, std::uint64_t seed) {
    std::mt19937 g = rng::make_engine(seed);
    Tensor w = Tensor::uniform(out.shape(), 0.25f, 1.0f, g);
    return sum_all(multiply(out, w));
}

void check_op(const char* name, const Shape& point_shape,
              const std::function<Tensor(const Tensor&)>& f, double tol = 1e-3) {
    for (std::uint64_t rep = 0; rep < 20; ++rep) {
        std::mt19937 g = rng::make_engine(1000 + rep);
        Tensor point = Tensor::uniform(point_shape, -1.5f, 1.5f, g);
        const double err = finite_difference_check(f, point);
        INFO(name << " rep " << rep << " err " << err);
        CHECK(err < tol);
    }
}

}  // namespace

TEST_CASE("finite differences validate every op kind") {
    std::mt19937 fixed = rng::make_engine(77);
    const Tensor m1 = Tensor::uniform({4, 3}, -1.0f, 1.0f, fixed);
    const Tensor m2 = Tensor::uniform({2, 3, 4}, -1.0f, 1.0f, fixed);
    const Tensor m3 = Tensor::uniform({2, 4, 3}, -1.0f, 1.0f, fixed);

    check_op("matmul lhs", {2, 4}, [&](const Tensor& x) {
        return weighted_sum(matmul(x, m1), 1);
    });
    check_op("matmul rhs", {4, 3}, [&](const Tensor& x) {
        return weighted_sum(matmul(Tensor::full({2, 4}, 0.7f), x), 2);
    });
    check_op("matmul batched lhs", {2, 3, 4}, [&](const Tensor& x) {
        return weighted_sum(matmul(x, m3), 3);
    });
    check_op("matmul batched rhs", {2, 4, 3}, [&](const Tensor& x) {
        return weighted_sum(matmul(m2, x), 4);
    });
    check_op("matmul shared rhs", {4, 3}, [&](const Tensor& x) {
        return weighted_sum(matmul(m2, x), 5);
    });
    check_op("add lhs", {2, 4, 3}, [&](const Tensor& x) {
        return weighted_sum(add(x, m1.detached()), 6);
    });
    check_op("add broadcast rhs", {3}, [&](const Tensor& x) {
        return weighted_sum(add(m1, x), 7);
    });
    check_op("subtract broadcast rhs", {3}, [&](const Tensor& x) {
        return weighted_sum(subtract(m3, x), 8);
    });
    check_op("multiply lhs", {4, 3}, [&](const Tensor& x) {
        return weighted_sum(multiply(x, m1), 9);
    });
    check_op("multiply broadcast rhs", {3}, [&](const Tensor& x) {
        return weighted_sum(multiply(m1, x), 10);
    });
    check_op("scalar_multiply", {3, 3}, [&](const Tensor& x) {
        return weighted_sum(scalar_multiply(x, -0.37f), 11);
    });
    check_op("layer_norm", {3, 8}, [&](const Tensor& x) {
        return weighted_sum(layer_norm(x), 12);
    });
    check_op("softmax", {3, 5}, [&](const Tensor& x) {
        return weighted_sum(softmax(x), 13);
    });
    check_op("gelu", {4, 4}, [&](const Tensor& x) {
        return weighted_sum(gelu(x), 14);
    });
    check_op("reshape", {2, 6}, [&](const Tensor& x) {
        return weighted_sum(reshape(x, {3, 4}), 15);
    });
    check_op("transpose", {2, 3, 4}, [&](const Tensor& x) {
        return weighted_sum(transpose(x, {2, 0, 1}), 16);
    });
    check_op("concat", {2, 3}, [&](const Tensor& x) {
        return weighted_sum(concat({x, m1.detached()}, 0), 17);
    });
    check_op("slice", {3, 4}, [&](const Tensor& x) {
        return weighted_sum(slice(x, 1, 2), 18);
    });
    check_op("repeat_leading", {2, 3}, [&](const Tensor& x) {
        return weighted_sum(repeat_leading(x, 4), 19);
    });
    check_op("mean", {3, 4}, [&](const Tensor& x) { return mean_all(x); });
    check_op("sum", {3, 4}, [&](const Tensor& x) { return sum_all(x); });
    check_op("cross_entropy", {3, 5}, [&](const Tensor& x) {
        return cross_entropy_with_logits(x, {0, 2, 4});
    });
}

TEST_CASE("composite graph matches finite differences") {
    check_op("attention-like composite", {2, 6}, [&](const Tensor& x) {
        Tensor n = layer_norm(x);
        std::mt19937 g = rng::make_engine(123);
        Tensor w = Tensor::uniform({6, 6}, -0.5f, 0.5f, g);
        Tensor s = softmax(matmul(n, w));
        return weighted_sum(gelu(add(s, n)), 20);
    });
}
