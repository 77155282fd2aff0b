#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "badres/autograd.hpp"
#include "badres/errors.hpp"
#include "badres/tensor.hpp"

namespace badres {

// Verification oracle: compares the analytic gradient of a scalar-valued
// tensor function against central finite differences, coordinate by
// coordinate. Differences are formed in 64-bit arithmetic; the analytic path
// (backward) and the numeric path (forward-only evaluations) share nothing
// but the forward op implementations.
//
// Returns max over coordinates of |analytic - central| / max(1, |central|).
inline double finite_difference_check(
    const std::function<Tensor(const Tensor&)>& f, const Tensor& point,
    double epsilon = 1e-3) {
    if (epsilon <= 0.0) throw usage_error("finite_difference_check: epsilon must be positive");

    Tensor x(point.shape(), point.data(), true);
    Tensor loss = f(x);
    if (loss.numel() != 1)
        throw usage_error("finite_difference_check: f must be scalar-valued, got " +
                          shape_str(loss.shape()));
    if (!std::isfinite(loss.item()))
        throw numeric_error("finite_difference_check: non-finite value at base point");
    backward(loss);
    const std::vector<float> analytic = x.has_grad()
                                            ? x.grad()
                                            : std::vector<float>(x.numel(), 0.0f);

    auto eval_at = [&](const std::vector<float>& coords, std::size_t coord_idx) {
        Tensor p(point.shape(), coords, false);
        const double v = static_cast<double>(f(p).item());
        if (!std::isfinite(v))
            throw numeric_error("finite_difference_check: non-finite evaluation at coordinate " +
                                std::to_string(coord_idx));
        return v;
    };

    std::vector<float> coords = point.data();
    double max_rel = 0.0;
    for (std::size_t i = 0; i < coords.size(); ++i) {
        const float saved = coords[i];
        coords[i] = static_cast<float>(static_cast<double>(saved) + epsilon);
        const double up = eval_at(coords, i);
        coords[i] = static_cast<float>(static_cast<double>(saved) - epsilon);
        const double down = eval_at(coords, i);
        coords[i] = saved;
        const double central = (up - down) / (2.0 * epsilon);
        const double rel = std::abs(static_cast<double>(analytic[i]) - central) /
                           std::max(1.0, std::abs(central));
        max_rel = std::max(max_rel, rel);
    }
    return max_rel;
}

}  // namespace badres
