#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "fedconv/autodiff.hpp"

namespace fedconv {

/// Scalar-valued function of a list of variables.
using ScalarFn = std::function<Var<double>(const std::vector<Var<double>>&)>;

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::size_t worst_input = 0;
    std::size_t worst_index = 0;
};

/// Compares reverse-mode gradients against central differences at 64-bit.
/// Relative error is |a-b| / max(1, |a|, |b|).
inline GradCheckResult finite_diff_check(const ScalarFn& fn, const std::vector<Tensor<double>>& point,
                                         double eps = 1e-6) {
    std::vector<Var<double>> vars;
    vars.reserve(point.size());
    for (const auto& t : point) vars.push_back(Var<double>::leaf(t, true));
    for (auto& v : vars) v.zero_grad();
    backward(fn(vars));

    GradCheckResult result;
    NoGradGuard no_grad;
    for (std::size_t i = 0; i < point.size(); ++i) {
        const Tensor<double> analytic = vars[i].grad();
        for (std::size_t j = 0; j < point[i].numel(); ++j) {
            std::vector<Var<double>> shifted;
            shifted.reserve(point.size());
            for (const auto& t : point) shifted.push_back(Var<double>::leaf(t, false));
            const double x0 = point[i][j];
            shifted[i].mutable_value()[j] = x0 + eps;
            const double fp = fn(shifted).value()[0];
            shifted[i].mutable_value()[j] = x0 - eps;
            const double fm = fn(shifted).value()[0];
            const double numeric = (fp - fm) / (2.0 * eps);
            const double a = analytic[j];
            const double err = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
            if (err > result.max_rel_error) result = {err, i, j};
        }
    }
    return result;
}

}  // namespace fedconv
