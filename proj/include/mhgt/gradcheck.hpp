#pragma once

#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "mhgt/autograd.hpp"
#include "mhgt/errors.hpp"

namespace mhgt {

struct GradCheckResult {
    bool pass = true;
    double max_rel_err = 0.0;
    std::string worst_param;
    std::size_t worst_coord = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
};

// Central-difference check of analytic gradients. `loss(with_grad)` must
// rebuild the forward pass from the current parameter values, and when
// with_grad is set leave d loss / d theta accumulated in each parameter.
// Error metric: |analytic - numeric| / max(1, |analytic|, |numeric|), so
// near-zero gradients are judged on absolute error.
inline GradCheckResult finite_difference_check(const std::function<double(bool)>& loss,
                                               std::span<Parameter* const> params,
                                               double epsilon = 1e-5, double tolerance = 1e-4) {
    for (Parameter* p : params) p->zero_grad();
    const double base = loss(true);
    if (!std::isfinite(base)) {
        throw NumericError("finite_difference_check: non-finite loss at base point");
    }

    std::vector<Tensor> analytic;
    analytic.reserve(params.size());
    for (Parameter* p : params) analytic.push_back(p->grad);

    GradCheckResult result;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Parameter& p = *params[pi];
        for (std::size_t c = 0; c < p.value.size(); ++c) {
            const double saved = p.value[c];
            p.value[c] = saved + epsilon;
            const double up = loss(false);
            p.value[c] = saved - epsilon;
            const double down = loss(false);
            p.value[c] = saved;
            if (!std::isfinite(up) || !std::isfinite(down)) {
                throw NumericError("finite_difference_check: non-finite loss at " + p.name +
                                   "[" + std::to_string(c) + "]");
            }
            const double numeric = (up - down) / (2.0 * epsilon);
            const double a = analytic[pi][c];
            const double denom = std::max({1.0, std::fabs(a), std::fabs(numeric)});
            const double rel = std::fabs(a - numeric) / denom;
            if (rel > result.max_rel_err) {
                result.max_rel_err = rel;
                result.worst_param = p.name;
                result.worst_coord = c;
                result.worst_analytic = a;
                result.worst_numeric = numeric;
            }
        }
    }
    result.pass = result.max_rel_err < tolerance;
    return result;
}

}  // namespace mhgt
