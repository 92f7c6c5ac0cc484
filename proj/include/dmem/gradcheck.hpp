#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "dmem/tensor.hpp"

namespace dmem {

struct GradCheckResult {
    double max_rel_err = 0.0;
    double max_abs_err = 0.0;
    std::string worst;  // "param_name[i]" of the worst entry
    bool ok(double tol) const { return max_rel_err <= tol; }
};

// Central-difference check of analytic gradients already stored in each
// parameter's grad buffer. `loss_fn` must rebuild the loss from scratch on
// every call (it reads the current parameter data). Relative error uses
// |a - n| / max(|a|, |n|, floor). The floor matters: central differences in
// float64 carry rounding noise of roughly eps * |loss| / h (~1e-10 at h=1e-5),
// so gradient entries smaller than ~1e-6 cannot be resolved to 0.1% relative
// accuracy by any correct implementation. Entries under the floor are in
// effect checked absolutely at floor * tol, which still catches formula bugs
// (those produce errors at the scale of the gradient itself).
template <typename T>
GradCheckResult finite_diff_check(const std::vector<std::pair<std::string, Tensor<T>>>& params,
                                  const std::function<double()>& loss_fn,
                                  double h = 1e-5, double floor_ptr = 1e-6) {
    GradCheckResult res;
    for (const auto& [name, p] : params) {
        if (!p.grad) continue;
        for (size_t i = 0; i < p.numel(); ++i) {
            const T saved = (*p.data)[i];
            (*p.data)[i] = saved + static_cast<T>(h);
            const double lp = loss_fn();
            (*p.data)[i] = saved - static_cast<T>(h);
            const double lm = loss_fn();
            (*p.data)[i] = saved;
            const double numeric = (lp - lm) / (2.0 * h);
            const double analytic = static_cast<double>((*p.grad)[i]);
            const double abs_err = std::abs(analytic - numeric);
            const double denom = std::max({std::abs(analytic), std::abs(numeric), floor_ptr});
            const double rel = abs_err / denom;
            if (rel > res.max_rel_err) {
                res.max_rel_err = rel;
                res.worst = name + "[" + std::to_string(i) + "]";
            }
            res.max_abs_err = std::max(res.max_abs_err, abs_err);
        }
    }
    return res;
}

} // namespace dmem
