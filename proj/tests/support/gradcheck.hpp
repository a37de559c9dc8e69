#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "storynizor/autograd.hpp"
#include "storynizor/rng.hpp"

namespace storynizor::testing {

struct GradCheckResult {
    double max_rel_error = 0.0;
    int checked = 0;
};

// Central differences on `samples` randomly chosen entries of each input.
// The relative error uses max(|a|, |n|, floor) as denominator so entries with
// vanishing gradient do not blow up the ratio.
inline GradCheckResult gradcheck(const std::function<Var<double>()>& loss, std::vector<Var<double>> inputs,
                                 int samples, uint64_t seed = 7, double step = 1e-4, double floor = 1e-6) {
    for (auto& in : inputs) in.zero_grad();
    auto root = loss();
    backward(root);

    GradCheckResult res;
    Rng rng(seed);
    for (auto& in : inputs) {
        const Tensor<double> analytic = in.has_grad() ? in.grad() : Tensor<double>(in.shape());
        const int64_t n = in.numel();
        const int count = static_cast<int>(std::min<int64_t>(samples, n));
        for (int s = 0; s < count; ++s) {
            const int64_t i = count == n ? s : static_cast<int64_t>(rng.uniform_int(static_cast<uint64_t>(n)));
            double& x = in.mutable_value()[i];
            const double saved = x;
            double plus, minus;
            {
                NoGradGuard ng;
                x = saved + step;
                plus = loss().item();
                x = saved - step;
                minus = loss().item();
            }
            x = saved;
            const double numeric = (plus - minus) / (2 * step);
            const double a = analytic[i];
            const double denom = std::max({std::abs(a), std::abs(numeric), floor});
            res.max_rel_error = std::max(res.max_rel_error, std::abs(a - numeric) / denom);
            ++res.checked;
        }
    }
    return res;
}

inline Tensor<double> random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
    Tensor<double> t(std::move(shape));
    for (auto& v : t.data) v = scale * rng.normal();
    return t;
}

inline Tensor<float> random_tensor_f(Shape shape, Rng& rng, double scale = 1.0) {
    Tensor<float> t(std::move(shape));
    for (auto& v : t.data) v = static_cast<float>(scale * rng.normal());
    return t;
}

}  // namespace storynizor::testing
