#pragma once

#include "fssd/rng.hpp"
#include "fssd/tensor.hpp"

#include <functional>
#include <vector>

namespace testutil {

using fssd::Rng;
using fssd::Tensor;

inline Tensor<double> random_tensor(fssd::Shape shape, Rng& rng, bool requires_grad = true,
                                    double lo = -1.0, double hi = 1.0) {
    std::vector<double> data(static_cast<size_t>(fssd::shape_numel(shape)));
    for (auto& v : data) v = rng.uniform(lo, hi);
    return Tensor<double>::from(std::move(shape), std::move(data), requires_grad);
}

// Central finite differences against the recorded gradient.
//
// `build` must construct the scalar loss from the current contents of
// `leaves`; it is re-invoked after each coordinate perturbation, so it must
// not cache intermediate tensors. Returns the maximum relative error seen.
inline double max_grad_rel_err(std::vector<Tensor<double>> leaves,
                               const std::function<Tensor<double>()>& build,
                               int max_coords_per_leaf = 24, uint64_t seed = 7,
                               double h = 1e-6) {
    for (auto& l : leaves) l.zero_grad();
    auto loss = build();
    fssd::backward(loss);
    std::vector<std::vector<double>> grads;
    for (auto& l : leaves) {
        if (l.has_grad())
            grads.emplace_back(l.grad().begin(), l.grad().end());
        else
            grads.emplace_back(static_cast<size_t>(l.numel()), 0.0);
    }

    Rng rng(seed);
    double worst = 0.0;
    for (size_t li = 0; li < leaves.size(); ++li) {
        auto& leaf = leaves[li];
        const int64_t n = leaf.numel();
        std::vector<int64_t> coords;
        if (n <= max_coords_per_leaf) {
            for (int64_t i = 0; i < n; ++i) coords.push_back(i);
        } else {
            for (int i = 0; i < max_coords_per_leaf; ++i)
                coords.push_back(rng.uniform_int(static_cast<int>(n)));
        }
        for (int64_t ci : coords) {
            auto data = leaf.raw_data();
            const double orig = data[static_cast<size_t>(ci)];
            data[static_cast<size_t>(ci)] = orig + h;
            const double fp = build().item();
            data[static_cast<size_t>(ci)] = orig - h;
            const double fm = build().item();
            data[static_cast<size_t>(ci)] = orig;
            const double fd = (fp - fm) / (2.0 * h);
            const double an = grads[li][static_cast<size_t>(ci)];
            const double err = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-6});
            worst = std::max(worst, err);
        }
    }
    return worst;
}

} // namespace testutil
