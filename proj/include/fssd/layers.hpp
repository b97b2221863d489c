#pragma once

#include "fssd/rng.hpp"
#include "fssd/tensor.hpp"

#include <string>
#include <utility>
#include <vector>

namespace fssd {

// Ordered list of named trainable tensors. Order is fixed by construction so
// checkpoints and optimizer state line up deterministically.
template <class T>
struct ParamList {
    std::vector<std::pair<std::string, Tensor<T>>> items;

    void add(std::string name, Tensor<T> t) { items.emplace_back(std::move(name), std::move(t)); }

    std::vector<Tensor<T>> tensors() const {
        std::vector<Tensor<T>> out;
        out.reserve(items.size());
        for (const auto& [_, t] : items) out.push_back(t);
        return out;
    }

    Tensor<T>* find(const std::string& name) {
        for (auto& [n, t] : items)
            if (n == name) return &t;
        return nullptr;
    }
};

namespace init {

// He-uniform fan-in init, deterministic under the given rng
template <class T>
Tensor<T> he_uniform(Shape shape, int64_t fan_in, Rng& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    std::vector<T> data(static_cast<size_t>(shape_numel(shape)));
    for (auto& v : data) v = static_cast<T>(rng.uniform(-bound, bound));
    return Tensor<T>::from(std::move(shape), std::move(data), true);
}

template <class T>
Tensor<T> zeros_param(Shape shape) {
    return Tensor<T>::zeros(std::move(shape), true);
}

} // namespace init

template <class T>
struct Linear {
    Tensor<T> w; // in x out
    Tensor<T> b; // out (undefined when bias-free)

    Linear() = default;
    Linear(int in, int out, Rng& rng, bool bias = true) {
        w = init::he_uniform<T>({in, out}, in, rng);
        if (bias) b = init::zeros_param<T>({out});
    }

    Tensor<T> operator()(const Tensor<T>& x) const {
        auto y = matmul(x, w);
        return b.defined() ? add(y, b) : y;
    }

    void collect(ParamList<T>& ps, const std::string& prefix) const {
        ps.add(prefix + ".w", w);
        if (b.defined()) ps.add(prefix + ".b", b);
    }
};

// plain (non-equivariant) conv layer, used by the decoders
template <class T>
struct Conv2dLayer {
    Tensor<T> w; // O x C x kh x kw
    Tensor<T> b; // O
    int stride = 1, pad = 1;

    Conv2dLayer() = default;
    Conv2dLayer(int in_ch, int out_ch, int ksize, Rng& rng, int stride_ = 1, int pad_ = -1)
        : stride(stride_), pad(pad_ < 0 ? ksize / 2 : pad_) {
        w = init::he_uniform<T>({out_ch, in_ch, ksize, ksize},
                                static_cast<int64_t>(in_ch) * ksize * ksize, rng);
        b = init::zeros_param<T>({out_ch});
    }

    Tensor<T> operator()(const Tensor<T>& x) const { return conv2d(x, w, b, stride, pad); }

    void collect(ParamList<T>& ps, const std::string& prefix) const {
        ps.add(prefix + ".w", w);
        ps.add(prefix + ".b", b);
    }
};

} // namespace fssd
