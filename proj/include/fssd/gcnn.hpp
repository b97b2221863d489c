#pragma once

#include "fssd/layers.hpp"
#include "fssd/tensor.hpp"

#include <string>
#include <vector>

namespace fssd::gcnn {

// The p4 group axis is ordered (e, r, r^2, r^3) with r a counterclockwise
// quarter turn. Group features are tensors of shape B x C x 4 x H x W.

namespace detail {

template <class T>
void rotate_plane_ccw(const T* in, int k, int times, T* out, std::vector<T>& scratch) {
    // k x k plane rotated `times` quarter turns counterclockwise
    scratch.assign(in, in + static_cast<size_t>(k) * k);
    std::vector<T> tmp(static_cast<size_t>(k) * k);
    for (int t = 0; t < times; ++t) {
        fssd::detail::rot90_plane(scratch.data(), k, k, tmp.data());
        std::swap(scratch, tmp);
    }
    std::copy(scratch.begin(), scratch.end(), out);
}

} // namespace detail

// Expands a lifting kernel O x C x k x k to (4O) x C x k x k where expanded
// output channel o*4+j holds the kernel rotated j quarter turns.
template <class T>
Tensor<T> p4_lift_kernel(const Tensor<T>& k) {
    if (k.rank() != 4 || k.dim(2) != k.dim(3))
        throw ShapeError("p4_lift_kernel expects OxCxkxk");
    const int O = k.dim(0), C = k.dim(1), ks = k.dim(2);
    const int plane = ks * ks;
    Buf<T> value = fssd::detail::uninit_buf<T>(static_cast<int64_t>(4) * O * C * plane);
    const T* src = k.data().data();
    std::vector<T> scratch;
    for (int o = 0; o < O; ++o)
        for (int j = 0; j < 4; ++j)
            for (int c = 0; c < C; ++c)
                detail::rotate_plane_ccw(src + (static_cast<int64_t>(o) * C + c) * plane, ks, j,
                                         value.data() +
                                             ((static_cast<int64_t>(o) * 4 + j) * C + c) * plane,
                                         scratch);
    auto kn = k.node();
    return fssd::detail::make_op<T>(
        "p4_lift_kernel", {4 * O, C, ks, ks}, std::move(value), {k},
        [kn, O, C, ks, plane](fssd::detail::Node<T>& self) {
            if (!kn->requires_grad) return;
            kn->ensure_grad();
            std::vector<T> scratch, rotated(static_cast<size_t>(plane));
            for (int o = 0; o < O; ++o)
                for (int j = 0; j < 4; ++j)
                    for (int c = 0; c < C; ++c) {
                        // rotate the gradient plane back
                        detail::rotate_plane_ccw(
                            self.grad.data() + ((static_cast<int64_t>(o) * 4 + j) * C + c) * plane,
                            ks, (4 - j) % 4, rotated.data(), scratch);
                        T* dst = kn->grad.data() + (static_cast<int64_t>(o) * C + c) * plane;
                        for (int i = 0; i < plane; ++i) dst[i] += rotated[static_cast<size_t>(i)];
                    }
        });
}

// Expands a group-conv kernel O x C x 4 x k x k to (4O) x (4C) x k x k:
// expanded[o*4+j][c*4+g] = rot90^j(kernel[o][c][(g-j) mod 4]).
template <class T>
Tensor<T> p4_group_kernel(const Tensor<T>& k) {
    if (k.rank() != 5 || k.dim(2) != 4 || k.dim(3) != k.dim(4))
        throw ShapeError("p4_group_kernel expects OxCx4xkxk");
    const int O = k.dim(0), C = k.dim(1), ks = k.dim(3);
    const int plane = ks * ks;
    Buf<T> value = fssd::detail::uninit_buf<T>(static_cast<int64_t>(16) * O * C * plane);
    const T* src = k.data().data();
    std::vector<T> scratch;
    for (int o = 0; o < O; ++o)
        for (int j = 0; j < 4; ++j)
            for (int c = 0; c < C; ++c)
                for (int g = 0; g < 4; ++g) {
                    const int gg = (g - j + 4) % 4;
                    const T* plane_src =
                        src + ((static_cast<int64_t>(o) * C + c) * 4 + gg) * plane;
                    T* plane_dst = value.data() +
                                   ((static_cast<int64_t>(o) * 4 + j) * (C * 4) + c * 4 + g) * plane;
                    detail::rotate_plane_ccw(plane_src, ks, j, plane_dst, scratch);
                }
    auto kn = k.node();
    return fssd::detail::make_op<T>(
        "p4_group_kernel", {4 * O, 4 * C, ks, ks}, std::move(value), {k},
        [kn, O, C, ks, plane](fssd::detail::Node<T>& self) {
            if (!kn->requires_grad) return;
            kn->ensure_grad();
            std::vector<T> scratch, rotated(static_cast<size_t>(plane));
            for (int o = 0; o < O; ++o)
                for (int j = 0; j < 4; ++j)
                    for (int c = 0; c < C; ++c)
                        for (int g = 0; g < 4; ++g) {
                            const int gg = (g - j + 4) % 4;
                            detail::rotate_plane_ccw(
                                self.grad.data() +
                                    ((static_cast<int64_t>(o) * 4 + j) * (C * 4) + c * 4 + g) *
                                        plane,
                                ks, (4 - j) % 4, rotated.data(), scratch);
                            T* dst = kn->grad.data() +
                                     ((static_cast<int64_t>(o) * C + c) * 4 + gg) * plane;
                            for (int i = 0; i < plane; ++i) dst[i] += rotated[static_cast<size_t>(i)];
                        }
        });
}

// Z^2 -> p4 lifting convolution. x: B x C x H x W -> B x O x 4 x H' x W'.
template <class T>
Tensor<T> lift_conv(const Tensor<T>& x, const Tensor<T>& k, const Tensor<T>& bias, int pad) {
    const int B = x.dim(0), O = k.dim(0);
    auto expanded = p4_lift_kernel(k);
    auto eb = bias.defined() ? repeat_interleave(bias, 4) : Tensor<T>();
    auto y = conv2d(x, expanded, eb, 1, pad);
    return reshape(y, {B, O, 4, y.dim(2), y.dim(3)});
}

// p4 -> p4 group convolution. x: B x C x 4 x H x W -> B x O x 4 x H' x W'.
template <class T>
Tensor<T> group_conv(const Tensor<T>& x, const Tensor<T>& k, const Tensor<T>& bias, int pad) {
    if (x.rank() != 5 || x.dim(2) != 4) throw ShapeError("group_conv expects BxCx4xHxW input");
    const int B = x.dim(0), C = x.dim(1), H = x.dim(3), W = x.dim(4);
    const int O = k.dim(0);
    auto flat = reshape(x, {B, C * 4, H, W});
    auto expanded = p4_group_kernel(k);
    auto eb = bias.defined() ? repeat_interleave(bias, 4) : Tensor<T>();
    auto y = conv2d(flat, expanded, eb, 1, pad);
    return reshape(y, {B, O, 4, y.dim(2), y.dim(3)});
}

// cyclic shift of the group axis by `shift` (for equivariance checks)
template <class T>
Tensor<T> roll_group(const Tensor<T>& x, int shift) {
    if (x.rank() != 5 || x.dim(2) != 4) throw ShapeError("roll_group expects BxCx4xHxW");
    shift = ((shift % 4) + 4) % 4;
    if (shift == 0) return x;
    std::vector<Tensor<T>> parts;
    parts.push_back(slice(x, 2, 4 - shift, shift));
    parts.push_back(slice(x, 2, 0, 4 - shift));
    return concat(parts, 2);
}

// ---------------------------------------------------------------------------
// Backbone
// ---------------------------------------------------------------------------

struct BackboneConfig {
    int stem_channels = 8;
    std::vector<int> stage_channels = {8, 16, 32};
    int embed_dim = 64;
};

template <class T>
struct LiftConvLayer {
    Tensor<T> w, b;
    int pad = 1;
    LiftConvLayer() = default;
    LiftConvLayer(int in_ch, int out_ch, int ks, Rng& rng)
        : pad(ks / 2) {
        w = init::he_uniform<T>({out_ch, in_ch, ks, ks}, static_cast<int64_t>(in_ch) * ks * ks,
                                rng);
        b = init::zeros_param<T>({out_ch});
    }
    Tensor<T> operator()(const Tensor<T>& x) const { return lift_conv(x, w, b, pad); }
    void collect(ParamList<T>& ps, const std::string& prefix) const {
        ps.add(prefix + ".w", w);
        ps.add(prefix + ".b", b);
    }
};

template <class T>
struct GroupConvLayer {
    Tensor<T> w, b;
    int pad = 1;
    GroupConvLayer() = default;
    GroupConvLayer(int in_ch, int out_ch, int ks, Rng& rng)
        : pad(ks / 2) {
        w = init::he_uniform<T>({out_ch, in_ch, 4, ks, ks},
                                static_cast<int64_t>(in_ch) * 4 * ks * ks, rng);
        b = init::zeros_param<T>({out_ch});
    }
    Tensor<T> operator()(const Tensor<T>& x) const { return group_conv(x, w, b, pad); }
    void collect(ParamList<T>& ps, const std::string& prefix) const {
        ps.add(prefix + ".w", w);
        ps.add(prefix + ".b", b);
    }
};

// conv -> relu -> conv plus skip; 1x1 projection when the width changes
template <class T>
struct ResBlock {
    GroupConvLayer<T> conv1, conv2;
    GroupConvLayer<T> proj;
    bool has_proj = false;

    ResBlock() = default;
    ResBlock(int in_ch, int out_ch, Rng& rng)
        : conv1(in_ch, out_ch, 3, rng), conv2(out_ch, out_ch, 3, rng) {
        if (in_ch != out_ch) {
            proj = GroupConvLayer<T>(in_ch, out_ch, 1, rng);
            has_proj = true;
        }
    }

    Tensor<T> operator()(const Tensor<T>& x) const {
        auto y = conv2(relu(conv1(x)));
        auto s = has_proj ? proj(x) : x;
        return relu(add(y, s));
    }

    void collect(ParamList<T>& ps, const std::string& prefix) const {
        conv1.collect(ps, prefix + ".conv1");
        conv2.collect(ps, prefix + ".conv2");
        if (has_proj) proj.collect(ps, prefix + ".proj");
    }
};

// p4-equivariant backbone. Downsampling between stages uses 2x2 average
// pooling (strided convolution on an even grid would break exact quarter-turn
// equivariance), and the final pooling averages over the group axis as well,
// which makes the embedding exactly rot90-invariant.
template <class T>
struct Backbone {
    BackboneConfig cfg;
    LiftConvLayer<T> stem;
    std::vector<ResBlock<T>> blocks;
    Linear<T> head;

    Backbone() = default;
    Backbone(const BackboneConfig& config, Rng& rng) : cfg(config) {
        stem = LiftConvLayer<T>(1, cfg.stem_channels, 3, rng);
        int in_ch = cfg.stem_channels;
        for (int out_ch : cfg.stage_channels) {
            blocks.emplace_back(in_ch, out_ch, rng);
            in_ch = out_ch;
        }
        head = Linear<T>(in_ch, cfg.embed_dim, rng);
    }

    // x: B x 1 x H x W with H = W = 32 -> B x embed_dim
    Tensor<T> embed(const Tensor<T>& x) const {
        if (x.rank() != 4 || x.dim(1) != 1 || x.dim(2) != 32 || x.dim(3) != 32)
            throw ShapeError("backbone expects B x 1 x 32 x 32 input");
        auto h = relu(stem(x));
        for (size_t i = 0; i < blocks.size(); ++i) {
            if (i > 0) h = avg_pool2x2(h);
            h = blocks[i](h);
        }
        // mean over group axis and both spatial axes
        const int B = h.dim(0), C = h.dim(1);
        const int64_t inner = h.numel() / (static_cast<int64_t>(B) * C);
        auto pooled = reshape(sum_last(reshape(h, {B, C, static_cast<int>(inner)})), {B, C});
        return head(scale(pooled, T(1) / static_cast<T>(inner)));
    }

    void collect(ParamList<T>& ps, const std::string& prefix) const {
        stem.collect(ps, prefix + ".stem");
        for (size_t i = 0; i < blocks.size(); ++i)
            blocks[i].collect(ps, prefix + ".stage" + std::to_string(i));
        head.collect(ps, prefix + ".head");
    }

    // trainable parameter count
    int64_t param_count() const {
        ParamList<T> ps;
        collect(ps, "bb");
        int64_t n = 0;
        for (const auto& [_, t] : ps.items) n += t.numel();
        return n;
    }

    // parameter count of a plain CNN with 4x channels everywhere (the
    // non-equivariant network with matched feature width)
    int64_t plain_4x_param_count() const {
        int64_t n = 0;
        // stem: (4*stem) x 1 x 3 x 3 (+bias)
        n += static_cast<int64_t>(4 * cfg.stem_channels) * 1 * 9 + 4 * cfg.stem_channels;
        int in_ch = 4 * cfg.stem_channels;
        for (int oc : cfg.stage_channels) {
            const int out_ch = 4 * oc;
            n += static_cast<int64_t>(out_ch) * in_ch * 9 + out_ch;      // conv1
            n += static_cast<int64_t>(out_ch) * out_ch * 9 + out_ch;     // conv2
            if (in_ch != out_ch) n += static_cast<int64_t>(out_ch) * in_ch + out_ch; // proj
            in_ch = out_ch;
        }
        n += static_cast<int64_t>(in_ch) * cfg.embed_dim + cfg.embed_dim; // head
        return n;
    }
};

} // namespace fssd::gcnn
