#pragma once

#include <algorithm>
#include <cblas.h>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <memory>
#include <malloc.h>
#include <mutex>
#include <numeric>
#include <omp.h>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

extern "C" void openblas_set_num_threads(int);

namespace fssd {

using Shape = std::vector<int>;

class ShapeError : public std::runtime_error {
public:
    explicit ShapeError(const std::string& msg) : std::runtime_error("shape error: " + msg) {}
};

class NumericError : public std::runtime_error {
public:
    explicit NumericError(const std::string& msg) : std::runtime_error("numeric error: " + msg) {}
};

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int e : s) n *= e;
    return n;
}

// Dense conv/matmul inner products go through OpenBLAS. We pin BLAS itself to
// one thread and parallelize at the image/episode level with OpenMP instead;
// that keeps results bit-reproducible run to run. The mmap threshold is
// raised so the multi-megabyte activation buffers allocated every step are
// recycled by the allocator instead of being returned to the kernel.
inline void blas_init_once() {
    static std::once_flag flag;
    std::call_once(flag, [] {
#if defined(__x86_64__)
        // On virtualized CPUs with masked model strings OpenBLAS can fall
        // back to its generic SSE2 kernels; pick the AVX-512 path explicitly
        // when the instruction set is actually available.
        if (__builtin_cpu_supports("avx512f")) setenv("OPENBLAS_CORETYPE", "SKYLAKEX", 0);
#endif
        openblas_set_num_threads(1);
#if defined(__GLIBC__)
        mallopt(M_MMAP_THRESHOLD, 1 << 30);
        mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
    });
}

template <class T>
void gemm(bool trans_a, bool trans_b, int m, int n, int k, T alpha, const T* a, int lda,
          const T* b, int ldb, T beta, T* c, int ldc) {
    blas_init_once();
    if constexpr (std::is_same_v<T, float>) {
        cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
                    trans_b ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda, b, ldb, beta, c,
                    ldc);
    } else {
        cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
                    trans_b ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda, b, ldb, beta, c,
                    ldc);
    }
}

// Tape recording is enabled by default and switched off per thread for
// inference passes.
struct GradMode {
    static bool& enabled() {
        thread_local bool on = true;
        return on;
    }
};

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(GradMode::enabled()) { GradMode::enabled() = false; }
    ~NoGradGuard() { GradMode::enabled() = prev; }
};

namespace detail {

// allocator that skips value-initialization; op outputs are fully written
// right after allocation, so the default zero-fill would be pure memset waste
template <class T>
struct uninit_allocator : std::allocator<T> {
    template <class U>
    struct rebind {
        using other = uninit_allocator<U>;
    };
    template <class U, class... Args>
    void construct(U* p, Args&&... args) {
        if constexpr (sizeof...(Args) > 0) ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
    }
};

} // namespace detail

template <class T>
using Buf = std::vector<T, detail::uninit_allocator<T>>;

namespace detail {

template <class T>
Buf<T> uninit_buf(int64_t n) {
    Buf<T> b;
    b.resize(static_cast<size_t>(n));
    return b;
}

template <class T>
void fill_zero(T* p, int64_t n) {
    if (n > (1 << 18)) {
#pragma omp parallel for schedule(static)
        for (int64_t i = 0; i < n; ++i) p[i] = T(0);
    } else {
        std::fill(p, p + n, T(0));
    }
}

template <class T>
struct Node {
    Shape shape;
    std::shared_ptr<Buf<T>> val; // shared so reshape can alias storage
    Buf<T> grad;                 // allocated lazily during backward
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;
    const char* op = "leaf";

    int64_t numel() const { return static_cast<int64_t>(val->size()); }
    T* data() { return val->data(); }
    const T* data() const { return val->data(); }
    void ensure_grad() {
        if (grad.empty()) {
            grad.resize(val->size());
            fill_zero(grad.data(), static_cast<int64_t>(grad.size()));
        }
    }
};

template <class T>
void check_finite(const char* op, const Buf<T>& v) {
    const int64_t n = static_cast<int64_t>(v.size());
    bool ok = true;
    if (n > (1 << 16)) {
#pragma omp parallel for schedule(static) reduction(&& : ok)
        for (int64_t i = 0; i < n; ++i) ok = ok && std::isfinite(v[i]);
    } else {
        for (int64_t i = 0; i < n; ++i)
            if (!std::isfinite(v[i])) {
                ok = false;
                break;
            }
    }
    if (!ok) throw NumericError(std::string("non-finite value produced by op '") + op + "'");
}

} // namespace detail

template <class T>
class Tensor {
public:
    using Node = detail::Node<T>;

    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return from_vector(std::move(shape), {}, requires_grad, T(0));
    }

    static Tensor full(Shape shape, T value) {
        return from_vector(std::move(shape), {}, false, value);
    }

    static Tensor scalar(T value) { return full({1}, value); }

    static Tensor from(Shape shape, std::vector<T> data, bool requires_grad = false) {
        if (shape_numel(shape) != static_cast<int64_t>(data.size()))
            throw ShapeError("data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
        auto n = std::make_shared<Node>();
        n->shape = std::move(shape);
        n->val = std::make_shared<Buf<T>>();
        n->val->assign(data.begin(), data.end());
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }

    static Tensor from_buf(Shape shape, Buf<T> data, bool requires_grad = false) {
        if (shape_numel(shape) != static_cast<int64_t>(data.size()))
            throw ShapeError("buffer length does not match shape " + shape_str(shape));
        auto n = std::make_shared<Node>();
        n->shape = std::move(shape);
        n->val = std::make_shared<Buf<T>>(std::move(data));
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }

    bool defined() const { return static_cast<bool>(n_); }
    const Shape& shape() const { return n_->shape; }
    int rank() const { return static_cast<int>(n_->shape.size()); }
    int dim(int i) const { return n_->shape[static_cast<size_t>(i)]; }
    int64_t numel() const { return n_->numel(); }
    bool requires_grad() const { return n_ && n_->requires_grad; }
    void set_requires_grad(bool v) { n_->requires_grad = v; }

    std::span<const T> data() const { return {n_->data(), static_cast<size_t>(n_->numel())}; }
    // direct write access; only sensible for leaves between training steps
    std::span<T> raw_data() { return {n_->data(), static_cast<size_t>(n_->numel())}; }

    bool has_grad() const { return n_ && !n_->grad.empty(); }
    std::span<const T> grad() const { return {n_->grad.data(), n_->grad.size()}; }
    std::span<T> raw_grad() { return {n_->grad.data(), n_->grad.size()}; }
    void zero_grad() { n_->grad.clear(); }

    T item() const {
        if (numel() != 1) throw ShapeError("item() on non-scalar tensor " + shape_str(shape()));
        return (*n_->val)[0];
    }

    std::shared_ptr<Node> node() const { return n_; }
    explicit Tensor(std::shared_ptr<Node> n) : n_(std::move(n)) {}

    bool same_storage(const Tensor& other) const { return n_ && n_->val == other.n_->val; }

private:
    static Tensor from_vector(Shape shape, std::vector<T> data, bool requires_grad, T fill) {
        auto n = std::make_shared<Node>();
        const int64_t count = shape_numel(shape);
        n->shape = std::move(shape);
        n->val = std::make_shared<Buf<T>>();
        if (data.empty())
            n->val->assign(static_cast<size_t>(count), fill);
        else
            n->val->assign(data.begin(), data.end());
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }

    std::shared_ptr<Node> n_;
};

namespace detail {

template <class T>
Tensor<T> make_op(const char* op, Shape shape, Buf<T> value,
                  std::vector<Tensor<T>> parents, std::function<void(Node<T>&)> backward) {
    check_finite(op, value);
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->val = std::make_shared<Buf<T>>(std::move(value));
    n->op = op;
    bool needs = false;
    for (const auto& p : parents) needs = needs || p.requires_grad();
    if (needs && GradMode::enabled()) {
        n->requires_grad = true;
        n->backward = std::move(backward);
        for (auto& p : parents) n->parents.push_back(p.node());
    }
    return Tensor<T>(std::move(n));
}

// Same as make_op but the result aliases existing storage (reshape).
template <class T>
Tensor<T> make_view(const char* op, Shape shape, const Tensor<T>& parent,
                    std::function<void(Node<T>&)> backward) {
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->val = parent.node()->val;
    n->op = op;
    if (parent.requires_grad() && GradMode::enabled()) {
        n->requires_grad = true;
        n->backward = std::move(backward);
        n->parents.push_back(parent.node());
    }
    return Tensor<T>(std::move(n));
}

} // namespace detail

// ---------------------------------------------------------------------------
// Tape: reverse-topological record of the recorded graph under a root.
// ---------------------------------------------------------------------------

template <class T>
struct Tape {
    std::vector<std::shared_ptr<detail::Node<T>>> order; // forward topological order

    static Tape record(const Tensor<T>& root) {
        Tape tape;
        std::unordered_set<detail::Node<T>*> seen;
        // iterative post-order DFS
        struct Frame {
            std::shared_ptr<detail::Node<T>> node;
            size_t next_child = 0;
        };
        std::vector<Frame> stack;
        if (root.node()) stack.push_back({root.node()});
        while (!stack.empty()) {
            Frame& f = stack.back();
            if (f.next_child == 0 && seen.count(f.node.get())) {
                stack.pop_back();
                continue;
            }
            if (f.next_child < f.node->parents.size()) {
                auto child = f.node->parents[f.next_child++];
                if (!seen.count(child.get())) stack.push_back({std::move(child)});
            } else {
                seen.insert(f.node.get());
                tape.order.push_back(f.node);
                stack.pop_back();
            }
        }
        return tape;
    }

    // Seeds the root with ones and propagates; each node's backward runs at
    // most once, in reverse topological order.
    void backward() {
        if (order.empty()) return;
        auto& root = order.back();
        root->ensure_grad();
        std::fill(root->grad.begin(), root->grad.end(), T(1));
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            auto& n = **it;
            if (n.backward && !n.grad.empty()) n.backward(n);
        }
    }
};

template <class T>
void backward(const Tensor<T>& loss) {
    if (loss.numel() != 1)
        throw ShapeError("backward() expects a scalar loss, got " + shape_str(loss.shape()));
    if (!loss.requires_grad()) return;
    Tape<T>::record(loss).backward();
}

// ---------------------------------------------------------------------------
// Broadcasting helpers (trailing-dimension rules only).
// ---------------------------------------------------------------------------

namespace detail {

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
    const int ra = static_cast<int>(a.size()), rb = static_cast<int>(b.size());
    const int r = std::max(ra, rb);
    Shape out(static_cast<size_t>(r));
    for (int i = 0; i < r; ++i) {
        const int ea = i < ra ? a[static_cast<size_t>(ra - 1 - i)] : 1;
        const int eb = i < rb ? b[static_cast<size_t>(rb - 1 - i)] : 1;
        if (ea != eb && ea != 1 && eb != 1)
            throw ShapeError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
        out[static_cast<size_t>(r - 1 - i)] = std::max(ea, eb);
    }
    return out;
}

// strides of `s` viewed in the broadcast frame `out` (0 where broadcast)
inline std::vector<int64_t> broadcast_strides(const Shape& s, const Shape& out) {
    const int rs = static_cast<int>(s.size()), r = static_cast<int>(out.size());
    std::vector<int64_t> st(static_cast<size_t>(r), 0);
    int64_t acc = 1;
    for (int i = 0; i < rs; ++i) {
        const int idx = rs - 1 - i;
        const int outi = r - 1 - i;
        st[static_cast<size_t>(outi)] = (s[static_cast<size_t>(idx)] == 1) ? 0 : acc;
        acc *= s[static_cast<size_t>(idx)];
    }
    for (int i = 0; i < r; ++i)
        if (out[static_cast<size_t>(i)] == 1) st[static_cast<size_t>(i)] = 0;
    return st;
}

// Applies fn elementwise over the broadcast frame. Adjacent dimensions with
// compatible strides are collapsed so the common cases degrade to flat loops.
template <class T, class F>
Buf<T> broadcast_apply(const Buf<T>& a, const Shape& sa, const Buf<T>& b,
                       const Shape& sb, const Shape& out, F&& fn) {
    std::vector<int64_t> exts;
    std::vector<int64_t> stra_v = broadcast_strides(sa, out);
    std::vector<int64_t> strb_v = broadcast_strides(sb, out);
    std::vector<int64_t> stra, strb;
    for (size_t i = 0; i < out.size(); ++i) {
        const int64_t e = out[i];
        if (e == 1 && out.size() > 1) continue;
        if (!exts.empty()) {
            // collapse when both operands are contiguous across the boundary
            const int64_t k = exts.back();
            if (stra.back() == e * stra_v[i] && strb.back() == e * strb_v[i]) {
                exts.back() = k * e;
                stra.back() = stra_v[i];
                strb.back() = strb_v[i];
                continue;
            }
        }
        exts.push_back(e);
        stra.push_back(stra_v[i]);
        strb.push_back(strb_v[i]);
    }
    if (exts.empty()) {
        exts.push_back(1);
        stra.push_back(0);
        strb.push_back(0);
    }
    Buf<T> res = uninit_buf<T>(shape_numel(out));
    const int nd = static_cast<int>(exts.size());
    std::vector<int64_t> idx(static_cast<size_t>(nd), 0);
    const T* pa = a.data();
    const T* pb = b.data();
    T* pr = res.data();
    int64_t oa = 0, ob = 0;
    const int64_t inner = exts[static_cast<size_t>(nd - 1)];
    const int64_t ia = stra[static_cast<size_t>(nd - 1)];
    const int64_t ib = strb[static_cast<size_t>(nd - 1)];
    while (true) {
        if (ia == 1 && ib == 1) {
            for (int64_t i = 0; i < inner; ++i) *pr++ = fn(pa[oa + i], pb[ob + i]);
        } else if (ia == 1 && ib == 0) {
            const T vb = pb[ob];
            for (int64_t i = 0; i < inner; ++i) *pr++ = fn(pa[oa + i], vb);
        } else if (ia == 0 && ib == 1) {
            const T va = pa[oa];
            for (int64_t i = 0; i < inner; ++i) *pr++ = fn(va, pb[ob + i]);
        } else {
            for (int64_t i = 0; i < inner; ++i) *pr++ = fn(pa[oa + i * ia], pb[ob + i * ib]);
        }
        // advance the outer dimensions
        int d = nd - 2;
        for (; d >= 0; --d) {
            idx[static_cast<size_t>(d)]++;
            oa += stra[static_cast<size_t>(d)];
            ob += strb[static_cast<size_t>(d)];
            if (idx[static_cast<size_t>(d)] < exts[static_cast<size_t>(d)]) break;
            oa -= stra[static_cast<size_t>(d)] * exts[static_cast<size_t>(d)];
            ob -= strb[static_cast<size_t>(d)] * exts[static_cast<size_t>(d)];
            idx[static_cast<size_t>(d)] = 0;
        }
        if (d < 0) break;
    }
    return res;
}

// Reduces `g` (shaped `from`) back onto a tensor shaped `to` by summing the
// broadcast dimensions.
template <class T>
Buf<T> reduce_to_shape(const Buf<T>& g, const Shape& from, const Shape& to) {
    if (from == to) return g;
    Buf<T> out;
    out.assign(static_cast<size_t>(shape_numel(to)), T(0));
    const auto str = broadcast_strides(to, from);
    const int r = static_cast<int>(from.size());
    std::vector<int64_t> idx(static_cast<size_t>(r), 0);
    int64_t off = 0;
    for (size_t lin = 0; lin < g.size(); ++lin) {
        out[static_cast<size_t>(off)] += g[lin];
        for (int d = r - 1; d >= 0; --d) {
            idx[static_cast<size_t>(d)]++;
            off += str[static_cast<size_t>(d)];
            if (idx[static_cast<size_t>(d)] < from[static_cast<size_t>(d)]) break;
            off -= str[static_cast<size_t>(d)] * from[static_cast<size_t>(d)];
            idx[static_cast<size_t>(d)] = 0;
        }
    }
    return out;
}

template <class T>
void accumulate_into(Node<T>& dst, const Buf<T>& g, const Shape& gshape) {
    dst.ensure_grad();
    if (gshape == dst.shape) {
        T* d = dst.grad.data();
        const int64_t n = static_cast<int64_t>(g.size());
        if (n > (1 << 16)) {
#pragma omp parallel for schedule(static)
            for (int64_t i = 0; i < n; ++i) d[i] += g[i];
        } else {
            for (int64_t i = 0; i < n; ++i) d[i] += g[i];
        }
    } else {
        const auto reduced = reduce_to_shape(g, gshape, dst.shape);
        for (size_t i = 0; i < reduced.size(); ++i) dst.grad[i] += reduced[i];
    }
}

} // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary ops with trailing broadcasting.
// ---------------------------------------------------------------------------

namespace detail {

template <class T, class F, class DFa, class DFb>
Tensor<T> binary_op(const char* name, const Tensor<T>& a, const Tensor<T>& b, F fn, DFa dfa,
                    DFb dfb) {
    const Shape out_shape = broadcast_shape(a.shape(), b.shape());
    auto value = broadcast_apply(*a.node()->val, a.shape(), *b.node()->val, b.shape(), out_shape,
                                 fn);
    auto an = a.node();
    auto bn = b.node();
    Shape sa = a.shape(), sb = b.shape();
    return make_op<T>(
        name, out_shape, std::move(value), {a, b},
        [an, bn, sa, sb, out_shape, dfa, dfb](Node<T>& self) {
            if (an->requires_grad) {
                auto ga = broadcast_apply(*an->val, sa, *bn->val, sb, out_shape,
                                          [&](T x, T y) { return dfa(x, y); });
                for (size_t i = 0; i < ga.size(); ++i) ga[i] *= self.grad[i];
                accumulate_into(*an, ga, out_shape);
            }
            if (bn->requires_grad) {
                auto gb = broadcast_apply(*an->val, sa, *bn->val, sb, out_shape,
                                          [&](T x, T y) { return dfb(x, y); });
                for (size_t i = 0; i < gb.size(); ++i) gb[i] *= self.grad[i];
                accumulate_into(*bn, gb, out_shape);
            }
        });
}

} // namespace detail

namespace detail {

template <class T>
void axpy_grad(Node<T>& dst, const Buf<T>& g, T sign) {
    dst.ensure_grad();
    T* d = dst.grad.data();
    const int64_t n = static_cast<int64_t>(g.size());
#pragma omp parallel for schedule(static) if (n > (1 << 17))
    for (int64_t i = 0; i < n; ++i) d[i] += sign * g[i];
}

} // namespace detail

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() == b.shape()) {
        const T* pa = a.data().data();
        const T* pb = b.data().data();
        const int64_t n = a.numel();
        Buf<T> value = detail::uninit_buf<T>(n);
#pragma omp parallel for schedule(static) if (n > (1 << 17))
        for (int64_t i = 0; i < n; ++i) value[static_cast<size_t>(i)] = pa[i] + pb[i];
        auto an = a.node();
        auto bn = b.node();
        return detail::make_op<T>("add", a.shape(), std::move(value), {a, b},
                                  [an, bn](detail::Node<T>& self) {
                                      if (an->requires_grad) detail::axpy_grad(*an, self.grad, T(1));
                                      if (bn->requires_grad) detail::axpy_grad(*bn, self.grad, T(1));
                                  });
    }
    return detail::binary_op<T>(
        "add", a, b, [](T x, T y) { return x + y; }, [](T, T) { return T(1); },
        [](T, T) { return T(1); });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() == b.shape()) {
        const T* pa = a.data().data();
        const T* pb = b.data().data();
        const int64_t n = a.numel();
        Buf<T> value = detail::uninit_buf<T>(n);
#pragma omp parallel for schedule(static) if (n > (1 << 17))
        for (int64_t i = 0; i < n; ++i) value[static_cast<size_t>(i)] = pa[i] - pb[i];
        auto an = a.node();
        auto bn = b.node();
        return detail::make_op<T>("sub", a.shape(), std::move(value), {a, b},
                                  [an, bn](detail::Node<T>& self) {
                                      if (an->requires_grad) detail::axpy_grad(*an, self.grad, T(1));
                                      if (bn->requires_grad) detail::axpy_grad(*bn, self.grad, T(-1));
                                  });
    }
    return detail::binary_op<T>(
        "sub", a, b, [](T x, T y) { return x - y; }, [](T, T) { return T(1); },
        [](T, T) { return T(-1); });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() == b.shape()) {
        const T* pa = a.data().data();
        const T* pb = b.data().data();
        const int64_t n = a.numel();
        Buf<T> value = detail::uninit_buf<T>(n);
#pragma omp parallel for schedule(static) if (n > (1 << 17))
        for (int64_t i = 0; i < n; ++i) value[static_cast<size_t>(i)] = pa[i] * pb[i];
        auto an = a.node();
        auto bn = b.node();
        return detail::make_op<T>(
            "mul", a.shape(), std::move(value), {a, b}, [an, bn](detail::Node<T>& self) {
                const int64_t m = static_cast<int64_t>(self.grad.size());
                if (an->requires_grad) {
                    an->ensure_grad();
                    const T* other = bn->val->data();
                    T* d = an->grad.data();
#pragma omp parallel for schedule(static) if (m > (1 << 17))
                    for (int64_t i = 0; i < m; ++i) d[i] += other[i] * self.grad[static_cast<size_t>(i)];
                }
                if (bn->requires_grad) {
                    bn->ensure_grad();
                    const T* other = an->val->data();
                    T* d = bn->grad.data();
#pragma omp parallel for schedule(static) if (m > (1 << 17))
                    for (int64_t i = 0; i < m; ++i) d[i] += other[i] * self.grad[static_cast<size_t>(i)];
                }
            });
    }
    return detail::binary_op<T>(
        "mul", a, b, [](T x, T y) { return x * y; }, [](T, T y) { return y; },
        [](T x, T) { return x; });
}

template <class T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_op<T>(
        "div", a, b, [](T x, T y) { return x / y; }, [](T, T y) { return T(1) / y; },
        [](T x, T y) { return -x / (y * y); });
}

namespace detail {

template <class T, class F, class DF>
Tensor<T> unary_op(const char* name, const Tensor<T>& a, F fn, DF dfn) {
    const auto& av = *a.node()->val;
    Buf<T> value = uninit_buf<T>(static_cast<int64_t>(av.size()));
    const int64_t n = static_cast<int64_t>(av.size());
    if (n > (1 << 16)) {
#pragma omp parallel for schedule(static)
        for (int64_t i = 0; i < n; ++i) value[static_cast<size_t>(i)] = fn(av[static_cast<size_t>(i)]);
    } else {
        for (int64_t i = 0; i < n; ++i) value[static_cast<size_t>(i)] = fn(av[static_cast<size_t>(i)]);
    }
    auto an = a.node();
    return make_op<T>(name, a.shape(), std::move(value), {a}, [an, dfn](Node<T>& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        const auto& x = *an->val;
        const auto& y = *self.val;
        const int64_t m = static_cast<int64_t>(x.size());
#pragma omp parallel for schedule(static) if (m > (1 << 16))
        for (int64_t i = 0; i < m; ++i)
            an->grad[static_cast<size_t>(i)] +=
                dfn(x[static_cast<size_t>(i)], y[static_cast<size_t>(i)]) * self.grad[static_cast<size_t>(i)];
    });
}

} // namespace detail

template <class T>
Tensor<T> add(const Tensor<T>& a, T c) {
    return detail::unary_op<T>(
        "add_scalar", a, [c](T x) { return x + c; }, [](T, T) { return T(1); });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T c) {
    return detail::unary_op<T>(
        "scale", a, [c](T x) { return x * c; }, [c](T, T) { return c; });
}

template <class T>
Tensor<T> neg(const Tensor<T>& a) {
    return scale(a, T(-1));
}

template <class T>
Tensor<T> relu(const Tensor<T>& a) {
    return detail::unary_op<T>(
        "relu", a, [](T x) { return x > T(0) ? x : T(0); },
        [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& a) {
    return detail::unary_op<T>(
        "sigmoid", a, [](T x) { return T(1) / (T(1) + std::exp(-x)); },
        [](T, T y) { return y * (T(1) - y); });
}

template <class T>
Tensor<T> sqrt_t(const Tensor<T>& a) {
    return detail::unary_op<T>(
        "sqrt", a, [](T x) { return std::sqrt(x); },
        [](T, T y) { return T(0.5) / y; });
}

// clamp from below; gradient passes only where x > c
template <class T>
Tensor<T> clamp_min(const Tensor<T>& a, T c) {
    return detail::unary_op<T>(
        "clamp_min", a, [c](T x) { return x > c ? x : c; },
        [c](T x, T) { return x > c ? T(1) : T(0); });
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2)
        throw ShapeError("matmul expects rank-2 tensors, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    const int m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
    if (k != k2)
        throw ShapeError("matmul inner dimensions disagree: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    Buf<T> value = detail::uninit_buf<T>(static_cast<int64_t>(m) * n);
    gemm<T>(false, false, m, n, k, T(1), a.data().data(), k, b.data().data(), n, T(0),
            value.data(), n);
    auto an = a.node();
    auto bn = b.node();
    return detail::make_op<T>(
        "matmul", {m, n}, std::move(value), {a, b}, [an, bn, m, n, k](detail::Node<T>& self) {
            if (an->requires_grad) {
                an->ensure_grad();
                // dA += dC * B^T
                gemm<T>(false, true, m, k, n, T(1), self.grad.data(), n, bn->val->data(), n, T(1),
                        an->grad.data(), k);
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                // dB += A^T * dC
                gemm<T>(true, false, k, n, m, T(1), an->val->data(), k, self.grad.data(), n, T(1),
                        bn->grad.data(), n);
            }
        });
}

// ---------------------------------------------------------------------------
// conv2d (cross-correlation, no kernel flip) via im2col + GEMM
// ---------------------------------------------------------------------------

namespace detail {

template <class T>
void im2col(const T* img, int C, int H, int W, int kh, int kw, int stride, int pad, int Ho,
            int Wo, T* cols) {
    // cols is (C*kh*kw) x (Ho*Wo), row-major
    const int N = Ho * Wo;
    int row = 0;
    for (int c = 0; c < C; ++c) {
        const T* plane = img + static_cast<int64_t>(c) * H * W;
        for (int ky = 0; ky < kh; ++ky) {
            for (int kx = 0; kx < kw; ++kx, ++row) {
                T* dst = cols + static_cast<int64_t>(row) * N;
                for (int oy = 0; oy < Ho; ++oy) {
                    const int iy = oy * stride - pad + ky;
                    T* drow = dst + static_cast<int64_t>(oy) * Wo;
                    if (iy < 0 || iy >= H) {
                        std::fill(drow, drow + Wo, T(0));
                        continue;
                    }
                    const T* srow = plane + static_cast<int64_t>(iy) * W;
                    if (stride == 1) {
                        const int x0 = std::max(0, pad - kx);
                        const int x1 = std::min(Wo, W + pad - kx);
                        std::fill(drow, drow + std::min(x0, Wo), T(0));
                        if (x1 > x0)
                            std::memcpy(drow + x0, srow + x0 - pad + kx,
                                        static_cast<size_t>(x1 - x0) * sizeof(T));
                        if (x1 < Wo) std::fill(drow + std::max(x1, 0), drow + Wo, T(0));
                    } else {
                        for (int ox = 0; ox < Wo; ++ox) {
                            const int ix = ox * stride - pad + kx;
                            drow[ox] = (ix >= 0 && ix < W) ? srow[ix] : T(0);
                        }
                    }
                }
            }
        }
    }
}

template <class T>
void col2im_add(const T* cols, int C, int H, int W, int kh, int kw, int stride, int pad, int Ho,
                int Wo, T* img) {
    const int N = Ho * Wo;
    int row = 0;
    for (int c = 0; c < C; ++c) {
        T* plane = img + static_cast<int64_t>(c) * H * W;
        for (int ky = 0; ky < kh; ++ky) {
            for (int kx = 0; kx < kw; ++kx, ++row) {
                const T* src = cols + static_cast<int64_t>(row) * N;
                for (int oy = 0; oy < Ho; ++oy) {
                    const int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= H) continue;
                    T* srow = plane + static_cast<int64_t>(iy) * W;
                    const T* crow = src + static_cast<int64_t>(oy) * Wo;
                    for (int ox = 0; ox < Wo; ++ox) {
                        const int ix = ox * stride - pad + kx;
                        if (ix >= 0 && ix < W) srow[ix] += crow[ox];
                    }
                }
            }
        }
    }
}

} // namespace detail

// x: B x C x H x W, k: O x C x kh x kw, bias: O (optional, pass undefined Tensor).
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& k, const Tensor<T>& bias, int stride,
                 int pad) {
    if (x.rank() != 4 || k.rank() != 4)
        throw ShapeError("conv2d expects BxCxHxW input and OxCxKhxKw kernel");
    const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int O = k.dim(0), Ck = k.dim(1), kh = k.dim(2), kw = k.dim(3);
    if (C != Ck)
        throw ShapeError("conv2d channel mismatch: input " + shape_str(x.shape()) + " kernel " +
                         shape_str(k.shape()));
    if (kh % 2 == 0 || kw % 2 == 0) throw ShapeError("conv2d kernels must have odd extents");
    if (pad < 0 || stride < 1) throw ShapeError("conv2d needs pad >= 0 and stride >= 1");
    const int Ho = (H + 2 * pad - kh) / stride + 1;
    const int Wo = (W + 2 * pad - kw) / stride + 1;
    if (Ho < 1 || Wo < 1)
        throw ShapeError("conv2d output extent < 1 for input " + shape_str(x.shape()));
    if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != O))
        throw ShapeError("conv2d bias must have shape [O]");

    const int K = C * kh * kw;
    const int N = Ho * Wo;
    const bool record = GradMode::enabled() && (x.requires_grad() || k.requires_grad() ||
                                                (bias.defined() && bias.requires_grad()));
    // pointwise convolutions skip im2col entirely: the input planes are
    // already the column matrix
    const bool pointwise = (kh == 1 && kw == 1 && stride == 1 && pad == 0);

    Buf<T> value = detail::uninit_buf<T>(static_cast<int64_t>(B) * O * N);
    // cols are kept for the weight gradient when recording; otherwise a
    // per-thread scratch buffer is enough
    auto cols_cache = std::make_shared<Buf<T>>();
    if (record && !pointwise) *cols_cache = detail::uninit_buf<T>(static_cast<int64_t>(B) * K * N);

    const T* xp = x.data().data();
    const T* kp = k.data().data();
    const T* bp = bias.defined() ? bias.data().data() : nullptr;

#pragma omp parallel
    {
        Buf<T> scratch;
        if (!record && !pointwise) scratch = detail::uninit_buf<T>(static_cast<int64_t>(K) * N);
#pragma omp for schedule(static)
        for (int b = 0; b < B; ++b) {
            const T* cols;
            if (pointwise) {
                cols = xp + static_cast<int64_t>(b) * C * H * W;
            } else {
                T* dst = record ? cols_cache->data() + static_cast<int64_t>(b) * K * N
                                : scratch.data();
                detail::im2col(xp + static_cast<int64_t>(b) * C * H * W, C, H, W, kh, kw, stride,
                               pad, Ho, Wo, dst);
                cols = dst;
            }
            T* out = value.data() + static_cast<int64_t>(b) * O * N;
            if (bp) {
                for (int o = 0; o < O; ++o)
                    std::fill(out + static_cast<int64_t>(o) * N, out + static_cast<int64_t>(o + 1) * N,
                              bp[o]);
            }
            gemm<T>(false, false, O, N, K, T(1), kp, K, cols, N, bp ? T(1) : T(0), out, N);
        }
    }

    auto xn = x.node();
    auto kn = k.node();
    auto bn = bias.defined() ? bias.node() : nullptr;
    std::vector<Tensor<T>> parents = {x, k};
    if (bias.defined()) parents.push_back(bias);

    return detail::make_op<T>(
        "conv2d", {B, O, Ho, Wo}, std::move(value), std::move(parents),
        [xn, kn, bn, cols_cache, pointwise, B, C, H, W, O, kh, kw, stride, pad, Ho, Wo, K,
         N](detail::Node<T>& self) {
            const T* gy = self.grad.data();
            const int nthreads = omp_get_max_threads();
            std::vector<std::vector<T>> dw_part;
            if (kn->requires_grad)
                dw_part.assign(static_cast<size_t>(nthreads),
                               std::vector<T>(static_cast<size_t>(O) * K, T(0)));
            std::vector<std::vector<T>> db_part;
            if (bn && bn->requires_grad)
                db_part.assign(static_cast<size_t>(nthreads), std::vector<T>(static_cast<size_t>(O), T(0)));
            const bool need_dx = xn->requires_grad;
            if (need_dx) xn->ensure_grad();

#pragma omp parallel
            {
                const int tid = omp_get_thread_num();
                Buf<T> dcols;
                if (need_dx && !pointwise) dcols = detail::uninit_buf<T>(static_cast<int64_t>(K) * N);
#pragma omp for schedule(static)
                for (int b = 0; b < B; ++b) {
                    const T* gyb = gy + static_cast<int64_t>(b) * O * N;
                    const T* cols = pointwise
                                        ? xn->val->data() + static_cast<int64_t>(b) * C * H * W
                                        : cols_cache->data() + static_cast<int64_t>(b) * K * N;
                    if (!dw_part.empty()) {
                        // dW += dY * cols^T
                        gemm<T>(false, true, O, K, N, T(1), gyb, N, cols, N, T(1),
                                dw_part[static_cast<size_t>(tid)].data(), K);
                    }
                    if (!db_part.empty()) {
                        T* db = db_part[static_cast<size_t>(tid)].data();
                        for (int o = 0; o < O; ++o) {
                            T s = T(0);
                            const T* row = gyb + static_cast<int64_t>(o) * N;
                            for (int i = 0; i < N; ++i) s += row[i];
                            db[o] += s;
                        }
                    }
                    if (need_dx) {
                        if (pointwise) {
                            // accumulate W^T * dY straight into the input grad
                            gemm<T>(true, false, K, N, O, T(1), kn->val->data(), K, gyb, N, T(1),
                                    xn->grad.data() + static_cast<int64_t>(b) * C * H * W, N);
                        } else {
                            gemm<T>(true, false, K, N, O, T(1), kn->val->data(), K, gyb, N, T(0),
                                    dcols.data(), N);
                            detail::col2im_add(dcols.data(), C, H, W, kh, kw, stride, pad, Ho, Wo,
                                               xn->grad.data() + static_cast<int64_t>(b) * C * H * W);
                        }
                    }
                }
            }
            if (kn->requires_grad) {
                kn->ensure_grad();
                for (const auto& part : dw_part)
                    for (size_t i = 0; i < part.size(); ++i) kn->grad[i] += part[i];
            }
            if (bn && bn->requires_grad) {
                bn->ensure_grad();
                for (const auto& part : db_part)
                    for (size_t i = 0; i < part.size(); ++i) bn->grad[i] += part[i];
            }
            cols_cache->clear();
            cols_cache->shrink_to_fit();
        });
}

template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& k, int stride, int pad) {
    return conv2d(x, k, Tensor<T>(), stride, pad);
}

// ---------------------------------------------------------------------------
// Reductions, softmax, losses
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
    if (a.numel() == 0) throw ShapeError("sum over empty tensor");
    T s = T(0);
    for (T v : a.data()) s += v;
    auto an = a.node();
    return detail::make_op<T>("sum", {1}, {s}, {a}, [an](detail::Node<T>& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        const T g = self.grad[0];
        for (auto& v : an->grad) v += g;
    });
}

template <class T>
Tensor<T> mean(const Tensor<T>& a) {
    if (a.numel() == 0) throw ShapeError("mean over empty tensor");
    return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

// reduces the last dimension to 1 (keeps rank)
template <class T>
Tensor<T> sum_last(const Tensor<T>& a) {
    if (a.rank() < 1 || a.dim(a.rank() - 1) == 0) throw ShapeError("sum_last on empty axis");
    const int d = a.dim(a.rank() - 1);
    const int64_t rows = a.numel() / d;
    Buf<T> value = detail::uninit_buf<T>(rows);
    const T* p = a.data().data();
    for (int64_t r = 0; r < rows; ++r) {
        T s = T(0);
        for (int i = 0; i < d; ++i) s += p[r * d + i];
        value[static_cast<size_t>(r)] = s;
    }
    Shape out = a.shape();
    out.back() = 1;
    auto an = a.node();
    return detail::make_op<T>("sum_last", std::move(out), std::move(value), {a},
                              [an, d, rows](detail::Node<T>& self) {
                                  if (!an->requires_grad) return;
                                  an->ensure_grad();
                                  for (int64_t r = 0; r < rows; ++r) {
                                      const T g = self.grad[static_cast<size_t>(r)];
                                      T* dst = an->grad.data() + r * d;
                                      for (int i = 0; i < d; ++i) dst[i] += g;
                                  }
                              });
}

// softmax over the last dimension
template <class T>
Tensor<T> softmax_rows(const Tensor<T>& a) {
    if (a.rank() < 1 || a.dim(a.rank() - 1) == 0) throw ShapeError("softmax over empty axis");
    const int d = a.dim(a.rank() - 1);
    const int64_t rows = a.numel() / d;
    Buf<T> value;
    value.assign(a.data().begin(), a.data().end());
    for (int64_t r = 0; r < rows; ++r) {
        T* row = value.data() + r * d;
        const T mx = *std::max_element(row, row + d);
        T s = T(0);
        for (int i = 0; i < d; ++i) {
            row[i] = std::exp(row[i] - mx);
            s += row[i];
        }
        for (int i = 0; i < d; ++i) row[i] /= s;
    }
    auto an = a.node();
    return detail::make_op<T>(
        "softmax_rows", a.shape(), std::move(value), {a}, [an, d, rows](detail::Node<T>& self) {
            if (!an->requires_grad) return;
            an->ensure_grad();
            const T* y = self.val->data();
            const T* gy = self.grad.data();
            T* gx = an->grad.data();
            for (int64_t r = 0; r < rows; ++r) {
                const T* yr = y + r * d;
                const T* gr = gy + r * d;
                T dot = T(0);
                for (int i = 0; i < d; ++i) dot += yr[i] * gr[i];
                T* dst = gx + r * d;
                for (int i = 0; i < d; ++i) dst[i] += yr[i] * (gr[i] - dot);
            }
        });
}

template <class T>
Tensor<T> mse_loss(const Tensor<T>& pred, const Tensor<T>& target) {
    if (pred.shape() != target.shape())
        throw ShapeError("mse_loss shape mismatch: " + shape_str(pred.shape()) + " vs " +
                         shape_str(target.shape()));
    const int64_t n = pred.numel();
    const T* p = pred.data().data();
    const T* t = target.data().data();
    T acc = T(0);
#pragma omp parallel for schedule(static) reduction(+ : acc) if (n > (1 << 16))
    for (int64_t i = 0; i < n; ++i) {
        const T dv = p[i] - t[i];
        acc += dv * dv;
    }
    acc /= static_cast<T>(n);
    auto pn = pred.node();
    auto tn = target.node();
    return detail::make_op<T>(
        "mse_loss", {1}, {acc}, {pred, target}, [pn, tn, n](detail::Node<T>& self) {
            const T g = self.grad[0] * T(2) / static_cast<T>(n);
            const T* pv = pn->val->data();
            const T* tv = tn->val->data();
            if (pn->requires_grad) {
                pn->ensure_grad();
#pragma omp parallel for schedule(static) if (n > (1 << 16))
                for (int64_t i = 0; i < n; ++i) pn->grad[static_cast<size_t>(i)] += g * (pv[i] - tv[i]);
            }
            if (tn->requires_grad) {
                tn->ensure_grad();
                for (int64_t i = 0; i < n; ++i) tn->grad[static_cast<size_t>(i)] -= g * (pv[i] - tv[i]);
            }
        });
}

// logits: B x c; labels: per-row class index in [0, c)
template <class T>
Tensor<T> cross_entropy_logits(const Tensor<T>& logits, const std::vector<int>& labels) {
    if (logits.rank() != 2) throw ShapeError("cross_entropy_logits expects B x c logits");
    const int B = logits.dim(0), c = logits.dim(1);
    if (static_cast<int>(labels.size()) != B)
        throw ShapeError("cross_entropy_logits needs one label per row");
    for (int l : labels)
        if (l < 0 || l >= c)
            throw ShapeError("label " + std::to_string(l) + " out of range [0," +
                             std::to_string(c) + ")");
    const T* p = logits.data().data();
    T loss = T(0);
    for (int b = 0; b < B; ++b) {
        const T* row = p + static_cast<int64_t>(b) * c;
        const T mx = *std::max_element(row, row + c);
        T s = T(0);
        for (int i = 0; i < c; ++i) s += std::exp(row[i] - mx);
        loss += std::log(s) + mx - row[labels[static_cast<size_t>(b)]];
    }
    loss /= static_cast<T>(B);
    auto ln = logits.node();
    return detail::make_op<T>(
        "cross_entropy_logits", {1}, {loss}, {logits},
        [ln, labels, B, c](detail::Node<T>& self) {
            if (!ln->requires_grad) return;
            ln->ensure_grad();
            const T g = self.grad[0] / static_cast<T>(B);
            const T* p = ln->val->data();
            for (int b = 0; b < B; ++b) {
                const T* row = p + static_cast<int64_t>(b) * c;
                T* grow = ln->grad.data() + static_cast<int64_t>(b) * c;
                const T mx = *std::max_element(row, row + c);
                T s = T(0);
                for (int i = 0; i < c; ++i) s += std::exp(row[i] - mx);
                for (int i = 0; i < c; ++i) {
                    T sm = std::exp(row[i] - mx) / s;
                    grow[i] += g * (sm - (labels[static_cast<size_t>(b)] == i ? T(1) : T(0)));
                }
            }
        });
}

// ---------------------------------------------------------------------------
// Structural ops
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
    if (shape_numel(shape) != a.numel())
        throw ShapeError("reshape " + shape_str(a.shape()) + " -> " + shape_str(shape) +
                         " changes element count");
    auto an = a.node();
    return detail::make_view<T>("reshape", std::move(shape), a, [an](detail::Node<T>& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
    });
}

template <class T>
Tensor<T> transpose(const Tensor<T>& a, const std::vector<int>& perm) {
    const int r = a.rank();
    if (static_cast<int>(perm.size()) != r) throw ShapeError("transpose perm rank mismatch");
    Shape out(static_cast<size_t>(r));
    std::vector<int64_t> in_strides(static_cast<size_t>(r)), out_strides_in_order(static_cast<size_t>(r));
    int64_t acc = 1;
    for (int i = r - 1; i >= 0; --i) {
        in_strides[static_cast<size_t>(i)] = acc;
        acc *= a.dim(i);
    }
    for (int i = 0; i < r; ++i) out[static_cast<size_t>(i)] = a.dim(perm[static_cast<size_t>(i)]);

    Buf<T> value = detail::uninit_buf<T>(a.numel());
    // gather: out[i0,..] = in[perm-mapped index]
    std::vector<int64_t> src_stride(static_cast<size_t>(r));
    for (int i = 0; i < r; ++i) src_stride[static_cast<size_t>(i)] = in_strides[static_cast<size_t>(perm[static_cast<size_t>(i)])];
    const T* src = a.data().data();
    std::vector<int64_t> idx(static_cast<size_t>(r), 0);
    int64_t off = 0;
    for (size_t lin = 0; lin < value.size(); ++lin) {
        value[lin] = src[off];
        for (int d = r - 1; d >= 0; --d) {
            idx[static_cast<size_t>(d)]++;
            off += src_stride[static_cast<size_t>(d)];
            if (idx[static_cast<size_t>(d)] < out[static_cast<size_t>(d)]) break;
            off -= src_stride[static_cast<size_t>(d)] * out[static_cast<size_t>(d)];
            idx[static_cast<size_t>(d)] = 0;
        }
    }
    auto an = a.node();
    return detail::make_op<T>(
        "transpose", out, std::move(value), {a}, [an, out, src_stride, r](detail::Node<T>& self) {
            if (!an->requires_grad) return;
            an->ensure_grad();
            std::vector<int64_t> idx(static_cast<size_t>(r), 0);
            int64_t off = 0;
            for (size_t lin = 0; lin < self.grad.size(); ++lin) {
                an->grad[static_cast<size_t>(off)] += self.grad[lin];
                for (int d = r - 1; d >= 0; --d) {
                    idx[static_cast<size_t>(d)]++;
                    off += src_stride[static_cast<size_t>(d)];
                    if (idx[static_cast<size_t>(d)] < out[static_cast<size_t>(d)]) break;
                    off -= src_stride[static_cast<size_t>(d)] * out[static_cast<size_t>(d)];
                    idx[static_cast<size_t>(d)] = 0;
                }
            }
        });
}

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
    if (parts.empty()) throw ShapeError("concat of zero tensors");
    const int r = parts[0].rank();
    if (axis < 0 || axis >= r) throw ShapeError("concat axis out of range");
    Shape out = parts[0].shape();
    int total = 0;
    for (const auto& p : parts) {
        if (p.rank() != r) throw ShapeError("concat rank mismatch");
        for (int i = 0; i < r; ++i)
            if (i != axis && p.dim(i) != out[static_cast<size_t>(i)])
                throw ShapeError("concat extent mismatch on non-concat axis");
        total += p.dim(axis);
    }
    out[static_cast<size_t>(axis)] = total;
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= out[static_cast<size_t>(i)];
    for (int i = axis + 1; i < r; ++i) inner *= out[static_cast<size_t>(i)];

    Buf<T> value = detail::uninit_buf<T>(shape_numel(out));
    const int64_t out_block = static_cast<int64_t>(total) * inner;
    int64_t at = 0;
    std::vector<int64_t> offsets;
    for (const auto& p : parts) {
        offsets.push_back(at);
        const int64_t blk = static_cast<int64_t>(p.dim(axis)) * inner;
        const T* src = p.data().data();
        for (int64_t o = 0; o < outer; ++o)
            std::memcpy(value.data() + o * out_block + at, src + o * blk,
                        static_cast<size_t>(blk) * sizeof(T));
        at += blk;
    }
    std::vector<std::shared_ptr<detail::Node<T>>> nodes;
    std::vector<int64_t> blocks;
    for (const auto& p : parts) {
        nodes.push_back(p.node());
        blocks.push_back(static_cast<int64_t>(p.dim(axis)) * inner);
    }
    return detail::make_op<T>(
        "concat", out, std::move(value), parts,
        [nodes, blocks, offsets, outer, out_block](detail::Node<T>& self) {
            for (size_t pi = 0; pi < nodes.size(); ++pi) {
                auto& n = nodes[pi];
                if (!n->requires_grad) continue;
                n->ensure_grad();
                for (int64_t o = 0; o < outer; ++o) {
                    const T* src = self.grad.data() + o * out_block + offsets[pi];
                    T* dst = n->grad.data() + o * blocks[pi];
                    for (int64_t i = 0; i < blocks[pi]; ++i) dst[i] += src[i];
                }
            }
        });
}

template <class T>
Tensor<T> slice(const Tensor<T>& a, int axis, int start, int len) {
    const int r = a.rank();
    if (axis < 0 || axis >= r) throw ShapeError("slice axis out of range");
    if (start < 0 || len < 1 || start + len > a.dim(axis))
        throw ShapeError("slice range out of bounds");
    Shape out = a.shape();
    out[static_cast<size_t>(axis)] = len;
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= a.dim(i);
    for (int i = axis + 1; i < r; ++i) inner *= a.dim(i);
    const int64_t in_block = static_cast<int64_t>(a.dim(axis)) * inner;
    const int64_t out_block = static_cast<int64_t>(len) * inner;
    const int64_t off = static_cast<int64_t>(start) * inner;

    Buf<T> value = detail::uninit_buf<T>(outer * out_block);
    const T* src = a.data().data();
    for (int64_t o = 0; o < outer; ++o)
        std::memcpy(value.data() + o * out_block, src + o * in_block + off,
                    static_cast<size_t>(out_block) * sizeof(T));
    auto an = a.node();
    return detail::make_op<T>("slice", out, std::move(value), {a},
                              [an, outer, in_block, out_block, off](detail::Node<T>& self) {
                                  if (!an->requires_grad) return;
                                  an->ensure_grad();
                                  for (int64_t o = 0; o < outer; ++o) {
                                      const T* g = self.grad.data() + o * out_block;
                                      T* dst = an->grad.data() + o * in_block + off;
                                      for (int64_t i = 0; i < out_block; ++i) dst[i] += g[i];
                                  }
                              });
}

// ---------------------------------------------------------------------------
// Spatial ops on the trailing two dimensions
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> upsample_nearest2x(const Tensor<T>& a) {
    const int r = a.rank();
    if (r < 2) throw ShapeError("upsample_nearest2x needs rank >= 2");
    const int H = a.dim(r - 2), W = a.dim(r - 1);
    const int64_t planes = a.numel() / (static_cast<int64_t>(H) * W);
    Shape out = a.shape();
    out[static_cast<size_t>(r - 2)] = 2 * H;
    out[static_cast<size_t>(r - 1)] = 2 * W;
    Buf<T> value = detail::uninit_buf<T>(a.numel() * 4);
    const T* src = a.data().data();
    for (int64_t p = 0; p < planes; ++p) {
        const T* in = src + p * H * W;
        T* o = value.data() + p * 4 * H * W;
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                const T v = in[y * W + x];
                T* row0 = o + (2 * y) * (2 * W) + 2 * x;
                T* row1 = o + (2 * y + 1) * (2 * W) + 2 * x;
                row0[0] = v;
                row0[1] = v;
                row1[0] = v;
                row1[1] = v;
            }
    }
    auto an = a.node();
    return detail::make_op<T>("upsample_nearest2x", out, std::move(value), {a},
                              [an, planes, H, W](detail::Node<T>& self) {
                                  if (!an->requires_grad) return;
                                  an->ensure_grad();
                                  for (int64_t p = 0; p < planes; ++p) {
                                      const T* g = self.grad.data() + p * 4 * H * W;
                                      T* dst = an->grad.data() + p * H * W;
                                      for (int y = 0; y < H; ++y)
                                          for (int x = 0; x < W; ++x)
                                              dst[y * W + x] += g[(2 * y) * 2 * W + 2 * x] +
                                                                g[(2 * y) * 2 * W + 2 * x + 1] +
                                                                g[(2 * y + 1) * 2 * W + 2 * x] +
                                                                g[(2 * y + 1) * 2 * W + 2 * x + 1];
                                  }
                              });
}

template <class T>
Tensor<T> avg_pool2x2(const Tensor<T>& a) {
    const int r = a.rank();
    if (r < 2) throw ShapeError("avg_pool2x2 needs rank >= 2");
    const int H = a.dim(r - 2), W = a.dim(r - 1);
    if (H % 2 || W % 2) throw ShapeError("avg_pool2x2 needs even spatial extents");
    const int64_t planes = a.numel() / (static_cast<int64_t>(H) * W);
    Shape out = a.shape();
    out[static_cast<size_t>(r - 2)] = H / 2;
    out[static_cast<size_t>(r - 1)] = W / 2;
    Buf<T> value = detail::uninit_buf<T>(a.numel() / 4);
    const T* src = a.data().data();
    for (int64_t p = 0; p < planes; ++p) {
        const T* in = src + p * H * W;
        T* o = value.data() + p * (H / 2) * (W / 2);
        for (int y = 0; y < H / 2; ++y)
            for (int x = 0; x < W / 2; ++x)
                o[y * (W / 2) + x] = (in[(2 * y) * W + 2 * x] + in[(2 * y) * W + 2 * x + 1] +
                                      in[(2 * y + 1) * W + 2 * x] + in[(2 * y + 1) * W + 2 * x + 1]) *
                                     T(0.25);
    }
    auto an = a.node();
    return detail::make_op<T>("avg_pool2x2", out, std::move(value), {a},
                              [an, planes, H, W](detail::Node<T>& self) {
                                  if (!an->requires_grad) return;
                                  an->ensure_grad();
                                  for (int64_t p = 0; p < planes; ++p) {
                                      const T* g = self.grad.data() + p * (H / 2) * (W / 2);
                                      T* dst = an->grad.data() + p * H * W;
                                      for (int y = 0; y < H / 2; ++y)
                                          for (int x = 0; x < W / 2; ++x) {
                                              const T q = g[y * (W / 2) + x] * T(0.25);
                                              dst[(2 * y) * W + 2 * x] += q;
                                              dst[(2 * y) * W + 2 * x + 1] += q;
                                              dst[(2 * y + 1) * W + 2 * x] += q;
                                              dst[(2 * y + 1) * W + 2 * x + 1] += q;
                                          }
                                  }
                              });
}

namespace detail {

// Counterclockwise quarter-turn of a 2D plane: out[i][j] = in[j][C-1-i].
template <class T>
void rot90_plane(const T* in, int R, int C, T* out) {
    for (int i = 0; i < C; ++i)
        for (int j = 0; j < R; ++j) out[static_cast<int64_t>(i) * R + j] = in[static_cast<int64_t>(j) * C + (C - 1 - i)];
}

} // namespace detail

// rotates the trailing two dimensions counterclockwise k quarter turns
template <class T>
Tensor<T> rot90_hw(const Tensor<T>& a, int k) {
    const int r = a.rank();
    if (r < 2) throw ShapeError("rot90_hw needs rank >= 2");
    k = ((k % 4) + 4) % 4;
    if (k == 0) {
        // still a fresh node so callers can treat it uniformly
        return add(a, T(0));
    }
    int R = a.dim(r - 2), C = a.dim(r - 1);
    const int64_t planes = a.numel() / (static_cast<int64_t>(R) * C);
    Buf<T> cur;
    cur.assign(a.data().begin(), a.data().end());
    Buf<T> nxt = detail::uninit_buf<T>(static_cast<int64_t>(cur.size()));
    int cr = R, cc = C;
    for (int t = 0; t < k; ++t) {
        for (int64_t p = 0; p < planes; ++p)
            detail::rot90_plane(cur.data() + p * cr * cc, cr, cc, nxt.data() + p * cr * cc);
        std::swap(cur, nxt);
        std::swap(cr, cc);
    }
    Shape out = a.shape();
    out[static_cast<size_t>(r - 2)] = cr;
    out[static_cast<size_t>(r - 1)] = cc;
    auto an = a.node();
    return detail::make_op<T>("rot90_hw", out, std::move(cur), {a},
                              [an, planes, cr, cc, k](detail::Node<T>& self) {
                                  if (!an->requires_grad) return;
                                  an->ensure_grad();
                                  // rotate the gradient back by 4-k quarter turns
                                  std::vector<T> g(self.grad.begin(), self.grad.end());
                                  std::vector<T> nxt(g.size());
                                  int rr = cr, cc2 = cc;
                                  for (int t = 0; t < (4 - k) % 4; ++t) {
                                      for (int64_t p = 0; p < planes; ++p)
                                          detail::rot90_plane(g.data() + p * rr * cc2, rr, cc2,
                                                              nxt.data() + p * rr * cc2);
                                      std::swap(g, nxt);
                                      std::swap(rr, cc2);
                                  }
                                  for (size_t i = 0; i < g.size(); ++i) an->grad[i] += g[i];
                              });
}

// repeats each element of a rank-1 tensor k times: [a,b] -> [a,a,b,b] for k=2
template <class T>
Tensor<T> repeat_interleave(const Tensor<T>& a, int k) {
    if (a.rank() != 1) throw ShapeError("repeat_interleave expects rank-1 input");
    const int n = a.dim(0);
    Buf<T> value = detail::uninit_buf<T>(static_cast<int64_t>(n) * k);
    const T* src = a.data().data();
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < k; ++j) value[static_cast<size_t>(i) * k + j] = src[i];
    auto an = a.node();
    return detail::make_op<T>("repeat_interleave", {n * k}, std::move(value), {a},
                              [an, n, k](detail::Node<T>& self) {
                                  if (!an->requires_grad) return;
                                  an->ensure_grad();
                                  for (int i = 0; i < n; ++i) {
                                      T s = T(0);
                                      for (int j = 0; j < k; ++j) s += self.grad[static_cast<size_t>(i) * k + j];
                                      an->grad[static_cast<size_t>(i)] += s;
                                  }
                              });
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

template <class T>
struct AdamState {
    T beta1 = T(0.9);
    T beta2 = T(0.999);
    T eps = T(1e-8);
    int64_t t = 0;
    std::vector<std::vector<T>> m, v;

    void init(const std::vector<Tensor<T>>& params) {
        m.clear();
        v.clear();
        for (const auto& p : params) {
            m.emplace_back(static_cast<size_t>(p.numel()), T(0));
            v.emplace_back(static_cast<size_t>(p.numel()), T(0));
        }
        t = 0;
    }
};

// One Adam update with bias correction; parameters without a populated
// gradient are treated as zero-gradient and their moments still decay.
template <class T>
void adam_step(std::vector<Tensor<T>>& params, AdamState<T>& st, T lr) {
    if (st.m.size() != params.size()) throw ShapeError("adam state not initialized for params");
    st.t += 1;
    const T b1t = T(1) - std::pow(st.beta1, static_cast<T>(st.t));
    const T b2t = T(1) - std::pow(st.beta2, static_cast<T>(st.t));
    for (size_t pi = 0; pi < params.size(); ++pi) {
        auto& p = params[pi];
        auto dat = p.raw_data();
        auto& m = st.m[pi];
        auto& v = st.v[pi];
        if (m.size() != dat.size()) throw ShapeError("adam moment shape mismatch");
        const bool has_g = p.has_grad();
        const T* g = has_g ? p.grad().data() : nullptr;
        for (size_t i = 0; i < dat.size(); ++i) {
            const T gi = has_g ? g[i] : T(0);
            m[i] = st.beta1 * m[i] + (T(1) - st.beta1) * gi;
            v[i] = st.beta2 * v[i] + (T(1) - st.beta2) * gi * gi;
            const T mhat = m[i] / b1t;
            const T vhat = v[i] / b2t;
            dat[i] -= lr * mhat / (std::sqrt(vhat) + st.eps);
        }
    }
}

template <class T>
void zero_grads(std::vector<Tensor<T>>& params) {
    for (auto& p : params) p.zero_grad();
}

} // namespace fssd
