#include "flowseg/autograd.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>

namespace flowseg::nn {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

template <typename T>
thread_local Tape<T>* g_active_tape = nullptr;

template <typename T>
void require_finite(const char* op, const Tensor<T>& t) {
    if (!t.all_finite()) {
        throw NumericError(std::string(op) + ": non-finite input with dims " + dims_str(t.dims()));
    }
}

[[noreturn]] void shape_fail(const char* op, const Dims& a, const Dims& b) {
    throw ShapeError(std::string(op) + ": incompatible dims " + dims_str(a) + " and " + dims_str(b));
}

/// Wraps a freshly computed value into a node, recording it on the active
/// tape when any input needs gradients.
template <typename T>
Var<T> make_result(const char* op, Tensor<T> value, std::vector<Var<T>> inputs,
                   std::function<void(Node<T>&)> backward) {
    auto node = std::make_shared<Node<T>>();
    node->value = std::move(value);
    node->op = op;
    Tape<T>* tape = Tape<T>::active();
    const bool needs = std::any_of(inputs.begin(), inputs.end(), [](const Var<T>& v) { return v.requires_grad(); });
    if (tape && needs) {
        node->requires_grad = true;
        node->parents.reserve(inputs.size());
        for (auto& in : inputs) node->parents.push_back(in.node());
        node->backward = std::move(backward);
        tape->record(node);
    }
    return Var<T>(node);
}

template <typename T>
bool wants(const Node<T>& n, size_t i) {
    return n.parents[i]->requires_grad;
}

// --- broadcasting -----------------------------------------------------------

struct Broadcast {
    Dims out;
    std::vector<int64_t> stride_a, stride_b;
};

std::vector<int64_t> contiguous_strides(const Dims& d) {
    std::vector<int64_t> s(d.size(), 1);
    for (int i = static_cast<int>(d.size()) - 2; i >= 0; --i) s[i] = s[i + 1] * d[i + 1];
    return s;
}

Broadcast broadcast(const char* op, const Dims& a, const Dims& b) {
    const size_t nd = std::max(a.size(), b.size());
    Broadcast bc;
    bc.out.resize(nd);
    bc.stride_a.assign(nd, 0);
    bc.stride_b.assign(nd, 0);
    auto sa = contiguous_strides(a);
    auto sb = contiguous_strides(b);
    for (size_t i = 0; i < nd; ++i) {
        const int ia = static_cast<int>(i) - static_cast<int>(nd - a.size());
        const int ib = static_cast<int>(i) - static_cast<int>(nd - b.size());
        const int64_t da = ia >= 0 ? a[ia] : 1;
        const int64_t db = ib >= 0 ? b[ib] : 1;
        if (da != db && da != 1 && db != 1) shape_fail(op, a, b);
        bc.out[i] = std::max(da, db);
        if (ia >= 0 && da == bc.out[i]) bc.stride_a[i] = sa[ia];
        if (ib >= 0 && db == bc.out[i]) bc.stride_b[i] = sb[ib];
    }
    return bc;
}

template <class F>
void broadcast_loop(const Broadcast& bc, F&& f) {
    const int nd = static_cast<int>(bc.out.size());
    if (nd == 0) {
        f(0, 0, 0);
        return;
    }
    const int64_t inner = bc.out[nd - 1];
    const int64_t step_a = bc.stride_a[nd - 1], step_b = bc.stride_b[nd - 1];
    const int64_t outer = numel_of(bc.out) / inner;
    std::vector<int64_t> idx(static_cast<size_t>(nd - 1), 0);
    int64_t base_a = 0, base_b = 0, o = 0;
    for (int64_t r = 0; r < outer; ++r) {
        int64_t ia = base_a, ib = base_b;
        for (int64_t k = 0; k < inner; ++k, ia += step_a, ib += step_b) f(o++, ia, ib);
        for (int d = nd - 2; d >= 0; --d) {
            ++idx[d];
            base_a += bc.stride_a[d];
            base_b += bc.stride_b[d];
            if (idx[d] < bc.out[d]) break;
            base_a -= bc.stride_a[d] * bc.out[d];
            base_b -= bc.stride_b[d] * bc.out[d];
            idx[d] = 0;
        }
    }
}

template <typename T>
Tensor<T> from_accum(const Dims& dims, const std::vector<double>& acc) {
    return Tensor<T>(dims, std::vector<T>(acc.begin(), acc.end()));
}

enum class Binary { add, sub, mul };

template <typename T>
Var<T> binary(const char* op, Binary kind, const Var<T>& a, const Var<T>& b) {
    require_finite(op, a.value());
    require_finite(op, b.value());
    const T* pa = a.value().data();
    const T* pb = b.value().data();
    Tensor<T> out;
    Broadcast bc;
    const bool same = a.dims() == b.dims();
    if (same) {
        out = Tensor<T>(a.dims());
        T* po = out.data();
        const int64_t n = out.numel();
        switch (kind) {
            case Binary::add: for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i]; break;
            case Binary::sub: for (int64_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i]; break;
            case Binary::mul: for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i]; break;
        }
    } else {
        bc = broadcast(op, a.dims(), b.dims());
        out = Tensor<T>(bc.out);
        T* po = out.data();
        switch (kind) {
            case Binary::add: broadcast_loop(bc, [&](int64_t o, int64_t i, int64_t j) { po[o] = pa[i] + pb[j]; }); break;
            case Binary::sub: broadcast_loop(bc, [&](int64_t o, int64_t i, int64_t j) { po[o] = pa[i] - pb[j]; }); break;
            case Binary::mul: broadcast_loop(bc, [&](int64_t o, int64_t i, int64_t j) { po[o] = pa[i] * pb[j]; }); break;
        }
    }
    return make_result<T>(op, std::move(out), {a, b}, [kind, same, bc](Node<T>& n) {
        const auto& A = n.parents[0]->value;
        const auto& B = n.parents[1]->value;
        const T* g = n.grad.data();
        const T sign_b = kind == Binary::sub ? T(-1) : T(1);
        if (same) {
            const int64_t cnt = n.grad.numel();
            if (wants(n, 0)) {
                Tensor<T> ga(A.dims());
                for (int64_t i = 0; i < cnt; ++i) ga[i] = kind == Binary::mul ? g[i] * B[i] : g[i];
                n.parents[0]->accumulate(std::move(ga));
            }
            if (wants(n, 1)) {
                Tensor<T> gb(B.dims());
                for (int64_t i = 0; i < cnt; ++i) gb[i] = kind == Binary::mul ? g[i] * A[i] : sign_b * g[i];
                n.parents[1]->accumulate(std::move(gb));
            }
            return;
        }
        if (wants(n, 0)) {
            std::vector<double> acc(static_cast<size_t>(A.numel()), 0.0);
            if (kind == Binary::mul) {
                broadcast_loop(bc, [&](int64_t o, int64_t i, int64_t j) { acc[i] += double(g[o]) * B[j]; });
            } else {
                broadcast_loop(bc, [&](int64_t o, int64_t i, int64_t) { acc[i] += g[o]; });
            }
            n.parents[0]->accumulate(from_accum<T>(A.dims(), acc));
        }
        if (wants(n, 1)) {
            std::vector<double> acc(static_cast<size_t>(B.numel()), 0.0);
            if (kind == Binary::mul) {
                broadcast_loop(bc, [&](int64_t o, int64_t i, int64_t j) { acc[j] += double(g[o]) * A[i]; });
            } else {
                broadcast_loop(bc, [&](int64_t o, int64_t, int64_t j) { acc[j] += sign_b * g[o]; });
            }
            n.parents[1]->accumulate(from_accum<T>(B.dims(), acc));
        }
    });
}

/// Elementwise unary op given value and derivative-from-(input, output).
template <typename T, class Fwd, class Deriv>
Var<T> unary(const char* op, const Var<T>& x, Fwd fwd, Deriv deriv) {
    require_finite(op, x.value());
    Tensor<T> out(x.dims());
    const T* px = x.value().data();
    T* po = out.data();
    for (int64_t i = 0; i < out.numel(); ++i) po[i] = fwd(px[i]);
    return make_result<T>(op, std::move(out), {x}, [deriv](Node<T>& n) {
        const auto& X = n.parents[0]->value;
        Tensor<T> gx(X.dims());
        for (int64_t i = 0; i < gx.numel(); ++i) gx[i] = n.grad[i] * deriv(X[i], n.value[i]);
        n.parents[0]->accumulate(std::move(gx));
    });
}

// --- convolution helpers ----------------------------------------------------

struct ConvGeom {
    int64_t n, h, w, c;     // the "large" grid (conv input / transposed-conv output)
    int64_t kh, kw, stride, pad;
    int64_t ho, wo;         // the "small" grid (conv output / transposed-conv input)
};

/// cols[(n, oy, ox), (ky, kx, c)] = src[n, oy*s - p + ky, ox*s - p + kx, c] (zero outside).
template <typename T>
void im2col(const ConvGeom& g, const T* src, T* cols) {
    const int64_t row = g.kh * g.kw * g.c;
    for (int64_t b = 0; b < g.n; ++b) {
        for (int64_t oy = 0; oy < g.ho; ++oy) {
            for (int64_t ox = 0; ox < g.wo; ++ox) {
                T* dst = cols + ((b * g.ho + oy) * g.wo + ox) * row;
                for (int64_t ky = 0; ky < g.kh; ++ky) {
                    const int64_t iy = oy * g.stride - g.pad + ky;
                    for (int64_t kx = 0; kx < g.kw; ++kx) {
                        const int64_t ix = ox * g.stride - g.pad + kx;
                        T* d = dst + (ky * g.kw + kx) * g.c;
                        if (iy < 0 || iy >= g.h || ix < 0 || ix >= g.w) {
                            std::fill(d, d + g.c, T(0));
                        } else {
                            const T* s = src + ((b * g.h + iy) * g.w + ix) * g.c;
                            std::copy(s, s + g.c, d);
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of im2col: accumulates cols back onto the large grid.
template <typename T>
void col2im(const ConvGeom& g, const T* cols, T* dst) {
    const int64_t row = g.kh * g.kw * g.c;
    for (int64_t b = 0; b < g.n; ++b) {
        for (int64_t oy = 0; oy < g.ho; ++oy) {
            for (int64_t ox = 0; ox < g.wo; ++ox) {
                const T* src = cols + ((b * g.ho + oy) * g.wo + ox) * row;
                for (int64_t ky = 0; ky < g.kh; ++ky) {
                    const int64_t iy = oy * g.stride - g.pad + ky;
                    if (iy < 0 || iy >= g.h) continue;
                    for (int64_t kx = 0; kx < g.kw; ++kx) {
                        const int64_t ix = ox * g.stride - g.pad + kx;
                        if (ix < 0 || ix >= g.w) continue;
                        const T* s = src + (ky * g.kw + kx) * g.c;
                        T* d = dst + ((b * g.h + iy) * g.w + ix) * g.c;
                        for (int64_t c = 0; c < g.c; ++c) d[c] += s[c];
                    }
                }
            }
        }
    }
}

}  // namespace

// ---------------------------------------------------------------------------

template <typename T>
void Node<T>::accumulate(const Tensor<T>& g) {
    if (grad.empty()) {
        grad = g;
        return;
    }
    for (int64_t i = 0; i < grad.numel(); ++i) grad[i] += g[i];
}

template <typename T>
void Node<T>::accumulate(Tensor<T>&& g) {
    if (grad.empty()) {
        grad = std::move(g);
        return;
    }
    for (int64_t i = 0; i < grad.numel(); ++i) grad[i] += g[i];
}

template <typename T>
Var<T>::Var(Tensor<T> value, bool requires_grad) : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
}

template <typename T>
Tensor<T>& Var<T>::mutable_value() {
    if (node_->backward) throw ContractError("mutable_value: only leaves may be modified in place");
    return node_->value;
}

template <typename T>
Tape<T>::Tape() : previous_(g_active_tape<T>) {
    g_active_tape<T> = this;
}

template <typename T>
Tape<T>::~Tape() {
    g_active_tape<T> = previous_;
}

template <typename T>
Tape<T>* Tape<T>::active() {
    return g_active_tape<T>;
}

template <typename T>
void Tape<T>::backward(const Var<T>& loss) {
    if (!loss || loss.numel() != 1) {
        throw ContractError("backward: loss must be a scalar, got dims " +
                            (loss ? dims_str(loss.dims()) : std::string("<null>")));
    }
    if (!loss.requires_grad()) {
        nodes_.clear();
        return;
    }
    loss.node()->grad = Tensor<T>::full(loss.dims(), T(1));
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        Node<T>& n = **it;
        if (!n.grad.empty() && n.backward) n.backward(n);
    }
    for (auto& n : nodes_) {
        n->backward = nullptr;
        n->parents.clear();
    }
    nodes_.clear();
}

// --- elementwise ------------------------------------------------------------

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    return binary("add", Binary::add, a, b);
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    return binary("sub", Binary::sub, a, b);
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    return binary("mul", Binary::mul, a, b);
}

template <typename T>
Var<T> scale(const Var<T>& a, double s) {
    const T k = static_cast<T>(s);
    return unary<T>("scale", a, [k](T x) { return k * x; }, [k](T, T) { return k; });
}

template <typename T>
Var<T> add_scalar(const Var<T>& a, double s) {
    const T k = static_cast<T>(s);
    return unary<T>("add_scalar", a, [k](T x) { return x + k; }, [](T, T) { return T(1); });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
    return unary<T>("relu", x, [](T v) { return v > 0 ? v : T(0); }, [](T v, T) { return v > 0 ? T(1) : T(0); });
}

double gelu_scalar(double x) {
    constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
    return 0.5 * x * (1.0 + std::tanh(k * (x + 0.044715 * x * x * x)));
}

double gelu_grad_scalar(double x) {
    constexpr double k = 0.7978845608028654;
    const double th = std::tanh(k * (x + 0.044715 * x * x * x));
    return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * k * (1.0 + 3.0 * 0.044715 * x * x);
}

template <typename T>
Var<T> gelu(const Var<T>& x) {
    return unary<T>(
        "gelu", x, [](T v) { return static_cast<T>(gelu_scalar(v)); },
        [](T v, T) { return static_cast<T>(gelu_grad_scalar(v)); });
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
    return unary<T>(
        "sigmoid", x,
        [](T v) {
            if (v >= 0) return T(1) / (T(1) + std::exp(-v));
            const T e = std::exp(v);
            return e / (T(1) + e);
        },
        [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Var<T> exp(const Var<T>& x) {
    return unary<T>("exp", x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

// --- matmul -----------------------------------------------------------------

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b, bool ta, bool tb) {
    const char* op = "matmul";
    require_finite(op, a.value());
    require_finite(op, b.value());
    if (a.ndim() < 2 || b.ndim() < 2) shape_fail(op, a.dims(), b.dims());
    const Dims& da = a.dims();
    const Dims& db = b.dims();
    const int64_t ar = da[da.size() - 2], ac = da.back();
    const int64_t br = db[db.size() - 2], bcn = db.back();
    const int64_t m = ta ? ac : ar, k = ta ? ar : ac;
    const int64_t kb = tb ? bcn : br, nn = tb ? br : bcn;
    if (k != kb) shape_fail(op, da, db);
    const bool shared_b = db.size() == 2;
    const Dims batch_dims(da.begin(), da.end() - 2);
    if (!shared_b && Dims(db.begin(), db.end() - 2) != batch_dims) shape_fail(op, da, db);
    const int64_t batch = numel_of(batch_dims);

    Dims od = batch_dims;
    od.push_back(m);
    od.push_back(nn);
    Tensor<T> out(od);

    auto op_a = [&](const T* p) { return CMapMat<T>(p, ar, ac); };
    auto op_b = [&](const T* p) { return CMapMat<T>(p, br, bcn); };

    if (shared_b && !ta) {
        CMapMat<T> A(a.value().data(), batch * m, k);
        MapMat<T> Y(out.data(), batch * m, nn);
        if (tb) Y.noalias() = A * op_b(b.value().data()).transpose();
        else Y.noalias() = A * op_b(b.value().data());
    } else {
        for (int64_t i = 0; i < batch; ++i) {
            auto A = op_a(a.value().data() + i * ar * ac);
            auto B = op_b(b.value().data() + (shared_b ? 0 : i * br * bcn));
            MapMat<T> Y(out.data() + i * m * nn, m, nn);
            if (ta && tb) Y.noalias() = A.transpose() * B.transpose();
            else if (ta) Y.noalias() = A.transpose() * B;
            else if (tb) Y.noalias() = A * B.transpose();
            else Y.noalias() = A * B;
        }
    }

    return make_result<T>(op, std::move(out), {a, b}, [=](Node<T>& n) {
        const auto& Av = n.parents[0]->value;
        const auto& Bv = n.parents[1]->value;
        if (shared_b && !ta) {
            CMapMat<T> A(Av.data(), batch * m, k);
            CMapMat<T> G(n.grad.data(), batch * m, nn);
            CMapMat<T> B(Bv.data(), br, bcn);
            if (wants(n, 0)) {
                Tensor<T> ga(Av.dims());
                MapMat<T> GA(ga.data(), batch * m, k);
                if (tb) GA.noalias() = G * B;
                else GA.noalias() = G * B.transpose();
                n.parents[0]->accumulate(std::move(ga));
            }
            if (wants(n, 1)) {
                Tensor<T> gb(Bv.dims());
                MapMat<T> GB(gb.data(), br, bcn);
                if (tb) GB.noalias() = G.transpose() * A;
                else GB.noalias() = A.transpose() * G;
                n.parents[1]->accumulate(std::move(gb));
            }
            return;
        }
        Tensor<T> ga, gb;
        if (wants(n, 0)) ga = Tensor<T>(Av.dims());
        if (wants(n, 1)) gb = Tensor<T>(Bv.dims());
        for (int64_t i = 0; i < batch; ++i) {
            CMapMat<T> A(Av.data() + i * ar * ac, ar, ac);
            CMapMat<T> B(Bv.data() + (shared_b ? 0 : i * br * bcn), br, bcn);
            CMapMat<T> G(n.grad.data() + i * m * nn, m, nn);
            if (!ga.empty()) {
                MapMat<T> GA(ga.data() + i * ar * ac, ar, ac);
                // op(A) = A or A^T; d op(A) = G op(B)^T
                if (!ta && !tb) GA.noalias() = G * B.transpose();
                else if (!ta && tb) GA.noalias() = G * B;
                else if (ta && !tb) GA.noalias() = B * G.transpose();
                else GA.noalias() = B.transpose() * G.transpose();
            }
            if (!gb.empty()) {
                MapMat<T> GB(gb.data() + (shared_b ? 0 : i * br * bcn), br, bcn);
                if (!ta && !tb) GB.noalias() += A.transpose() * G;
                else if (!ta && tb) GB.noalias() += G.transpose() * A;
                else if (ta && !tb) GB.noalias() += A * G;
                else GB.noalias() += G.transpose() * A.transpose();
            }
        }
        if (!ga.empty()) n.parents[0]->accumulate(std::move(ga));
        if (!gb.empty()) n.parents[1]->accumulate(std::move(gb));
    });
}

// --- convolution ------------------------------------------------------------

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, int stride, int pad) {
    const char* op = "conv2d";
    require_finite(op, x.value());
    require_finite(op, w.value());
    if (x.ndim() != 4 || w.ndim() != 4 || x.dim(3) != w.dim(2) || stride < 1 || pad < 0) {
        shape_fail(op, x.dims(), w.dims());
    }
    ConvGeom g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(0), w.dim(1), stride, pad, 0, 0};
    const int64_t span_h = g.h + 2 * pad - g.kh, span_w = g.w + 2 * pad - g.kw;
    if (span_h < 0 || span_w < 0) shape_fail(op, x.dims(), w.dims());
    g.ho = span_h / stride + 1;
    g.wo = span_w / stride + 1;
    const int64_t cout = w.dim(3);
    const int64_t rows = g.n * g.ho * g.wo, rowlen = g.kh * g.kw * g.c;

    auto cols = std::make_shared<std::vector<T>>(static_cast<size_t>(rows * rowlen));
    im2col(g, x.value().data(), cols->data());
    Tensor<T> out({g.n, g.ho, g.wo, cout});
    MapMat<T>(out.data(), rows, cout).noalias() =
        CMapMat<T>(cols->data(), rows, rowlen) * CMapMat<T>(w.value().data(), rowlen, cout);

    return make_result<T>(op, std::move(out), {x, w}, [g, cols, cout, rows, rowlen](Node<T>& n) {
        CMapMat<T> G(n.grad.data(), rows, cout);
        const auto& Wv = n.parents[1]->value;
        if (wants(n, 1)) {
            Tensor<T> gw(Wv.dims());
            MapMat<T>(gw.data(), rowlen, cout).noalias() = CMapMat<T>(cols->data(), rows, rowlen).transpose() * G;
            n.parents[1]->accumulate(std::move(gw));
        }
        if (wants(n, 0)) {
            std::vector<T> dcols(static_cast<size_t>(rows * rowlen));
            MapMat<T>(dcols.data(), rows, rowlen).noalias() = G * CMapMat<T>(Wv.data(), rowlen, cout).transpose();
            Tensor<T> gx(n.parents[0]->value.dims());
            col2im(g, dcols.data(), gx.data());
            n.parents[0]->accumulate(std::move(gx));
        }
    });
}

template <typename T>
Var<T> conv_transpose2d(const Var<T>& x, const Var<T>& w, int stride, int pad) {
    const char* op = "conv_transpose2d";
    require_finite(op, x.value());
    require_finite(op, w.value());
    if (x.ndim() != 4 || w.ndim() != 4 || x.dim(3) != w.dim(3) || stride < 1 || pad < 0) {
        shape_fail(op, x.dims(), w.dims());
    }
    const int64_t cin = x.dim(3), cout = w.dim(2);
    ConvGeom g{x.dim(0), 0, 0, cout, w.dim(0), w.dim(1), stride, pad, x.dim(1), x.dim(2)};
    g.h = (g.ho - 1) * stride - 2 * pad + g.kh;
    g.w = (g.wo - 1) * stride - 2 * pad + g.kw;
    if (g.h <= 0 || g.w <= 0) shape_fail(op, x.dims(), w.dims());
    const int64_t rows = g.n * g.ho * g.wo, rowlen = g.kh * g.kw * cout;

    std::vector<T> cols(static_cast<size_t>(rows * rowlen));
    MapMat<T>(cols.data(), rows, rowlen).noalias() =
        CMapMat<T>(x.value().data(), rows, cin) * CMapMat<T>(w.value().data(), rowlen, cin).transpose();
    Tensor<T> out({g.n, g.h, g.w, cout});
    col2im(g, cols.data(), out.data());

    return make_result<T>(op, std::move(out), {x, w}, [g, rows, rowlen, cin](Node<T>& n) {
        std::vector<T> dcols(static_cast<size_t>(rows * rowlen));
        im2col(g, n.grad.data(), dcols.data());
        CMapMat<T> DC(dcols.data(), rows, rowlen);
        const auto& Xv = n.parents[0]->value;
        const auto& Wv = n.parents[1]->value;
        if (wants(n, 0)) {
            Tensor<T> gx(Xv.dims());
            MapMat<T>(gx.data(), rows, cin).noalias() = DC * CMapMat<T>(Wv.data(), rowlen, cin);
            n.parents[0]->accumulate(std::move(gx));
        }
        if (wants(n, 1)) {
            Tensor<T> gw(Wv.dims());
            MapMat<T>(gw.data(), rowlen, cin).noalias() = DC.transpose() * CMapMat<T>(Xv.data(), rows, cin);
            n.parents[1]->accumulate(std::move(gw));
        }
    });
}

// --- normalization ------------------------------------------------------------

template <typename T>
Var<T> softmax(const Var<T>& x) {
    const char* op = "softmax";
    require_finite(op, x.value());
    if (x.ndim() < 1) shape_fail(op, x.dims(), x.dims());
    const int64_t cols = x.dims().back(), rows = x.numel() / cols;
    Tensor<T> out(x.dims());
    for (int64_t r = 0; r < rows; ++r) {
        const T* in = x.value().data() + r * cols;
        T* o = out.data() + r * cols;
        const T mx = *std::max_element(in, in + cols);
        double total = 0.0;
        for (int64_t c = 0; c < cols; ++c) {
            o[c] = std::exp(in[c] - mx);
            total += o[c];
        }
        const T inv = static_cast<T>(1.0 / total);
        for (int64_t c = 0; c < cols; ++c) o[c] *= inv;
    }
    return make_result<T>(op, std::move(out), {x}, [rows, cols](Node<T>& n) {
        Tensor<T> gx(n.value.dims());
        for (int64_t r = 0; r < rows; ++r) {
            const T* y = n.value.data() + r * cols;
            const T* g = n.grad.data() + r * cols;
            double dot = 0.0;
            for (int64_t c = 0; c < cols; ++c) dot += double(g[c]) * y[c];
            T* d = gx.data() + r * cols;
            for (int64_t c = 0; c < cols; ++c) d[c] = y[c] * (g[c] - static_cast<T>(dot));
        }
        n.parents[0]->accumulate(std::move(gx));
    });
}

template <typename T>
Var<T> layer_norm(const Var<T>& x, double eps) {
    const char* op = "layer_norm";
    require_finite(op, x.value());
    const int64_t cols = x.dims().back(), rows = x.numel() / cols;
    Tensor<T> out(x.dims());
    auto inv_std = std::make_shared<std::vector<T>>(static_cast<size_t>(rows));
    for (int64_t r = 0; r < rows; ++r) {
        const T* in = x.value().data() + r * cols;
        double mu = 0.0;
        for (int64_t c = 0; c < cols; ++c) mu += in[c];
        mu /= static_cast<double>(cols);
        double var = 0.0;
        for (int64_t c = 0; c < cols; ++c) var += (in[c] - mu) * (in[c] - mu);
        var /= static_cast<double>(cols);
        const double inv = 1.0 / std::sqrt(var + eps);
        (*inv_std)[r] = static_cast<T>(inv);
        T* o = out.data() + r * cols;
        for (int64_t c = 0; c < cols; ++c) o[c] = static_cast<T>((in[c] - mu) * inv);
    }
    return make_result<T>(op, std::move(out), {x}, [rows, cols, inv_std](Node<T>& n) {
        Tensor<T> gx(n.value.dims());
        for (int64_t r = 0; r < rows; ++r) {
            const T* xh = n.value.data() + r * cols;
            const T* g = n.grad.data() + r * cols;
            double mg = 0.0, mgx = 0.0;
            for (int64_t c = 0; c < cols; ++c) {
                mg += g[c];
                mgx += double(g[c]) * xh[c];
            }
            mg /= static_cast<double>(cols);
            mgx /= static_cast<double>(cols);
            const double inv = (*inv_std)[r];
            T* d = gx.data() + r * cols;
            for (int64_t c = 0; c < cols; ++c) d[c] = static_cast<T>(inv * (g[c] - mg - xh[c] * mgx));
        }
        n.parents[0]->accumulate(std::move(gx));
    });
}

// --- reductions ---------------------------------------------------------------

template <typename T>
Var<T> sum(const Var<T>& x) {
    require_finite("sum", x.value());
    double total = 0.0;
    for (T v : x.value().values()) total += v;
    return make_result<T>("sum", Tensor<T>::scalar(static_cast<T>(total)), {x}, [](Node<T>& n) {
        n.parents[0]->accumulate(Tensor<T>::full(n.parents[0]->value.dims(), n.grad[0]));
    });
}

template <typename T>
Var<T> mean(const Var<T>& x) {
    require_finite("mean", x.value());
    double total = 0.0;
    for (T v : x.value().values()) total += v;
    const double count = static_cast<double>(x.numel());
    return make_result<T>("mean", Tensor<T>::scalar(static_cast<T>(total / count)), {x}, [count](Node<T>& n) {
        n.parents[0]->accumulate(
            Tensor<T>::full(n.parents[0]->value.dims(), static_cast<T>(n.grad[0] / count)));
    });
}

template <typename T>
Var<T> mean_axis(const Var<T>& x, int axis) {
    const char* op = "mean_axis";
    require_finite(op, x.value());
    if (axis < 0) axis += x.ndim();
    if (axis < 0 || axis >= x.ndim()) shape_fail(op, x.dims(), Dims{axis});
    const Dims& d = x.dims();
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= d[i];
    for (int i = axis + 1; i < x.ndim(); ++i) inner *= d[i];
    const int64_t len = d[axis];
    Dims od;
    for (int i = 0; i < x.ndim(); ++i) {
        if (i != axis) od.push_back(d[i]);
    }
    std::vector<double> acc(static_cast<size_t>(outer * inner), 0.0);
    for (int64_t o = 0; o < outer; ++o) {
        for (int64_t l = 0; l < len; ++l) {
            const T* src = x.value().data() + (o * len + l) * inner;
            for (int64_t i = 0; i < inner; ++i) acc[o * inner + i] += src[i];
        }
    }
    for (auto& v : acc) v /= static_cast<double>(len);
    Tensor<T> out(od, std::vector<T>(acc.begin(), acc.end()));
    return make_result<T>(op, std::move(out), {x}, [outer, inner, len](Node<T>& n) {
        Tensor<T> gx(n.parents[0]->value.dims());
        const T k = static_cast<T>(1.0 / static_cast<double>(len));
        for (int64_t o = 0; o < outer; ++o) {
            for (int64_t l = 0; l < len; ++l) {
                T* dst = gx.data() + (o * len + l) * inner;
                for (int64_t i = 0; i < inner; ++i) dst[i] = n.grad[o * inner + i] * k;
            }
        }
        n.parents[0]->accumulate(std::move(gx));
    });
}

// --- layout -----------------------------------------------------------------

template <typename T>
Var<T> concat(const std::vector<Var<T>>& xs, int axis) {
    const char* op = "concat";
    if (xs.empty()) throw ContractError("concat: no inputs");
    const int nd = xs[0].ndim();
    if (axis < 0) axis += nd;
    if (axis < 0 || axis >= nd) shape_fail(op, xs[0].dims(), Dims{axis});
    Dims od = xs[0].dims();
    od[axis] = 0;
    for (const auto& x : xs) {
        require_finite(op, x.value());
        if (x.ndim() != nd) shape_fail(op, xs[0].dims(), x.dims());
        for (int i = 0; i < nd; ++i) {
            if (i != axis && x.dim(i) != xs[0].dim(i)) shape_fail(op, xs[0].dims(), x.dims());
        }
        od[axis] += x.dim(axis);
    }
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= od[i];
    for (int i = axis + 1; i < nd; ++i) inner *= od[i];
    Tensor<T> out(od);
    std::vector<int64_t> widths;
    for (const auto& x : xs) widths.push_back(x.dim(axis) * inner);
    const int64_t total = od[axis] * inner;
    for (int64_t o = 0; o < outer; ++o) {
        int64_t off = 0;
        for (size_t k = 0; k < xs.size(); ++k) {
            const T* src = xs[k].value().data() + o * widths[k];
            std::copy(src, src + widths[k], out.data() + o * total + off);
            off += widths[k];
        }
    }
    return make_result<T>(op, std::move(out), xs, [outer, widths, total](Node<T>& n) {
        int64_t off = 0;
        for (size_t k = 0; k < n.parents.size(); ++k) {
            if (wants(n, k)) {
                Tensor<T> g(n.parents[k]->value.dims());
                for (int64_t o = 0; o < outer; ++o) {
                    const T* src = n.grad.data() + o * total + off;
                    std::copy(src, src + widths[k], g.data() + o * widths[k]);
                }
                n.parents[k]->accumulate(std::move(g));
            }
            off += widths[k];
        }
    });
}

template <typename T>
Var<T> slice(const Var<T>& x, int axis, int64_t start, int64_t length) {
    const char* op = "slice";
    require_finite(op, x.value());
    if (axis < 0) axis += x.ndim();
    if (axis < 0 || axis >= x.ndim() || start < 0 || length <= 0 || start + length > x.dim(axis)) {
        throw ShapeError(std::string(op) + ": range [" + std::to_string(start) + ", " +
                         std::to_string(start + length) + ") on axis " + std::to_string(axis) + " of " +
                         dims_str(x.dims()));
    }
    Dims od = x.dims();
    od[axis] = length;
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= od[i];
    for (int i = axis + 1; i < x.ndim(); ++i) inner *= od[i];
    const int64_t src_row = x.dim(axis) * inner, dst_row = length * inner, off = start * inner;
    Tensor<T> out(od);
    for (int64_t o = 0; o < outer; ++o) {
        const T* src = x.value().data() + o * src_row + off;
        std::copy(src, src + dst_row, out.data() + o * dst_row);
    }
    return make_result<T>(op, std::move(out), {x}, [outer, src_row, dst_row, off](Node<T>& n) {
        Tensor<T> g(n.parents[0]->value.dims());
        for (int64_t o = 0; o < outer; ++o) {
            const T* src = n.grad.data() + o * dst_row;
            std::copy(src, src + dst_row, g.data() + o * src_row + off);
        }
        n.parents[0]->accumulate(std::move(g));
    });
}

template <typename T>
Var<T> reshape(const Var<T>& x, Dims dims) {
    Tensor<T> out = x.value().reshaped(std::move(dims));
    return make_result<T>("reshape", std::move(out), {x}, [](Node<T>& n) {
        n.parents[0]->accumulate(n.grad.reshaped(n.parents[0]->value.dims()));
    });
}

namespace {

template <typename T>
Tensor<T> permute_tensor(const Tensor<T>& x, const std::vector<int>& perm) {
    const int nd = x.ndim();
    Dims od(static_cast<size_t>(nd));
    for (int i = 0; i < nd; ++i) od[i] = x.dim(perm[i]);
    const auto in_strides = contiguous_strides(x.dims());
    std::vector<int64_t> s(static_cast<size_t>(nd));
    for (int i = 0; i < nd; ++i) s[i] = in_strides[perm[i]];
    Tensor<T> out(od);
    if (nd == 0) {
        out[0] = x[0];
        return out;
    }
    const int64_t inner = od[nd - 1], step = s[nd - 1];
    const int64_t outer = out.numel() / inner;
    std::vector<int64_t> idx(static_cast<size_t>(nd - 1), 0);
    int64_t base = 0, o = 0;
    for (int64_t r = 0; r < outer; ++r) {
        int64_t i = base;
        for (int64_t k = 0; k < inner; ++k, i += step) out[o++] = x[i];
        for (int d = nd - 2; d >= 0; --d) {
            ++idx[d];
            base += s[d];
            if (idx[d] < od[d]) break;
            base -= s[d] * od[d];
            idx[d] = 0;
        }
    }
    return out;
}

}  // namespace

template <typename T>
Var<T> permute(const Var<T>& x, const std::vector<int>& perm) {
    const char* op = "permute";
    if (static_cast<int>(perm.size()) != x.ndim()) shape_fail(op, x.dims(), Dims(perm.begin(), perm.end()));
    std::vector<int> inverse(perm.size(), -1);
    for (size_t i = 0; i < perm.size(); ++i) {
        if (perm[i] < 0 || perm[i] >= x.ndim() || inverse[perm[i]] != -1) {
            shape_fail(op, x.dims(), Dims(perm.begin(), perm.end()));
        }
        inverse[perm[i]] = static_cast<int>(i);
    }
    return make_result<T>(op, permute_tensor(x.value(), perm), {x}, [inverse](Node<T>& n) {
        n.parents[0]->accumulate(permute_tensor(n.grad, inverse));
    });
}

template <typename T>
Var<T> embedding(const Var<T>& table, const std::vector<int>& ids, Dims id_dims) {
    const char* op = "embedding";
    require_finite(op, table.value());
    if (table.ndim() != 2 || numel_of(id_dims) != static_cast<int64_t>(ids.size())) {
        shape_fail(op, table.dims(), id_dims);
    }
    const int64_t vocab = table.dim(0), width = table.dim(1);
    for (int id : ids) {
        if (id < 0 || id >= vocab) {
            throw ContractError("embedding: token id " + std::to_string(id) + " outside vocabulary of " +
                                std::to_string(vocab));
        }
    }
    Dims od = id_dims;
    od.push_back(width);
    Tensor<T> out(od);
    for (size_t i = 0; i < ids.size(); ++i) {
        const T* src = table.value().data() + ids[i] * width;
        std::copy(src, src + width, out.data() + static_cast<int64_t>(i) * width);
    }
    return make_result<T>(op, std::move(out), {table}, [ids, width](Node<T>& n) {
        Tensor<T> g(n.parents[0]->value.dims());
        for (size_t i = 0; i < ids.size(); ++i) {
            const T* src = n.grad.data() + static_cast<int64_t>(i) * width;
            T* dst = g.data() + ids[i] * width;
            for (int64_t k = 0; k < width; ++k) dst[k] += src[k];
        }
        n.parents[0]->accumulate(std::move(g));
    });
}

// --- losses -----------------------------------------------------------------

template <typename T>
Var<T> focal_loss_with_logits(const Var<T>& logits, const Tensor<T>& target, double alpha, double gamma) {
    const char* op = "focal_loss";
    require_finite(op, logits.value());
    if (logits.dims() != target.dims()) shape_fail(op, logits.dims(), target.dims());
    const int64_t count = logits.numel();
    // Per element: s = +1 for positives, -1 for negatives; p_t = sigmoid(s * x);
    // loss = -alpha_t (1 - p_t)^gamma log p_t.
    double total = 0.0;
    for (int64_t i = 0; i < count; ++i) {
        const bool pos = target[i] >= T(0.5);
        const double z = (pos ? 1.0 : -1.0) * logits.value()[i];
        const double log_pt = -std::log1p(std::exp(-std::abs(z))) - std::max(-z, 0.0);
        const double pt = std::exp(log_pt);
        const double a = pos ? alpha : 1.0 - alpha;
        total += -a * std::pow(1.0 - pt, gamma) * log_pt;
    }
    const double inv = 1.0 / static_cast<double>(count);
    return make_result<T>(op, Tensor<T>::scalar(static_cast<T>(total * inv)), {logits},
                          [target, alpha, gamma, inv](Node<T>& n) {
                              const auto& X = n.parents[0]->value;
                              Tensor<T> g(X.dims());
                              const double up = n.grad[0] * inv;
                              for (int64_t i = 0; i < g.numel(); ++i) {
                                  const bool pos = target[i] >= T(0.5);
                                  const double s = pos ? 1.0 : -1.0;
                                  const double z = s * X[i];
                                  const double log_pt = -std::log1p(std::exp(-std::abs(z))) - std::max(-z, 0.0);
                                  const double pt = std::exp(log_pt);
                                  const double a = pos ? alpha : 1.0 - alpha;
                                  const double q = 1.0 - pt;
                                  const double d = a * s * std::pow(q, gamma) * (gamma * pt * log_pt - q);
                                  g[i] = static_cast<T>(up * d);
                              }
                              n.parents[0]->accumulate(std::move(g));
                          });
}

template <typename T>
Var<T> dice_loss(const Var<T>& probs, const Tensor<T>& target, double smooth) {
    const char* op = "dice_loss";
    require_finite(op, probs.value());
    if (probs.dims() != target.dims() || probs.ndim() < 1) shape_fail(op, probs.dims(), target.dims());
    const int64_t items = probs.dim(0), per = probs.numel() / items;
    std::vector<double> inter(static_cast<size_t>(items)), denom(static_cast<size_t>(items));
    double total = 0.0;
    for (int64_t b = 0; b < items; ++b) {
        double pi = 0.0, ps = 0.0, gs = 0.0;
        for (int64_t i = b * per; i < (b + 1) * per; ++i) {
            pi += double(probs.value()[i]) * target[i];
            ps += probs.value()[i];
            gs += target[i];
        }
        inter[b] = pi;
        denom[b] = ps + gs + smooth;
        total += 1.0 - (2.0 * pi + smooth) / denom[b];
    }
    return make_result<T>(op, Tensor<T>::scalar(static_cast<T>(total / items)), {probs},
                          [target, inter, denom, smooth, items, per](Node<T>& n) {
                              Tensor<T> g(n.parents[0]->value.dims());
                              const double up = n.grad[0] / static_cast<double>(items);
                              for (int64_t b = 0; b < items; ++b) {
                                  const double num = 2.0 * inter[b] + smooth;
                                  const double den = denom[b];
                                  for (int64_t i = b * per; i < (b + 1) * per; ++i) {
                                      // d/dp [-(num/den)] = -(2 g den - num) / den^2
                                      g[i] = static_cast<T>(-up * (2.0 * target[i] * den - num) / (den * den));
                                  }
                              }
                              n.parents[0]->accumulate(std::move(g));
                          });
}

template <typename T>
Var<T> mse_loss(const Var<T>& pred, const Tensor<T>& target) {
    const char* op = "mse_loss";
    require_finite(op, pred.value());
    require_finite(op, target);
    if (pred.dims() != target.dims()) shape_fail(op, pred.dims(), target.dims());
    double total = 0.0;
    for (int64_t i = 0; i < pred.numel(); ++i) {
        const double d = double(pred.value()[i]) - target[i];
        total += d * d;
    }
    const double inv = 1.0 / static_cast<double>(pred.numel());
    return make_result<T>(op, Tensor<T>::scalar(static_cast<T>(total * inv)), {pred}, [target, inv](Node<T>& n) {
        const auto& P = n.parents[0]->value;
        Tensor<T> g(P.dims());
        const double k = 2.0 * inv * n.grad[0];
        for (int64_t i = 0; i < g.numel(); ++i) g[i] = static_cast<T>(k * (double(P[i]) - target[i]));
        n.parents[0]->accumulate(std::move(g));
    });
}

template <typename T>
Var<T> custom_op(const char* op, Tensor<T> value, std::vector<Var<T>> inputs,
                 std::function<void(Node<T>&)> backward) {
    return make_result<T>(op, std::move(value), std::move(inputs), std::move(backward));
}

// --- instantiation ------------------------------------------------------------

#define FLOWSEG_INSTANTIATE(T)                                                                          \
    template struct Node<T>;                                                                            \
    template class Var<T>;                                                                              \
    template class Tape<T>;                                                                             \
    template Var<T> add(const Var<T>&, const Var<T>&);                                                  \
    template Var<T> sub(const Var<T>&, const Var<T>&);                                                  \
    template Var<T> mul(const Var<T>&, const Var<T>&);                                                  \
    template Var<T> scale(const Var<T>&, double);                                                       \
    template Var<T> add_scalar(const Var<T>&, double);                                                  \
    template Var<T> matmul(const Var<T>&, const Var<T>&, bool, bool);                                   \
    template Var<T> conv2d(const Var<T>&, const Var<T>&, int, int);                                     \
    template Var<T> conv_transpose2d(const Var<T>&, const Var<T>&, int, int);                           \
    template Var<T> relu(const Var<T>&);                                                                \
    template Var<T> gelu(const Var<T>&);                                                                \
    template Var<T> sigmoid(const Var<T>&);                                                             \
    template Var<T> exp(const Var<T>&);                                                                 \
    template Var<T> softmax(const Var<T>&);                                                             \
    template Var<T> layer_norm(const Var<T>&, double);                                                  \
    template Var<T> sum(const Var<T>&);                                                                 \
    template Var<T> mean(const Var<T>&);                                                                \
    template Var<T> mean_axis(const Var<T>&, int);                                                      \
    template Var<T> concat(const std::vector<Var<T>>&, int);                                            \
    template Var<T> slice(const Var<T>&, int, int64_t, int64_t);                                        \
    template Var<T> reshape(const Var<T>&, Dims);                                                       \
    template Var<T> permute(const Var<T>&, const std::vector<int>&);                                    \
    template Var<T> embedding(const Var<T>&, const std::vector<int>&, Dims);                            \
    template Var<T> focal_loss_with_logits(const Var<T>&, const Tensor<T>&, double, double);            \
    template Var<T> dice_loss(const Var<T>&, const Tensor<T>&, double);                                 \
    template Var<T> mse_loss(const Var<T>&, const Tensor<T>&);                                          \
    template Var<T> custom_op(const char*, Tensor<T>, std::vector<Var<T>>, std::function<void(Node<T>&)>);

FLOWSEG_INSTANTIATE(float)
FLOWSEG_INSTANTIATE(double)

#undef FLOWSEG_INSTANTIATE

}  // namespace flowseg::nn
