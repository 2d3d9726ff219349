#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "flowseg/tensor.hpp"

namespace flowseg::nn {

template <typename T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad;  // empty until the first gradient arrives
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    /// Adds `g` into this node's gradient, allocating it on first use.
    void accumulate(const Tensor<T>& g);
    void accumulate(Tensor<T>&& g);
};

/// Handle to a value in the computation graph. Copies share the node.
template <typename T>
class Var {
   public:
    using value_type = T;

    Var() = default;
    explicit Var(Tensor<T> value, bool requires_grad = false);
    explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

    const Tensor<T>& value() const { return node_->value; }
    /// In-place access for optimizers and checkpoint loading; only valid on leaves.
    Tensor<T>& mutable_value();
    const Tensor<T>& grad() const { return node_->grad; }
    bool has_grad() const { return !node_->grad.empty(); }
    void zero_grad() { node_->grad = Tensor<T>(); }

    bool requires_grad() const { return node_ && node_->requires_grad; }
    const Dims& dims() const { return node_->value.dims(); }
    int ndim() const { return node_->value.ndim(); }
    int64_t dim(int axis) const { return node_->value.dim(axis); }
    int64_t numel() const { return node_->value.numel(); }
    const std::shared_ptr<Node<T>>& node() const { return node_; }
    explicit operator bool() const { return static_cast<bool>(node_); }

   private:
    std::shared_ptr<Node<T>> node_;
};

/// Records the nodes created by differentiable ops while it is active.
///
/// Constructing a tape makes it the active tape on the current thread; the
/// previous one is restored on destruction. Ops only record when some input
/// requires gradients and a tape is active, so forward passes outside a tape
/// keep no graph alive.
template <typename T>
class Tape {
   public:
    Tape();
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    void record(std::shared_ptr<Node<T>> node) { nodes_.push_back(std::move(node)); }
    size_t size() const { return nodes_.size(); }

    /// Propagates d(loss)/d(node) to every requires-grad leaf reachable from
    /// `loss`, visiting recorded nodes once each in reverse creation order.
    /// The tape is empty afterwards.
    void backward(const Var<T>& loss);

    static Tape* active();

   private:
    std::vector<std::shared_ptr<Node<T>>> nodes_;
    Tape* previous_ = nullptr;
};

// ---------------------------------------------------------------------------
// Differentiable operations. All validate dims (ShapeError) and reject
// non-finite inputs (NumericError).

/// Elementwise with numpy-style broadcasting.
template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> scale(const Var<T>& a, double s);
template <typename T> Var<T> add_scalar(const Var<T>& a, double s);

/// a[..., M, K] x b[..., K, N] (b may also be a plain 2-D matrix shared by every batch).
template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b, bool transpose_a = false, bool transpose_b = false);

/// NHWC convolution with explicit zero padding; w is [KH, KW, Cin, Cout].
template <typename T> Var<T> conv2d(const Var<T>& x, const Var<T>& w, int stride, int pad);

/// Adjoint of conv2d; w is [KH, KW, Cout, Cin]. Output extent (H-1)*stride - 2*pad + KH.
template <typename T> Var<T> conv_transpose2d(const Var<T>& x, const Var<T>& w, int stride, int pad);

template <typename T> Var<T> relu(const Var<T>& x);
/// tanh approximation.
template <typename T> Var<T> gelu(const Var<T>& x);
template <typename T> Var<T> sigmoid(const Var<T>& x);
template <typename T> Var<T> exp(const Var<T>& x);
template <typename T> Var<T> softmax(const Var<T>& x);  // last axis
/// Normalizes over the last axis, no affine parameters.
template <typename T> Var<T> layer_norm(const Var<T>& x, double eps = 1e-6);

template <typename T> Var<T> sum(const Var<T>& x);
template <typename T> Var<T> mean(const Var<T>& x);
/// Mean over one axis, which is removed from the result.
template <typename T> Var<T> mean_axis(const Var<T>& x, int axis);

template <typename T> Var<T> concat(const std::vector<Var<T>>& xs, int axis);
template <typename T> Var<T> slice(const Var<T>& x, int axis, int64_t start, int64_t length);
template <typename T> Var<T> reshape(const Var<T>& x, Dims dims);
template <typename T> Var<T> permute(const Var<T>& x, const std::vector<int>& perm);

/// Rows of `table` [V, D] selected by ids; result dims are id_dims + [D].
template <typename T>
Var<T> embedding(const Var<T>& table, const std::vector<int>& ids, Dims id_dims);

/// Mean over elements of the binary focal loss on logits; targets are {0,1}.
template <typename T>
Var<T> focal_loss_with_logits(const Var<T>& logits, const Tensor<T>& target, double alpha, double gamma);

/// 1 - (2|P.G| + s) / (|P| + |G| + s) per item along axis 0, averaged over items.
template <typename T>
Var<T> dice_loss(const Var<T>& probs, const Tensor<T>& target, double smooth = 1.0);

/// Mean squared difference against a constant target.
template <typename T> Var<T> mse_loss(const Var<T>& pred, const Tensor<T>& target);

/// Builds a node from a caller-supplied value and backward rule. Used for
/// one-off ops and for test fixtures.
template <typename T>
Var<T> custom_op(const char* op, Tensor<T> value, std::vector<Var<T>> inputs,
                 std::function<void(Node<T>&)> backward);

// Convenience constructors.
template <typename T> Var<T> constant(Tensor<T> value) { return Var<T>(std::move(value), false); }
template <typename T> Var<T> parameter(Tensor<T> value) { return Var<T>(std::move(value), true); }

/// Scalar per-element helpers shared with tests.
double gelu_scalar(double x);
double gelu_grad_scalar(double x);

}  // namespace flowseg::nn
