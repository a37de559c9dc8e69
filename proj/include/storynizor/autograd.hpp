#pragma once

#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "storynizor/tensor.hpp"

namespace storynizor {

template <typename T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    Tensor<T>& grad_buffer() {
        if (grad.empty() && value.numel() > 0) grad = Tensor<T>(value.shape);
        return grad;
    }
};

// Handle to a node of the dynamic autograd graph. Copies share the node.
template <typename T>
class Var {
public:
    Var() = default;
    explicit Var(Tensor<T> value, bool requires_grad = false);
    explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

    const Tensor<T>& value() const { return node_->value; }
    Tensor<T>& mutable_value() { return node_->value; }
    const Shape& shape() const { return node_->value.shape; }
    int64_t dim(int i) const { return node_->value.dim(i); }
    int64_t numel() const { return node_->value.numel(); }
    T item() const;

    const Tensor<T>& grad() const { return node_->grad; }
    Tensor<T>& mutable_grad() { return node_->grad; }
    bool has_grad() const { return !node_->grad.empty(); }
    void zero_grad() { node_->grad = Tensor<T>(); }
    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool on) { node_->requires_grad = on; }

    Node<T>* node() const { return node_.get(); }
    const std::shared_ptr<Node<T>>& shared() const { return node_; }
    explicit operator bool() const { return static_cast<bool>(node_); }

private:
    std::shared_ptr<Node<T>> node_;
};

bool grad_enabled();

// Disables graph recording in scope (inference, sampling, evaluation).
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

// Accumulates d(root)/d(leaf) into every reachable node that requires grad.
// The graph behind `root` is released afterwards.
template <typename T>
void backward(const Var<T>& root);

template <typename T>
Var<T> constant(Tensor<T> value) {
    return Var<T>(std::move(value), false);
}

namespace ag {

// Elementwise, same shape.
template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> div(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> maximum(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> scale(const Var<T>& a, T s);
template <typename T> Var<T> add_scalar(const Var<T>& a, T s);
template <typename T> Var<T> mul_const(const Var<T>& a, const Tensor<T>& c);
// x * s where s is a one-element variable.
template <typename T> Var<T> mul_scalar_var(const Var<T>& x, const Var<T>& s);
template <typename T> Var<T> square(const Var<T>& a);
template <typename T> Var<T> log(const Var<T>& a);
template <typename T> Var<T> clamp(const Var<T>& a, T lo, T hi);
template <typename T> Var<T> silu(const Var<T>& a);
template <typename T> Var<T> gelu(const Var<T>& a);

// Reductions to a one-element tensor.
template <typename T> Var<T> sum(const Var<T>& a);
template <typename T> Var<T> mean(const Var<T>& a);
template <typename T> Var<T> mse(const Var<T>& a, const Var<T>& b);

template <typename T> Var<T> reshape(const Var<T>& a, Shape shape);
// Stack/cut along the leading axis.
template <typename T> Var<T> concat0(std::span<const Var<T>> parts);
template <typename T> Var<T> slice0(const Var<T>& a, int64_t start, int64_t length);
// Concatenate along the last axis; leading dims must agree.
template <typename T> Var<T> concat_last(const Var<T>& a, const Var<T>& b);

// x[..., C] + b[C]
template <typename T> Var<T> add_bias(const Var<T>& x, const Var<T>& b);
// x[B, S, C] + e[B, C] broadcast over S.
template <typename T> Var<T> add_rows(const Var<T>& x, const Var<T>& e);
// x[B, ...] + p[...] broadcast over B.
template <typename T> Var<T> add_leading(const Var<T>& x, const Var<T>& p);

// x[..., K] @ w[K, N] (+ b[N]).
template <typename T> Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>* b = nullptr);
// a[G, M, K] @ b[G, K, N]
template <typename T> Var<T> bmm(const Var<T>& a, const Var<T>& b);
// a[G, M, K] @ b[G, N, K]^T
template <typename T> Var<T> bmm_nt(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> softmax_last(const Var<T>& x);

// [B, S, H*d] <-> [B*H, S, d]
template <typename T> Var<T> split_heads(const Var<T>& x, int heads);
template <typename T> Var<T> merge_heads(const Var<T>& x, int heads);

// NHWC convolution, w[KH, KW, Cin, Cout].
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>* b, int stride, int padding);
// x[B, S, C] normalized over (S, C/groups) per group.
template <typename T>
Var<T> group_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, int groups, T eps);
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps);
template <typename T> Var<T> upsample_nearest2x(const Var<T>& x);
// table[V, D] rows gathered by ids -> [ids.size(), D]
template <typename T> Var<T> embedding(const Var<T>& table, std::span<const int> ids);
template <typename T> Var<T> l2_normalize_rows(const Var<T>& x, T eps);
// Mean over the last axis: [..., D] -> [...]
template <typename T> Var<T> mean_last(const Var<T>& x);

// Attention-map helpers.
// probs[B*H, S, L] -> mean over heads [B, S, L]
template <typename T> Var<T> head_mean(const Var<T>& probs, int heads);
// x[B, S, L] -> mean over columns [start, end] of batch row b, shape [S]
template <typename T> Var<T> column_span_mean(const Var<T>& x, int64_t b, int64_t start, int64_t end);
// x[M, H, W] -> [M, H2, W2], half-pixel bilinear (align_corners = false).
template <typename T> Var<T> bilinear_resize(const Var<T>& x, int64_t out_h, int64_t out_w);
// x[M, S]: each row divided by its maximum; rows with max <= 0 become zero.
template <typename T> Var<T> max_normalize_rows(const Var<T>& x);
// x[M, S] -> elementwise max over rows, [S]; M == 0 is not allowed.
template <typename T> Var<T> max_over_rows(const Var<T>& x);
// logits[B*H, S, S] += log_mask[B, S] at (q, k) whenever frame(q) != frame(k),
// where frame(i) = i / frame_len.
template <typename T>
Var<T> add_cross_frame_key_bias(const Var<T>& logits, const Var<T>& log_mask, int heads, int64_t frame_len);

}  // namespace ag
}  // namespace storynizor
