#pragma once

#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "storynizor/autograd.hpp"
#include "storynizor/checkpoint.hpp"
#include "storynizor/rng.hpp"

namespace storynizor {

// Named parameters keyed by canonical module path ("unet.down.1.res.conv1.weight").
template <typename T>
class ParamStore {
public:
    Var<T> create(const std::string& name, Tensor<T> init);
    Var<T> get(const std::string& name) const;
    bool contains(const std::string& name) const { return params_.count(name) > 0; }
    const std::map<std::string, Var<T>>& all() const { return params_; }

    // Marks exactly the parameters matching `pred` as trainable.
    void set_trainable(const std::function<bool(const std::string&)>& pred);
    std::vector<std::string> trainable_names() const;
    void zero_grad();

    TensorMap export_float() const;
    // Strict: every stored name must be present with matching shape.
    // Names in `values` unknown to the store are ignored when `allow_extra`.
    void import_float(const TensorMap& values, bool allow_extra = false);

private:
    std::map<std::string, Var<T>> params_;
};

template <typename T>
Tensor<T> uniform_init(Shape shape, double bound, Rng& rng);

template <typename T>
class Linear {
public:
    Linear() = default;
    Linear(ParamStore<T>& store, const std::string& prefix, int in, int out, Rng& rng, bool bias = true,
           double init_gain = 1.0);
    Var<T> operator()(const Var<T>& x) const;
    const Var<T>& weight() const { return weight_; }

private:
    Var<T> weight_;
    Var<T> bias_;
    bool has_bias_ = false;
};

template <typename T>
class Conv2d {
public:
    Conv2d() = default;
    Conv2d(ParamStore<T>& store, const std::string& prefix, int in, int out, int kernel, int stride, int padding,
           Rng& rng, double init_gain = 1.0);
    Var<T> operator()(const Var<T>& x) const;

private:
    Var<T> weight_;
    Var<T> bias_;
    int stride_ = 1;
    int padding_ = 0;
};

template <typename T>
class GroupNorm {
public:
    GroupNorm() = default;
    GroupNorm(ParamStore<T>& store, const std::string& prefix, int channels, int groups);
    // x[B, S, C]
    Var<T> operator()(const Var<T>& x) const;

private:
    Var<T> gamma_;
    Var<T> beta_;
    int groups_ = 1;
};

template <typename T>
class LayerNorm {
public:
    LayerNorm() = default;
    LayerNorm(ParamStore<T>& store, const std::string& prefix, int dim);
    Var<T> operator()(const Var<T>& x) const;

private:
    Var<T> gamma_;
    Var<T> beta_;
};

// softmax(q k^T / sqrt(d)) per head. q[B, Sq, C], k[B, Sk, C] -> [B*heads, Sq, Sk]
template <typename T>
Var<T> attention_probs(const Var<T>& q, const Var<T>& k, int heads);
// probs[B*heads, Sq, Sk] applied to v[B, Sk, C] -> [B, Sq, C]
template <typename T>
Var<T> attend(const Var<T>& probs, const Var<T>& v, int heads);
// Plain multi-head attention, no bias.
template <typename T>
Var<T> dot_product_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, int heads);

// Interception points used by the frame synchronizer. A backbone without
// hooks runs frame-local self-attention and records nothing.
template <typename T>
class AttentionHooks {
public:
    virtual ~AttentionHooks() = default;
    // q, k, v: [B*N, H*W, C] projections of the self-attention block `block`.
    // Returns the attended hidden states, same shape.
    virtual Var<T> self_attention(int block, const Var<T>& q, const Var<T>& k, const Var<T>& v, int64_t height,
                                  int64_t width, int heads, int frames) = 0;
    // probs: [B*N*heads, H*W, L] text cross-attention probabilities of `block`.
    virtual void cross_attention_probs(int block, const Var<T>& probs, int64_t height, int64_t width, int heads) = 0;
};

// Where a backbone looks up its hooks. At most one hook object at a time.
template <typename T>
class HookSlot {
public:
    void attach(AttentionHooks<T>* hooks) {
        if (hooks_) throw std::logic_error("attention hooks are already attached");
        hooks_ = hooks;
    }
    void detach() { hooks_ = nullptr; }
    AttentionHooks<T>* get() const { return hooks_; }

private:
    AttentionHooks<T>* hooks_ = nullptr;
};

// Self-attention over all frames of a story at once. q, k, v: [B*N, S, C].
template <typename T>
Var<T> joint_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, int heads, int frames);

// Rescales the gradients of trainable parameters so their joint L2 norm is at
// most max_norm (no-op when max_norm <= 0). Returns the norm before scaling.
template <typename T>
double clip_grad_norm(ParamStore<T>& store, double max_norm);

// Decoupled weight decay Adam. Only parameters that require grad and carry a
// gradient are touched.
template <typename T>
class AdamW {
public:
    AdamW(double lr, double weight_decay, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), weight_decay_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void step(ParamStore<T>& store);
    void set_lr(double lr) { lr_ = lr; }
    int64_t steps() const { return step_; }

    TensorMap export_state() const;
    void import_state(const TensorMap& state, int64_t step);

private:
    double lr_, weight_decay_, beta1_, beta2_, eps_;
    int64_t step_ = 0;
    std::map<std::string, Tensor<T>> m_, v_;
};

}  // namespace storynizor
