#include "storynizor/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace storynizor {

template <typename T>
Var<T> ParamStore<T>::create(const std::string& name, Tensor<T> init) {
    if (params_.count(name)) throw std::logic_error("duplicate parameter " + name);
    Var<T> v(std::move(init), true);
    params_.emplace(name, v);
    return v;
}

template <typename T>
Var<T> ParamStore<T>::get(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("unknown parameter " + name);
    return it->second;
}

template <typename T>
void ParamStore<T>::set_trainable(const std::function<bool(const std::string&)>& pred) {
    for (auto& [name, p] : params_) {
        p.set_requires_grad(pred(name));
        p.zero_grad();
    }
}

template <typename T>
std::vector<std::string> ParamStore<T>::trainable_names() const {
    std::vector<std::string> names;
    for (const auto& [name, p] : params_)
        if (p.requires_grad()) names.push_back(name);
    return names;
}

template <typename T>
void ParamStore<T>::zero_grad() {
    for (auto& [_, p] : params_) p.zero_grad();
}

template <typename T>
TensorMap ParamStore<T>::export_float() const {
    TensorMap out;
    for (const auto& [name, p] : params_) out.emplace(name, p.value().template cast<float>());
    return out;
}

template <typename T>
void ParamStore<T>::import_float(const TensorMap& values, bool allow_extra) {
    for (auto& [name, p] : params_) {
        auto it = values.find(name);
        if (it == values.end()) throw std::runtime_error("checkpoint is missing parameter " + name);
        if (it->second.shape != p.shape())
            throw std::runtime_error("parameter " + name + " has shape " + shape_str(it->second.shape) + ", expected " +
                                     shape_str(p.shape()));
        p.mutable_value() = it->second.template cast<T>();
    }
    if (!allow_extra)
        for (const auto& [name, _] : values)
            if (!params_.count(name)) throw std::runtime_error("checkpoint has unexpected parameter " + name);
}

template <typename T>
Tensor<T> uniform_init(Shape shape, double bound, Rng& rng) {
    Tensor<T> t(std::move(shape));
    for (auto& v : t.data) v = static_cast<T>(rng.uniform(-bound, bound));
    return t;
}

template <typename T>
Linear<T>::Linear(ParamStore<T>& store, const std::string& prefix, int in, int out, Rng& rng, bool bias,
                  double init_gain)
    : has_bias_(bias) {
    const double bound = init_gain / std::sqrt(static_cast<double>(in));
    weight_ = store.create(prefix + ".weight", uniform_init<T>({in, out}, bound, rng));
    if (bias) bias_ = store.create(prefix + ".bias", uniform_init<T>({out}, bound, rng));
}

template <typename T>
Var<T> Linear<T>::operator()(const Var<T>& x) const {
    return ag::linear(x, weight_, has_bias_ ? &bias_ : nullptr);
}

template <typename T>
Conv2d<T>::Conv2d(ParamStore<T>& store, const std::string& prefix, int in, int out, int kernel, int stride,
                  int padding, Rng& rng, double init_gain)
    : stride_(stride), padding_(padding) {
    const double bound = init_gain / std::sqrt(static_cast<double>(in * kernel * kernel));
    weight_ = store.create(prefix + ".weight", uniform_init<T>({kernel, kernel, in, out}, bound, rng));
    bias_ = store.create(prefix + ".bias", uniform_init<T>({out}, bound, rng));
}

template <typename T>
Var<T> Conv2d<T>::operator()(const Var<T>& x) const {
    return ag::conv2d(x, weight_, &bias_, stride_, padding_);
}

template <typename T>
GroupNorm<T>::GroupNorm(ParamStore<T>& store, const std::string& prefix, int channels, int groups) : groups_(groups) {
    gamma_ = store.create(prefix + ".weight", Tensor<T>({channels}, T(1)));
    beta_ = store.create(prefix + ".bias", Tensor<T>({channels}, T(0)));
}

template <typename T>
Var<T> GroupNorm<T>::operator()(const Var<T>& x) const {
    return ag::group_norm(x, gamma_, beta_, groups_, T(1e-5));
}

template <typename T>
LayerNorm<T>::LayerNorm(ParamStore<T>& store, const std::string& prefix, int dim) {
    gamma_ = store.create(prefix + ".weight", Tensor<T>({dim}, T(1)));
    beta_ = store.create(prefix + ".bias", Tensor<T>({dim}, T(0)));
}

template <typename T>
Var<T> LayerNorm<T>::operator()(const Var<T>& x) const {
    return ag::layer_norm(x, gamma_, beta_, T(1e-5));
}

template <typename T>
Var<T> attention_probs(const Var<T>& q, const Var<T>& k, int heads) {
    const T scale = T(1) / std::sqrt(static_cast<T>(q.dim(-1) / heads));
    auto logits = ag::scale(ag::bmm_nt(ag::split_heads(q, heads), ag::split_heads(k, heads)), scale);
    return ag::softmax_last(logits);
}

template <typename T>
Var<T> attend(const Var<T>& probs, const Var<T>& v, int heads) {
    return ag::merge_heads(ag::bmm(probs, ag::split_heads(v, heads)), heads);
}

template <typename T>
Var<T> dot_product_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, int heads) {
    return attend(attention_probs(q, k, heads), v, heads);
}

template <typename T>
Var<T> joint_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, int heads, int frames) {
    const int64_t f = q.dim(0), s = q.dim(1), c = q.dim(2);
    if (frames <= 0 || f % frames != 0)
        throw std::invalid_argument("joint_attention: " + std::to_string(f) + " frames do not split into stories of " +
                                    std::to_string(frames));
    const Shape joint{f / frames, frames * s, c};
    auto out = dot_product_attention(ag::reshape(q, joint), ag::reshape(k, joint), ag::reshape(v, joint), heads);
    return ag::reshape(out, {f, s, c});
}

template <typename T>
double clip_grad_norm(ParamStore<T>& store, double max_norm) {
    double sq = 0;
    for (const auto& [name, p] : store.all()) {
        if (!p.requires_grad() || !p.has_grad()) continue;
        for (T g : p.grad().data) sq += static_cast<double>(g) * g;
    }
    const double norm = std::sqrt(sq);
    if (max_norm > 0 && norm > max_norm) {
        const T scale = static_cast<T>(max_norm / (norm + 1e-12));
        for (const auto& [name, p] : store.all()) {
            if (!p.requires_grad() || !p.has_grad()) continue;
            Var<T> param = p;
            for (auto& g : param.mutable_grad().data) g *= scale;
        }
    }
    return norm;
}

template <typename T>
void AdamW<T>::step(ParamStore<T>& store) {
    ++step_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(step_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(step_));
    for (const auto& [name, p] : store.all()) {
        if (!p.requires_grad() || !p.has_grad()) continue;
        auto& m = m_[name];
        auto& v = v_[name];
        if (m.empty()) m = Tensor<T>(p.shape());
        if (v.empty()) v = Tensor<T>(p.shape());
        Var<T> param = p;
        auto& w = param.mutable_value();
        const auto& g = p.grad();
        for (int64_t i = 0; i < w.numel(); ++i) {
            const double gi = static_cast<double>(g[i]);
            m[i] = static_cast<T>(beta1_ * m[i] + (1.0 - beta1_) * gi);
            v[i] = static_cast<T>(beta2_ * v[i] + (1.0 - beta2_) * gi * gi);
            const double update = (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_) + weight_decay_ * w[i];
            w[i] = static_cast<T>(w[i] - lr_ * update);
        }
    }
}

template <typename T>
TensorMap AdamW<T>::export_state() const {
    TensorMap out;
    for (const auto& [name, t] : m_) out.emplace("m/" + name, t.template cast<float>());
    for (const auto& [name, t] : v_) out.emplace("v/" + name, t.template cast<float>());
    return out;
}

template <typename T>
void AdamW<T>::import_state(const TensorMap& state, int64_t step) {
    m_.clear();
    v_.clear();
    for (const auto& [key, t] : state) {
        if (key.rfind("m/", 0) == 0)
            m_[key.substr(2)] = t.template cast<T>();
        else if (key.rfind("v/", 0) == 0)
            v_[key.substr(2)] = t.template cast<T>();
        else
            throw std::runtime_error("unknown optimizer state entry " + key);
    }
    step_ = step;
}

#define STORYNIZOR_INSTANTIATE_NN(T)                                                  \
    template class ParamStore<T>;                                                     \
    template Tensor<T> uniform_init<T>(Shape, double, Rng&);                          \
    template class Linear<T>;                                                         \
    template class Conv2d<T>;                                                         \
    template class GroupNorm<T>;                                                      \
    template class LayerNorm<T>;                                                      \
    template Var<T> attention_probs(const Var<T>&, const Var<T>&, int);               \
    template Var<T> attend(const Var<T>&, const Var<T>&, int);                        \
    template Var<T> dot_product_attention(const Var<T>&, const Var<T>&, const Var<T>&, int); \
    template Var<T> joint_attention(const Var<T>&, const Var<T>&, const Var<T>&, int, int); \
    template double clip_grad_norm(ParamStore<T>&, double);                           \
    template class AdamW<T>;

STORYNIZOR_INSTANTIATE_NN(float)
STORYNIZOR_INSTANTIATE_NN(double)

}  // namespace storynizor
