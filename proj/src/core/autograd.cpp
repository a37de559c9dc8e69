#include "storynizor/autograd.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace storynizor {

namespace {

thread_local bool g_grad_enabled = true;

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// C[M, N] (+)= op(A) op(B) with op(A) of shape [M, K] and op(B) of shape [K, N].
template <typename T>
void gemm(const T* a, bool trans_a, const T* b, bool trans_b, T* c, int64_t m, int64_t n, int64_t k,
          bool accumulate) {
    Eigen::Map<const RowMat<T>> ma(a, trans_a ? k : m, trans_a ? m : k);
    Eigen::Map<const RowMat<T>> mb(b, trans_b ? n : k, trans_b ? k : n);
    Eigen::Map<RowMat<T>> mc(c, m, n);
    auto run = [&](const auto& lhs, const auto& rhs) {
        if (accumulate)
            mc.noalias() += lhs * rhs;
        else
            mc.noalias() = lhs * rhs;
    };
    if (!trans_a && !trans_b)
        run(ma, mb);
    else if (trans_a && !trans_b)
        run(ma.transpose(), mb);
    else if (!trans_a && trans_b)
        run(ma, mb.transpose());
    else
        run(ma.transpose(), mb.transpose());
}

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

template <typename T>
Var<T> make_result(Tensor<T> value, std::vector<NodePtr<T>> parents, std::function<void(Node<T>&)> fn) {
    auto node = std::make_shared<Node<T>>();
    node->value = std::move(value);
    if (g_grad_enabled) {
        bool any = std::any_of(parents.begin(), parents.end(), [](const NodePtr<T>& p) { return p && p->requires_grad; });
        if (any) {
            node->requires_grad = true;
            node->parents = std::move(parents);
            node->backward_fn = std::move(fn);
        }
    }
    return Var<T>(std::move(node));
}

void require(bool ok, const std::string& what) {
    if (!ok) throw std::invalid_argument(what);
}

template <typename T>
void require_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
    if (a.shape() != b.shape())
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
}

template <typename T>
bool wants(const NodePtr<T>& p) {
    return p && p->requires_grad;
}

}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

template <typename T>
Var<T>::Var(Tensor<T> value, bool requires_grad) : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
}

template <typename T>
T Var<T>::item() const {
    if (node_->value.numel() != 1) throw std::logic_error("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
}

template <typename T>
void backward(const Var<T>& root) {
    if (!root.requires_grad()) return;
    Node<T>* start = root.node();
    Tensor<T>& seed = start->grad_buffer();
    std::fill(seed.data.begin(), seed.data.end(), T(1));

    // Iterative post-order DFS. `order` owns the nodes so that releasing the
    // graph edges below cannot free a node that is still pending.
    std::vector<std::shared_ptr<Node<T>>> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<std::shared_ptr<Node<T>>, size_t>> stack{{root.shared(), 0}};
    seen.insert(start);
    while (!stack.empty()) {
        auto& top = stack.back();
        if (top.second < top.first->parents.size()) {
            auto p = top.first->parents[top.second++];
            if (p && p->requires_grad && !seen.count(p.get())) {
                seen.insert(p.get());
                stack.emplace_back(std::move(p), 0);
            }
        } else {
            order.push_back(std::move(top.first));
            stack.pop_back();
        }
    }
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* node = it->get();
        if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
        if (node->backward_fn) {
            node->backward_fn = nullptr;
            node->parents.clear();
            if (node != start) node->grad = Tensor<T>();
        }
    }
}

namespace ag {

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    require_same_shape(a, b, "add");
    Tensor<T> out = a.value();
    const auto& bv = b.value();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] += bv[i];
    return make_result<T>(std::move(out), {a.shared(), b.shared()}, [](Node<T>& self) {
        for (auto& p : self.parents)
            if (wants(p)) {
                auto& g = p->grad_buffer();
                for (int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
            }
    });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    require_same_shape(a, b, "sub");
    Tensor<T> out = a.value();
    const auto& bv = b.value();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] -= bv[i];
    return make_result<T>(std::move(out), {a.shared(), b.shared()}, [](Node<T>& self) {
        if (wants(self.parents[0])) {
            auto& g = self.parents[0]->grad_buffer();
            for (int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
        }
        if (wants(self.parents[1])) {
            auto& g = self.parents[1]->grad_buffer();
            for (int64_t i = 0; i < g.numel(); ++i) g[i] -= self.grad[i];
        }
    });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    require_same_shape(a, b, "mul");
    Tensor<T> out = a.value();
    const auto& bv = b.value();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] *= bv[i];
    return make_result<T>(std::move(out), {a.shared(), b.shared()}, [](Node<T>& self) {
        const auto& av = self.parents[0]->value;
        const auto& bv = self.parents[1]->value;
        if (wants(self.parents[0])) {
            auto& g = self.parents[0]->grad_buffer();
            for (int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * bv[i];
        }
        if (wants(self.parents[1])) {
            auto& g = self.parents[1]->grad_buffer();
            for (int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * av[i];
        }
    });
}

template <typename T>
Var<T> div(const Var<T>& a, const Var<T>& b) {
    require_same_shape(a, b, "div");
    Tensor<T> out = a.value();
    const auto& bv = b.value();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] /= bv[i];
    return make_result<T>(std::move(out), {a.shared(), b.shared()}, [](Node<T>& self) {
        const auto& av = self.parents[0]->value;
        const auto& bv = self.parents[1]->value;
        if (wants(self.parents[0])) {
            auto& g = self.parents[0]->grad_buffer();
            for (int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] / bv[i];
        }
        if (wants(self.parents[1])) {
            auto& g = self.parents[1]->grad_buffer();
            for (int64_t i = 0; i < g.numel(); ++i) g[i] -= self.grad[i] * av[i] / (bv[i] * bv[i]);
        }
    });
}

template <typename T>
Var<T> maximum(const Var<T>& a, const Var<T>& b) {
    require_same_shape(a, b, "maximum");
    const auto& av = a.value();
    const auto& bv = b.value();
    Tensor<T> out(av.shape);
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::max(av[i], bv[i]);
    return make_result<T>(std::move(out), {a.shared(), b.shared()}, [](Node<T>& self) {
        const auto& av = self.parents[0]->value;
        const auto& bv = self.parents[1]->value;
        bool ga = wants(self.parents[0]), gb = wants(self.parents[1]);
        for (int64_t i = 0; i < self.grad.numel(); ++i) {
            if (av[i] >= bv[i]) {
                if (ga) self.parents[0]->grad_buffer()[i] += self.grad[i];
            } else if (gb) {
                self.parents[1]->grad_buffer()[i] += self.grad[i];
            }
        }
    });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
    Tensor<T> out = a.value();
    for (auto& v : out.data) v *= s;
    return make_result<T>(std::move(out), {a.shared()}, [s](Node<T>& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * s;
    });
}

template <typename T>
Var<T> add_scalar(const Var<T>& a, T s) {
    Tensor<T> out = a.value();
    for (auto& v : out.data) v += s;
    return make_result<T>(std::move(out), {a.shared()}, [](Node<T>& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
    });
}

template <typename T>
Var<T> mul_const(const Var<T>& a, const Tensor<T>& c) {
    require(a.shape() == c.shape, "mul_const: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(c.shape));
    Tensor<T> out = a.value();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] *= c[i];
    return make_result<T>(std::move(out), {a.shared()}, [c](Node<T>& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * c[i];
    });
}

template <typename T>
Var<T> mul_scalar_var(const Var<T>& x, const Var<T>& s) {
    require(s.numel() == 1, "mul_scalar_var: scale must have one element");
    const T sv = s.value()[0];
    Tensor<T> out = x.value();
    for (auto& v : out.data) v *= sv;
    return make_result<T>(std::move(out), {x.shared(), s.shared()}, [](Node<T>& self) {
        const auto& xv = self.parents[0]->value;
        const T sv = self.parents[1]->value[0];
        if (wants(self.parents[0])) {
            auto& g = self.parents[0]->grad_buffer();
            for (int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * sv;
        }
        if (wants(self.parents[1])) {
            T acc = 0;
            for (int64_t i = 0; i < xv.numel(); ++i) acc += self.grad[i] * xv[i];
            self.parents[1]->grad_buffer()[0] += acc;
        }
    });
}

template <typename T>
Var<T> square(const Var<T>& a) {
    Tensor<T> out = a.value();
    for (auto& v : out.data) v *= v;
    return make_result<T>(std::move(out), {a.shared()}, [](Node<T>& self) {
        const auto& av = self.parents[0]->value;
        auto& g = self.parents[0]->grad_buffer();
        for (int64_t i = 0; i < g.numel(); ++i) g[i] += T(2) * av[i] * self.grad[i];
    });
}

template <typename T>
Var<T> log(const Var<T>& a) {
    Tensor<T> out = a.value();
    for (auto& v : out.data) v = std::log(v);
    return make_result<T>(std::move(out), {a.shared()}, [](Node<T>& self) {
        const auto& av = self.parents[0]->value;
        auto& g = self.parents[0]->grad_buffer();
        for (int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] / av[i];
    });
}

template <typename T>
Var<T> clamp(const Var<T>& a, T lo, T hi) {
    Tensor<T> out = a.value();
    for (auto& v : out.data) v = std::clamp(v, lo, hi);
    return make_result<T>(std::move(out), {a.shared()}, [lo, hi](Node<T>& self) {
        const auto& av = self.parents[0]->value;
        auto& g = self.parents[0]->grad_buffer();
        for (int64_t i = 0; i < g.numel(); ++i)
            if (av[i] >= lo && av[i] <= hi) g[i] += self.grad[i];
    });
}

template <typename T>
Var<T> silu(const Var<T>& a) {
    Tensor<T> out = a.value();
    for (auto& v : out.data) v = v / (T(1) + std::exp(-v));
    return make_result<T>(std::move(out), {a.shared()}, [](Node<T>& self) {
        const auto& av = self.parents[0]->value;
        auto& g = self.parents[0]->grad_buffer();
        for (int64_t i = 0; i < g.numel(); ++i) {
            T s = T(1) / (T(1) + std::exp(-av[i]));
            g[i] += self.grad[i] * s * (T(1) + av[i] * (T(1) - s));
        }
    });
}

template <typename T>
Var<T> gelu(const Var<T>& a) {
    constexpr T c = T(0.7978845608028654);  // sqrt(2 / pi)
    constexpr T k = T(0.044715);
    Tensor<T> out = a.value();
    for (auto& v : out.data) v = T(0.5) * v * (T(1) + std::tanh(c * (v + k * v * v * v)));
    return make_result<T>(std::move(out), {a.shared()}, [](Node<T>& self) {
        const auto& av = self.parents[0]->value;
        auto& g = self.parents[0]->grad_buffer();
        for (int64_t i = 0; i < g.numel(); ++i) {
            T x = av[i];
            T th = std::tanh(c * (x + k * x * x * x));
            T d = T(0.5) * (T(1) + th) + T(0.5) * x * (T(1) - th * th) * c * (T(1) + T(3) * k * x * x);
            g[i] += self.grad[i] * d;
        }
    });
}

template <typename T>
Var<T> sum(const Var<T>& a) {
    T acc = 0;
    for (T v : a.value().data) acc += v;
    return make_result<T>(Tensor<T>({1}, {acc}), {a.shared()}, [](Node<T>& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (auto& v : g.data) v += self.grad[0];
    });
}

template <typename T>
Var<T> mean(const Var<T>& a) {
    require(a.numel() > 0, "mean of empty tensor");
    return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

template <typename T>
Var<T> mse(const Var<T>& a, const Var<T>& b) {
    require_same_shape(a, b, "mse");
    const auto& av = a.value();
    const auto& bv = b.value();
    T acc = 0;
    for (int64_t i = 0; i < av.numel(); ++i) {
        T d = av[i] - bv[i];
        acc += d * d;
    }
    const T n = static_cast<T>(av.numel());
    return make_result<T>(Tensor<T>({1}, {acc / n}), {a.shared(), b.shared()}, [n](Node<T>& self) {
        const auto& av = self.parents[0]->value;
        const auto& bv = self.parents[1]->value;
        const T g0 = self.grad[0] * T(2) / n;
        if (wants(self.parents[0])) {
            auto& g = self.parents[0]->grad_buffer();
            for (int64_t i = 0; i < g.numel(); ++i) g[i] += g0 * (av[i] - bv[i]);
        }
        if (wants(self.parents[1])) {
            auto& g = self.parents[1]->grad_buffer();
            for (int64_t i = 0; i < g.numel(); ++i) g[i] -= g0 * (av[i] - bv[i]);
        }
    });
}

template <typename T>
Var<T> reshape(const Var<T>& a, Shape shape) {
    Tensor<T> out = a.value().reshaped(std::move(shape));
    return make_result<T>(std::move(out), {a.shared()}, [](Node<T>& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
    });
}

template <typename T>
Var<T> concat0(std::span<const Var<T>> parts) {
    require(!parts.empty(), "concat0: no inputs");
    Shape shape = parts[0].shape();
    int64_t lead = 0;
    std::vector<NodePtr<T>> parents;
    for (const auto& p : parts) {
        require(p.value().rank() == static_cast<int>(shape.size()) &&
                    std::equal(shape.begin() + 1, shape.end(), p.shape().begin() + 1),
                "concat0: trailing shape mismatch " + shape_str(shape) + " vs " + shape_str(p.shape()));
        lead += p.dim(0);
        parents.push_back(p.shared());
    }
    shape[0] = lead;
    Tensor<T> out(shape);
    int64_t offset = 0;
    for (const auto& p : parts) {
        std::copy(p.value().data.begin(), p.value().data.end(), out.data.begin() + offset);
        offset += p.numel();
    }
    return make_result<T>(std::move(out), std::move(parents), [](Node<T>& self) {
        int64_t offset = 0;
        for (auto& p : self.parents) {
            const int64_t n = p->value.numel();
            if (wants(p)) {
                auto& g = p->grad_buffer();
                for (int64_t i = 0; i < n; ++i) g[i] += self.grad[offset + i];
            }
            offset += n;
        }
    });
}

template <typename T>
Var<T> slice0(const Var<T>& a, int64_t start, int64_t length) {
    require(a.value().rank() >= 1 && start >= 0 && length >= 0 && start + length <= a.dim(0),
            "slice0: range out of bounds for shape " + shape_str(a.shape()));
    Shape shape = a.shape();
    shape[0] = length;
    const int64_t row = a.numel() / std::max<int64_t>(a.dim(0), 1);
    Tensor<T> out(shape);
    std::copy_n(a.value().data.begin() + start * row, length * row, out.data.begin());
    return make_result<T>(std::move(out), {a.shared()}, [start, row](Node<T>& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (int64_t i = 0; i < self.grad.numel(); ++i) g[start * row + i] += self.grad[i];
    });
}

template <typename T>
Var<T> concat_last(const Var<T>& a, const Var<T>& b) {
    const int64_t ca = a.dim(-1), cb = b.dim(-1);
    const int64_t rows = a.numel() / ca;
    require(a.value().rank() == b.value().rank() && rows == b.numel() / cb,
            "concat_last: leading shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Shape shape = a.shape();
    shape.back() = ca + cb;
    Tensor<T> out(shape);
    for (int64_t r = 0; r < rows; ++r) {
        std::copy_n(a.value().ptr() + r * ca, ca, out.ptr() + r * (ca + cb));
        std::copy_n(b.value().ptr() + r * cb, cb, out.ptr() + r * (ca + cb) + ca);
    }
    return make_result<T>(std::move(out), {a.shared(), b.shared()}, [rows, ca, cb](Node<T>& self) {
        if (wants(self.parents[0])) {
            auto& g = self.parents[0]->grad_buffer();
            for (int64_t r = 0; r < rows; ++r)
                for (int64_t c = 0; c < ca; ++c) g[r * ca + c] += self.grad[r * (ca + cb) + c];
        }
        if (wants(self.parents[1])) {
            auto& g = self.parents[1]->grad_buffer();
            for (int64_t r = 0; r < rows; ++r)
                for (int64_t c = 0; c < cb; ++c) g[r * cb + c] += self.grad[r * (ca + cb) + ca + c];
        }
    });
}

template <typename T>
Var<T> add_bias(const Var<T>& x, const Var<T>& b) {
    const int64_t c = b.numel();
    require(x.dim(-1) == c, "add_bias: channel mismatch " + shape_str(x.shape()) + " + " + shape_str(b.shape()));
    Tensor<T> out = x.value();
    const auto& bv = b.value();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] += bv[i % c];
    return make_result<T>(std::move(out), {x.shared(), b.shared()}, [c](Node<T>& self) {
        if (wants(self.parents[0])) {
            auto& g = self.parents[0]->grad_buffer();
            for (int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
        }
        if (wants(self.parents[1])) {
            auto& g = self.parents[1]->grad_buffer();
            for (int64_t i = 0; i < self.grad.numel(); ++i) g[i % c] += self.grad[i];
        }
    });
}

template <typename T>
Var<T> add_rows(const Var<T>& x, const Var<T>& e) {
    require(x.value().rank() == 3 && e.value().rank() == 2 && x.dim(0) == e.dim(0) && x.dim(2) == e.dim(1),
            "add_rows: expected x[B,S,C] and e[B,C], got " + shape_str(x.shape()) + " and " + shape_str(e.shape()));
    const int64_t batch = x.dim(0), s = x.dim(1), c = x.dim(2);
    Tensor<T> out = x.value();
    const auto& ev = e.value();
    for (int64_t b = 0; b < batch; ++b)
        for (int64_t i = 0; i < s; ++i)
            for (int64_t k = 0; k < c; ++k) out[(b * s + i) * c + k] += ev[b * c + k];
    return make_result<T>(std::move(out), {x.shared(), e.shared()}, [batch, s, c](Node<T>& self) {
        if (wants(self.parents[0])) {
            auto& g = self.parents[0]->grad_buffer();
            for (int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
        }
        if (wants(self.parents[1])) {
            auto& g = self.parents[1]->grad_buffer();
            for (int64_t b = 0; b < batch; ++b)
                for (int64_t i = 0; i < s; ++i)
                    for (int64_t k = 0; k < c; ++k) g[b * c + k] += self.grad[(b * s + i) * c + k];
        }
    });
}

template <typename T>
Var<T> add_leading(const Var<T>& x, const Var<T>& p) {
    const int64_t inner = p.numel();
    require(inner > 0 && x.numel() % inner == 0 &&
                std::equal(p.shape().begin(), p.shape().end(), x.shape().end() - p.value().rank()),
            "add_leading: shape mismatch " + shape_str(x.shape()) + " + " + shape_str(p.shape()));
    Tensor<T> out = x.value();
    const auto& pv = p.value();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] += pv[i % inner];
    return make_result<T>(std::move(out), {x.shared(), p.shared()}, [inner](Node<T>& self) {
        if (wants(self.parents[0])) {
            auto& g = self.parents[0]->grad_buffer();
            for (int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
        }
        if (wants(self.parents[1])) {
            auto& g = self.parents[1]->grad_buffer();
            for (int64_t i = 0; i < self.grad.numel(); ++i) g[i % inner] += self.grad[i];
        }
    });
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>* b) {
    require(w.value().rank() == 2 && x.dim(-1) == w.dim(0),
            "linear: input " + shape_str(x.shape()) + " incompatible with weight " + shape_str(w.shape()));
    const int64_t k = w.dim(0), n = w.dim(1), rows = x.numel() / k;
    Shape shape = x.shape();
    shape.back() = n;
    Tensor<T> out(shape);
    gemm(x.value().ptr(), false, w.value().ptr(), false, out.ptr(), rows, n, k, false);
    std::vector<NodePtr<T>> parents{x.shared(), w.shared()};
    if (b) {
        require(b->numel() == n, "linear: bias size mismatch");
        const auto& bv = b->value();
        for (int64_t r = 0; r < rows; ++r)
            for (int64_t j = 0; j < n; ++j) out[r * n + j] += bv[j];
        parents.push_back(b->shared());
    }
    return make_result<T>(std::move(out), std::move(parents), [rows, n, k](Node<T>& self) {
        auto& xn = self.parents[0];
        auto& wn = self.parents[1];
        if (wants(xn)) gemm(self.grad.ptr(), false, wn->value.ptr(), true, xn->grad_buffer().ptr(), rows, k, n, true);
        if (wants(wn)) gemm(xn->value.ptr(), true, self.grad.ptr(), false, wn->grad_buffer().ptr(), k, n, rows, true);
        if (self.parents.size() > 2 && wants(self.parents[2])) {
            auto& g = self.parents[2]->grad_buffer();
            for (int64_t r = 0; r < rows; ++r)
                for (int64_t j = 0; j < n; ++j) g[j] += self.grad[r * n + j];
        }
    });
}

template <typename T>
Var<T> bmm(const Var<T>& a, const Var<T>& b) {
    require(a.value().rank() == 3 && b.value().rank() == 3 && a.dim(0) == b.dim(0) && a.dim(2) == b.dim(1),
            "bmm: shape mismatch " + shape_str(a.shape()) + " @ " + shape_str(b.shape()));
    const int64_t g = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
    Tensor<T> out({g, m, n});
    for (int64_t i = 0; i < g; ++i)
        gemm(a.value().ptr() + i * m * k, false, b.value().ptr() + i * k * n, false, out.ptr() + i * m * n, m, n, k,
             false);
    return make_result<T>(std::move(out), {a.shared(), b.shared()}, [g, m, k, n](Node<T>& self) {
        auto& an = self.parents[0];
        auto& bn = self.parents[1];
        for (int64_t i = 0; i < g; ++i) {
            const T* gy = self.grad.ptr() + i * m * n;
            if (wants(an))
                gemm(gy, false, bn->value.ptr() + i * k * n, true, an->grad_buffer().ptr() + i * m * k, m, k, n, true);
            if (wants(bn))
                gemm(an->value.ptr() + i * m * k, true, gy, false, bn->grad_buffer().ptr() + i * k * n, k, n, m, true);
        }
    });
}

template <typename T>
Var<T> bmm_nt(const Var<T>& a, const Var<T>& b) {
    require(a.value().rank() == 3 && b.value().rank() == 3 && a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2),
            "bmm_nt: shape mismatch " + shape_str(a.shape()) + " @ " + shape_str(b.shape()) + "^T");
    const int64_t g = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(1);
    Tensor<T> out({g, m, n});
    for (int64_t i = 0; i < g; ++i)
        gemm(a.value().ptr() + i * m * k, false, b.value().ptr() + i * n * k, true, out.ptr() + i * m * n, m, n, k,
             false);
    return make_result<T>(std::move(out), {a.shared(), b.shared()}, [g, m, k, n](Node<T>& self) {
        auto& an = self.parents[0];
        auto& bn = self.parents[1];
        for (int64_t i = 0; i < g; ++i) {
            const T* gy = self.grad.ptr() + i * m * n;
            if (wants(an))
                gemm(gy, false, bn->value.ptr() + i * n * k, false, an->grad_buffer().ptr() + i * m * k, m, k, n, true);
            if (wants(bn))
                gemm(gy, true, an->value.ptr() + i * m * k, false, bn->grad_buffer().ptr() + i * n * k, n, k, m, true);
        }
    });
}

template <typename T>
Var<T> softmax_last(const Var<T>& x) {
    const int64_t n = x.dim(-1), rows = x.numel() / n;
    Tensor<T> out = x.value();
    for (int64_t r = 0; r < rows; ++r) {
        T* row = out.ptr() + r * n;
        T mx = *std::max_element(row, row + n);
        T total = 0;
        for (int64_t j = 0; j < n; ++j) {
            row[j] = std::exp(row[j] - mx);
            total += row[j];
        }
        for (int64_t j = 0; j < n; ++j) row[j] /= total;
    }
    return make_result<T>(std::move(out), {x.shared()}, [rows, n](Node<T>& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (int64_t r = 0; r < rows; ++r) {
            const T* y = self.value.ptr() + r * n;
            const T* gy = self.grad.ptr() + r * n;
            T dot = 0;
            for (int64_t j = 0; j < n; ++j) dot += y[j] * gy[j];
            for (int64_t j = 0; j < n; ++j) g[r * n + j] += y[j] * (gy[j] - dot);
        }
    });
}

template <typename T>
Var<T> split_heads(const Var<T>& x, int heads) {
    require(x.value().rank() == 3 && x.dim(2) % heads == 0, "split_heads: bad shape " + shape_str(x.shape()));
    const int64_t b = x.dim(0), s = x.dim(1), c = x.dim(2), d = c / heads;
    Tensor<T> out({b * heads, s, d});
    const auto& xv = x.value();
    for (int64_t bi = 0; bi < b; ++bi)
        for (int64_t h = 0; h < heads; ++h)
            for (int64_t i = 0; i < s; ++i)
                std::copy_n(xv.ptr() + (bi * s + i) * c + h * d, d, out.ptr() + ((bi * heads + h) * s + i) * d);
    return make_result<T>(std::move(out), {x.shared()}, [b, s, c, d, heads](Node<T>& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (int64_t bi = 0; bi < b; ++bi)
            for (int64_t h = 0; h < heads; ++h)
                for (int64_t i = 0; i < s; ++i) {
                    const T* src = self.grad.ptr() + ((bi * heads + h) * s + i) * d;
                    T* dst = g.ptr() + (bi * s + i) * c + h * d;
                    for (int64_t j = 0; j < d; ++j) dst[j] += src[j];
                }
    });
}

template <typename T>
Var<T> merge_heads(const Var<T>& x, int heads) {
    require(x.value().rank() == 3 && x.dim(0) % heads == 0, "merge_heads: bad shape " + shape_str(x.shape()));
    const int64_t b = x.dim(0) / heads, s = x.dim(1), d = x.dim(2), c = d * heads;
    Tensor<T> out({b, s, c});
    const auto& xv = x.value();
    for (int64_t bi = 0; bi < b; ++bi)
        for (int64_t h = 0; h < heads; ++h)
            for (int64_t i = 0; i < s; ++i)
                std::copy_n(xv.ptr() + ((bi * heads + h) * s + i) * d, d, out.ptr() + (bi * s + i) * c + h * d);
    return make_result<T>(std::move(out), {x.shared()}, [b, s, c, d, heads](Node<T>& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (int64_t bi = 0; bi < b; ++bi)
            for (int64_t h = 0; h < heads; ++h)
                for (int64_t i = 0; i < s; ++i) {
                    const T* src = self.grad.ptr() + (bi * s + i) * c + h * d;
                    T* dst = g.ptr() + ((bi * heads + h) * s + i) * d;
                    for (int64_t j = 0; j < d; ++j) dst[j] += src[j];
                }
    });
}

namespace {

struct ConvGeometry {
    int64_t batch, h, w, cin, kh, kw, cout, oh, ow;
    int stride, pad;
    int64_t patch() const { return kh * kw * cin; }
    int64_t rows() const { return batch * oh * ow; }
};

template <typename T>
void im2col(const T* x, const ConvGeometry& g, T* cols) {
    for (int64_t b = 0; b < g.batch; ++b)
        for (int64_t oy = 0; oy < g.oh; ++oy)
            for (int64_t ox = 0; ox < g.ow; ++ox) {
                T* row = cols + ((b * g.oh + oy) * g.ow + ox) * g.patch();
                for (int64_t ky = 0; ky < g.kh; ++ky) {
                    const int64_t iy = oy * g.stride - g.pad + ky;
                    for (int64_t kx = 0; kx < g.kw; ++kx) {
                        const int64_t ix = ox * g.stride - g.pad + kx;
                        T* dst = row + (ky * g.kw + kx) * g.cin;
                        if (iy < 0 || iy >= g.h || ix < 0 || ix >= g.w)
                            std::fill_n(dst, g.cin, T(0));
                        else
                            std::copy_n(x + ((b * g.h + iy) * g.w + ix) * g.cin, g.cin, dst);
                    }
                }
            }
}

template <typename T>
void col2im_add(const T* cols, const ConvGeometry& g, T* dx) {
    for (int64_t b = 0; b < g.batch; ++b)
        for (int64_t oy = 0; oy < g.oh; ++oy)
            for (int64_t ox = 0; ox < g.ow; ++ox) {
                const T* row = cols + ((b * g.oh + oy) * g.ow + ox) * g.patch();
                for (int64_t ky = 0; ky < g.kh; ++ky) {
                    const int64_t iy = oy * g.stride - g.pad + ky;
                    if (iy < 0 || iy >= g.h) continue;
                    for (int64_t kx = 0; kx < g.kw; ++kx) {
                        const int64_t ix = ox * g.stride - g.pad + kx;
                        if (ix < 0 || ix >= g.w) continue;
                        const T* src = row + (ky * g.kw + kx) * g.cin;
                        T* dst = dx + ((b * g.h + iy) * g.w + ix) * g.cin;
                        for (int64_t c = 0; c < g.cin; ++c) dst[c] += src[c];
                    }
                }
            }
}

}  // namespace

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>* b, int stride, int padding) {
    require(x.value().rank() == 4 && w.value().rank() == 4 && x.dim(3) == w.dim(2),
            "conv2d: input " + shape_str(x.shape()) + " incompatible with kernel " + shape_str(w.shape()));
    ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(0), w.dim(1), w.dim(3), 0, 0, stride, padding};
    g.oh = (g.h + 2 * padding - g.kh) / stride + 1;
    g.ow = (g.w + 2 * padding - g.kw) / stride + 1;
    require(g.oh > 0 && g.ow > 0, "conv2d: empty output");
    auto cols = std::make_shared<std::vector<T>>(static_cast<size_t>(g.rows() * g.patch()));
    im2col(x.value().ptr(), g, cols->data());
    Tensor<T> out({g.batch, g.oh, g.ow, g.cout});
    gemm(cols->data(), false, w.value().ptr(), false, out.ptr(), g.rows(), g.cout, g.patch(), false);
    std::vector<NodePtr<T>> parents{x.shared(), w.shared()};
    if (b) {
        const auto& bv = b->value();
        for (int64_t r = 0; r < g.rows(); ++r)
            for (int64_t c = 0; c < g.cout; ++c) out[r * g.cout + c] += bv[c];
        parents.push_back(b->shared());
    }
    const bool keep_cols = grad_enabled() && w.requires_grad();
    if (!keep_cols) cols.reset();
    return make_result<T>(std::move(out), std::move(parents), [g, cols](Node<T>& self) {
        auto& xn = self.parents[0];
        auto& wn = self.parents[1];
        if (wants(wn))
            gemm(cols->data(), true, self.grad.ptr(), false, wn->grad_buffer().ptr(), g.patch(), g.cout, g.rows(),
                 true);
        if (wants(xn)) {
            std::vector<T> dcols(static_cast<size_t>(g.rows() * g.patch()));
            gemm(self.grad.ptr(), false, wn->value.ptr(), true, dcols.data(), g.rows(), g.patch(), g.cout, false);
            col2im_add(dcols.data(), g, xn->grad_buffer().ptr());
        }
        if (self.parents.size() > 2 && wants(self.parents[2])) {
            auto& gb = self.parents[2]->grad_buffer();
            for (int64_t r = 0; r < g.rows(); ++r)
                for (int64_t c = 0; c < g.cout; ++c) gb[c] += self.grad[r * g.cout + c];
        }
    });
}

template <typename T>
Var<T> group_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, int groups, T eps) {
    require(x.value().rank() == 3 && x.dim(2) % groups == 0 && gamma.numel() == x.dim(2) && beta.numel() == x.dim(2),
            "group_norm: bad shapes " + shape_str(x.shape()));
    const int64_t batch = x.dim(0), s = x.dim(1), c = x.dim(2), cg = c / groups;
    const T count = static_cast<T>(s * cg);
    Tensor<T> xhat(x.shape());
    std::vector<T> rstd(static_cast<size_t>(batch * groups));
    const auto& xv = x.value();
    for (int64_t b = 0; b < batch; ++b)
        for (int64_t gi = 0; gi < groups; ++gi) {
            T mu = 0, var = 0;
            for (int64_t i = 0; i < s; ++i)
                for (int64_t k = 0; k < cg; ++k) mu += xv[(b * s + i) * c + gi * cg + k];
            mu /= count;
            for (int64_t i = 0; i < s; ++i)
                for (int64_t k = 0; k < cg; ++k) {
                    T d = xv[(b * s + i) * c + gi * cg + k] - mu;
                    var += d * d;
                }
            var /= count;
            const T r = T(1) / std::sqrt(var + eps);
            rstd[b * groups + gi] = r;
            for (int64_t i = 0; i < s; ++i)
                for (int64_t k = 0; k < cg; ++k) {
                    const int64_t idx = (b * s + i) * c + gi * cg + k;
                    xhat[idx] = (xv[idx] - mu) * r;
                }
        }
    Tensor<T> out(x.shape());
    const auto& gv = gamma.value();
    const auto& bv = beta.value();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = xhat[i] * gv[i % c] + bv[i % c];
    return make_result<T>(
        std::move(out), {x.shared(), gamma.shared(), beta.shared()},
        [xhat = std::move(xhat), rstd = std::move(rstd), batch, s, c, cg, groups, count](Node<T>& self) {
            const auto& gv = self.parents[1]->value;
            if (wants(self.parents[1])) {
                auto& gg = self.parents[1]->grad_buffer();
                for (int64_t i = 0; i < self.grad.numel(); ++i) gg[i % c] += self.grad[i] * xhat[i];
            }
            if (wants(self.parents[2])) {
                auto& gb = self.parents[2]->grad_buffer();
                for (int64_t i = 0; i < self.grad.numel(); ++i) gb[i % c] += self.grad[i];
            }
            if (!wants(self.parents[0])) return;
            auto& gx = self.parents[0]->grad_buffer();
            for (int64_t b = 0; b < batch; ++b)
                for (int64_t gi = 0; gi < groups; ++gi) {
                    T m1 = 0, m2 = 0;
                    for (int64_t i = 0; i < s; ++i)
                        for (int64_t k = 0; k < cg; ++k) {
                            const int64_t idx = (b * s + i) * c + gi * cg + k;
                            const T dxh = self.grad[idx] * gv[gi * cg + k];
                            m1 += dxh;
                            m2 += dxh * xhat[idx];
                        }
                    m1 /= count;
                    m2 /= count;
                    const T r = rstd[b * groups + gi];
                    for (int64_t i = 0; i < s; ++i)
                        for (int64_t k = 0; k < cg; ++k) {
                            const int64_t idx = (b * s + i) * c + gi * cg + k;
                            const T dxh = self.grad[idx] * gv[gi * cg + k];
                            gx[idx] += r * (dxh - m1 - xhat[idx] * m2);
                        }
                }
        });
}

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps) {
    const int64_t c = x.dim(-1), rows = x.numel() / c;
    require(gamma.numel() == c && beta.numel() == c, "layer_norm: parameter size mismatch");
    Tensor<T> xhat(x.shape());
    std::vector<T> rstd(static_cast<size_t>(rows));
    const auto& xv = x.value();
    for (int64_t r = 0; r < rows; ++r) {
        const T* row = xv.ptr() + r * c;
        T mu = 0, var = 0;
        for (int64_t k = 0; k < c; ++k) mu += row[k];
        mu /= static_cast<T>(c);
        for (int64_t k = 0; k < c; ++k) var += (row[k] - mu) * (row[k] - mu);
        var /= static_cast<T>(c);
        rstd[r] = T(1) / std::sqrt(var + eps);
        for (int64_t k = 0; k < c; ++k) xhat[r * c + k] = (row[k] - mu) * rstd[r];
    }
    Tensor<T> out(x.shape());
    const auto& gv = gamma.value();
    const auto& bv = beta.value();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = xhat[i] * gv[i % c] + bv[i % c];
    return make_result<T>(std::move(out), {x.shared(), gamma.shared(), beta.shared()},
                          [xhat = std::move(xhat), rstd = std::move(rstd), rows, c](Node<T>& self) {
                              const auto& gv = self.parents[1]->value;
                              if (wants(self.parents[1])) {
                                  auto& gg = self.parents[1]->grad_buffer();
                                  for (int64_t i = 0; i < self.grad.numel(); ++i) gg[i % c] += self.grad[i] * xhat[i];
                              }
                              if (wants(self.parents[2])) {
                                  auto& gb = self.parents[2]->grad_buffer();
                                  for (int64_t i = 0; i < self.grad.numel(); ++i) gb[i % c] += self.grad[i];
                              }
                              if (!wants(self.parents[0])) return;
                              auto& gx = self.parents[0]->grad_buffer();
                              for (int64_t r = 0; r < rows; ++r) {
                                  T m1 = 0, m2 = 0;
                                  for (int64_t k = 0; k < c; ++k) {
                                      const T dxh = self.grad[r * c + k] * gv[k];
                                      m1 += dxh;
                                      m2 += dxh * xhat[r * c + k];
                                  }
                                  m1 /= static_cast<T>(c);
                                  m2 /= static_cast<T>(c);
                                  for (int64_t k = 0; k < c; ++k) {
                                      const T dxh = self.grad[r * c + k] * gv[k];
                                      gx[r * c + k] += rstd[r] * (dxh - m1 - xhat[r * c + k] * m2);
                                  }
                              }
                          });
}

template <typename T>
Var<T> upsample_nearest2x(const Var<T>& x) {
    require(x.value().rank() == 4, "upsample_nearest2x: expected NHWC input");
    const int64_t b = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
    Tensor<T> out({b, 2 * h, 2 * w, c});
    const auto& xv = x.value();
    for (int64_t bi = 0; bi < b; ++bi)
        for (int64_t y = 0; y < 2 * h; ++y)
            for (int64_t xx = 0; xx < 2 * w; ++xx)
                std::copy_n(xv.ptr() + ((bi * h + y / 2) * w + xx / 2) * c, c, out.ptr() + ((bi * 2 * h + y) * 2 * w + xx) * c);
    return make_result<T>(std::move(out), {x.shared()}, [b, h, w, c](Node<T>& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (int64_t bi = 0; bi < b; ++bi)
            for (int64_t y = 0; y < 2 * h; ++y)
                for (int64_t xx = 0; xx < 2 * w; ++xx) {
                    const T* src = self.grad.ptr() + ((bi * 2 * h + y) * 2 * w + xx) * c;
                    T* dst = g.ptr() + ((bi * h + y / 2) * w + xx / 2) * c;
                    for (int64_t k = 0; k < c; ++k) dst[k] += src[k];
                }
    });
}

template <typename T>
Var<T> embedding(const Var<T>& table, std::span<const int> ids) {
    require(table.value().rank() == 2, "embedding: table must be 2-D");
    const int64_t v = table.dim(0), d = table.dim(1);
    std::vector<int> idx(ids.begin(), ids.end());
    Tensor<T> out({static_cast<int64_t>(idx.size()), d});
    for (size_t i = 0; i < idx.size(); ++i) {
        require(idx[i] >= 0 && idx[i] < v, "embedding: id out of range");
        std::copy_n(table.value().ptr() + idx[i] * d, d, out.ptr() + static_cast<int64_t>(i) * d);
    }
    return make_result<T>(std::move(out), {table.shared()}, [idx = std::move(idx), d](Node<T>& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (size_t i = 0; i < idx.size(); ++i)
            for (int64_t k = 0; k < d; ++k) g[idx[i] * d + k] += self.grad[static_cast<int64_t>(i) * d + k];
    });
}

template <typename T>
Var<T> l2_normalize_rows(const Var<T>& x, T eps) {
    const int64_t d = x.dim(-1), rows = x.numel() / d;
    Tensor<T> out = x.value();
    std::vector<T> norms(static_cast<size_t>(rows));
    for (int64_t r = 0; r < rows; ++r) {
        T ss = 0;
        for (int64_t k = 0; k < d; ++k) ss += out[r * d + k] * out[r * d + k];
        norms[r] = std::sqrt(ss + eps);
        for (int64_t k = 0; k < d; ++k) out[r * d + k] /= norms[r];
    }
    return make_result<T>(std::move(out), {x.shared()}, [norms = std::move(norms), rows, d](Node<T>& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (int64_t r = 0; r < rows; ++r) {
            const T* y = self.value.ptr() + r * d;
            const T* gy = self.grad.ptr() + r * d;
            T dot = 0;
            for (int64_t k = 0; k < d; ++k) dot += y[k] * gy[k];
            for (int64_t k = 0; k < d; ++k) g[r * d + k] += (gy[k] - y[k] * dot) / norms[r];
        }
    });
}

template <typename T>
Var<T> mean_last(const Var<T>& x) {
    const int64_t d = x.dim(-1), rows = x.numel() / d;
    Shape shape(x.shape().begin(), x.shape().end() - 1);
    if (shape.empty()) shape = {1};
    Tensor<T> out(shape);
    for (int64_t r = 0; r < rows; ++r) {
        T acc = 0;
        for (int64_t k = 0; k < d; ++k) acc += x.value()[r * d + k];
        out[r] = acc / static_cast<T>(d);
    }
    return make_result<T>(std::move(out), {x.shared()}, [rows, d](Node<T>& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (int64_t r = 0; r < rows; ++r)
            for (int64_t k = 0; k < d; ++k) g[r * d + k] += self.grad[r] / static_cast<T>(d);
    });
}

template <typename T>
Var<T> head_mean(const Var<T>& probs, int heads) {
    require(probs.value().rank() == 3 && probs.dim(0) % heads == 0, "head_mean: bad shape " + shape_str(probs.shape()));
    const int64_t b = probs.dim(0) / heads, inner = probs.dim(1) * probs.dim(2);
    Tensor<T> out({b, probs.dim(1), probs.dim(2)});
    const auto& pv = probs.value();
    const T inv = T(1) / static_cast<T>(heads);
    for (int64_t bi = 0; bi < b; ++bi)
        for (int h = 0; h < heads; ++h)
            for (int64_t i = 0; i < inner; ++i) out[bi * inner + i] += pv[(bi * heads + h) * inner + i] * inv;
    return make_result<T>(std::move(out), {probs.shared()}, [b, inner, heads, inv](Node<T>& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (int64_t bi = 0; bi < b; ++bi)
            for (int h = 0; h < heads; ++h)
                for (int64_t i = 0; i < inner; ++i) g[(bi * heads + h) * inner + i] += self.grad[bi * inner + i] * inv;
    });
}

template <typename T>
Var<T> column_span_mean(const Var<T>& x, int64_t b, int64_t start, int64_t end) {
    require(x.value().rank() == 3 && b >= 0 && b < x.dim(0), "column_span_mean: bad batch index");
    const int64_t s = x.dim(1), l = x.dim(2);
    require(start >= 0 && end >= start && end < l, "column_span_mean: span outside token axis");
    const T inv = T(1) / static_cast<T>(end - start + 1);
    Tensor<T> out({s});
    const auto& xv = x.value();
    for (int64_t i = 0; i < s; ++i) {
        T acc = 0;
        for (int64_t j = start; j <= end; ++j) acc += xv[(b * s + i) * l + j];
        out[i] = acc * inv;
    }
    return make_result<T>(std::move(out), {x.shared()}, [b, s, l, start, end, inv](Node<T>& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (int64_t i = 0; i < s; ++i)
            for (int64_t j = start; j <= end; ++j) g[(b * s + i) * l + j] += self.grad[i] * inv;
    });
}

namespace {

struct LerpTap {
    int64_t i0, i1;
    double w1;
};

std::vector<LerpTap> bilinear_taps(int64_t in, int64_t out) {
    std::vector<LerpTap> taps(static_cast<size_t>(out));
    const double ratio = static_cast<double>(in) / static_cast<double>(out);
    for (int64_t o = 0; o < out; ++o) {
        double src = (static_cast<double>(o) + 0.5) * ratio - 0.5;
        if (src < 0) src = 0;
        int64_t i0 = std::min<int64_t>(static_cast<int64_t>(src), in - 1);
        int64_t i1 = std::min<int64_t>(i0 + 1, in - 1);
        taps[o] = {i0, i1, src - static_cast<double>(i0)};
    }
    return taps;
}

}  // namespace

template <typename T>
Var<T> bilinear_resize(const Var<T>& x, int64_t out_h, int64_t out_w) {
    require(x.value().rank() == 3 && out_h > 0 && out_w > 0, "bilinear_resize: expected [M, H, W] input");
    const int64_t m = x.dim(0), h = x.dim(1), w = x.dim(2);
    auto ty = bilinear_taps(h, out_h);
    auto tx = bilinear_taps(w, out_w);
    Tensor<T> out({m, out_h, out_w});
    const auto& xv = x.value();
    for (int64_t k = 0; k < m; ++k)
        for (int64_t oy = 0; oy < out_h; ++oy)
            for (int64_t ox = 0; ox < out_w; ++ox) {
                const auto& a = ty[oy];
                const auto& b = tx[ox];
                const T* img = xv.ptr() + k * h * w;
                const T wy1 = static_cast<T>(a.w1), wy0 = T(1) - wy1;
                const T wx1 = static_cast<T>(b.w1), wx0 = T(1) - wx1;
                out[(k * out_h + oy) * out_w + ox] = wy0 * (wx0 * img[a.i0 * w + b.i0] + wx1 * img[a.i0 * w + b.i1]) +
                                                     wy1 * (wx0 * img[a.i1 * w + b.i0] + wx1 * img[a.i1 * w + b.i1]);
            }
    return make_result<T>(std::move(out), {x.shared()}, [m, h, w, out_h, out_w, ty, tx](Node<T>& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (int64_t k = 0; k < m; ++k)
            for (int64_t oy = 0; oy < out_h; ++oy)
                for (int64_t ox = 0; ox < out_w; ++ox) {
                    const auto& a = ty[oy];
                    const auto& b = tx[ox];
                    const T gy = self.grad[(k * out_h + oy) * out_w + ox];
                    T* img = g.ptr() + k * h * w;
                    const T wy1 = static_cast<T>(a.w1), wy0 = T(1) - wy1;
                    const T wx1 = static_cast<T>(b.w1), wx0 = T(1) - wx1;
                    img[a.i0 * w + b.i0] += gy * wy0 * wx0;
                    img[a.i0 * w + b.i1] += gy * wy0 * wx1;
                    img[a.i1 * w + b.i0] += gy * wy1 * wx0;
                    img[a.i1 * w + b.i1] += gy * wy1 * wx1;
                }
    });
}

template <typename T>
Var<T> max_normalize_rows(const Var<T>& x) {
    require(x.value().rank() == 2, "max_normalize_rows: expected [M, S]");
    const int64_t m = x.dim(0), s = x.dim(1);
    Tensor<T> out(x.shape());
    std::vector<int64_t> argmax(static_cast<size_t>(m), -1);
    const auto& xv = x.value();
    for (int64_t r = 0; r < m; ++r) {
        const T* row = xv.ptr() + r * s;
        const int64_t j = std::max_element(row, row + s) - row;
        if (row[j] <= T(0)) continue;
        argmax[r] = j;
        for (int64_t k = 0; k < s; ++k) out[r * s + k] = row[k] / row[j];
    }
    return make_result<T>(std::move(out), {x.shared()}, [argmax = std::move(argmax), m, s](Node<T>& self) {
        const auto& xv = self.parents[0]->value;
        auto& g = self.parents[0]->grad_buffer();
        for (int64_t r = 0; r < m; ++r) {
            const int64_t j = argmax[r];
            if (j < 0) continue;
            const T mx = xv[r * s + j];
            T dot = 0;
            for (int64_t k = 0; k < s; ++k) {
                g[r * s + k] += self.grad[r * s + k] / mx;
                dot += self.grad[r * s + k] * xv[r * s + k];
            }
            g[r * s + j] -= dot / (mx * mx);
        }
    });
}

template <typename T>
Var<T> max_over_rows(const Var<T>& x) {
    require(x.value().rank() == 2 && x.dim(0) > 0, "max_over_rows: expected non-empty [M, S]");
    const int64_t m = x.dim(0), s = x.dim(1);
    Tensor<T> out({s});
    std::vector<int64_t> arg(static_cast<size_t>(s), 0);
    const auto& xv = x.value();
    for (int64_t k = 0; k < s; ++k) {
        out[k] = xv[k];
        for (int64_t r = 1; r < m; ++r)
            if (xv[r * s + k] > out[k]) {
                out[k] = xv[r * s + k];
                arg[k] = r;
            }
    }
    return make_result<T>(std::move(out), {x.shared()}, [arg = std::move(arg), s](Node<T>& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (int64_t k = 0; k < s; ++k) g[arg[k] * s + k] += self.grad[k];
    });
}

template <typename T>
Var<T> add_cross_frame_key_bias(const Var<T>& logits, const Var<T>& log_mask, int heads, int64_t frame_len) {
    require(logits.value().rank() == 3 && log_mask.value().rank() == 2 && logits.dim(1) == logits.dim(2) &&
                logits.dim(0) == log_mask.dim(0) * heads && logits.dim(2) == log_mask.dim(1) &&
                logits.dim(1) % frame_len == 0,
            "add_cross_frame_key_bias: shape mismatch " + shape_str(logits.shape()) + " vs " +
                shape_str(log_mask.shape()));
    const int64_t b = log_mask.dim(0), s = log_mask.dim(1);
    Tensor<T> out = logits.value();
    const auto& mv = log_mask.value();
    for (int64_t bi = 0; bi < b; ++bi)
        for (int h = 0; h < heads; ++h)
            for (int64_t q = 0; q < s; ++q) {
                T* row = out.ptr() + ((bi * heads + h) * s + q) * s;
                const int64_t fq = q / frame_len;
                for (int64_t k = 0; k < s; ++k)
                    if (k / frame_len != fq) row[k] += mv[bi * s + k];
            }
    return make_result<T>(std::move(out), {logits.shared(), log_mask.shared()}, [b, s, heads, frame_len](Node<T>& self) {
        if (wants(self.parents[0])) {
            auto& g = self.parents[0]->grad_buffer();
            for (int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
        }
        if (wants(self.parents[1])) {
            auto& g = self.parents[1]->grad_buffer();
            for (int64_t bi = 0; bi < b; ++bi)
                for (int h = 0; h < heads; ++h)
                    for (int64_t q = 0; q < s; ++q) {
                        const T* row = self.grad.ptr() + ((bi * heads + h) * s + q) * s;
                        const int64_t fq = q / frame_len;
                        for (int64_t k = 0; k < s; ++k)
                            if (k / frame_len != fq) g[bi * s + k] += row[k];
                    }
        }
    });
}

}  // namespace ag

#define STORYNIZOR_INSTANTIATE_AUTOGRAD(T)                                                                        \
    template class Var<T>;                                                                                        \
    template void backward<T>(const Var<T>&);                                                                     \
    namespace ag {                                                                                                \
    template Var<T> add(const Var<T>&, const Var<T>&);                                                            \
    template Var<T> sub(const Var<T>&, const Var<T>&);                                                            \
    template Var<T> mul(const Var<T>&, const Var<T>&);                                                            \
    template Var<T> div(const Var<T>&, const Var<T>&);                                                            \
    template Var<T> maximum(const Var<T>&, const Var<T>&);                                                        \
    template Var<T> scale(const Var<T>&, T);                                                                      \
    template Var<T> add_scalar(const Var<T>&, T);                                                                 \
    template Var<T> mul_const(const Var<T>&, const Tensor<T>&);                                                   \
    template Var<T> mul_scalar_var(const Var<T>&, const Var<T>&);                                                 \
    template Var<T> square(const Var<T>&);                                                                        \
    template Var<T> log(const Var<T>&);                                                                           \
    template Var<T> clamp(const Var<T>&, T, T);                                                                   \
    template Var<T> silu(const Var<T>&);                                                                          \
    template Var<T> gelu(const Var<T>&);                                                                          \
    template Var<T> sum(const Var<T>&);                                                                           \
    template Var<T> mean(const Var<T>&);                                                                          \
    template Var<T> mse(const Var<T>&, const Var<T>&);                                                            \
    template Var<T> reshape(const Var<T>&, Shape);                                                                \
    template Var<T> concat0(std::span<const Var<T>>);                                                             \
    template Var<T> slice0(const Var<T>&, int64_t, int64_t);                                                      \
    template Var<T> concat_last(const Var<T>&, const Var<T>&);                                                    \
    template Var<T> add_bias(const Var<T>&, const Var<T>&);                                                       \
    template Var<T> add_rows(const Var<T>&, const Var<T>&);                                                       \
    template Var<T> add_leading(const Var<T>&, const Var<T>&);                                                    \
    template Var<T> linear(const Var<T>&, const Var<T>&, const Var<T>*);                                          \
    template Var<T> bmm(const Var<T>&, const Var<T>&);                                                            \
    template Var<T> bmm_nt(const Var<T>&, const Var<T>&);                                                         \
    template Var<T> softmax_last(const Var<T>&);                                                                  \
    template Var<T> split_heads(const Var<T>&, int);                                                              \
    template Var<T> merge_heads(const Var<T>&, int);                                                              \
    template Var<T> conv2d(const Var<T>&, const Var<T>&, const Var<T>*, int, int);                                \
    template Var<T> group_norm(const Var<T>&, const Var<T>&, const Var<T>&, int, T);                              \
    template Var<T> layer_norm(const Var<T>&, const Var<T>&, const Var<T>&, T);                                   \
    template Var<T> upsample_nearest2x(const Var<T>&);                                                            \
    template Var<T> embedding(const Var<T>&, std::span<const int>);                                               \
    template Var<T> l2_normalize_rows(const Var<T>&, T);                                                          \
    template Var<T> mean_last(const Var<T>&);                                                                     \
    template Var<T> head_mean(const Var<T>&, int);                                                                \
    template Var<T> column_span_mean(const Var<T>&, int64_t, int64_t, int64_t);                                  \
    template Var<T> bilinear_resize(const Var<T>&, int64_t, int64_t);                                             \
    template Var<T> max_normalize_rows(const Var<T>&);                                                            \
    template Var<T> max_over_rows(const Var<T>&);                                                                 \
    template Var<T> add_cross_frame_key_bias(const Var<T>&, const Var<T>&, int, int64_t);                         \
    }

STORYNIZOR_INSTANTIATE_AUTOGRAD(float)
STORYNIZOR_INSTANTIATE_AUTOGRAD(double)

}  // namespace storynizor
