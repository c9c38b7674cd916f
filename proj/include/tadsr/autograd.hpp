#pragma once

// Reverse-mode automatic differentiation over Tensor<S>.
//
// A Var is a handle to a graph node. Leaves either require gradients
// (trainable parameters, probe inputs) or are constants. An op only records
// its parents and a backward closure when gradient mode is on and at least
// one parent requires gradients; otherwise the result is a plain constant.
// Gradients accumulate into Node::grad and are never reset implicitly.

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "tadsr/tensor.hpp"

namespace tadsr {

template <class S>
struct Node {
    Tensor<S> value;
    Tensor<S> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    Tensor<S>& grad_buffer() {
        if (grad.shape() != value.shape()) grad = Tensor<S>(value.shape());
        return grad;
    }
    [[nodiscard]] bool has_grad() const noexcept { return grad.shape() == value.shape() && !grad.empty(); }
};

namespace detail {
inline thread_local bool grad_mode_enabled = true;
}

/// Disables graph recording for its lifetime.
class NoGradGuard {
public:
    NoGradGuard() noexcept : previous_(detail::grad_mode_enabled) { detail::grad_mode_enabled = false; }
    ~NoGradGuard() { detail::grad_mode_enabled = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

[[nodiscard]] inline bool grad_enabled() noexcept { return detail::grad_mode_enabled; }

template <class S>
class Var {
public:
    using NodePtr = std::shared_ptr<Node<S>>;

    Var() : node_(std::make_shared<Node<S>>()) {}
    /// Constant (no gradient).
    Var(Tensor<S> value) : node_(std::make_shared<Node<S>>()) {  // NOLINT(google-explicit-constructor)
        node_->value = std::move(value);
    }
    explicit Var(NodePtr node) : node_(std::move(node)) {}

    static Var leaf(Tensor<S> value, bool requires_grad) {
        Var v(std::move(value));
        v.node_->requires_grad = requires_grad;
        return v;
    }

    [[nodiscard]] const Tensor<S>& value() const noexcept { return node_->value; }
    [[nodiscard]] const Shape& shape() const noexcept { return node_->value.shape(); }
    [[nodiscard]] bool requires_grad() const noexcept { return node_->requires_grad; }
    [[nodiscard]] const Tensor<S>& grad() const noexcept { return node_->grad; }
    [[nodiscard]] bool has_grad() const noexcept { return node_->has_grad(); }
    [[nodiscard]] const NodePtr& node() const noexcept { return node_; }
    [[nodiscard]] S item() const { return node_->value.item(); }

    /// A constant copy of this value; gradients stop here.
    [[nodiscard]] Var detach() const { return Var(node_->value); }

private:
    NodePtr node_;
};

/// Builds an op result. `backward` receives the result node (whose grad is
/// populated) and must accumulate into every parent that requires grad.
template <class S>
Var<S> make_op(Tensor<S> value, std::vector<std::shared_ptr<Node<S>>> parents,
               std::function<void(Node<S>&)> backward) {
    bool track = false;
    if (grad_enabled()) {
        for (const auto& p : parents) track = track || p->requires_grad;
    }
    auto node = std::make_shared<Node<S>>();
    node->value = std::move(value);
    if (track) {
        node->requires_grad = true;
        node->parents = std::move(parents);
        node->backward_fn = std::move(backward);
    }
    return Var<S>(std::move(node));
}

/// Runs reverse accumulation from `root`, seeding with `seed` (ones if empty).
template <class S>
void backward(const Var<S>& root, const Tensor<S>& seed = {}) {
    if (!root.requires_grad()) return;
    std::vector<Node<S>*> order;
    std::unordered_set<Node<S>*> visited;
    // Iterative post-order DFS.
    std::vector<std::pair<Node<S>*, std::size_t>> stack;
    stack.emplace_back(root.node().get(), 0);
    visited.insert(root.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node<S>* p = node->parents[next++].get();
            if (p->requires_grad && !p->parents.empty() && visited.insert(p).second) {
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    auto& g = root.node()->grad_buffer();
    if (seed.empty()) {
        for (auto& v : g.span()) v += S(1);
    } else {
        g += seed;
    }
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<S>* n = *it;
        if (n->backward_fn && n->has_grad()) n->backward_fn(*n);
    }
}

// ---------------------------------------------------------------------------
// Elementwise ops

template <class S>
Var<S> add(const Var<S>& a, const Var<S>& b) {
    require_same_shape(a.shape(), b.shape(), "add");
    Tensor<S> out = a.value();
    out += b.value();
    auto pa = a.node(), pb = b.node();
    return make_op<S>(std::move(out), {pa, pb}, [pa, pb](Node<S>& self) {
        if (pa->requires_grad) pa->grad_buffer() += self.grad;
        if (pb->requires_grad) pb->grad_buffer() += self.grad;
    });
}

template <class S>
Var<S> sub(const Var<S>& a, const Var<S>& b) {
    require_same_shape(a.shape(), b.shape(), "sub");
    Tensor<S> out = a.value();
    out -= b.value();
    auto pa = a.node(), pb = b.node();
    return make_op<S>(std::move(out), {pa, pb}, [pa, pb](Node<S>& self) {
        if (pa->requires_grad) pa->grad_buffer() += self.grad;
        if (pb->requires_grad) pb->grad_buffer() -= self.grad;
    });
}

template <class S>
Var<S> mul(const Var<S>& a, const Var<S>& b) {
    require_same_shape(a.shape(), b.shape(), "mul");
    Tensor<S> out(a.shape());
    const auto& av = a.value();
    const auto& bv = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
    auto pa = a.node(), pb = b.node();
    return make_op<S>(std::move(out), {pa, pb}, [pa, pb](Node<S>& self) {
        if (pa->requires_grad) {
            auto& g = pa->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb->value[i];
        }
        if (pb->requires_grad) {
            auto& g = pb->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa->value[i];
        }
    });
}

template <class S>
Var<S> scale(const Var<S>& a, S s) {
    Tensor<S> out = a.value();
    out *= s;
    auto pa = a.node();
    return make_op<S>(std::move(out), {pa}, [pa, s](Node<S>& self) {
        auto& g = pa->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
    });
}

template <class S>
Var<S> add_scalar(const Var<S>& a, S s) {
    Tensor<S> out = a.value();
    for (auto& v : out.span()) v += s;
    auto pa = a.node();
    return make_op<S>(std::move(out), {pa}, [pa](Node<S>& self) { pa->grad_buffer() += self.grad; });
}

/// sum_i coeff_i * term_i over same-shaped terms.
template <class S>
Var<S> lincomb(const std::vector<std::pair<S, Var<S>>>& terms) {
    if (terms.empty()) throw std::invalid_argument("lincomb: no terms");
    const Shape shape = terms.front().second.shape();
    Tensor<S> out(shape);
    std::vector<std::shared_ptr<Node<S>>> parents;
    std::vector<S> coeffs;
    for (const auto& [c, v] : terms) {
        require_same_shape(shape, v.shape(), "lincomb");
        const auto& vv = v.value();
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += c * vv[i];
        parents.push_back(v.node());
        coeffs.push_back(c);
    }
    auto ps = parents;
    return make_op<S>(std::move(out), std::move(parents), [ps, coeffs](Node<S>& self) {
        for (std::size_t k = 0; k < ps.size(); ++k) {
            if (!ps[k]->requires_grad) continue;
            auto& g = ps[k]->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += coeffs[k] * self.grad[i];
        }
    });
}

template <class S>
Var<S> silu(const Var<S>& a) {
    const auto& av = a.value();
    Tensor<S> out(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] / (S(1) + std::exp(-av[i]));
    auto pa = a.node();
    return make_op<S>(std::move(out), {pa}, [pa](Node<S>& self) {
        auto& g = pa->grad_buffer();
        const auto& x = pa->value;
        for (std::size_t i = 0; i < g.size(); ++i) {
            const S sig = S(1) / (S(1) + std::exp(-x[i]));
            g[i] += self.grad[i] * sig * (S(1) + x[i] * (S(1) - sig));
        }
    });
}

template <class S>
Var<S> relu(const Var<S>& a) {
    Tensor<S> out = a.value();
    for (auto& v : out.span()) v = v > S(0) ? v : S(0);
    auto pa = a.node();
    return make_op<S>(std::move(out), {pa}, [pa](Node<S>& self) {
        auto& g = pa->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) {
            if (pa->value[i] > S(0)) g[i] += self.grad[i];
        }
    });
}

// ---------------------------------------------------------------------------
// Reductions

template <class S>
Var<S> sum_all(const Var<S>& a) {
    S acc = 0;
    for (S v : a.value().vec()) acc += v;
    auto pa = a.node();
    return make_op<S>(Tensor<S>::scalar(acc), {pa}, [pa](Node<S>& self) {
        const S g0 = self.grad[0];
        for (auto& v : pa->grad_buffer().span()) v += g0;
    });
}

template <class S>
Var<S> mean_all(const Var<S>& a) {
    const auto n = a.value().size();
    if (n == 0) throw ShapeError("mean_all of empty tensor");
    return scale(sum_all(a), S(1) / static_cast<S>(n));
}

/// Mean over (h, w): (B,C,H,W) -> (B,C,1,1).
template <class S>
Var<S> spatial_mean(const Var<S>& a) {
    const Shape s = a.shape();
    const auto hw = s.plane();
    Tensor<S> out(Shape{s.n, s.c, 1, 1});
    const auto& av = a.value();
    for (std::size_t p = 0; p < out.size(); ++p) {
        S acc = 0;
        for (std::size_t i = 0; i < hw; ++i) acc += av[p * hw + i];
        out[p] = acc / static_cast<S>(hw);
    }
    auto pa = a.node();
    return make_op<S>(std::move(out), {pa}, [pa, hw](Node<S>& self) {
        auto& g = pa->grad_buffer();
        const S inv = S(1) / static_cast<S>(hw);
        for (std::size_t p = 0; p < self.grad.size(); ++p) {
            const S gp = self.grad[p] * inv;
            for (std::size_t i = 0; i < hw; ++i) g[p * hw + i] += gp;
        }
    });
}

/// Sum of a ⊙ c with c held constant.
template <class S>
Var<S> dot_const(const Var<S>& a, Tensor<S> c) {
    require_same_shape(a.shape(), c.shape(), "dot_const");
    S acc = 0;
    const auto& av = a.value();
    for (std::size_t i = 0; i < c.size(); ++i) acc += av[i] * c[i];
    auto pa = a.node();
    return make_op<S>(Tensor<S>::scalar(acc), {pa}, [pa, c = std::move(c)](Node<S>& self) {
        auto& g = pa->grad_buffer();
        const S g0 = self.grad[0];
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += g0 * c[i];
    });
}

// ---------------------------------------------------------------------------
// Layout ops

template <class S>
Var<S> concat_channels(const Var<S>& a, const Var<S>& b) {
    const Shape sa = a.shape(), sb = b.shape();
    if (sa.n != sb.n || sa.h != sb.h || sa.w != sb.w) {
        throw ShapeError("concat_channels: " + sa.str() + " vs " + sb.str());
    }
    const Shape so{sa.n, sa.c + sb.c, sa.h, sa.w};
    Tensor<S> out(so);
    const auto pa_sz = sa.per_sample(), pb_sz = sb.per_sample();
    for (int n = 0; n < sa.n; ++n) {
        std::copy_n(a.value().data() + n * pa_sz, pa_sz, out.data() + n * (pa_sz + pb_sz));
        std::copy_n(b.value().data() + n * pb_sz, pb_sz, out.data() + n * (pa_sz + pb_sz) + pa_sz);
    }
    auto pa = a.node(), pb = b.node();
    return make_op<S>(std::move(out), {pa, pb}, [pa, pb, pa_sz, pb_sz](Node<S>& self) {
        const int nb = self.value.shape().n;
        for (int n = 0; n < nb; ++n) {
            const S* src = self.grad.data() + n * (pa_sz + pb_sz);
            if (pa->requires_grad) {
                S* dst = pa->grad_buffer().data() + n * pa_sz;
                for (std::size_t i = 0; i < pa_sz; ++i) dst[i] += src[i];
            }
            if (pb->requires_grad) {
                S* dst = pb->grad_buffer().data() + n * pb_sz;
                for (std::size_t i = 0; i < pb_sz; ++i) dst[i] += src[pa_sz + i];
            }
        }
    });
}

/// Nearest-neighbour 2x upsampling.
template <class S>
Var<S> upsample2x(const Var<S>& a) {
    const Shape s = a.shape();
    const Shape so{s.n, s.c, s.h * 2, s.w * 2};
    Tensor<S> out(so);
    const auto& av = a.value();
    for (int p = 0; p < s.n * s.c; ++p) {
        const S* src = av.data() + p * s.plane();
        S* dst = out.data() + p * so.plane();
        for (int y = 0; y < so.h; ++y) {
            for (int x = 0; x < so.w; ++x) dst[y * so.w + x] = src[(y / 2) * s.w + x / 2];
        }
    }
    auto pa = a.node();
    return make_op<S>(std::move(out), {pa}, [pa, s, so](Node<S>& self) {
        auto& g = pa->grad_buffer();
        for (int p = 0; p < s.n * s.c; ++p) {
            const S* src = self.grad.data() + p * so.plane();
            S* dst = g.data() + p * s.plane();
            for (int y = 0; y < so.h; ++y) {
                for (int x = 0; x < so.w; ++x) dst[(y / 2) * s.w + x / 2] += src[y * so.w + x];
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Per-channel broadcast: v has shape (1 or B, C, 1, 1).

namespace detail {
inline void check_channel_vector(const Shape& x, const Shape& v, const char* where) {
    if (!((v.n == 1 || v.n == x.n) && v.c == x.c && v.h == 1 && v.w == 1)) {
        throw ShapeError(std::string(where) + ": cannot broadcast " + v.str() + " over " + x.str());
    }
}
}  // namespace detail

template <class S>
Var<S> add_channel(const Var<S>& x, const Var<S>& v) {
    const Shape s = x.shape(), sv = v.shape();
    detail::check_channel_vector(s, sv, "add_channel");
    Tensor<S> out = x.value();
    const auto hw = s.plane();
    for (int n = 0; n < s.n; ++n) {
        for (int c = 0; c < s.c; ++c) {
            const S b = v.value()[(sv.n == 1 ? 0 : n) * s.c + c];
            S* dst = out.data() + (n * s.c + c) * hw;
            for (std::size_t i = 0; i < hw; ++i) dst[i] += b;
        }
    }
    auto px = x.node(), pv = v.node();
    return make_op<S>(std::move(out), {px, pv}, [px, pv, s, sv, hw](Node<S>& self) {
        if (px->requires_grad) px->grad_buffer() += self.grad;
        if (pv->requires_grad) {
            auto& g = pv->grad_buffer();
            for (int n = 0; n < s.n; ++n) {
                for (int c = 0; c < s.c; ++c) {
                    const S* src = self.grad.data() + (n * s.c + c) * hw;
                    S acc = 0;
                    for (std::size_t i = 0; i < hw; ++i) acc += src[i];
                    g[(sv.n == 1 ? 0 : n) * s.c + c] += acc;
                }
            }
        }
    });
}

template <class S>
Var<S> mul_channel(const Var<S>& x, const Var<S>& v) {
    const Shape s = x.shape(), sv = v.shape();
    detail::check_channel_vector(s, sv, "mul_channel");
    Tensor<S> out = x.value();
    const auto hw = s.plane();
    for (int n = 0; n < s.n; ++n) {
        for (int c = 0; c < s.c; ++c) {
            const S m = v.value()[(sv.n == 1 ? 0 : n) * s.c + c];
            S* dst = out.data() + (n * s.c + c) * hw;
            for (std::size_t i = 0; i < hw; ++i) dst[i] *= m;
        }
    }
    auto px = x.node(), pv = v.node();
    return make_op<S>(std::move(out), {px, pv}, [px, pv, s, sv, hw](Node<S>& self) {
        for (int n = 0; n < s.n; ++n) {
            for (int c = 0; c < s.c; ++c) {
                const std::size_t vi = static_cast<std::size_t>((sv.n == 1 ? 0 : n) * s.c + c);
                const std::size_t base = static_cast<std::size_t>(n * s.c + c) * hw;
                const S* gsrc = self.grad.data() + base;
                if (px->requires_grad) {
                    S* dst = px->grad_buffer().data() + base;
                    const S m = pv->value[vi];
                    for (std::size_t i = 0; i < hw; ++i) dst[i] += gsrc[i] * m;
                }
                if (pv->requires_grad) {
                    const S* xs = px->value.data() + base;
                    S acc = 0;
                    for (std::size_t i = 0; i < hw; ++i) acc += gsrc[i] * xs[i];
                    pv->grad_buffer()[vi] += acc;
                }
            }
        }
    });
}

}  // namespace tadsr
