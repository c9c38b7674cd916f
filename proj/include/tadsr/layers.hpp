#pragma once

// Convolution, dense and normalization ops plus the parameter store that
// networks keep their weights in. Convolutions lower to im2col + GEMM.

#include <Eigen/Core>

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "tadsr/autograd.hpp"

namespace tadsr {

namespace detail {

template <class S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using MapMat = Eigen::Map<RowMat<S>>;
template <class S>
using ConstMapMat = Eigen::Map<const RowMat<S>>;

struct ConvGeometry {
    int cin, h, w, k, stride, pad, ho, wo;
    [[nodiscard]] int rows() const noexcept { return cin * k * k; }
    [[nodiscard]] int cols() const noexcept { return ho * wo; }
};

// cols[(c*k + ky)*k + kx][oy*wo + ox] = x[c][oy*stride + ky - pad][ox*stride + kx - pad]
template <class S>
void im2col(const S* x, const ConvGeometry& g, S* cols) {
    for (int c = 0; c < g.cin; ++c) {
        const S* xc = x + static_cast<std::size_t>(c) * g.h * g.w;
        for (int ky = 0; ky < g.k; ++ky) {
            for (int kx = 0; kx < g.k; ++kx) {
                S* row = cols + static_cast<std::size_t>((c * g.k + ky) * g.k + kx) * g.cols();
                for (int oy = 0; oy < g.ho; ++oy) {
                    const int iy = oy * g.stride + ky - g.pad;
                    S* dst = row + oy * g.wo;
                    if (iy < 0 || iy >= g.h) {
                        std::fill(dst, dst + g.wo, S(0));
                        continue;
                    }
                    const S* src = xc + iy * g.w;
                    if (g.stride == 1) {
                        const int shift = kx - g.pad;
                        const int lo = std::max(0, -shift);
                        const int hi = std::min(g.wo, g.w - shift);
                        for (int ox = 0; ox < lo; ++ox) dst[ox] = S(0);
                        for (int ox = lo; ox < hi; ++ox) dst[ox] = src[ox + shift];
                        for (int ox = std::max(hi, lo); ox < g.wo; ++ox) dst[ox] = S(0);
                    } else {
                        for (int ox = 0; ox < g.wo; ++ox) {
                            const int ix = ox * g.stride + kx - g.pad;
                            dst[ox] = (ix >= 0 && ix < g.w) ? src[ix] : S(0);
                        }
                    }
                }
            }
        }
    }
}

template <class S>
void col2im_add(const S* cols, const ConvGeometry& g, S* x) {
    for (int c = 0; c < g.cin; ++c) {
        S* xc = x + static_cast<std::size_t>(c) * g.h * g.w;
        for (int ky = 0; ky < g.k; ++ky) {
            for (int kx = 0; kx < g.k; ++kx) {
                const S* row = cols + static_cast<std::size_t>((c * g.k + ky) * g.k + kx) * g.cols();
                for (int oy = 0; oy < g.ho; ++oy) {
                    const int iy = oy * g.stride + ky - g.pad;
                    if (iy < 0 || iy >= g.h) continue;
                    const S* src = row + oy * g.wo;
                    S* dst = xc + iy * g.w;
                    for (int ox = 0; ox < g.wo; ++ox) {
                        const int ix = ox * g.stride + kx - g.pad;
                        if (ix >= 0 && ix < g.w) dst[ix] += src[ox];
                    }
                }
            }
        }
    }
}

}  // namespace detail

/// 2-D convolution. x: (B,Cin,H,W), weight: (Cout,Cin,k,k), bias: (1,Cout,1,1).
template <class S>
Var<S> conv2d(const Var<S>& x, const Var<S>& weight, const Var<S>& bias, int stride, int pad) {
    const Shape xs = x.shape(), ws = weight.shape();
    if (ws.c != xs.c || ws.h != ws.w) {
        throw ShapeError("conv2d: weight " + ws.str() + " incompatible with input " + xs.str());
    }
    if (bias.shape() != Shape{1, ws.n, 1, 1}) throw ShapeError("conv2d: bad bias " + bias.shape().str());
    const int k = ws.h;
    const detail::ConvGeometry g{xs.c, xs.h, xs.w, k, stride, pad, (xs.h + 2 * pad - k) / stride + 1,
                                 (xs.w + 2 * pad - k) / stride + 1};
    if (g.ho <= 0 || g.wo <= 0) throw ShapeError("conv2d: empty output for " + xs.str());
    const int cout = ws.n;
    const bool pointwise = (k == 1 && stride == 1 && pad == 0);

    Tensor<S> out(Shape{xs.n, cout, g.ho, g.wo});
    AlignedVector<S> cols(pointwise ? 0 : static_cast<std::size_t>(g.rows()) * g.cols());
    const detail::ConstMapMat<S> wm(weight.value().data(), cout, g.rows());
    for (int n = 0; n < xs.n; ++n) {
        const S* xn = x.value().data() + n * xs.per_sample();
        const S* colp = xn;
        if (!pointwise) {
            detail::im2col(xn, g, cols.data());
            colp = cols.data();
        }
        detail::MapMat<S> om(out.data() + static_cast<std::size_t>(n) * cout * g.cols(), cout, g.cols());
        om.noalias() = wm * detail::ConstMapMat<S>(colp, g.rows(), g.cols());
        for (int c = 0; c < cout; ++c) om.row(c).array() += bias.value()[c];
    }

    auto px = x.node(), pw = weight.node(), pb = bias.node();
    return make_op<S>(std::move(out), {px, pw, pb}, [px, pw, pb, g, pointwise, cout](Node<S>& self) {
        const Shape xs = px->value.shape();
        AlignedVector<S> cols(pointwise ? 0 : static_cast<std::size_t>(g.rows()) * g.cols());
        AlignedVector<S> dcols(pointwise ? 0 : cols.size());
        const detail::ConstMapMat<S> wm(pw->value.data(), cout, g.rows());
        for (int n = 0; n < xs.n; ++n) {
            const detail::ConstMapMat<S> gm(self.grad.data() + static_cast<std::size_t>(n) * cout * g.cols(), cout,
                                            g.cols());
            if (pb->requires_grad) {
                auto& gb = pb->grad_buffer();
                for (int c = 0; c < cout; ++c) gb[c] += gm.row(c).sum();
            }
            const S* xn = px->value.data() + n * xs.per_sample();
            if (pw->requires_grad) {
                const S* colp = xn;
                if (!pointwise) {
                    detail::im2col(xn, g, cols.data());
                    colp = cols.data();
                }
                detail::MapMat<S> gw(pw->grad_buffer().data(), cout, g.rows());
                gw.noalias() += gm * detail::ConstMapMat<S>(colp, g.rows(), g.cols()).transpose();
            }
            if (px->requires_grad) {
                S* gx = px->grad_buffer().data() + n * xs.per_sample();
                if (pointwise) {
                    detail::MapMat<S>(gx, g.rows(), g.cols()).noalias() += wm.transpose() * gm;
                } else {
                    detail::MapMat<S>(dcols.data(), g.rows(), g.cols()).noalias() = wm.transpose() * gm;
                    detail::col2im_add(dcols.data(), g, gx);
                }
            }
        }
    });
}

/// Dense layer on (B,In,1,1) activations; weight (Out,In,1,1), bias (1,Out,1,1).
template <class S>
Var<S> linear(const Var<S>& x, const Var<S>& weight, const Var<S>& bias) {
    const Shape xs = x.shape(), ws = weight.shape();
    if (xs.h != 1 || xs.w != 1 || ws.c != xs.c || ws.h != 1 || ws.w != 1) {
        throw ShapeError("linear: weight " + ws.str() + " incompatible with input " + xs.str());
    }
    const int in = xs.c, outc = ws.n, b = xs.n;
    Tensor<S> out(Shape{b, outc, 1, 1});
    detail::MapMat<S> om(out.data(), b, outc);
    om.noalias() = detail::ConstMapMat<S>(x.value().data(), b, in) *
                   detail::ConstMapMat<S>(weight.value().data(), outc, in).transpose();
    for (int r = 0; r < b; ++r) {
        for (int c = 0; c < outc; ++c) om(r, c) += bias.value()[c];
    }
    auto px = x.node(), pw = weight.node(), pb = bias.node();
    return make_op<S>(std::move(out), {px, pw, pb}, [px, pw, pb, in, outc, b](Node<S>& self) {
        const detail::ConstMapMat<S> gm(self.grad.data(), b, outc);
        if (pb->requires_grad) {
            auto& gb = pb->grad_buffer();
            for (int c = 0; c < outc; ++c) gb[c] += gm.col(c).sum();
        }
        if (pw->requires_grad) {
            detail::MapMat<S>(pw->grad_buffer().data(), outc, in).noalias() +=
                gm.transpose() * detail::ConstMapMat<S>(px->value.data(), b, in);
        }
        if (px->requires_grad) {
            detail::MapMat<S>(px->grad_buffer().data(), b, in).noalias() +=
                gm * detail::ConstMapMat<S>(pw->value.data(), outc, in);
        }
    });
}

/// Parameter-free group normalization: zero mean, unit variance per (sample, group).
template <class S>
Var<S> group_norm(const Var<S>& x, int groups, S eps = S(1e-5)) {
    const Shape s = x.shape();
    if (groups <= 0 || s.c % groups != 0) {
        throw ShapeError("group_norm: " + std::to_string(groups) + " groups do not divide " + s.str());
    }
    const std::size_t gsize = static_cast<std::size_t>(s.c / groups) * s.plane();
    const std::size_t ngroups = static_cast<std::size_t>(s.n) * groups;
    Tensor<S> out(s);
    std::vector<S> inv_std(ngroups);
    const auto& xv = x.value();
    for (std::size_t gi = 0; gi < ngroups; ++gi) {
        const S* src = xv.data() + gi * gsize;
        double mean = 0;
        for (std::size_t i = 0; i < gsize; ++i) mean += src[i];
        mean /= static_cast<double>(gsize);
        double var = 0;
        for (std::size_t i = 0; i < gsize; ++i) {
            const double d = src[i] - mean;
            var += d * d;
        }
        var /= static_cast<double>(gsize);
        const S is = static_cast<S>(1.0 / std::sqrt(var + static_cast<double>(eps)));
        inv_std[gi] = is;
        const S m = static_cast<S>(mean);
        S* dst = out.data() + gi * gsize;
        for (std::size_t i = 0; i < gsize; ++i) dst[i] = (src[i] - m) * is;
    }
    auto px = x.node();
    Tensor<S> normalized = out;
    return make_op<S>(std::move(out), {px},
                      [px, gsize, ngroups, inv_std = std::move(inv_std),
                       xhat = std::move(normalized)](Node<S>& self) {
                          auto& gx = px->grad_buffer();
                          for (std::size_t gi = 0; gi < ngroups; ++gi) {
                              const S* gy = self.grad.data() + gi * gsize;
                              const S* xh = xhat.data() + gi * gsize;
                              double sum_g = 0, sum_gx = 0;
                              for (std::size_t i = 0; i < gsize; ++i) {
                                  sum_g += gy[i];
                                  sum_gx += static_cast<double>(gy[i]) * xh[i];
                              }
                              const S mg = static_cast<S>(sum_g / static_cast<double>(gsize));
                              const S mgx = static_cast<S>(sum_gx / static_cast<double>(gsize));
                              S* dst = gx.data() + gi * gsize;
                              for (std::size_t i = 0; i < gsize; ++i) {
                                  dst[i] += inv_std[gi] * (gy[i] - mg - xh[i] * mgx);
                              }
                          }
                      });
}

// ---------------------------------------------------------------------------
// Parameters

/// Ordered, named collection of trainable leaves. Copying deep-copies values.
template <class S>
class ParamStore {
public:
    ParamStore() = default;
    ParamStore(const ParamStore& o) { copy_from(o); }
    ParamStore& operator=(const ParamStore& o) {
        if (this != &o) copy_from(o);
        return *this;
    }
    ParamStore(ParamStore&&) noexcept = default;
    ParamStore& operator=(ParamStore&&) noexcept = default;

    std::size_t add(std::string name, Tensor<S> init) {
        if (index_.count(name) != 0) throw std::invalid_argument("duplicate parameter " + name);
        index_.emplace(name, leaves_.size());
        names_.push_back(std::move(name));
        leaves_.push_back(Var<S>::leaf(std::move(init), trainable_).node());
        return leaves_.size() - 1;
    }

    [[nodiscard]] Var<S> var(std::size_t i) const { return Var<S>(leaves_[i]); }
    [[nodiscard]] std::size_t size() const noexcept { return leaves_.size(); }
    [[nodiscard]] const std::string& name(std::size_t i) const { return names_[i]; }
    [[nodiscard]] const std::vector<std::string>& names() const noexcept { return names_; }
    [[nodiscard]] Tensor<S>& value(std::size_t i) { return leaves_[i]->value; }
    [[nodiscard]] const Tensor<S>& value(std::size_t i) const { return leaves_[i]->value; }
    [[nodiscard]] Node<S>& node(std::size_t i) { return *leaves_[i]; }
    [[nodiscard]] const Node<S>& node(std::size_t i) const { return *leaves_[i]; }

    [[nodiscard]] std::size_t find(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
        return it->second;
    }

    [[nodiscard]] std::size_t element_count() const noexcept {
        std::size_t n = 0;
        for (const auto& l : leaves_) n += l->value.size();
        return n;
    }

    /// Frozen parameters behave as constants in every graph built afterwards.
    void set_trainable(bool on) {
        trainable_ = on;
        for (auto& l : leaves_) l->requires_grad = on;
    }
    [[nodiscard]] bool trainable() const noexcept { return trainable_; }

    void zero_grad() {
        for (auto& l : leaves_) l->grad = Tensor<S>();
    }
    [[nodiscard]] bool any_grad() const {
        for (const auto& l : leaves_) {
            if (l->has_grad()) {
                for (S v : l->grad.vec()) {
                    if (v != S(0)) return true;
                }
            }
        }
        return false;
    }

    [[nodiscard]] double grad_norm() const {
        double acc = 0;
        for (const auto& l : leaves_) {
            if (!l->has_grad()) continue;
            for (S v : l->grad.vec()) acc += static_cast<double>(v) * v;
        }
        return std::sqrt(acc);
    }

    /// Rescales gradients so their global L2 norm is at most max_norm; returns the pre-clip norm.
    double clip_grad_norm(double max_norm) {
        const double norm = grad_norm();
        if (norm > max_norm && norm > 0) {
            const S f = static_cast<S>(max_norm / norm);
            for (auto& l : leaves_) {
                if (l->has_grad()) l->grad *= f;
            }
        }
        return norm;
    }

    [[nodiscard]] bool values_equal(const ParamStore& o) const {
        if (o.names_ != names_) return false;
        for (std::size_t i = 0; i < leaves_.size(); ++i) {
            if (!(leaves_[i]->value == o.leaves_[i]->value)) return false;
        }
        return true;
    }

private:
    void copy_from(const ParamStore& o) {
        names_ = o.names_;
        index_ = o.index_;
        trainable_ = o.trainable_;
        leaves_.clear();
        for (const auto& l : o.leaves_) leaves_.push_back(Var<S>::leaf(l->value, l->requires_grad).node());
    }

    std::vector<std::string> names_;
    std::map<std::string, std::size_t> index_;
    std::vector<std::shared_ptr<Node<S>>> leaves_;
    bool trainable_ = true;
};

struct Conv2dLayer {
    std::size_t weight = 0, bias = 0;
    int stride = 1, pad = 1;
};

struct LinearLayer {
    std::size_t weight = 0, bias = 0;
};

/// Kaiming-uniform style fan-in initialisation.
template <class S>
Conv2dLayer make_conv(ParamStore<S>& ps, const std::string& name, int cin, int cout, int k, int stride, Rng& rng,
                      S gain = S(1)) {
    const auto fan_in = static_cast<S>(cin * k * k);
    const S bound = gain * std::sqrt(S(3) / fan_in);
    Conv2dLayer l;
    l.weight = ps.add(name + ".weight", rand_uniform<S>(Shape{cout, cin, k, k}, rng, -bound, bound));
    l.bias = ps.add(name + ".bias", Tensor<S>(Shape{1, cout, 1, 1}));
    l.stride = stride;
    l.pad = k / 2;
    return l;
}

template <class S>
LinearLayer make_linear(ParamStore<S>& ps, const std::string& name, int in, int out, Rng& rng, S gain = S(1)) {
    const S bound = gain * std::sqrt(S(3) / static_cast<S>(in));
    LinearLayer l;
    l.weight = ps.add(name + ".weight", bound == S(0) ? Tensor<S>(Shape{out, in, 1, 1})
                                                      : rand_uniform<S>(Shape{out, in, 1, 1}, rng, -bound, bound));
    l.bias = ps.add(name + ".bias", Tensor<S>(Shape{1, out, 1, 1}));
    return l;
}

template <class S>
Var<S> apply(const ParamStore<S>& ps, const Conv2dLayer& l, const Var<S>& x) {
    return conv2d(x, ps.var(l.weight), ps.var(l.bias), l.stride, l.pad);
}

template <class S>
Var<S> apply(const ParamStore<S>& ps, const LinearLayer& l, const Var<S>& x) {
    return linear(x, ps.var(l.weight), ps.var(l.bias));
}

/// Sinusoidal embedding of integer timesteps: (B, dim, 1, 1), [sin | cos] halves.
template <class S>
Tensor<S> timestep_embedding(std::span<const int> t, int dim, double max_period = 10000.0) {
    if (dim <= 0 || dim % 2 != 0) throw std::invalid_argument("timestep_embedding: dim must be even");
    Tensor<S> out(Shape{static_cast<int>(t.size()), dim, 1, 1});
    const int half = dim / 2;
    for (std::size_t b = 0; b < t.size(); ++b) {
        for (int i = 0; i < half; ++i) {
            const double freq = std::exp(-std::log(max_period) * i / half);
            const double arg = static_cast<double>(t[b]) * freq;
            out[b * dim + i] = static_cast<S>(std::sin(arg));
            out[b * dim + half + i] = static_cast<S>(std::cos(arg));
        }
    }
    return out;
}

}  // namespace tadsr
