#pragma once

// Training objectives. Every function returns a scalar Var; the gradient
// contract of each is stated next to it.

#include <stdexcept>
#include <vector>

#include "tadsr/diffusion.hpp"
#include "tadsr/nets.hpp"

namespace tadsr {

class LossError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Mean over all elements of (a - b)^2. Gradient flows into both if tracked.
template <class S>
Var<S> mse(const Var<S>& a, const Var<S>& b) {
    Var<S> d = sub(a, b);
    return mean_all(mul(d, d));
}

/// Denoiser objective, optionally scaled by the w_t weight.
template <class S>
Var<S> teacher_loss(const DiffusionSchedule& s, const Var<S>& z0_hat, const Tensor<S>& z0, int t, bool weighted) {
    require_same_shape(z0_hat.shape(), z0.shape(), "teacher_loss");
    Var<S> l = mse(z0_hat, Var<S>(z0));
    return weighted ? scale(l, static_cast<S>(s.loss_weight(t))) : l;
}

/// MSE between the one-step student output and the (constant) teacher rollout.
/// d/d z0_stu = 2 (z0_stu - z0_tch) / N.
template <class S>
Var<S> vanilla_distill_loss(const Var<S>& z0_stu, const Tensor<S>& z0_tch) {
    require_same_shape(z0_stu.shape(), z0_tch.shape(), "vanilla_distill_loss");
    return mse(z0_stu, Var<S>(z0_tch));
}

/// Detached score residual
///   r = z0_stu - z0_tch + F(z_t'^tch) - F(z_t'^stu)
/// with both branches noised at t' by the same eps'.
template <class S, Denoiser<S> D>
Tensor<S> hsd_residual(const D& teacher, const DiffusionSchedule& s, const Tensor<S>& z0_stu,
                       const Tensor<S>& z0_tch, const Tensor<S>& zy, int t_prime, const Tensor<S>& eps_prime) {
    NoGradGuard ng;
    const Tensor<S> zt_stu = forward_sample(s, z0_stu, zy, t_prime, eps_prime);
    const Tensor<S> zt_tch = forward_sample(s, z0_tch, zy, t_prime, eps_prime);
    const Tensor<S> f_tch = teacher(zt_tch, zy, t_prime);
    const Tensor<S> f_stu = teacher(zt_stu, zy, t_prime);
    Tensor<S> r(z0_stu.shape());
    for (std::size_t i = 0; i < r.size(); ++i) r[i] = z0_stu[i] - z0_tch[i] + f_tch[i] - f_stu[i];
    return r;
}

/// The score-difference form omega * (eps_phi(z_t'^stu) - eps_phi(z_t'^tch)),
/// elementwise, with eps_phi from the reparameterization. Equal to
/// hsd_weight * hsd_residual up to rounding.
template <class S, Denoiser<S> D>
Tensor<S> hsd_score_difference(const D& teacher, const DiffusionSchedule& s, const Tensor<S>& z0_stu,
                               const Tensor<S>& z0_tch, const Tensor<S>& zy, int t_prime,
                               const Tensor<S>& eps_prime) {
    NoGradGuard ng;
    const Shape sh = z0_stu.shape();
    const Tensor<S> zt_stu = forward_sample(s, z0_stu, zy, t_prime, eps_prime);
    const Tensor<S> zt_tch = forward_sample(s, z0_tch, zy, t_prime, eps_prime);
    const Tensor<S> e_stu = predicted_noise(s, zt_stu, teacher(zt_stu, zy, t_prime), zy, t_prime);
    const Tensor<S> e_tch = predicted_noise(s, zt_tch, teacher(zt_tch, zy, t_prime), zy, t_prime);
    const S omega = static_cast<S>(1.0 / (static_cast<double>(sh.c) * static_cast<double>(sh.plane())));
    Tensor<S> out(sh);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = omega * (e_stu[i] - e_tch[i]);
    return out;
}

inline void check_small_step(const DiffusionSchedule& s, int t_prime) {
    if (t_prime < 1 || t_prime > s.small_step_limit()) {
        throw LossError("t' = " + std::to_string(t_prime) + " outside the small-step range [1, " +
                        std::to_string(s.small_step_limit()) + "]");
    }
}

/// Surrogate whose gradient w.r.t. z0_stu is the score-distillation update
/// (U-Net Jacobian omitted):
///   L = (omega_2 / B) * sum(sg(r) ⊙ z0_stu),   dL/dz0_stu = omega_2 r / B.
/// For B = 1 the gradient is exactly omega_2 r.
template <class S, Denoiser<S> D>
Var<S> hsd_loss(const D& teacher, const DiffusionSchedule& s, const Var<S>& z0_stu, const Tensor<S>& z0_tch,
                const Tensor<S>& zy, int t_prime, const Tensor<S>& eps_prime) {
    check_small_step(s, t_prime);
    require_same_shape(z0_stu.shape(), z0_tch.shape(), "hsd_loss(z0_stu, z0_tch)");
    Tensor<S> r = hsd_residual(teacher, s, z0_stu.value(), z0_tch, zy, t_prime, eps_prime);
    const Shape sh = z0_stu.shape();
    const double w2 = s.hsd_weight(t_prime, sh.c, static_cast<int>(sh.plane()));
    r *= static_cast<S>(w2 / sh.n);
    return dot_const(z0_stu, std::move(r));
}

/// Plain score distillation: same surrogate mechanism, with the residual
/// omega * (eps_phi(z_t'^stu) - eps') against the injected noise.
template <class S, Denoiser<S> D>
Var<S> sds_loss(const D& teacher, const DiffusionSchedule& s, const Var<S>& z0_stu, const Tensor<S>& zy, int t_prime,
                const Tensor<S>& eps_prime) {
    check_small_step(s, t_prime);
    Tensor<S> g(z0_stu.shape());
    {
        NoGradGuard ng;
        const Tensor<S> zt = forward_sample(s, z0_stu.value(), zy, t_prime, eps_prime);
        const Tensor<S> e = predicted_noise(s, zt, teacher(zt, zy, t_prime), zy, t_prime);
        const Shape sh = z0_stu.shape();
        const S w = static_cast<S>(1.0 / (static_cast<double>(sh.c) * static_cast<double>(sh.plane()) * sh.n));
        for (std::size_t i = 0; i < g.size(); ++i) g[i] = w * (e[i] - eps_prime[i]);
    }
    return dot_const(z0_stu, std::move(g));
}

namespace detail {
template <class S>
void check_scores(const std::vector<Var<S>>& scores, const char* where) {
    if (scores.empty()) throw LossError(std::string(where) + ": no scores");
    for (const auto& s : scores) {
        if (s.shape() != scores.front().shape() || s.shape().c != 1 || s.shape().h != 1 || s.shape().w != 1) {
            throw LossError(std::string(where) + ": scores must all be (B,1,1,1)");
        }
    }
}
}  // namespace detail

/// -mean_b sum_k score_k
template <class S>
Var<S> adv_gen_loss(const std::vector<Var<S>>& scores_fake) {
    detail::check_scores(scores_fake, "adv_gen_loss");
    const S inv_b = S(1) / static_cast<S>(scores_fake.front().shape().n);
    std::vector<std::pair<S, Var<S>>> terms;
    for (const auto& s : scores_fake) terms.emplace_back(S(1), sum_all(s));
    return scale(lincomb(terms), -inv_b);
}

/// mean_b [ sum_k max(0, 1 + fake_k) + sum_k max(0, 1 - real_k) ]
template <class S>
Var<S> adv_disc_loss(const std::vector<Var<S>>& scores_fake, const std::vector<Var<S>>& scores_real) {
    detail::check_scores(scores_fake, "adv_disc_loss");
    detail::check_scores(scores_real, "adv_disc_loss");
    if (scores_fake.size() != scores_real.size()) throw LossError("adv_disc_loss: scale count mismatch");
    if (scores_fake.front().shape() != scores_real.front().shape()) throw LossError("adv_disc_loss: batch mismatch");
    const S inv_b = S(1) / static_cast<S>(scores_fake.front().shape().n);
    std::vector<std::pair<S, Var<S>>> terms;
    for (std::size_t k = 0; k < scores_fake.size(); ++k) {
        terms.emplace_back(inv_b, sum_all(relu(add_scalar(scores_fake[k], S(1)))));
        terms.emplace_back(inv_b, sum_all(relu(add_scalar(scale(scores_real[k], S(-1)), S(1)))));
    }
    return lincomb(terms);
}

/// l_distill + lambda1 l_hsd + lambda2 l_adv
template <class S>
Var<S> total_gen_loss(const Var<S>& l_distill, const Var<S>& l_hsd, const Var<S>& l_adv, double lambda1,
                      double lambda2) {
    if (lambda1 < 0 || lambda2 < 0) throw LossError("total_gen_loss: lambdas must be non-negative");
    return lincomb<S>({{S(1), l_distill}, {static_cast<S>(lambda1), l_hsd}, {static_cast<S>(lambda2), l_adv}});
}

}  // namespace tadsr
