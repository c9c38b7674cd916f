#pragma once

// Residual-shifting forward process, reverse steps, multi-step sampling and
// the noise reparameterization. All noise is supplied by the caller.

#include <cmath>
#include <concepts>
#include <optional>
#include <span>
#include <vector>

#include "tadsr/autograd.hpp"
#include "tadsr/schedule.hpp"
#include "tadsr/tensor.hpp"

namespace tadsr {

/// Anything that maps (z_t, z_y, t) to a z0 prediction.
template <class D, class S>
concept Denoiser = requires(const D& d, const Tensor<S>& zt, const Tensor<S>& zy, int t) {
    { d(zt, zy, t) } -> std::convertible_to<Tensor<S>>;
};

/// z_t = z0 + eta_t (zy - z0) + sqrt(eta_t) kappa eps
template <class S>
Tensor<S> forward_sample(const DiffusionSchedule& s, const Tensor<S>& z0, const Tensor<S>& zy, int t,
                         const Tensor<S>& eps) {
    s.check_step(t);
    require_same_shape(z0.shape(), zy.shape(), "forward_sample(z0, zy)");
    require_same_shape(z0.shape(), eps.shape(), "forward_sample(z0, eps)");
    const S eta = static_cast<S>(s.eta(t));
    const S sigma = static_cast<S>(std::sqrt(s.eta(t)) * s.kappa());
    Tensor<S> out(z0.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = z0[i] + eta * (zy[i] - z0[i]) + sigma * eps[i];
    return out;
}

/// Differentiable in z0; z_y and eps are constants.
template <class S>
Var<S> forward_sample(const DiffusionSchedule& s, const Var<S>& z0, const Tensor<S>& zy, int t,
                      const Tensor<S>& eps) {
    s.check_step(t);
    require_same_shape(z0.shape(), zy.shape(), "forward_sample(z0, zy)");
    require_same_shape(z0.shape(), eps.shape(), "forward_sample(z0, eps)");
    const S eta = static_cast<S>(s.eta(t));
    const S sigma = static_cast<S>(std::sqrt(s.eta(t)) * s.kappa());
    Tensor<S> shift(zy.shape());
    for (std::size_t i = 0; i < shift.size(); ++i) shift[i] = eta * zy[i] + sigma * eps[i];
    return lincomb<S>({{S(1) - eta, z0}, {S(1), Var<S>(std::move(shift))}});
}

/// Per-sample timesteps (teacher training draws one t per batch element).
template <class S>
Tensor<S> forward_sample(const DiffusionSchedule& s, const Tensor<S>& z0, const Tensor<S>& zy,
                         std::span<const int> t, const Tensor<S>& eps) {
    require_same_shape(z0.shape(), zy.shape(), "forward_sample(z0, zy)");
    require_same_shape(z0.shape(), eps.shape(), "forward_sample(z0, eps)");
    if (static_cast<int>(t.size()) != z0.shape().n) throw ShapeError("forward_sample: one timestep per sample");
    Tensor<S> out(z0.shape());
    const auto per = z0.shape().per_sample();
    for (int b = 0; b < z0.shape().n; ++b) {
        s.check_step(t[b]);
        const S eta = static_cast<S>(s.eta(t[b]));
        const S sigma = static_cast<S>(std::sqrt(s.eta(t[b])) * s.kappa());
        for (std::size_t i = b * per; i < (b + 1) * per; ++i) {
            out[i] = z0[i] + eta * (zy[i] - z0[i]) + sigma * eps[i];
        }
    }
    return out;
}

/// One reverse transition from t to an earlier index `to` (to = t-1 for the
/// adjacent step). Without eps this is the deterministic update
/// k z0_hat + m z_t + j z_y; with eps it samples the Gaussian posterior
/// N(eta_to/eta_t z_t + (eta_t - eta_to)/eta_t z0_hat, kappa^2 eta_to/eta_t (eta_t - eta_to)).
template <class S>
Tensor<S> reverse_step_between(const DiffusionSchedule& s, const Tensor<S>& z_t, const Tensor<S>& z0_hat,
                               const Tensor<S>& zy, int t, int to, const Tensor<S>* eps) {
    require_same_shape(z_t.shape(), z0_hat.shape(), "reverse_step(z_t, z0_hat)");
    require_same_shape(z_t.shape(), zy.shape(), "reverse_step(z_t, zy)");
    Tensor<S> out(z_t.shape());
    if (eps == nullptr) {
        const auto c = s.reverse_coeffs_between(t, to);
        const S k = static_cast<S>(c.k), m = static_cast<S>(c.m), j = static_cast<S>(c.j);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = k * z0_hat[i] + m * z_t[i] + j * zy[i];
        return out;
    }
    require_same_shape(z_t.shape(), eps->shape(), "reverse_step(z_t, eps)");
    s.check_step(t);
    if (to < 0 || to >= t) throw ScheduleError("reverse jump target must satisfy 0 <= to < t");
    const double et = s.eta(t), es = s.eta(to);
    const S a = static_cast<S>(es / et);
    const S b = static_cast<S>((et - es) / et);
    const S sd = static_cast<S>(std::sqrt(s.kappa() * s.kappa() * (es / et) * (et - es)));
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * z_t[i] + b * z0_hat[i] + sd * (*eps)[i];
    return out;
}

template <class S>
Tensor<S> reverse_step(const DiffusionSchedule& s, const Tensor<S>& z_t, const Tensor<S>& z0_hat, const Tensor<S>& zy,
                       int t, const std::optional<Tensor<S>>& eps = std::nullopt) {
    return reverse_step_between(s, z_t, z0_hat, zy, t, t - 1, eps ? &*eps : nullptr);
}

template <class S>
Tensor<S> reverse_step(const DiffusionSchedule& s, const Tensor<S>& z_t, const Tensor<S>& z0_hat, const Tensor<S>& zy,
                       int t, const Tensor<S>& eps) {
    return reverse_step_between(s, z_t, z0_hat, zy, t, t - 1, &eps);
}

/// eps_hat = (z_t - (z0_hat + eta_t (zy - z0_hat))) / (sqrt(eta_t) kappa)
template <class S>
Tensor<S> predicted_noise(const DiffusionSchedule& s, const Tensor<S>& z_t, const Tensor<S>& z0_hat,
                          const Tensor<S>& zy, int t) {
    s.check_step(t);
    require_same_shape(z_t.shape(), z0_hat.shape(), "predicted_noise(z_t, z0_hat)");
    require_same_shape(z_t.shape(), zy.shape(), "predicted_noise(z_t, zy)");
    const double eta = s.eta(t);
    const S e = static_cast<S>(eta);
    const S inv = static_cast<S>(1.0 / (std::sqrt(eta) * s.kappa()));
    Tensor<S> out(z_t.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = (z_t[i] - (z0_hat[i] + e * (zy[i] - z0_hat[i]))) * inv;
    return out;
}

/// z_T = zy + sqrt(eta_T) kappa eps. The (1 - eta_T) share of z0 is dropped,
/// so inference needs only the LR conditioning.
template <class S>
Tensor<S> terminal_state(const DiffusionSchedule& s, const Tensor<S>& zy, const Tensor<S>& eps) {
    require_same_shape(zy.shape(), eps.shape(), "terminal_state");
    const S sigma = static_cast<S>(std::sqrt(s.eta(s.steps())) * s.kappa());
    Tensor<S> out(zy.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = zy[i] + sigma * eps[i];
    return out;
}

/// Descending timesteps visited by an n-step sampler: T, ..., 1 for n = T,
/// otherwise n evenly spaced (rounded) indices starting at T.
inline std::vector<int> sampling_timesteps(int total_steps, int n) {
    if (n < 1 || n > total_steps) {
        throw ScheduleError("sampling steps must lie in [1, " + std::to_string(total_steps) + "]");
    }
    std::vector<int> ts;
    ts.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        const double f = n == 1 ? 0.0 : static_cast<double>(i) / (n - 1);
        int t = static_cast<int>(std::lround(total_steps - f * (total_steps - 1)));
        if (!ts.empty() && t >= ts.back()) t = ts.back() - 1;
        ts.push_back(t);
    }
    return ts;
}

struct SamplerOptions {
    bool deterministic = true;
    int steps = 0;  // 0 -> all T steps
};

/// Multi-step rollout from z_T down to a z0 estimate. Stochastic sampling
/// draws its per-step noise from `step_noise` (one tensor per visited step).
template <class S, Denoiser<S> D>
Tensor<S> teacher_sample(const D& denoise, const DiffusionSchedule& s, const Tensor<S>& zy, const Tensor<S>& eps,
                         SamplerOptions opt = {}, std::span<const Tensor<S>> step_noise = {}) {
    NoGradGuard no_grad;
    const auto ts = sampling_timesteps(s.steps(), opt.steps == 0 ? s.steps() : opt.steps);
    if (!opt.deterministic && step_noise.size() < ts.size()) {
        throw std::invalid_argument("teacher_sample: stochastic sampling needs one noise tensor per step");
    }
    Tensor<S> z = terminal_state(s, zy, eps);
    for (std::size_t i = 0; i < ts.size(); ++i) {
        const int t = ts[i];
        const int to = i + 1 < ts.size() ? ts[i + 1] : 0;
        Tensor<S> z0_hat = denoise(z, zy, t);
        z = reverse_step_between(s, z, z0_hat, zy, t, to, opt.deterministic ? nullptr : &step_noise[i]);
    }
    return z;
}

}  // namespace tadsr
