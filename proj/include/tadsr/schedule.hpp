#pragma once

// Residual-shifting noise schedule: the eta sequence, the noise scale kappa,
// and the closed-form coefficients derived from them. Immutable once built;
// every quantity is kept in double precision.

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace tadsr {

class ScheduleError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

struct ScheduleParams {
    int steps = 15;
    double kappa = 2.0;
    double eta_min = 0.001;
    double eta_max = 0.9999;
    double power = 0.3;

    friend bool operator==(const ScheduleParams&, const ScheduleParams&) = default;
};

/// Coefficients of the deterministic reverse step z_{t-1} = k*z0_hat + m*z_t + j*z_y.
struct ReverseCoeffs {
    double k;
    double m;
    double j;
};

class DiffusionSchedule {
public:
    /// Takes an explicit eta table (index 0..T). Throws unless the table is
    /// strictly increasing and positive with eta[T] < 1. The boundary limits
    /// (eta[0] -> 0, eta[T] -> 1) are reported by satisfies_boundary_limits()
    /// and enforced by training configs, not here.
    DiffusionSchedule(std::vector<double> eta, double kappa) : eta_(std::move(eta)), kappa_(kappa) {
        if (eta_.size() < 3) throw ScheduleError("schedule needs T >= 2");
        if (!(kappa_ > 0) || !std::isfinite(kappa_)) throw ScheduleError("kappa must be positive");
        for (std::size_t t = 1; t < eta_.size(); ++t) {
            if (!(eta_[t] > eta_[t - 1])) {
                throw ScheduleError("eta is not strictly increasing at t=" + std::to_string(t));
            }
        }
        if (!(eta_.front() > 0)) throw ScheduleError("eta[0] must be positive");
        if (!(eta_.back() < 1.0)) throw ScheduleError("eta[T] must be below 1");
        alpha_.assign(eta_.size(), 0.0);
        for (std::size_t t = 1; t < eta_.size(); ++t) alpha_[t] = eta_[t] - eta_[t - 1];
    }

    /// eta[0] <= 1e-3 and eta[T] >= 0.999.
    [[nodiscard]] bool satisfies_boundary_limits() const noexcept {
        return eta_.front() <= 1e-3 && eta_.back() >= 0.999;
    }

    [[nodiscard]] int steps() const noexcept { return static_cast<int>(eta_.size()) - 1; }
    [[nodiscard]] double kappa() const noexcept { return kappa_; }
    [[nodiscard]] const std::vector<double>& eta() const noexcept { return eta_; }
    [[nodiscard]] double eta(int t) const {
        if (t < 0 || t > steps()) throw ScheduleError("timestep " + std::to_string(t) + " outside [0, T]");
        return eta_[static_cast<std::size_t>(t)];
    }
    /// alpha_t = eta_t - eta_{t-1}, defined for 1 <= t <= T.
    [[nodiscard]] double alpha(int t) const {
        check_step(t);
        return alpha_[static_cast<std::size_t>(t)];
    }

    void check_step(int t) const {
        if (t < 1 || t > steps()) {
            throw ScheduleError("timestep " + std::to_string(t) + " outside [1, " + std::to_string(steps()) + "]");
        }
    }

    /// Reverse-step coefficients jumping from t to an earlier index s (s < t).
    [[nodiscard]] ReverseCoeffs reverse_coeffs_between(int t, int s) const {
        check_step(t);
        if (s < 0 || s >= t) throw ScheduleError("reverse jump target must satisfy 0 <= s < t");
        const double et = eta_[static_cast<std::size_t>(t)];
        const double es = eta_[static_cast<std::size_t>(s)];
        const double m = std::sqrt(es / et);
        const double j = es - std::sqrt(es * et);
        return {1.0 - j - m, m, j};
    }

    [[nodiscard]] ReverseCoeffs reverse_coeffs(int t) const { return reverse_coeffs_between(t, t - 1); }

    /// w_t = alpha_t / (2 kappa^2 eta_t eta_{t-1}).
    [[nodiscard]] double loss_weight(int t) const {
        check_step(t);
        const auto i = static_cast<std::size_t>(t);
        return alpha_[i] / (2.0 * kappa_ * kappa_ * eta_[i] * eta_[i - 1]);
    }

    /// omega_2 = (1 / (C*S)) * (1 - eta_t') / (sqrt(eta_t') * kappa).
    [[nodiscard]] double hsd_weight(int t_prime, int channels, int spatial) const {
        check_step(t_prime);
        if (channels < 1 || spatial < 1) throw ScheduleError("hsd_weight: C and S must be >= 1");
        const double e = eta_[static_cast<std::size_t>(t_prime)];
        return (1.0 / (static_cast<double>(channels) * spatial)) * (1.0 - e) / (std::sqrt(e) * kappa_);
    }

    /// Largest t' used for score distillation: max(1, floor(T/5)).
    [[nodiscard]] int small_step_limit() const noexcept { return std::max(1, steps() / 5); }

    friend bool operator==(const DiffusionSchedule&, const DiffusionSchedule&) = default;

private:
    std::vector<double> eta_;
    std::vector<double> alpha_;
    double kappa_;
};

/// eta[t] = eta_min * (eta_max/eta_min)^(((t-1)/(T-1))^p) for t >= 1, eta[0] = eta_min^2/eta_max.
inline DiffusionSchedule build_schedule(int steps, double kappa, double eta_min, double eta_max, double power) {
    if (steps < 2) throw ScheduleError("build_schedule: T must be >= 2");
    if (!(kappa > 0)) throw ScheduleError("build_schedule: kappa must be positive");
    if (!(eta_min > 0) || !(eta_max < 1) || !(eta_min < eta_max)) {
        throw ScheduleError("build_schedule: need 0 < eta_min < eta_max < 1");
    }
    if (!(power > 0)) throw ScheduleError("build_schedule: p must be positive");
    std::vector<double> eta(static_cast<std::size_t>(steps) + 1);
    eta[0] = eta_min * eta_min / eta_max;
    const double ratio = eta_max / eta_min;
    for (int t = 1; t <= steps; ++t) {
        const double u = static_cast<double>(t - 1) / (steps - 1);
        eta[static_cast<std::size_t>(t)] = eta_min * std::pow(ratio, std::pow(u, power));
    }
    return DiffusionSchedule(std::move(eta), kappa);
}

inline DiffusionSchedule build_schedule(const ScheduleParams& p) {
    return build_schedule(p.steps, p.kappa, p.eta_min, p.eta_max, p.power);
}

}  // namespace tadsr
