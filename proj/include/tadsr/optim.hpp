#pragma once

#include <cmath>
#include <vector>

#include "tadsr/layers.hpp"

namespace tadsr {

struct AdamOptions {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Adam without weight decay. Parameters without a gradient are skipped.
template <class S>
class Adam {
public:
    Adam(ParamStore<S>& params, AdamOptions opt) : params_(&params), opt_(opt) {
        for (std::size_t i = 0; i < params.size(); ++i) {
            m_.emplace_back(params.value(i).shape());
            v_.emplace_back(params.value(i).shape());
        }
    }

    void step() {
        ++t_;
        const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
        const S b1 = static_cast<S>(opt_.beta1), b2 = static_cast<S>(opt_.beta2);
        const S step_size = static_cast<S>(opt_.lr / bc1);
        const S inv_bc2 = static_cast<S>(1.0 / bc2);
        const S eps = static_cast<S>(opt_.eps);
        for (std::size_t i = 0; i < params_->size(); ++i) {
            auto& node = params_->node(i);
            if (!node.has_grad()) continue;
            auto& m = m_[i];
            auto& v = v_[i];
            for (std::size_t k = 0; k < m.size(); ++k) {
                const S g = node.grad[k];
                m[k] = b1 * m[k] + (S(1) - b1) * g;
                v[k] = b2 * v[k] + (S(1) - b2) * g * g;
                node.value[k] -= step_size * m[k] / (std::sqrt(v[k] * inv_bc2) + eps);
            }
        }
    }

    [[nodiscard]] long steps() const noexcept { return t_; }

private:
    ParamStore<S>* params_;
    AdamOptions opt_;
    std::vector<Tensor<S>> m_, v_;
    long t_ = 0;
};

}  // namespace tadsr
