#pragma once

// Adam with optional global gradient-norm clipping.
//
// Parameters are registered once; each slot keeps first/second moment
// buffers sized to the parameter. step() reads the accumulated gradient,
// applies the bias-corrected update in place, and leaves the gradient
// untouched (callers zero it explicitly between steps).

#include <cmath>
#include <cstddef>
#include <vector>

#include "vivim/tensor.hpp"

namespace vivim {

class Adam {
  public:
    Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void add_param(Tensor p) {
        if (!p.defined()) throw Error("Adam::add_param: undefined tensor");
        if (!p.requires_grad()) throw Error("Adam::add_param: parameter does not require grad");
        Slot s;
        s.param = p;
        s.m.assign(p.numel(), 0.0);
        s.v.assign(p.numel(), 0.0);
        slots_.push_back(std::move(s));
    }

    std::size_t n_params() const { return slots_.size(); }

    std::size_t n_scalars() const {
        std::size_t n = 0;
        for (const auto& s : slots_) n += s.param.numel();
        return n;
    }

    // Global L2 norm over all registered gradients; scales them in place
    // when the norm exceeds max_norm. Returns the pre-clip norm.
    double clip_global_norm(double max_norm) {
        double sq = 0.0;
        for (auto& s : slots_) {
            if (!s.param.has_grad()) continue;
            const double* g = s.param.grad_data();
            for (std::size_t i = 0; i < s.param.numel(); ++i) sq += g[i] * g[i];
        }
        const double norm = std::sqrt(sq);
        if (!std::isfinite(norm)) throw NumericError("clip_global_norm: non-finite gradient norm");
        if (norm > max_norm && norm > 0.0) {
            const double scale = max_norm / norm;
            for (auto& s : slots_) {
                if (!s.param.has_grad()) continue;
                double* g = s.param.mut_grad();
                for (std::size_t i = 0; i < s.param.numel(); ++i) g[i] *= scale;
            }
        }
        return norm;
    }

    void step(double lr) {
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (auto& s : slots_) {
            if (!s.param.has_grad()) continue;
            const double* g = s.param.grad_data();
            double* w = s.param.mut_data();
            for (std::size_t i = 0; i < s.param.numel(); ++i) {
                s.m[i] = beta1_ * s.m[i] + (1.0 - beta1_) * g[i];
                s.v[i] = beta2_ * s.v[i] + (1.0 - beta2_) * g[i] * g[i];
                const double mhat = s.m[i] / bc1;
                const double vhat = s.v[i] / bc2;
                w[i] -= lr * mhat / (std::sqrt(vhat) + eps_);
            }
        }
    }

    void zero_grad() {
        for (auto& s : slots_) s.param.zero_grad();
    }

  private:
    struct Slot {
        Tensor param;
        std::vector<double> m, v;
    };

    std::vector<Slot> slots_;
    double beta1_, beta2_, eps_;
    std::size_t t_ = 0;
};

}  // namespace vivim
