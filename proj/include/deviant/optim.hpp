#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "deviant/errors.hpp"
#include "deviant/tensor.hpp"

namespace deviant {

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double weight_decay = 1e-4;
    double eps = 1e-8;
    bool amsgrad = true;
};

template <typename T>
struct AdamWSlot {
    std::vector<T> m;
    std::vector<T> v;
    std::vector<T> v_max;
};

// AdamW with decoupled weight decay and optional AMSGrad, in the bias-corrected
// form used by PyTorch:
//   p <- p - lr*wd*p
//   m <- b1*m + (1-b1)*g,  v <- b2*v + (1-b2)*g^2,  v_max <- max(v_max, v)
//   p <- p - lr/(1-b1^t) * m / (sqrt(v_max)/sqrt(1-b2^t) + eps)
template <typename T>
class AdamW {
public:
    explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

    const AdamWConfig& config() const { return cfg_; }
    std::uint64_t steps() const { return t_; }
    const std::vector<AdamWSlot<T>>& slots() const { return slots_; }

    // Restores state saved from a previous run (checkpoint resume).
    void restore(std::uint64_t t, std::vector<AdamWSlot<T>> slots) {
        t_ = t;
        slots_ = std::move(slots);
    }

    // Updates every tensor in place from its .grad. Tensors without a gradient
    // are treated as having a zero gradient. If any gradient is non-finite the
    // whole step is rejected before anything is modified.
    void step(std::span<Tensor<T>* const> params, double lr) {
        if (!slots_.empty() && slots_.size() != params.size()) {
            throw DimensionError("adamw: parameter count changed between steps");
        }
        for (std::size_t i = 0; i < params.size(); ++i) {
            const Tensor<T>& p = *params[i];
            if (!slots_.empty() && slots_[i].m.size() != p.numel()) {
                throw DimensionError("adamw: state shape does not match parameter " +
                                     std::to_string(i));
            }
            if (!p.grad) continue;
            if (p.grad->size() != p.numel()) {
                throw DimensionError("adamw: gradient shape does not match parameter " +
                                     std::to_string(i));
            }
            for (const T g : *p.grad) {
                if (!std::isfinite(g)) {
                    throw NumericError("adamw: non-finite gradient in parameter " +
                                       std::to_string(i) + "; step rejected");
                }
            }
        }
        if (slots_.empty()) {
            slots_.resize(params.size());
            for (std::size_t i = 0; i < params.size(); ++i) {
                const std::size_t n = params[i]->numel();
                slots_[i] = {std::vector<T>(n, T(0)), std::vector<T>(n, T(0)),
                             std::vector<T>(n, T(0))};
            }
        }
        ++t_;
        const double b1 = cfg_.beta1, b2 = cfg_.beta2;
        const double bc1 = 1.0 - std::pow(b1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(b2, static_cast<double>(t_));
        const T step_size = static_cast<T>(lr / bc1);
        const T bc2_sqrt = static_cast<T>(std::sqrt(bc2));
        const T decay = static_cast<T>(1.0 - lr * cfg_.weight_decay);
        for (std::size_t i = 0; i < params.size(); ++i) {
            Tensor<T>& p = *params[i];
            AdamWSlot<T>& s = slots_[i];
            for (std::size_t j = 0; j < p.numel(); ++j) {
                const T g = p.grad ? (*p.grad)[j] : T(0);
                p.data[j] *= decay;
                s.m[j] = T(b1) * s.m[j] + T(1 - b1) * g;
                s.v[j] = T(b2) * s.v[j] + T(1 - b2) * g * g;
                T second = s.v[j];
                if (cfg_.amsgrad) {
                    if (s.v[j] > s.v_max[j]) s.v_max[j] = s.v[j];
                    second = s.v_max[j];
                }
                const T denom = std::sqrt(second) / bc2_sqrt + T(cfg_.eps);
                p.data[j] -= step_size * s.m[j] / denom;
            }
        }
    }

private:
    AdamWConfig cfg_;
    std::uint64_t t_ = 0;
    std::vector<AdamWSlot<T>> slots_;
};

// Linear warm-up followed by cosine decay to floor_fraction * base_lr.
struct LrSchedule {
    double base_lr = 1e-3;
    double warmup_start_lr = 1e-5;
    std::size_t warmup_epochs = 2;
    std::size_t total_epochs = 20;
    double floor_fraction = 0.01;
    std::size_t steps_per_epoch = 1;

    std::size_t total_steps() const { return total_epochs * steps_per_epoch; }
    std::size_t warmup_steps() const { return warmup_epochs * steps_per_epoch; }
    void validate() const;
};

double lr_at(std::size_t step, const LrSchedule& sched);

}  // namespace deviant
