#include "deviant/optim.hpp"

#include <numbers>

namespace deviant {

void LrSchedule::validate() const {
    if (steps_per_epoch == 0) throw ConfigError("lr schedule: steps_per_epoch must be positive");
    if (total_epochs == 0) throw ConfigError("lr schedule: total_epochs must be positive");
    if (warmup_epochs >= total_epochs) {
        throw ConfigError("lr schedule: warmup_epochs must be smaller than total_epochs");
    }
    if (!(base_lr >= 0) || !(warmup_start_lr >= 0) || !(floor_fraction >= 0)) {
        throw ConfigError("lr schedule: rates must be non-negative");
    }
}

double lr_at(std::size_t step, const LrSchedule& sched) {
    sched.validate();
    const std::size_t total = sched.total_steps();
    const std::size_t warm = sched.warmup_steps();
    if (step >= total) {
        throw ContractError("lr_at: step " + std::to_string(step) + " outside [0, " +
                            std::to_string(total) + ")");
    }
    if (step < warm) {
        return sched.warmup_start_lr + (sched.base_lr - sched.warmup_start_lr) *
                                           static_cast<double>(step) / static_cast<double>(warm);
    }
    const double floor = sched.floor_fraction * sched.base_lr;
    const std::size_t span = total - 1 - warm;
    const double p = span == 0 ? 1.0 : static_cast<double>(step - warm) / static_cast<double>(span);
    return floor + (sched.base_lr - floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * p));
}

}  // namespace deviant
