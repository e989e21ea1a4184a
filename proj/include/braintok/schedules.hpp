#pragma once

#include <cmath>

#include "braintok/errors.hpp"
#include "braintok/objective.hpp"

namespace braintok {

struct ScheduleConfig {
  double base_lr = 7e-4;
  double warmup_fraction = 0.03;  // linear warmup, then cosine decay to 0
  double weight_decay_start = 0.05;
  double weight_decay_end = 0.3;
  double teacher_momentum_start = 0.99;
  double teacher_momentum_end = 0.9999;

  void validate() const {
    if (base_lr < 0.0) throw ConfigError("schedules: base_lr must be >= 0");
    if (warmup_fraction < 0.0 || warmup_fraction >= 1.0)
      throw ConfigError("schedules: warmup_fraction must be in [0, 1)");
    if (weight_decay_start < 0.0 || weight_decay_end < weight_decay_start)
      throw ConfigError("schedules: weight decay range must be non-decreasing");
    if (teacher_momentum_start < 0.0 || teacher_momentum_start > 1.0 ||
        teacher_momentum_end < teacher_momentum_start || teacher_momentum_end > 1.0)
      throw ConfigError("schedules: teacher momentum range invalid");
  }
};

struct ScheduleValues {
  double lr = 0.0;
  double wd = 0.0;
  double alpha = 0.0;
  double ttr_w = 0.0;
};

// Half-cosine from 1 at s=0 to 0 at s=span.
inline double cosine_ramp(double s, double span) {
  if (span <= 0.0) return 0.0;
  return 0.5 * (1.0 + std::cos(M_PI * s / span));
}

inline ScheduleValues schedules_at(double step, double total_steps,
                                   const ScheduleConfig& cfg,
                                   const ObjectiveConfig& objective) {
  if (step < 0.0 || step > total_steps)
    throw ConfigError("schedules_at: step outside [0, total_steps]");
  ScheduleValues v;
  const double warmup_end = cfg.warmup_fraction * total_steps;
  if (step < warmup_end) {
    v.lr = cfg.base_lr * step / warmup_end;
  } else {
    v.lr = cfg.base_lr * cosine_ramp(step - warmup_end, total_steps - warmup_end);
  }
  v.wd = cfg.weight_decay_end +
         (cfg.weight_decay_start - cfg.weight_decay_end) * cosine_ramp(step, total_steps);
  v.alpha = cfg.teacher_momentum_end +
            (cfg.teacher_momentum_start - cfg.teacher_momentum_end) *
                cosine_ramp(step, total_steps);
  v.ttr_w = ttr_weight(step, total_steps, objective);
  return v;
}

}  // namespace braintok
