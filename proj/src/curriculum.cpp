// SPDX-License-Identifier: Apache-2.0
#include "ffprune/curriculum.hpp"

#include <cmath>
#include <iostream>
#include <stdexcept>

namespace ffprune {

void ScheduleConfig::validate() const {
    if (!(alpha_start > 0 && alpha_start < 1))
        throw std::invalid_argument("ScheduleConfig: alpha_start must be in (0, 1)");
    if (!(steepness > 0)) throw std::invalid_argument("ScheduleConfig: steepness must be > 0");
    if (!(midpoint >= 0)) throw std::invalid_argument("ScheduleConfig: midpoint must be >= 0");
    if (!(s_final >= 0 && s_final < 1))
        throw std::invalid_argument("ScheduleConfig: s_final must be in [0, 1)");
    if (n_max < 1) throw std::invalid_argument("ScheduleConfig: n_max must be >= 1");
    if (total_steps >= 1 && total_steps <= static_cast<int>(midpoint))
        std::cerr << "warning: total_steps <= midpoint t0; the schedule will not pass its "
                     "midpoint\n";
}

double alpha(double t, const ScheduleConfig& cfg) {
    if (t < 0) throw std::invalid_argument("alpha: t must be >= 0");
    const double arg = cfg.decreasing_form ? -cfg.steepness * (cfg.midpoint - t)
                                           : -cfg.steepness * (t - cfg.midpoint);
    return cfg.alpha_start + (1.0 - cfg.alpha_start) / (1.0 + std::exp(arg));
}

double target_sparsity(double t, const ScheduleConfig& cfg) { return cfg.s_final * alpha(t, cfg); }

int eval_samples(double t, const ScheduleConfig& cfg) {
    const int n = static_cast<int>(std::floor(cfg.n_max * alpha(t, cfg) + 0.5));
    return std::max(1, n);
}

PolicyParams warm_start(const std::filesystem::path& source_checkpoint,
                        int expected_action_dim) {
    PolicyParams params = load_agent(source_checkpoint);
    if (params.action_dim() != expected_action_dim)
        throw std::invalid_argument(
            "warm_start: action dimension mismatch (checkpoint has " +
            std::to_string(params.action_dim()) + ", expected " +
            std::to_string(expected_action_dim) + ")");
    return params;
}

}  // namespace ffprune
