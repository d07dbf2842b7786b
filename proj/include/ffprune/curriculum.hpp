// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>

#include "ffprune/agent.hpp"

namespace ffprune {

/// Parameters of the unified sigmoid progression and the two curricula it
/// drives (target sparsity and evaluation fidelity).
struct ScheduleConfig {
    double alpha_start = 0.3;  // in (0, 1)
    double steepness = 0.01;   // k > 0
    double midpoint = 500.0;   // t0 >= 0
    double s_final = 0.3;      // final sparsity, in [0, 1)
    int n_max = 32;            // max eval samples, >= 1
    int total_steps = 600;     // T
    // Reproduces the decreasing published form of the schedule (exponent sign
    // flipped) for comparison; the default is the increasing reading.
    bool decreasing_form = false;

    void validate() const;  // throws; warns on stderr when T <= t0
};

/// alpha(t) = alpha_start + (1 - alpha_start) / (1 + exp(-k (t - t0))).
/// Strictly increasing, -> 1 as t -> infinity.
double alpha(double t, const ScheduleConfig& cfg);

/// sigma_t = s_final * alpha(t).
double target_sparsity(double t, const ScheduleConfig& cfg);

/// max(1, round-half-up(n_max * alpha(t))).
int eval_samples(double t, const ScheduleConfig& cfg);

/// Warm start for a higher-sparsity search: loads the agent checkpoint and
/// verifies the action dimension. The returned parameters are bit-identical
/// to the source; optimizer state is the caller's to re-create.
PolicyParams warm_start(const std::filesystem::path& source_checkpoint, int expected_action_dim);

}  // namespace ffprune
