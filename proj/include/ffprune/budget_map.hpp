// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace ffprune {

/// Global budget for the policy mapping: preservation ratio, per-rate bounds,
/// precision grid and per-unit parameter weights.
struct BudgetSpec {
    double preservation = 0.7;   // P, fraction of parameters kept
    double a_min = 0.1;
    double a_max = 1.0;
    double grid = 0.01;          // precision step g
    std::vector<double> weights; // w_i, parameters governed by unit i

    double total_weight() const;
    double max_weight() const;
    void validate() const;  // throws std::invalid_argument with the feasible interval
};

/// Budget-exact per-unit retention rates on the precision grid.
struct RetentionPolicy {
    std::vector<double> rates;       // each in [a_min, a_max], multiple of grid
    double preservation = 0.0;       // target P
    double sparsity = 0.0;           // 1 - P
    double achieved_preservation = 0.0;
    double a_min = 0.0, a_max = 1.0;
    double grid = 0.01;
    std::uint64_t action_hash = 0;   // provenance: hash of the raw action
    double sigma_state = 0.0;        // sigma_t the action was sampled at

    void check_invariants(const BudgetSpec& budget) const;  // throws on violation
    std::string to_json() const;
};

RetentionPolicy policy_from_json(const std::string& text);

/// Bounded preferences: a_min + (a_max - a_min) * clip(tanh(a + 1) / 2, 0, 1),
/// applied element-wise. The formula's pre-clip range tops out at 1/2, so the
/// squashed value never exceeds the bounds midpoint; only the ordering of
/// preferences matters downstream.
std::vector<double> squash(const std::vector<double>& raw, double a_min, double a_max);

/// Descending-preference order, ties broken by ascending unit index.
std::vector<int> preference_order(const std::vector<double>& pref);

/// Greedy waterfilling: start every unit at a_min, then raise units to a_max
/// in preference order until the budget P * sum(w) is met exactly. At most one
/// unit ends strictly between the bounds.
std::vector<double> allocate(const std::vector<double>& pref, const BudgetSpec& budget);

/// Rounds rates half-up to the grid, then restores the budget: first by
/// stepping the highest-preference unit (cascading to the next on saturation),
/// then, when the instance is small enough to enumerate, by an exact search
/// over grid adjustments for the minimum achievable budget error.
RetentionPolicy discretize_and_correct(const std::vector<double>& cont,
                                       const BudgetSpec& budget,
                                       const std::vector<double>& pref);

/// Full deterministic mapping: squash -> allocate -> discretize_and_correct.
RetentionPolicy map_action(const std::vector<double>& raw_action, const BudgetSpec& budget);

std::uint64_t hash_action(const std::vector<double>& raw_action);

}  // namespace ffprune
