// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ffprune/agent.hpp"
#include "ffprune/budget_map.hpp"
#include "ffprune/calibrate.hpp"
#include "ffprune/curriculum.hpp"
#include "ffprune/model.hpp"
#include "ffprune/prune.hpp"

namespace ffprune {

/// Everything the search needs, built once per run. Dense perplexities are
/// pre-cached for every eval-sample count the schedule can emit.
struct SearchContext {
    const Model* dense = nullptr;
    std::vector<PrunableUnit> units;
    ImportanceScores scores;
    ScheduleConfig sched;
    PPOConfig ppo;
    double a_min = 0.1, a_max = 1.0, grid = 0.01;
    const EvalSet* eval_set = nullptr;
    std::uint64_t seed = 0;
    // Extra candidate extraction: top-reward episodes remapped at the final
    // sparsity before best-policy selection.
    int revalidate_top_k = 8;

    std::map<int, double> dense_ppl_cache;

    /// Computes Wanda scores and fills the dense PPL cache for every N the
    /// schedule can emit over [0, total_steps], plus n_max. Throws if the
    /// dense PPL is non-finite.
    static SearchContext build(const Model& dense, const EvalSet& eval_set,
                               const ScheduleConfig& sched, const PPOConfig& ppo,
                               std::uint64_t seed, double a_min = 0.1, double a_max = 1.0,
                               double grid = 0.01);

    double dense_ppl(int n_samples) const;
    BudgetSpec budget_for(double sparsity) const;
};

struct SearchResult {
    RetentionPolicy best_policy;   // at P = 1 - s_final
    double best_ppl = 0.0;         // measured at n_max
    std::vector<EpisodeRecord> log;
    PolicyParams agent;
    std::int64_t total_eval_samples = 0;  // sum of per-episode N
    int n_updates = 0;
    double wall_seconds = 0.0;
};

/// Runs T single-step episodes of curriculum -> sample -> map -> prune ->
/// evaluate -> reward -> record, with a PPO update per batch, then extracts
/// the best policy from full-fidelity re-validation of candidates (episodes
/// near the final sparsity, the top-reward episodes remapped at s_final, and
/// the greedy policy mean).
SearchResult run_search(const SearchContext& ctx, int total_steps,
                        std::optional<PolicyParams> warm_agent = std::nullopt);

/// All rates equal to 1 - s_final, snapped to the grid with uniform
/// preferences.
RetentionPolicy uniform_baseline(const SearchContext& ctx, double s_final);

struct AblationRow {
    std::string arm;
    double ppl = 0.0;
    std::int64_t params_kept = 0;
    std::uint64_t seed = 0;
};

/// Four arms at s_final, all at full fidelity: Dense, Uniform+Calib,
/// Search (best policy, no calibration), Search+Calib.
std::vector<AblationRow> run_ablation(const SearchContext& ctx, int total_steps,
                                      double calib_lambda, const EvalSet& calib_set,
                                      int n_calib_seqs);

std::string episodes_to_jsonl(const std::vector<EpisodeRecord>& log);
std::string ablation_to_csv(const std::vector<AblationRow>& rows);

/// Prunes with `policy` and returns full-fidelity (n_max) perplexity.
double evaluate_policy(const SearchContext& ctx, const RetentionPolicy& policy);

}  // namespace ffprune
