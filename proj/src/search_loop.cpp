// SPDX-License-Identifier: Apache-2.0
#include "ffprune/search_loop.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "ffprune/util.hpp"

namespace ffprune {

SearchContext SearchContext::build(const Model& dense, const EvalSet& eval_set,
                                   const ScheduleConfig& sched, const PPOConfig& ppo,
                                   std::uint64_t seed, double a_min, double a_max,
                                   double grid) {
    sched.validate();
    ppo.validate();
    if (static_cast<int>(eval_set.seqs.size()) < sched.n_max)
        throw std::invalid_argument("SearchContext: eval set smaller than n_max");

    SearchContext ctx;
    ctx.dense = &dense;
    ctx.eval_set = &eval_set;
    ctx.sched = sched;
    ctx.ppo = ppo;
    ctx.seed = seed;
    ctx.a_min = a_min;
    ctx.a_max = a_max;
    ctx.grid = grid;
    ctx.units = unit_inventory(dense.config);
    // Wanda scores are computed once, on the dense model, from the eval slice.
    const int n_score_seqs = std::min<int>(sched.n_max, static_cast<int>(eval_set.seqs.size()));
    ctx.scores = wanda_scores(dense, collect_activations(dense, eval_set, n_score_seqs,
                                                         all_capture_points(dense)));

    std::set<int> needed{sched.n_max};
    for (int t = 0; t < std::max(1, sched.total_steps); ++t)
        needed.insert(eval_samples(t, sched));
    for (int n : needed) {
        const double ppl = perplexity(dense, eval_set, n);
        if (!std::isfinite(ppl))
            throw std::runtime_error("SearchContext: dense perplexity non-finite at N = " +
                                     std::to_string(n));
        ctx.dense_ppl_cache[n] = ppl;
    }
    return ctx;
}

double SearchContext::dense_ppl(int n_samples) const {
    auto it = dense_ppl_cache.find(n_samples);
    if (it == dense_ppl_cache.end())
        throw std::runtime_error("SearchContext: no cached dense PPL for N = " +
                                 std::to_string(n_samples));
    return it->second;
}

BudgetSpec SearchContext::budget_for(double sparsity) const {
    BudgetSpec budget;
    budget.preservation = 1.0 - sparsity;
    budget.a_min = a_min;
    budget.a_max = a_max;
    budget.grid = grid;
    budget.weights = unit_weights(units);
    return budget;
}

double evaluate_policy(const SearchContext& ctx, const RetentionPolicy& policy) {
    const auto pruned = apply_policy(*ctx.dense, policy, ctx.scores, ctx.units);
    return perplexity(pruned.model, *ctx.eval_set, ctx.sched.n_max);
}

namespace {

struct Candidate {
    RetentionPolicy policy;
    double full_ppl;
    double full_reward;
};

std::string rates_key(const std::vector<double>& rates) {
    std::ostringstream os;
    for (double r : rates) os << llround(r * 1e6) << ",";
    return os.str();
}

}  // namespace

SearchResult run_search(const SearchContext& ctx, int total_steps,
                        std::optional<PolicyParams> warm_agent) {
    if (total_steps < 1) throw std::invalid_argument("run_search: total_steps must be >= 1");
    const auto t_start = std::chrono::steady_clock::now();
    const int n_units = static_cast<int>(ctx.units.size());

    SearchResult result;
    result.agent = warm_agent ? std::move(*warm_agent)
                              : init_agent(n_units, sub_seed(ctx.seed, "agent"));
    if (result.agent.action_dim() != n_units)
        throw std::invalid_argument("run_search: agent action dimension does not match units");
    AgentOptimizer opt(result.agent);
    auto rng = make_rng(ctx.seed, "episodes");

    std::map<std::string, Candidate> candidates;
    const double full_dense = ctx.dense_ppl(ctx.sched.n_max);
    auto consider = [&](const RetentionPolicy& policy) {
        const auto key = rates_key(policy.rates);
        if (candidates.count(key)) return;
        const double ppl = evaluate_policy(ctx, policy);
        candidates[key] = {policy, ppl, compute_reward(full_dense, ppl)};
    };

    std::vector<EpisodeRecord> batch;
    std::vector<std::pair<double, std::vector<double>>> top_actions;  // (reward, raw action)

    for (int t = 0; t < total_steps; ++t) {
        const double sigma = target_sparsity(t, ctx.sched);
        const int n_eval = eval_samples(t, ctx.sched);
        auto [action, logp] = sample_action(result.agent, sigma, rng);
        const double value = value_estimate(result.agent, sigma);

        const auto budget = ctx.budget_for(sigma);
        RetentionPolicy policy = map_action(action, budget);
        policy.sigma_state = sigma;
        policy.check_invariants(budget);  // logger-side re-check, not trusted

        const auto pruned = apply_policy(*ctx.dense, policy, ctx.scores, ctx.units);
        const double ppl = perplexity(pruned.model, *ctx.eval_set, n_eval);
        const double dense_ppl_n = ctx.dense_ppl(n_eval);
        const double reward = compute_reward(dense_ppl_n, ppl);

        EpisodeRecord rec;
        rec.step = t;
        rec.sigma = sigma;
        rec.alpha = alpha(t, ctx.sched);
        rec.raw_action = action;
        rec.rates = policy.rates;
        rec.n_eval = n_eval;
        rec.ppl = ppl;
        rec.ppl_dense = dense_ppl_n;
        rec.reward = reward;
        rec.logp = logp;
        rec.value = value;
        result.log.push_back(rec);
        result.total_eval_samples += n_eval;
        batch.push_back(rec);

        // Candidate bookkeeping: episodes already within one grid step of the
        // final sparsity get re-validated directly; the best raw actions are
        // remembered for remapping at s_final after the run.
        if (std::abs(sigma - ctx.sched.s_final) <= ctx.grid + 1e-12) consider(policy);
        top_actions.emplace_back(reward, action);

        if (static_cast<int>(batch.size()) == ctx.ppo.batch_episodes) {
            ppo_update(result.agent, opt, batch, ctx.ppo);
            ++result.n_updates;
            batch.clear();
        }
    }

    // Remap the highest-reward raw actions at the final sparsity.
    const auto final_budget = ctx.budget_for(ctx.sched.s_final);
    std::stable_sort(top_actions.begin(), top_actions.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    const int k = std::min<int>(ctx.revalidate_top_k, static_cast<int>(top_actions.size()));
    for (int i = 0; i < k; ++i) {
        RetentionPolicy p = map_action(top_actions[static_cast<std::size_t>(i)].second,
                                       final_budget);
        p.sigma_state = ctx.sched.s_final;
        consider(p);
    }
    // Greedy policy mean at sigma = s_final.
    {
        const Vector mean = result.agent.policy.forward(ctx.sched.s_final);
        std::vector<double> greedy(mean.data(), mean.data() + mean.size());
        RetentionPolicy p = map_action(greedy, final_budget);
        p.sigma_state = ctx.sched.s_final;
        consider(p);
    }

    const Candidate* best = nullptr;
    for (const auto& [key, cand] : candidates)
        if (!best || cand.full_reward > best->full_reward) best = &cand;
    if (!best) throw std::runtime_error("run_search: no candidate policy produced");
    result.best_policy = best->policy;
    result.best_ppl = best->full_ppl;

    result.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    return result;
}

RetentionPolicy uniform_baseline(const SearchContext& ctx, double s_final) {
    const auto budget = ctx.budget_for(s_final);
    const std::vector<double> uniform_pref(ctx.units.size(), 0.5);
    const std::vector<double> cont(ctx.units.size(), budget.preservation);
    RetentionPolicy p = discretize_and_correct(cont, budget, uniform_pref);
    p.sigma_state = s_final;
    return p;
}

std::vector<AblationRow> run_ablation(const SearchContext& ctx, int total_steps,
                                      double calib_lambda, const EvalSet& calib_set,
                                      int n_calib_seqs) {
    std::vector<AblationRow> rows;
    const auto total_params = ctx.dense->param_count();
    const int d_model = ctx.dense->config.d_model;
    const int hd = ctx.dense->head_dim;

    rows.push_back({"dense", ctx.dense_ppl(ctx.sched.n_max), total_params, ctx.seed});

    auto eval_arm = [&](const std::string& name, const RetentionPolicy& policy, bool calibrate) {
        auto pruned = apply_policy(*ctx.dense, policy, ctx.scores, ctx.units);
        if (calibrate) calibrate_model(pruned, *ctx.dense, calib_set, n_calib_seqs, calib_lambda);
        const double ppl = perplexity(pruned.model, *ctx.eval_set, ctx.sched.n_max);
        // kept params of prunable units + everything never pruned
        const auto dense_prunable =
            static_cast<std::int64_t>(ctx.budget_for(0.0).total_weight());
        const auto kept = pruned.mask.kept_params(ctx.units, d_model, hd);
        rows.push_back({name, ppl, total_params - dense_prunable + kept, ctx.seed});
    };

    eval_arm("uniform_calib", uniform_baseline(ctx, ctx.sched.s_final), true);
    const auto search = run_search(ctx, total_steps);
    eval_arm("search", search.best_policy, false);
    eval_arm("search_calib", search.best_policy, true);
    return rows;
}

std::string episodes_to_jsonl(const std::vector<EpisodeRecord>& log) {
    std::string out;
    for (const auto& r : log) {
        nlohmann::ordered_json j;
        j["step"] = r.step;
        j["sigma"] = r.sigma;
        j["alpha"] = r.alpha;
        j["n_eval"] = r.n_eval;
        j["raw_action"] = r.raw_action;
        j["rates"] = r.rates;
        if (std::isfinite(r.ppl))
            j["ppl"] = r.ppl;
        else
            j["ppl"] = nullptr;  // non-finite marker
        j["ppl_dense"] = r.ppl_dense;
        j["reward"] = r.reward;
        j["logp"] = r.logp;
        j["value"] = r.value;
        out += j.dump();
        out += "\n";
    }
    return out;
}

std::string ablation_to_csv(const std::vector<AblationRow>& rows) {
    std::ostringstream os;
    os << "arm,ppl,params_kept,seed\n";
    os.setf(std::ios::fmtflags(0), std::ios::floatfield);
    os.precision(17);
    for (const auto& r : rows)
        os << r.arm << "," << r.ppl << "," << r.params_kept << "," << r.seed << "\n";
    return os.str();
}

}  // namespace ffprune
