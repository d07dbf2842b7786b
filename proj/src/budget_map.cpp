// SPDX-License-Identifier: Apache-2.0
#include "ffprune/budget_map.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <stdexcept>

#include <json.hpp>

#include "ffprune/util.hpp"

namespace ffprune {

namespace {
constexpr double kTol = 1e-9;
// Instances with at most this many grid combinations get an exact correction
// search on top of the greedy cascade.
constexpr double kEnumerationCap = 300000.0;
}  // namespace

double BudgetSpec::total_weight() const {
    return std::accumulate(weights.begin(), weights.end(), 0.0);
}

double BudgetSpec::max_weight() const {
    return weights.empty() ? 0.0 : *std::max_element(weights.begin(), weights.end());
}

void BudgetSpec::validate() const {
    if (weights.empty()) throw std::invalid_argument("BudgetSpec: no unit weights");
    for (double w : weights)
        if (!(w > 0)) throw std::invalid_argument("BudgetSpec: unit weights must be > 0");
    if (!(a_min > 0 && a_min < a_max && a_max <= 1.0))
        throw std::invalid_argument("BudgetSpec: need 0 < a_min < a_max <= 1");
    if (!(grid > 0)) throw std::invalid_argument("BudgetSpec: grid must be > 0");
    if (a_max - a_min < grid - 1e-12)
        throw std::invalid_argument("BudgetSpec: a_max - a_min must be >= grid");
    // Both bounds must sit on the grid, or rates cannot be grid multiples and
    // bounded at the same time.
    auto on_grid = [&](double x) { return std::abs(x - std::round(x / grid) * grid) <= kTol; };
    if (!on_grid(a_min) || !on_grid(a_max))
        throw std::invalid_argument("BudgetSpec: a_min and a_max must be multiples of grid");
    if (!(preservation >= a_min - kTol && preservation <= a_max + kTol))
        throw std::invalid_argument(
            "BudgetSpec: infeasible preservation " + std::to_string(preservation) +
            "; feasible interval is [" + std::to_string(a_min) + ", " + std::to_string(a_max) +
            "]");
}

void RetentionPolicy::check_invariants(const BudgetSpec& budget) const {
    if (rates.size() != budget.weights.size())
        throw std::runtime_error("RetentionPolicy: dimension mismatch");
    for (double r : rates) {
        if (r < budget.a_min - kTol || r > budget.a_max + kTol)
            throw std::runtime_error("RetentionPolicy: rate out of bounds");
        if (std::abs(r - std::round(r / budget.grid) * budget.grid) > kTol)
            throw std::runtime_error("RetentionPolicy: rate off the precision grid");
    }
    double sum = 0.0;
    for (std::size_t i = 0; i < rates.size(); ++i) sum += rates[i] * budget.weights[i];
    const double target = budget.preservation * budget.total_weight();
    if (std::abs(sum - target) > budget.grid * budget.max_weight() + kTol)
        throw std::runtime_error("RetentionPolicy: budget error exceeds g * max(w)");
}

std::vector<double> squash(const std::vector<double>& raw, double a_min, double a_max) {
    std::vector<double> out(raw.size());
    for (std::size_t i = 0; i < raw.size(); ++i) {
        if (!std::isfinite(raw[i])) throw std::invalid_argument("squash: non-finite action");
        const double t = std::clamp(std::tanh(raw[i] + 1.0) / 2.0, 0.0, 1.0);
        out[i] = a_min + (a_max - a_min) * t;
    }
    return out;
}

std::vector<int> preference_order(const std::vector<double>& pref) {
    std::vector<int> idx(pref.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
        return pref[static_cast<std::size_t>(a)] > pref[static_cast<std::size_t>(b)];
    });
    return idx;
}

std::vector<double> allocate(const std::vector<double>& pref, const BudgetSpec& budget) {
    budget.validate();
    if (pref.size() != budget.weights.size())
        throw std::invalid_argument("allocate: preference dimension mismatch");
    const double total_w = budget.total_weight();
    std::vector<double> rates(pref.size(), budget.a_min);
    double b_rem = (budget.preservation - budget.a_min) * total_w;
    for (int i : preference_order(pref)) {
        if (b_rem <= kTol * total_w) break;
        const double w = budget.weights[static_cast<std::size_t>(i)];
        const double delta_max = (budget.a_max - rates[static_cast<std::size_t>(i)]) * w;
        const double delta = std::min(b_rem, delta_max);
        rates[static_cast<std::size_t>(i)] += delta / w;
        b_rem -= delta;
    }
    return rates;
}

RetentionPolicy discretize_and_correct(const std::vector<double>& cont,
                                       const BudgetSpec& budget,
                                       const std::vector<double>& pref) {
    budget.validate();
    const std::size_t n = budget.weights.size();
    if (cont.size() != n || pref.size() != n)
        throw std::invalid_argument("discretize_and_correct: dimension mismatch");
    const double g = budget.grid;
    const double target = budget.preservation * budget.total_weight();

    // Round half-up to the grid, clamp to bounds.
    std::vector<double> rates(n);
    for (std::size_t i = 0; i < n; ++i) {
        double r = std::floor(cont[i] / g + 0.5) * g;
        rates[i] = std::clamp(r, budget.a_min, budget.a_max);
    }
    auto budget_err = [&](const std::vector<double>& r) {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += r[i] * budget.weights[i];
        return s - target;
    };

    // Greedy cascade: step the highest-preference unit toward balance; move to
    // the next unit once stepping the current one stops helping.
    double err = budget_err(rates);
    for (int u : preference_order(pref)) {
        while (std::abs(err) > kTol) {
            const double step = (err > 0) ? -g : g;
            const double cand = rates[static_cast<std::size_t>(u)] + step;
            if (cand < budget.a_min - kTol || cand > budget.a_max + kTol) break;
            const double new_err = err + step * budget.weights[static_cast<std::size_t>(u)];
            if (std::abs(new_err) >= std::abs(err) - kTol) break;
            rates[static_cast<std::size_t>(u)] = cand;
            err = new_err;
        }
        if (std::abs(err) <= kTol) break;
    }

    // Exact correction on small instances: enumerate grid adjustments around
    // the rounded policy and keep the minimum-|error| one (fewest grid moves
    // on ties). The reachable set covers the whole grid, so this attains the
    // true minimum.
    if (std::abs(err) > kTol) {
        std::vector<int> down(n), up(n);
        double combos = 1.0;
        for (std::size_t i = 0; i < n; ++i) {
            down[i] = static_cast<int>(std::round((rates[i] - budget.a_min) / g));
            up[i] = static_cast<int>(std::round((budget.a_max - rates[i]) / g));
            combos *= static_cast<double>(down[i] + up[i] + 1);
            if (combos > kEnumerationCap) break;
        }
        if (combos <= kEnumerationCap) {
            const auto order = preference_order(pref);
            std::vector<int> moves(n, 0), best_moves(n, 0);
            double best_err = std::abs(err);
            int best_total = 0;
            auto rec = [&](auto&& self, std::size_t depth, double signed_err,
                           int cur_total) -> void {
                if (depth == n) {
                    const double a = std::abs(signed_err);
                    if (a < best_err - kTol || (a <= best_err + kTol && cur_total < best_total)) {
                        best_err = std::min(best_err, a);
                        best_total = cur_total;
                        best_moves = moves;
                    }
                    return;
                }
                const int u = order[depth];
                const double w = budget.weights[static_cast<std::size_t>(u)];
                for (int s = -down[static_cast<std::size_t>(u)];
                     s <= up[static_cast<std::size_t>(u)]; ++s) {
                    moves[static_cast<std::size_t>(u)] = s;
                    self(self, depth + 1, signed_err + s * g * w, cur_total + std::abs(s));
                }
                moves[static_cast<std::size_t>(u)] = 0;
            };
            rec(rec, 0, err, 0);
            if (best_err < std::abs(err) - kTol) {
                for (std::size_t i = 0; i < n; ++i) rates[i] += best_moves[i] * g;
                err = budget_err(rates);
            }
        }
    }

    if (std::abs(err) > g * budget.max_weight() + kTol)
        throw std::runtime_error("discretize_and_correct: residual budget error " +
                                 std::to_string(err) + " exceeds g * max(w)");

    // Snap away float dust so rates are exact grid multiples.
    for (std::size_t i = 0; i < n; ++i)
        rates[i] = std::clamp(std::round(rates[i] / g) * g, budget.a_min, budget.a_max);

    RetentionPolicy policy;
    policy.rates = std::move(rates);
    policy.preservation = budget.preservation;
    policy.sparsity = 1.0 - budget.preservation;
    policy.a_min = budget.a_min;
    policy.a_max = budget.a_max;
    policy.grid = g;
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) sum += policy.rates[i] * budget.weights[i];
    policy.achieved_preservation = sum / budget.total_weight();
    policy.check_invariants(budget);
    return policy;
}

RetentionPolicy map_action(const std::vector<double>& raw_action, const BudgetSpec& budget) {
    const auto pref = squash(raw_action, budget.a_min, budget.a_max);
    const auto cont = allocate(pref, budget);
    RetentionPolicy policy = discretize_and_correct(cont, budget, pref);
    policy.action_hash = hash_action(raw_action);
    return policy;
}

std::uint64_t hash_action(const std::vector<double>& raw_action) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (double v : raw_action) {
        std::uint64_t bits;
        std::memcpy(&bits, &v, sizeof(bits));
        h = mix64(h ^ bits);
    }
    return h;
}

std::string RetentionPolicy::to_json() const {
    nlohmann::ordered_json j;
    j["rates"] = rates;
    j["preservation"] = preservation;
    j["sparsity"] = sparsity;
    j["achieved_preservation"] = achieved_preservation;
    j["bounds"] = {a_min, a_max};
    j["grid"] = grid;
    j["sigma_state"] = sigma_state;
    j["action_hash"] = action_hash;
    return j.dump(2) + "\n";
}

RetentionPolicy policy_from_json(const std::string& text) {
    const auto j = nlohmann::json::parse(text);
    RetentionPolicy p;
    p.rates = j.at("rates").get<std::vector<double>>();
    p.preservation = j.at("preservation").get<double>();
    p.sparsity = j.at("sparsity").get<double>();
    p.achieved_preservation = j.value("achieved_preservation", 0.0);
    p.a_min = j.at("bounds").at(0).get<double>();
    p.a_max = j.at("bounds").at(1).get<double>();
    p.grid = j.at("grid").get<double>();
    p.sigma_state = j.value("sigma_state", 0.0);
    p.action_hash = j.value("action_hash", std::uint64_t{0});
    return p;
}

}  // namespace ffprune
