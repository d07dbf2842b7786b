// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <fstream>

#include "ffprune/agent.hpp"
#include "ffprune/util.hpp"
#include "test_util.hpp"

using namespace ffprune;

namespace {

struct ParamRef {
    Matrix* mat = nullptr;
    Vector* vec = nullptr;
    int idx = 0;
    double* slot() { return mat ? mat->data() + idx : vec->data() + idx; }
};

std::vector<ParamRef> sample_coords(PolicyParams& p, int per_container) {
    std::vector<ParamRef> out;
    p.for_each_param(
        [&](Matrix& w) {
            for (int k = 0; k < per_container; ++k)
                out.push_back({&w, nullptr, static_cast<int>((w.size() * (2 * k + 1)) /
                                                            (2 * per_container))});
        },
        [&](Vector& v) {
            for (int k = 0; k < std::min<int>(per_container, static_cast<int>(v.size())); ++k)
                out.push_back({nullptr, &v, static_cast<int>((v.size() * (2 * k + 1)) /
                                                             (2 * per_container))});
        });
    return out;
}

std::vector<EpisodeRecord> make_batch(const PolicyParams& sampler, const PolicyParams& current,
                                      int n_records, std::uint64_t seed) {
    auto rng = make_rng(seed, "batch");
    std::uniform_real_distribution<double> U(0.05, 0.45);
    std::vector<EpisodeRecord> batch;
    for (int i = 0; i < n_records; ++i) {
        EpisodeRecord rec;
        rec.step = i;
        rec.sigma = U(rng);
        auto [action, logp] = sample_action(sampler, rec.sigma, rng);
        rec.raw_action = action;
        rec.logp = logp;  // "old" log-prob from the sampler parameters
        rec.reward = 0.5 + U(rng);
        rec.value = value_estimate(current, rec.sigma);
        batch.push_back(std::move(rec));
    }
    return batch;
}

}  // namespace

TEST_CASE("compute_reward oracles") {
    CHECK(compute_reward(10.0, 5.0) == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(compute_reward(3.0, 3.0) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(compute_reward(10.0, std::numeric_limits<double>::infinity()) == 0.0);
    CHECK(compute_reward(10.0, std::nan("")) == 0.0);
    CHECK_THROWS_AS(compute_reward(std::numeric_limits<double>::infinity(), 5.0),
                    std::invalid_argument);
    CHECK_THROWS_AS(compute_reward(0.5, 5.0), std::invalid_argument);
}

TEST_CASE("clipped surrogate oracles") {
    CHECK(clipped_surrogate(1.5, 1.0, 0.2) == doctest::Approx(1.2).epsilon(1e-12));
    CHECK(clipped_surrogate(0.5, -1.0, 0.2) == doctest::Approx(-0.8).epsilon(1e-12));
    CHECK(clipped_surrogate(1.1, 2.0, 0.2) == doctest::Approx(2.2).epsilon(1e-12));
    CHECK(clipped_surrogate(0.9, -3.0, 0.2) == doctest::Approx(-2.7).epsilon(1e-12));
    CHECK(clipped_surrogate(1.0, 0.0, 0.2) == 0.0);
}

TEST_CASE("advantages: small batches raw, large batches normalized") {
    EpisodeRecord a, b;
    a.reward = 2.0;
    a.value = 0.5;
    b.reward = 1.0;
    b.value = 0.5;
    auto small = advantages({a, b});
    CHECK(small[0] == doctest::Approx(1.5).epsilon(1e-12));
    CHECK(small[1] == doctest::Approx(0.5).epsilon(1e-12));

    std::vector<EpisodeRecord> batch(5);
    for (int i = 0; i < 5; ++i) {
        batch[static_cast<std::size_t>(i)].reward = i * 0.7;
        batch[static_cast<std::size_t>(i)].value = 0.3;
    }
    auto norm = advantages(batch);
    double mean = 0.0, var = 0.0;
    for (double x : norm) mean += x / 5;
    for (double x : norm) var += (x - mean) * (x - mean) / 5;
    CHECK(mean == doctest::Approx(0.0).epsilon(1e-10));
    CHECK(var == doctest::Approx(1.0).epsilon(1e-10));
}

TEST_CASE("sampling is deterministic and consistent with action_log_prob") {
    auto p = init_agent(4, 11, 16, 8);
    auto r1 = make_rng(5, "s");
    auto r2 = make_rng(5, "s");
    auto [a1, lp1] = sample_action(p, 0.25, r1);
    auto [a2, lp2] = sample_action(p, 0.25, r2);
    CHECK(a1 == a2);
    CHECK(lp1 == lp2);
    CHECK(action_log_prob(p, 0.25, a1) == doctest::Approx(lp1).epsilon(1e-12));
    CHECK_THROWS_AS(sample_action(p, 1.0, r1), std::invalid_argument);
    CHECK_THROWS_AS(sample_action(p, -0.1, r1), std::invalid_argument);
}

TEST_CASE("sampled spread follows exp(log_std)") {
    auto p = init_agent(1, 3, 8, 8);
    p.log_std.setConstant(std::log(0.1));
    const Vector mean = p.policy.forward(0.3);
    auto rng = make_rng(9, "spread");
    double s2 = 0.0;
    const int n = 4000;
    for (int i = 0; i < n; ++i) {
        auto [a, lp] = sample_action(p, 0.3, rng);
        s2 += (a[0] - mean(0)) * (a[0] - mean(0));
    }
    CHECK(std::sqrt(s2 / n) == doctest::Approx(0.1).epsilon(0.15));
}

TEST_CASE("ppo_loss gradient matches finite differences") {
    auto sampler = init_agent(3, 21, 8, 8);
    auto current = sampler;
    // Nudge the current parameters so importance ratios sit away from 1 and
    // away from the clip kinks.
    {
        auto rng = make_rng(4, "nudge");
        std::normal_distribution<double> nd(0.0, 0.01);
        current.for_each_param(
            [&](Matrix& m) {
                for (int i = 0; i < m.size(); ++i) m.data()[i] += nd(rng);
            },
            [&](Vector& v) {
                for (int i = 0; i < v.size(); ++i) v.data()[i] += nd(rng);
            });
    }
    auto batch = make_batch(sampler, current, 5, 2);
    const auto advs = advantages(batch);
    PPOConfig cfg;
    cfg.entropy_coef = 0.01;

    PolicyParams grads = zeros_like(current);
    ppo_loss(current, batch, advs, cfg, &grads);

    auto coords = sample_coords(current, 2);
    auto gcoords = sample_coords(grads, 2);
    REQUIRE(coords.size() == gcoords.size());
    const double h = 1e-6;
    for (std::size_t i = 0; i < coords.size(); ++i) {
        double* p = coords[i].slot();
        const double orig = *p;
        *p = orig + h;
        const double lp = ppo_loss(current, batch, advs, cfg, nullptr);
        *p = orig - h;
        const double lm = ppo_loss(current, batch, advs, cfg, nullptr);
        *p = orig;
        const double fd = (lp - lm) / (2 * h);
        const double an = *gcoords[i].slot();
        const double denom = std::max({std::abs(fd), std::abs(an), 1e-8});
        CHECK(std::abs(fd - an) / denom < 1e-3);
    }
}

TEST_CASE("zero advantage and exact value leave parameters fixed") {
    auto p = init_agent(3, 8, 8, 8);
    auto before = p;
    std::vector<EpisodeRecord> batch;
    auto rng = make_rng(1, "fp");
    for (int i = 0; i < 2; ++i) {  // batch < 4 -> no normalization
        EpisodeRecord rec;
        rec.sigma = 0.1 + 0.2 * i;
        auto [a, lp] = sample_action(p, rec.sigma, rng);
        rec.raw_action = a;
        rec.logp = lp;
        rec.value = value_estimate(p, rec.sigma);
        rec.reward = rec.value;  // advantage exactly zero, value error zero
        batch.push_back(std::move(rec));
    }
    PPOConfig cfg;
    cfg.entropy_coef = 0.0;
    AgentOptimizer opt(p);
    ppo_update(p, opt, batch, cfg);
    bool same = (p.log_std - before.log_std).cwiseAbs().maxCoeff() == 0.0;
    for (std::size_t i = 0; i < p.policy.w.size(); ++i)
        same = same && (p.policy.w[i] - before.policy.w[i]).cwiseAbs().maxCoeff() == 0.0;
    for (std::size_t i = 0; i < p.value.w.size(); ++i)
        same = same && (p.value.w[i] - before.value.w[i]).cwiseAbs().maxCoeff() == 0.0;
    CHECK(same);
}

TEST_CASE("ppo_update moves parameters when there is signal") {
    auto p = init_agent(3, 8, 8, 8);
    auto before = p;
    auto batch = make_batch(p, p, 6, 7);
    PPOConfig cfg;
    AgentOptimizer opt(p);
    ppo_update(p, opt, batch, cfg);
    CHECK(p.all_finite());
    double delta = (p.log_std - before.log_std).cwiseAbs().maxCoeff();
    for (std::size_t i = 0; i < p.policy.w.size(); ++i)
        delta = std::max(delta, (p.policy.w[i] - before.policy.w[i]).cwiseAbs().maxCoeff());
    CHECK(delta > 0.0);
}

TEST_CASE("agent checkpoint round-trip is bit-exact") {
    auto p = init_agent(5, 33, 16, 8);
    const auto f1 = testutil::tmp_path("agent_a.ckpt");
    const auto f2 = testutil::tmp_path("agent_b.ckpt");
    save_agent(p, f1);
    auto r = load_agent(f1);
    save_agent(r, f2);
    std::ifstream i1(f1, std::ios::binary), i2(f2, std::ios::binary);
    std::string b1((std::istreambuf_iterator<char>(i1)), std::istreambuf_iterator<char>());
    std::string b2((std::istreambuf_iterator<char>(i2)), std::istreambuf_iterator<char>());
    CHECK(b1 == b2);
    CHECK(r.action_dim() == 5);
    CHECK((r.log_std - p.log_std).cwiseAbs().maxCoeff() == 0.0);
    for (std::size_t i = 0; i < p.policy.w.size(); ++i)
        CHECK((r.policy.w[i] - p.policy.w[i]).cwiseAbs().maxCoeff() == 0.0);
    CHECK_THROWS(load_agent(testutil::tmp_path("missing_agent.ckpt")));
}

TEST_CASE("init_agent is deterministic and respects the zero-signal start") {
    auto a = init_agent(3, 5), b = init_agent(3, 5), c = init_agent(3, 6);
    CHECK((a.policy.w[0] - b.policy.w[0]).cwiseAbs().maxCoeff() == 0.0);
    CHECK((a.policy.w[0] - c.policy.w[0]).cwiseAbs().maxCoeff() > 0.0);
    CHECK(a.log_std(0) == -0.5);
    CHECK(a.action_dim() == 3);
    CHECK_THROWS_AS(init_agent(0, 1), std::invalid_argument);
}
