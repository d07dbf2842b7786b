// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <vector>

#include "ffprune/model.hpp"  // Matrix/Vector aliases

namespace ffprune {

/// Small fully connected network with ReLU hidden layers and linear output.
struct Mlp {
    std::vector<Matrix> w;  // w[i]: in x out
    std::vector<Vector> b;

    static Mlp init(const std::vector<int>& sizes, std::mt19937_64& rng,
                    double last_layer_scale = 0.01);
    Vector forward(double x) const;
    /// Forward keeping pre-activations for backprop.
    Vector forward_cached(double x, std::vector<Vector>& pre_acts) const;
    /// Backprop d_out into parameter grads; input grad is discarded (the
    /// state is not learned).
    void backward(double x, const std::vector<Vector>& pre_acts, const Vector& d_out,
                  Mlp& grads) const;
    int out_dim() const { return static_cast<int>(b.back().size()); }
};

constexpr double kLogStdMin = -5.0;
constexpr double kLogStdMax = 1.0;

/// Gaussian policy over raw retention actions plus a value baseline, both
/// conditioned on the scalar target sparsity.
struct PolicyParams {
    Mlp policy;      // 1 -> hidden -> hidden -> N action means
    Mlp value;       // 1 -> hidden -> hidden -> 1
    Vector log_std;  // length N, state independent, clamped to [-5, 1]

    int action_dim() const { return log_std.size() > 0 ? static_cast<int>(log_std.size()) : 0; }
    bool all_finite() const;
    void for_each_param(const std::function<void(Matrix&)>& fm,
                        const std::function<void(Vector&)>& fv);
};

PolicyParams init_agent(int action_dim, std::uint64_t seed, int hidden1 = 256,
                        int hidden2 = 128, double log_std_init = -0.5);
PolicyParams zeros_like(const PolicyParams& p);

struct PPOConfig {
    double lr = 1e-4;
    double clip_ratio = 0.2;
    int batch_episodes = 16;
    int epochs = 4;
    double entropy_coef = 0.01;
    double value_coef = 0.5;
    double max_grad_norm = 0.5;

    void validate() const;
};

/// One bandit step: everything needed to replay the update and the log line.
struct EpisodeRecord {
    int step = 0;
    double sigma = 0.0;      // state
    double alpha = 0.0;      // schedule value at this step
    std::vector<double> raw_action;
    std::vector<double> rates;  // mapped policy
    int n_eval = 0;
    double ppl = 0.0;        // +inf marker allowed
    double ppl_dense = 0.0;  // dense PPL on the same n_eval samples
    double reward = 0.0;
    double logp = 0.0;       // under sampling-time params
    double value = 0.0;      // V(sigma) at sampling time
};

/// Samples A_t ~ Normal(mean(sigma), exp(log_std)) and its joint log-density.
std::pair<std::vector<double>, double> sample_action(const PolicyParams& params, double sigma,
                                                     std::mt19937_64& rng);

double value_estimate(const PolicyParams& params, double sigma);

/// Log-density of `action` under the current parameters.
double action_log_prob(const PolicyParams& params, double sigma,
                       const std::vector<double>& action);

/// R_t = PPL_dense / PPL(policy); a non-finite pruned PPL collapses to 0.
double compute_reward(double ppl_dense, double ppl_pruned);

/// R - V per record; normalized to zero mean / unit variance when the batch
/// has at least 4 records (with a variance floor).
std::vector<double> advantages(const std::vector<EpisodeRecord>& batch);

/// Clipped-surrogate term for one sample: min(r*adv, clip(r, 1-eps, 1+eps)*adv).
double clipped_surrogate(double ratio, double advantage, double clip_ratio);

/// Full PPO objective (negated for minimization): -surrogate + value_coef *
/// value MSE - entropy_coef * entropy. Adds parameter grads when `grads` is
/// non-null. Exposed for the finite-difference gradient check.
double ppo_loss(const PolicyParams& params, const std::vector<EpisodeRecord>& batch,
                const std::vector<double>& advs, const PPOConfig& cfg, PolicyParams* grads);

/// Adam state for the agent.
struct AgentOptimizer {
    PolicyParams m, v;
    int step = 0;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

    explicit AgentOptimizer(const PolicyParams& params)
        : m(zeros_like(params)), v(zeros_like(params)) {}
};

/// Runs the configured epochs of clipped-surrogate ascent over the batch.
/// Non-finite gradients skip the step (logged to stderr) rather than abort.
void ppo_update(PolicyParams& params, AgentOptimizer& opt,
                const std::vector<EpisodeRecord>& batch, const PPOConfig& cfg);

// Versioned binary agent checkpoint; round-trips bit-exactly.
void save_agent(const PolicyParams& params, const std::filesystem::path& path);
PolicyParams load_agent(const std::filesystem::path& path);

}  // namespace ffprune
