// SPDX-License-Identifier: Apache-2.0
#include "ffprune/agent.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <iostream>
#include <stdexcept>

#include "ffprune/util.hpp"

namespace ffprune {

namespace {
constexpr double kLog2Pi = 1.8378770664093453;  // log(2*pi)

double clamped_log_std(double v) { return std::clamp(v, kLogStdMin, kLogStdMax); }
}  // namespace

Mlp Mlp::init(const std::vector<int>& sizes, std::mt19937_64& rng, double last_layer_scale) {
    if (sizes.size() < 2) throw std::invalid_argument("Mlp: need at least 2 layer sizes");
    Mlp mlp;
    std::normal_distribution<double> dist(0.0, 1.0);
    for (std::size_t i = 0; i + 1 < sizes.size(); ++i) {
        const int in = sizes[i];
        const int out = sizes[i + 1];
        double std = std::sqrt(2.0 / in);
        if (i + 2 == sizes.size()) std *= last_layer_scale;  // small final layer
        Matrix w(in, out);
        for (int c = 0; c < out; ++c)
            for (int r = 0; r < in; ++r) w(r, c) = std * dist(rng);
        mlp.w.push_back(std::move(w));
        mlp.b.push_back(Vector::Zero(out));
    }
    return mlp;
}

Vector Mlp::forward(double x) const {
    std::vector<Vector> scratch;
    return forward_cached(x, scratch);
}

Vector Mlp::forward_cached(double x, std::vector<Vector>& pre_acts) const {
    pre_acts.clear();
    Vector h(1);
    h(0) = x;
    for (std::size_t i = 0; i < w.size(); ++i) {
        Vector z = w[i].transpose() * h + b[i];
        pre_acts.push_back(z);
        h = (i + 1 < w.size()) ? z.cwiseMax(0.0) : z;
    }
    return h;
}

void Mlp::backward(double x, const std::vector<Vector>& pre_acts, const Vector& d_out,
                   Mlp& grads) const {
    Vector dz = d_out;
    for (int i = static_cast<int>(w.size()) - 1; i >= 0; --i) {
        const auto ui = static_cast<std::size_t>(i);
        Vector h_prev;
        if (i == 0) {
            h_prev = Vector(1);
            h_prev(0) = x;
        } else {
            h_prev = pre_acts[ui - 1].cwiseMax(0.0);
        }
        grads.w[ui].noalias() += h_prev * dz.transpose();
        grads.b[ui].noalias() += dz;
        if (i > 0) {
            Vector dh = w[ui] * dz;
            dz = ((pre_acts[ui - 1].array() > 0.0).cast<double>() * dh.array()).matrix();
        }
    }
}

bool PolicyParams::all_finite() const {
    bool ok = log_std.allFinite();
    for (const auto& m : policy.w) ok = ok && m.allFinite();
    for (const auto& v : policy.b) ok = ok && v.allFinite();
    for (const auto& m : value.w) ok = ok && m.allFinite();
    for (const auto& v : value.b) ok = ok && v.allFinite();
    return ok;
}

void PolicyParams::for_each_param(const std::function<void(Matrix&)>& fm,
                                  const std::function<void(Vector&)>& fv) {
    for (auto& m : policy.w) fm(m);
    for (auto& v : policy.b) fv(v);
    for (auto& m : value.w) fm(m);
    for (auto& v : value.b) fv(v);
    fv(log_std);
}

PolicyParams init_agent(int action_dim, std::uint64_t seed, int hidden1, int hidden2,
                        double log_std_init) {
    if (action_dim < 1) throw std::invalid_argument("init_agent: action_dim must be >= 1");
    auto rng = make_rng(seed, "agent-init");
    PolicyParams p;
    p.policy = Mlp::init({1, hidden1, hidden2, action_dim}, rng);
    p.value = Mlp::init({1, hidden1, hidden2, 1}, rng);
    p.log_std = Vector::Constant(action_dim, log_std_init);
    return p;
}

PolicyParams zeros_like(const PolicyParams& p) {
    PolicyParams z = p;
    z.for_each_param([](Matrix& m) { m.setZero(); }, [](Vector& v) { v.setZero(); });
    return z;
}

void PPOConfig::validate() const {
    if (!(clip_ratio > 0 && clip_ratio < 1))
        throw std::invalid_argument("PPOConfig: clip_ratio must be in (0, 1)");
    if (lr <= 0 || batch_episodes < 1 || epochs < 1)
        throw std::invalid_argument("PPOConfig: bad lr/batch/epochs");
    if (entropy_coef < 0 || value_coef < 0 || max_grad_norm < 0)
        throw std::invalid_argument("PPOConfig: coefficients must be >= 0");
}

std::pair<std::vector<double>, double> sample_action(const PolicyParams& params, double sigma,
                                                     std::mt19937_64& rng) {
    if (!(sigma >= 0.0 && sigma < 1.0))
        throw std::invalid_argument("sample_action: sigma must be in [0, 1)");
    const Vector mean = params.policy.forward(sigma);
    if (!mean.allFinite())
        throw std::runtime_error("sample_action: non-finite policy output at sigma=" +
                                 std::to_string(sigma));
    const int n = params.action_dim();
    std::normal_distribution<double> unit(0.0, 1.0);
    std::vector<double> action(static_cast<std::size_t>(n));
    double logp = -0.5 * n * kLog2Pi;
    for (int i = 0; i < n; ++i) {
        const double ls = clamped_log_std(params.log_std(i));
        const double s = std::exp(ls);
        const double z = unit(rng);
        action[static_cast<std::size_t>(i)] = mean(i) + s * z;
        logp += -0.5 * z * z - ls;
    }
    return {std::move(action), logp};
}

double value_estimate(const PolicyParams& params, double sigma) {
    return params.value.forward(sigma)(0);
}

double action_log_prob(const PolicyParams& params, double sigma,
                       const std::vector<double>& action) {
    const Vector mean = params.policy.forward(sigma);
    const int n = params.action_dim();
    double logp = -0.5 * n * kLog2Pi;
    for (int i = 0; i < n; ++i) {
        const double ls = clamped_log_std(params.log_std(i));
        const double s = std::exp(ls);
        const double z = (action[static_cast<std::size_t>(i)] - mean(i)) / s;
        logp += -0.5 * z * z - ls;
    }
    return logp;
}

double compute_reward(double ppl_dense, double ppl_pruned) {
    if (!std::isfinite(ppl_dense) || ppl_dense < 1.0)
        throw std::invalid_argument("compute_reward: dense PPL must be finite and >= 1");
    if (!std::isfinite(ppl_pruned)) return 0.0;  // model collapse
    return ppl_dense / ppl_pruned;
}

std::vector<double> advantages(const std::vector<EpisodeRecord>& batch) {
    std::vector<double> adv(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) adv[i] = batch[i].reward - batch[i].value;
    if (batch.size() >= 4) {
        double mean = 0.0;
        for (double a : adv) mean += a;
        mean /= static_cast<double>(adv.size());
        double var = 0.0;
        for (double a : adv) var += (a - mean) * (a - mean);
        var /= static_cast<double>(adv.size());
        const double denom = std::sqrt(std::max(var, 1e-16));
        for (double& a : adv) a = (a - mean) / denom;
    }
    return adv;
}

double clipped_surrogate(double ratio, double advantage, double clip_ratio) {
    const double clipped = std::clamp(ratio, 1.0 - clip_ratio, 1.0 + clip_ratio);
    return std::min(ratio * advantage, clipped * advantage);
}

double ppo_loss(const PolicyParams& params, const std::vector<EpisodeRecord>& batch,
                const std::vector<double>& advs, const PPOConfig& cfg, PolicyParams* grads) {
    if (batch.empty()) throw std::invalid_argument("ppo_loss: empty batch");
    if (advs.size() != batch.size()) throw std::invalid_argument("ppo_loss: advantage mismatch");
    const int n = params.action_dim();
    const double inv_b = 1.0 / static_cast<double>(batch.size());
    double loss = 0.0;

    for (std::size_t bi = 0; bi < batch.size(); ++bi) {
        const auto& rec = batch[bi];
        std::vector<Vector> pol_cache, val_cache;
        const Vector mean = params.policy.forward_cached(rec.sigma, pol_cache);
        const Vector vout = params.value.forward_cached(rec.sigma, val_cache);

        Vector z(n), inv_s(n);
        double logp_new = -0.5 * n * kLog2Pi;
        for (int i = 0; i < n; ++i) {
            const double ls = clamped_log_std(params.log_std(i));
            const double s = std::exp(ls);
            z(i) = (rec.raw_action[static_cast<std::size_t>(i)] - mean(i)) / s;
            inv_s(i) = 1.0 / s;
            logp_new += -0.5 * z(i) * z(i) - ls;
        }
        const double ratio = std::exp(logp_new - rec.logp);
        const double adv = advs[bi];

        const double v_unclipped = ratio * adv;
        const double r_clipped = std::clamp(ratio, 1.0 - cfg.clip_ratio, 1.0 + cfg.clip_ratio);
        const double v_clipped = r_clipped * adv;
        double d_surr_d_ratio;
        double surr;
        if (v_unclipped <= v_clipped) {
            surr = v_unclipped;
            d_surr_d_ratio = adv;
        } else {
            surr = v_clipped;
            d_surr_d_ratio =
                (ratio > 1.0 - cfg.clip_ratio && ratio < 1.0 + cfg.clip_ratio) ? adv : 0.0;
        }
        const double v_err = vout(0) - rec.reward;
        loss += inv_b * (-surr + cfg.value_coef * v_err * v_err);

        if (grads) {
            const double d_logp = -inv_b * d_surr_d_ratio * ratio;
            Vector d_mean(n);
            for (int i = 0; i < n; ++i) {
                // dlogp/dmean_i = z_i / s_i ; dlogp/dlogstd_i = z_i^2 - 1
                d_mean(i) = d_logp * z(i) * inv_s(i);
                const bool clamped = params.log_std(i) <= kLogStdMin ||
                                     params.log_std(i) >= kLogStdMax;
                if (!clamped) grads->log_std(i) += d_logp * (z(i) * z(i) - 1.0);
            }
            params.policy.backward(rec.sigma, pol_cache, d_mean, grads->policy);
            Vector d_v(1);
            d_v(0) = inv_b * cfg.value_coef * 2.0 * v_err;
            params.value.backward(rec.sigma, val_cache, d_v, grads->value);
        }
    }

    // Entropy bonus; the std is state independent, so it is a single term.
    double entropy = 0.5 * n * (kLog2Pi + 1.0);
    for (int i = 0; i < n; ++i) entropy += clamped_log_std(params.log_std(i));
    loss -= cfg.entropy_coef * entropy;
    if (grads && cfg.entropy_coef > 0) {
        for (int i = 0; i < n; ++i) {
            const bool clamped =
                params.log_std(i) <= kLogStdMin || params.log_std(i) >= kLogStdMax;
            if (!clamped) grads->log_std(i) -= cfg.entropy_coef;
        }
    }
    return loss;
}

void ppo_update(PolicyParams& params, AgentOptimizer& opt,
                const std::vector<EpisodeRecord>& batch, const PPOConfig& cfg) {
    cfg.validate();
    const auto advs = advantages(batch);
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        PolicyParams grads = zeros_like(params);
        ppo_loss(params, batch, advs, cfg, &grads);
        if (!grads.all_finite()) {
            std::cerr << "ppo_update: non-finite gradient, skipping step\n";
            continue;
        }
        double sq = 0.0;
        grads.for_each_param([&](Matrix& m) { sq += m.squaredNorm(); },
                             [&](Vector& v) { sq += v.squaredNorm(); });
        const double norm = std::sqrt(sq);
        const double scale =
            (cfg.max_grad_norm > 0 && norm > cfg.max_grad_norm) ? cfg.max_grad_norm / norm : 1.0;

        ++opt.step;
        const double bc1 = 1.0 - std::pow(opt.beta1, opt.step);
        const double bc2 = 1.0 - std::pow(opt.beta2, opt.step);
        // walk the three containers in lockstep
        std::vector<double*> pp, gp, mp, vp;
        std::vector<std::int64_t> sizes;
        auto collect = [](PolicyParams& s, std::vector<double*>& out,
                          std::vector<std::int64_t>* sz) {
            s.for_each_param(
                [&](Matrix& m) {
                    out.push_back(m.data());
                    if (sz) sz->push_back(m.size());
                },
                [&](Vector& v) {
                    out.push_back(v.data());
                    if (sz) sz->push_back(v.size());
                });
        };
        collect(params, pp, &sizes);
        collect(grads, gp, nullptr);
        collect(opt.m, mp, nullptr);
        collect(opt.v, vp, nullptr);
        for (std::size_t i = 0; i < pp.size(); ++i) {
            Eigen::Map<Eigen::ArrayXd> p(pp[i], sizes[i]);
            Eigen::Map<Eigen::ArrayXd> g(gp[i], sizes[i]);
            Eigen::Map<Eigen::ArrayXd> mm(mp[i], sizes[i]);
            Eigen::Map<Eigen::ArrayXd> vv(vp[i], sizes[i]);
            g *= scale;
            mm = opt.beta1 * mm + (1.0 - opt.beta1) * g;
            vv = opt.beta2 * vv + (1.0 - opt.beta2) * g.square();
            p -= cfg.lr * (mm / bc1) / ((vv / bc2).sqrt() + opt.eps);
        }
    }
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {
constexpr char kAgentMagic[4] = {'F', 'F', 'A', 'G'};
constexpr std::uint32_t kAgentVersion = 1;

void append_matrix(std::string& buf, const Matrix& m) {
    const std::int32_t r = static_cast<std::int32_t>(m.rows());
    const std::int32_t c = static_cast<std::int32_t>(m.cols());
    buf.append(reinterpret_cast<const char*>(&r), 4);
    buf.append(reinterpret_cast<const char*>(&c), 4);
    buf.append(reinterpret_cast<const char*>(m.data()),
               static_cast<std::size_t>(m.size()) * sizeof(double));
}

Matrix read_matrix(std::istream& in) {
    std::int32_t r = 0, c = 0;
    in.read(reinterpret_cast<char*>(&r), 4);
    in.read(reinterpret_cast<char*>(&c), 4);
    if (!in || r < 0 || c < 0) throw std::runtime_error("agent checkpoint: truncated");
    Matrix m(r, c);
    in.read(reinterpret_cast<char*>(m.data()),
            static_cast<std::streamsize>(m.size() * sizeof(double)));
    if (!in) throw std::runtime_error("agent checkpoint: truncated");
    return m;
}

void append_mlp(std::string& buf, const Mlp& mlp) {
    const std::int32_t n = static_cast<std::int32_t>(mlp.w.size());
    buf.append(reinterpret_cast<const char*>(&n), 4);
    for (std::size_t i = 0; i < mlp.w.size(); ++i) {
        append_matrix(buf, mlp.w[i]);
        append_matrix(buf, mlp.b[i]);
    }
}

Mlp read_mlp(std::istream& in) {
    std::int32_t n = 0;
    in.read(reinterpret_cast<char*>(&n), 4);
    if (!in || n < 1) throw std::runtime_error("agent checkpoint: bad layer count");
    Mlp mlp;
    for (int i = 0; i < n; ++i) {
        mlp.w.push_back(read_matrix(in));
        mlp.b.push_back(Vector(read_matrix(in).col(0)));
    }
    return mlp;
}

}  // namespace

void save_agent(const PolicyParams& params, const std::filesystem::path& path) {
    std::string buf;
    buf.append(kAgentMagic, 4);
    buf.append(reinterpret_cast<const char*>(&kAgentVersion), 4);
    append_mlp(buf, params.policy);
    append_mlp(buf, params.value);
    append_matrix(buf, params.log_std);
    atomic_write_file(path, buf);
}

PolicyParams load_agent(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open agent checkpoint: " + path.string());
    char magic[4];
    in.read(magic, 4);
    std::uint32_t version = 0;
    in.read(reinterpret_cast<char*>(&version), 4);
    if (!in || std::memcmp(magic, kAgentMagic, 4) != 0 || version != kAgentVersion)
        throw std::runtime_error("agent checkpoint: bad header in " + path.string());
    PolicyParams p;
    p.policy = read_mlp(in);
    p.value = read_mlp(in);
    p.log_std = Vector(read_matrix(in).col(0));
    return p;
}

}  // namespace ffprune
