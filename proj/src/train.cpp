// SPDX-License-Identifier: Apache-2.0
#include "ffprune/train.hpp"

#include <cmath>
#include <stdexcept>

#include "ffprune/util.hpp"
#include "forward_impl.hpp"

namespace ffprune {

namespace {

using detail::ForwardCache;
using detail::LnCache;

struct Block {
    double* data;
    std::int64_t size;
};

std::vector<Block> collect_blocks(Model& m) {
    std::vector<Block> blocks;
    m.for_each_param([&](Matrix& w) { blocks.push_back({w.data(), w.size()}); },
                     [&](Vector& v) { blocks.push_back({v.data(), v.size()}); });
    return blocks;
}

// dy -> dx for y = gamma .* xhat + beta; accumulates parameter grads.
Matrix ln_backward(const Matrix& dy, const LnCache& c, const Vector& gamma, Vector& g_gamma,
                   Vector& g_beta, double scale) {
    g_gamma.noalias() += scale * (dy.array() * c.xhat.array()).colwise().sum().matrix().transpose();
    g_beta.noalias() += scale * dy.colwise().sum().transpose();
    Matrix dyh = dy.array().rowwise() * gamma.transpose().array();
    Matrix dx(dy.rows(), dy.cols());
    const double inv_d = 1.0 / static_cast<double>(dy.cols());
    for (Eigen::Index i = 0; i < dy.rows(); ++i) {
        const double m1 = dyh.row(i).mean();
        const double m2 = (dyh.row(i).array() * c.xhat.row(i).array()).sum() * inv_d;
        dx.row(i) = c.inv_std(i) * (dyh.row(i).array() - m1 - c.xhat.row(i).array() * m2);
    }
    return dx;
}

}  // namespace

std::pair<double, std::int64_t> loss_and_grad(const Model& m,
                                              std::span<const std::int32_t> tokens,
                                              Model& grads, double scale) {
    const int L = static_cast<int>(tokens.size());
    if (L < 2) return {0.0, 0};
    ForwardCache cache;
    Matrix logits = detail::forward(m, tokens, &cache, nullptr);
    const int V = m.config.vocab_size;
    const int d = m.config.d_model;
    const int hd = m.head_dim;
    const double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(hd));

    // Cross entropy over positions 0..L-2; dlogits = softmax - onehot(target).
    double nll = 0.0;
    Matrix dlogits = Matrix::Zero(L, V);
    for (int i = 0; i + 1 < L; ++i) {
        const auto row = logits.row(i);
        const double mx = row.maxCoeff();
        Eigen::RowVectorXd p = (row.array() - mx).exp();
        const double denom = p.sum();
        nll += mx + std::log(denom) - row(tokens[static_cast<std::size_t>(i) + 1]);
        p /= denom;
        dlogits.row(i) = p;
        dlogits(i, tokens[static_cast<std::size_t>(i) + 1]) -= 1.0;
    }

    grads.head.noalias() += scale * cache.h_final.transpose() * dlogits;
    Matrix dx = dlogits * m.head.transpose();
    dx = ln_backward(dx, cache.lnf, m.lnf_g, grads.lnf_g, grads.lnf_b, scale);

    for (int li = static_cast<int>(m.layers.size()) - 1; li >= 0; --li) {
        const auto& l = m.layers[static_cast<std::size_t>(li)];
        auto& g = grads.layers[static_cast<std::size_t>(li)];
        const auto& c = cache.layers[static_cast<std::size_t>(li)];

        // FFN branch: x_out = x_mid + gelu(f_in * w_up) * w_down
        Matrix du = dx * l.w_down.transpose();
        g.w_down.noalias() += scale * c.u.transpose() * dx;
        Matrix dz = du.array() *
                    c.z.unaryExpr([](double a) { return detail::gelu_grad_scalar(a); }).array();
        g.w_up.noalias() += scale * c.f_in.transpose() * dz;
        Matrix d_f_in = dz * l.w_up.transpose();
        dx.noalias() += ln_backward(d_f_in, c.ln2, l.ln2_g, g.ln2_g, g.ln2_b, scale);

        // Attention branch: x_mid = x_in + head_out * wo
        g.wo.noalias() += scale * c.head_out.transpose() * dx;
        Matrix d_head_out = dx * l.wo.transpose();
        Matrix dq(L, l.n_heads * hd), dk(L, l.n_heads * hd), dv(L, l.n_heads * hd);
        for (int h = 0; h < l.n_heads; ++h) {
            const int c0 = h * hd;
            const Matrix& p = c.probs[static_cast<std::size_t>(h)];
            auto d_o = d_head_out.middleCols(c0, hd);
            Matrix dp = d_o * c.v.middleCols(c0, hd).transpose();
            dv.middleCols(c0, hd).noalias() = p.transpose() * d_o;
            // softmax rows: ds_i = p_i .* (dp_i - <dp_i, p_i>)
            Matrix ds(L, L);
            for (int i = 0; i < L; ++i) {
                const double dot = dp.row(i).dot(p.row(i));
                ds.row(i) = p.row(i).array() * (dp.row(i).array() - dot);
            }
            dq.middleCols(c0, hd).noalias() = ds * c.k.middleCols(c0, hd) * inv_sqrt_hd;
            dk.middleCols(c0, hd).noalias() = ds.transpose() * c.q.middleCols(c0, hd) * inv_sqrt_hd;
        }
        g.wq.noalias() += scale * c.a_in.transpose() * dq;
        g.wk.noalias() += scale * c.a_in.transpose() * dk;
        g.wv.noalias() += scale * c.a_in.transpose() * dv;
        Matrix d_a_in = dq * l.wq.transpose();
        d_a_in.noalias() += dk * l.wk.transpose();
        d_a_in.noalias() += dv * l.wv.transpose();
        dx.noalias() += ln_backward(d_a_in, c.ln1, l.ln1_g, g.ln1_g, g.ln1_b, scale);
    }

    grads.pos.topRows(L).noalias() += scale * dx;
    for (int i = 0; i < L; ++i)
        grads.embed.row(tokens[static_cast<std::size_t>(i)]).noalias() += scale * dx.row(i);
    (void)d;
    return {nll, L - 1};
}

void TrainConfig::validate(const ModelConfig& mc) const {
    if (steps < 0) throw std::invalid_argument("TrainConfig: steps must be >= 0");
    if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
    // Each training window carries seq_len predictions, i.e. seq_len + 1 tokens.
    if (seq_len < 2 || seq_len + 1 > mc.max_seq_len)
        throw std::invalid_argument("TrainConfig: seq_len must be in [2, max_seq_len - 1]");
    if (lr <= 0) throw std::invalid_argument("TrainConfig: lr must be > 0");
}

Model train_dense(std::span<const std::int32_t> corpus, const ModelConfig& mc,
                  const TrainConfig& tc, std::uint64_t seed,
                  std::vector<TrainCurvePoint>* curve) {
    mc.validate();
    tc.validate(mc);
    if (static_cast<std::int64_t>(corpus.size()) <
        10LL * static_cast<std::int64_t>(mc.max_seq_len))
        throw std::invalid_argument("train_dense: corpus shorter than 10 x max_seq_len");
    for (auto t : corpus)
        if (t < 0 || t >= mc.vocab_size)
            throw std::invalid_argument("train_dense: corpus token outside vocab");

    Model m = init_model(mc, seed);
    if (tc.steps == 0) return m;

    Model grads = zeros_like(m);
    Model adam_m = zeros_like(m);
    Model adam_v = zeros_like(m);
    auto p_blocks = collect_blocks(m);
    auto g_blocks = collect_blocks(grads);
    auto m_blocks = collect_blocks(adam_m);
    auto v_blocks = collect_blocks(adam_v);

    auto rng = make_rng(seed, "train-batches");
    const std::int64_t max_start =
        static_cast<std::int64_t>(corpus.size()) - (tc.seq_len + 1);
    std::uniform_int_distribution<std::int64_t> start_dist(0, max_start);

    const double lr_floor = tc.lr * tc.lr_floor_frac;
    for (int step = 0; step < tc.steps; ++step) {
        grads.for_each_param([](Matrix& w) { w.setZero(); }, [](Vector& v) { v.setZero(); });
        const double n_pred =
            static_cast<double>(tc.batch_size) * static_cast<double>(tc.seq_len);
        double loss_sum = 0.0;
        for (int b = 0; b < tc.batch_size; ++b) {
            const std::int64_t s = start_dist(rng);
            std::span<const std::int32_t> window(corpus.data() + s,
                                                 static_cast<std::size_t>(tc.seq_len) + 1);
            auto [nll, cnt] = loss_and_grad(m, window, grads, 1.0 / n_pred);
            (void)cnt;
            loss_sum += nll;
        }
        const double loss = loss_sum / n_pred;
        if (!std::isfinite(loss))
            throw std::runtime_error("train_dense: non-finite loss at step " +
                                     std::to_string(step));

        // global grad-norm clip
        double sq = 0.0;
        for (const auto& b : g_blocks)
            sq += Eigen::Map<const Eigen::ArrayXd>(b.data, b.size).square().sum();
        const double norm = std::sqrt(sq);
        const double clip_scale = (tc.grad_clip > 0 && norm > tc.grad_clip)
                                      ? tc.grad_clip / norm
                                      : 1.0;

        const double prog = static_cast<double>(step) / static_cast<double>(tc.steps);
        const double lr_t = lr_floor + (tc.lr - lr_floor) * 0.5 * (1.0 + std::cos(M_PI * prog));
        const double bc1 = 1.0 - std::pow(tc.beta1, step + 1);
        const double bc2 = 1.0 - std::pow(tc.beta2, step + 1);
        for (std::size_t i = 0; i < p_blocks.size(); ++i) {
            Eigen::Map<Eigen::ArrayXd> p(p_blocks[i].data, p_blocks[i].size);
            Eigen::Map<Eigen::ArrayXd> g(g_blocks[i].data, g_blocks[i].size);
            Eigen::Map<Eigen::ArrayXd> mm(m_blocks[i].data, m_blocks[i].size);
            Eigen::Map<Eigen::ArrayXd> vv(v_blocks[i].data, v_blocks[i].size);
            g *= clip_scale;
            mm = tc.beta1 * mm + (1.0 - tc.beta1) * g;
            vv = tc.beta2 * vv + (1.0 - tc.beta2) * g.square();
            p -= lr_t * (mm / bc1) / ((vv / bc2).sqrt() + tc.adam_eps);
        }
        if (curve && (step % tc.log_every == 0 || step + 1 == tc.steps))
            curve->push_back({step, loss, lr_t});
    }
    return m;
}

}  // namespace ffprune
