// SPDX-License-Identifier: Apache-2.0
#include "ffprune/model.hpp"

#include <cstring>
#include <fstream>
#include <future>
#include <limits>
#include <stdexcept>
#include <thread>

#include "ffprune/util.hpp"
#include "forward_impl.hpp"

namespace ffprune {

void ModelConfig::validate() const {
    if (n_layers < 1 || d_model < 1 || n_heads < 1 || d_ff < 1 || vocab_size < 1 ||
        max_seq_len < 1)
        throw std::invalid_argument("ModelConfig: all dimensions must be >= 1");
    if (d_model % n_heads != 0)
        throw std::invalid_argument("ModelConfig: d_model must be divisible by n_heads");
}

std::int64_t Model::param_count() const {
    std::int64_t n = 0;
    for_each_param([&](const Matrix& w) { n += w.size(); },
                   [&](const Vector& v) { n += v.size(); });
    return n;
}

// Canonical parameter order; the checkpoint layout and optimizer state both
// follow it.
void Model::for_each_param(const std::function<void(Matrix&)>& fm,
                           const std::function<void(Vector&)>& fv) {
    fm(embed);
    fm(pos);
    fm(head);
    fv(lnf_g);
    fv(lnf_b);
    for (auto& l : layers) {
        fm(l.wq);
        fm(l.wk);
        fm(l.wv);
        fm(l.wo);
        fm(l.w_up);
        fm(l.w_down);
        fv(l.ln1_g);
        fv(l.ln1_b);
        fv(l.ln2_g);
        fv(l.ln2_b);
    }
}

void Model::for_each_param(const std::function<void(const Matrix&)>& fm,
                           const std::function<void(const Vector&)>& fv) const {
    const_cast<Model*>(this)->for_each_param([&](Matrix& w) { fm(w); },
                                             [&](Vector& v) { fv(v); });
}

bool Model::all_finite() const {
    bool ok = true;
    for_each_param([&](const Matrix& w) { ok = ok && w.allFinite(); },
                   [&](const Vector& v) { ok = ok && v.allFinite(); });
    return ok;
}

Model zeros_like(const Model& m) {
    Model z = m;
    z.for_each_param([](Matrix& w) { w.setZero(); }, [](Vector& v) { v.setZero(); });
    return z;
}

Model init_model(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    Model m;
    m.config = config;
    m.head_dim = config.head_dim();
    auto rng = make_rng(seed, "model-init");
    std::normal_distribution<double> dist(0.0, 1.0);
    auto fill = [&](Matrix& w, Eigen::Index r, Eigen::Index c, double std) {
        w.resize(r, c);
        for (Eigen::Index j = 0; j < c; ++j)
            for (Eigen::Index i = 0; i < r; ++i) w(i, j) = std * dist(rng);
    };
    fill(m.embed, config.vocab_size, config.d_model, 0.02);
    fill(m.pos, config.max_seq_len, config.d_model, 0.02);
    // Zero output head: an untrained model emits exactly uniform logits.
    m.head = Matrix::Zero(config.d_model, config.vocab_size);
    m.lnf_g = Vector::Ones(config.d_model);
    m.lnf_b = Vector::Zero(config.d_model);
    m.layers.resize(config.n_layers);
    const double proj_std = std::sqrt(2.0 / config.d_model);
    const double ff_std = std::sqrt(2.0 / config.d_ff);
    for (auto& l : m.layers) {
        l.n_heads = config.n_heads;
        l.d_ff = config.d_ff;
        fill(l.wq, config.d_model, config.d_model, proj_std);
        fill(l.wk, config.d_model, config.d_model, proj_std);
        fill(l.wv, config.d_model, config.d_model, proj_std);
        fill(l.wo, config.d_model, config.d_model, proj_std);
        fill(l.w_up, config.d_model, config.d_ff, proj_std);
        fill(l.w_down, config.d_ff, config.d_model, ff_std);
        l.ln1_g = Vector::Ones(config.d_model);
        l.ln1_b = Vector::Zero(config.d_model);
        l.ln2_g = Vector::Ones(config.d_model);
        l.ln2_b = Vector::Zero(config.d_model);
    }
    return m;
}

namespace detail {

Matrix forward(const Model& m, std::span<const std::int32_t> tokens, ForwardCache* cache,
               const CaptureHook* hook) {
    const int L = static_cast<int>(tokens.size());
    if (L < 1) throw std::invalid_argument("forward: empty sequence");
    if (L > m.config.max_seq_len) throw std::invalid_argument("forward: sequence too long");
    const int d = m.config.d_model;
    const int hd = m.head_dim;
    const double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(hd));

    Matrix x(L, d);
    for (int i = 0; i < L; ++i) {
        const auto t = tokens[static_cast<std::size_t>(i)];
        if (t < 0 || t >= m.config.vocab_size)
            throw std::invalid_argument("forward: token id out of vocab");
        x.row(i) = m.embed.row(t) + m.pos.row(i);
    }

    if (cache) cache->layers.resize(m.layers.size());
    for (std::size_t li = 0; li < m.layers.size(); ++li) {
        const auto& l = m.layers[li];
        LayerCache* lc = cache ? &cache->layers[li] : nullptr;
        const int hw = l.n_heads * hd;  // attention width of this layer

        Matrix a_in = layer_norm(x, l.ln1_g, l.ln1_b, lc ? &lc->ln1 : nullptr);
        if (hook) (*hook)(static_cast<int>(li), Site::attn_input, a_in);
        Matrix q = a_in * l.wq;
        Matrix k = a_in * l.wk;
        Matrix v = a_in * l.wv;

        Matrix head_out(L, hw);
        std::vector<Matrix> probs;
        if (lc) probs.resize(static_cast<std::size_t>(l.n_heads));
        for (int h = 0; h < l.n_heads; ++h) {
            const int c0 = h * hd;
            Matrix s = q.middleCols(c0, hd) * k.middleCols(c0, hd).transpose() * inv_sqrt_hd;
            // causal mask + row softmax
            Matrix p(L, L);
            for (int i = 0; i < L; ++i) {
                const double mx = s.row(i).head(i + 1).maxCoeff();
                double denom = 0.0;
                for (int j = 0; j <= i; ++j) {
                    const double e = std::exp(s(i, j) - mx);
                    p(i, j) = e;
                    denom += e;
                }
                for (int j = i + 1; j < L; ++j) p(i, j) = 0.0;
                p.row(i) /= denom;
            }
            head_out.middleCols(c0, hd).noalias() = p * v.middleCols(c0, hd);
            if (lc) probs[static_cast<std::size_t>(h)] = std::move(p);
        }
        if (hook) (*hook)(static_cast<int>(li), Site::head_output, head_out);
        x.noalias() += head_out * l.wo;

        Matrix f_in = layer_norm(x, l.ln2_g, l.ln2_b, lc ? &lc->ln2 : nullptr);
        if (hook) (*hook)(static_cast<int>(li), Site::ffn_input, f_in);
        Matrix z = f_in * l.w_up;
        Matrix u = z.unaryExpr([](double a) { return gelu_scalar(a); });
        if (hook) (*hook)(static_cast<int>(li), Site::ffn_hidden, u);
        x.noalias() += u * l.w_down;

        if (lc) {
            lc->a_in = std::move(a_in);
            lc->q = std::move(q);
            lc->k = std::move(k);
            lc->v = std::move(v);
            lc->probs = std::move(probs);
            lc->head_out = std::move(head_out);
            lc->f_in = std::move(f_in);
            lc->z = std::move(z);
            lc->u = std::move(u);
        }
    }

    Matrix h_final = layer_norm(x, m.lnf_g, m.lnf_b, cache ? &cache->lnf : nullptr);
    Matrix logits = h_final * m.head;
    if (cache) cache->h_final = std::move(h_final);
    return logits;
}

}  // namespace detail

Matrix forward_logits(const Model& m, std::span<const std::int32_t> tokens) {
    return detail::forward(m, tokens, nullptr, nullptr);
}

std::pair<double, std::int64_t> sequence_nll(const Model& m,
                                             std::span<const std::int32_t> tokens) {
    const int L = static_cast<int>(tokens.size());
    if (L < 2) return {0.0, 0};
    Matrix logits = forward_logits(m, tokens);
    double nll = 0.0;
    for (int i = 0; i + 1 < L; ++i) {
        const auto row = logits.row(i);
        const double mx = row.maxCoeff();
        if (!std::isfinite(mx)) return {std::numeric_limits<double>::infinity(), L - 1};
        const double lse = mx + std::log((row.array() - mx).exp().sum());
        nll += lse - row(tokens[static_cast<std::size_t>(i) + 1]);
    }
    return {nll, L - 1};
}

double perplexity(const Model& m, const EvalSet& eval_set, int n_samples) {
    if (eval_set.seqs.empty()) throw std::invalid_argument("perplexity: empty eval set");
    if (n_samples < 1 || n_samples > static_cast<int>(eval_set.seqs.size()))
        throw std::invalid_argument("perplexity: n_samples out of range [1, |eval_set|]");

    std::vector<double> nlls(static_cast<std::size_t>(n_samples));
    std::vector<std::int64_t> counts(static_cast<std::size_t>(n_samples));
    const int n_threads = std::min(thread_budget(), n_samples);
    auto worker = [&](int begin, int end) {
        for (int i = begin; i < end; ++i) {
            auto [nll, cnt] = sequence_nll(m, eval_set.seqs[static_cast<std::size_t>(i)]);
            nlls[static_cast<std::size_t>(i)] = nll;
            counts[static_cast<std::size_t>(i)] = cnt;
        }
    };
    if (n_threads <= 1) {
        worker(0, n_samples);
    } else {
        std::vector<std::thread> pool;
        const int chunk = (n_samples + n_threads - 1) / n_threads;
        for (int t = 0; t < n_threads; ++t)
            pool.emplace_back(worker, t * chunk, std::min(n_samples, (t + 1) * chunk));
        for (auto& th : pool) th.join();
    }

    double total = 0.0;
    std::int64_t tokens = 0;
    for (int i = 0; i < n_samples; ++i) {
        total += nlls[static_cast<std::size_t>(i)];
        tokens += counts[static_cast<std::size_t>(i)];
    }
    if (tokens == 0) throw std::invalid_argument("perplexity: sequences too short to score");
    const double mean_nll = total / static_cast<double>(tokens);
    if (!std::isfinite(mean_nll)) return std::numeric_limits<double>::infinity();
    return std::exp(mean_nll);  // exp overflow naturally yields the +inf marker
}

EvalSet make_eval_set(std::span<const std::int32_t> corpus, int seq_len, int n_seqs,
                      std::int64_t offset, const std::string& source) {
    if (seq_len < 2) throw std::invalid_argument("make_eval_set: seq_len must be >= 2");
    if (n_seqs < 1) throw std::invalid_argument("make_eval_set: n_seqs must be >= 1");
    EvalSet es;
    es.seq_len = seq_len;
    es.source = source;
    for (int i = 0; i < n_seqs; ++i) {
        const std::int64_t begin = offset + static_cast<std::int64_t>(i) * seq_len;
        if (begin + seq_len > static_cast<std::int64_t>(corpus.size()))
            throw std::invalid_argument("make_eval_set: corpus too small for requested windows");
        es.seqs.emplace_back(corpus.begin() + begin, corpus.begin() + begin + seq_len);
    }
    return es;
}

std::vector<std::int32_t> tokenize_bytes(const std::string& text) {
    std::vector<std::int32_t> out;
    out.reserve(text.size());
    for (unsigned char c : text) out.push_back(static_cast<std::int32_t>(c));
    return out;
}

std::vector<std::int32_t> load_corpus(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open corpus: " + path.string());
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return tokenize_bytes(text);
}

std::string site_name(int layer, Site site) {
    const char* s = "?";
    switch (site) {
        case Site::attn_input: s = "attn_input"; break;
        case Site::head_output: s = "head_output"; break;
        case Site::ffn_input: s = "ffn_input"; break;
        case Site::ffn_hidden: s = "ffn_hidden"; break;
    }
    return "layer" + std::to_string(layer) + "/" + s;
}

std::vector<CapturePoint> all_capture_points(const Model& m) {
    std::vector<CapturePoint> pts;
    for (int l = 0; l < static_cast<int>(m.layers.size()); ++l)
        for (Site s : {Site::attn_input, Site::head_output, Site::ffn_input, Site::ffn_hidden})
            pts.push_back({l, s});
    return pts;
}

std::vector<ActivationCapture> collect_activations(const Model& m, const EvalSet& eval_set,
                                                   int n_seqs,
                                                   const std::vector<CapturePoint>& sites) {
    if (n_seqs < 1 || n_seqs > static_cast<int>(eval_set.seqs.size()))
        throw std::invalid_argument("collect_activations: n_seqs out of range");
    for (const auto& p : sites)
        if (p.layer < 0 || p.layer >= static_cast<int>(m.layers.size()))
            throw std::invalid_argument("collect_activations: invalid site " +
                                        site_name(p.layer, p.site));

    const int L = eval_set.seq_len;
    std::vector<ActivationCapture> caps(sites.size());
    for (std::size_t si = 0; si < sites.size(); ++si) caps[si].point = sites[si];

    // Run per sequence; the hook copies each observed block into its row span.
    for (int s = 0; s < n_seqs; ++s) {
        detail::CaptureHook seq_hook = [&](int layer, Site site, const Matrix& act) {
            for (std::size_t si = 0; si < sites.size(); ++si) {
                if (sites[si].layer != layer || sites[si].site != site) continue;
                auto& rows = caps[si].rows;
                if (rows.size() == 0)
                    rows.resize(static_cast<Eigen::Index>(n_seqs) * L, act.cols());
                rows.middleRows(static_cast<Eigen::Index>(s) * L, L) = act;
            }
        };
        detail::forward(m, eval_set.seqs[static_cast<std::size_t>(s)], nullptr, &seq_hook);
    }
    return caps;
}

// ---------------------------------------------------------------------------
// Checkpoint container
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'F', 'F', 'P', 'R'};
constexpr std::uint32_t kVersion = 1;

template <class T>
void write_pod(std::string& out, const T& v) {
    const char* p = reinterpret_cast<const char*>(&v);
    out.append(p, sizeof(T));
}

template <class T>
T read_pod(std::istream& in) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) throw std::runtime_error("checkpoint: truncated file");
    return v;
}

}  // namespace

void save_model(const Model& m, const std::filesystem::path& path) {
    std::string buf;
    buf.append(kMagic, 4);
    write_pod(buf, kVersion);
    for (int v : {m.config.n_layers, m.config.d_model, m.config.n_heads, m.config.d_ff,
                  m.config.vocab_size, m.config.max_seq_len, m.head_dim})
        write_pod(buf, static_cast<std::int32_t>(v));
    for (const auto& l : m.layers) {
        write_pod(buf, static_cast<std::int32_t>(l.n_heads));
        write_pod(buf, static_cast<std::int32_t>(l.d_ff));
    }
    m.for_each_param(
        [&](const Matrix& w) {
            buf.append(reinterpret_cast<const char*>(w.data()),
                       static_cast<std::size_t>(w.size()) * sizeof(double));
        },
        [&](const Vector& v) {
            buf.append(reinterpret_cast<const char*>(v.data()),
                       static_cast<std::size_t>(v.size()) * sizeof(double));
        });
    atomic_write_file(path, buf);
}

Model load_model(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint: " + path.string());
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kMagic, 4) != 0)
        throw std::runtime_error("checkpoint: bad magic in " + path.string());
    const auto version = read_pod<std::uint32_t>(in);
    if (version != kVersion)
        throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));

    ModelConfig cfg;
    cfg.n_layers = read_pod<std::int32_t>(in);
    cfg.d_model = read_pod<std::int32_t>(in);
    cfg.n_heads = read_pod<std::int32_t>(in);
    cfg.d_ff = read_pod<std::int32_t>(in);
    cfg.vocab_size = read_pod<std::int32_t>(in);
    cfg.max_seq_len = read_pod<std::int32_t>(in);
    cfg.validate();
    const int head_dim = read_pod<std::int32_t>(in);

    Model m = init_model(cfg, 0);
    m.head_dim = head_dim;
    for (auto& l : m.layers) {
        l.n_heads = read_pod<std::int32_t>(in);
        l.d_ff = read_pod<std::int32_t>(in);
        const int hw = l.n_heads * head_dim;
        l.wq.resize(cfg.d_model, hw);
        l.wk.resize(cfg.d_model, hw);
        l.wv.resize(cfg.d_model, hw);
        l.wo.resize(hw, cfg.d_model);
        l.w_up.resize(cfg.d_model, l.d_ff);
        l.w_down.resize(l.d_ff, cfg.d_model);
    }
    m.for_each_param(
        [&](Matrix& w) {
            in.read(reinterpret_cast<char*>(w.data()),
                    static_cast<std::streamsize>(w.size() * sizeof(double)));
        },
        [&](Vector& v) {
            in.read(reinterpret_cast<char*>(v.data()),
                    static_cast<std::streamsize>(v.size() * sizeof(double)));
        });
    if (!in) throw std::runtime_error("checkpoint: truncated weights in " + path.string());
    return m;
}

}  // namespace ffprune
