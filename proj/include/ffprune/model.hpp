// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace ffprune {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using TokenSeq = std::vector<std::int32_t>;

/// Architecture of the dense reference model.
struct ModelConfig {
    int n_layers = 4;
    int d_model = 128;
    int n_heads = 4;
    int d_ff = 512;
    int vocab_size = 256;
    int max_seq_len = 128;

    int head_dim() const { return d_model / n_heads; }
    void validate() const;  // throws std::invalid_argument
};

/// One pre-norm decoder block. After structured pruning a layer may carry
/// fewer heads (n_heads) or fewer hidden channels (d_ff) than the config.
struct LayerWeights {
    Matrix wq, wk, wv;  // d_model x (n_heads * head_dim)
    Matrix wo;          // (n_heads * head_dim) x d_model
    Matrix w_up;        // d_model x d_ff
    Matrix w_down;      // d_ff x d_model
    Vector ln1_g, ln1_b, ln2_g, ln2_b;
    int n_heads = 0;
    int d_ff = 0;
};

/// Decoder-only transformer: learned positional embeddings, pre-norm blocks,
/// GELU FFN, untied output head. Serves as both the dense model and (with
/// reduced per-layer shapes) a pruned one.
struct Model {
    ModelConfig config;
    int head_dim = 0;
    Matrix embed;  // vocab x d_model
    Matrix pos;    // max_seq_len x d_model
    Matrix head;   // d_model x vocab
    Vector lnf_g, lnf_b;
    std::vector<LayerWeights> layers;

    std::int64_t param_count() const;
    void for_each_param(const std::function<void(Matrix&)>& fm,
                        const std::function<void(Vector&)>& fv);
    void for_each_param(const std::function<void(const Matrix&)>& fm,
                        const std::function<void(const Vector&)>& fv) const;
    bool all_finite() const;
};

/// Zero-initialized model (dense shapes from config). Used for gradients and
/// optimizer moments.
Model zeros_like(const Model& m);

/// Seeded random initialization: scaled-normal projections, zero output head
/// (so an untrained model emits exactly uniform logits), unit layer norms.
Model init_model(const ModelConfig& config, std::uint64_t seed);

/// Ordered pool of fixed-length evaluation sequences.
struct EvalSet {
    int seq_len = 0;
    std::string source;
    std::vector<TokenSeq> seqs;
};

/// Non-overlapping windows of `seq_len` tokens starting at `offset` tokens
/// into the corpus. Throws if fewer than n_seqs windows fit.
EvalSet make_eval_set(std::span<const std::int32_t> corpus, int seq_len, int n_seqs,
                      std::int64_t offset = 0, const std::string& source = "");

/// Byte-level tokenization: token id = byte value.
std::vector<std::int32_t> tokenize_bytes(const std::string& text);
std::vector<std::int32_t> load_corpus(const std::filesystem::path& path);

/// Next-token logits for one sequence, rows = positions. Pure.
Matrix forward_logits(const Model& m, std::span<const std::int32_t> tokens);

/// Sum of token NLLs and the number of predicted tokens for one sequence.
/// Returns a non-finite sum if the forward pass degenerates.
std::pair<double, std::int64_t> sequence_nll(const Model& m, std::span<const std::int32_t> tokens);

/// exp(mean token NLL) over the first n_samples sequences. A non-finite mean
/// yields +infinity (a first-class marker, never a throw). Evaluations of
/// distinct sequences may run on separate threads; the reduction order is
/// fixed, so results are bit-reproducible.
double perplexity(const Model& m, const EvalSet& eval_set, int n_samples);

inline bool ppl_is_finite(double ppl) { return std::isfinite(ppl); }

/// Where activations can be observed inside a layer.
enum class Site { attn_input, head_output, ffn_input, ffn_hidden };
std::string site_name(int layer, Site site);

struct CapturePoint {
    int layer = 0;
    Site site = Site::attn_input;
};

/// Observed activations at one capture point: rows = (sequence, position)
/// pairs in evaluation order, columns = channels at the site.
struct ActivationCapture {
    CapturePoint point;
    Matrix rows;
};

/// Runs the model over the first n_seqs sequences and records activations at
/// every requested site. All captures share the same row ordering.
std::vector<ActivationCapture> collect_activations(const Model& m, const EvalSet& eval_set,
                                                   int n_seqs,
                                                   const std::vector<CapturePoint>& sites);

/// All four sites of every layer.
std::vector<CapturePoint> all_capture_points(const Model& m);

// Checkpoint container: versioned binary header (config + per-layer shapes)
// followed by raw weight bytes. save->load->save is byte-identical.
void save_model(const Model& m, const std::filesystem::path& path);
Model load_model(const std::filesystem::path& path);

}  // namespace ffprune
