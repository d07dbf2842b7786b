// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end: train / search / calibrate / eval / report.
#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <json.hpp>

#include "ffprune/config.hpp"
#include "ffprune/search_loop.hpp"
#include "ffprune/util.hpp"

namespace fs = std::filesystem;
using namespace ffprune;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw UsageError("cannot open " + p.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

RunConfig resolve_config(const std::string& config_path) {
    if (config_path.empty()) return RunConfig{};
    try {
        return load_config(config_path);
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
}

std::vector<std::int32_t> load_corpus_checked(const std::string& path) {
    if (!fs::exists(path)) throw UsageError("corpus not found: " + path);
    return load_corpus(path);
}

// Held-out slices from the corpus tail: n_eval windows for reward/PPL
// evaluation followed by n_calib disjoint windows for calibration.
std::pair<EvalSet, EvalSet> tail_eval_sets(const std::vector<std::int32_t>& corpus,
                                           int seq_len, int n_eval, int n_calib) {
    const std::int64_t need = static_cast<std::int64_t>(seq_len) * (n_eval + n_calib);
    if (static_cast<std::int64_t>(corpus.size()) < need)
        throw UsageError("corpus too small for " + std::to_string(n_eval) + "+" +
                         std::to_string(n_calib) + " windows of " + std::to_string(seq_len));
    const std::int64_t offset = static_cast<std::int64_t>(corpus.size()) - need;
    EvalSet eval = make_eval_set(corpus, seq_len, n_eval, offset, "corpus-tail");
    EvalSet calib = make_eval_set(corpus, seq_len, n_calib,
                                  offset + static_cast<std::int64_t>(seq_len) * n_eval,
                                  "corpus-tail-calib");
    return {std::move(eval), std::move(calib)};
}

int cmd_train(const std::string& config_path, const std::string& corpus_path,
              const std::string& out_path, int steps_override, std::int64_t seed_override) {
    RunConfig cfg = resolve_config(config_path);
    if (steps_override >= 0) cfg.train.steps = steps_override;
    if (seed_override >= 0) cfg.seed = static_cast<std::uint64_t>(seed_override);
    cfg.validate();
    const auto corpus = load_corpus_checked(corpus_path);

    std::vector<TrainCurvePoint> curve;
    Model model = train_dense(corpus, cfg.model, cfg.train, cfg.seed, &curve);
    save_model(model, out_path);

    std::ostringstream csv;
    csv << "step,loss,lr\n";
    csv.precision(17);
    for (const auto& p : curve) csv << p.step << "," << p.loss << "," << p.lr << "\n";
    atomic_write_file(out_path + ".curve.csv", csv.str());
    std::cout << "trained " << model.param_count() << " params, checkpoint at " << out_path
              << "\n";
    return kExitOk;
}

int cmd_search(const std::string& config_path, const std::string& model_path,
               const std::string& corpus_path, const std::string& out_dir, double sparsity,
               const std::string& warm_start_path, int steps_override,
               std::int64_t seed_override, bool with_ablation) {
    RunConfig cfg = resolve_config(config_path);
    if (sparsity >= 0) cfg.schedule.s_final = sparsity;
    if (steps_override >= 0) cfg.schedule.total_steps = steps_override;
    if (seed_override >= 0) cfg.seed = static_cast<std::uint64_t>(seed_override);
    cfg.validate();
    if (!fs::exists(model_path)) throw UsageError("model checkpoint not found: " + model_path);
    const auto corpus = load_corpus_checked(corpus_path);

    Model dense = load_model(model_path);
    auto [eval_set, calib_set] =
        tail_eval_sets(corpus, cfg.eval_seq_len, cfg.schedule.n_max, cfg.n_calib_seqs);

    std::optional<PolicyParams> warm;
    if (!warm_start_path.empty()) {
        if (!fs::exists(warm_start_path))
            throw UsageError("warm-start checkpoint not found: " + warm_start_path);
        try {
            warm = warm_start(warm_start_path, 2 * dense.config.n_layers);
        } catch (const std::invalid_argument& e) {
            throw UsageError(e.what());
        }
    }

    auto ctx = SearchContext::build(dense, eval_set, cfg.schedule, cfg.ppo, cfg.seed, cfg.a_min,
                                    cfg.a_max, cfg.grid);
    SearchResult result = run_search(ctx, cfg.schedule.total_steps, std::move(warm));

    fs::create_directories(out_dir);
    atomic_write_file(fs::path(out_dir) / "episodes.jsonl", episodes_to_jsonl(result.log));
    atomic_write_file(fs::path(out_dir) / "policy.json", result.best_policy.to_json());
    save_agent(result.agent, fs::path(out_dir) / "agent.ckpt");
    atomic_write_file(fs::path(out_dir) / "config.json", cfg.to_json());
    {
        nlohmann::ordered_json meta;
        meta["best_ppl"] = result.best_ppl;
        meta["dense_ppl"] = ctx.dense_ppl(cfg.schedule.n_max);
        meta["n_updates"] = result.n_updates;
        meta["total_eval_samples"] = result.total_eval_samples;
        meta["wall_seconds"] = result.wall_seconds;
        atomic_write_file(fs::path(out_dir) / "search_meta.json", meta.dump(2) + "\n");
    }
    if (with_ablation) {
        const auto rows = run_ablation(ctx, cfg.schedule.total_steps, cfg.calib_lambda,
                                       calib_set, cfg.n_calib_seqs);
        atomic_write_file(fs::path(out_dir) / "ablation.csv", ablation_to_csv(rows));
    }
    std::cout << "best policy PPL " << result.best_ppl << " (dense "
              << ctx.dense_ppl(cfg.schedule.n_max) << ") written to " << out_dir << "\n";
    return kExitOk;
}

int cmd_calibrate(const std::string& config_path, const std::string& model_path,
                  const std::string& policy_path, const std::string& corpus_path,
                  const std::string& out_path, double lambda_override,
                  const std::string& report_path) {
    RunConfig cfg = resolve_config(config_path);
    if (lambda_override >= 0) cfg.calib_lambda = lambda_override;
    cfg.validate();
    if (!fs::exists(model_path)) throw UsageError("model checkpoint not found: " + model_path);
    if (!fs::exists(policy_path)) throw UsageError("policy file not found: " + policy_path);
    const auto corpus = load_corpus_checked(corpus_path);

    Model dense = load_model(model_path);
    RetentionPolicy policy;
    try {
        policy = policy_from_json(read_file(policy_path));
    } catch (const nlohmann::json::exception& e) {
        throw UsageError("bad policy file: " + std::string(e.what()));
    }

    auto [eval_set, calib_set] =
        tail_eval_sets(corpus, cfg.eval_seq_len, cfg.schedule.n_max, cfg.n_calib_seqs);
    const auto units = unit_inventory(dense.config);
    const auto scores = wanda_scores(
        dense, collect_activations(dense, eval_set, cfg.schedule.n_max,
                                   all_capture_points(dense)));
    auto pruned = apply_policy(dense, policy, scores, units);
    const auto reports =
        calibrate_model(pruned, dense, calib_set, cfg.n_calib_seqs, cfg.calib_lambda);
    save_model(pruned.model, out_path);
    atomic_write_file(out_path + ".mask.json", pruned.mask.to_json());
    if (!report_path.empty()) atomic_write_file(report_path, report_to_json(reports));
    std::cout << "calibrated " << reports.size() << " sites, checkpoint at " << out_path << "\n";
    return kExitOk;
}

int cmd_eval(const std::string& model_path, const std::string& corpus_path, int n_samples,
             int seq_len, int offset_seqs, const std::string& metrics_path) {
    if (n_samples < 1) throw UsageError("-n must be >= 1");
    if (seq_len < 2) throw UsageError("--seq-len must be >= 2");
    if (!fs::exists(model_path)) throw UsageError("model checkpoint not found: " + model_path);
    const auto corpus = load_corpus_checked(corpus_path);

    Model model = load_model(model_path);
    EvalSet es;
    try {
        es = make_eval_set(corpus, seq_len, n_samples,
                           static_cast<std::int64_t>(offset_seqs) * seq_len, corpus_path);
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    const double ppl = perplexity(model, es, n_samples);
    if (std::isfinite(ppl))
        std::cout << "ppl " << ppl << "\n";
    else
        std::cout << "ppl non-finite\n";  // a valid measurement, not an error
    if (!metrics_path.empty()) {
        nlohmann::ordered_json j;
        if (std::isfinite(ppl))
            j["ppl"] = ppl;
        else
            j["ppl"] = nullptr;
        j["n_samples"] = n_samples;
        j["seq_len"] = seq_len;
        atomic_write_file(metrics_path, j.dump(2) + "\n");
    }
    return kExitOk;
}

int cmd_report(const std::string& run_dir) {
    const fs::path dir(run_dir);
    const fs::path episodes = dir / "episodes.jsonl";
    const fs::path policy_file = dir / "policy.json";
    if (!fs::exists(episodes) || !fs::exists(policy_file))
        throw UsageError("run directory has no episodes.jsonl/policy.json: " + run_dir);

    // reward curve
    std::ostringstream rewards;
    rewards << "step,sigma,alpha,n_eval,reward,ppl\n";
    rewards.precision(17);
    std::istringstream lines(read_file(episodes));
    std::string line;
    while (std::getline(lines, line)) {
        if (line.empty()) continue;
        const auto j = nlohmann::json::parse(line);
        rewards << j.at("step").get<int>() << "," << j.at("sigma").get<double>() << ","
                << j.at("alpha").get<double>() << "," << j.at("n_eval").get<int>() << ","
                << j.at("reward").get<double>() << ",";
        if (j.at("ppl").is_null())
            rewards << "non-finite";
        else
            rewards << j.at("ppl").get<double>();
        rewards << "\n";
    }
    atomic_write_file(dir / "rewards.csv", rewards.str());

    // per-layer retention profile (unit order: layer0 attn, layer0 ffn, ...)
    const auto policy = policy_from_json(read_file(policy_file));
    std::ostringstream retention;
    retention << "unit_index,layer,kind,rate\n";
    retention.precision(17);
    for (std::size_t i = 0; i < policy.rates.size(); ++i)
        retention << (i + 1) << "," << (i / 2) << "," << (i % 2 == 0 ? "attention" : "ffn")
                  << "," << policy.rates[i] << "\n";
    atomic_write_file(dir / "retention.csv", retention.str());

    if (!fs::exists(dir / "ablation.csv"))
        atomic_write_file(dir / "ablation.csv", "arm,ppl,params_kept,seed\n");
    std::cout << "wrote rewards.csv, retention.csv, ablation.csv in " << run_dir << "\n";
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"FastForward-style structured pruning: single-step RL search over layer "
                 "retention policies with budget-exact mapping and ridge calibration"};
    app.require_subcommand(1);

    std::string config_path, corpus_path, model_path, out_path, policy_path, warm_path,
        report_path, metrics_path, run_dir;
    double sparsity = -1.0, lambda = -1.0;
    int steps = -1, n_samples = 8, seq_len = 64, offset_seqs = 0;
    std::int64_t seed = -1;
    bool with_ablation = false;

    auto* train = app.add_subcommand("train", "Train the dense baseline model");
    train->add_option("--config", config_path, "Run config JSON");
    train->add_option("--corpus", corpus_path, "UTF-8 text corpus (byte-level tokens)")
        ->required();
    train->add_option("--out", out_path, "Output checkpoint path")->required();
    train->add_option("--steps", steps, "Override training steps");
    train->add_option("--seed", seed, "Override seed");

    auto* search = app.add_subcommand("search", "Run the pruning-policy search");
    search->add_option("--config", config_path, "Run config JSON");
    search->add_option("--model", model_path, "Dense checkpoint")->required();
    search->add_option("--corpus", corpus_path, "Corpus for evaluation")->required();
    search->add_option("--out", out_path, "Output run directory")->required();
    search->add_option("--sparsity", sparsity, "Final target sparsity");
    search->add_option("--warm-start", warm_path, "Agent checkpoint to warm start from");
    search->add_option("--steps", steps, "Override search episodes");
    search->add_option("--seed", seed, "Override seed");
    search->add_flag("--ablation", with_ablation, "Also run the four-arm ablation");

    auto* calibrate = app.add_subcommand("calibrate", "Prune by a policy and calibrate weights");
    calibrate->add_option("--config", config_path, "Run config JSON");
    calibrate->add_option("--model", model_path, "Dense checkpoint")->required();
    calibrate->add_option("--policy", policy_path, "Retention policy JSON")->required();
    calibrate->add_option("--corpus", corpus_path, "Corpus for calibration samples")->required();
    calibrate->add_option("--out", out_path, "Output pruned checkpoint")->required();
    calibrate->add_option("--lambda", lambda, "Ridge coefficient");
    calibrate->add_option("--report", report_path, "Calibration report JSON path");

    auto* eval = app.add_subcommand("eval", "Measure perplexity of a checkpoint");
    eval->add_option("--model", model_path, "Checkpoint")->required();
    eval->add_option("--corpus", corpus_path, "Corpus")->required();
    eval->add_option("-n", n_samples, "Number of evaluation sequences");
    eval->add_option("--seq-len", seq_len, "Evaluation sequence length");
    eval->add_option("--offset-seqs", offset_seqs, "Skip this many leading windows");
    eval->add_option("--metrics", metrics_path, "metrics.json output path");

    auto* report = app.add_subcommand("report", "Emit plot-ready CSVs for a run directory");
    report->add_option("--run", run_dir, "Run directory from `search`")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitUsage;
    }

    try {
        if (train->parsed()) return cmd_train(config_path, corpus_path, out_path, steps, seed);
        if (search->parsed())
            return cmd_search(config_path, model_path, corpus_path, out_path, sparsity,
                              warm_path, steps, seed, with_ablation);
        if (calibrate->parsed())
            return cmd_calibrate(config_path, model_path, policy_path, corpus_path, out_path,
                                 lambda, report_path);
        if (eval->parsed())
            return cmd_eval(model_path, corpus_path, n_samples, seq_len, offset_seqs,
                            metrics_path);
        if (report->parsed()) return cmd_report(run_dir);
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "runtime error: " << e.what() << "\n";
        return kExitRuntime;
    }
    return kExitUsage;
}
