// SPDX-License-Identifier: Apache-2.0
#include "ffprune/config.hpp"

#include <fstream>
#include <stdexcept>

#include <json.hpp>

namespace ffprune {

void RunConfig::validate() const {
    model.validate();
    train.validate(model);
    schedule.validate();
    ppo.validate();
    if (!(a_min > 0 && a_min < a_max && a_max <= 1.0))
        throw std::invalid_argument("RunConfig: bad budget bounds");
    if (!(grid > 0)) throw std::invalid_argument("RunConfig: grid must be > 0");
    if (eval_seq_len < 2 || eval_seq_len > model.max_seq_len)
        throw std::invalid_argument("RunConfig: eval_seq_len must be in [2, max_seq_len]");
    if (n_calib_seqs < 1) throw std::invalid_argument("RunConfig: n_calib_seqs must be >= 1");
    if (calib_lambda < 0) throw std::invalid_argument("RunConfig: calib_lambda must be >= 0");
}

std::string RunConfig::to_json() const {
    nlohmann::ordered_json j;
    j["experiment"] = experiment;
    j["seed"] = seed;
    j["model"] = {{"n_layers", model.n_layers},       {"d_model", model.d_model},
                  {"n_heads", model.n_heads},         {"d_ff", model.d_ff},
                  {"vocab_size", model.vocab_size},   {"max_seq_len", model.max_seq_len}};
    j["train"] = {{"steps", train.steps},       {"batch_size", train.batch_size},
                  {"seq_len", train.seq_len},   {"lr", train.lr},
                  {"grad_clip", train.grad_clip}, {"log_every", train.log_every}};
    j["schedule"] = {{"alpha_start", schedule.alpha_start},
                     {"k", schedule.steepness},
                     {"t0", schedule.midpoint},
                     {"s_final", schedule.s_final},
                     {"n_max", schedule.n_max},
                     {"total_steps", schedule.total_steps},
                     {"decreasing_form", schedule.decreasing_form}};
    j["ppo"] = {{"lr", ppo.lr},
                {"clip", ppo.clip_ratio},
                {"batch_episodes", ppo.batch_episodes},
                {"epochs", ppo.epochs},
                {"entropy_coef", ppo.entropy_coef},
                {"value_coef", ppo.value_coef},
                {"max_grad_norm", ppo.max_grad_norm}};
    j["budget"] = {{"a_min", a_min}, {"a_max", a_max}, {"grid", grid}};
    j["eval"] = {{"seq_len", eval_seq_len}, {"n_calib", n_calib_seqs}};
    j["calib"] = {{"lambda", calib_lambda}};
    return j.dump(2) + "\n";
}

RunConfig config_from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw std::invalid_argument(std::string("config: invalid JSON: ") + e.what());
    }
    RunConfig c;
    c.experiment = j.value("experiment", c.experiment);
    c.seed = j.value("seed", c.seed);
    if (j.contains("model")) {
        const auto& m = j["model"];
        c.model.n_layers = m.value("n_layers", c.model.n_layers);
        c.model.d_model = m.value("d_model", c.model.d_model);
        c.model.n_heads = m.value("n_heads", c.model.n_heads);
        c.model.d_ff = m.value("d_ff", c.model.d_ff);
        c.model.vocab_size = m.value("vocab_size", c.model.vocab_size);
        c.model.max_seq_len = m.value("max_seq_len", c.model.max_seq_len);
    }
    if (j.contains("train")) {
        const auto& t = j["train"];
        c.train.steps = t.value("steps", c.train.steps);
        c.train.batch_size = t.value("batch_size", c.train.batch_size);
        c.train.seq_len = t.value("seq_len", c.train.seq_len);
        c.train.lr = t.value("lr", c.train.lr);
        c.train.grad_clip = t.value("grad_clip", c.train.grad_clip);
        c.train.log_every = t.value("log_every", c.train.log_every);
    }
    if (j.contains("schedule")) {
        const auto& s = j["schedule"];
        c.schedule.alpha_start = s.value("alpha_start", c.schedule.alpha_start);
        c.schedule.steepness = s.value("k", c.schedule.steepness);
        c.schedule.midpoint = s.value("t0", c.schedule.midpoint);
        c.schedule.s_final = s.value("s_final", c.schedule.s_final);
        c.schedule.n_max = s.value("n_max", c.schedule.n_max);
        c.schedule.total_steps = s.value("total_steps", c.schedule.total_steps);
        c.schedule.decreasing_form = s.value("decreasing_form", c.schedule.decreasing_form);
    }
    if (j.contains("ppo")) {
        const auto& p = j["ppo"];
        c.ppo.lr = p.value("lr", c.ppo.lr);
        c.ppo.clip_ratio = p.value("clip", c.ppo.clip_ratio);
        c.ppo.batch_episodes = p.value("batch_episodes", c.ppo.batch_episodes);
        c.ppo.epochs = p.value("epochs", c.ppo.epochs);
        c.ppo.entropy_coef = p.value("entropy_coef", c.ppo.entropy_coef);
        c.ppo.value_coef = p.value("value_coef", c.ppo.value_coef);
        c.ppo.max_grad_norm = p.value("max_grad_norm", c.ppo.max_grad_norm);
    }
    if (j.contains("budget")) {
        const auto& b = j["budget"];
        c.a_min = b.value("a_min", c.a_min);
        c.a_max = b.value("a_max", c.a_max);
        c.grid = b.value("grid", c.grid);
    }
    if (j.contains("eval")) {
        const auto& e = j["eval"];
        c.eval_seq_len = e.value("seq_len", c.eval_seq_len);
        c.n_calib_seqs = e.value("n_calib", c.n_calib_seqs);
    }
    if (j.contains("calib")) c.calib_lambda = j["calib"].value("lambda", c.calib_lambda);
    c.validate();
    return c;
}

RunConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("cannot open config: " + path.string());
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return config_from_json(text);
}

}  // namespace ffprune
