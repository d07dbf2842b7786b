// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "ffprune/agent.hpp"
#include "ffprune/curriculum.hpp"
#include "ffprune/model.hpp"
#include "ffprune/train.hpp"

namespace ffprune {

/// One experiment's knobs, loadable from a single JSON file. Every field has
/// a default; the file may override any subset.
struct RunConfig {
    std::string experiment = "ffprune";
    std::uint64_t seed = 1;
    ModelConfig model;
    TrainConfig train;
    ScheduleConfig schedule;
    PPOConfig ppo;
    double a_min = 0.1, a_max = 1.0, grid = 0.01;
    int eval_seq_len = 64;
    int n_calib_seqs = 32;
    double calib_lambda = 0.01;

    void validate() const;  // throws std::invalid_argument
    std::string to_json() const;
};

RunConfig config_from_json(const std::string& text);
RunConfig load_config(const std::filesystem::path& path);

}  // namespace ffprune
