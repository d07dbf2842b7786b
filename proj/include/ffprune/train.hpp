// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "ffprune/model.hpp"

namespace ffprune {

struct TrainConfig {
    int steps = 5000;
    int batch_size = 8;
    int seq_len = 64;  // training window; must be <= max_seq_len
    double lr = 3e-4;
    double lr_floor_frac = 0.1;  // cosine decay floor as a fraction of lr
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double grad_clip = 1.0;
    int log_every = 50;

    void validate(const ModelConfig& mc) const;
};

struct TrainCurvePoint {
    int step;
    double loss;
    double lr;
};

/// Accumulates dL/dparams for one sequence into `grads` (scaled by `scale`),
/// where L is the summed token NLL. Returns (nll_sum, n_predicted). Exposed
/// for the finite-difference gradient check.
std::pair<double, std::int64_t> loss_and_grad(const Model& m,
                                              std::span<const std::int32_t> tokens,
                                              Model& grads, double scale);

/// Trains a freshly initialized model on random corpus windows with Adam and
/// cosine-decayed learning rate. Deterministic given (corpus, config, seed).
/// Throws on non-finite loss (message includes the step index) and on a
/// corpus shorter than 10 x max_seq_len.
Model train_dense(std::span<const std::int32_t> corpus, const ModelConfig& mc,
                  const TrainConfig& tc, std::uint64_t seed,
                  std::vector<TrainCurvePoint>* curve = nullptr);

}  // namespace ffprune
