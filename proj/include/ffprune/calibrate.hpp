// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "ffprune/model.hpp"
#include "ffprune/prune.hpp"

namespace ffprune {

/// Ridge reconstruction of pruned-channel activations from retained ones at a
/// single consumer site.
struct CalibrationProblem {
    Matrix x_retained;  // rows x |R|
    Matrix x_pruned;    // rows x |P|
    double lambda = 0.01;
    std::string site;

    void validate() const;
};

/// Coefficient matrix S*, shape |R| x |P|; column p reconstructs pruned
/// channel p from the retained channels.
struct CalibrationSolution {
    Matrix coeffs;
};

/// S* = (X_R^T X_R + lambda I)^-1 X_R^T X_P via a symmetric positive-definite
/// solve. lambda = 0 requires full column rank (throws with a condition
/// diagnostic otherwise).
CalibrationSolution solve_ridge(const CalibrationProblem& problem);

/// Folds the reconstruction into the consumer weights (channels as rows):
/// W'_R = W_R + S* W_P.
Matrix update_weights(const Matrix& w_retained, const Matrix& w_pruned,
                      const CalibrationSolution& solution);

struct SiteReport {
    std::string site;
    int n_retained = 0;
    int n_pruned = 0;
    double residual_before = 0.0;  // ||X_P||_F
    double residual_after = 0.0;   // ||X_P - X_R S*||_F
    double lambda = 0.0;
};

std::string report_to_json(const std::vector<SiteReport>& reports);

/// Calibrates every consumer layer with pruned input channels (attention
/// output projections for pruned heads, FFN down projections for pruned
/// channels) from dense-model activations on the calibration slice. Sites are
/// independent; layers without pruned inputs are untouched. Calibration rows
/// are capped (uniform subsample) to bound the solve.
std::vector<SiteReport> calibrate_model(PrunedModel& pruned, const Model& dense,
                                        const EvalSet& calib_set, int n_calib_seqs,
                                        double lambda, int max_rows = 8192);

}  // namespace ffprune
