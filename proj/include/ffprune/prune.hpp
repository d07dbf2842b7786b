// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ffprune/budget_map.hpp"
#include "ffprune/model.hpp"

namespace ffprune {

enum class UnitKind { attention_heads, ffn_channels };

/// One structured pruning target: a layer's attention heads or FFN channels.
struct PrunableUnit {
    int unit_index = 0;  // 1-based, contiguous
    int layer = 0;
    UnitKind kind = UnitKind::attention_heads;
    int element_count = 0;       // heads or channels
    std::int64_t param_count = 0;  // w_i
};

/// 2 * n_layers units in (layer0 attention, layer0 ffn, layer1 attention, ...)
/// order. Attention weight = that layer's q/k/v/o parameters; FFN weight =
/// up + down projections.
std::vector<PrunableUnit> unit_inventory(const ModelConfig& config);

std::vector<double> unit_weights(const std::vector<PrunableUnit>& units);

/// Per-unit element importance, one score per head or channel.
struct ImportanceScores {
    std::vector<Eigen::VectorXd> per_unit;
};

/// Wanda-style scores: per-weight |W| * ||x_input||_2 summed over every weight
/// belonging to an element, on both its producer and consumer side. Requires
/// the captures from all_capture_points on the dense model.
ImportanceScores wanda_scores(const Model& m, const std::vector<ActivationCapture>& captures);

/// Kept element indices per unit (ascending).
struct PruneMask {
    std::vector<std::vector<int>> kept;

    std::int64_t kept_params(const std::vector<PrunableUnit>& units, int d_model,
                             int head_dim) const;
    std::string to_json() const;
};

PruneMask mask_from_json(const std::string& text);

struct PrunedModel {
    Model model;
    PruneMask mask;
    RetentionPolicy policy;
};

/// Keeps the top-ceil(rate * element_count) elements per unit by score (ties
/// to the lower index, floor of one element) and materializes the reduced
/// matrices. Removed heads drop their q/k/v columns and o rows; removed FFN
/// channels drop up columns and down rows.
PrunedModel apply_policy(const Model& m, const RetentionPolicy& policy,
                         const ImportanceScores& scores,
                         const std::vector<PrunableUnit>& units);

}  // namespace ffprune
