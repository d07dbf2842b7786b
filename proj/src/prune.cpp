// SPDX-License-Identifier: Apache-2.0
#include "ffprune/prune.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include <json.hpp>

namespace ffprune {

std::vector<PrunableUnit> unit_inventory(const ModelConfig& config) {
    config.validate();
    std::vector<PrunableUnit> units;
    const std::int64_t d = config.d_model;
    const std::int64_t attn_params = 4 * d * d;
    const std::int64_t ffn_params = 2 * d * static_cast<std::int64_t>(config.d_ff);
    for (int l = 0; l < config.n_layers; ++l) {
        units.push_back({static_cast<int>(units.size()) + 1, l, UnitKind::attention_heads,
                         config.n_heads, attn_params});
        units.push_back({static_cast<int>(units.size()) + 1, l, UnitKind::ffn_channels,
                         config.d_ff, ffn_params});
    }
    return units;
}

std::vector<double> unit_weights(const std::vector<PrunableUnit>& units) {
    std::vector<double> w;
    w.reserve(units.size());
    for (const auto& u : units) w.push_back(static_cast<double>(u.param_count));
    return w;
}

namespace {

const Matrix& find_capture(const std::vector<ActivationCapture>& captures, int layer,
                           Site site) {
    for (const auto& c : captures)
        if (c.point.layer == layer && c.point.site == site) {
            if (c.rows.size() == 0)
                throw std::invalid_argument("wanda_scores: empty capture at " +
                                            site_name(layer, site));
            return c.rows;
        }
    throw std::invalid_argument("wanda_scores: missing capture site " + site_name(layer, site));
}

}  // namespace

ImportanceScores wanda_scores(const Model& m, const std::vector<ActivationCapture>& captures) {
    ImportanceScores scores;
    const int hd = m.head_dim;
    for (int li = 0; li < static_cast<int>(m.layers.size()); ++li) {
        const auto& l = m.layers[static_cast<std::size_t>(li)];
        const Vector n_attn_in =
            find_capture(captures, li, Site::attn_input).colwise().norm().transpose();
        const Vector n_head_out =
            find_capture(captures, li, Site::head_output).colwise().norm().transpose();
        const Vector n_ffn_in =
            find_capture(captures, li, Site::ffn_input).colwise().norm().transpose();
        const Vector n_hidden =
            find_capture(captures, li, Site::ffn_hidden).colwise().norm().transpose();

        // Attention heads: |W| * ||x||_2 over the head's q/k/v column slices
        // (inputs = residual stream) plus its o row slice (inputs = the head's
        // own output channels).
        Eigen::VectorXd head_scores(l.n_heads);
        for (int h = 0; h < l.n_heads; ++h) {
            const int c0 = h * hd;
            double s = 0.0;
            for (const Matrix* w : {&l.wq, &l.wk, &l.wv})
                s += (n_attn_in.transpose() * w->middleCols(c0, hd).cwiseAbs()).sum();
            s += (n_head_out.segment(c0, hd).transpose() *
                  l.wo.middleRows(c0, hd).cwiseAbs())
                     .sum();
            head_scores(h) = s;
        }

        // FFN channels: producing up-projection column + consuming down row.
        Eigen::VectorXd ch_scores =
            (n_ffn_in.transpose() * l.w_up.cwiseAbs()).transpose().array() +
            (l.w_down.cwiseAbs().rowwise().sum().array() * n_hidden.array());

        scores.per_unit.push_back(std::move(head_scores));
        scores.per_unit.push_back(std::move(ch_scores));
    }
    return scores;
}

namespace {

// Top-k by score, ties to the lower element index; result ascending.
std::vector<int> top_elements(const Eigen::VectorXd& scores, int k) {
    std::vector<int> idx(static_cast<std::size_t>(scores.size()));
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(),
                     [&](int a, int b) { return scores(a) > scores(b); });
    idx.resize(static_cast<std::size_t>(k));
    std::sort(idx.begin(), idx.end());
    return idx;
}

int kept_count(double rate, int elements) {
    const int k = static_cast<int>(std::ceil(rate * elements - 1e-9));
    return std::max(1, k);
}

}  // namespace

std::int64_t PruneMask::kept_params(const std::vector<PrunableUnit>& units, int d_model,
                                    int head_dim) const {
    if (kept.size() != units.size()) throw std::invalid_argument("PruneMask: size mismatch");
    std::int64_t total = 0;
    for (std::size_t i = 0; i < units.size(); ++i) {
        const auto n = static_cast<std::int64_t>(kept[i].size());
        if (units[i].kind == UnitKind::attention_heads)
            total += 4 * n * head_dim * d_model;
        else
            total += 2 * n * d_model;
    }
    return total;
}

std::string PruneMask::to_json() const {
    nlohmann::ordered_json arr = nlohmann::ordered_json::array();
    for (std::size_t i = 0; i < kept.size(); ++i) {
        nlohmann::ordered_json entry;
        entry["unit_index"] = i + 1;
        entry["kept_element_indices"] = kept[i];
        arr.push_back(std::move(entry));
    }
    return arr.dump(2) + "\n";
}

PruneMask mask_from_json(const std::string& text) {
    const auto j = nlohmann::json::parse(text);
    PruneMask mask;
    mask.kept.resize(j.size());
    for (const auto& entry : j) {
        const auto idx = entry.at("unit_index").get<std::size_t>();
        if (idx < 1 || idx > mask.kept.size())
            throw std::invalid_argument("PruneMask: bad unit_index");
        mask.kept[idx - 1] = entry.at("kept_element_indices").get<std::vector<int>>();
    }
    return mask;
}

PrunedModel apply_policy(const Model& m, const RetentionPolicy& policy,
                         const ImportanceScores& scores,
                         const std::vector<PrunableUnit>& units) {
    if (policy.rates.size() != units.size() || scores.per_unit.size() != units.size())
        throw std::invalid_argument("apply_policy: dimension mismatch");
    for (double r : policy.rates)
        if (r < 0.0 || r > 1.0)
            throw std::invalid_argument("apply_policy: rate outside [0, 1]");

    PrunedModel pruned;
    pruned.model = m;
    pruned.policy = policy;
    pruned.mask.kept.resize(units.size());
    const int hd = m.head_dim;

    for (std::size_t ui = 0; ui < units.size(); ++ui) {
        const auto& unit = units[ui];
        if (scores.per_unit[ui].size() != unit.element_count)
            throw std::invalid_argument("apply_policy: score length mismatch for unit " +
                                        std::to_string(unit.unit_index));
        const int k = kept_count(policy.rates[ui], unit.element_count);
        if (k < 1) throw std::invalid_argument("apply_policy: kept count would be 0");
        const auto kept = top_elements(scores.per_unit[ui], k);
        auto& l = pruned.model.layers[static_cast<std::size_t>(unit.layer)];

        if (unit.kind == UnitKind::attention_heads) {
            Matrix wq(m.config.d_model, k * hd), wk(m.config.d_model, k * hd),
                wv(m.config.d_model, k * hd), wo(k * hd, m.config.d_model);
            const auto& src = m.layers[static_cast<std::size_t>(unit.layer)];
            for (int j = 0; j < k; ++j) {
                const int h = kept[static_cast<std::size_t>(j)];
                wq.middleCols(j * hd, hd) = src.wq.middleCols(h * hd, hd);
                wk.middleCols(j * hd, hd) = src.wk.middleCols(h * hd, hd);
                wv.middleCols(j * hd, hd) = src.wv.middleCols(h * hd, hd);
                wo.middleRows(j * hd, hd) = src.wo.middleRows(h * hd, hd);
            }
            l.wq = std::move(wq);
            l.wk = std::move(wk);
            l.wv = std::move(wv);
            l.wo = std::move(wo);
            l.n_heads = k;
        } else {
            const auto& src = m.layers[static_cast<std::size_t>(unit.layer)];
            Matrix w_up(m.config.d_model, k), w_down(k, m.config.d_model);
            for (int j = 0; j < k; ++j) {
                const int c = kept[static_cast<std::size_t>(j)];
                w_up.col(j) = src.w_up.col(c);
                w_down.row(j) = src.w_down.row(c);
            }
            l.w_up = std::move(w_up);
            l.w_down = std::move(w_down);
            l.d_ff = k;
        }
        pruned.mask.kept[ui] = kept;
    }
    return pruned;
}

}  // namespace ffprune
