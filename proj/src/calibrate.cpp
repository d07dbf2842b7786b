// SPDX-License-Identifier: Apache-2.0
#include "ffprune/calibrate.hpp"

#include <Eigen/Cholesky>
#include <Eigen/QR>
#include <algorithm>
#include <stdexcept>

#include <json.hpp>

namespace ffprune {

void CalibrationProblem::validate() const {
    if (x_retained.cols() < 1) throw std::invalid_argument("calibration: need >= 1 retained channel");
    if (x_retained.rows() < 1) throw std::invalid_argument("calibration: need >= 1 row");
    if (x_retained.rows() != x_pruned.rows())
        throw std::invalid_argument("calibration: row count mismatch");
    if (lambda < 0) throw std::invalid_argument("calibration: lambda must be >= 0");
}

CalibrationSolution solve_ridge(const CalibrationProblem& problem) {
    problem.validate();
    const Matrix& xr = problem.x_retained;
    if (problem.lambda == 0.0) {
        // Unregularized: least squares via column-pivoted QR, with an explicit
        // rank check so a singular site fails loudly.
        Eigen::ColPivHouseholderQR<Matrix> qr(xr);
        if (qr.rank() < xr.cols()) {
            const auto diag = qr.matrixR().diagonal().cwiseAbs();
            const double cond = diag.maxCoeff() / std::max(diag.minCoeff(), 1e-300);
            throw std::invalid_argument(
                "solve_ridge: rank-deficient activations with lambda = 0 at site '" +
                problem.site + "' (rank " + std::to_string(qr.rank()) + "/" +
                std::to_string(xr.cols()) + ", cond ~ " + std::to_string(cond) +
                "); use lambda > 0");
        }
        return {qr.solve(problem.x_pruned)};
    }
    Matrix gram = xr.transpose() * xr;
    gram.diagonal().array() += problem.lambda;
    Eigen::LLT<Matrix> llt(gram);
    if (llt.info() != Eigen::Success)
        throw std::runtime_error("solve_ridge: SPD factorization failed at site '" +
                                 problem.site + "'");
    return {llt.solve(xr.transpose() * problem.x_pruned)};
}

Matrix update_weights(const Matrix& w_retained, const Matrix& w_pruned,
                      const CalibrationSolution& solution) {
    if (solution.coeffs.rows() != w_retained.rows() ||
        solution.coeffs.cols() != w_pruned.rows() || w_retained.cols() != w_pruned.cols())
        throw std::invalid_argument("update_weights: shape mismatch");
    return w_retained + solution.coeffs * w_pruned;
}

namespace {

Matrix subsample_rows(const Matrix& x, int max_rows) {
    if (x.rows() <= max_rows) return x;
    Matrix out(max_rows, x.cols());
    for (int i = 0; i < max_rows; ++i) {
        const auto src = static_cast<Eigen::Index>(
            (static_cast<std::int64_t>(i) * x.rows()) / max_rows);
        out.row(i) = x.row(src);
    }
    return out;
}

}  // namespace

std::vector<SiteReport> calibrate_model(PrunedModel& pruned, const Model& dense,
                                        const EvalSet& calib_set, int n_calib_seqs,
                                        double lambda, int max_rows) {
    const auto units = unit_inventory(dense.config);
    if (pruned.mask.kept.size() != units.size())
        throw std::invalid_argument("calibrate_model: mask does not match unit inventory");
    const int hd = dense.head_dim;

    // Only sites with pruned input channels need activations.
    std::vector<CapturePoint> sites;
    for (const auto& u : units) {
        const auto& kept = pruned.mask.kept[static_cast<std::size_t>(u.unit_index - 1)];
        if (static_cast<int>(kept.size()) == u.element_count) continue;
        sites.push_back({u.layer, u.kind == UnitKind::attention_heads ? Site::head_output
                                                                      : Site::ffn_hidden});
    }
    std::vector<SiteReport> reports;
    if (sites.empty()) return reports;
    const auto captures = collect_activations(dense, calib_set, n_calib_seqs, sites);

    for (const auto& u : units) {
        const auto& kept = pruned.mask.kept[static_cast<std::size_t>(u.unit_index - 1)];
        if (static_cast<int>(kept.size()) == u.element_count) continue;
        const bool is_attn = u.kind == UnitKind::attention_heads;
        const Site site = is_attn ? Site::head_output : Site::ffn_hidden;

        const Matrix* rows = nullptr;
        for (const auto& c : captures)
            if (c.point.layer == u.layer && c.point.site == site) rows = &c.rows;
        if (!rows) throw std::runtime_error("calibrate_model: capture missing");

        // Channel index sets; heads expand to their head_dim channel spans.
        std::vector<int> retained_ch, pruned_ch;
        std::vector<bool> is_kept(static_cast<std::size_t>(u.element_count), false);
        for (int e : kept) is_kept[static_cast<std::size_t>(e)] = true;
        for (int e = 0; e < u.element_count; ++e) {
            const int span = is_attn ? hd : 1;
            for (int j = 0; j < span; ++j)
                (is_kept[static_cast<std::size_t>(e)] ? retained_ch : pruned_ch)
                    .push_back(e * span + j);
        }

        Matrix x_all = subsample_rows(*rows, max_rows);
        CalibrationProblem problem;
        problem.lambda = lambda;
        problem.site = site_name(u.layer, site);
        problem.x_retained.resize(x_all.rows(), static_cast<Eigen::Index>(retained_ch.size()));
        problem.x_pruned.resize(x_all.rows(), static_cast<Eigen::Index>(pruned_ch.size()));
        for (std::size_t j = 0; j < retained_ch.size(); ++j)
            problem.x_retained.col(static_cast<Eigen::Index>(j)) = x_all.col(retained_ch[j]);
        for (std::size_t j = 0; j < pruned_ch.size(); ++j)
            problem.x_pruned.col(static_cast<Eigen::Index>(j)) = x_all.col(pruned_ch[j]);

        const auto solution = solve_ridge(problem);

        auto& layer = pruned.model.layers[static_cast<std::size_t>(u.layer)];
        const auto& dense_layer = dense.layers[static_cast<std::size_t>(u.layer)];
        const Matrix& dense_consumer = is_attn ? dense_layer.wo : dense_layer.w_down;
        Matrix w_pruned_rows(static_cast<Eigen::Index>(pruned_ch.size()), dense_consumer.cols());
        for (std::size_t j = 0; j < pruned_ch.size(); ++j)
            w_pruned_rows.row(static_cast<Eigen::Index>(j)) = dense_consumer.row(pruned_ch[j]);
        Matrix& consumer = is_attn ? layer.wo : layer.w_down;
        consumer = update_weights(consumer, w_pruned_rows, solution);

        SiteReport rep;
        rep.site = problem.site;
        rep.n_retained = static_cast<int>(retained_ch.size());
        rep.n_pruned = static_cast<int>(pruned_ch.size());
        rep.residual_before = problem.x_pruned.norm();
        rep.residual_after = (problem.x_pruned - problem.x_retained * solution.coeffs).norm();
        rep.lambda = lambda;
        reports.push_back(std::move(rep));
    }
    return reports;
}

std::string report_to_json(const std::vector<SiteReport>& reports) {
    nlohmann::ordered_json arr = nlohmann::ordered_json::array();
    for (const auto& r : reports) {
        nlohmann::ordered_json j;
        j["site"] = r.site;
        j["n_retained"] = r.n_retained;
        j["n_pruned"] = r.n_pruned;
        j["residual_before"] = r.residual_before;
        j["residual_after"] = r.residual_after;
        j["lambda"] = r.lambda;
        arr.push_back(std::move(j));
    }
    return arr.dump(2) + "\n";
}

}  // namespace ffprune
