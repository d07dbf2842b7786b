// SPDX-License-Identifier: Apache-2.0
//
// Internal cached forward pass shared by evaluation, activation capture and
// the trainer's backward pass. Not part of the public headers.
#pragma once

#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "ffprune/model.hpp"

namespace ffprune::detail {

constexpr double kLnEps = 1e-5;

struct LnCache {
    Matrix xhat;     // L x d
    Vector inv_std;  // per row
};

struct LayerCache {
    LnCache ln1, ln2;
    Matrix a_in;                // LN1 output, input to q/k/v
    Matrix q, k, v;             // L x (heads * head_dim)
    std::vector<Matrix> probs;  // per head, L x L attention weights
    Matrix head_out;            // concatenated head outputs
    Matrix f_in;                // LN2 output, input to w_up
    Matrix z;                   // pre-GELU
    Matrix u;                   // post-GELU, input to w_down
};

struct ForwardCache {
    std::vector<LayerCache> layers;
    LnCache lnf;
    Matrix h_final;  // post-final-norm, input to the output head
};

using CaptureHook = std::function<void(int layer, Site site, const Matrix&)>;

// Row-wise layer norm. Fills `cache` when non-null.
inline Matrix layer_norm(const Matrix& x, const Vector& g, const Vector& b, LnCache* cache) {
    const auto rows = x.rows();
    const auto cols = x.cols();
    Matrix xhat(rows, cols);
    Vector inv_std(rows);
    for (Eigen::Index i = 0; i < rows; ++i) {
        const double mu = x.row(i).mean();
        const double var = (x.row(i).array() - mu).square().mean();
        const double is = 1.0 / std::sqrt(var + kLnEps);
        xhat.row(i) = (x.row(i).array() - mu) * is;
        inv_std(i) = is;
    }
    Matrix y = (xhat.array().rowwise() * g.transpose().array()).rowwise() +
               b.transpose().array();
    if (cache) {
        cache->xhat = std::move(xhat);
        cache->inv_std = std::move(inv_std);
    }
    return y;
}

inline double gelu_scalar(double x) { return 0.5 * x * std::erfc(-x * M_SQRT1_2); }

inline double gelu_grad_scalar(double x) {
    const double phi = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
    return 0.5 * std::erfc(-x * M_SQRT1_2) + x * phi;
}

// Full forward pass. Returns logits (L x vocab). `cache` and `hook` optional.
Matrix forward(const Model& m, std::span<const std::int32_t> tokens, ForwardCache* cache,
               const CaptureHook* hook);

}  // namespace ffprune::detail
