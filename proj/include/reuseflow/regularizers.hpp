// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "reuseflow/errors.hpp"
#include "reuseflow/matrix.hpp"

namespace rf {

// Regularizer math runs in double end to end; feature maps come in as
// flattened vectors, gradients go back out at the same length.

inline constexpr double kKlEpsilon = 1e-8;

inline double kl_divergence(std::span<const double> p, std::span<const double> q) {
    if (p.size() != q.size()) throw ShapeError("kl_divergence: length mismatch");
    double sp = 0.0, sq = 0.0;
    for (std::size_t k = 0; k < p.size(); ++k) {
        sp += p[k];
        sq += q[k];
    }
    if (std::fabs(sp - 1.0) > 1e-4 || std::fabs(sq - 1.0) > 1e-4)
        throw ArgumentError("kl_divergence: inputs must sum to 1 within 1e-4");
    double r = 0.0;
    for (std::size_t k = 0; k < p.size(); ++k)
        r += p[k] * std::log((p[k] + kKlEpsilon) / (q[k] + kKlEpsilon));
    return r;
}

// Feature map -> probability vector: adaptive mean-pool to length P, softmax.
inline std::vector<double> prepare_distribution(std::span<const double> f, std::size_t p) {
    const std::vector<double> pooled = adaptive_pool_1d(f, p);
    return softmax_normalize(std::span<const double>(pooled));
}

// One frame's instrumented feature maps, flattened per layer.
struct FeatureMapSet {
    std::int64_t frame = 0;
    std::vector<std::vector<double>> layers;
};

enum class MeanMode { ema, true_mean };

// Per-layer mean distributions mu_i. EMA by default; true_mean keeps an exact
// running average for tests.
struct RunningMeans {
    double momentum = 0.99;
    MeanMode mode = MeanMode::ema;
    std::size_t updates = 0;
    std::vector<std::vector<double>> mu;

    static RunningMeans uniform(std::size_t n_layers, std::size_t p, double momentum = 0.99,
                                MeanMode mode = MeanMode::ema) {
        RunningMeans m;
        m.momentum = momentum;
        m.mode = mode;
        m.mu.assign(n_layers, std::vector<double>(p, 1.0 / static_cast<double>(p)));
        return m;
    }
};

enum class InterPairing { same_layer, cross_layer };

struct RegConfig {
    double lambda = 0.001;    // intra strength
    double lambda_t = 0.0;    // inter strength
    InterPairing pairing = InterPairing::same_layer;
    // Pair weights for cross-layer mode, indexed [i][j], used for j > i.
    // Empty means uniform lambda_t on the selected pairs.
    std::vector<std::vector<double>> lambda_ij;
    std::size_t pooled_len = 64;  // P
    std::size_t window = 2;       // T_w, frames per inter-frame window
};

struct RegResult {
    double value = 0.0;
    std::vector<std::vector<double>> grads;       // d value / d f_i, per layer
    std::vector<std::vector<double>> grads_next;  // inter-frame only: next frame side
};

namespace detail {

// d KL(softmax(y) || mu) / d y, given s = softmax(y).
inline std::vector<double> kl_grad_logits_p(std::span<const double> s,
                                            std::span<const double> mu) {
    std::vector<double> g(s.size());
    double mean = 0.0;
    for (std::size_t k = 0; k < s.size(); ++k) {
        g[k] = std::log((s[k] + kKlEpsilon) / (mu[k] + kKlEpsilon)) + s[k] / (s[k] + kKlEpsilon);
        mean += s[k] * g[k];
    }
    std::vector<double> out(s.size());
    for (std::size_t j = 0; j < s.size(); ++j) out[j] = s[j] * (g[j] - mean);
    return out;
}

// d KL(p || softmax(y)) / d y, given sq = softmax(y).
inline std::vector<double> kl_grad_logits_q(std::span<const double> p,
                                            std::span<const double> sq) {
    std::vector<double> g(sq.size());
    double mean = 0.0;
    for (std::size_t k = 0; k < sq.size(); ++k) {
        g[k] = -p[k] / (sq[k] + kKlEpsilon);
        mean += sq[k] * g[k];
    }
    std::vector<double> out(sq.size());
    for (std::size_t j = 0; j < sq.size(); ++j) out[j] = sq[j] * (g[j] - mean);
    return out;
}

// Adjoint of adaptive_pool_1d: spread each bucket gradient uniformly.
inline void pool_backward_accum(std::span<const double> grad_y, std::size_t n,
                                std::vector<double>& grad_f) {
    const std::size_t p = grad_y.size();
    for (std::size_t k = 0; k < p; ++k) {
        const std::size_t lo = k * n / p;
        const std::size_t hi = ((k + 1) * n + p - 1) / p;
        const double share = grad_y[k] / static_cast<double>(hi - lo);
        for (std::size_t m = lo; m < hi; ++m) grad_f[m] += share;
    }
}

inline double pair_weight(const RegConfig& cfg, std::size_t i, std::size_t j) {
    if (cfg.lambda_ij.empty()) return cfg.lambda_t;
    return cfg.lambda_ij[i][j];
}

}  // namespace detail

// Intra-frame term: r = sum_i KL(prep(f_i) || mu_i), with analytic gradients
// through pooling + softmax + KL.
inline RegResult intra_frame_reg(const FeatureMapSet& fms, const RunningMeans& means,
                                 const RegConfig& cfg) {
    if (fms.layers.size() != means.mu.size())
        throw ConfigError("intra_frame_reg: layer count mismatch with running means");
    RegResult res;
    res.grads.resize(fms.layers.size());
    for (std::size_t i = 0; i < fms.layers.size(); ++i) {
        const std::vector<double>& f = fms.layers[i];
        const std::vector<double> s = prepare_distribution(f, cfg.pooled_len);
        if (means.mu[i].size() != cfg.pooled_len)
            throw ConfigError("intra_frame_reg: running mean length != pooled_len");
        res.value += kl_divergence(s, means.mu[i]);
        const std::vector<double> gy = detail::kl_grad_logits_p(s, means.mu[i]);
        res.grads[i].assign(f.size(), 0.0);
        detail::pool_backward_accum(gy, f.size(), res.grads[i]);
    }
    return res;
}

// Inter-frame term across consecutive frames. Cross-layer mode implements the
// literal double sum over j > i; same-layer mode (the default) pairs each
// layer with itself.
inline RegResult inter_frame_reg(const FeatureMapSet& fms_t, const FeatureMapSet& fms_next,
                                 const RegConfig& cfg) {
    if (fms_next.frame != fms_t.frame + 1)
        throw ArgumentError("inter_frame_reg: frames must be consecutive (got t=" +
                            std::to_string(fms_t.frame) + ", next=" +
                            std::to_string(fms_next.frame) + ")");
    if (fms_t.layers.size() != fms_next.layers.size())
        throw ConfigError("inter_frame_reg: layer count mismatch between frames");
    const std::size_t n_layers = fms_t.layers.size();
    RegResult res;
    res.grads.resize(n_layers);
    res.grads_next.resize(n_layers);
    for (std::size_t i = 0; i < n_layers; ++i) {
        res.grads[i].assign(fms_t.layers[i].size(), 0.0);
        res.grads_next[i].assign(fms_next.layers[i].size(), 0.0);
    }

    std::vector<std::vector<double>> prep_t(n_layers), prep_next(n_layers);
    for (std::size_t i = 0; i < n_layers; ++i) {
        prep_t[i] = prepare_distribution(fms_t.layers[i], cfg.pooled_len);
        prep_next[i] = prepare_distribution(fms_next.layers[i], cfg.pooled_len);
    }

    auto add_pair = [&](std::size_t i, std::size_t j, double weight) {
        if (weight == 0.0) return;
        res.value += weight * kl_divergence(prep_t[i], prep_next[j]);
        std::vector<double> gp = detail::kl_grad_logits_p(prep_t[i], prep_next[j]);
        std::vector<double> gq = detail::kl_grad_logits_q(prep_t[i], prep_next[j]);
        for (auto& e : gp) e *= weight;
        for (auto& e : gq) e *= weight;
        detail::pool_backward_accum(gp, fms_t.layers[i].size(), res.grads[i]);
        detail::pool_backward_accum(gq, fms_next.layers[j].size(), res.grads_next[j]);
    };

    if (cfg.pairing == InterPairing::same_layer) {
        for (std::size_t i = 0; i < n_layers; ++i) add_pair(i, i, cfg.lambda_t);
    } else {
        for (std::size_t i = 0; i + 1 < n_layers; ++i)
            for (std::size_t j = i + 1; j < n_layers; ++j)
                add_pair(i, j, detail::pair_weight(cfg, i, j));
    }
    return res;
}

// mu_i <- m * mu_i + (1-m) * prep(f_i)   (EMA mode)
// mu_i <- running arithmetic mean         (true_mean mode)
inline RunningMeans update_running_mean(RunningMeans means, const FeatureMapSet& fms,
                                        const RegConfig& cfg) {
    if (fms.layers.size() != means.mu.size())
        throw ConfigError("update_running_mean: layer count mismatch");
    for (std::size_t i = 0; i < fms.layers.size(); ++i) {
        const std::vector<double> s = prepare_distribution(fms.layers[i], cfg.pooled_len);
        if (means.mu[i].size() != s.size())
            throw ConfigError("update_running_mean: pooled length mismatch");
        if (means.mode == MeanMode::true_mean) {
            const double k = static_cast<double>(means.updates);
            for (std::size_t j = 0; j < s.size(); ++j)
                means.mu[i][j] = (means.mu[i][j] * k + s[j]) / (k + 1.0);
        } else {
            const double m = means.momentum;
            for (std::size_t j = 0; j < s.size(); ++j)
                means.mu[i][j] = m * means.mu[i][j] + (1.0 - m) * s[j];
        }
    }
    ++means.updates;
    return means;
}

}  // namespace rf
