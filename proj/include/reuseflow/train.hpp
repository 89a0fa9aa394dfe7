// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "reuseflow/model.hpp"
#include "reuseflow/regularizers.hpp"

namespace rf {

struct TrainConfig {
    double lr = 0.01;
    double momentum = 0.9;
    std::size_t epochs = 10;      // desk-scale default; the reference setup ran 50
    std::size_t batch_size = 16;
    double lambda = 0.001;        // intra-frame strength; overrides RegConfig.lambda
    double lambda_t = 0.0;        // inter-frame strength; overrides RegConfig.lambda_t
    std::uint64_t seed = 0;
    bool reuse_in_training = false;

    void validate() const {
        if (lr <= 0.0 && lr != 0.0) throw ConfigError("TrainConfig: lr must be >= 0");
        if (batch_size < 1) throw ConfigError("TrainConfig: batch_size must be >= 1");
        if (epochs < 1) throw ConfigError("TrainConfig: epochs must be >= 1");
    }
};

struct EpochReport {
    std::size_t epoch = 0;
    double task_loss = 0.0;  // mean cross-entropy per frame
    double r = 0.0;          // mean intra-frame regularizer per frame (unweighted)
    double r_t = 0.0;        // mean inter-frame term per frame (carries lambda_ij)
    std::vector<double> sigma_per_layer;
    std::vector<double> recon_mse_per_layer;
    double metric = 0.0;  // exact-mode accuracy on the training stream, percent

    bool all_finite() const {
        for (double v : sigma_per_layer)
            if (!std::isfinite(v)) return false;
        for (double v : recon_mse_per_layer)
            if (!std::isfinite(v)) return false;
        return std::isfinite(task_loss) && std::isfinite(r) && std::isfinite(r_t) &&
               std::isfinite(metric);
    }
};

namespace detail {

struct CeResult {
    double mean_loss = 0.0;
    DenseMatrix d_logits;  // already scaled by 1/batch
};

inline CeResult cross_entropy(const DenseMatrix& logits, const FrameStream& s,
                              std::size_t f0) {
    CeResult ce;
    ce.d_logits = DenseMatrix(logits.rows(), logits.cols());
    const double inv_b = 1.0 / static_cast<double>(logits.rows());
    for (std::size_t f = 0; f < logits.rows(); ++f) {
        const auto row = logits.row(f);
        const std::vector<float> sm = softmax_normalize(std::span<const float>(row));
        const std::int32_t label = s.labels[f0 + f];
        ce.mean_loss -= std::log(static_cast<double>(sm[label]) + 1e-30) * inv_b;
        for (std::size_t j = 0; j < logits.cols(); ++j)
            ce.d_logits(f, j) = static_cast<float>(
                (sm[j] - (static_cast<std::size_t>(label) == j ? 1.0 : 0.0)) * inv_b);
    }
    return ce;
}

}  // namespace detail

struct EvalResult {
    double metric = 0.0;  // accuracy, percent
    ReuseStats total;
    std::vector<LayerStats> per_layer;
};

// Deterministic evaluation; reuse clustering (when enabled) happens on the
// fly, not epoch-frozen. Frames are processed in windows of `window`
// consecutive frames (0 = whole stream at once); clustering never crosses a
// window, which mirrors bounded-buffer streaming inference.
inline EvalResult evaluate(const ToyModel& m, const FrameStream& s, bool use_reuse,
                           bool collect_mse = true, std::size_t window = 0) {
    if (s.n_frames == 0) throw ArgumentError("evaluate: empty stream");
    if (s.labels.empty()) throw ArgumentError("evaluate: stream has no labels");
    if (window == 0) window = s.n_frames;
    EvalResult ev;
    std::size_t correct = 0;
    std::vector<LayerStats> acc;
    for (std::size_t f0 = 0; f0 < s.n_frames; f0 += window) {
        const std::size_t f1 = std::min(s.n_frames, f0 + window);
        ForwardResult fwd = forward_batch(m, s, f0, f1, use_reuse, nullptr, collect_mse);
        for (std::size_t f = 0; f < f1 - f0; ++f) {
            std::size_t best = 0;
            for (std::size_t j = 1; j < fwd.logits.cols(); ++j)
                if (fwd.logits(f, j) > fwd.logits(f, best)) best = j;
            if (static_cast<std::int32_t>(best) == s.labels[f0 + f]) ++correct;
        }
        if (acc.empty()) {
            acc = fwd.layer_stats;
        } else {
            for (std::size_t l = 0; l < acc.size(); ++l)
                acc[l].stats += fwd.layer_stats[l].stats;
        }
    }
    ev.metric = 100.0 * static_cast<double>(correct) / static_cast<double>(s.n_frames);
    ev.per_layer = acc;
    for (const auto& ls : acc) ev.total += ls.stats;
    return ev;
}

struct TrainOutput {
    ToyModel model;
    std::vector<EpochReport> reports;
};

// v <- momentum * v - lr * g; theta <- theta + v
inline void sgd_momentum_step(std::vector<float>& theta, std::vector<float>& velocity,
                              std::span<const float> grad, double lr, double momentum) {
    for (std::size_t k = 0; k < theta.size(); ++k) {
        velocity[k] = static_cast<float>(momentum * velocity[k] - lr * grad[k]);
        theta[k] += velocity[k];
    }
}

namespace detail {

// Shared SGD-with-momentum loop. The zero-regularization, exact-kernel
// configuration is the standard-training baseline; sa_train layers the
// regularizers and the epoch-frozen reuse forward on top of the same code
// path, so disabling them reproduces the baseline bit for bit.
inline TrainOutput train_loop(ToyModel model, const FrameStream& s, const TrainConfig& cfg,
                              RegConfig reg, bool with_reg, bool with_reuse) {
    cfg.validate();
    if (s.labels.empty()) throw ArgumentError("train: stream has no labels");
    if (s.n_frames == 0) throw ArgumentError("train: empty stream");
    reg.lambda = cfg.lambda;
    reg.lambda_t = cfg.lambda_t;

    const std::size_t n_inst = 2;  // instrumented feature maps per architecture
    RunningMeans means = RunningMeans::uniform(n_inst, reg.pooled_len);
    std::vector<DenseMatrix> velocity;
    for (const auto& p : model.params) velocity.emplace_back(p.rows(), p.cols());

    const std::size_t n_layers = model.layer_names().size();
    TrainOutput out;

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::optional<FrozenAssignments> frozen;
        if (with_reuse) frozen = calibrate_assignments(model, s);

        double ce_acc = 0.0, r_acc = 0.0, rt_acc = 0.0;
        std::vector<ReuseStats> layer_acc(n_layers);
        std::size_t frames_seen = 0;

        for (std::size_t b0 = 0; b0 < s.n_frames; b0 += cfg.batch_size) {
            const std::size_t b1 = std::min(s.n_frames, b0 + cfg.batch_size);
            const std::size_t batch = b1 - b0;
            ForwardResult fwd = forward_batch(model, s, b0, b1, with_reuse,
                                              frozen ? &*frozen : nullptr,
                                              /*collect_mse=*/with_reuse);
            CeResult ce = cross_entropy(fwd.logits, s, b0);
            if (!std::isfinite(ce.mean_loss))
                throw TrainingError("non-finite task loss at epoch " + std::to_string(epoch));
            ce_acc += ce.mean_loss * batch;
            for (std::size_t l = 0; l < n_layers; ++l)
                layer_acc[l] += fwd.layer_stats[l].stats;

            std::vector<std::vector<std::vector<double>>> feature_grads;
            double batch_r = 0.0, batch_rt = 0.0;
            if (with_reg) {
                feature_grads.resize(batch);
                for (std::size_t f = 0; f < batch; ++f)
                    for (const auto& layer : fwd.features[f])
                        feature_grads[f].emplace_back(layer.size(), 0.0);
                const double inv_b = 1.0 / static_cast<double>(batch);

                if (cfg.lambda > 0.0) {
                    for (std::size_t f = 0; f < batch; ++f) {
                        FeatureMapSet fms;
                        fms.frame = static_cast<std::int64_t>(b0 + f);
                        fms.layers = fwd.features[f];
                        RegResult intra = intra_frame_reg(fms, means, reg);
                        batch_r += intra.value;
                        for (std::size_t l = 0; l < n_inst; ++l)
                            for (std::size_t k = 0; k < intra.grads[l].size(); ++k)
                                feature_grads[f][l][k] +=
                                    cfg.lambda * inv_b * intra.grads[l][k];
                    }
                }
                if (cfg.lambda_t > 0.0 && batch >= 2) {
                    // consecutive pairs within the trailing window of T_w frames
                    const std::size_t win = std::min<std::size_t>(reg.window, batch);
                    for (std::size_t f = batch - win; f + 1 < batch; ++f) {
                        FeatureMapSet a, b;
                        a.frame = static_cast<std::int64_t>(b0 + f);
                        b.frame = a.frame + 1;
                        a.layers = fwd.features[f];
                        b.layers = fwd.features[f + 1];
                        RegResult inter = inter_frame_reg(a, b, reg);
                        batch_rt += inter.value;
                        for (std::size_t l = 0; l < n_inst; ++l) {
                            for (std::size_t k = 0; k < inter.grads[l].size(); ++k)
                                feature_grads[f][l][k] += inv_b * inter.grads[l][k];
                            for (std::size_t k = 0; k < inter.grads_next[l].size(); ++k)
                                feature_grads[f + 1][l][k] += inv_b * inter.grads_next[l][k];
                        }
                    }
                }
                r_acc += batch_r;
                rt_acc += batch_rt;
            }

            std::vector<DenseMatrix> grads = backward_batch(
                model, fwd, ce.d_logits, with_reg ? &feature_grads : nullptr);

            for (std::size_t p = 0; p < model.params.size(); ++p)
                sgd_momentum_step(model.params[p].data(), velocity[p].data(),
                                  grads[p].data(), cfg.lr, cfg.momentum);
            if (!model.all_finite())
                throw TrainingError("non-finite parameters at epoch " +
                                    std::to_string(epoch));

            if (with_reg && cfg.lambda > 0.0) {
                for (std::size_t f = 0; f < batch; ++f) {
                    FeatureMapSet fms;
                    fms.frame = static_cast<std::int64_t>(b0 + f);
                    fms.layers = fwd.features[f];
                    means = update_running_mean(std::move(means), fms, reg);
                }
            }
            frames_seen += batch;
        }

        EpochReport rep;
        rep.epoch = epoch;
        rep.task_loss = ce_acc / static_cast<double>(frames_seen);
        rep.r = r_acc / static_cast<double>(frames_seen);
        rep.r_t = rt_acc / static_cast<double>(frames_seen);
        for (std::size_t l = 0; l < n_layers; ++l) {
            rep.sigma_per_layer.push_back(layer_acc[l].sigma);
            rep.recon_mse_per_layer.push_back(layer_acc[l].recon_mse);
        }
        rep.metric = evaluate(model, s, /*use_reuse=*/false, /*collect_mse=*/false).metric;
        if (!rep.all_finite())
            throw TrainingError("non-finite epoch report at epoch " + std::to_string(epoch));
        out.reports.push_back(std::move(rep));
    }
    out.model = std::move(model);
    return out;
}

}  // namespace detail

// Standard pre-training: exact kernels, no regularizers.
inline ToyModel pretrain(ToyModel model, const FrameStream& s, TrainConfig cfg) {
    cfg.lambda = 0.0;
    cfg.lambda_t = 0.0;
    return detail::train_loop(std::move(model), s, cfg, RegConfig{}, /*with_reg=*/false,
                              /*with_reuse=*/false)
        .model;
}

inline TrainOutput pretrain_with_reports(ToyModel model, const FrameStream& s,
                                         TrainConfig cfg) {
    cfg.lambda = 0.0;
    cfg.lambda_t = 0.0;
    return detail::train_loop(std::move(model), s, cfg, RegConfig{}, false, false);
}

// Similarity-aware fine-tuning: epoch-frozen LSH assignments, reuse forward,
// task loss + lambda * r + r_t, SGD with momentum.
inline TrainOutput sa_train(ToyModel model, const FrameStream& s, const TrainConfig& cfg,
                            const RegConfig& reg) {
    const bool with_reg = cfg.lambda > 0.0 || cfg.lambda_t > 0.0;
    return detail::train_loop(std::move(model), s, cfg, reg, with_reg,
                              cfg.reuse_in_training);
}

}  // namespace rf
