// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "reuseflow/attention.hpp"
#include "reuseflow/lsh.hpp"
#include "reuseflow/matrix.hpp"
#include "reuseflow/reuse.hpp"
#include "reuseflow/rng.hpp"
#include "reuseflow/stream.hpp"

namespace rf {

enum class Arch { tiny_convnet, tiny_vit };

inline std::string arch_name(Arch a) {
    return a == Arch::tiny_convnet ? "tiny_convnet" : "tiny_vit";
}

inline Arch arch_from_name(const std::string& s) {
    if (s == "tiny_convnet") return Arch::tiny_convnet;
    if (s == "tiny_vit") return Arch::tiny_vit;
    throw ConfigError("unknown architecture tag: " + s);
}

struct ModelConfig {
    Arch arch = Arch::tiny_convnet;
    std::size_t in_h = 16, in_w = 16, in_c = 1;
    std::size_t n_classes = 2;
    // tiny_vit only
    std::size_t patch = 4, d_model = 8, n_heads = 2, d_ff = 16;

    void validate() const {
        if (n_classes < 2) throw ConfigError("ModelConfig: need >= 2 classes");
        if (arch == Arch::tiny_convnet) {
            if (in_h < 5 || in_w < 5)
                throw ConfigError("ModelConfig: tiny_convnet needs >= 5x5 frames");
        } else {
            if (patch < 1 || in_h % patch != 0 || in_w % patch != 0)
                throw ConfigError("ModelConfig: frame dims must be divisible by patch");
            if (n_heads < 1 || d_model % n_heads != 0)
                throw ConfigError("ModelConfig: d_model must split across heads");
        }
    }
};

// Serializable hasher hyperparameters; projections are regenerated from the
// triple, never stored.
struct LshSpec {
    std::size_t input_dim = 8;
    std::size_t hash_size = 8;
    std::uint64_t seed = 0;

    LshHasher build() const { return new_hasher(input_dim, hash_size, seed); }
};

// ---------------------------------------------------------------------------
// ToyModel: two desk-scale architectures.
//   tiny_convnet: conv3x3(8) -> relu -> conv3x3(16) -> relu -> GAP -> FC
//   tiny_vit:     patch-embed -> transformer block (2 heads) -> mean -> FC
// Parameters are a flat list of matrices in a fixed, documented order.
// ---------------------------------------------------------------------------

struct ToyModel {
    ModelConfig cfg;
    std::vector<DenseMatrix> params;
    std::vector<LshSpec> hashers;  // one per reuse-capable layer, layer_names() order

    static constexpr std::size_t kConv1Filters = 8;
    static constexpr std::size_t kConv2Filters = 16;

    std::vector<std::string> layer_names() const {
        if (cfg.arch == Arch::tiny_convnet) return {"conv1", "conv2", "fc"};
        return {"patch_embed", "attn_qkv", "attn_mlp", "fc"};
    }

    ConvShape conv1_shape() const {
        return ConvShape{cfg.in_h, cfg.in_w, cfg.in_c, 3, 3, kConv1Filters};
    }
    ConvShape conv2_shape() const {
        return ConvShape{cfg.in_h - 2, cfg.in_w - 2, kConv1Filters, 3, 3, kConv2Filters};
    }
    std::size_t n_tokens() const { return (cfg.in_h / cfg.patch) * (cfg.in_w / cfg.patch); }

    // tiny_vit parameter layout:
    //   [0] embed, then per head q,k,v, then w_o, w_1, w_2, fc
    AttentionWeights attention_weights() const {
        AttentionWeights w;
        w.n_heads = cfg.n_heads;
        w.d_model = cfg.d_model;
        w.d_k = cfg.d_model / cfg.n_heads;
        w.d_ff = cfg.d_ff;
        std::size_t p = 1;
        for (std::size_t h = 0; h < cfg.n_heads; ++h) {
            w.w_q.push_back(params[p++]);
            w.w_k.push_back(params[p++]);
            w.w_v.push_back(params[p++]);
        }
        w.w_o = params[p++];
        w.w_1 = params[p++];
        w.w_2 = params[p++];
        return w;
    }
    std::size_t fc_index() const {
        return cfg.arch == Arch::tiny_convnet ? 2 : 1 + 3 * cfg.n_heads + 3;
    }

    bool all_finite() const {
        for (const auto& p : params)
            if (!p.all_finite()) return false;
        return true;
    }
};

namespace detail {

inline DenseMatrix init_matrix(std::size_t rows, std::size_t cols, double scale,
                               GaussianRng& rng) {
    std::vector<float> d(rows * cols);
    for (auto& v : d) v = static_cast<float>(rng.normal() * scale);
    return DenseMatrix(rows, cols, std::move(d));
}

// Zero the per-filter mean over patch entries: filters respond to structure,
// not to the patch DC level.
inline void center_columns(DenseMatrix& m) {
    for (std::size_t j = 0; j < m.cols(); ++j) {
        double mean = 0.0;
        for (std::size_t i = 0; i < m.rows(); ++i) mean += m(i, j);
        mean /= static_cast<double>(m.rows());
        for (std::size_t i = 0; i < m.rows(); ++i)
            m(i, j) -= static_cast<float>(mean);
    }
}

inline std::vector<LshSpec> default_hashers(const ModelConfig& cfg) {
    auto spec = [&](std::size_t row_len, std::size_t idx) {
        LshSpec s;
        s.input_dim = std::min<std::size_t>(8, row_len);
        s.hash_size = 8;
        s.seed = mix_seed(0x5eed1a4eULL, idx);
        return s;
    };
    if (cfg.arch == Arch::tiny_convnet)
        return {spec(9 * cfg.in_c, 0), spec(9 * ToyModel::kConv1Filters, 1),
                spec(ToyModel::kConv2Filters, 2)};
    const std::size_t d_k = cfg.d_model / cfg.n_heads;
    return {spec(cfg.patch * cfg.patch * cfg.in_c, 0), spec(d_k, 1), spec(cfg.d_model, 2),
            spec(cfg.d_model, 3)};
}

}  // namespace detail

inline ToyModel init_model(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    ToyModel m;
    m.cfg = cfg;
    GaussianRng rng(mix_seed(seed, 0x706172616dULL));
    if (cfg.arch == Arch::tiny_convnet) {
        const std::size_t p1 = 9 * cfg.in_c;
        const std::size_t p2 = 9 * ToyModel::kConv1Filters;
        m.params.push_back(detail::init_matrix(p1, ToyModel::kConv1Filters,
                                               std::sqrt(2.0 / p1), rng));
        m.params.push_back(detail::init_matrix(p2, ToyModel::kConv2Filters,
                                               std::sqrt(2.0 / p2), rng));
        detail::center_columns(m.params[0]);
        detail::center_columns(m.params[1]);
        m.params.push_back(detail::init_matrix(ToyModel::kConv2Filters, cfg.n_classes,
                                               std::sqrt(1.0 / ToyModel::kConv2Filters), rng));
    } else {
        const std::size_t plen = cfg.patch * cfg.patch * cfg.in_c;
        const std::size_t d_k = cfg.d_model / cfg.n_heads;
        const double s = std::sqrt(1.0 / cfg.d_model);
        m.params.push_back(detail::init_matrix(plen, cfg.d_model, std::sqrt(1.0 / plen), rng));
        for (std::size_t h = 0; h < cfg.n_heads; ++h) {
            m.params.push_back(detail::init_matrix(cfg.d_model, d_k, s, rng));
            m.params.push_back(detail::init_matrix(cfg.d_model, d_k, s, rng));
            m.params.push_back(detail::init_matrix(cfg.d_model, d_k, s, rng));
        }
        m.params.push_back(detail::init_matrix(cfg.n_heads * d_k, cfg.d_model, s, rng));
        m.params.push_back(detail::init_matrix(cfg.d_model, cfg.d_ff, s, rng));
        m.params.push_back(detail::init_matrix(cfg.d_ff, cfg.d_model, s, rng));
        m.params.push_back(detail::init_matrix(cfg.d_model, cfg.n_classes, s, rng));
    }
    m.hashers = detail::default_hashers(cfg);
    return m;
}

// --- checkpoint format RFCK1 ------------------------------------------------
// magic "RFCK1", u32 tag length + architecture tag, 8 u64 config fields
// (in_h, in_w, in_c, n_classes, patch, d_model, n_heads, d_ff), u64 parameter
// count, then each parameter as an RFM1 blob in layer order.

inline void save_model(const std::string& path, const ToyModel& m) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for write: " + path);
    os.write("RFCK1", 5);
    const std::string tag = arch_name(m.cfg.arch);
    const std::uint32_t len = static_cast<std::uint32_t>(tag.size());
    os.write(reinterpret_cast<const char*>(&len), sizeof(len));
    os.write(tag.data(), len);
    for (std::uint64_t v : {m.cfg.in_h, m.cfg.in_w, m.cfg.in_c, m.cfg.n_classes, m.cfg.patch,
                            m.cfg.d_model, m.cfg.n_heads, m.cfg.d_ff})
        detail::write_u64(os, v);
    detail::write_u64(os, m.params.size());
    for (const auto& p : m.params) write_matrix(os, p);
    if (!os) throw IoError("write failed: " + path);
}

inline ToyModel load_model(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path);
    char magic[5] = {};
    is.read(magic, 5);
    if (!is || std::string(magic, 5) != "RFCK1") throw IoError("bad RFCK1 magic in " + path);
    std::uint32_t len = 0;
    is.read(reinterpret_cast<char*>(&len), sizeof(len));
    if (!is || len > 64) throw IoError("bad architecture tag in " + path);
    std::string tag(len, '\0');
    is.read(tag.data(), len);
    ModelConfig cfg;
    cfg.arch = arch_from_name(tag);
    cfg.in_h = detail::read_u64(is);
    cfg.in_w = detail::read_u64(is);
    cfg.in_c = detail::read_u64(is);
    cfg.n_classes = detail::read_u64(is);
    cfg.patch = detail::read_u64(is);
    cfg.d_model = detail::read_u64(is);
    cfg.n_heads = detail::read_u64(is);
    cfg.d_ff = detail::read_u64(is);
    const std::uint64_t n_params = detail::read_u64(is);
    if (!is) throw IoError("truncated RFCK1 header in " + path);
    ToyModel m;
    m.cfg = cfg;
    cfg.validate();
    for (std::uint64_t k = 0; k < n_params; ++k) m.params.push_back(read_matrix(is, path));
    m.hashers = detail::default_hashers(cfg);
    return m;
}

// ---------------------------------------------------------------------------
// Batched forward / backward over a frame range.
// ---------------------------------------------------------------------------

struct LayerStats {
    std::string name;
    ReuseStats stats;
};

// Whole-stream cluster ids captured by an epoch-start calibration pass.
struct FrozenAssignments {
    // linear layers: ids over the full stream's row space + cluster count
    std::map<std::string, std::pair<std::vector<std::uint32_t>, std::size_t>> linear;
    std::vector<AttentionClusterIds> attn;  // per absolute frame (tiny_vit)
    std::uint64_t hashing_macs_paid = 0;
};

struct ConvTrace {
    DenseMatrix x1, pre1, r1;
    DenseMatrix x2, pre2, r2;
    DenseMatrix gap;
    std::optional<ClusterAssignment> a1, a2, afc;
};

struct VitTrace {
    DenseMatrix xp, embed;
    std::vector<ClusteredAttentionResult> attn;      // reuse mode, per frame
    std::vector<ExactAttentionTrace> attn_exact;     // exact mode, per frame
    DenseMatrix block_out;                           // all frames' token rows
    DenseMatrix pooled;
    std::optional<ClusterAssignment> a_embed, afc;
};

struct ForwardResult {
    DenseMatrix logits;
    std::vector<LayerStats> layer_stats;           // layer_names() order
    // per frame, per instrumented layer: flattened feature map
    std::vector<std::vector<std::vector<double>>> features;
    bool reuse = false;
    std::size_t f0 = 0, f1 = 0;
    ConvTrace conv;
    VitTrace vit;
};

namespace detail {

// Slice a whole-stream frozen assignment down to a batch row range, remapping
// ids to a dense local range by first occurrence.
inline ClusterAssignment slice_assignment(std::span<const std::uint32_t> global_ids,
                                          std::size_t row0, const DenseMatrix& x) {
    std::vector<std::uint32_t> local(x.rows());
    std::unordered_map<std::uint32_t, std::uint32_t> remap;
    remap.reserve(x.rows());
    std::uint32_t next = 0;
    for (std::size_t i = 0; i < x.rows(); ++i) {
        auto [it, inserted] = remap.try_emplace(global_ids[row0 + i], next);
        if (inserted) ++next;
        local[i] = it->second;
    }
    return group_rows(std::move(local), next, x);
}

inline std::vector<double> rows_to_feature(const DenseMatrix& m, std::size_t row0,
                                           std::size_t nrows) {
    std::vector<double> f;
    f.reserve(nrows * m.cols());
    for (std::size_t i = row0; i < row0 + nrows; ++i)
        for (std::size_t j = 0; j < m.cols(); ++j) f.push_back(m(i, j));
    return f;
}

struct LinearLayerRun {
    DenseMatrix out;
    ReuseStats stats;
    std::optional<ClusterAssignment> assignment;
};

// One linear layer over batch rows: exact, freshly hashed, or frozen.
inline LinearLayerRun run_linear(const DenseMatrix& x, const DenseMatrix& w, bool reuse,
                                 const LshSpec& spec,
                                 const std::pair<std::vector<std::uint32_t>, std::size_t>* frozen,
                                 std::size_t frozen_row0, bool collect_mse) {
    LinearLayerRun run;
    if (!reuse) {
        run.out = matmul_exact(x, w);
        run.stats.macs_exact = matmul_macs(x, w);
        run.stats.macs_reuse = run.stats.macs_exact;
        return run;
    }
    ReuseMatmulResult r =
        frozen != nullptr
            ? reuse_matmul_with(x, w, slice_assignment(frozen->first, frozen_row0, x), 0,
                                collect_mse)
            : reuse_matmul(x, w, spec.build(), collect_mse);
    run.out = std::move(r.output);
    run.stats = r.stats;
    run.assignment = std::move(r.assignment);
    return run;
}

inline void relu_forward(const DenseMatrix& pre, DenseMatrix& out) {
    out = pre;
    for (auto& v : out.data()) v = std::max(0.0f, v);
}

}  // namespace detail

inline ForwardResult forward_batch(const ToyModel& m, const FrameStream& s, std::size_t f0,
                                   std::size_t f1, bool reuse,
                                   const FrozenAssignments* frozen, bool collect_mse = true) {
    if (f1 <= f0 || f1 > s.n_frames) throw ArgumentError("forward_batch: bad frame range");
    if (s.h != m.cfg.in_h || s.w != m.cfg.in_w || s.c != m.cfg.in_c)
        throw ConfigError("forward_batch: stream shape does not match model config");
    const std::size_t n_frames = f1 - f0;
    ForwardResult res;
    res.reuse = reuse;
    res.f0 = f0;
    res.f1 = f1;
    res.features.resize(n_frames);

    auto frozen_linear = [&](const char* name)
        -> const std::pair<std::vector<std::uint32_t>, std::size_t>* {
        if (frozen == nullptr) return nullptr;
        auto it = frozen->linear.find(name);
        return it == frozen->linear.end() ? nullptr : &it->second;
    };

    if (m.cfg.arch == Arch::tiny_convnet) {
        const ConvShape sh1 = m.conv1_shape();
        const ConvShape sh2 = m.conv2_shape();
        const std::size_t p1 = sh1.out_h() * sh1.out_w();
        const std::size_t p2 = sh2.out_h() * sh2.out_w();

        DenseMatrix x1(n_frames * p1, sh1.patch_len());
        for (std::size_t f = 0; f < n_frames; ++f) {
            DenseMatrix rows = im2col(s.frame_map(f0 + f), sh1);
            std::copy(rows.data().begin(), rows.data().end(),
                      x1.data().begin() + f * p1 * sh1.patch_len());
        }
        detail::LinearLayerRun l1 = detail::run_linear(
            x1, m.params[0], reuse, m.hashers[0], frozen_linear("conv1"), f0 * p1, collect_mse);
        DenseMatrix r1;
        detail::relu_forward(l1.out, r1);

        DenseMatrix x2(n_frames * p2, sh2.patch_len());
        for (std::size_t f = 0; f < n_frames; ++f) {
            FeatureMap map1(sh2.in_h, sh2.in_w, sh2.in_c);
            std::copy(r1.data().begin() + f * p1 * sh1.n_filters,
                      r1.data().begin() + (f + 1) * p1 * sh1.n_filters, map1.data.begin());
            DenseMatrix rows = im2col(map1, sh2);
            std::copy(rows.data().begin(), rows.data().end(),
                      x2.data().begin() + f * p2 * sh2.patch_len());
        }
        detail::LinearLayerRun l2 = detail::run_linear(
            x2, m.params[1], reuse, m.hashers[1], frozen_linear("conv2"), f0 * p2, collect_mse);
        DenseMatrix r2;
        detail::relu_forward(l2.out, r2);

        DenseMatrix gap(n_frames, ToyModel::kConv2Filters);
        for (std::size_t f = 0; f < n_frames; ++f) {
            for (std::size_t i = 0; i < p2; ++i) {
                const float* row = r2.row(f * p2 + i).data();
                for (std::size_t j = 0; j < ToyModel::kConv2Filters; ++j) gap(f, j) += row[j];
            }
            for (std::size_t j = 0; j < ToyModel::kConv2Filters; ++j)
                gap(f, j) /= static_cast<float>(p2);
        }
        detail::LinearLayerRun lfc = detail::run_linear(
            gap, m.params[2], reuse, m.hashers[2], frozen_linear("fc"), f0, collect_mse);

        for (std::size_t f = 0; f < n_frames; ++f) {
            res.features[f].push_back(detail::rows_to_feature(r1, f * p1, p1));
            res.features[f].push_back(detail::rows_to_feature(r2, f * p2, p2));
        }
        res.layer_stats = {{"conv1", l1.stats}, {"conv2", l2.stats}, {"fc", lfc.stats}};
        res.logits = std::move(lfc.out);
        res.conv = ConvTrace{std::move(x1),     std::move(l1.out), std::move(r1),
                             std::move(x2),     std::move(l2.out), std::move(r2),
                             std::move(gap),    std::move(l1.assignment),
                             std::move(l2.assignment), std::move(lfc.assignment)};
        return res;
    }

    // tiny_vit
    const std::size_t tokens = m.n_tokens();
    const std::size_t plen = m.cfg.patch * m.cfg.patch * m.cfg.in_c;
    const AttentionWeights w = m.attention_weights();

    DenseMatrix xp(n_frames * tokens, plen);
    for (std::size_t f = 0; f < n_frames; ++f) {
        DenseMatrix rows = patch_rows(s.frame_map(f0 + f), m.cfg.patch);
        std::copy(rows.data().begin(), rows.data().end(),
                  xp.data().begin() + f * tokens * plen);
    }
    detail::LinearLayerRun lembed =
        detail::run_linear(xp, m.params[0], reuse, m.hashers[0], frozen_linear("patch_embed"),
                           f0 * tokens, collect_mse);
    const DenseMatrix& embed = lembed.out;

    DenseMatrix block_out(n_frames * tokens, m.cfg.d_model);
    ReuseStats qkv_stats, mlp_stats;
    VitTrace& vt = res.vit;
    const LshHasher h_qkv = m.hashers[1].build();
    const LshHasher h_mlp = m.hashers[2].build();
    for (std::size_t f = 0; f < n_frames; ++f) {
        DenseMatrix tok(tokens, m.cfg.d_model);
        std::copy(embed.data().begin() + f * tokens * m.cfg.d_model,
                  embed.data().begin() + (f + 1) * tokens * m.cfg.d_model,
                  tok.data().begin());
        if (reuse) {
            const AttentionClusterIds* fr =
                frozen != nullptr && frozen->attn.size() > f0 + f ? &frozen->attn[f0 + f]
                                                                  : nullptr;
            ClusteredAttentionResult r = clustered_attention_forward(
                tok, w, &h_qkv, &h_mlp, fr, {.collect_mse = collect_mse});
            std::copy(r.output.data().begin(), r.output.data().end(),
                      block_out.data().begin() + f * tokens * m.cfg.d_model);
            // split block stats between the two named layers: hashing +
            // centroid attention to attn_qkv, MLP matmuls to attn_mlp
            ReuseStats part_q, part_m;
            part_m.macs_exact = 2ULL * tokens * w.d_model * w.d_ff;
            part_q.macs_exact = attention_macs_exact(tokens, w) - part_m.macs_exact;
            const std::uint64_t mlp_reuse =
                2ULL * r.ids.z_n * w.d_model * w.d_ff +
                (fr == nullptr ? hashing_macs(h_mlp, tokens) : 0);
            part_m.macs_reuse = mlp_reuse;
            part_q.macs_reuse = r.stats.macs_reuse - mlp_reuse;
            part_q.rows_clustered = 2ULL * tokens * w.n_heads;
            std::uint64_t qkv_clusters = 0;
            for (const auto& hd : r.ids.heads) qkv_clusters += hd.q_n + hd.kv_n;
            part_q.clusters_used = qkv_clusters;
            part_q.sigma = static_cast<double>(part_q.rows_clustered) / qkv_clusters;
            part_m.rows_clustered = tokens;
            part_m.clusters_used = r.ids.z_n;
            part_m.sigma = static_cast<double>(tokens) / r.ids.z_n;
            part_q.recon_mse = r.stats.recon_mse;  // block-level error
            part_q.mse_weight = r.stats.mse_weight;
            qkv_stats += part_q;
            mlp_stats += part_m;
            vt.attn.push_back(std::move(r));
        } else {
            ExactAttentionTrace t = exact_attention_forward(tok, w);
            std::copy(t.y.data().begin(), t.y.data().end(),
                      block_out.data().begin() + f * tokens * m.cfg.d_model);
            ReuseStats part_q, part_m;
            part_m.macs_exact = 2ULL * tokens * w.d_model * w.d_ff;
            part_m.macs_reuse = part_m.macs_exact;
            part_q.macs_exact = attention_macs_exact(tokens, w) - part_m.macs_exact;
            part_q.macs_reuse = part_q.macs_exact;
            qkv_stats += part_q;
            mlp_stats += part_m;
            vt.attn_exact.push_back(std::move(t));
        }
    }

    DenseMatrix pooled(n_frames, m.cfg.d_model);
    for (std::size_t f = 0; f < n_frames; ++f) {
        for (std::size_t t = 0; t < tokens; ++t) {
            const float* row = block_out.row(f * tokens + t).data();
            for (std::size_t j = 0; j < m.cfg.d_model; ++j) pooled(f, j) += row[j];
        }
        for (std::size_t j = 0; j < m.cfg.d_model; ++j)
            pooled(f, j) /= static_cast<float>(tokens);
    }
    detail::LinearLayerRun lfc = detail::run_linear(
        pooled, m.params[m.fc_index()], reuse, m.hashers[3], frozen_linear("fc"), f0,
        collect_mse);

    for (std::size_t f = 0; f < n_frames; ++f) {
        res.features[f].push_back(detail::rows_to_feature(embed, f * tokens, tokens));
        res.features[f].push_back(detail::rows_to_feature(block_out, f * tokens, tokens));
    }
    res.layer_stats = {{"patch_embed", lembed.stats},
                       {"attn_qkv", qkv_stats},
                       {"attn_mlp", mlp_stats},
                       {"fc", lfc.stats}};
    res.logits = std::move(lfc.out);
    vt.xp = std::move(xp);
    vt.embed = lembed.out;
    vt.block_out = std::move(block_out);
    vt.pooled = std::move(pooled);
    vt.a_embed = std::move(lembed.assignment);
    vt.afc = std::move(lfc.assignment);
    return res;
}

namespace detail {

// Backward of a linear layer run. Returns dX; accumulates dW.
inline DenseMatrix linear_backward(const DenseMatrix& x, const DenseMatrix& w,
                                   const std::optional<ClusterAssignment>& a,
                                   const DenseMatrix& d_out, DenseMatrix& d_w) {
    if (!a.has_value()) {
        add_inplace(d_w, matmul_transA(x, d_out));
        return matmul_transB(d_out, w);
    }
    // y_i = centroid(id(i)) * w; gradients flow through the member means
    const ClusterAssignment& asg = *a;
    DenseMatrix grouped = group_sum(d_out, asg.cluster_id_per_row, asg.n_clusters());
    add_inplace(d_w, matmul_transA(asg.centroids, grouped));
    DenseMatrix d_c = matmul_transB(grouped, w);
    return scatter_mean(d_c, asg.cluster_id_per_row, asg.counts);
}

}  // namespace detail

// Gradients of a scalar loss wrt all parameters. d_logits is dLoss/dlogits;
// feature_grads (optional) carries dLoss/d(flattened instrumented feature
// map) per frame per layer and is injected at the matching nodes.
inline std::vector<DenseMatrix> backward_batch(
    const ToyModel& m, const ForwardResult& fwd, const DenseMatrix& d_logits,
    const std::vector<std::vector<std::vector<double>>>* feature_grads = nullptr) {
    std::vector<DenseMatrix> grads;
    for (const auto& p : m.params) grads.emplace_back(p.rows(), p.cols());
    const std::size_t n_frames = fwd.f1 - fwd.f0;

    if (m.cfg.arch == Arch::tiny_convnet) {
        const ConvShape sh1 = m.conv1_shape();
        const ConvShape sh2 = m.conv2_shape();
        const std::size_t p1 = sh1.out_h() * sh1.out_w();
        const std::size_t p2 = sh2.out_h() * sh2.out_w();
        const ConvTrace& t = fwd.conv;

        DenseMatrix d_gap =
            detail::linear_backward(t.gap, m.params[2], t.afc, d_logits, grads[2]);

        DenseMatrix d_r2(n_frames * p2, ToyModel::kConv2Filters);
        for (std::size_t f = 0; f < n_frames; ++f)
            for (std::size_t i = 0; i < p2; ++i)
                for (std::size_t j = 0; j < ToyModel::kConv2Filters; ++j)
                    d_r2(f * p2 + i, j) = d_gap(f, j) / static_cast<float>(p2);
        if (feature_grads != nullptr)
            for (std::size_t f = 0; f < n_frames; ++f) {
                const auto& g = (*feature_grads)[f][1];
                for (std::size_t k = 0; k < g.size(); ++k)
                    d_r2.data()[f * p2 * ToyModel::kConv2Filters + k] +=
                        static_cast<float>(g[k]);
            }
        DenseMatrix d_pre2 = d_r2;
        for (std::size_t k = 0; k < d_pre2.size(); ++k)
            if (t.pre2.data()[k] <= 0.0f) d_pre2.data()[k] = 0.0f;
        DenseMatrix d_x2 =
            detail::linear_backward(t.x2, m.params[1], t.a2, d_pre2, grads[1]);

        DenseMatrix d_r1(n_frames * p1, ToyModel::kConv1Filters);
        for (std::size_t f = 0; f < n_frames; ++f) {
            DenseMatrix frame_rows(p2, sh2.patch_len());
            std::copy(d_x2.data().begin() + f * p2 * sh2.patch_len(),
                      d_x2.data().begin() + (f + 1) * p2 * sh2.patch_len(),
                      frame_rows.data().begin());
            FeatureMap back = col2im(frame_rows, sh2);
            std::copy(back.data.begin(), back.data.end(),
                      d_r1.data().begin() + f * p1 * ToyModel::kConv1Filters);
        }
        if (feature_grads != nullptr)
            for (std::size_t f = 0; f < n_frames; ++f) {
                const auto& g = (*feature_grads)[f][0];
                for (std::size_t k = 0; k < g.size(); ++k)
                    d_r1.data()[f * p1 * ToyModel::kConv1Filters + k] +=
                        static_cast<float>(g[k]);
            }
        DenseMatrix d_pre1 = d_r1;
        for (std::size_t k = 0; k < d_pre1.size(); ++k)
            if (t.pre1.data()[k] <= 0.0f) d_pre1.data()[k] = 0.0f;
        detail::linear_backward(t.x1, m.params[0], t.a1, d_pre1, grads[0]);
        return grads;
    }

    // tiny_vit
    const std::size_t tokens = m.n_tokens();
    const AttentionWeights w = m.attention_weights();
    const VitTrace& t = fwd.vit;

    DenseMatrix d_pooled =
        detail::linear_backward(t.pooled, m.params[m.fc_index()], t.afc, d_logits,
                                grads[m.fc_index()]);

    DenseMatrix d_block(n_frames * tokens, m.cfg.d_model);
    for (std::size_t f = 0; f < n_frames; ++f)
        for (std::size_t tk = 0; tk < tokens; ++tk)
            for (std::size_t j = 0; j < m.cfg.d_model; ++j)
                d_block(f * tokens + tk, j) = d_pooled(f, j) / static_cast<float>(tokens);
    if (feature_grads != nullptr)
        for (std::size_t f = 0; f < n_frames; ++f) {
            const auto& g = (*feature_grads)[f][1];
            for (std::size_t k = 0; k < g.size(); ++k)
                d_block.data()[f * tokens * m.cfg.d_model + k] += static_cast<float>(g[k]);
        }

    AttentionWeights attn_grads = zeros_like(w);
    DenseMatrix d_embed(n_frames * tokens, m.cfg.d_model);
    for (std::size_t f = 0; f < n_frames; ++f) {
        DenseMatrix tok(tokens, m.cfg.d_model);
        std::copy(t.embed.data().begin() + f * tokens * m.cfg.d_model,
                  t.embed.data().begin() + (f + 1) * tokens * m.cfg.d_model,
                  tok.data().begin());
        DenseMatrix d_y(tokens, m.cfg.d_model);
        std::copy(d_block.data().begin() + f * tokens * m.cfg.d_model,
                  d_block.data().begin() + (f + 1) * tokens * m.cfg.d_model,
                  d_y.data().begin());
        DenseMatrix d_tok =
            fwd.reuse ? clustered_attention_backward(t.attn[f].trace, t.attn[f].ids, tok, w,
                                                     d_y, attn_grads)
                      : exact_attention_backward(t.attn_exact[f], tok, w, d_y, attn_grads);
        std::copy(d_tok.data().begin(), d_tok.data().end(),
                  d_embed.data().begin() + f * tokens * m.cfg.d_model);
    }
    if (feature_grads != nullptr)
        for (std::size_t f = 0; f < n_frames; ++f) {
            const auto& g = (*feature_grads)[f][0];
            for (std::size_t k = 0; k < g.size(); ++k)
                d_embed.data()[f * tokens * m.cfg.d_model + k] += static_cast<float>(g[k]);
        }

    // copy attention grads back into the flat layout
    std::size_t p = 1;
    for (std::size_t h = 0; h < m.cfg.n_heads; ++h) {
        grads[p++] = attn_grads.w_q[h];
        grads[p++] = attn_grads.w_k[h];
        grads[p++] = attn_grads.w_v[h];
    }
    grads[p++] = attn_grads.w_o;
    grads[p++] = attn_grads.w_1;
    grads[p++] = attn_grads.w_2;

    detail::linear_backward(t.xp, m.params[0], t.a_embed, d_embed, grads[0]);
    return grads;
}

// Epoch-start calibration: run the reuse forward over the whole stream with
// fresh hashing, record every assignment, charge the hashing cost once.
inline FrozenAssignments calibrate_assignments(const ToyModel& m, const FrameStream& s) {
    FrozenAssignments fr;
    ForwardResult fwd = forward_batch(m, s, 0, s.n_frames, /*reuse=*/true, nullptr,
                                      /*collect_mse=*/false);
    if (m.cfg.arch == Arch::tiny_convnet) {
        auto put = [&](const char* name, const std::optional<ClusterAssignment>& a) {
            fr.linear[name] = {a->cluster_id_per_row, a->n_clusters()};
        };
        put("conv1", fwd.conv.a1);
        put("conv2", fwd.conv.a2);
        put("fc", fwd.conv.afc);
    } else {
        fr.linear["patch_embed"] = {fwd.vit.a_embed->cluster_id_per_row,
                                    fwd.vit.a_embed->n_clusters()};
        fr.linear["fc"] = {fwd.vit.afc->cluster_id_per_row, fwd.vit.afc->n_clusters()};
        for (auto& r : fwd.vit.attn) fr.attn.push_back(r.ids);
    }
    // hashing cost paid once: every row of every clustered layer
    std::uint64_t cost = 0;
    if (m.cfg.arch == Arch::tiny_convnet) {
        const std::size_t p1 = m.conv1_shape().out_h() * m.conv1_shape().out_w();
        const std::size_t p2 = m.conv2_shape().out_h() * m.conv2_shape().out_w();
        cost += hashing_macs(m.hashers[0].build(), s.n_frames * p1);
        cost += hashing_macs(m.hashers[1].build(), s.n_frames * p2);
        cost += hashing_macs(m.hashers[2].build(), s.n_frames);
    } else {
        const std::size_t tokens = m.n_tokens();
        cost += hashing_macs(m.hashers[0].build(), s.n_frames * tokens);
        for (const auto& r : fwd.vit.attn) cost += r.ids.hashing_cost;
        cost += hashing_macs(m.hashers[3].build(), s.n_frames);
    }
    fr.hashing_macs_paid = cost;
    return fr;
}

// Fig. 2-style per-layer profile: mean pairwise cosine of each reuse-capable
// layer's input rows, pooled over the whole stream so both intra- and
// inter-frame redundancy register. Rows are subsampled deterministically
// (stride, cap kProfileRowCap) to keep the pair count bounded; pairs with a
// zero row are skipped.
inline constexpr std::size_t kProfileRowCap = 1024;

inline std::vector<std::pair<std::string, double>> layer_similarity_profile(
    const ToyModel& m, const FrameStream& s) {
    ForwardResult fwd =
        forward_batch(m, s, 0, s.n_frames, /*reuse=*/false, nullptr, /*collect_mse=*/false);

    auto mean_pairwise = [](const DenseMatrix& rows) {
        const std::size_t stride = rows.rows() / kProfileRowCap + 1;
        std::vector<std::size_t> picked;
        for (std::size_t i = 0; i < rows.rows(); i += stride) picked.push_back(i);
        double acc = 0.0;
        std::size_t cnt = 0;
        for (std::size_t a = 0; a < picked.size(); ++a) {
            for (std::size_t b = a + 1; b < picked.size(); ++b) {
                try {
                    acc += cosine_similarity(rows.row(picked[a]), rows.row(picked[b]));
                    ++cnt;
                } catch (const UndefinedSimilarityError&) {
                }
            }
        }
        return cnt == 0 ? 0.0 : acc / static_cast<double>(cnt);
    };

    std::vector<std::pair<std::string, double>> profile;
    if (m.cfg.arch == Arch::tiny_convnet) {
        profile.emplace_back("conv1", mean_pairwise(fwd.conv.x1));
        profile.emplace_back("conv2", mean_pairwise(fwd.conv.x2));
        profile.emplace_back("fc", mean_pairwise(fwd.conv.gap));
    } else {
        const std::size_t tokens = m.n_tokens();
        profile.emplace_back("patch_embed", mean_pairwise(fwd.vit.xp));
        profile.emplace_back("attn_qkv", mean_pairwise(fwd.vit.embed));
        // attn_mlp input is Z inside the per-frame block traces
        DenseMatrix z_all(s.n_frames * tokens, m.cfg.d_model);
        for (std::size_t f = 0; f < s.n_frames; ++f)
            std::copy(fwd.vit.attn_exact[f].z.data().begin(),
                      fwd.vit.attn_exact[f].z.data().end(),
                      z_all.data().begin() + f * tokens * m.cfg.d_model);
        profile.emplace_back("attn_mlp", mean_pairwise(z_all));
        profile.emplace_back("fc", mean_pairwise(fwd.vit.pooled));
    }
    return profile;
}

}  // namespace rf
