// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <utility>
#include <vector>

#include "reuseflow/lsh.hpp"
#include "reuseflow/matrix.hpp"
#include "reuseflow/reuse.hpp"

namespace rf {

// Transformer-block weights: per-head Q/K/V projections, the output
// projection, and the two MLP matrices. No biases anywhere in the toy stack.
struct AttentionWeights {
    std::size_t n_heads = 0;
    std::size_t d_model = 0;
    std::size_t d_k = 0;
    std::size_t d_ff = 0;
    std::vector<DenseMatrix> w_q;  // each d_model x d_k
    std::vector<DenseMatrix> w_k;
    std::vector<DenseMatrix> w_v;
    DenseMatrix w_o;  // (n_heads * d_k) x d_model
    DenseMatrix w_1;  // d_model x d_ff
    DenseMatrix w_2;  // d_ff x d_model

    void validate() const {
        if (n_heads * d_k != d_model)
            throw ShapeError("AttentionWeights: n_heads * d_k != d_model");
        if (w_q.size() != n_heads || w_k.size() != n_heads || w_v.size() != n_heads)
            throw ShapeError("AttentionWeights: per-head matrix count mismatch");
        for (std::size_t h = 0; h < n_heads; ++h)
            if (w_q[h].rows() != d_model || w_q[h].cols() != d_k ||
                !w_q[h].same_shape(w_k[h]) || !w_q[h].same_shape(w_v[h]))
                throw ShapeError("AttentionWeights: bad per-head projection shape");
        if (w_o.rows() != n_heads * d_k || w_o.cols() != d_model)
            throw ShapeError("AttentionWeights: bad w_o shape");
        if (w_1.rows() != d_model || w_1.cols() != d_ff || w_2.rows() != d_ff ||
            w_2.cols() != d_model)
            throw ShapeError("AttentionWeights: bad MLP shape");
    }
};

inline AttentionWeights zeros_like(const AttentionWeights& w) {
    AttentionWeights g;
    g.n_heads = w.n_heads;
    g.d_model = w.d_model;
    g.d_k = w.d_k;
    g.d_ff = w.d_ff;
    for (std::size_t h = 0; h < w.n_heads; ++h) {
        g.w_q.emplace_back(w.d_model, w.d_k);
        g.w_k.emplace_back(w.d_model, w.d_k);
        g.w_v.emplace_back(w.d_model, w.d_k);
    }
    g.w_o = DenseMatrix(w.n_heads * w.d_k, w.d_model);
    g.w_1 = DenseMatrix(w.d_model, w.d_ff);
    g.w_2 = DenseMatrix(w.d_ff, w.d_model);
    return g;
}

namespace detail {

inline void row_softmax(DenseMatrix& s) {
    for (std::size_t i = 0; i < s.rows(); ++i) {
        auto r = s.row(i);
        const std::vector<float> sm = softmax_normalize(std::span<const float>(r));
        std::copy(sm.begin(), sm.end(), r.data());
    }
}

// out[ids[i]] += m[i]
inline DenseMatrix group_sum(const DenseMatrix& m, std::span<const std::uint32_t> ids,
                             std::size_t n_groups) {
    DenseMatrix out(n_groups, m.cols());
    for (std::size_t i = 0; i < m.rows(); ++i) {
        float* dst = out.row(ids[i]).data();
        const float* src = m.row(i).data();
        for (std::size_t j = 0; j < m.cols(); ++j) dst[j] += src[j];
    }
    return out;
}

// out[i] = mc[ids[i]] / counts[ids[i]]
inline DenseMatrix scatter_mean(const DenseMatrix& mc, std::span<const std::uint32_t> ids,
                                std::span<const std::uint32_t> counts) {
    DenseMatrix out(ids.size(), mc.cols());
    for (std::size_t i = 0; i < ids.size(); ++i) {
        const float inv = 1.0f / static_cast<float>(counts[ids[i]]);
        const float* src = mc.row(ids[i]).data();
        float* dst = out.row(i).data();
        for (std::size_t j = 0; j < mc.cols(); ++j) dst[j] = src[j] * inv;
    }
    return out;
}

// out[i] = mc[ids[i]]
inline DenseMatrix scatter_rows(const DenseMatrix& mc, std::span<const std::uint32_t> ids) {
    DenseMatrix out(ids.size(), mc.cols());
    for (std::size_t i = 0; i < ids.size(); ++i) {
        const float* src = mc.row(ids[i]).data();
        std::copy(src, src + mc.cols(), out.row(i).data());
    }
    return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Exact transformer block: per-head scaled dot-product attention, concat,
// output projection, residual, two-layer MLP with relu, residual. The oracle
// the reuse path is measured against.
// ---------------------------------------------------------------------------

struct ExactAttentionTrace {
    std::vector<DenseMatrix> q, k, v;  // per head, n x d_k
    std::vector<DenseMatrix> p;        // per head, n x n softmax rows
    DenseMatrix concat;                // n x (H d_k)
    DenseMatrix z;                     // n x d_model
    DenseMatrix pre1;                  // n x d_ff, before relu
    DenseMatrix u;                     // n x d_ff, after relu
    DenseMatrix y;                     // n x d_model
};

inline ExactAttentionTrace exact_attention_forward(const DenseMatrix& x,
                                                   const AttentionWeights& w) {
    w.validate();
    if (x.cols() != w.d_model) throw ShapeError("exact_attention: x.cols != d_model");
    const std::size_t n = x.rows();
    ExactAttentionTrace t;
    t.concat = DenseMatrix(n, w.n_heads * w.d_k);
    const float scale = 1.0f / std::sqrt(static_cast<float>(w.d_k));
    for (std::size_t h = 0; h < w.n_heads; ++h) {
        DenseMatrix q = matmul_exact(x, w.w_q[h]);
        DenseMatrix k = matmul_exact(x, w.w_k[h]);
        DenseMatrix v = matmul_exact(x, w.w_v[h]);
        DenseMatrix s = matmul_transB(q, k);
        for (auto& e : s.data()) e *= scale;
        detail::row_softmax(s);
        DenseMatrix a = matmul_exact(s, v);
        for (std::size_t i = 0; i < n; ++i)
            std::copy(a.row(i).begin(), a.row(i).end(),
                      t.concat.row(i).data() + h * w.d_k);
        t.q.push_back(std::move(q));
        t.k.push_back(std::move(k));
        t.v.push_back(std::move(v));
        t.p.push_back(std::move(s));
    }
    t.z = matmul_exact(t.concat, w.w_o);
    add_inplace(t.z, x);
    t.pre1 = matmul_exact(t.z, w.w_1);
    t.u = t.pre1;
    for (auto& e : t.u.data()) e = std::max(0.0f, e);
    t.y = matmul_exact(t.u, w.w_2);
    add_inplace(t.y, t.z);
    return t;
}

inline DenseMatrix exact_attention(const DenseMatrix& x, const AttentionWeights& w) {
    return exact_attention_forward(x, w).y;
}

inline std::uint64_t attention_macs_exact(std::size_t n, const AttentionWeights& w) {
    const std::uint64_t per_head =
        3ULL * n * w.d_model * w.d_k + 2ULL * n * n * w.d_k;
    return w.n_heads * per_head + static_cast<std::uint64_t>(n) * (w.n_heads * w.d_k) * w.d_model +
           2ULL * n * w.d_model * w.d_ff;
}

// Accumulates parameter gradients into `grads` and returns dL/dx.
inline DenseMatrix exact_attention_backward(const ExactAttentionTrace& t,
                                            const DenseMatrix& x, const AttentionWeights& w,
                                            const DenseMatrix& d_y, AttentionWeights& grads) {
    const float scale = 1.0f / std::sqrt(static_cast<float>(w.d_k));
    // MLP + residual: y = relu(z w1) w2 + z
    DenseMatrix d_u = matmul_transB(d_y, w.w_2);
    add_inplace(grads.w_2, matmul_transA(t.u, d_y));
    for (std::size_t k = 0; k < d_u.size(); ++k)
        if (t.pre1.data()[k] <= 0.0f) d_u.data()[k] = 0.0f;
    add_inplace(grads.w_1, matmul_transA(t.z, d_u));
    DenseMatrix d_z = matmul_transB(d_u, w.w_1);
    add_inplace(d_z, d_y);
    // z = concat w_o + x
    add_inplace(grads.w_o, matmul_transA(t.concat, d_z));
    DenseMatrix d_concat = matmul_transB(d_z, w.w_o);
    DenseMatrix d_x = d_z;  // residual path
    for (std::size_t h = 0; h < w.n_heads; ++h) {
        const std::size_t n = x.rows();
        DenseMatrix d_a(n, w.d_k);
        for (std::size_t i = 0; i < n; ++i)
            std::copy(d_concat.row(i).data() + h * w.d_k,
                      d_concat.row(i).data() + (h + 1) * w.d_k, d_a.row(i).data());
        DenseMatrix d_p = matmul_transB(d_a, t.v[h]);
        DenseMatrix d_v = matmul_transA(t.p[h], d_a);
        DenseMatrix d_s(n, n);
        for (std::size_t i = 0; i < n; ++i) {
            const float* pr = t.p[h].row(i).data();
            const float* dpr = d_p.row(i).data();
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) dot += static_cast<double>(pr[j]) * dpr[j];
            for (std::size_t j = 0; j < n; ++j)
                d_s(i, j) = pr[j] * (dpr[j] - static_cast<float>(dot));
        }
        for (auto& e : d_s.data()) e *= scale;
        DenseMatrix d_q = matmul_exact(d_s, t.k[h]);
        DenseMatrix d_k = matmul_transA(d_s, t.q[h]);
        add_inplace(grads.w_q[h], matmul_transA(x, d_q));
        add_inplace(grads.w_k[h], matmul_transA(x, d_k));
        add_inplace(grads.w_v[h], matmul_transA(x, d_v));
        add_inplace(d_x, matmul_transB(d_q, w.w_q[h]));
        add_inplace(d_x, matmul_transB(d_k, w.w_k[h]));
        add_inplace(d_x, matmul_transB(d_v, w.w_v[h]));
    }
    return d_x;
}

// ---------------------------------------------------------------------------
// Similarity-aware transformer block. Q, K, V are clustered per head (K and V
// share one clustering over their concatenation so key/value rows stay
// aligned); the MHSA output Z is clustered before the MLP. Projections and
// the w_o matmul run at full row count.
// ---------------------------------------------------------------------------

struct AttentionOptions {
    // Weight each key centroid by its member count inside the softmax.
    bool weight_keys_by_count = false;
    bool collect_mse = true;
};

struct HeadClusterIds {
    std::vector<std::uint32_t> q_ids;
    std::size_t q_n = 0;
    std::vector<std::uint32_t> kv_ids;
    std::size_t kv_n = 0;
};

// Cluster assignments for one block invocation; storable so an epoch-frozen
// training loop can replay them.
struct AttentionClusterIds {
    std::vector<HeadClusterIds> heads;
    std::vector<std::uint32_t> z_ids;
    std::size_t z_n = 0;
    std::uint64_t hashing_cost = 0;  // MACs paid when the ids were hashed
};

struct ClusteredAttentionTrace {
    std::vector<DenseMatrix> q, k, v;        // full per-head projections
    std::vector<DenseMatrix> qc, kc, vc;     // centroid matrices
    std::vector<std::vector<std::uint32_t>> q_counts, kv_counts;
    std::vector<DenseMatrix> pc;             // centroid softmax rows
    DenseMatrix concat;                      // n x (H d_k), scattered head outputs
    DenseMatrix z;
    std::vector<std::uint32_t> z_counts;
    DenseMatrix zc;
    DenseMatrix pre1c;                       // z_n x d_ff
    DenseMatrix uc;
    DenseMatrix y;
};

struct ClusteredAttentionResult {
    DenseMatrix output;
    ReuseStats stats;
    AttentionClusterIds ids;
    ClusteredAttentionTrace trace;
};

namespace detail {

// First-occurrence cluster ids for the rows of m; identity when h is null.
inline std::pair<std::vector<std::uint32_t>, std::size_t> code_ids(const LshHasher* h,
                                                                   const DenseMatrix& m) {
    std::vector<std::uint32_t> ids(m.rows());
    if (h == nullptr) {
        for (std::size_t i = 0; i < m.rows(); ++i) ids[i] = static_cast<std::uint32_t>(i);
        return {std::move(ids), m.rows()};
    }
    std::unordered_map<std::uint64_t, std::uint32_t> seen;
    seen.reserve(m.rows());
    std::uint32_t next = 0;
    for (std::size_t i = 0; i < m.rows(); ++i) {
        auto [it, inserted] = seen.try_emplace(hash_row(*h, m.row(i)), next);
        if (inserted) ++next;
        ids[i] = it->second;
    }
    return {std::move(ids), next};
}

inline std::vector<std::uint32_t> id_counts(std::span<const std::uint32_t> ids,
                                            std::size_t n) {
    std::vector<std::uint32_t> counts(n, 0);
    for (auto id : ids) ++counts[id];
    return counts;
}

inline DenseMatrix group_mean(const DenseMatrix& m, std::span<const std::uint32_t> ids,
                              std::span<const std::uint32_t> counts) {
    DenseMatrix sums = group_sum(m, ids, counts.size());
    for (std::size_t c = 0; c < counts.size(); ++c) {
        if (counts[c] == 0) continue;
        float* r = sums.row(c).data();
        const float inv = 1.0f / static_cast<float>(counts[c]);
        for (std::size_t j = 0; j < sums.cols(); ++j) r[j] *= inv;
    }
    return sums;
}

}  // namespace detail

// Forward pass with clustering. When `frozen` is set its ids are replayed and
// no hashing cost is charged (the calibration pass that produced them already
// paid it); otherwise ids are hashed on the fly with h_qkv / h_mlp. A null
// hasher leaves that part of the block exact (identity clustering, excluded
// from sigma).
inline ClusteredAttentionResult clustered_attention_forward(
    const DenseMatrix& x, const AttentionWeights& w, const LshHasher* h_qkv,
    const LshHasher* h_mlp, const AttentionClusterIds* frozen,
    const AttentionOptions& opts = {}) {
    w.validate();
    if (x.cols() != w.d_model) throw ShapeError("reuse_attention: x.cols != d_model");
    const std::size_t n = x.rows();
    const float scale = 1.0f / std::sqrt(static_cast<float>(w.d_k));

    ClusteredAttentionResult res;
    ClusteredAttentionTrace& t = res.trace;
    AttentionClusterIds& ids = res.ids;
    ReuseStats& st = res.stats;
    st.macs_exact = attention_macs_exact(n, w);
    st.macs_reuse = 0;
    t.concat = DenseMatrix(n, w.n_heads * w.d_k);
    ids.heads.resize(w.n_heads);

    const std::uint64_t qkv_hash_cost =
        h_qkv != nullptr ? hashing_macs(*h_qkv, n) : 0;

    for (std::size_t h = 0; h < w.n_heads; ++h) {
        DenseMatrix q = matmul_exact(x, w.w_q[h]);
        DenseMatrix k = matmul_exact(x, w.w_k[h]);
        DenseMatrix v = matmul_exact(x, w.w_v[h]);
        st.macs_reuse += 3ULL * n * w.d_model * w.d_k;

        HeadClusterIds& hid = ids.heads[h];
        if (frozen != nullptr) {
            hid = frozen->heads[h];
        } else {
            std::tie(hid.q_ids, hid.q_n) = detail::code_ids(h_qkv, q);
            // K and V rows concatenated so one clustering keeps them aligned
            DenseMatrix kv(n, 2 * w.d_k);
            for (std::size_t i = 0; i < n; ++i) {
                std::copy(k.row(i).begin(), k.row(i).end(), kv.row(i).data());
                std::copy(v.row(i).begin(), v.row(i).end(), kv.row(i).data() + w.d_k);
            }
            std::tie(hid.kv_ids, hid.kv_n) = detail::code_ids(h_qkv, kv);
            if (h_qkv != nullptr) {
                st.macs_reuse += 2 * qkv_hash_cost;
                ids.hashing_cost += 2 * qkv_hash_cost;
            }
        }
        std::vector<std::uint32_t> q_counts = detail::id_counts(hid.q_ids, hid.q_n);
        std::vector<std::uint32_t> kv_counts = detail::id_counts(hid.kv_ids, hid.kv_n);
        DenseMatrix qc = detail::group_mean(q, hid.q_ids, q_counts);
        DenseMatrix kc = detail::group_mean(k, hid.kv_ids, kv_counts);
        DenseMatrix vc = detail::group_mean(v, hid.kv_ids, kv_counts);

        DenseMatrix s = matmul_transB(qc, kc);
        for (auto& e : s.data()) e *= scale;
        if (opts.weight_keys_by_count)
            for (std::size_t i = 0; i < s.rows(); ++i)
                for (std::size_t j = 0; j < s.cols(); ++j)
                    s(i, j) += std::log(static_cast<float>(kv_counts[j]));
        detail::row_softmax(s);
        DenseMatrix ac = matmul_exact(s, vc);
        st.macs_reuse += 2ULL * qc.rows() * kc.rows() * w.d_k;
        if (h_qkv != nullptr || frozen != nullptr) {
            st.rows_clustered += 2 * n;
            st.clusters_used += hid.q_n + hid.kv_n;
        }

        for (std::size_t i = 0; i < n; ++i) {
            const float* src = ac.row(hid.q_ids[i]).data();
            std::copy(src, src + w.d_k, t.concat.row(i).data() + h * w.d_k);
        }
        t.q.push_back(std::move(q));
        t.k.push_back(std::move(k));
        t.v.push_back(std::move(v));
        t.qc.push_back(std::move(qc));
        t.kc.push_back(std::move(kc));
        t.vc.push_back(std::move(vc));
        t.pc.push_back(std::move(s));
        t.q_counts.push_back(std::move(q_counts));
        t.kv_counts.push_back(std::move(kv_counts));
    }

    t.z = matmul_exact(t.concat, w.w_o);
    add_inplace(t.z, x);
    st.macs_reuse += static_cast<std::uint64_t>(n) * (w.n_heads * w.d_k) * w.d_model;

    if (frozen != nullptr) {
        ids.z_ids = frozen->z_ids;
        ids.z_n = frozen->z_n;
    } else {
        std::tie(ids.z_ids, ids.z_n) = detail::code_ids(h_mlp, t.z);
        if (h_mlp != nullptr) {
            const std::uint64_t zc_cost = hashing_macs(*h_mlp, n);
            st.macs_reuse += zc_cost;
            ids.hashing_cost += zc_cost;
        }
    }
    t.z_counts = detail::id_counts(ids.z_ids, ids.z_n);
    t.zc = detail::group_mean(t.z, ids.z_ids, t.z_counts);
    if (h_mlp != nullptr || frozen != nullptr) {
        st.rows_clustered += n;
        st.clusters_used += ids.z_n;
    }

    t.pre1c = matmul_exact(t.zc, w.w_1);
    t.uc = t.pre1c;
    for (auto& e : t.uc.data()) e = std::max(0.0f, e);
    DenseMatrix yc = matmul_exact(t.uc, w.w_2);
    st.macs_reuse += 2ULL * t.zc.rows() * w.d_model * w.d_ff;

    t.y = detail::scatter_rows(yc, ids.z_ids);
    add_inplace(t.y, t.z);

    if (st.clusters_used > 0)
        st.sigma = static_cast<double>(st.rows_clustered) / st.clusters_used;
    if (opts.collect_mse) {
        st.recon_mse = mean_squared_error(t.y, exact_attention(x, w));
        st.mse_weight = t.y.size();
    }
    res.output = t.y;
    return res;
}

// Spec-shaped entry point: both hashers supplied, fresh clustering.
inline std::pair<DenseMatrix, ReuseStats> reuse_attention(const DenseMatrix& x,
                                                          const AttentionWeights& w,
                                                          const LshHasher& h_qkv,
                                                          const LshHasher& h_mlp,
                                                          const AttentionOptions& opts = {}) {
    ClusteredAttentionResult res =
        clustered_attention_forward(x, w, &h_qkv, &h_mlp, nullptr, opts);
    return {std::move(res.output), res.stats};
}

// Backward through the clustered block; assignments are treated as constants
// and gradients flow through the centroid means (each member row receives
// 1/|cluster| of its centroid's gradient).
inline DenseMatrix clustered_attention_backward(const ClusteredAttentionTrace& t,
                                                const AttentionClusterIds& ids,
                                                const DenseMatrix& x,
                                                const AttentionWeights& w,
                                                const DenseMatrix& d_y,
                                                AttentionWeights& grads) {
    const float scale = 1.0f / std::sqrt(static_cast<float>(w.d_k));
    const std::size_t n = x.rows();
    // y = scatter(relu(zc w1) w2) + z
    DenseMatrix d_yc = detail::group_sum(d_y, ids.z_ids, ids.z_n);
    DenseMatrix d_uc = matmul_transB(d_yc, w.w_2);
    add_inplace(grads.w_2, matmul_transA(t.uc, d_yc));
    for (std::size_t k = 0; k < d_uc.size(); ++k)
        if (t.pre1c.data()[k] <= 0.0f) d_uc.data()[k] = 0.0f;
    add_inplace(grads.w_1, matmul_transA(t.zc, d_uc));
    DenseMatrix d_zc = matmul_transB(d_uc, w.w_1);
    DenseMatrix d_z = detail::scatter_mean(d_zc, ids.z_ids, t.z_counts);
    add_inplace(d_z, d_y);  // residual into y
    // z = concat w_o + x
    add_inplace(grads.w_o, matmul_transA(t.concat, d_z));
    DenseMatrix d_concat = matmul_transB(d_z, w.w_o);
    DenseMatrix d_x = d_z;
    for (std::size_t h = 0; h < w.n_heads; ++h) {
        const HeadClusterIds& hid = ids.heads[h];
        DenseMatrix d_o(n, w.d_k);
        for (std::size_t i = 0; i < n; ++i)
            std::copy(d_concat.row(i).data() + h * w.d_k,
                      d_concat.row(i).data() + (h + 1) * w.d_k, d_o.row(i).data());
        DenseMatrix d_ac = detail::group_sum(d_o, hid.q_ids, hid.q_n);
        DenseMatrix d_pc = matmul_transB(d_ac, t.vc[h]);
        DenseMatrix d_vc = matmul_transA(t.pc[h], d_ac);
        DenseMatrix d_sc(d_pc.rows(), d_pc.cols());
        for (std::size_t i = 0; i < d_pc.rows(); ++i) {
            const float* pr = t.pc[h].row(i).data();
            const float* dpr = d_pc.row(i).data();
            double dot = 0.0;
            for (std::size_t j = 0; j < d_pc.cols(); ++j)
                dot += static_cast<double>(pr[j]) * dpr[j];
            for (std::size_t j = 0; j < d_pc.cols(); ++j)
                d_sc(i, j) = pr[j] * (dpr[j] - static_cast<float>(dot));
        }
        for (auto& e : d_sc.data()) e *= scale;
        DenseMatrix d_qc = matmul_exact(d_sc, t.kc[h]);
        DenseMatrix d_kc = matmul_transA(d_sc, t.qc[h]);
        DenseMatrix d_q = detail::scatter_mean(d_qc, hid.q_ids, t.q_counts[h]);
        DenseMatrix d_k = detail::scatter_mean(d_kc, hid.kv_ids, t.kv_counts[h]);
        DenseMatrix d_v = detail::scatter_mean(d_vc, hid.kv_ids, t.kv_counts[h]);
        add_inplace(grads.w_q[h], matmul_transA(x, d_q));
        add_inplace(grads.w_k[h], matmul_transA(x, d_k));
        add_inplace(grads.w_v[h], matmul_transA(x, d_v));
        add_inplace(d_x, matmul_transB(d_q, w.w_q[h]));
        add_inplace(d_x, matmul_transB(d_k, w.w_k[h]));
        add_inplace(d_x, matmul_transB(d_v, w.w_v[h]));
    }
    return d_x;
}

}  // namespace rf
