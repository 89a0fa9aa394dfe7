// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "reuseflow/lsh.hpp"
#include "reuseflow/matrix.hpp"

namespace rf {

// MAC accounting and reconstruction error for one (or several, when merged)
// similarity-aware kernel invocations. MACs are the cost unit everywhere;
// hashing cost is charged to the reuse side.
struct ReuseStats {
    std::uint64_t macs_exact = 0;
    std::uint64_t macs_reuse = 0;
    std::uint64_t rows_clustered = 0;
    std::uint64_t clusters_used = 0;
    double sigma = 1.0;       // rows_clustered / clusters_used
    double recon_mse = 0.0;   // vs the exact kernel, weighted by mse_weight
    std::uint64_t mse_weight = 0;

    double reduction_pct() const {
        if (macs_exact == 0) return 0.0;
        return (1.0 - static_cast<double>(macs_reuse) / static_cast<double>(macs_exact)) *
               100.0;
    }

    double speedup() const {
        if (macs_reuse == 0) return 0.0;
        return static_cast<double>(macs_exact) / static_cast<double>(macs_reuse);
    }

    ReuseStats& operator+=(const ReuseStats& o) {
        macs_exact += o.macs_exact;
        macs_reuse += o.macs_reuse;
        rows_clustered += o.rows_clustered;
        clusters_used += o.clusters_used;
        if (mse_weight + o.mse_weight > 0)
            recon_mse = (recon_mse * mse_weight + o.recon_mse * o.mse_weight) /
                        static_cast<double>(mse_weight + o.mse_weight);
        mse_weight += o.mse_weight;
        if (clusters_used > 0)
            sigma = static_cast<double>(rows_clustered) / static_cast<double>(clusters_used);
        return *this;
    }
};

struct ReuseMatmulResult {
    DenseMatrix output;
    ClusterAssignment assignment;
    ReuseStats stats;
};

namespace detail {

inline std::uint64_t active_clusters(const ClusterAssignment& a) {
    std::uint64_t n = 0;
    for (auto c : a.counts)
        if (c > 0) ++n;
    return n;
}

}  // namespace detail

// Centroid matmul with a precomputed assignment. hashing_cost is whatever the
// caller paid to obtain the assignment (0 when it was amortized elsewhere,
// e.g. an epoch-frozen calibration pass).
inline ReuseMatmulResult reuse_matmul_with(const DenseMatrix& x, const DenseMatrix& w,
                                           ClusterAssignment assignment,
                                           std::uint64_t hashing_cost,
                                           bool collect_mse = true) {
    if (x.cols() != w.rows()) throw ShapeError("reuse_matmul: x.cols != w.rows");
    const DenseMatrix products = matmul_exact(assignment.centroids, w);
    DenseMatrix out(x.rows(), w.cols());
    for (std::size_t i = 0; i < x.rows(); ++i) {
        const float* src = products.row(assignment.cluster_id_per_row[i]).data();
        std::copy(src, src + w.cols(), out.row(i).data());
    }

    ReuseStats st;
    st.macs_exact = matmul_macs(x, w);
    const std::uint64_t active = detail::active_clusters(assignment);
    st.macs_reuse = active * x.cols() * w.cols() + hashing_cost;
    st.rows_clustered = x.rows();
    st.clusters_used = active;
    st.sigma = assignment.sigma;
    if (collect_mse) {
        st.recon_mse = mean_squared_error(out, matmul_exact(x, w));
        st.mse_weight = out.size();
    }
    return {std::move(out), std::move(assignment), st};
}

// Clusters x rows with the hasher, multiplies centroids only, scatters the
// centroid products back to row positions.
inline ReuseMatmulResult reuse_matmul(const DenseMatrix& x, const DenseMatrix& w,
                                      const LshHasher& h, bool collect_mse = true) {
    return reuse_matmul_with(x, w, cluster_rows(h, x), hashing_macs(h, x.rows()),
                             collect_mse);
}

struct ReuseConvResult {
    FeatureMap output;
    ReuseStats stats;
};

// im2col -> reuse_matmul -> reshape. Bit-identical to composing those ops.
inline ReuseConvResult reuse_conv(const FeatureMap& x, const DenseMatrix& filters,
                                  const ConvShape& shape, const LshHasher& h,
                                  bool collect_mse = true) {
    if (filters.rows() != shape.patch_len())
        throw ShapeError("reuse_conv: filter rows != R*S*C");
    if (filters.cols() != shape.n_filters)
        throw ShapeError("reuse_conv: filter cols != n_filters");
    const DenseMatrix cols = im2col(x, shape);
    ReuseMatmulResult mm = reuse_matmul(cols, filters, h, collect_mse);
    FeatureMap out(shape.out_h(), shape.out_w(), shape.n_filters);
    for (std::size_t p = 0; p < mm.output.rows(); ++p) {
        const float* src = mm.output.row(p).data();
        std::copy(src, src + shape.n_filters, out.data.data() + p * shape.n_filters);
    }
    return {std::move(out), mm.stats};
}

// Symmetric per-tensor 8-bit quantization on the [-127, 127] grid.
struct Quantized {
    std::vector<std::int8_t> codes;
    std::size_t rows = 0;
    std::size_t cols = 0;
    float scale = 1.0f;

    DenseMatrix dequantize() const {
        std::vector<float> data(codes.size());
        for (std::size_t k = 0; k < codes.size(); ++k)
            data[k] = static_cast<float>(codes[k]) * scale;
        return DenseMatrix(rows, cols, std::move(data));
    }
};

inline Quantized quantize_8bit(const DenseMatrix& m) {
    float max_abs = 0.0f;
    for (float v : m.data()) max_abs = std::max(max_abs, std::fabs(v));
    Quantized q;
    q.rows = m.rows();
    q.cols = m.cols();
    q.scale = max_abs > 0.0f ? max_abs / 127.0f : 1.0f;
    q.codes.resize(m.size());
    for (std::size_t k = 0; k < m.size(); ++k) {
        const float r = std::round(m.data()[k] / q.scale);
        q.codes[k] = static_cast<std::int8_t>(std::clamp(r, -127.0f, 127.0f));
    }
    return q;
}

// Quantizes x, clusters the dequantized rows (the grid snaps near-identical
// rows onto the same point), then runs the centroid matmul in real
// arithmetic. recon_mse is measured against the exact product of the
// unquantized x, so it includes the quantization error.
inline ReuseMatmulResult reuse_matmul_quantized(const DenseMatrix& x, const DenseMatrix& w,
                                                const LshHasher& h, bool collect_mse = true) {
    if (x.cols() != w.rows()) throw ShapeError("reuse_matmul: x.cols != w.rows");
    const DenseMatrix xq = quantize_8bit(x).dequantize();
    ReuseMatmulResult mm =
        reuse_matmul_with(xq, w, cluster_rows(h, xq), hashing_macs(h, xq.rows()), false);
    if (collect_mse) {
        mm.stats.recon_mse = mean_squared_error(mm.output, matmul_exact(x, w));
        mm.stats.mse_weight = mm.output.size();
    }
    return mm;
}

}  // namespace rf
