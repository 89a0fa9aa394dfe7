// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <unordered_map>
#include <vector>

#include "reuseflow/errors.hpp"
#include "reuseflow/matrix.hpp"
#include "reuseflow/rng.hpp"

namespace rf {

// Random-projection LSH table. Frozen after construction; the same
// (input_dim, hash_size, seed) triple always regenerates the same
// projections, so configs store the triple and never the matrix.
//
// Projections are drawn row by row, so a hasher with a larger hash_size
// extends a smaller one bit for bit under the same seed; growing hash_size
// strictly refines the induced clustering.
struct LshHasher {
    std::size_t input_dim = 0;
    std::size_t hash_size = 0;
    std::uint64_t seed = 0;
    DenseMatrix projections;  // hash_size x input_dim, standard normal
};

inline LshHasher new_hasher(std::size_t input_dim, std::size_t hash_size, std::uint64_t seed) {
    if (hash_size < 1 || hash_size > 64)
        throw ArgumentError("new_hasher: hash_size must be in [1,64]");
    if (input_dim < 1) throw ArgumentError("new_hasher: input_dim must be >= 1");
    LshHasher h;
    h.input_dim = input_dim;
    h.hash_size = hash_size;
    h.seed = seed;
    GaussianRng rng(seed);
    std::vector<float> proj(hash_size * input_dim);
    for (auto& v : proj) v = static_cast<float>(rng.normal());
    h.projections = DenseMatrix(hash_size, input_dim, std::move(proj));
    return h;
}

// Rows longer than input_dim are reduced by strided subsampling at indices
// floor(k * len / input_dim). Bit b is 1 iff the projection dot is >= 0.
inline std::uint64_t hash_row(const LshHasher& h, std::span<const float> row) {
    if (row.size() < h.input_dim)
        throw ShapeError("hash_row: row shorter than input_dim");
    std::uint64_t code = 0;
    for (std::size_t b = 0; b < h.hash_size; ++b) {
        const float* proj = h.projections.row(b).data();
        double dot = 0.0;
        for (std::size_t k = 0; k < h.input_dim; ++k)
            dot += static_cast<double>(proj[k]) * row[k * row.size() / h.input_dim];
        if (dot >= 0.0) code |= (std::uint64_t{1} << b);
    }
    return code;
}

inline std::uint64_t hashing_macs(const LshHasher& h, std::size_t n_rows) {
    return static_cast<std::uint64_t>(n_rows) * h.hash_size * h.input_dim;
}

// One clustered input: per-row ids, centroids over full rows, member counts
// and the compression ratio sigma = n_rows / n_clusters.
struct ClusterAssignment {
    std::vector<std::uint32_t> cluster_id_per_row;
    DenseMatrix centroids;
    std::vector<std::uint32_t> counts;
    double sigma = 1.0;

    std::size_t n_clusters() const { return counts.size(); }
    std::size_t n_rows() const { return cluster_id_per_row.size(); }
};

namespace detail {

// Recomputes centroids and counts for fixed per-row ids. Ids normally form a
// dense 0..n_clusters-1 range; an empty cluster gets a zero centroid and is
// excluded from sigma.
inline ClusterAssignment group_rows(std::vector<std::uint32_t> ids, std::size_t n_clusters,
                                    const DenseMatrix& x) {
    ClusterAssignment a;
    a.counts.assign(n_clusters, 0);
    std::vector<double> sums(n_clusters * x.cols(), 0.0);
    for (std::size_t i = 0; i < x.rows(); ++i) {
        const std::uint32_t c = ids[i];
        ++a.counts[c];
        const float* src = x.row(i).data();
        double* dst = sums.data() + static_cast<std::size_t>(c) * x.cols();
        for (std::size_t j = 0; j < x.cols(); ++j) dst[j] += src[j];
    }
    a.centroids = DenseMatrix(n_clusters, x.cols());
    std::size_t nonempty = 0;
    for (std::size_t c = 0; c < n_clusters; ++c) {
        if (a.counts[c] == 0) continue;
        ++nonempty;
        for (std::size_t j = 0; j < x.cols(); ++j)
            a.centroids(c, j) = static_cast<float>(sums[c * x.cols() + j] / a.counts[c]);
    }
    a.cluster_id_per_row = std::move(ids);
    a.sigma = static_cast<double>(x.rows()) / static_cast<double>(nonempty);
    return a;
}

}  // namespace detail

// Assigns per-row codes, then ids in first-occurrence order (deterministic
// regardless of hash-map iteration order). Centroids are member means over
// full rows, not just the hashed sub-vector.
inline ClusterAssignment cluster_rows(const LshHasher& h, const DenseMatrix& x) {
    if (x.rows() < 1) throw ShapeError("cluster_rows: empty input");
    if (x.cols() < h.input_dim)
        throw ShapeError("cluster_rows: x.cols < hasher input_dim");
    std::vector<std::uint32_t> ids(x.rows());
    std::unordered_map<std::uint64_t, std::uint32_t> first_seen;
    first_seen.reserve(x.rows());
    std::uint32_t next_id = 0;
    for (std::size_t i = 0; i < x.rows(); ++i) {
        const std::uint64_t code = hash_row(h, x.row(i));
        auto [it, inserted] = first_seen.try_emplace(code, next_id);
        if (inserted) ++next_id;
        ids[i] = it->second;
    }
    return detail::group_rows(std::move(ids), next_id, x);
}

// Frozen-assignment regrouping: keeps the stored ids, recomputes centroids
// from the rows as they are now. Used by epoch-frozen training.
inline ClusterAssignment regroup_rows(std::span<const std::uint32_t> ids,
                                      std::size_t n_clusters, const DenseMatrix& x) {
    if (ids.size() != x.rows())
        throw ShapeError("regroup_rows: id count != row count");
    return detail::group_rows(std::vector<std::uint32_t>(ids.begin(), ids.end()), n_clusters,
                              x);
}

}  // namespace rf
