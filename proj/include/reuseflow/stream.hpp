// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "reuseflow/errors.hpp"
#include "reuseflow/matrix.hpp"
#include "reuseflow/rng.hpp"

namespace rf {

// Synthetic correlated frame stream. Per-pixel AR(1) over time with unit
// marginal variance; class signal is an additive per-class pattern.
struct FrameStream {
    std::size_t n_frames = 0;
    std::size_t h = 0, w = 0, c = 0;
    std::vector<float> data;  // frame-major, each frame (y, x, channel) row-major
    std::vector<std::int32_t> labels;
    std::size_t n_classes = 1;
    float target_rho = 0.0f;

    std::size_t frame_len() const { return h * w * c; }

    std::span<const float> frame(std::size_t t) const {
        return std::span<const float>(data.data() + t * frame_len(), frame_len());
    }

    FeatureMap frame_map(std::size_t t) const {
        FeatureMap m(h, w, c);
        const auto f = frame(t);
        std::copy(f.begin(), f.end(), m.data.begin());
        return m;
    }

    // Frames as rows of a matrix (n_frames x pixels).
    DenseMatrix as_rows() const {
        return DenseMatrix(n_frames, frame_len(), data);
    }
};

// Smooth per-class pattern: a positive base plus one low-frequency wave, rms
// close to `amplitude`. Smoothness gives first-layer patches the kind of
// shared low-frequency content natural images have; the positive base keeps
// class means apart so the toy tasks are learnable.
inline std::vector<float> class_pattern(std::size_t h, std::size_t w, std::size_t c,
                                        std::size_t cls, std::uint64_t seed,
                                        double amplitude) {
    GaussianRng rng(mix_seed(seed, 0x8f1bbcdcULL + cls));
    const double fx = 1.0 + std::floor(rng.uniform() * 2.0);  // 1 or 2 periods
    const double fy = 1.0 + std::floor(rng.uniform() * 2.0);
    const double phase = rng.uniform() * 6.283185307179586;
    std::vector<float> p(h * w * c);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
            const double wave = std::cos(6.283185307179586 *
                                             (fx * x / static_cast<double>(w) +
                                              fy * y / static_cast<double>(h)) +
                                         phase);
            for (std::size_t ch = 0; ch < c; ++ch)
                p[(y * w + x) * c + ch] =
                    static_cast<float>(amplitude * (0.8 + 0.85 * wave));
        }
    return p;
}

// AR(1) stream: frame_0 ~ N(0,1); frame_t = rho * frame_{t-1} +
// sqrt(1 - rho^2) * N(0,1). Labels come from 2*n_classes piecewise-constant
// segments assigned round-robin. A single class means no additive pattern.
// noise_seed != 0 draws fresh AR noise while keeping the class patterns of
// `seed`, i.e. a held-out stream of the same classification task.
inline FrameStream gen_stream(std::size_t n_frames, std::size_t h, std::size_t w,
                              std::size_t c, double rho, std::size_t n_classes,
                              std::uint64_t seed, double amplitude = 1.0,
                              std::uint64_t noise_seed = 0) {
    if (rho < 0.0 || rho > 1.0) throw ArgumentError("gen_stream: rho must be in [0,1]");
    if (n_frames < 1 || h < 1 || w < 1 || c < 1 || n_classes < 1)
        throw ArgumentError("gen_stream: all counts must be >= 1");
    FrameStream s;
    s.n_frames = n_frames;
    s.h = h;
    s.w = w;
    s.c = c;
    s.n_classes = n_classes;
    s.target_rho = static_cast<float>(rho);
    s.data.resize(n_frames * s.frame_len());
    s.labels.resize(n_frames);

    // labels: 2k equal-as-possible segments, classes round-robin
    const std::size_t n_segments = std::min(n_frames, 2 * n_classes);
    for (std::size_t t = 0; t < n_frames; ++t) {
        const std::size_t seg = t * n_segments / n_frames;
        s.labels[t] = static_cast<std::int32_t>(seg % n_classes);
    }

    std::vector<std::vector<float>> patterns;
    if (n_classes > 1)
        for (std::size_t cls = 0; cls < n_classes; ++cls)
            patterns.push_back(class_pattern(h, w, c, cls, seed, amplitude));

    GaussianRng rng(mix_seed(noise_seed != 0 ? noise_seed : seed, 0x51d3a9b7ULL));
    const std::size_t len = s.frame_len();
    std::vector<double> state(len);
    const double innov = std::sqrt(std::max(0.0, 1.0 - rho * rho));
    for (std::size_t t = 0; t < n_frames; ++t) {
        for (std::size_t k = 0; k < len; ++k) {
            state[k] = t == 0 ? rng.normal() : rho * state[k] + innov * rng.normal();
            double v = state[k];
            if (!patterns.empty()) v += patterns[s.labels[t]][k];
            s.data[t * len + k] = static_cast<float>(v);
        }
    }
    return s;
}

// Pairwise cosine similarity; symmetric with unit diagonal.
struct SimilarityMatrix {
    DenseMatrix values;

    // Mean similarity over pairs exactly `distance` apart in stream order.
    double mean_at_distance(std::size_t distance) const {
        const std::size_t n = values.rows();
        if (distance == 0 || distance >= n)
            throw ArgumentError("mean_at_distance: distance out of range");
        double acc = 0.0;
        for (std::size_t i = 0; i + distance < n; ++i) acc += values(i, i + distance);
        return acc / static_cast<double>(n - distance);
    }

    double mean_offdiag() const {
        const std::size_t n = values.rows();
        double acc = 0.0;
        std::size_t cnt = 0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i + 1; j < n; ++j) {
                acc += values(i, j);
                ++cnt;
            }
        return cnt == 0 ? 0.0 : acc / static_cast<double>(cnt);
    }
};

inline SimilarityMatrix analyze_similarity(const DenseMatrix& rows) {
    if (rows.rows() < 2) throw ArgumentError("analyze_similarity: need >= 2 rows");
    SimilarityMatrix sim;
    sim.values = DenseMatrix(rows.rows(), rows.rows());
    for (std::size_t i = 0; i < rows.rows(); ++i) {
        sim.values(i, i) = 1.0f;
        for (std::size_t j = i + 1; j < rows.rows(); ++j) {
            const float v = static_cast<float>(cosine_similarity(rows.row(i), rows.row(j)));
            sim.values(i, j) = v;
            sim.values(j, i) = v;
        }
    }
    return sim;
}

inline SimilarityMatrix analyze_similarity(const FrameStream& s) {
    return analyze_similarity(s.as_rows());
}

// --- RFS1 stream format ----------------------------------------------------
// magic "RFS1"; u64 n_frames, h, w, c, n_classes; f32 rho; u8 has_labels;
// labels as i32 LE when present; then frame data f32 LE in stream order.

inline void write_stream(std::ostream& os, const FrameStream& s) {
    os.write("RFS1", 4);
    detail::write_u64(os, s.n_frames);
    detail::write_u64(os, s.h);
    detail::write_u64(os, s.w);
    detail::write_u64(os, s.c);
    detail::write_u64(os, s.n_classes);
    os.write(reinterpret_cast<const char*>(&s.target_rho), sizeof(float));
    const std::uint8_t has_labels = s.labels.empty() ? 0 : 1;
    os.write(reinterpret_cast<const char*>(&has_labels), 1);
    if (has_labels)
        os.write(reinterpret_cast<const char*>(s.labels.data()),
                 static_cast<std::streamsize>(s.labels.size() * sizeof(std::int32_t)));
    os.write(reinterpret_cast<const char*>(s.data.data()),
             static_cast<std::streamsize>(s.data.size() * sizeof(float)));
}

inline FrameStream read_stream(std::istream& is, const std::string& context) {
    char magic[4] = {};
    is.read(magic, 4);
    if (!is || std::string(magic, 4) != "RFS1")
        throw IoError("bad RFS1 magic in " + context);
    FrameStream s;
    s.n_frames = detail::read_u64(is);
    s.h = detail::read_u64(is);
    s.w = detail::read_u64(is);
    s.c = detail::read_u64(is);
    s.n_classes = detail::read_u64(is);
    is.read(reinterpret_cast<char*>(&s.target_rho), sizeof(float));
    std::uint8_t has_labels = 0;
    is.read(reinterpret_cast<char*>(&has_labels), 1);
    if (has_labels) {
        s.labels.resize(s.n_frames);
        is.read(reinterpret_cast<char*>(s.labels.data()),
                static_cast<std::streamsize>(s.labels.size() * sizeof(std::int32_t)));
    }
    s.data.resize(s.n_frames * s.frame_len());
    is.read(reinterpret_cast<char*>(s.data.data()),
            static_cast<std::streamsize>(s.data.size() * sizeof(float)));
    if (!is) throw IoError("truncated RFS1 payload in " + context);
    return s;
}

inline void save_stream(const std::string& path, const FrameStream& s) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for write: " + path);
    write_stream(os, s);
    if (!os) throw IoError("write failed: " + path);
}

inline FrameStream load_stream(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path);
    return read_stream(is, path);
}

}  // namespace rf
