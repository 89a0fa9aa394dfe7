// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "reuseflow/errors.hpp"

namespace rf {

static_assert(std::endian::native == std::endian::little,
              "binary formats are little-endian; big-endian hosts unsupported");

// Row-major dense matrix of 32-bit reals. The universal carrier for inputs,
// weights and feature maps. Immutable by convention once built; training code
// replaces whole matrices rather than mutating shared ones.
class DenseMatrix {
public:
    DenseMatrix() = default;

    DenseMatrix(std::size_t rows, std::size_t cols)
        : rows_(rows), cols_(cols), data_(rows * cols, 0.0f) {}

    DenseMatrix(std::size_t rows, std::size_t cols, std::vector<float> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (data_.size() != rows_ * cols_)
            throw ShapeError("DenseMatrix: data length " + std::to_string(data_.size()) +
                             " != rows*cols " + std::to_string(rows_ * cols_));
        for (float v : data_)
            if (!std::isfinite(v)) throw ArgumentError("DenseMatrix: non-finite entry");
    }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }

    float& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
    float operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

    std::span<const float> row(std::size_t i) const {
        return std::span<const float>(data_.data() + i * cols_, cols_);
    }
    std::span<float> row(std::size_t i) {
        return std::span<float>(data_.data() + i * cols_, cols_);
    }

    const std::vector<float>& data() const { return data_; }
    std::vector<float>& data() { return data_; }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(),
                           [](float v) { return std::isfinite(v); });
    }

    bool same_shape(const DenseMatrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<float> data_;
};

// H x W x C feature map, row-major (y, x, channel).
struct FeatureMap {
    std::size_t h = 0;
    std::size_t w = 0;
    std::size_t c = 0;
    std::vector<float> data;

    FeatureMap() = default;
    FeatureMap(std::size_t h_, std::size_t w_, std::size_t c_)
        : h(h_), w(w_), c(c_), data(h_ * w_ * c_, 0.0f) {}

    float& at(std::size_t y, std::size_t x, std::size_t ch) {
        return data[(y * w + x) * c + ch];
    }
    float at(std::size_t y, std::size_t x, std::size_t ch) const {
        return data[(y * w + x) * c + ch];
    }
    std::size_t size() const { return data.size(); }
};

// Convolution geometry; stride is fixed at 1 and there is no padding.
struct ConvShape {
    std::size_t in_h = 0;
    std::size_t in_w = 0;
    std::size_t in_c = 0;
    std::size_t k_h = 0;
    std::size_t k_w = 0;
    std::size_t n_filters = 0;

    std::size_t out_h() const { return in_h - k_h + 1; }
    std::size_t out_w() const { return in_w - k_w + 1; }
    std::size_t patch_len() const { return k_h * k_w * in_c; }

    void validate() const {
        if (in_h < 1 || in_w < 1 || in_c < 1 || k_h < 1 || k_w < 1 || n_filters < 1)
            throw ShapeError("ConvShape: all dims must be >= 1");
        if (k_h > in_h || k_w > in_w)
            throw ShapeError("ConvShape: kernel larger than input");
    }
};

inline std::uint64_t matmul_macs(const DenseMatrix& x, const DenseMatrix& w) {
    return static_cast<std::uint64_t>(x.rows()) * x.cols() * w.cols();
}

// Plain dot-product matmul; the exact-computation oracle everything else is
// measured against.
inline DenseMatrix matmul_exact(const DenseMatrix& x, const DenseMatrix& w) {
    if (x.cols() != w.rows())
        throw ShapeError("matmul: x.cols " + std::to_string(x.cols()) + " != w.rows " +
                         std::to_string(w.rows()));
    DenseMatrix y(x.rows(), w.cols());
    for (std::size_t i = 0; i < x.rows(); ++i) {
        for (std::size_t k = 0; k < x.cols(); ++k) {
            const float xv = x(i, k);
            if (xv == 0.0f) continue;
            for (std::size_t j = 0; j < w.cols(); ++j) y(i, j) += xv * w(k, j);
        }
    }
    return y;
}

// Lowers convolution input to patch rows. Row (i,j) holds the patch at offset
// (i,j); entries ordered (kernel row, kernel col, channel) lexicographic.
// Filters must be flattened the same way.
inline DenseMatrix im2col(const FeatureMap& x, const ConvShape& shape) {
    shape.validate();
    if (x.h != shape.in_h || x.w != shape.in_w || x.c != shape.in_c)
        throw ShapeError("im2col: feature map dims do not match shape");
    const std::size_t oh = shape.out_h();
    const std::size_t ow = shape.out_w();
    DenseMatrix out(oh * ow, shape.patch_len());
    for (std::size_t i = 0; i < oh; ++i) {
        for (std::size_t j = 0; j < ow; ++j) {
            float* dst = out.row(i * ow + j).data();
            std::size_t n = 0;
            for (std::size_t r = 0; r < shape.k_h; ++r)
                for (std::size_t s = 0; s < shape.k_w; ++s)
                    for (std::size_t ch = 0; ch < shape.in_c; ++ch)
                        dst[n++] = x.at(i + r, j + s, ch);
        }
    }
    return out;
}

// Adjoint of im2col: scatter-adds patch-row gradients back onto the map.
inline FeatureMap col2im(const DenseMatrix& rows, const ConvShape& shape) {
    shape.validate();
    if (rows.rows() != shape.out_h() * shape.out_w() || rows.cols() != shape.patch_len())
        throw ShapeError("col2im: row matrix does not match shape");
    FeatureMap x(shape.in_h, shape.in_w, shape.in_c);
    const std::size_t ow = shape.out_w();
    for (std::size_t i = 0; i < shape.out_h(); ++i) {
        for (std::size_t j = 0; j < ow; ++j) {
            const float* src = rows.row(i * ow + j).data();
            std::size_t n = 0;
            for (std::size_t r = 0; r < shape.k_h; ++r)
                for (std::size_t s = 0; s < shape.k_w; ++s)
                    for (std::size_t ch = 0; ch < shape.in_c; ++ch)
                        x.at(i + r, j + s, ch) += src[n++];
        }
    }
    return x;
}

// Non-overlapping p x p tiling used by the patch-embed layer. Entry order per
// row matches im2col.
inline DenseMatrix patch_rows(const FeatureMap& x, std::size_t p) {
    if (p < 1 || x.h % p != 0 || x.w % p != 0)
        throw ShapeError("patch_rows: map dims must be divisible by patch size");
    const std::size_t th = x.h / p;
    const std::size_t tw = x.w / p;
    DenseMatrix out(th * tw, p * p * x.c);
    for (std::size_t i = 0; i < th; ++i) {
        for (std::size_t j = 0; j < tw; ++j) {
            float* dst = out.row(i * tw + j).data();
            std::size_t n = 0;
            for (std::size_t r = 0; r < p; ++r)
                for (std::size_t s = 0; s < p; ++s)
                    for (std::size_t ch = 0; ch < x.c; ++ch)
                        dst[n++] = x.at(i * p + r, j * p + s, ch);
        }
    }
    return out;
}

template <typename T>
double cosine_similarity(std::span<const T> u, std::span<const T> v) {
    if (u.size() != v.size()) throw ShapeError("cosine_similarity: length mismatch");
    double dot = 0.0, nu = 0.0, nv = 0.0;
    for (std::size_t k = 0; k < u.size(); ++k) {
        dot += static_cast<double>(u[k]) * v[k];
        nu += static_cast<double>(u[k]) * u[k];
        nv += static_cast<double>(v[k]) * v[k];
    }
    if (nu == 0.0 || nv == 0.0)
        throw UndefinedSimilarityError("cosine_similarity: zero vector");
    return dot / (std::sqrt(nu) * std::sqrt(nv));
}

inline double cosine_similarity(std::span<const float> u, std::span<const float> v) {
    return cosine_similarity<float>(u, v);
}

// Max-shifted softmax; total on finite input. Shifted logits are floored at
// -87 so every output stays strictly positive even in float.
template <typename T>
std::vector<T> softmax_normalize(std::span<const T> v) {
    if (v.empty()) return {};
    const T hi = *std::max_element(v.begin(), v.end());
    std::vector<T> out(v.size());
    double sum = 0.0;
    for (std::size_t k = 0; k < v.size(); ++k) {
        const double shifted =
            std::max(static_cast<double>(v[k]) - static_cast<double>(hi), -87.0);
        out[k] = static_cast<T>(std::exp(shifted));
        sum += out[k];
    }
    for (auto& e : out) e = static_cast<T>(e / sum);
    return out;
}

// Mean over a contiguous equal-as-possible bucket partition; identity when
// p == len(v). Buckets follow [floor(k*n/p), ceil((k+1)*n/p)), which also
// covers p > len(v).
template <typename T>
std::vector<T> adaptive_pool_1d(std::span<const T> v, std::size_t p) {
    if (p == 0) throw ArgumentError("adaptive_pool_1d: target length 0");
    if (v.empty()) throw ArgumentError("adaptive_pool_1d: empty input");
    const std::size_t n = v.size();
    std::vector<T> out(p);
    for (std::size_t k = 0; k < p; ++k) {
        const std::size_t lo = k * n / p;
        const std::size_t hi = ((k + 1) * n + p - 1) / p;
        double acc = 0.0;
        for (std::size_t m = lo; m < hi; ++m) acc += v[m];
        out[k] = static_cast<T>(acc / static_cast<double>(hi - lo));
    }
    return out;
}

// a^T * b, for gradient accumulation.
inline DenseMatrix matmul_transA(const DenseMatrix& a, const DenseMatrix& b) {
    if (a.rows() != b.rows()) throw ShapeError("matmul_transA: a.rows != b.rows");
    DenseMatrix y(a.cols(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const float av = a(i, k);
            if (av == 0.0f) continue;
            for (std::size_t j = 0; j < b.cols(); ++j) y(k, j) += av * b(i, j);
        }
    return y;
}

// a * b^T.
inline DenseMatrix matmul_transB(const DenseMatrix& a, const DenseMatrix& b) {
    if (a.cols() != b.cols()) throw ShapeError("matmul_transB: a.cols != b.cols");
    DenseMatrix y(a.rows(), b.rows());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < b.rows(); ++j) {
            double acc = 0.0;
            const float* ar = a.row(i).data();
            const float* br = b.row(j).data();
            for (std::size_t k = 0; k < a.cols(); ++k) acc += static_cast<double>(ar[k]) * br[k];
            y(i, j) = static_cast<float>(acc);
        }
    return y;
}

inline void add_inplace(DenseMatrix& a, const DenseMatrix& b) {
    if (!a.same_shape(b)) throw ShapeError("add_inplace: shape mismatch");
    for (std::size_t k = 0; k < a.size(); ++k) a.data()[k] += b.data()[k];
}

inline double mean_squared_error(const DenseMatrix& a, const DenseMatrix& b) {
    if (!a.same_shape(b)) throw ShapeError("mean_squared_error: shape mismatch");
    double acc = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) {
        const double d = static_cast<double>(a.data()[k]) - b.data()[k];
        acc += d * d;
    }
    return a.size() == 0 ? 0.0 : acc / static_cast<double>(a.size());
}

// --- RFM1 binary matrix format -------------------------------------------
// magic "RFM1", rows and cols as little-endian u64, then rows*cols f32 LE.

namespace detail {
inline void write_u64(std::ostream& os, std::uint64_t v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
inline std::uint64_t read_u64(std::istream& is) {
    std::uint64_t v = 0;
    is.read(reinterpret_cast<char*>(&v), sizeof(v));
    return v;
}
}  // namespace detail

inline void write_matrix(std::ostream& os, const DenseMatrix& m) {
    os.write("RFM1", 4);
    detail::write_u64(os, m.rows());
    detail::write_u64(os, m.cols());
    os.write(reinterpret_cast<const char*>(m.data().data()),
             static_cast<std::streamsize>(m.size() * sizeof(float)));
}

inline DenseMatrix read_matrix(std::istream& is, const std::string& context) {
    char magic[4] = {};
    is.read(magic, 4);
    if (!is || std::string(magic, 4) != "RFM1")
        throw IoError("bad RFM1 magic in " + context);
    const std::uint64_t rows = detail::read_u64(is);
    const std::uint64_t cols = detail::read_u64(is);
    std::vector<float> data(rows * cols);
    is.read(reinterpret_cast<char*>(data.data()),
            static_cast<std::streamsize>(data.size() * sizeof(float)));
    if (!is) throw IoError("truncated RFM1 payload in " + context);
    return DenseMatrix(rows, cols, std::move(data));
}

inline void save_matrix(const std::string& path, const DenseMatrix& m) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for write: " + path);
    write_matrix(os, m);
    if (!os) throw IoError("write failed: " + path);
}

inline DenseMatrix load_matrix(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path);
    return read_matrix(is, path);
}

}  // namespace rf
