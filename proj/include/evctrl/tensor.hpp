// Copyright 2026 The evctrl Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <initializer_list>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "evctrl/errors.hpp"

namespace evctrl {

/// Sorted ascending list of token (row) indices.
using TokenSet = std::vector<std::size_t>;

/// Counts multiply-accumulates. Additions, normalisations and activations
/// are not counted.
class FlopCounter {
public:
    void add(std::uint64_t macs) noexcept { total_ += macs; }
    std::uint64_t total() const noexcept { return total_; }
    /// Only call between runs.
    void reset() noexcept { total_ = 0; }

private:
    std::uint64_t total_ = 0;
};

/// Dense row-major [rows x cols] matrix of doubles.
struct Tensor2D {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Tensor2D() = default;
    Tensor2D(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

    static Tensor2D from_rows(std::initializer_list<std::initializer_list<double>> values) {
        Tensor2D t;
        t.rows = values.size();
        t.cols = t.rows ? values.begin()->size() : 0;
        t.data.reserve(t.rows * t.cols);
        for (const auto& row : values) {
            if (row.size() != t.cols) throw DimensionError("from_rows: ragged initializer");
            t.data.insert(t.data.end(), row.begin(), row.end());
        }
        return t;
    }

    double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

    std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
    std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

    bool empty() const noexcept { return data.empty(); }

    std::string shape() const {
        std::ostringstream os;
        os << '[' << rows << " x " << cols << ']';
        return os.str();
    }

    bool operator==(const Tensor2D&) const = default;
};

/// Copies the listed rows into a compact tensor.
inline Tensor2D gather_rows(const Tensor2D& x, std::span<const std::size_t> rows) {
    Tensor2D out(rows.size(), x.cols);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] >= x.rows) throw IndexError("gather_rows: row index out of range");
        std::copy_n(x.row(rows[i]).begin(), x.cols, out.row(i).begin());
    }
    return out;
}

inline double max_abs_diff(const Tensor2D& a, const Tensor2D& b) {
    if (a.rows != b.rows || a.cols != b.cols)
        throw DimensionError("max_abs_diff: " + a.shape() + " vs " + b.shape());
    double worst = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) worst = std::max(worst, std::abs(a.data[i] - b.data[i]));
    return worst;
}

inline void check_finite(const Tensor2D& t, const char* op) {
    // v * 0 is 0 for finite v and NaN otherwise.
    double probe = 0.0;
    for (double v : t.data) probe += v * 0.0;
    if (probe != 0.0) throw NumericError(std::string(op) + ": produced a non-finite value");
}

namespace detail {

#if defined(__AVX__)
constexpr std::size_t kLanes = 4;
#else
constexpr std::size_t kLanes = 2;
#endif
typedef double Vec __attribute__((vector_size(kLanes * sizeof(double))));
constexpr std::size_t kTile = 2 * kLanes;  // output columns per micro-tile: two vectors

inline Vec load(const double* p) {
    Vec v;
    std::memcpy(&v, p, sizeof v);
    return v;
}

inline void store(double* p, Vec v) { std::memcpy(p, &v, sizeof v); }

// R rows of C at once; each output element sums over p in order, so a row's
// result does not depend on which rows it was grouped with.
template <std::size_t R>
inline void gemm_rows(const double* const* ar, const double* __restrict b, std::size_t inner, std::size_t width,
                      double* const* cr) {
    std::size_t j = 0;
    for (; j + kTile <= width; j += kTile) {
        Vec acc[R][2] = {};
        for (std::size_t p = 0; p < inner; ++p) {
            const Vec b0 = load(b + p * width + j), b1 = load(b + p * width + j + kLanes);
            for (std::size_t r = 0; r < R; ++r) {
                const double av = ar[r][p];
                acc[r][0] += av * b0;
                acc[r][1] += av * b1;
            }
        }
        for (std::size_t r = 0; r < R; ++r) {
            store(cr[r] + j, acc[r][0]);
            store(cr[r] + j + kLanes, acc[r][1]);
        }
    }
    for (; j < width; ++j) {
        double acc[R] = {};
        for (std::size_t p = 0; p < inner; ++p)
            for (std::size_t r = 0; r < R; ++r) acc[r] += ar[r][p] * b[p * width + j];
        for (std::size_t r = 0; r < R; ++r) cr[r][j] = acc[r];
    }
}

// c[i,:] = a[row(i),:] * b over raw row-major buffers. `rows == nullptr`
// means rows 0..count-1.
inline void gemm(const double* a, std::size_t lda, const std::size_t* rows, std::size_t count, const double* b,
                 std::size_t inner, std::size_t width, double* c) {
    constexpr std::size_t R = 4;
    auto src = [&](std::size_t i) { return a + (rows ? rows[i] : i) * lda; };
    std::size_t i = 0;
    for (; i + R <= count; i += R) {
        const double* ar[R];
        double* cr[R];
        for (std::size_t r = 0; r < R; ++r) {
            ar[r] = src(i + r);
            cr[r] = c + (i + r) * width;
        }
        gemm_rows<R>(ar, b, inner, width, cr);
    }
    for (; i < count; ++i) {
        const double* ar[1] = {src(i)};
        double* cr[1] = {c + i * width};
        gemm_rows<1>(ar, b, inner, width, cr);
    }
}

inline void gemm(const Tensor2D& a, const std::size_t* rows, std::size_t count, const Tensor2D& b, Tensor2D& c) {
    gemm(a.data.data(), a.cols, rows, count, b.data.data(), a.cols, b.cols, c.data.data());
}

/// exp(x) by range reduction x = k ln2 + r, |r| <= ln2/2, and a degree-13
/// Taylor polynomial in r (truncation below 2e-16 relative). Written on
/// vector types so every lane takes the same path; arguments are clamped to
/// [-708, 709].
inline Vec exp(Vec x) {
    typedef std::int64_t IVec __attribute__((vector_size(sizeof(Vec))));
    constexpr double kLog2e = 1.4426950408889634;
    constexpr double kLn2Hi = 0.693147180369123816490;
    constexpr double kLn2Lo = 1.90821492927058770002e-10;
    constexpr double kShift = 6755399441055744.0;  // 1.5 * 2^52: adding it rounds to an integer
    const Vec lo = Vec{} - 708.0, hi = Vec{} + 709.0;
    x = x < lo ? lo : x;
    x = x > hi ? hi : x;
    const Vec t = x * kLog2e + kShift;
    const Vec k = t - kShift;
    const Vec r = (x - k * kLn2Hi) - k * kLn2Lo;
    Vec p = Vec{} + 1.0 / 6227020800.0;
    p = p * r + 1.0 / 479001600.0;
    p = p * r + 1.0 / 39916800.0;
    p = p * r + 1.0 / 3628800.0;
    p = p * r + 1.0 / 362880.0;
    p = p * r + 1.0 / 40320.0;
    p = p * r + 1.0 / 5040.0;
    p = p * r + 1.0 / 720.0;
    p = p * r + 1.0 / 120.0;
    p = p * r + 1.0 / 24.0;
    p = p * r + 1.0 / 6.0;
    p = p * r + 0.5;
    p = p * r + 1.0;
    p = p * r + 1.0;
    // The low mantissa bits of t hold k; move k + 1023 into the exponent field.
    const IVec scale = ((IVec)t + 1023) << 52;
    return p * (Vec)scale;
}

inline void exp_inplace(double* x, std::size_t n) {
    std::size_t i = 0;
    for (; i + kLanes <= n; i += kLanes) store(x + i, exp(load(x + i)));
    for (; i < n; ++i) {
        Vec v{};
        v[0] = x[i];
        x[i] = exp(v)[0];
    }
}

inline double exp(double x) {
    Vec v{};
    v[0] = x;
    return exp(v)[0];
}

inline void check_subset(const std::optional<TokenSet>& subset, std::size_t rows, const char* op) {
    if (!subset) return;
    for (std::size_t idx : *subset)
        if (idx >= rows)
            throw IndexError(std::string(op) + ": row index " + std::to_string(idx) + " >= " + std::to_string(rows));
}

} // namespace detail

/// Standard product; adds a.rows * a.cols * b.cols to the counter.
inline Tensor2D matmul(const Tensor2D& a, const Tensor2D& b, FlopCounter& counter) {
    if (a.cols != b.rows) throw DimensionError("matmul: cannot multiply " + a.shape() + " by " + b.shape());
    Tensor2D c(a.rows, b.cols);
    detail::gemm(a, nullptr, a.rows, b, c);
    counter.add(static_cast<std::uint64_t>(a.rows) * a.cols * b.cols);
    check_finite(c, "matmul");
    return c;
}

/// Product of the selected rows of a with b; output has rows.size() rows.
inline Tensor2D matmul_rows(const Tensor2D& a, std::span<const std::size_t> rows, const Tensor2D& b,
                            FlopCounter& counter) {
    if (a.cols != b.rows) throw DimensionError("matmul: cannot multiply " + a.shape() + " by " + b.shape());
    for (std::size_t r : rows)
        if (r >= a.rows) throw IndexError("matmul_rows: row index out of range");
    Tensor2D c(rows.size(), b.cols);
    detail::gemm(a, rows.data(), rows.size(), b, c);
    counter.add(static_cast<std::uint64_t>(rows.size()) * a.cols * b.cols);
    check_finite(c, "matmul");
    return c;
}

inline void add_bias(Tensor2D& x, std::span<const double> bias) {
    if (bias.size() != x.cols) throw DimensionError("add_bias: bias length mismatch for " + x.shape());
    for (std::size_t r = 0; r < x.rows; ++r) {
        auto row = x.row(r);
        for (std::size_t c = 0; c < x.cols; ++c) row[c] += bias[c];
    }
}

inline void add_inplace(Tensor2D& x, const Tensor2D& y) {
    if (x.rows != y.rows || x.cols != y.cols)
        throw DimensionError("add: shape " + x.shape() + " vs " + y.shape());
    for (std::size_t i = 0; i < x.data.size(); ++i) x.data[i] += y.data[i];
}

/// Row-wise layer normalisation with population variance.
inline Tensor2D layer_norm(const Tensor2D& x, std::span<const double> gamma, std::span<const double> beta,
                           double eps = 1e-6) {
    if (x.cols == 0) throw DimensionError("layer_norm: zero-length rows");
    if (gamma.size() != x.cols || beta.size() != x.cols)
        throw DimensionError("layer_norm: gamma/beta length must equal " + std::to_string(x.cols));
    if (!(eps > 0.0)) throw ParameterError("layer_norm: eps must be positive");

    Tensor2D out(x.rows, x.cols);
    const double inv_cols = 1.0 / static_cast<double>(x.cols);
    for (std::size_t r = 0; r < x.rows; ++r) {
        const auto in = x.row(r);
        auto dst = out.row(r);
        double mean = 0.0;
        for (double v : in) mean += v;
        mean *= inv_cols;
        double var = 0.0;
        for (double v : in) var += (v - mean) * (v - mean);
        var *= inv_cols;
        const double inv_std = 1.0 / std::sqrt(var + eps);
        for (std::size_t c = 0; c < x.cols; ++c) dst[c] = (in[c] - mean) * inv_std * gamma[c] + beta[c];
    }
    check_finite(out, "layer_norm");
    return out;
}

/// GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))),
/// with tanh(u) = 1 - 2 / (exp(2u) + 1).
inline void gelu_inplace(double* x, std::size_t n) {
    constexpr double kSqrt2OverPi = 0.7978845608028654;
    constexpr double kCubic = 0.044715;
    thread_local std::vector<double> e;
    e.resize(n);
    for (std::size_t i = 0; i < n; ++i) e[i] = 2.0 * kSqrt2OverPi * (x[i] + kCubic * x[i] * x[i] * x[i]);
    detail::exp_inplace(e.data(), n);
    for (std::size_t i = 0; i < n; ++i) x[i] = 0.5 * x[i] * (2.0 - 2.0 / (e[i] + 1.0));
}

inline double gelu(double x) {
    gelu_inplace(&x, 1);
    return x;
}

/// Multi-head scaled dot-product attention, softmax(Q K^T / sqrt(d_h)) V.
///
/// q may have a different row count from k/v (k.rows == v.rows is required).
/// With `row_subset`, only those query rows are computed and the result is
/// compact: row i of the output belongs to query row (*row_subset)[i].
/// Counts s*n*d for the score product and s*n*d for the value product, where
/// s is the number of computed query rows and n = k.rows.
inline Tensor2D attention(const Tensor2D& q, const Tensor2D& k, const Tensor2D& v, std::size_t heads,
                          const std::optional<TokenSet>& row_subset, FlopCounter& counter) {
    if (q.cols != k.cols || k.cols != v.cols)
        throw DimensionError("attention: q/k/v widths differ: " + q.shape() + ", " + k.shape() + ", " + v.shape());
    if (k.rows != v.rows) throw DimensionError("attention: k/v token counts differ: " + k.shape() + ", " + v.shape());
    if (heads == 0 || q.cols % heads != 0)
        throw ConfigError("attention: width " + std::to_string(q.cols) + " not divisible by " +
                          std::to_string(heads) + " heads");
    detail::check_subset(row_subset, q.rows, "attention");

    const std::size_t d = q.cols;
    const std::size_t n = k.rows;
    const std::size_t dh = d / heads;
    const std::size_t s = row_subset ? row_subset->size() : q.rows;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    Tensor2D out(s, d);
    if (s == 0) return out;
    if (n == 0) throw DimensionError("attention: no key tokens");

    // Per head: gather Q_h, K_h^T and V_h, then two GEMMs over query chunks
    // small enough that the score block stays in cache.
    constexpr std::size_t kChunk = 64;
    std::vector<double> qh(s * dh), kt(dh * n), vh(n * dh), scores(kChunk * n), oh(kChunk * dh);
    for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t off = h * dh;
        for (std::size_t i = 0; i < s; ++i) {
            const std::size_t qi = row_subset ? (*row_subset)[i] : i;
            std::copy_n(q.data.data() + qi * d + off, dh, qh.data() + i * dh);
        }
        for (std::size_t j = 0; j < n; ++j) {
            std::copy_n(v.data.data() + j * d + off, dh, vh.data() + j * dh);
            for (std::size_t c = 0; c < dh; ++c) kt[c * n + j] = k(j, off + c);
        }
        for (std::size_t i0 = 0; i0 < s; i0 += kChunk) {
            const std::size_t rows = std::min(kChunk, s - i0);
            detail::gemm(qh.data() + i0 * dh, dh, nullptr, rows, kt.data(), dh, n, scores.data());
            for (std::size_t i = 0; i < rows; ++i) {
                double* sr = scores.data() + i * n;
                double peak = -INFINITY;
                for (std::size_t j = 0; j < n; ++j) {
                    sr[j] *= scale;
                    peak = std::max(peak, sr[j]);
                }
                for (std::size_t j = 0; j < n; ++j) sr[j] -= peak;
                detail::exp_inplace(sr, n);
                double total = 0.0;
                for (std::size_t j = 0; j < n; ++j) total += sr[j];
                const double inv_total = 1.0 / total;
                for (std::size_t j = 0; j < n; ++j) sr[j] *= inv_total;
            }
            detail::gemm(scores.data(), n, nullptr, rows, vh.data(), n, dh, oh.data());
            for (std::size_t i = 0; i < rows; ++i)
                std::copy_n(oh.data() + i * dh, dh, out.data.data() + (i0 + i) * d + off);
        }
    }
    counter.add(2ULL * s * n * d);
    check_finite(out, "attention");
    return out;
}

/// Two-layer GELU MLP, x W1 + b1 -> gelu -> W2 + b2, applied per row.
/// With `row_subset` the output is compact, as for attention().
inline Tensor2D mlp(const Tensor2D& x, const Tensor2D& w1, std::span<const double> b1, const Tensor2D& w2,
                    std::span<const double> b2, const std::optional<TokenSet>& row_subset, FlopCounter& counter) {
    if (w1.rows != x.cols || b1.size() != w1.cols || w2.rows != w1.cols || w2.cols != x.cols ||
        b2.size() != w2.cols)
        throw DimensionError("mlp: weight chain " + x.shape() + " -> " + w1.shape() + " -> " + w2.shape() +
                             " does not line up");
    detail::check_subset(row_subset, x.rows, "mlp");

    Tensor2D hidden = row_subset ? matmul_rows(x, *row_subset, w1, counter) : matmul(x, w1, counter);
    add_bias(hidden, b1);
    gelu_inplace(hidden.data.data(), hidden.data.size());
    Tensor2D out = matmul(hidden, w2, counter);
    add_bias(out, b2);
    check_finite(out, "mlp");
    return out;
}

} // namespace evctrl
