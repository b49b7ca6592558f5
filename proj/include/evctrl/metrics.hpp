// Copyright 2026 The evctrl Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>

#include "evctrl/errors.hpp"
#include "evctrl/grid.hpp"
#include "evctrl/tensor.hpp"

namespace evctrl {

inline constexpr double kPsnrCap = 99.0;

struct QualityMetrics {
    double psnr = kPsnrCap;
    double ssim = 1.0;
    double rel_l2 = 0.0;

    bool operator==(const QualityMetrics&) const = default;
};

namespace detail {

inline void require_same_shape(const Grid& a, const Grid& b, const char* op) {
    if (a.width != b.width || a.height != b.height)
        throw DimensionError(std::string(op) + ": grids " + a.shape() + " and " + b.shape() + " differ");
}

inline void require_unit_range(const Grid& g, const char* op) {
    for (double p : g.pixels)
        if (!(p >= 0.0 && p <= 1.0)) throw ParameterError(std::string(op) + ": pixel values must lie in [0, 1]");
}

} // namespace detail

/// 10 log10(1 / MSE) for grids in [0, 1]; identical grids give the cap.
inline double psnr(const Grid& a, const Grid& b) {
    detail::require_same_shape(a, b, "psnr");
    detail::require_unit_range(a, "psnr");
    detail::require_unit_range(b, "psnr");
    if (a.size() == 0) throw DimensionError("psnr: empty grid");
    double se = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) se += (a.pixels[i] - b.pixels[i]) * (a.pixels[i] - b.pixels[i]);
    const double mse = se / static_cast<double>(a.size());
    if (mse == 0.0) return kPsnrCap;
    return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

/// SSIM of one window with population statistics, dynamic range 1.
inline double ssim_window(const Grid& a, const Grid& b, std::size_t x0, std::size_t y0, std::size_t w, std::size_t h) {
    constexpr double C1 = 0.01 * 0.01;
    constexpr double C2 = 0.03 * 0.03;
    const double count = static_cast<double>(w * h);
    double ma = 0.0, mb = 0.0;
    for (std::size_t y = y0; y < y0 + h; ++y)
        for (std::size_t x = x0; x < x0 + w; ++x) {
            ma += a.at(x, y);
            mb += b.at(x, y);
        }
    ma /= count;
    mb /= count;
    double va = 0.0, vb = 0.0, cov = 0.0;
    for (std::size_t y = y0; y < y0 + h; ++y)
        for (std::size_t x = x0; x < x0 + w; ++x) {
            const double da = a.at(x, y) - ma, db = b.at(x, y) - mb;
            va += da * da;
            vb += db * db;
            cov += da * db;
        }
    va /= count;
    vb /= count;
    cov /= count;
    return ((2.0 * ma * mb + C1) * (2.0 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2));
}

/// Mean SSIM over 8x8 windows at stride 4. An axis shorter than 8 uses a
/// single window spanning it.
inline double ssim(const Grid& a, const Grid& b) {
    detail::require_same_shape(a, b, "ssim");
    if (a.width < 2 || a.height < 2) throw DimensionError("ssim: grid must be at least 2x2, got " + a.shape());
    constexpr std::size_t kWindow = 8, kStride = 4;
    const std::size_t w = std::min(kWindow, a.width), h = std::min(kWindow, a.height);
    double total = 0.0;
    std::size_t windows = 0;
    for (std::size_t y = 0; y + h <= a.height; y += kStride)
        for (std::size_t x = 0; x + w <= a.width; x += kStride) {
            total += ssim_window(a, b, x, y, w, h);
            ++windows;
        }
    return total / static_cast<double>(windows);
}

/// |a - ref| / |ref| in the Euclidean norm.
inline double rel_l2(std::span<const double> a, std::span<const double> ref) {
    if (a.size() != ref.size()) throw DimensionError("rel_l2: lengths differ");
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        num += (a[i] - ref[i]) * (a[i] - ref[i]);
        den += ref[i] * ref[i];
    }
    if (num == 0.0) return 0.0;
    if (den == 0.0) throw NumericError("rel_l2: reference is the zero vector");
    return std::sqrt(num) / std::sqrt(den);
}

inline double rel_l2(const Tensor2D& a, const Tensor2D& ref) {
    if (a.rows != ref.rows || a.cols != ref.cols)
        throw DimensionError("rel_l2: " + a.shape() + " vs " + ref.shape());
    return rel_l2(std::span<const double>(a.data), std::span<const double>(ref.data));
}

/// Decoded grids drive PSNR/SSIM, final latents drive rel_l2.
inline QualityMetrics compare(const Grid& decoded, const Tensor2D& latent, const Grid& ref_decoded,
                              const Tensor2D& ref_latent) {
    return {psnr(decoded, ref_decoded), ssim(decoded, ref_decoded), rel_l2(latent, ref_latent)};
}

} // namespace evctrl
