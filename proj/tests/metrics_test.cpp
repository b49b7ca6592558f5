// Copyright 2026 The evctrl Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>

#include "test_support.hpp"

namespace evctrl {
namespace {

Grid random_grid(std::size_t w, std::size_t h, std::uint64_t seed) {
    Xoshiro256 rng(seed);
    Grid g(w, h);
    for (double& p : g.pixels) p = rng.uniform();
    return g;
}

// Mean of single-window SSIM over the same window grid, computed with the
// raw-moment form of each statistic.
double ssim_reference(const Grid& a, const Grid& b) {
    const std::size_t w = std::min<std::size_t>(8, a.width), h = std::min<std::size_t>(8, a.height);
    double total = 0;
    int count = 0;
    for (std::size_t y0 = 0; y0 + h <= a.height; y0 += 4)
        for (std::size_t x0 = 0; x0 + w <= a.width; x0 += 4) {
            double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
            for (std::size_t y = y0; y < y0 + h; ++y)
                for (std::size_t x = x0; x < x0 + w; ++x) {
                    const double p = a.at(x, y), q = b.at(x, y);
                    sa += p, sb += q, saa += p * p, sbb += q * q, sab += p * q;
                }
            const double n = static_cast<double>(w * h);
            const double ma = sa / n, mb = sb / n;
            const double va = saa / n - ma * ma, vb = sbb / n - mb * mb, cov = sab / n - ma * mb;
            total += (2 * ma * mb + 1e-4) * (2 * cov + 9e-4) / ((ma * ma + mb * mb + 1e-4) * (va + vb + 9e-4));
            ++count;
        }
    return total / count;
}

TEST(Psnr, Fixtures) {
    EXPECT_NEAR(psnr(Grid(8, 8, 0.0), Grid(8, 8, 1.0)), 0.0, 1e-12);
    EXPECT_NEAR(psnr(Grid(8, 8, 0.3), Grid(8, 8, 0.4)), 20.0, 1e-9);
    EXPECT_NEAR(psnr(Grid(4, 4, 0.5), Grid(4, 4, 0.51)), 40.0, 1e-9);
    EXPECT_EQ(psnr(Grid(8, 8, 0.2), Grid(8, 8, 0.2)), kPsnrCap);
}

TEST(Psnr, Rejects) {
    EXPECT_THROW(psnr(Grid(2, 2), Grid(2, 3)), DimensionError);
    EXPECT_THROW(psnr(Grid(2, 2, 1.5), Grid(2, 2)), ParameterError);
    EXPECT_THROW(psnr(Grid(2, 2, NAN), Grid(2, 2)), ParameterError);
}

TEST(Ssim, SelfIdentityIsOne) {
    for (std::uint64_t s = 0; s < 5; ++s) {
        const Grid g = random_grid(16, 16, s);
        EXPECT_NEAR(ssim(g, g), 1.0, 1e-12);
    }
    EXPECT_NEAR(ssim(Grid(8, 8, 0.0), Grid(8, 8, 0.0)), 1.0, 1e-12);
}

TEST(Ssim, Symmetric) {
    const Grid a = random_grid(16, 12, 1), b = random_grid(16, 12, 2);
    EXPECT_NEAR(ssim(a, b), ssim(b, a), 1e-15);
}

TEST(Ssim, MatchesReferenceFormula) {
    for (auto [w, h] : {std::pair{8, 8}, {16, 16}, {20, 12}, {5, 9}}) {
        const Grid a = random_grid(w, h, 10 + w), b = random_grid(w, h, 20 + h);
        EXPECT_NEAR(ssim(a, b), ssim_reference(a, b), 1e-9) << w << "x" << h;
    }
}

TEST(Ssim, DegradesWithNoise) {
    const Grid a = random_grid(16, 16, 3);
    Xoshiro256 rng(4);
    Grid small = a, large = a;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double n = rng.gaussian();
        small.pixels[i] += 0.01 * n;
        large.pixels[i] += 0.2 * n;
    }
    EXPECT_GT(ssim(a, small), ssim(a, large));
    EXPECT_THROW(ssim(Grid(1, 4), Grid(1, 4)), DimensionError);
}

TEST(RelL2, Properties) {
    const std::vector<double> ref{3, 4}, same{3, 4}, off{3, 5}, zero{0, 0};
    EXPECT_EQ(rel_l2(same, ref), 0.0);
    EXPECT_DOUBLE_EQ(rel_l2(off, ref), 0.2);
    EXPECT_EQ(rel_l2(zero, zero), 0.0);
    EXPECT_THROW(rel_l2(off, zero), NumericError);
    EXPECT_THROW(rel_l2(off, std::vector<double>{1}), DimensionError);
    std::vector<double> scaled{6, 10}, sref{6, 8};
    EXPECT_DOUBLE_EQ(rel_l2(scaled, sref), rel_l2(off, ref));
}

TEST(Compare, BundlesAllThree) {
    const Grid a = random_grid(8, 8, 1);
    const Tensor2D t = testing::random_tensor(4, 4, 2);
    const QualityMetrics q = compare(a, t, a, t);
    EXPECT_EQ(q.psnr, kPsnrCap);
    EXPECT_NEAR(q.ssim, 1.0, 1e-12);
    EXPECT_EQ(q.rel_l2, 0.0);
}

} // namespace
} // namespace evctrl
