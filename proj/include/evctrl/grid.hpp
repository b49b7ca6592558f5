// Copyright 2026 The evctrl Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace evctrl {

/// Single-channel 2-D image, row-major, one pixel per token.
struct Grid {
    std::size_t width = 0;
    std::size_t height = 0;
    std::vector<double> pixels;

    Grid() = default;
    Grid(std::size_t w, std::size_t h, double fill = 0.0) : width(w), height(h), pixels(w * h, fill) {}

    double& at(std::size_t x, std::size_t y) { return pixels[y * width + x]; }
    double at(std::size_t x, std::size_t y) const { return pixels[y * width + x]; }

    std::size_t size() const noexcept { return pixels.size(); }
    std::string shape() const { return std::to_string(width) + "x" + std::to_string(height); }

    bool operator==(const Grid&) const = default;
};

/// Control conditions are grids whose pixels live in [0, 1].
using ConditionMap = Grid;

} // namespace evctrl
