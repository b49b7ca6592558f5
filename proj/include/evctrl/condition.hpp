// Copyright 2026 The evctrl Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

#include "evctrl/errors.hpp"
#include "evctrl/grid.hpp"
#include "evctrl/io.hpp"
#include "evctrl/model.hpp"
#include "evctrl/rng.hpp"

namespace evctrl {

// ---------------------------------------------------------------------------
// Synthetic conditions
// ---------------------------------------------------------------------------

/// Inclusive corners. Outline unless `filled`.
struct RectShape {
    long x0 = 0, y0 = 0, x1 = 0, y1 = 0;
    bool filled = false;
};

struct CircleShape {
    long cx = 0, cy = 0, radius = 0;
    bool filled = false;
};

/// Each segment is {x0, y0, x1, y1}.
struct LinesShape {
    std::vector<std::array<long, 4>> segments;
};

/// Isolated keypoints, the pose-map analogue.
struct PointsShape {
    std::vector<std::pair<long, long>> points;
};

using ShapeSpec = std::variant<RectShape, CircleShape, LinesShape, PointsShape>;

namespace detail {

inline void require_inside(long x, long y, std::size_t side, const char* what) {
    const long s = static_cast<long>(side);
    if (x < 0 || y < 0 || x >= s || y >= s)
        throw ParameterError(std::string(what) + ": (" + std::to_string(x) + ", " + std::to_string(y) +
                             ") lies outside the " + std::to_string(side) + "x" + std::to_string(side) + " grid");
}

inline void plot(Grid& g, long x, long y) { g.at(static_cast<std::size_t>(x), static_cast<std::size_t>(y)) = 1.0; }

// Bresenham, all octants.
inline void draw_line(Grid& g, long x0, long y0, long x1, long y1) {
    const long dx = std::abs(x1 - x0), sx = x0 < x1 ? 1 : -1;
    const long dy = -std::abs(y1 - y0), sy = y0 < y1 ? 1 : -1;
    long err = dx + dy;
    for (;;) {
        plot(g, x0, y0);
        if (x0 == x1 && y0 == y1) break;
        const long e2 = 2 * err;
        if (e2 >= dy) {
            err += dy;
            x0 += sx;
        }
        if (e2 <= dx) {
            err += dx;
            y0 += sy;
        }
    }
}

// Midpoint circle outline.
inline void draw_circle(Grid& g, long cx, long cy, long r) {
    long x = r, y = 0, err = 1 - r;
    while (x >= y) {
        const long pts[8][2] = {{cx + x, cy + y}, {cx - x, cy + y}, {cx + x, cy - y}, {cx - x, cy - y},
                                {cx + y, cy + x}, {cx - y, cy + x}, {cx + y, cy - x}, {cx - y, cy - x}};
        for (const auto& p : pts) plot(g, p[0], p[1]);
        ++y;
        if (err < 0) {
            err += 2 * y + 1;
        } else {
            --x;
            err += 2 * (y - x) + 1;
        }
    }
}

} // namespace detail

/// Rasterises a binary condition on a grid_side x grid_side grid.
inline ConditionMap synth_condition(const ShapeSpec& shape, std::size_t grid_side) {
    if (grid_side == 0) throw ParameterError("synth_condition: grid_side must be positive");
    Grid g(grid_side, grid_side, 0.0);

    if (const auto* rect = std::get_if<RectShape>(&shape)) {
        detail::require_inside(rect->x0, rect->y0, grid_side, "rect corner");
        detail::require_inside(rect->x1, rect->y1, grid_side, "rect corner");
        if (rect->x0 > rect->x1 || rect->y0 > rect->y1) throw ParameterError("rect: corners must be ordered");
        for (long y = rect->y0; y <= rect->y1; ++y)
            for (long x = rect->x0; x <= rect->x1; ++x) {
                const bool border = x == rect->x0 || x == rect->x1 || y == rect->y0 || y == rect->y1;
                if (border || rect->filled) detail::plot(g, x, y);
            }
    } else if (const auto* circle = std::get_if<CircleShape>(&shape)) {
        if (circle->radius < 0) throw ParameterError("circle: radius must be non-negative");
        detail::require_inside(circle->cx - circle->radius, circle->cy - circle->radius, grid_side, "circle extent");
        detail::require_inside(circle->cx + circle->radius, circle->cy + circle->radius, grid_side, "circle extent");
        if (circle->filled) {
            const long r2 = circle->radius * circle->radius;
            for (long y = circle->cy - circle->radius; y <= circle->cy + circle->radius; ++y)
                for (long x = circle->cx - circle->radius; x <= circle->cx + circle->radius; ++x)
                    if ((x - circle->cx) * (x - circle->cx) + (y - circle->cy) * (y - circle->cy) <= r2)
                        detail::plot(g, x, y);
        }
        detail::draw_circle(g, circle->cx, circle->cy, circle->radius);
    } else if (const auto* lines = std::get_if<LinesShape>(&shape)) {
        for (const auto& s : lines->segments) {
            detail::require_inside(s[0], s[1], grid_side, "line endpoint");
            detail::require_inside(s[2], s[3], grid_side, "line endpoint");
            detail::draw_line(g, s[0], s[1], s[2], s[3]);
        }
    } else {
        for (const auto& [x, y] : std::get<PointsShape>(shape).points) {
            detail::require_inside(x, y, grid_side, "point");
            detail::plot(g, x, y);
        }
    }
    return g;
}

/// `count` distinct keypoints at reproducible positions.
inline PointsShape auto_points(std::size_t count, std::size_t grid_side) {
    const std::size_t cells = grid_side * grid_side;
    if (count > cells) throw ParameterError("points: more keypoints than grid cells");
    Xoshiro256 rng(derive_seed(grid_side * 1000003ULL + count, 0x504f494eULL));
    std::set<std::size_t> chosen;
    PointsShape shape;
    while (chosen.size() < count) {
        const std::size_t cell = rng.below(cells);
        if (!chosen.insert(cell).second) continue;
        shape.points.emplace_back(static_cast<long>(cell % grid_side), static_cast<long>(cell / grid_side));
    }
    return shape;
}

// ---------------------------------------------------------------------------
// Edge mask
// ---------------------------------------------------------------------------

/// Per-token flag: pixel > threshold.
struct EdgeMask {
    std::vector<std::uint8_t> edge;

    std::size_t count() const { return static_cast<std::size_t>(std::count(edge.begin(), edge.end(), 1)); }
    double sparsity() const { return edge.empty() ? 0.0 : static_cast<double>(count()) / edge.size(); }
};

inline EdgeMask edge_mask(const ConditionMap& map, double threshold = 0.5) {
    EdgeMask mask;
    mask.edge.reserve(map.size());
    for (double p : map.pixels) mask.edge.push_back(p > threshold ? 1 : 0);
    return mask;
}

// ---------------------------------------------------------------------------
// Plain PGM (P2)
// ---------------------------------------------------------------------------

/// Nearest 8-bit level, as stored in a PGM.
inline double quantize8(double p) { return std::round(std::clamp(p, 0.0, 1.0) * 255.0) / 255.0; }

inline std::string format_pgm(const Grid& g) {
    std::ostringstream os;
    os << "P2\n" << g.width << ' ' << g.height << "\n255\n";
    for (std::size_t y = 0; y < g.height; ++y) {
        for (std::size_t x = 0; x < g.width; ++x) {
            if (x) os << ' ';
            os << static_cast<int>(std::lround(std::clamp(g.at(x, y), 0.0, 1.0) * 255.0));
        }
        os << '\n';
    }
    return os.str();
}

/// Parses plain-text PGM with maxval 255. Errors carry the offending line.
inline Grid parse_pgm(std::string_view text) {
    struct Token {
        std::string_view text;
        std::size_t line;
    };
    std::vector<Token> tokens;
    std::size_t line = 1;
    for (std::size_t i = 0; i < text.size();) {
        const char c = text[i];
        if (c == '\n') {
            ++line;
            ++i;
        } else if (c == '#') {
            while (i < text.size() && text[i] != '\n') ++i;
        } else if (std::isspace(static_cast<unsigned char>(c))) {
            ++i;
        } else {
            const std::size_t start = i;
            while (i < text.size() && !std::isspace(static_cast<unsigned char>(text[i])) && text[i] != '#') ++i;
            tokens.push_back({text.substr(start, i - start), line});
        }
    }

    std::size_t pos = 0;
    auto next_number = [&](const char* what) -> long {
        if (pos >= tokens.size()) throw ParseError(std::string("unexpected end of file, expected ") + what, line);
        const Token& tok = tokens[pos++];
        long value = 0;
        const auto [end, ec] = std::from_chars(tok.text.data(), tok.text.data() + tok.text.size(), value);
        if (ec != std::errc{} || end != tok.text.data() + tok.text.size())
            throw ParseError(std::string("expected ") + what + ", got '" + std::string(tok.text) + "'", tok.line);
        return value;
    };

    if (tokens.empty()) throw ParseError("empty file", 1);
    if (tokens[0].text != "P2")
        throw ParseError("unsupported format '" + std::string(tokens[0].text) + "': only plain-text P2 is accepted",
                         tokens[0].line);
    pos = 1;
    const long width = next_number("width");
    const long height = next_number("height");
    if (width <= 0 || height <= 0) throw ParseError("width and height must be positive", tokens[pos - 1].line);
    const long maxval = next_number("maxval");
    if (maxval != 255) throw ParseError("maxval must be 255, got " + std::to_string(maxval), tokens[pos - 1].line);

    Grid g(static_cast<std::size_t>(width), static_cast<std::size_t>(height));
    for (double& p : g.pixels) {
        const long v = next_number("pixel value");
        if (v < 0 || v > 255) throw ParseError("pixel value " + std::to_string(v) + " outside [0, 255]", tokens[pos - 1].line);
        p = static_cast<double>(v) / 255.0;
    }
    if (pos != tokens.size())
        throw ParseError("more pixel values than " + std::to_string(width) + "x" + std::to_string(height),
                         tokens[pos].line);
    return g;
}

inline Grid load_pgm(const std::filesystem::path& path) { return parse_pgm(read_file(path)); }

inline void save_pgm(const Grid& g, const std::filesystem::path& path) { write_file_atomic(path, format_pgm(g)); }

// ---------------------------------------------------------------------------
// Tokenisation
// ---------------------------------------------------------------------------

/// Token i = pixel i (row-major) times the condition embedding row. Pixels are
/// not clamped here; a zero pixel gives a zero row.
inline Tensor2D embed_condition(const ConditionMap& map, const ModelWeights& weights) {
    const auto& cfg = weights.config;
    if (map.width != cfg.grid_side || map.height != cfg.grid_side)
        throw DimensionError("condition " + map.shape() + " does not match the " + std::to_string(cfg.grid_side) +
                             "x" + std::to_string(cfg.grid_side) + " token grid");
    Tensor2D out(map.size(), cfg.hidden_dim);
    for (std::size_t i = 0; i < map.size(); ++i) {
        const double p = map.pixels[i];
        if (p == 0.0) continue;
        auto row = out.row(i);
        for (std::size_t c = 0; c < cfg.hidden_dim; ++c) row[c] = p * weights.condition_embedding[c];
    }
    return out;
}

// ---------------------------------------------------------------------------
// Condition source strings
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<std::string> split(std::string_view s, char sep) {
    std::vector<std::string> parts;
    std::size_t start = 0;
    for (;;) {
        const std::size_t at = s.find(sep, start);
        parts.emplace_back(s.substr(start, at == std::string_view::npos ? std::string_view::npos : at - start));
        if (at == std::string_view::npos) break;
        start = at + 1;
    }
    return parts;
}

inline long parse_long(const std::string& s, const std::string& context) {
    long v = 0;
    const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || end != s.data() + s.size())
        throw ParameterError(context + ": '" + s + "' is not an integer");
    return v;
}

inline std::vector<long> parse_longs(const std::string& s, const std::string& context) {
    std::vector<long> out;
    for (const auto& part : split(s, ',')) out.push_back(parse_long(part, context));
    return out;
}

} // namespace detail

/// Parses the parameter part of `synth:<kind>[:<params>]`.
///
///   rect[:x0,y0,x1,y1[,filled]]   default: outline inset by grid_side/4
///   circle[:cx,cy,r[,filled]]     default: centred, r = grid_side/3
///   lines[:x0,y0,x1,y1;...]       default: both diagonals
///   points[:K | :x,y;x,y;...]     K reproducible distinct keypoints
inline ShapeSpec parse_shape(std::string_view kind_and_params, std::size_t grid_side) {
    const auto colon = kind_and_params.find(':');
    const std::string kind(kind_and_params.substr(0, colon));
    const std::string params = colon == std::string_view::npos ? "" : std::string(kind_and_params.substr(colon + 1));
    const long side = static_cast<long>(grid_side);

    if (kind == "rect") {
        if (params.empty()) {
            const long inset = side / 4;
            return RectShape{inset, inset, side - 1 - inset, side - 1 - inset, false};
        }
        auto parts = detail::split(params, ',');
        bool filled = false;
        if (parts.size() == 5 && parts.back() == "filled") {
            filled = true;
            parts.pop_back();
        }
        if (parts.size() != 4) throw ParameterError("rect expects x0,y0,x1,y1[,filled]");
        std::vector<long> v;
        for (const auto& p : parts) v.push_back(detail::parse_long(p, "rect"));
        return RectShape{v[0], v[1], v[2], v[3], filled};
    }
    if (kind == "circle") {
        if (params.empty()) return CircleShape{side / 2, side / 2, side / 3, false};
        auto parts = detail::split(params, ',');
        bool filled = false;
        if (parts.size() == 4 && parts.back() == "filled") {
            filled = true;
            parts.pop_back();
        }
        if (parts.size() != 3) throw ParameterError("circle expects cx,cy,r[,filled]");
        return CircleShape{detail::parse_long(parts[0], "circle"), detail::parse_long(parts[1], "circle"),
                           detail::parse_long(parts[2], "circle"), filled};
    }
    if (kind == "lines") {
        LinesShape shape;
        if (params.empty()) {
            shape.segments.push_back({0, 0, side - 1, side - 1});
            shape.segments.push_back({0, side - 1, side - 1, 0});
            return shape;
        }
        for (const auto& seg : detail::split(params, ';')) {
            const auto v = detail::parse_longs(seg, "lines");
            if (v.size() != 4) throw ParameterError("lines expects x0,y0,x1,y1 per segment");
            shape.segments.push_back({v[0], v[1], v[2], v[3]});
        }
        return shape;
    }
    if (kind == "points") {
        if (params.empty()) throw ParameterError("points expects a count or x,y;x,y list");
        if (params.find(',') == std::string::npos) {
            const long k = detail::parse_long(params, "points");
            if (k < 0) throw ParameterError("points: count must be non-negative");
            return auto_points(static_cast<std::size_t>(k), grid_side);
        }
        PointsShape shape;
        for (const auto& pt : detail::split(params, ';')) {
            const auto v = detail::parse_longs(pt, "points");
            if (v.size() != 2) throw ParameterError("points expects x,y pairs");
            shape.points.emplace_back(v[0], v[1]);
        }
        return shape;
    }
    throw ParameterError("unknown condition kind '" + kind + "' (rect, circle, lines, points)");
}

/// Resolves a condition source: `synth:<kind>[:params]`, `zero`, or a PGM path.
inline ConditionMap resolve_condition(const std::string& source, std::size_t grid_side) {
    if (source == "zero" || source == "synth:zero") return Grid(grid_side, grid_side, 0.0);
    if (source.rfind("synth:", 0) == 0) return synth_condition(parse_shape(source.substr(6), grid_side), grid_side);
    Grid g = load_pgm(source);
    if (g.width != grid_side || g.height != grid_side)
        throw DimensionError("condition file " + source + " is " + g.shape() + ", model grid is " +
                             std::to_string(grid_side) + "x" + std::to_string(grid_side));
    return g;
}

} // namespace evctrl
