// Copyright 2026 The evctrl Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "evctrl/condition.hpp"
#include "evctrl/errors.hpp"
#include "evctrl/lfoc.hpp"
#include "evctrl/model.hpp"
#include "evctrl/pipeline.hpp"
#include "evctrl/serialize.hpp"

namespace evctrl {

// ---------------------------------------------------------------------------
// Statistics
// ---------------------------------------------------------------------------

/// a.b / (|a| |b|), clamped to [-1, 1] against rounding.
inline double cosine_similarity(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size())
        throw DimensionError("cosine_similarity: lengths " + std::to_string(a.size()) + " and " +
                             std::to_string(b.size()));
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0.0 || nb == 0.0) throw UndefinedSimilarityError("cosine similarity of a zero vector");
    return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

struct Moments {
    double mean = 0.0;
    double std = 0.0;  // population
};

inline Moments moments(std::span<const double> x) {
    if (x.empty()) throw InsufficientDataError("moments of an empty sample");
    const double n = static_cast<double>(x.size());
    const double mean = std::accumulate(x.begin(), x.end(), 0.0) / n;
    double ss = 0.0;
    for (double v : x) ss += (v - mean) * (v - mean);
    return {mean, std::sqrt(ss / n)};
}

/// Unbiased sample excess kurtosis
///   G2 = ((n+1) g2 + 6) (n-1) / ((n-2)(n-3)),  g2 = m4 / m2^2 - 3
/// with m2, m4 the central sample moments. A constant sample has no tail and
/// reports 0.
inline double excess_kurtosis(std::span<const double> x) {
    const std::size_t count = x.size();
    if (count < 4) throw InsufficientDataError("excess kurtosis needs at least 4 samples");
    const double n = static_cast<double>(count);
    const double mean = std::accumulate(x.begin(), x.end(), 0.0) / n;
    double m2 = 0.0, m4 = 0.0;
    for (double v : x) {
        const double d2 = (v - mean) * (v - mean);
        m2 += d2;
        m4 += d2 * d2;
    }
    m2 /= n;
    m4 /= n;
    if (m2 <= 0.0) return 0.0;
    const double g2 = m4 / (m2 * m2) - 3.0;
    return ((n + 1.0) * g2 + 6.0) * (n - 1.0) / ((n - 2.0) * (n - 3.0));
}

// ---------------------------------------------------------------------------
// Profiles
// ---------------------------------------------------------------------------

struct LayerProfile {
    Branch branch = Branch::Main;
    std::size_t layer = 0;
    double norm_mean = 0.0;
    double norm_std = 0.0;
    double excess_kurtosis = 0.0;
    double condition_iou = 0.0;  // in [0, 1]
    bool iou_defined = true;     // false when the condition has no edge tokens
    Zone zone = Zone::Global;

    bool operator==(const LayerProfile&) const = default;
};

/// Cosine similarity between adjacent steps; entry i compares steps i and i+1.
struct SimilarityProfile {
    std::vector<double> control;  // final control block output, drives detection
    std::vector<double> main;     // final main block output, reported only
    double mean = 0.0;            // over `control`
    double std = 0.0;

    bool operator==(const SimilarityProfile&) const = default;
};

inline SimilarityProfile make_similarity_profile(std::vector<double> control, std::vector<double> main = {}) {
    SimilarityProfile p;
    if (!control.empty()) {
        const Moments m = moments(control);
        p.mean = m.mean;
        p.std = m.std;
    }
    p.control = std::move(control);
    p.main = std::move(main);
    return p;
}

struct StratifyThresholds {
    double kurtosis_min = 1.0;
    double iou_min = 0.3;

    bool operator==(const StratifyThresholds&) const = default;
};

struct DetectorParams {
    double kappa = 1.5;
    std::size_t max_count = 3;

    bool operator==(const DetectorParams&) const = default;
};

/// Local iff kurtosis >= kurtosis_min and iou >= iou_min. When no layer
/// qualifies the later half of each branch is Local.
inline ZoneMap stratify(std::vector<LayerProfile>& layers, const ModelConfig& cfg, const StratifyThresholds& th = {},
                        bool* used_fallback = nullptr) {
    if (layers.empty()) throw InsufficientDataError("stratify: no layer profiles");
    ZoneMap zones = ZoneMap::uniform(cfg, Zone::Global);
    bool any = false;
    for (const auto& p : layers) {
        if (p.layer >= cfg.block_count(p.branch))
            throw IndexError(std::string("profile for ") + to_string(p.branch) + " layer " + std::to_string(p.layer) +
                             " outside model");
        if (p.excess_kurtosis >= th.kurtosis_min && p.condition_iou >= th.iou_min) {
            (p.branch == Branch::Main ? zones.main : zones.control)[p.layer] = Zone::Local;
            any = true;
        }
    }
    if (!any) zones = ZoneMap::later_half(cfg);
    if (used_fallback) *used_fallback = !any;
    for (auto& p : layers) p.zone = zones.at(p.branch, p.layer);
    return zones;
}

/// Steps s+1 whose similarity to step s falls below mean - kappa * std. At
/// most max_count are kept, deepest first, earlier step on ties. Returned in
/// ascending order; never contains step 0.
inline std::vector<std::size_t> detect_critical_steps(std::span<const double> similarity, const DetectorParams& p = {}) {
    if (similarity.size() < 3)
        throw InsufficientDataError("critical-step detection needs at least 3 step pairs, got " +
                                    std::to_string(similarity.size()));
    if (!(p.kappa >= 0.0)) throw ParameterError("kappa must be >= 0");
    const Moments m = moments(similarity);
    if (m.std <= 1e-12) return {};
    const double threshold = m.mean - p.kappa * m.std;

    std::vector<std::size_t> pairs;
    for (std::size_t i = 0; i < similarity.size(); ++i)
        if (similarity[i] < threshold) pairs.push_back(i);
    std::stable_sort(pairs.begin(), pairs.end(),
                     [&](std::size_t a, std::size_t b) { return similarity[a] < similarity[b]; });
    if (pairs.size() > p.max_count) pairs.resize(p.max_count);

    std::vector<std::size_t> steps;
    for (std::size_t i : pairs) steps.push_back(i + 1);
    std::sort(steps.begin(), steps.end());
    return steps;
}

inline std::vector<std::size_t> detect_critical_steps(const SimilarityProfile& sim, const DetectorParams& p = {}) {
    return detect_critical_steps(std::span<const double>(sim.control), p);
}

/// |A n B| / |A u B| over token masks. Both empty gives 0.
inline double mask_iou(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b) {
    if (a.size() != b.size()) throw DimensionError("mask_iou: mask sizes differ");
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        inter += a[i] && b[i];
        uni += a[i] || b[i];
    }
    return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

// ---------------------------------------------------------------------------
// Calibration
// ---------------------------------------------------------------------------

struct SamplerConfig {
    std::size_t total_steps = 50;
    std::uint64_t seed = 0;

    bool operator==(const SamplerConfig&) const = default;
};

/// Everything persisted to profile.json.
struct CalibrationProfile {
    ModelConfig model;
    SamplerConfig sampler;
    StratifyThresholds thresholds;
    DetectorParams detector;
    std::size_t edge_tokens = 0;
    double condition_sparsity = 0.0;
    std::vector<LayerProfile> layers;
    ZoneMap zones;
    bool zone_fallback = false;
    SimilarityProfile similarity;
    std::vector<std::size_t> critical_steps;

    bool operator==(const CalibrationProfile&) const = default;
};

struct Calibration {
    CalibrationProfile profile;
    RunResult baseline;  // the uncached run the statistics came from
};

namespace detail {

inline std::vector<double> flat(const Tensor2D& t) { return t.data; }

} // namespace detail

/// One uncached sampling run. Per layer, the per-token L1 norms of the block
/// output are pooled over all steps for the norm statistics; the top decile
/// of the step-averaged norms is compared with the condition's edge mask.
/// Adjacent-step similarity uses the final block output of each branch.
inline Calibration calibrate(const ModelWeights& weights, const ConditionMap& condition, const SamplerConfig& sampler,
                             const StratifyThresholds& thresholds = {}, const DetectorParams& detector = {}) {
    const ModelConfig& cfg = weights.config;
    const std::size_t n = cfg.tokens();

    struct Acc {
        Branch branch;
        std::size_t layer;
        std::vector<double> pooled;
        std::vector<double> token_sum;
    };
    std::vector<Acc> acc;
    for (Branch b : {Branch::Control, Branch::Main})
        for (std::size_t l = 0; l < cfg.block_count(b); ++l) {
            acc.push_back({b, l, {}, std::vector<double>(n, 0.0)});
            acc.back().pooled.reserve(n * sampler.total_steps);
        }

    std::vector<double> sim_control, sim_main, prev_control, prev_main;
    auto observer = [&](std::size_t, const ForwardResult& out) {
        for (auto& a : acc) {
            const auto norms = score_tokens(out.branch(a.branch)[a.layer].output.hidden_after);
            a.pooled.insert(a.pooled.end(), norms.begin(), norms.end());
            for (std::size_t i = 0; i < n; ++i) a.token_sum[i] += norms[i];
        }
        auto control = out.control.empty() ? std::vector<double>{} : detail::flat(out.control.back().output.hidden_after);
        auto main = detail::flat(out.main.back().output.hidden_after);
        if (!prev_main.empty()) {
            if (!control.empty()) sim_control.push_back(cosine_similarity(prev_control, control));
            sim_main.push_back(cosine_similarity(prev_main, main));
        }
        prev_control = std::move(control);
        prev_main = std::move(main);
    };

    RunConfig rc;
    rc.model = cfg;
    rc.condition = condition;
    rc.policy.total_steps = sampler.total_steps;
    rc.seed = sampler.seed;
    Calibration result;
    result.baseline = run_baseline(weights, rc, observer);

    const EdgeMask mask = edge_mask(condition);
    CalibrationProfile& prof = result.profile;
    prof.model = cfg;
    prof.sampler = sampler;
    prof.thresholds = thresholds;
    prof.detector = detector;
    prof.edge_tokens = mask.count();
    prof.condition_sparsity = mask.sparsity();

    const SelectionPolicy top_decile{10.0, RefreshMode::Both};
    for (const auto& a : acc) {
        LayerProfile p;
        p.branch = a.branch;
        p.layer = a.layer;
        const Moments m = moments(a.pooled);
        p.norm_mean = m.mean;
        p.norm_std = m.std;
        p.excess_kurtosis = a.pooled.size() >= 4 ? excess_kurtosis(a.pooled) : 0.0;
        if (mask.count() == 0) {
            p.condition_iou = 0.0;
            p.iou_defined = false;
        } else {
            std::vector<std::uint8_t> top(n, 0);
            for (std::size_t i : select_tokens(a.token_sum, top_decile)) top[i] = 1;
            p.condition_iou = mask_iou(top, mask.edge);
        }
        prof.layers.push_back(p);
    }
    prof.zones = stratify(prof.layers, cfg, thresholds, &prof.zone_fallback);
    prof.similarity = make_similarity_profile(std::move(sim_control), std::move(sim_main));
    prof.critical_steps =
        prof.similarity.control.size() >= 3 ? detect_critical_steps(prof.similarity, detector) : std::vector<std::size_t>{};
    return result;
}

// ---------------------------------------------------------------------------
// profile.json
// ---------------------------------------------------------------------------

inline json to_json(const CalibrationProfile& p) {
    json layers = json::array();
    for (const auto& l : p.layers)
        layers.push_back({{"branch", to_string(l.branch)},
                          {"layer", l.layer},
                          {"norm_mean", l.norm_mean},
                          {"norm_std", l.norm_std},
                          {"excess_kurtosis", l.excess_kurtosis},
                          {"condition_iou", l.condition_iou},
                          {"iou_defined", l.iou_defined},
                          {"zone", to_string(l.zone)}});
    return {
        {"model", to_json(p.model)},
        {"sampler", {{"total_steps", p.sampler.total_steps}, {"seed", p.sampler.seed}}},
        {"thresholds", {{"kurtosis_min", p.thresholds.kurtosis_min}, {"iou_min", p.thresholds.iou_min}}},
        {"detector", {{"kappa", p.detector.kappa}, {"max_count", p.detector.max_count}}},
        {"condition",
         {{"tokens", p.model.tokens()}, {"edge_tokens", p.edge_tokens}, {"sparsity", p.condition_sparsity}}},
        {"layers", layers},
        {"zones", to_json(p.zones)},
        {"zone_fallback", p.zone_fallback},
        {"similarity",
         {{"control", p.similarity.control},
          {"main", p.similarity.main},
          {"mean", p.similarity.mean},
          {"std", p.similarity.std}}},
        {"critical_steps", p.critical_steps},
    };
}

inline Branch branch_from_string(const std::string& s) {
    if (s == "main") return Branch::Main;
    if (s == "control") return Branch::Control;
    throw ConfigError("unknown branch '" + s + "'");
}

inline CalibrationProfile profile_from_json(const json& j) {
    try {
        CalibrationProfile p;
        p.model = model_config_from_json(j.at("model"));
        p.sampler.total_steps = j.at("sampler").at("total_steps").get<std::size_t>();
        p.sampler.seed = j.at("sampler").at("seed").get<std::uint64_t>();
        p.thresholds.kurtosis_min = j.at("thresholds").at("kurtosis_min").get<double>();
        p.thresholds.iou_min = j.at("thresholds").at("iou_min").get<double>();
        p.detector.kappa = j.at("detector").at("kappa").get<double>();
        p.detector.max_count = j.at("detector").at("max_count").get<std::size_t>();
        p.edge_tokens = j.at("condition").at("edge_tokens").get<std::size_t>();
        p.condition_sparsity = j.at("condition").at("sparsity").get<double>();
        for (const auto& l : j.at("layers")) {
            LayerProfile lp;
            lp.branch = branch_from_string(l.at("branch").get<std::string>());
            lp.layer = l.at("layer").get<std::size_t>();
            lp.norm_mean = l.at("norm_mean").get<double>();
            lp.norm_std = l.at("norm_std").get<double>();
            lp.excess_kurtosis = l.at("excess_kurtosis").get<double>();
            lp.condition_iou = l.at("condition_iou").get<double>();
            lp.iou_defined = l.at("iou_defined").get<bool>();
            lp.zone = zone_from_string(l.at("zone").get<std::string>());
            p.layers.push_back(lp);
        }
        p.zones = zone_map_from_json(j.at("zones"));
        p.zone_fallback = j.at("zone_fallback").get<bool>();
        const auto& s = j.at("similarity");
        p.similarity.control = s.at("control").get<std::vector<double>>();
        p.similarity.main = s.at("main").get<std::vector<double>>();
        p.similarity.mean = s.at("mean").get<double>();
        p.similarity.std = s.at("std").get<double>();
        p.critical_steps = j.at("critical_steps").get<std::vector<std::size_t>>();
        p.zones.validate(p.model);
        return p;
    } catch (const json::exception& e) {
        throw ConfigError(std::string("malformed profile: ") + e.what());
    }
}

} // namespace evctrl
