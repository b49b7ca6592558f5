// Copyright 2026 The evctrl Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <utility>

#include "evctrl/condition.hpp"
#include "evctrl/errors.hpp"
#include "evctrl/grid.hpp"
#include "evctrl/lfoc.hpp"
#include "evctrl/model.hpp"
#include "evctrl/rng.hpp"
#include "evctrl/schedule.hpp"
#include "evctrl/tensor.hpp"

namespace evctrl {

struct RunConfig {
    ModelConfig model;
    ConditionMap condition;                 // grid_side x grid_side
    CachePolicy policy;                     // policy.total_steps is T
    SelectionPolicy selection;
    std::optional<ZoneMap> zones;           // unset: later half of each branch is Local
    std::optional<StepSchedule> schedule;   // replay instead of building from policy
    std::uint64_t seed = 0;                 // initial noise

    std::size_t total_steps() const noexcept { return policy.total_steps; }
    ZoneMap zone_map() const { return zones ? *zones : ZoneMap::later_half(model); }
};

using CacheStats = std::map<std::pair<Branch, std::size_t>, LayerCacheStats>;

struct RunResult {
    Tensor2D final_latent;
    Grid decoded;
    std::uint64_t flops = 0;
    double wall_ms = 0.0;
    StepSchedule trace;
    CacheStats cache_stats;
};

/// Called after every Full step with the complete forward trace.
using FullStepObserver = std::function<void(std::size_t step, const ForwardResult&)>;

namespace detail {
constexpr std::uint64_t kNoiseStream = 0x4e4f495345ULL;  // "NOISE"
}

inline Tensor2D initial_noise(const ModelConfig& cfg, std::uint64_t seed) {
    Xoshiro256 rng(derive_seed(seed, detail::kNoiseStream));
    Tensor2D x(cfg.tokens(), cfg.hidden_dim);
    for (double& v : x.data) v = rng.gaussian();
    return x;
}

/// Step 0 is the noisiest: t runs 1000, 1000 - 1000/T, ..., 1000/T.
inline double timestep_value(std::size_t step, std::size_t total_steps) {
    return 1000.0 * static_cast<double>(total_steps - step) / static_cast<double>(total_steps);
}

/// Fixed projection of each latent token onto one channel, min-max
/// normalised to [0, 1]. A constant projection decodes to all zeros.
inline Grid decode_latent(const Tensor2D& latent, const ModelWeights& weights) {
    const auto& cfg = weights.config;
    if (latent.rows != cfg.tokens() || latent.cols != cfg.hidden_dim)
        throw DimensionError("decode: latent " + latent.shape() + " does not match model");
    Grid g(cfg.grid_side, cfg.grid_side);
    for (std::size_t i = 0; i < latent.rows; ++i) {
        double v = 0.0;
        const auto row = latent.row(i);
        for (std::size_t c = 0; c < latent.cols; ++c) v += row[c] * weights.decoder[c];
        g.pixels[i] = v;
    }
    const auto [lo, hi] = std::minmax_element(g.pixels.begin(), g.pixels.end());
    const double low = *lo, range = *hi - *lo;
    for (double& p : g.pixels) p = range > 0.0 ? (p - low) / range : 0.0;
    return g;
}

namespace detail {

// Mirror of forward_full where every block goes through apply_partial.
inline Tensor2D partial_forward(const ModelWeights& weights, CacheStore& cache, const Tensor2D& x_t,
                                const Tensor2D& condition_tokens, double t, const ZoneMap& zones,
                                const SelectionPolicy& selection, FlopCounter& counter) {
    const auto& cfg = weights.config;
    const Tensor2D x_embed = embed_input(weights, x_t, t, counter);

    Tensor2D c = x_embed;
    add_inplace(c, condition_tokens);
    std::vector<Tensor2D> control_out;
    control_out.reserve(cfg.control_blocks);
    for (std::size_t k = 0; k < cfg.control_blocks; ++k) {
        c = apply_partial(cache, weights, k, Branch::Control, zones.control[k], c, selection, counter);
        control_out.push_back(c);
    }

    Tensor2D h = x_embed;
    for (std::size_t k = 0; k < cfg.num_blocks; ++k) {
        if (k < cfg.control_blocks) add_inplace(h, control_injection(weights, k, control_out[k], counter));
        h = apply_partial(cache, weights, k, Branch::Main, zones.main[k], h, selection, counter);
    }
    return output_head(weights, h, counter);
}

inline void require_fresh_cache(const CacheStore& cache, std::size_t step) {
    const auto& cfg = cache.config();
    for (Branch b : {Branch::Control, Branch::Main})
        for (std::size_t l = 0; l < cfg.block_count(b); ++l)
            for (Sublayer s : {Sublayer::Attn, Sublayer::Mlp}) {
                const CacheEntry& e = cache.entry(b, l, s);
                if (e.refreshed_at < 0 || static_cast<std::size_t>(e.refreshed_at) >= step)
                    throw SchedulingError("cache entry consulted at step " + std::to_string(step) +
                                          " was not refreshed earlier in this run");
            }
}

} // namespace detail

/// Checks everything that can be checked before any compute.
inline StepSchedule prepare_run(const ModelWeights& weights, const RunConfig& config) {
    config.model.validate();
    if (!(weights.config == config.model)) throw ConfigError("weights were built for a different model config");
    if (config.condition.width != config.model.grid_side || config.condition.height != config.model.grid_side)
        throw ConfigError("condition " + config.condition.shape() + " does not match the " +
                          std::to_string(config.model.grid_side) + "x" + std::to_string(config.model.grid_side) +
                          " token grid");
    config.selection.validate();
    config.zone_map().validate(config.model);
    if (config.schedule) {
        config.schedule->validate(config.total_steps());
        return *config.schedule;
    }
    return build_schedule(config.policy);
}

/// Deterministic Euler/DDIM-style sampler: x <- x - noise_pred(x, t) / T.
/// Full steps run forward_full and refresh the cache; Partial steps reuse it
/// per zone.
inline RunResult run(const ModelWeights& weights, const RunConfig& config, const FullStepObserver& observer = {}) {
    const StepSchedule schedule = prepare_run(weights, config);
    const ZoneMap zones = config.zone_map();
    const std::size_t T = config.total_steps();
    const double dt = 1.0 / static_cast<double>(T);

    const auto start = std::chrono::steady_clock::now();
    const Tensor2D condition_tokens = embed_condition(config.condition, weights);
    Tensor2D x = initial_noise(config.model, config.seed);
    CacheStore cache(config.model);
    FlopCounter counter;

    for (std::size_t s = 0; s < T; ++s) {
        const double t = timestep_value(s, T);
        Tensor2D eps;
        if (schedule.modes[s] == StepMode::Full) {
            ForwardResult out = forward_full(weights, x, condition_tokens, t, counter);
            cache.refresh_full(out, static_cast<int>(s));
            if (observer) observer(s, out);
            eps = std::move(out.noise_pred);
        } else {
            detail::require_fresh_cache(cache, s);
            eps = detail::partial_forward(weights, cache, x, condition_tokens, t, zones, config.selection, counter);
        }
        for (std::size_t i = 0; i < x.data.size(); ++i) x.data[i] -= dt * eps.data[i];
        check_finite(x, "sampler update");
    }
    const auto stop = std::chrono::steady_clock::now();

    RunResult result;
    result.decoded = decode_latent(x, weights);
    result.final_latent = std::move(x);
    result.flops = counter.total();
    result.wall_ms = std::chrono::duration<double, std::milli>(stop - start).count();
    result.trace = schedule;
    result.cache_stats = cache.stats();
    return result;
}

inline RunResult run(const RunConfig& config, const FullStepObserver& observer = {}) {
    return run(build_model(config.model), config, observer);
}

/// The uncached reference: every step Full.
inline RunConfig baseline_config(RunConfig config) {
    config.policy.interval = 1;
    config.policy.critical_steps.clear();
    config.schedule.reset();
    return config;
}

inline RunResult run_baseline(const ModelWeights& weights, const RunConfig& config,
                              const FullStepObserver& observer = {}) {
    return run(weights, baseline_config(config), observer);
}

} // namespace evctrl
