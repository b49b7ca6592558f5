// Copyright 2026 The evctrl Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

#include "evctrl/errors.hpp"
#include "evctrl/lfoc.hpp"
#include "evctrl/model.hpp"

namespace evctrl {

enum class StepMode { Full, Partial };

/// Temporal caching policy. Steps are indexed 0..T-1 in sampling order.
struct CachePolicy {
    std::size_t interval = 1;                 // N: full refresh every N steps
    std::vector<std::size_t> critical_steps;  // always computed in full
    std::size_t total_steps = 50;             // T
    bool force_last = true;

    void validate() const {
        if (total_steps == 0) throw ParameterError("total_steps must be >= 1");
        if (interval == 0) throw ParameterError("cache interval must be >= 1");
        if (interval > total_steps)
            throw ParameterError("cache interval " + std::to_string(interval) + " exceeds total steps " +
                                 std::to_string(total_steps));
        for (std::size_t k : critical_steps)
            if (k >= total_steps)
                throw ParameterError("critical step " + std::to_string(k) + " outside [0, " +
                                     std::to_string(total_steps) + ")");
    }
};

struct StepSchedule {
    std::vector<StepMode> modes;

    std::size_t size() const noexcept { return modes.size(); }

    std::size_t full_count() const {
        return static_cast<std::size_t>(std::count(modes.begin(), modes.end(), StepMode::Full));
    }

    /// One character per step, 'F' or 'P'.
    std::string trace() const {
        std::string s;
        s.reserve(modes.size());
        for (StepMode m : modes) s.push_back(m == StepMode::Full ? 'F' : 'P');
        return s;
    }

    /// A replayable schedule must start with a full step.
    void validate(std::size_t total_steps) const {
        if (modes.size() != total_steps)
            throw ConfigError("schedule has " + std::to_string(modes.size()) + " steps, run has " +
                              std::to_string(total_steps));
        if (modes.empty() || modes.front() != StepMode::Full)
            throw SchedulingError("schedule must start with a full step to populate the cache");
    }

    bool operator==(const StepSchedule&) const = default;
};

/// Full at step 0, at every multiple of the interval, at each critical step,
/// and at T-1 when force_last is set; Partial everywhere else.
inline StepSchedule build_schedule(const CachePolicy& policy) {
    policy.validate();
    const std::size_t T = policy.total_steps;
    StepSchedule schedule;
    schedule.modes.assign(T, StepMode::Partial);
    for (std::size_t s = 0; s < T; s += policy.interval) schedule.modes[s] = StepMode::Full;
    for (std::size_t k : policy.critical_steps) schedule.modes[k] = StepMode::Full;
    if (policy.force_last) schedule.modes[T - 1] = StepMode::Full;
    return schedule;
}

inline nlohmann::json schedule_to_json(const StepSchedule& schedule) {
    nlohmann::json modes = nlohmann::json::array();
    for (StepMode m : schedule.modes) modes.push_back(m == StepMode::Full ? "F" : "P");
    return {{"modes", modes}};
}

inline StepSchedule schedule_from_json(const nlohmann::json& j) {
    if (!j.is_object() || !j.contains("modes") || !j.at("modes").is_array())
        throw ConfigError("schedule JSON must be an object with a \"modes\" array");
    StepSchedule schedule;
    for (const auto& m : j.at("modes")) {
        if (m == "F") schedule.modes.push_back(StepMode::Full);
        else if (m == "P") schedule.modes.push_back(StepMode::Partial);
        else throw ConfigError("schedule modes must be \"F\" or \"P\", got " + m.dump());
    }
    return schedule;
}

/// Closed-form multiply-accumulate counts mirroring what the kernels add to
/// a FlopCounter. n = tokens, d = hidden_dim, s = refreshed tokens.
namespace flop_model {

/// QKV + output projections 4nd^2, scores and values 2n^2d, MLP 8nd^2.
inline std::uint64_t block_full(std::uint64_t n, std::uint64_t d) { return 12 * n * d * d + 2 * n * n * d; }

/// K/V for all n tokens, Q and output projection for s, s x n scores and values.
inline std::uint64_t attn_partial(std::uint64_t n, std::uint64_t d, std::uint64_t s) {
    return s == 0 ? 0 : 2 * n * d * d + 2 * s * d * d + 2 * s * n * d;
}

inline std::uint64_t mlp_partial(std::uint64_t d, std::uint64_t s) { return 8 * s * d * d; }

inline std::uint64_t block_partial(std::uint64_t n, std::uint64_t d, std::uint64_t s, RefreshMode mode) {
    switch (mode) {
        case RefreshMode::Both: return attn_partial(n, d, s) + mlp_partial(d, s);
        case RefreshMode::AttnOnly: return attn_partial(n, d, s);
        case RefreshMode::MlpOnly: return mlp_partial(d, s);
    }
    return 0;
}

/// Work done every step regardless of caching: input projection, output
/// head, and one projection per control injection.
inline std::uint64_t step_overhead(const ModelConfig& cfg) {
    const std::uint64_t n = cfg.tokens(), d = cfg.hidden_dim;
    return (2 + cfg.control_blocks) * n * d * d;
}

inline std::uint64_t full_step(const ModelConfig& cfg) {
    return step_overhead(cfg) + (cfg.num_blocks + cfg.control_blocks) * block_full(cfg.tokens(), cfg.hidden_dim);
}

inline std::uint64_t partial_step(const ModelConfig& cfg, const SelectionPolicy& selection, const ZoneMap& zones) {
    const std::uint64_t n = cfg.tokens(), d = cfg.hidden_dim;
    const std::uint64_t s = selection.count(cfg.tokens());
    std::uint64_t local_blocks = 0;
    for (Zone z : zones.main) local_blocks += z == Zone::Local;
    for (Zone z : zones.control) local_blocks += z == Zone::Local;
    return step_overhead(cfg) + local_blocks * block_partial(n, d, s, selection.refresh_mode);
}

inline std::uint64_t scheduled(const StepSchedule& schedule, const ModelConfig& cfg, const SelectionPolicy& selection,
                               const ZoneMap& zones) {
    const std::uint64_t full = full_step(cfg);
    const std::uint64_t partial = partial_step(cfg, selection, zones);
    const std::uint64_t fulls = schedule.full_count();
    return fulls * full + (schedule.size() - fulls) * partial;
}

inline std::uint64_t baseline(const ModelConfig& cfg, std::size_t total_steps) { return total_steps * full_step(cfg); }

} // namespace flop_model

/// FLOPs of an all-Full run divided by FLOPs of the scheduled run.
inline double theoretical_speedup(const CachePolicy& policy, const ModelConfig& cfg, const SelectionPolicy& selection,
                                  const ZoneMap& zones) {
    zones.validate(cfg);
    const auto schedule = build_schedule(policy);
    return static_cast<double>(flop_model::baseline(cfg, policy.total_steps)) /
           static_cast<double>(flop_model::scheduled(schedule, cfg, selection, zones));
}

} // namespace evctrl
