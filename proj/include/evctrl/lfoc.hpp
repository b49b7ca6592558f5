// Copyright 2026 The evctrl Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <span>
#include <utility>
#include <string>
#include <vector>

#include "evctrl/errors.hpp"
#include "evctrl/model.hpp"
#include "evctrl/tensor.hpp"

namespace evctrl {

enum class Sublayer { Attn, Mlp };
enum class RefreshMode { Both, AttnOnly, MlpOnly };
enum class Zone { Global, Local };

inline const char* to_string(Sublayer s) { return s == Sublayer::Attn ? "attn" : "mlp"; }
inline const char* to_string(Zone z) { return z == Zone::Global ? "global" : "local"; }

inline const char* to_string(RefreshMode m) {
    switch (m) {
        case RefreshMode::Both: return "both";
        case RefreshMode::AttnOnly: return "attn";
        case RefreshMode::MlpOnly: return "mlp";
    }
    return "?";
}

inline RefreshMode refresh_mode_from_string(const std::string& s) {
    if (s == "both") return RefreshMode::Both;
    if (s == "attn") return RefreshMode::AttnOnly;
    if (s == "mlp") return RefreshMode::MlpOnly;
    throw ParameterError("unknown refresh mode '" + s + "' (both, attn, mlp)");
}

/// Zone label per (branch, layer).
struct ZoneMap {
    std::vector<Zone> main;
    std::vector<Zone> control;

    Zone at(Branch b, std::size_t layer) const { return (b == Branch::Main ? main : control).at(layer); }

    /// The later ceil(count/2) blocks of each branch are Local.
    static ZoneMap later_half(const ModelConfig& cfg) {
        auto half = [](std::size_t count) {
            std::vector<Zone> z(count, Zone::Global);
            for (std::size_t i = count / 2; i < count; ++i) z[i] = Zone::Local;
            return z;
        };
        return {half(cfg.num_blocks), half(cfg.control_blocks)};
    }

    static ZoneMap uniform(const ModelConfig& cfg, Zone zone) {
        return {std::vector<Zone>(cfg.num_blocks, zone), std::vector<Zone>(cfg.control_blocks, zone)};
    }

    void validate(const ModelConfig& cfg) const {
        if (main.size() != cfg.num_blocks || control.size() != cfg.control_blocks)
            throw ConfigError("zone map covers " + std::to_string(main.size()) + "/" + std::to_string(control.size()) +
                              " main/control blocks, model has " + std::to_string(cfg.num_blocks) + "/" +
                              std::to_string(cfg.control_blocks));
    }

    bool operator==(const ZoneMap&) const = default;
};

/// How many tokens a Local block refreshes on a partial step, and which
/// sublayers it recomputes for them.
struct SelectionPolicy {
    double ratio = 30.0;  // percent of tokens
    RefreshMode refresh_mode = RefreshMode::Both;

    void validate() const {
        if (!(ratio >= 0.0 && ratio <= 100.0))
            throw ParameterError("selection ratio must lie in [0, 100], got " + std::to_string(ratio));
    }

    /// floor(ratio/100 * tokens). Integral ratios use exact integer arithmetic.
    std::size_t count(std::size_t tokens) const {
        validate();
        if (ratio == std::floor(ratio)) return static_cast<std::size_t>(ratio) * tokens / 100;
        return static_cast<std::size_t>(std::floor(ratio * static_cast<double>(tokens) / 100.0));
    }
};

/// Per-token L1 norm across channels.
inline std::vector<double> score_tokens(const Tensor2D& features) {
    if (features.rows == 0 || features.cols == 0) throw DimensionError("score_tokens: empty tensor");
    std::vector<double> scores(features.rows);
    for (std::size_t r = 0; r < features.rows; ++r) {
        double sum = 0.0;
        for (double v : features.row(r)) sum += std::abs(v);
        scores[r] = sum;
    }
    return scores;
}

/// The n = floor(P% * N) tokens with the largest scores, ties to the lower
/// index, returned in ascending index order. These are the tokens a Local
/// block recomputes; the rest are served from cache.
inline TokenSet select_tokens(std::span<const double> scores, const SelectionPolicy& policy) {
    policy.validate();
    if (scores.empty()) throw DimensionError("select_tokens: no scores");
    const std::size_t n = policy.count(scores.size());

    TokenSet order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    const auto before = [&](std::size_t a, std::size_t b) {
        return scores[a] > scores[b] || (scores[a] == scores[b] && a < b);
    };
    if (n < order.size())
        std::nth_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n), order.end(), before);
    order.resize(n);
    std::sort(order.begin(), order.end());
    return order;
}

struct CacheKey {
    Branch branch;
    std::size_t layer;
    Sublayer sublayer;

    auto operator<=>(const CacheKey&) const = default;
};

/// Cached pre-residual delta of one sublayer.
struct CacheEntry {
    Tensor2D delta;  // [tokens x hidden_dim]
    int refreshed_at = -1;
    std::vector<double> score_basis;  // L1 norms of the block input
};

/// Per-(branch, layer) counters exported with run results.
struct LayerCacheStats {
    std::uint64_t full_refreshes = 0;
    std::uint64_t replays = 0;           // partial steps served entirely from cache
    std::uint64_t partial_refreshes = 0;  // partial steps with a token-selective recompute
    std::uint64_t tokens_refreshed = 0;
    std::uint64_t tokens_reused = 0;
};

/// Cached sublayer deltas for every (branch, layer, sublayer). Owned by a
/// single run.
class CacheStore {
public:
    explicit CacheStore(const ModelConfig& config) : config_(config) {}

    const ModelConfig& config() const noexcept { return config_; }

    bool contains(Branch b, std::size_t layer) const {
        return entries_.contains({b, layer, Sublayer::Attn}) && entries_.contains({b, layer, Sublayer::Mlp});
    }

    const CacheEntry& entry(Branch b, std::size_t layer, Sublayer s) const {
        auto it = entries_.find({b, layer, s});
        if (it == entries_.end())
            throw SchedulingError(std::string("no cache entry for ") + to_string(b) + " layer " +
                                  std::to_string(layer) + " " + to_string(s) + ": partial step before any full step");
        return it->second;
    }

    CacheEntry& entry(Branch b, std::size_t layer, Sublayer s) {
        return const_cast<CacheEntry&>(std::as_const(*this).entry(b, layer, s));
    }

    const std::map<CacheKey, CacheEntry>& entries() const noexcept { return entries_; }

    LayerCacheStats& stats(Branch b, std::size_t layer) { return stats_[{b, layer}]; }
    const std::map<std::pair<Branch, std::size_t>, LayerCacheStats>& stats() const noexcept { return stats_; }

    /// Overwrites every entry from a full forward pass taken at step `t`.
    void refresh_full(const ForwardResult& out, int t) {
        for (Branch b : {Branch::Control, Branch::Main}) {
            const auto& layers = out.branch(b);
            const std::size_t expected = config_.block_count(b);
            if (layers.size() != expected)
                throw IntegrityError(std::string("full refresh has ") + std::to_string(layers.size()) + " " +
                                     to_string(b) + " layers, expected " + std::to_string(expected));
            for (const auto& layer : layers) check_full(layer, b);
        }
        for (Branch b : {Branch::Control, Branch::Main}) {
            const auto& layers = out.branch(b);
            for (std::size_t l = 0; l < layers.size(); ++l) {
                const auto basis = score_tokens(layers[l].input);
                entries_[{b, l, Sublayer::Attn}] = CacheEntry{layers[l].output.attn_delta, t, basis};
                entries_[{b, l, Sublayer::Mlp}] = CacheEntry{layers[l].output.mlp_delta, t, basis};
                ++stats(b, l).full_refreshes;
            }
        }
    }

private:
    void check_full(const LayerTrace& layer, Branch b) const {
        const std::size_t n = config_.tokens();
        const std::size_t d = config_.hidden_dim;
        for (const Tensor2D* t : {&layer.input, &layer.output.attn_delta, &layer.output.mlp_delta})
            if (t->rows != n || t->cols != d)
                throw IntegrityError(std::string("full refresh for ") + to_string(b) + " carries a " + t->shape() +
                                     " tensor, expected [" + std::to_string(n) + " x " + std::to_string(d) + "]");
    }

    ModelConfig config_;
    std::map<CacheKey, CacheEntry> entries_;
    std::map<std::pair<Branch, std::size_t>, LayerCacheStats> stats_;
};

inline void refresh_full(CacheStore& cache, const ForwardResult& out, int t) { cache.refresh_full(out, t); }

/// Runs block (branch, layer) on a partial step.
///
/// Global zone, or an empty selection: hidden + cached attn + cached mlp.
/// Local zone: the tokens picked by select_tokens over the cached score basis
/// are recomputed for the sublayers named by the refresh mode; their cache
/// rows and score-basis rows are updated in place. All other rows reuse the
/// cache.
inline Tensor2D apply_partial(CacheStore& cache, const ModelWeights& weights, std::size_t layer, Branch branch,
                              Zone zone, const Tensor2D& hidden, const SelectionPolicy& policy, FlopCounter& counter) {
    CacheEntry& attn = cache.entry(branch, layer, Sublayer::Attn);
    CacheEntry& mlp = cache.entry(branch, layer, Sublayer::Mlp);
    if (hidden.rows != attn.delta.rows || hidden.cols != attn.delta.cols)
        throw DimensionError("apply_partial: hidden " + hidden.shape() + " vs cached " + attn.delta.shape());

    LayerCacheStats& stats = cache.stats(branch, layer);
    const TokenSet rows = zone == Zone::Local ? select_tokens(attn.score_basis, policy) : TokenSet{};

    if (!rows.empty()) {
        const BlockWeights& w = weights.block(branch, layer);
        const bool fresh_attn = policy.refresh_mode != RefreshMode::MlpOnly;
        const bool fresh_mlp = policy.refresh_mode != RefreshMode::AttnOnly;

        Tensor2D h1 = gather_rows(hidden, rows);
        if (fresh_attn) {
            const Tensor2D a = attention_delta(w, hidden, rows, weights.config.heads, counter);
            for (std::size_t i = 0; i < rows.size(); ++i)
                std::copy_n(a.row(i).begin(), a.cols, attn.delta.row(rows[i]).begin());
        }
        if (fresh_mlp) {
            add_inplace(h1, gather_rows(attn.delta, rows));
            const Tensor2D m = mlp_delta(w, h1, counter);
            for (std::size_t i = 0; i < rows.size(); ++i)
                std::copy_n(m.row(i).begin(), m.cols, mlp.delta.row(rows[i]).begin());
        }
        for (std::size_t r : rows) {
            double sum = 0.0;
            for (double v : hidden.row(r)) sum += std::abs(v);
            attn.score_basis[r] = sum;
            mlp.score_basis[r] = sum;
        }
        ++stats.partial_refreshes;
    } else {
        ++stats.replays;
    }
    stats.tokens_refreshed += rows.size();
    stats.tokens_reused += hidden.rows - rows.size();

    Tensor2D out = hidden;
    add_inplace(out, attn.delta);
    add_inplace(out, mlp.delta);
    return out;
}

} // namespace evctrl
