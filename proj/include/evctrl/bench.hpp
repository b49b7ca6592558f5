// Copyright 2026 The evctrl Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <functional>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#include "json.hpp"

#include "evctrl/condition.hpp"
#include "evctrl/errors.hpp"
#include "evctrl/io.hpp"
#include "evctrl/metrics.hpp"
#include "evctrl/pipeline.hpp"
#include "evctrl/serialize.hpp"

namespace evctrl {

/// Policy families compared by a sweep.
///   evctrl         interval + critical steps + token refresh of attn and mlp
///   interval-only  interval caching, cache replay only
///   wa / wm        interval caching with token refresh of attn / mlp only
///   dss-only       interval + critical steps, cache replay only
enum class BenchMode { Evctrl, IntervalOnly, Wa, Wm, DssOnly };

inline const char* to_string(BenchMode m) {
    switch (m) {
        case BenchMode::Evctrl: return "evctrl";
        case BenchMode::IntervalOnly: return "interval-only";
        case BenchMode::Wa: return "wa";
        case BenchMode::Wm: return "wm";
        case BenchMode::DssOnly: return "dss-only";
    }
    return "?";
}

inline std::optional<BenchMode> bench_mode_from_string(const std::string& s) {
    for (BenchMode m : {BenchMode::Evctrl, BenchMode::IntervalOnly, BenchMode::Wa, BenchMode::Wm, BenchMode::DssOnly})
        if (s == to_string(m)) return m;
    return std::nullopt;
}

inline bool uses_ratio(BenchMode m) { return m != BenchMode::IntervalOnly && m != BenchMode::DssOnly; }
inline bool uses_critical(BenchMode m) { return m == BenchMode::Evctrl || m == BenchMode::DssOnly; }

/// Applies a mode to a base config. Critical steps come from the base policy.
inline RunConfig configure(RunConfig base, BenchMode mode, std::size_t interval, double ratio) {
    base.schedule.reset();
    base.policy.interval = interval;
    if (!uses_critical(mode)) base.policy.critical_steps.clear();
    base.selection.ratio = uses_ratio(mode) ? ratio : 0.0;
    base.selection.refresh_mode = mode == BenchMode::Wa   ? RefreshMode::AttnOnly
                                  : mode == BenchMode::Wm ? RefreshMode::MlpOnly
                                                          : RefreshMode::Both;
    return base;
}

struct BenchGrid {
    std::vector<std::size_t> intervals{8};
    std::vector<double> ratios{30.0};
    std::vector<BenchMode> modes{BenchMode::Evctrl};

    /// Ablation layout: both single-sublayer refreshes, step skipping alone, and
    /// the combination, at N=8 and P=30.
    static BenchGrid ablation() {
        return {{8}, {30.0}, {BenchMode::Wa, BenchMode::Wm, BenchMode::DssOnly, BenchMode::Evctrl}};
    }

    /// "N=1,2,4;P=10,30;mode=evctrl,wa" or "ablation". Missing keys keep
    /// their defaults. Errors name the offending token.
    static BenchGrid parse(const std::string& spec) {
        if (spec == "ablation") return ablation();
        BenchGrid g;
        std::set<std::string> seen;
        for (const std::string& part : detail::split(spec, ';')) {
            if (part.empty()) continue;
            const auto eq = part.find('=');
            if (eq == std::string::npos) throw ParameterError("bad grid token '" + part + "': expected key=values");
            const std::string key = part.substr(0, eq);
            const auto values = detail::split(part.substr(eq + 1), ',');
            if (!seen.insert(key).second) throw ParameterError("bad grid token '" + part + "': repeated key");
            if (values.empty() || std::any_of(values.begin(), values.end(), [](auto& v) { return v.empty(); }))
                throw ParameterError("bad grid token '" + part + "': empty value");
            if (key == "N") {
                g.intervals.clear();
                for (const auto& v : values) {
                    std::size_t pos = 0;
                    long n = -1;
                    try {
                        n = std::stol(v, &pos);
                    } catch (const std::exception&) {
                    }
                    if (pos != v.size() || n < 1) throw ParameterError("bad grid token '" + v + "': N must be an integer >= 1");
                    g.intervals.push_back(static_cast<std::size_t>(n));
                }
            } else if (key == "P") {
                g.ratios.clear();
                for (const auto& v : values) {
                    std::size_t pos = 0;
                    double p = -1.0;
                    try {
                        p = std::stod(v, &pos);
                    } catch (const std::exception&) {
                    }
                    if (pos != v.size() || !(p >= 0.0 && p <= 100.0))
                        throw ParameterError("bad grid token '" + v + "': P must be a number in [0, 100]");
                    g.ratios.push_back(p);
                }
            } else if (key == "mode") {
                g.modes.clear();
                for (const auto& v : values) {
                    auto m = bench_mode_from_string(v);
                    if (!m)
                        throw ParameterError("bad grid token '" + v +
                                             "': mode must be evctrl, interval-only, wa, wm or dss-only");
                    g.modes.push_back(*m);
                }
            } else {
                throw ParameterError("bad grid token '" + part + "': unknown key '" + key + "' (N, P, mode)");
            }
        }
        return g;
    }
};

struct BenchRow {
    std::string mode;  // a BenchMode name, or "baseline"
    std::size_t interval = 1;
    double ratio = 0.0;
    std::vector<std::size_t> critical_steps;
    bool failed = false;
    std::string error;
    std::uint64_t flops = 0;
    double wall_ms = 0.0;
    double speedup = 0.0;  // baseline FLOPs / row FLOPs
    QualityMetrics quality;
    std::string trace;

    bool operator==(const BenchRow&) const = default;
};

struct BenchReport {
    std::uint64_t seed = 0;
    std::string config_hash;
    std::size_t total_steps = 0;
    std::size_t repeats = 1;
    bool complete = false;
    std::vector<BenchRow> rows;  // baseline first, then sorted by (mode, N, P)

    bool operator==(const BenchReport&) const = default;
};

inline bool row_before(const BenchRow& a, const BenchRow& b) {
    const bool ab = a.mode == "baseline", bb = b.mode == "baseline";
    if (ab != bb) return ab;
    return std::tie(a.mode, a.interval, a.ratio) < std::tie(b.mode, b.interval, b.ratio);
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

inline json to_json(const BenchRow& r) {
    json j = {{"mode", r.mode}, {"N", r.interval}, {"P", r.ratio}, {"critical_steps", r.critical_steps},
              {"failed", r.failed}};
    if (r.failed) {
        j["error"] = r.error;
        return j;
    }
    j["flops"] = r.flops;
    j["wall_ms"] = r.wall_ms;
    j["speedup"] = r.speedup;
    j["psnr"] = r.quality.psnr;
    j["ssim"] = r.quality.ssim;
    j["rel_l2"] = r.quality.rel_l2;
    j["trace"] = r.trace;
    return j;
}

inline BenchRow bench_row_from_json(const json& j) {
    BenchRow r;
    r.mode = j.at("mode").get<std::string>();
    r.interval = j.at("N").get<std::size_t>();
    r.ratio = j.at("P").get<double>();
    r.critical_steps = j.at("critical_steps").get<std::vector<std::size_t>>();
    r.failed = j.at("failed").get<bool>();
    if (r.failed) {
        r.error = j.at("error").get<std::string>();
        return r;
    }
    r.flops = j.at("flops").get<std::uint64_t>();
    r.wall_ms = j.at("wall_ms").get<double>();
    r.speedup = j.at("speedup").get<double>();
    r.quality = {j.at("psnr").get<double>(), j.at("ssim").get<double>(), j.at("rel_l2").get<double>()};
    r.trace = j.at("trace").get<std::string>();
    return r;
}

inline json to_json(const BenchReport& r) {
    json rows = json::array();
    for (const auto& row : r.rows) rows.push_back(to_json(row));
    return {{"environment",
             {{"seed", r.seed}, {"config_hash", r.config_hash}, {"total_steps", r.total_steps}, {"repeats", r.repeats}}},
            {"complete", r.complete},
            {"rows", rows}};
}

inline BenchReport bench_report_from_json(const json& j) {
    BenchReport r;
    const auto& env = j.at("environment");
    r.seed = env.at("seed").get<std::uint64_t>();
    r.config_hash = env.at("config_hash").get<std::string>();
    r.total_steps = env.at("total_steps").get<std::size_t>();
    r.repeats = env.at("repeats").get<std::size_t>();
    r.complete = j.at("complete").get<bool>();
    for (const auto& row : j.at("rows")) r.rows.push_back(bench_row_from_json(row));
    return r;
}

inline std::string format_csv(const BenchReport& r) {
    std::string out = "mode,N,P,flops,wall_ms,speedup,psnr,ssim,rel_l2\n";
    char buf[512];
    for (const auto& row : r.rows) {
        if (row.failed)
            std::snprintf(buf, sizeof buf, "%s,%zu,%.10g,,,,,,\n", row.mode.c_str(), row.interval, row.ratio);
        else
            std::snprintf(buf, sizeof buf, "%s,%zu,%.10g,%llu,%.3f,%.10g,%.10g,%.10g,%.10g\n", row.mode.c_str(),
                          row.interval, row.ratio, static_cast<unsigned long long>(row.flops), row.wall_ms,
                          row.speedup, row.quality.psnr, row.quality.ssim, row.quality.rel_l2);
        out += buf;
    }
    return out;
}

/// Rewrites report.json and report.csv under `dir`, each atomically.
inline void write_report(const std::filesystem::path& dir, const BenchReport& r) {
    write_file_atomic(dir / "report.json", to_json(r).dump(2) + "\n");
    write_file_atomic(dir / "report.csv", format_csv(r));
}

/// Fingerprint of everything that determines the metric columns.
inline std::string config_hash(const RunConfig& base) {
    json j = {{"model", to_json(base.model)},
              {"total_steps", base.total_steps()},
              {"seed", base.seed},
              {"zones", to_json(base.zone_map())},
              {"critical_steps", base.policy.critical_steps},
              {"force_last", base.policy.force_last},
              {"condition", base.condition.pixels}};
    return hex64(fnv1a(j.dump()));
}

// ---------------------------------------------------------------------------
// Sweep
// ---------------------------------------------------------------------------

struct SweepOptions {
    std::size_t repeats = 5;  // wall time is the median over repeats
    std::size_t jobs = 1;     // concurrent runs
    /// Called with the report so far after each finished row, serialized
    /// across workers. Exceptions abort the sweep.
    std::function<void(const BenchReport&)> on_row;
};

namespace detail {

inline double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline RunResult timed_run(const ModelWeights& weights, const RunConfig& config, std::size_t repeats, double& wall) {
    std::vector<double> walls;
    RunResult first = run(weights, config);
    walls.push_back(first.wall_ms);
    for (std::size_t i = 1; i < repeats; ++i) walls.push_back(run(weights, config).wall_ms);
    wall = median(walls);
    return first;
}

struct Job {
    BenchMode mode;
    std::size_t interval;
    double ratio;
};

} // namespace detail

/// Runs the baseline once, then every distinct (mode, N, P). Modes that do not
/// refresh tokens are recorded at P=0 and run once per N.
inline BenchReport sweep(const ModelWeights& weights, const RunConfig& base, const BenchGrid& grid,
                         const SweepOptions& options = {}) {
    if (grid.intervals.empty() || grid.ratios.empty() || grid.modes.empty())
        throw ParameterError("bench grid is empty");
    if (options.repeats == 0) throw ParameterError("repeats must be >= 1");
    prepare_run(weights, base);

    std::vector<detail::Job> jobs;
    std::set<std::tuple<std::string, std::size_t, double>> seen;
    for (BenchMode m : grid.modes)
        for (std::size_t n : grid.intervals)
            for (double p : grid.ratios) {
                const double ratio = uses_ratio(m) ? p : 0.0;
                if (seen.insert({to_string(m), n, ratio}).second) jobs.push_back({m, n, ratio});
            }
    // Validate every row config up front so a bad grid fails before compute.
    for (const auto& j : jobs) prepare_run(weights, configure(base, j.mode, j.interval, j.ratio));

    BenchReport report;
    report.seed = base.seed;
    report.config_hash = config_hash(base);
    report.total_steps = base.total_steps();
    report.repeats = options.repeats;

    BenchRow baseline_row;
    baseline_row.mode = "baseline";
    const RunResult baseline = detail::timed_run(weights, baseline_config(base), options.repeats, baseline_row.wall_ms);
    baseline_row.flops = baseline.flops;
    baseline_row.speedup = 1.0;
    baseline_row.quality = QualityMetrics{};
    baseline_row.trace = baseline.trace.trace();
    report.rows.push_back(baseline_row);
    if (options.on_row) options.on_row(report);

    std::mutex mu;
    std::exception_ptr abort;
    auto finish = [&](BenchRow row) {
        std::lock_guard lock(mu);
        if (abort) return;
        report.rows.push_back(std::move(row));
        std::sort(report.rows.begin(), report.rows.end(), row_before);
        if (options.on_row) {
            try {
                options.on_row(report);
            } catch (...) {
                abort = std::current_exception();
            }
        }
    };
    auto do_job = [&](const detail::Job& j) {
        BenchRow row;
        row.mode = to_string(j.mode);
        row.interval = j.interval;
        row.ratio = j.ratio;
        const RunConfig cfg = configure(base, j.mode, j.interval, j.ratio);
        row.critical_steps = cfg.policy.critical_steps;
        std::sort(row.critical_steps.begin(), row.critical_steps.end());
        try {
            const RunResult r = detail::timed_run(weights, cfg, options.repeats, row.wall_ms);
            row.flops = r.flops;
            row.speedup = static_cast<double>(baseline.flops) / static_cast<double>(r.flops);
            row.quality = compare(r.decoded, r.final_latent, baseline.decoded, baseline.final_latent);
            row.trace = r.trace.trace();
        } catch (const std::exception& e) {
            row.failed = true;
            row.error = e.what();
            row.flops = 0;
        }
        finish(std::move(row));
    };

    const std::size_t workers = std::clamp<std::size_t>(options.jobs, 1, std::max<std::size_t>(jobs.size(), 1));
    if (workers == 1) {
        for (const auto& j : jobs) {
            do_job(j);
            if (abort) break;
        }
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < workers; ++w)
            pool.emplace_back([&] {
                for (std::size_t i; (i = next.fetch_add(1)) < jobs.size();) {
                    {
                        std::lock_guard lock(mu);
                        if (abort) return;
                    }
                    do_job(jobs[i]);
                }
            });
        for (auto& t : pool) t.join();
    }
    if (abort) std::rethrow_exception(abort);

    report.complete = true;
    if (options.on_row) options.on_row(report);
    return report;
}

inline bool all_rows_succeeded(const BenchReport& r) {
    return std::none_of(r.rows.begin(), r.rows.end(), [](const BenchRow& row) { return row.failed; });
}

} // namespace evctrl
