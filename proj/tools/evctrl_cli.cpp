// Copyright 2026 The evctrl Authors
// SPDX-License-Identifier: Apache-2.0

// evctrl: calibrate | generate | bench | oracle
//
// Exit codes: 0 success, 1 run or row failure, 2 usage or configuration error.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "evctrl/evctrl.hpp"

namespace fs = std::filesystem;
using evctrl::json;

namespace {

constexpr int kOk = 0;
constexpr int kRunFailure = 1;
constexpr int kUsage = 2;

/// Usage and configuration problems map to exit 2.
class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct Settings {
    evctrl::ModelConfig model;
    std::uint64_t seed = 0;
    std::size_t steps = 50;
    std::string condition = "synth:circle";
    std::size_t interval = 8;
    double ratio = 30.0;
    std::string mode = "both";
    std::optional<std::vector<std::size_t>> critical;
    std::string profile;
    bool all_local = false;
    std::string schedule;
    bool compare_baseline = false;
    double kappa = 1.5;
    std::size_t max_critical = 3;
    double kurtosis_min = 1.0;
    double iou_min = 0.3;
    std::string grid = "N=1,2,4,8;P=30;mode=evctrl";
    std::size_t repeats = 5;
    std::size_t jobs = 1;
};

template <typename T>
void take(const json& j, const char* key, T& field) {
    if (!j.contains(key)) return;
    try {
        field = j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw UsageError(std::string("config key '") + key + "': " + e.what());
    }
}

void apply_config_file(const std::string& path, Settings& s, bool& seed_set) {
    json j;
    try {
        j = json::parse(evctrl::read_file(path));
    } catch (const json::exception& e) {
        throw UsageError("config " + path + ": " + e.what());
    } catch (const evctrl::Error& e) {
        throw UsageError(e.what());
    }
    evctrl::detail::require_known_keys(
        j,
        {"model", "seed", "steps", "condition", "interval", "ratio", "mode", "critical", "profile", "all_local",
         "schedule", "compare_baseline", "kappa", "max_critical", "kurtosis_min", "iou_min", "grid", "repeats", "jobs"},
        "config " + path);
    if (j.contains("model")) s.model = evctrl::model_config_from_json(j.at("model"), s.model);
    if (j.contains("seed")) seed_set = true;
    take(j, "seed", s.seed);
    take(j, "steps", s.steps);
    take(j, "condition", s.condition);
    take(j, "interval", s.interval);
    take(j, "ratio", s.ratio);
    take(j, "mode", s.mode);
    if (j.contains("critical")) {
        std::vector<std::size_t> c;
        take(j, "critical", c);
        s.critical = c;
    }
    take(j, "profile", s.profile);
    take(j, "all_local", s.all_local);
    take(j, "schedule", s.schedule);
    take(j, "compare_baseline", s.compare_baseline);
    take(j, "kappa", s.kappa);
    take(j, "max_critical", s.max_critical);
    take(j, "kurtosis_min", s.kurtosis_min);
    take(j, "iou_min", s.iou_min);
    take(j, "grid", s.grid);
    take(j, "repeats", s.repeats);
    take(j, "jobs", s.jobs);
}

std::vector<std::size_t> parse_step_list(const std::string& text) {
    std::vector<std::size_t> out;
    if (text.empty() || text == "none") return out;
    for (const auto& part : evctrl::detail::split(text, ',')) {
        std::size_t pos = 0;
        long v = -1;
        try {
            v = std::stol(part, &pos);
        } catch (const std::exception&) {
        }
        if (pos != part.size() || v < 0) throw UsageError("--critical: '" + part + "' is not a step index");
        out.push_back(static_cast<std::size_t>(v));
    }
    return out;
}

/// Fails early, before any compute, when `dir` cannot hold output files.
void require_writable_dir(const fs::path& dir) {
    std::error_code ec;
    if (!dir.empty()) fs::create_directories(dir, ec);
    if (ec) throw UsageError("cannot create output directory " + dir.string() + ": " + ec.message());
    const fs::path probe = (dir.empty() ? fs::path(".") : dir) / ".evctrl-write-probe";
    try {
        evctrl::write_file_atomic(probe, "");
    } catch (const evctrl::WriteError&) {
        throw UsageError("output directory " + dir.string() + " is not writable");
    }
    fs::remove(probe, ec);
}

void require_writable_file(const fs::path& file) {
    require_writable_dir(file.parent_path());
    if (fs::is_directory(file)) throw UsageError("output path " + file.string() + " is a directory");
}

struct Prepared {
    evctrl::RunConfig run;
    std::optional<evctrl::CalibrationProfile> profile;
};

evctrl::CalibrationProfile load_profile(const std::string& path, const evctrl::ModelConfig& model) {
    evctrl::CalibrationProfile p;
    try {
        p = evctrl::profile_from_json(json::parse(evctrl::read_file(path)));
    } catch (const json::exception& e) {
        throw UsageError("profile " + path + ": " + e.what());
    } catch (const evctrl::Error& e) {
        throw UsageError("profile " + path + ": " + e.what());
    }
    auto dims = [](evctrl::ModelConfig c) {
        c.seed = 0;
        return c;
    };
    if (!(dims(p.model) == dims(model)))
        throw UsageError("profile " + path + " was calibrated for model " + evctrl::to_json(p.model).dump() +
                         ", current model is " + evctrl::to_json(model).dump());
    return p;
}

/// Builds the run config shared by generate and bench. Everything is
/// validated here so failures exit before compute.
Prepared prepare(const Settings& s) {
    Prepared out;
    evctrl::RunConfig& rc = out.run;
    rc.model = s.model;
    rc.model.seed = s.seed;
    rc.model.validate();
    rc.seed = s.seed;
    try {
        rc.condition = evctrl::resolve_condition(s.condition, rc.model.grid_side);
    } catch (const evctrl::Error& e) {
        throw UsageError(std::string("--condition: ") + e.what());
    }
    rc.policy.total_steps = s.steps;
    rc.policy.interval = s.interval;
    rc.selection.ratio = s.ratio;
    rc.selection.refresh_mode = evctrl::refresh_mode_from_string(s.mode);
    if (!s.profile.empty()) {
        out.profile = load_profile(s.profile, rc.model);
        rc.zones = out.profile->zones;
        rc.policy.critical_steps = out.profile->critical_steps;
    }
    if (s.critical) rc.policy.critical_steps = *s.critical;
    if (s.all_local) rc.zones = evctrl::ZoneMap::uniform(rc.model, evctrl::Zone::Local);
    if (!s.schedule.empty()) {
        try {
            rc.schedule = evctrl::schedule_from_json(json::parse(evctrl::read_file(s.schedule)));
        } catch (const json::exception& e) {
            throw UsageError("schedule " + s.schedule + ": " + e.what());
        } catch (const evctrl::Error& e) {
            throw UsageError("schedule " + s.schedule + ": " + e.what());
        }
    }
    rc.policy.validate();
    rc.selection.validate();
    rc.zone_map().validate(rc.model);
    if (rc.schedule) rc.schedule->validate(rc.total_steps());
    return out;
}

json stats_to_json(const evctrl::CacheStats& stats) {
    json a = json::array();
    for (const auto& [key, st] : stats)
        a.push_back({{"branch", evctrl::to_string(key.first)},
                     {"layer", key.second},
                     {"full_refreshes", st.full_refreshes},
                     {"replays", st.replays},
                     {"partial_refreshes", st.partial_refreshes},
                     {"tokens_refreshed", st.tokens_refreshed},
                     {"tokens_reused", st.tokens_reused}});
    return a;
}

std::string latent_fingerprint(const evctrl::Tensor2D& t) {
    return evctrl::hex64(evctrl::fnv1a(
        std::string_view(reinterpret_cast<const char*>(t.data.data()), t.data.size() * sizeof(double))));
}

// ---------------------------------------------------------------------------

int cmd_calibrate(const Settings& s, const std::string& out) {
    evctrl::ModelConfig model = s.model;
    model.seed = s.seed;
    model.validate();
    if (s.steps < 4) throw UsageError("calibration needs --steps >= 4 to detect critical steps");
    evctrl::ConditionMap condition;
    try {
        condition = evctrl::resolve_condition(s.condition, model.grid_side);
    } catch (const evctrl::Error& e) {
        throw UsageError(std::string("--condition: ") + e.what());
    }
    require_writable_file(out);

    const auto weights = evctrl::build_model(model);
    const auto cal = evctrl::calibrate(weights, condition, {s.steps, s.seed}, {s.kurtosis_min, s.iou_min},
                                       {s.kappa, s.max_critical});
    const auto& p = cal.profile;
    evctrl::write_file_atomic(out, evctrl::to_json(p).dump(2) + "\n");

    auto zones = [](const std::vector<evctrl::Zone>& z) {
        std::string t;
        for (auto x : z) t.push_back(x == evctrl::Zone::Local ? 'L' : 'G');
        return t;
    };
    std::printf("control zones  %s\n", zones(p.zones.control).c_str());
    std::printf("main zones     %s%s\n", zones(p.zones.main).c_str(),
                p.zone_fallback ? "  (no layer passed the thresholds; later half is Local)" : "");
    std::printf("condition      %zu/%zu edge tokens\n", p.edge_tokens, model.tokens());
    std::printf("critical steps");
    if (p.critical_steps.empty()) std::printf(" none");
    for (auto c : p.critical_steps) std::printf(" %zu", c);
    std::printf("\nwrote %s\n", out.c_str());
    return kOk;
}

int cmd_generate(const Settings& s, const std::string& out_dir) {
    Prepared prep = prepare(s);
    const evctrl::RunConfig& rc = prep.run;
    const fs::path dir(out_dir);
    require_writable_dir(dir);

    const auto weights = evctrl::build_model(rc.model);
    const evctrl::RunResult r = evctrl::run(weights, rc);

    const std::uint64_t analytic_baseline = evctrl::flop_model::baseline(rc.model, rc.total_steps());
    const double speedup = static_cast<double>(analytic_baseline) / static_cast<double>(r.flops);
    const double theoretical = static_cast<double>(analytic_baseline) /
                               static_cast<double>(evctrl::flop_model::scheduled(r.trace, rc.model, rc.selection,
                                                                                 rc.zone_map()));
    std::vector<std::size_t> critical = rc.policy.critical_steps;
    std::sort(critical.begin(), critical.end());
    critical.erase(std::unique(critical.begin(), critical.end()), critical.end());

    json j = {
        {"model", evctrl::to_json(rc.model)},
        {"seed", rc.seed},
        {"steps", rc.total_steps()},
        {"condition", s.condition},
        {"interval", rc.policy.interval},
        {"ratio", rc.selection.ratio},
        {"mode", evctrl::to_string(rc.selection.refresh_mode)},
        {"critical_steps", critical},
        {"zones", evctrl::to_json(rc.zone_map())},
        {"schedule_replayed", rc.schedule.has_value()},
        {"trace", r.trace.trace()},
        {"full_steps", r.trace.full_count()},
        {"flops", r.flops},
        {"baseline_flops", analytic_baseline},
        {"speedup", speedup},
        {"theoretical_speedup", theoretical},
        {"wall_ms", r.wall_ms},
        {"latent_fingerprint", latent_fingerprint(r.final_latent)},
        {"cache_stats", stats_to_json(r.cache_stats)},
    };
    if (s.compare_baseline) {
        const evctrl::RunResult base = evctrl::run_baseline(weights, rc);
        const auto q = evctrl::compare(r.decoded, r.final_latent, base.decoded, base.final_latent);
        j["quality"] = {{"psnr", q.psnr}, {"ssim", q.ssim}, {"rel_l2", q.rel_l2}};
        j["baseline_wall_ms"] = base.wall_ms;
        std::printf("vs baseline    psnr %.2f dB  ssim %.4f  rel_l2 %.3g\n", q.psnr, q.ssim, q.rel_l2);
    }
    evctrl::save_pgm(r.decoded, dir / "output.pgm");
    evctrl::write_file_atomic(dir / "schedule.json", evctrl::schedule_to_json(r.trace).dump(2) + "\n");
    evctrl::write_file_atomic(dir / "result.json", j.dump(2) + "\n");

    std::printf("trace          %s\n", r.trace.trace().c_str());
    std::printf("flops          %llu (baseline %llu)\n", static_cast<unsigned long long>(r.flops),
                static_cast<unsigned long long>(analytic_baseline));
    std::printf("speedup        %.3fx (analytic %.3fx)\n", speedup, theoretical);
    std::printf("wrote %s\n", (dir / "output.pgm").string().c_str());
    return kOk;
}

int cmd_bench(const Settings& s, const std::string& out_dir) {
    const evctrl::BenchGrid grid = evctrl::BenchGrid::parse(s.grid);
    Prepared prep = prepare(s);
    if (s.repeats == 0) throw UsageError("--repeats must be >= 1");
    const fs::path dir(out_dir);
    require_writable_dir(dir);

    const auto weights = evctrl::build_model(prep.run.model);
    evctrl::SweepOptions opts;
    opts.repeats = s.repeats;
    opts.jobs = s.jobs;
    opts.on_row = [&](const evctrl::BenchReport& r) { evctrl::write_report(dir, r); };
    const evctrl::BenchReport report = evctrl::sweep(weights, prep.run, grid, opts);

    std::printf("%-14s %4s %6s %14s %10s %8s %7s %7s %9s\n", "mode", "N", "P", "flops", "wall_ms", "speedup", "psnr",
                "ssim", "rel_l2");
    for (const auto& row : report.rows) {
        if (row.failed) {
            std::printf("%-14s %4zu %6g  FAILED: %s\n", row.mode.c_str(), row.interval, row.ratio, row.error.c_str());
            continue;
        }
        std::printf("%-14s %4zu %6g %14llu %10.1f %8.3f %7.2f %7.4f %9.3g\n", row.mode.c_str(), row.interval,
                    row.ratio, static_cast<unsigned long long>(row.flops), row.wall_ms, row.speedup,
                    row.quality.psnr, row.quality.ssim, row.quality.rel_l2);
    }
    std::printf("wrote %s and %s\n", (dir / "report.json").string().c_str(), (dir / "report.csv").string().c_str());
    return evctrl::all_rows_succeeded(report) ? kOk : kRunFailure;
}

int cmd_oracle(const std::string& suite) {
    const auto checks = evctrl::oracle::run_suite(suite);
    if (!checks) throw UsageError("unknown oracle suite '" + suite + "' (selection, equivalence, schedule, metrics)");
    bool all = true;
    for (const auto& c : *checks) {
        std::printf("%s  %s%s%s\n", c.passed ? "PASS" : "FAIL", c.name.c_str(), c.detail.empty() ? "" : "  ",
                    c.detail.c_str());
        all = all && c.passed;
    }
    return all ? kOk : kRunFailure;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"evctrl: cached DiT-ControlNet sampling, calibration and benchmarks"};
    app.require_subcommand(1);
    app.set_version_flag("--version", "evctrl 0.1.0");

    Settings flags;
    std::string config_path, critical_text, out;
    std::string suite;

    auto common = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "JSON config file; flags override its values")
            ->check(CLI::ExistingFile);
        sub->add_option("--seed", flags.seed, "Seed for weights and initial noise (default: $EVCTRL_SEED or 0)");
        sub->add_option("--steps", flags.steps, "Denoising steps T")->check(CLI::PositiveNumber);
        sub->add_option("--condition", flags.condition,
                        "zero | synth:rect|circle|lines|points[:params] | path to a P2 PGM");
    };
    auto run_opts = [&](CLI::App* sub) {
        sub->add_option("--profile", flags.profile, "profile.json from calibrate (zones and critical steps)");
        sub->add_option("--interval,-N", flags.interval, "Full-step interval N")->check(CLI::PositiveNumber);
        sub->add_option("--ratio,-P", flags.ratio, "Percent of tokens refreshed in Local blocks")
            ->check(CLI::Range(0.0, 100.0));
        sub->add_option("--critical", critical_text, "Comma-separated critical steps, or 'none'");
    };

    auto* calibrate = app.add_subcommand("calibrate", "Profile layers and detect critical steps");
    common(calibrate);
    calibrate->add_option("--out,-o", out, "Output profile path")->default_val("profile.json");
    calibrate->add_option("--kappa", flags.kappa, "Critical-step threshold in standard deviations");
    calibrate->add_option("--max-critical", flags.max_critical, "Keep at most this many critical steps");
    calibrate->add_option("--kurtosis-min", flags.kurtosis_min, "Local zone: minimum excess kurtosis");
    calibrate->add_option("--iou-min", flags.iou_min, "Local zone: minimum condition IoU");

    auto* generate = app.add_subcommand("generate", "Run the cached sampler");
    common(generate);
    run_opts(generate);
    generate->add_option("--mode", flags.mode, "Sublayers refreshed for selected tokens: both | attn | mlp");
    generate->add_flag("--all-local", flags.all_local, "Treat every block as Local");
    generate->add_option("--schedule", flags.schedule, "Replay a schedule.json instead of building one");
    generate->add_flag("--compare-baseline", flags.compare_baseline, "Also run uncached and report PSNR/SSIM/rel_l2");
    generate->add_option("--out,-o", out, "Output directory")->default_val("out");

    auto* bench = app.add_subcommand("bench", "Sweep (mode, N, P) against the uncached baseline");
    common(bench);
    run_opts(bench);
    bench->add_option("--grid", flags.grid, "e.g. 'N=1,2,4,8;P=10,30;mode=evctrl,dss-only' or 'ablation'");
    bench->add_option("--repeats", flags.repeats, "Timing repeats per row (median reported)");
    bench->add_option("--jobs,-j", flags.jobs, "Concurrent runs")->check(CLI::PositiveNumber);
    bench->add_option("--out,-o", out, "Output directory")->default_val("bench");

    auto* oracle = app.add_subcommand("oracle", "Run a brute-force cross-check suite");
    oracle->add_option("--suite", suite, "selection | equivalence | schedule | metrics")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kUsage;
    }

    try {
        if (oracle->parsed()) return cmd_oracle(suite);

        CLI::App* sub = app.get_subcommands().front();
        Settings s;
        bool seed_set = false;
        if (!config_path.empty()) apply_config_file(config_path, s, seed_set);
        auto given = [&](const char* name) { return sub->get_option_no_throw(name) && sub->count(name) > 0; };
        if (given("--seed")) {
            s.seed = flags.seed;
            seed_set = true;
        }
        if (!seed_set) {
            if (const char* env = std::getenv("EVCTRL_SEED"); env && *env) {
                try {
                    std::size_t pos = 0;
                    s.seed = std::stoull(env, &pos);
                    if (pos != std::string(env).size()) throw std::invalid_argument("trailing");
                } catch (const std::exception&) {
                    throw UsageError(std::string("EVCTRL_SEED='") + env + "' is not an unsigned integer");
                }
            }
        }
        if (given("--steps")) s.steps = flags.steps;
        if (given("--condition")) s.condition = flags.condition;
        if (given("--profile")) s.profile = flags.profile;
        if (given("--interval")) s.interval = flags.interval;
        if (given("--ratio")) s.ratio = flags.ratio;
        if (given("--critical")) s.critical = parse_step_list(critical_text);
        if (given("--mode")) s.mode = flags.mode;
        if (given("--all-local")) s.all_local = flags.all_local;
        if (given("--schedule")) s.schedule = flags.schedule;
        if (given("--compare-baseline")) s.compare_baseline = flags.compare_baseline;
        if (given("--kappa")) s.kappa = flags.kappa;
        if (given("--max-critical")) s.max_critical = flags.max_critical;
        if (given("--kurtosis-min")) s.kurtosis_min = flags.kurtosis_min;
        if (given("--iou-min")) s.iou_min = flags.iou_min;
        if (given("--grid")) s.grid = flags.grid;
        if (given("--repeats")) s.repeats = flags.repeats;
        if (given("--jobs")) s.jobs = flags.jobs;

        if (calibrate->parsed()) return cmd_calibrate(s, out);
        if (generate->parsed()) return cmd_generate(s, out);
        if (bench->parsed()) return cmd_bench(s, out);
    } catch (const UsageError& e) {
        std::fprintf(stderr, "evctrl: %s\n", e.what());
        return kUsage;
    } catch (const evctrl::ConfigError& e) {
        std::fprintf(stderr, "evctrl: %s\n", e.what());
        return kUsage;
    } catch (const evctrl::ParameterError& e) {
        std::fprintf(stderr, "evctrl: %s\n", e.what());
        return kUsage;
    } catch (const evctrl::ParseError& e) {
        std::fprintf(stderr, "evctrl: %s\n", e.what());
        return kUsage;
    } catch (const evctrl::WriteError& e) {
        std::fprintf(stderr, "evctrl: %s\n", e.what());
        return kUsage;
    } catch (const evctrl::SchedulingError& e) {
        std::fprintf(stderr, "evctrl: %s\n", e.what());
        return kUsage;
    } catch (const evctrl::DimensionError& e) {
        std::fprintf(stderr, "evctrl: %s\n", e.what());
        return kUsage;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "evctrl: run failed: %s\n", e.what());
        return kRunFailure;
    }
    return kUsage;
}
