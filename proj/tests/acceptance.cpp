// Copyright 2026 The evctrl Authors
// SPDX-License-Identifier: Apache-2.0

// Acceptance run on the default 256-token, 12-block model. Prints one
// PASS/FAIL line per criterion, then a summary. Exits 0 unless --strict is
// given and a criterion failed.

#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <functional>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "evctrl/evctrl.hpp"

namespace {

using namespace evctrl;
namespace fs = std::filesystem;

struct Verdict {
    bool passed = false;
    std::string detail;
};

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

RunConfig default_run(std::uint64_t seed) {
    RunConfig cfg;
    cfg.model.seed = seed;
    cfg.seed = seed;
    cfg.condition = resolve_condition("synth:circle", cfg.model.grid_side);
    cfg.policy.total_steps = 50;
    return cfg;
}

// ---------------------------------------------------------------------------

Verdict exactness() {
    const RunConfig base_cfg = default_run(0);
    const ModelWeights w = build_model(base_cfg.model);
    const RunResult base = run_baseline(w, base_cfg);

    RunConfig n1 = base_cfg;
    n1.policy.interval = 1;
    auto t0 = std::chrono::steady_clock::now();
    const RunResult r1 = run(w, n1);
    const double t1 = seconds_since(t0);
    const bool bitwise = r1.final_latent.data == base.final_latent.data;

    RunConfig local = base_cfg;
    local.policy.interval = 8;
    local.selection = {100.0, RefreshMode::Both};
    local.zones = ZoneMap::uniform(local.model, Zone::Local);
    t0 = std::chrono::steady_clock::now();
    const RunResult r100 = run(w, local);
    const double t100 = seconds_since(t0);
    double diff = 0.0;
    for (std::size_t i = 0; i < base.final_latent.data.size(); ++i)
        diff = std::max(diff, std::abs(r100.final_latent.data[i] - base.final_latent.data[i]));

    return {bitwise && diff <= 1e-9 && t1 < 10.0 && t100 < 10.0,
            fmt("N=1 bitwise=%s (%.2fs); P=100 all-Local max|diff|=%.3g (%.2fs)", bitwise ? "yes" : "no", t1, diff,
                t100)};
}

// Full stable sort by descending score; the first floor(P*n/100) indices.
std::vector<std::size_t> brute_select(const std::vector<double>& s, long p) {
    std::vector<std::size_t> idx(s.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return s[a] > s[b]; });
    idx.resize(static_cast<std::size_t>(p) * s.size() / 100);
    std::sort(idx.begin(), idx.end());
    return idx;
}

Verdict selection() {
    const long ratios[] = {0, 1, 25, 33, 50, 99, 100};
    Xoshiro256 rng(20260101);
    int bad = 0;
    for (int c = 0; c < 1000; ++c) {
        const std::size_t n = 1 + rng.below(300);
        std::vector<double> s(n);
        // Half the vectors draw from a handful of values to force ties.
        for (double& v : s) v = c % 2 ? std::floor(rng.uniform() * 4.0) : rng.gaussian();
        const long p = ratios[rng.below(7)];
        bad += select_tokens(s, {static_cast<double>(p), RefreshMode::Both}) != brute_select(s, p);
    }
    return {bad == 0, fmt("%d/1000 mismatches against full sort", bad)};
}

Verdict schedule() {
    const StepSchedule s = build_schedule({8, {10}, 50, true});
    std::set<std::size_t> full;
    for (std::size_t i = 0; i < s.size(); ++i)
        if (s.modes[i] == StepMode::Full) full.insert(i);
    const bool exact = full == std::set<std::size_t>{0, 8, 10, 16, 24, 32, 40, 48, 49};

    Xoshiro256 rng(77);
    int bad = 0;
    for (int c = 0; c < 500; ++c) {
        const std::size_t T = 1 + rng.below(200);
        const std::size_t N = 1 + rng.below(T);
        std::vector<std::size_t> crit;
        for (std::size_t k = rng.below(6); k > 0; --k) crit.push_back(rng.below(T));
        const bool last = rng.below(2) == 1;
        const StepSchedule got = build_schedule({N, crit, T, last});
        bool ok = got.size() == T;
        for (std::size_t i = 0; ok && i < T; ++i) {
            const bool want = i == 0 || i % N == 0 || std::count(crit.begin(), crit.end(), i) > 0 ||
                              (last && i + 1 == T);
            ok = (got.modes[i] == StepMode::Full) == want;
        }
        bad += !ok;
    }
    return {exact && bad == 0, fmt("fixture %s, %d/500 fuzz failures", exact ? "exact" : "wrong", bad)};
}

// MAC count written out from the architecture: per block QKV/O 4nd^2,
// scores+values 2n^2d, MLP 8nd^2; per step the input projection, output
// head and one projection per control block.
std::uint64_t analytic_flops(const ModelConfig& m, const StepSchedule& sched, std::size_t refreshed,
                             std::size_t local_blocks) {
    const std::uint64_t n = m.tokens(), d = m.hidden_dim, s = refreshed;
    const std::uint64_t fixed = (2 + m.control_blocks) * n * d * d;
    const std::uint64_t block = 4 * n * d * d + 2 * n * n * d + 8 * n * d * d;
    const std::uint64_t partial_block = s ? (2 * n * d * d + 2 * s * d * d + 2 * s * n * d + 8 * s * d * d) : 0;
    std::uint64_t total = 0;
    for (StepMode mode : sched.modes)
        total += fixed + (mode == StepMode::Full ? (m.num_blocks + m.control_blocks) * block
                                                 : local_blocks * partial_block);
    return total;
}

Verdict flops() {
    const RunConfig base = default_run(0);
    const ModelWeights w = build_model(base.model);
    const std::size_t local = base.model.num_blocks / 2 + base.model.control_blocks / 2;
    const std::uint64_t baseline_macs = analytic_flops(base.model, build_schedule({1, {}, 50, true}), 0, 0);
    double worst = 0.0, speedup = 0.0;
    for (std::size_t N : {2, 4, 8})
        for (double P : {10.0, 30.0, 60.0}) {
            RunConfig cfg = base;
            cfg.policy.interval = N;
            cfg.selection = {P, RefreshMode::Both};
            const RunResult r = run(w, cfg);
            const std::size_t s = static_cast<std::size_t>(P) * base.model.tokens() / 100;
            const double want = static_cast<double>(analytic_flops(base.model, r.trace, s, local));
            worst = std::max(worst, std::abs(static_cast<double>(r.flops) - want) / want);
            if (N == 8 && P == 30.0) speedup = static_cast<double>(baseline_macs) / static_cast<double>(r.flops);
        }
    return {worst <= 0.01 && speedup >= 1.8,
            fmt("worst relative gap %.3g over 3x3 grid; speedup at N=8 P=30 %.3fx", worst, speedup)};
}

Verdict detector() {
    struct Fixture {
        std::vector<double> sim;
        std::vector<std::size_t> want;
    };
    std::vector<Fixture> fixtures;
    Xoshiro256 rng(5);
    for (std::vector<std::size_t> dips : {std::vector<std::size_t>{10}, {7, 30}, {4, 22, 41}}) {
        std::vector<double> sim(49);
        for (double& v : sim) v = 0.985 + 0.01 * rng.uniform();
        std::vector<std::size_t> want;
        for (std::size_t i = 0; i < dips.size(); ++i) {
            sim[dips[i] - 1] = 0.55 + 0.1 * static_cast<double>(i);
            want.push_back(dips[i]);
        }
        fixtures.push_back({sim, want});
    }
    int ok = 0;
    for (const auto& f : fixtures) ok += detect_critical_steps(f.sim) == f.want;
    const bool constant_empty = detect_critical_steps(std::vector<double>(49, 0.97)).empty();
    return {ok == 3 && constant_empty,
            fmt("%d/3 fixtures recovered exactly; constant profile %s", ok, constant_empty ? "empty" : "non-empty")};
}

// Shared by the divergence and ablation criteria.
struct SeedRuns {
    double div_n2 = 0, div_n4 = 0, div_n8 = 0, div_n8_crit = 0;
    double ssim_evctrl = 0, ssim_dss = 0;
    std::size_t critical = 0;
};

std::vector<SeedRuns> seed_runs() {
    std::vector<SeedRuns> out;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        RunConfig cfg = default_run(seed);
        const ModelWeights w = build_model(cfg.model);
        const Calibration cal = calibrate(w, cfg.condition, {cfg.total_steps(), seed});
        const RunResult& base = cal.baseline;
        cfg.zones = cal.profile.zones;
        cfg.selection = {30.0, RefreshMode::Both};

        SeedRuns s;
        s.critical = cal.profile.critical_steps.size();
        auto divergence = [&](std::size_t N, const std::vector<std::size_t>& crit, double P, double* ssim_out) {
            RunConfig c = cfg;
            c.policy.interval = N;
            c.policy.critical_steps = crit;
            c.selection.ratio = P;
            const RunResult r = run(w, c);
            if (ssim_out) *ssim_out = ssim(r.decoded, base.decoded);
            return rel_l2(r.final_latent, base.final_latent);
        };
        s.div_n2 = divergence(2, {}, 30.0, nullptr);
        s.div_n4 = divergence(4, {}, 30.0, nullptr);
        s.div_n8 = divergence(8, {}, 30.0, nullptr);
        s.div_n8_crit = divergence(8, cal.profile.critical_steps, 30.0, &s.ssim_evctrl);
        divergence(8, cal.profile.critical_steps, 0.0, &s.ssim_dss);
        out.push_back(s);
    }
    return out;
}

Verdict divergence(const std::vector<SeedRuns>& runs) {
    int v24 = 0, v48 = 0;
    double m2 = 0, m4 = 0, m8 = 0, m8c = 0;
    for (const auto& s : runs) {
        v24 += s.div_n2 > s.div_n4;
        v48 += s.div_n4 > s.div_n8;
        m2 += s.div_n2, m4 += s.div_n4, m8 += s.div_n8, m8c += s.div_n8_crit;
    }
    const double k = static_cast<double>(runs.size());
    m2 /= k, m4 /= k, m8 /= k, m8c /= k;
    const bool ok = m2 <= m4 && m4 <= m8 && v24 <= 2 && v48 <= 2 && m8c <= m8;
    return {ok, fmt("mean rel_l2 N=2 %.4f, N=4 %.4f, N=8 %.4f, N=8+critical %.4f; violations %d, %d", m2, m4, m8, m8c,
                    v24, v48)};
}

Verdict metrics() {
    auto near = [](double a, double b, double tol) { return std::abs(a - b) <= tol; };
    bool ok = near(psnr(Grid(8, 8, 0.0), Grid(8, 8, 1.0)), 0.0, 1e-9) &&
              near(psnr(Grid(8, 8, 0.25), Grid(8, 8, 0.35)), 20.0, 1e-9);
    Xoshiro256 rng(9);
    Grid a(8, 8), b(8, 8), c(24, 24), d(24, 24);
    for (double& p : a.pixels) p = rng.uniform();
    for (double& p : b.pixels) p = rng.uniform();
    for (double& p : c.pixels) p = rng.uniform();
    for (double& p : d.pixels) p = rng.uniform();
    ok = ok && near(ssim(c, c), 1.0, 1e-12) && near(ssim(c, d), ssim(d, c), 1e-12);

    // One 8x8 window, statistics written out term by term.
    double ma = 0, mb = 0;
    for (std::size_t i = 0; i < 64; ++i) ma += a.pixels[i] / 64.0, mb += b.pixels[i] / 64.0;
    double va = 0, vb = 0, cov = 0;
    for (std::size_t i = 0; i < 64; ++i) {
        va += (a.pixels[i] - ma) * (a.pixels[i] - ma) / 64.0;
        vb += (b.pixels[i] - mb) * (b.pixels[i] - mb) / 64.0;
        cov += (a.pixels[i] - ma) * (b.pixels[i] - mb) / 64.0;
    }
    const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
    const double want = (2 * ma * mb + c1) * (2 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    const double got = ssim(a, b);
    ok = ok && near(got, want, 1e-9);
    return {ok, fmt("ssim fixture %.12f vs formula %.12f", got, want)};
}

Verdict ablation(const std::vector<SeedRuns>& runs) {
    RunConfig base = default_run(0);
    base.policy.critical_steps = {10};
    SweepOptions opts;
    opts.repeats = 1;
    const BenchReport report = sweep(build_model(base.model), base, BenchGrid::ablation(), opts);
    std::set<std::string> modes;
    for (const auto& r : report.rows) modes.insert(r.mode);
    const bool rows = modes == std::set<std::string>{"baseline", "wa", "wm", "dss-only", "evctrl"} &&
                      all_rows_succeeded(report);

    int wins = 0;
    double gap = 0;
    for (const auto& s : runs) {
        wins += s.ssim_evctrl >= s.ssim_dss;
        gap += s.ssim_evctrl - s.ssim_dss;
    }
    return {rows && wins >= 8, fmt("rows %s; evctrl ssim >= dss-only on %d/10 seeds (mean gap %+.2e)",
                                   rows ? "complete" : "missing", wins, gap / static_cast<double>(runs.size()))};
}

nlohmann::json strip_wall(const nlohmann::json& j) {
    if (j.is_object()) {
        nlohmann::json out = nlohmann::json::object();
        for (const auto& [k, v] : j.items())
            if (k.find("wall_ms") == std::string::npos) out[k] = strip_wall(v);
        return out;
    }
    if (j.is_array()) {
        nlohmann::json out = nlohmann::json::array();
        for (const auto& v : j) out.push_back(strip_wall(v));
        return out;
    }
    return j;
}

Verdict determinism() {
    const fs::path dir = fs::temp_directory_path() / ("evctrl_acceptance_" + std::to_string(::getpid()));
    fs::remove_all(dir);
    fs::create_directories(dir);
    auto cli = [&](const std::string& args) {
        const std::string cmd = std::string(EVCTRL_CLI_PATH) + " " + args + " > /dev/null 2>&1";
        const int status = std::system(cmd.c_str());
        return WIFEXITED(status) && WEXITSTATUS(status) == 0;
    };
    auto load = [](const fs::path& p) { return strip_wall(nlohmann::json::parse(read_file(p))); };

    bool ran = true;
    for (const char* k : {"1", "2"}) {
        const fs::path d = dir / k;
        ran = ran && cli("calibrate --seed 11 --out " + (d / "profile.json").string());
        ran = ran && cli("generate --seed 11 --profile " + (d / "profile.json").string() +
                         " --compare-baseline --out " + (d / "gen").string());
        ran = ran && cli("bench --seed 11 --repeats 1 --grid 'N=2,8;P=30;mode=evctrl,wm' --out " +
                         (d / "bench").string());
    }
    int same = 0;
    const std::vector<fs::path> files{"profile.json", "gen/result.json", "gen/schedule.json", "bench/report.json"};
    if (ran)
        for (const auto& f : files) same += load(dir / "1" / f) == load(dir / "2" / f);
    const bool pgm = ran && read_file(dir / "1" / "gen/output.pgm") == read_file(dir / "2" / "gen/output.pgm");
    fs::remove_all(dir);
    return {ran && same == 4 && pgm,
            fmt("%s; %d/4 JSON outputs identical, output.pgm %s", ran ? "all commands ran" : "a command failed", same,
                pgm ? "identical" : "differs")};
}

} // namespace

int main(int argc, char** argv) {
    const bool strict = argc > 1 && std::strcmp(argv[1], "--strict") == 0;
    int failed = 0, total = 0;
    auto report = [&](const char* name, const std::function<Verdict()>& check) {
        const auto t0 = std::chrono::steady_clock::now();
        Verdict v;
        try {
            v = check();
        } catch (const std::exception& e) {
            v = {false, std::string("threw: ") + e.what()};
        }
        ++total;
        failed += !v.passed;
        std::printf("%s  %-22s %s  [%.1fs]\n", v.passed ? "PASS" : "FAIL", name, v.detail.c_str(), seconds_since(t0));
        std::fflush(stdout);
    };

    report("exactness", exactness);
    report("selection-oracle", selection);
    report("schedule-oracle", schedule);
    report("flop-consistency", flops);
    report("critical-detector", detector);
    std::vector<SeedRuns> runs;
    report("divergence-ordering", [&] {
        runs = seed_runs();
        return divergence(runs);
    });
    report("metric-correctness", metrics);
    report("ablation-structure", [&] { return ablation(runs); });
    report("determinism", determinism);

    std::printf("%d/%d criteria passed\n", total - failed, total);
    return strict && failed ? 1 : 0;
}
