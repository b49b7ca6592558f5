// Copyright 2026 The evctrl Authors
// SPDX-License-Identifier: Apache-2.0

// Brute-force cross-checks runnable from the command line. Each suite
// recomputes a result the slow, obvious way and compares.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "evctrl/condition.hpp"
#include "evctrl/lfoc.hpp"
#include "evctrl/metrics.hpp"
#include "evctrl/pipeline.hpp"
#include "evctrl/rng.hpp"
#include "evctrl/schedule.hpp"

namespace evctrl::oracle {

struct Check {
    std::string name;
    bool passed = false;
    std::string detail;
};

inline const std::vector<std::string>& suite_names() {
    static const std::vector<std::string> names{"selection", "equivalence", "schedule", "metrics"};
    return names;
}

/// Full stable sort by descending score, first floor(P*N/100), ascending.
inline TokenSet sort_select(const std::vector<double>& scores, long ratio) {
    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    idx.resize(static_cast<std::size_t>(ratio) * scores.size() / 100);
    std::sort(idx.begin(), idx.end());
    return idx;
}

inline std::vector<Check> selection(std::uint64_t seed = 1, std::size_t cases = 1000) {
    static constexpr long kRatios[] = {0, 1, 25, 33, 50, 99, 100};
    Xoshiro256 rng(derive_seed(seed, 0x53454c));
    std::size_t mismatches = 0;
    std::string first;
    for (std::size_t c = 0; c < cases; ++c) {
        const std::size_t n = 1 + rng.below(300);
        // Every third vector draws from five levels so ties are common.
        const bool coarse = c % 3 == 0;
        std::vector<double> scores(n);
        for (double& s : scores) s = coarse ? static_cast<double>(rng.below(5)) : rng.uniform() * 10.0;
        const long ratio = kRatios[rng.below(std::size(kRatios))];
        const TokenSet got = select_tokens(scores, SelectionPolicy{static_cast<double>(ratio), RefreshMode::Both});
        if (got != sort_select(scores, ratio) && mismatches++ == 0)
            first = "case " + std::to_string(c) + " (n=" + std::to_string(n) + ", P=" + std::to_string(ratio) + ")";
    }
    return {{"select_tokens matches sort oracle on " + std::to_string(cases) + " vectors", mismatches == 0,
             mismatches ? std::to_string(mismatches) + " mismatches, first at " + first : ""}};
}

inline std::vector<Check> schedule(std::uint64_t seed = 1, std::size_t cases = 500) {
    std::vector<Check> out;
    {
        CachePolicy p{8, {10}, 50, true};
        const StepSchedule s = build_schedule(p);
        std::set<std::size_t> full;
        for (std::size_t i = 0; i < s.size(); ++i)
            if (s.modes[i] == StepMode::Full) full.insert(i);
        const std::set<std::size_t> expected{0, 8, 10, 16, 24, 32, 40, 48, 49};
        out.push_back({"T=50 N=8 critical={10} full steps", full == expected, "trace " + s.trace()});
    }
    Xoshiro256 rng(derive_seed(seed, 0x534348));
    std::size_t bad = 0;
    std::string first;
    for (std::size_t c = 0; c < cases; ++c) {
        CachePolicy p;
        p.total_steps = 1 + rng.below(100);
        p.interval = 1 + rng.below(p.total_steps);
        p.force_last = rng.below(2) == 1;
        const std::size_t k = rng.below(5);
        for (std::size_t i = 0; i < k; ++i) p.critical_steps.push_back(rng.below(p.total_steps));
        const StepSchedule s = build_schedule(p);
        bool ok = s.size() == p.total_steps;
        for (std::size_t step = 0; ok && step < p.total_steps; ++step) {
            const bool critical =
                std::find(p.critical_steps.begin(), p.critical_steps.end(), step) != p.critical_steps.end();
            const bool full = step == 0 || step % p.interval == 0 || critical ||
                              (p.force_last && step == p.total_steps - 1);
            ok = (s.modes[step] == StepMode::Full) == full;
        }
        if (!ok && bad++ == 0)
            first = "T=" + std::to_string(p.total_steps) + " N=" + std::to_string(p.interval);
    }
    out.push_back({"per-step predicate on " + std::to_string(cases) + " random policies", bad == 0,
                   bad ? std::to_string(bad) + " failures, first " + first : ""});
    return out;
}

namespace detail {

// Single-window SSIM written with raw sums, E[ab] - E[a]E[b] form.
inline double ssim_by_sums(const Grid& a, const Grid& b) {
    const double n = static_cast<double>(a.size());
    double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        sa += a.pixels[i];
        sb += b.pixels[i];
        saa += a.pixels[i] * a.pixels[i];
        sbb += b.pixels[i] * b.pixels[i];
        sab += a.pixels[i] * b.pixels[i];
    }
    const double ma = sa / n, mb = sb / n;
    const double va = saa / n - ma * ma, vb = sbb / n - mb * mb, cov = sab / n - ma * mb;
    const double c1 = 1e-4, c2 = 9e-4;
    return (2 * ma * mb + c1) * (2 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
}

inline Grid random_grid(Xoshiro256& rng, std::size_t side) {
    Grid g(side, side);
    for (double& p : g.pixels) p = rng.uniform();
    return g;
}

} // namespace detail

inline std::vector<Check> metrics(std::uint64_t seed = 1) {
    std::vector<Check> out;
    auto near = [](double a, double b, double tol) { return std::abs(a - b) <= tol; };
    {
        Grid a(8, 8, 0.0), b(8, 8, 1.0);
        const double v = psnr(a, b);
        out.push_back({"psnr constant 0 vs 1 is 0 dB", near(v, 0.0, 1e-12), std::to_string(v)});
    }
    {
        Grid a(8, 8, 0.3), b(8, 8, 0.4);
        const double v = psnr(a, b);
        out.push_back({"psnr offset 0.1 is 20 dB", near(v, 20.0, 1e-9), std::to_string(v)});
    }
    {
        Grid a(8, 8, 0.5);
        out.push_back({"psnr identical is capped", psnr(a, a) == kPsnrCap, ""});
    }
    Xoshiro256 rng(derive_seed(seed, 0x4d4554));
    const Grid x = detail::random_grid(rng, 16), y = detail::random_grid(rng, 16);
    out.push_back({"ssim(x, x) == 1", near(ssim(x, x), 1.0, 1e-12), std::to_string(ssim(x, x))});
    out.push_back({"ssim symmetric", near(ssim(x, y), ssim(y, x), 1e-12), ""});
    const Grid a = detail::random_grid(rng, 8), b = detail::random_grid(rng, 8);
    const double got = ssim(a, b), want = detail::ssim_by_sums(a, b);
    out.push_back({"ssim 8x8 fixture vs direct formula", near(got, want, 1e-9),
                   std::to_string(got) + " vs " + std::to_string(want)});
    return out;
}

/// N=1 against the baseline, and P=100 with every block Local.
inline std::vector<Check> equivalence(const ModelConfig& model = {}, std::size_t total_steps = 50,
                                      std::uint64_t seed = 0) {
    const ModelWeights weights = build_model(model);
    RunConfig cfg;
    cfg.model = model;
    cfg.condition = synth_condition(parse_shape("circle", model.grid_side), model.grid_side);
    cfg.policy.total_steps = total_steps;
    cfg.seed = seed;
    const RunResult base = run_baseline(weights, cfg);

    std::vector<Check> out;
    RunConfig n1 = cfg;
    n1.policy.interval = 1;
    const RunResult r1 = run(weights, n1);
    out.push_back({"N=1 equals baseline bitwise", r1.final_latent == base.final_latent && r1.flops == base.flops,
                   "max |diff| " + std::to_string(max_abs_diff(r1.final_latent, base.final_latent))});

    RunConfig full = cfg;
    full.policy.interval = 8;
    full.selection = {100.0, RefreshMode::Both};
    full.zones = ZoneMap::uniform(model, Zone::Local);
    const RunResult r100 = run(weights, full);
    const double diff = max_abs_diff(r100.final_latent, base.final_latent);
    out.push_back({"P=100 all-Local equals baseline within 1e-9", diff <= 1e-9, "max |diff| " + std::to_string(diff)});
    return out;
}

inline std::optional<std::vector<Check>> run_suite(const std::string& name) {
    if (name == "selection") return selection();
    if (name == "schedule") return schedule();
    if (name == "metrics") return metrics();
    if (name == "equivalence") return equivalence();
    return std::nullopt;
}

} // namespace evctrl::oracle
