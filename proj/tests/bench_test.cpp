// Copyright 2026 The evctrl Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <filesystem>

#include "test_support.hpp"

namespace evctrl {
namespace {

namespace fs = std::filesystem;

TEST(BenchGrid, ParsesLists) {
    const BenchGrid g = BenchGrid::parse("N=1,2,4;P=10,30;mode=evctrl,wa");
    EXPECT_EQ(g.intervals, (std::vector<std::size_t>{1, 2, 4}));
    EXPECT_EQ(g.ratios, (std::vector<double>{10, 30}));
    EXPECT_EQ(g.modes, (std::vector<BenchMode>{BenchMode::Evctrl, BenchMode::Wa}));
    EXPECT_EQ(BenchGrid::parse("N=2").ratios, (std::vector<double>{30}));
}

TEST(BenchGrid, ErrorsNameTheToken) {
    for (const char* bad : {"Q=3", "N=0", "N=x", "P=101", "mode=fast", "N=1;N=2", "N"}) {
        try {
            BenchGrid::parse(bad);
            ADD_FAILURE() << bad;
        } catch (const ParameterError& e) {
            EXPECT_NE(std::string(e.what()).find("bad grid token"), std::string::npos) << e.what();
        }
    }
}

TEST(BenchGrid, AblationPreset) {
    const BenchGrid g = BenchGrid::ablation();
    EXPECT_EQ(g.modes, (std::vector<BenchMode>{BenchMode::Wa, BenchMode::Wm, BenchMode::DssOnly, BenchMode::Evctrl}));
    EXPECT_EQ(g.intervals, std::vector<std::size_t>{8});
    EXPECT_EQ(g.ratios, std::vector<double>{30});
    EXPECT_EQ(BenchGrid::parse("ablation").modes, g.modes);
}

TEST(Configure, ModeSemantics) {
    RunConfig base = testing::small_run(16, 0);
    base.policy.critical_steps = {5};
    const RunConfig wa = configure(base, BenchMode::Wa, 4, 30);
    EXPECT_EQ(wa.selection.refresh_mode, RefreshMode::AttnOnly);
    EXPECT_TRUE(wa.policy.critical_steps.empty());
    const RunConfig dss = configure(base, BenchMode::DssOnly, 4, 30);
    EXPECT_EQ(dss.selection.ratio, 0.0);
    EXPECT_EQ(dss.policy.critical_steps, std::vector<std::size_t>{5});
    const RunConfig ev = configure(base, BenchMode::Evctrl, 8, 30);
    EXPECT_EQ(ev.selection.ratio, 30.0);
    EXPECT_EQ(ev.policy.interval, 8u);
    EXPECT_EQ(ev.policy.critical_steps, std::vector<std::size_t>{5});
    EXPECT_TRUE(configure(base, BenchMode::IntervalOnly, 4, 30).policy.critical_steps.empty());
}

TEST(Sweep, AblationRowsInOrder) {
    const RunConfig base = testing::small_run(16, 1);
    const BenchReport r = sweep(build_model(base.model), base, BenchGrid::ablation(), {1, 1, {}});
    std::vector<std::string> modes;
    for (const auto& row : r.rows) modes.push_back(row.mode);
    EXPECT_EQ(modes, (std::vector<std::string>{"baseline", "dss-only", "evctrl", "wa", "wm"}));
    EXPECT_TRUE(r.complete);
    EXPECT_TRUE(all_rows_succeeded(r));
    EXPECT_EQ(r.rows[1].ratio, 0.0);
}

TEST(Sweep, IntervalOneRowMatchesBaseline) {
    const RunConfig base = testing::small_run(12, 2);
    const BenchReport r = sweep(build_model(base.model), base, BenchGrid::parse("N=1,2,4,12;P=30"), {1, 1, {}});
    ASSERT_EQ(r.rows.size(), 5u);
    const BenchRow& n1 = r.rows[1];
    EXPECT_EQ(n1.interval, 1u);
    EXPECT_EQ(n1.quality.psnr, kPsnrCap);
    EXPECT_NEAR(n1.quality.ssim, 1.0, 1e-12);
    EXPECT_EQ(n1.quality.rel_l2, 0.0);
    EXPECT_EQ(n1.speedup, 1.0);
    for (std::size_t i = 2; i < r.rows.size(); ++i) EXPECT_GT(r.rows[i].speedup, r.rows[i - 1].speedup);
}

TEST(Sweep, ParallelMatchesSerial) {
    const RunConfig base = testing::small_run(12, 3);
    const ModelWeights w = build_model(base.model);
    const BenchGrid g = BenchGrid::parse("N=2,4;P=10,50;mode=evctrl,wm");
    BenchReport a = sweep(w, base, g, {1, 1, {}}), b = sweep(w, base, g, {1, 3, {}});
    for (auto* r : {&a, &b})
        for (auto& row : r->rows) row.wall_ms = 0;
    EXPECT_EQ(a, b);
}

TEST(Sweep, RejectsBadConfigBeforeRunning) {
    const RunConfig base = testing::small_run(12, 0);
    const ModelWeights w = build_model(base.model);
    int calls = 0;
    SweepOptions opts{1, 1, [&](const BenchReport&) { ++calls; }};
    EXPECT_THROW(sweep(w, base, BenchGrid::parse("N=13"), opts), ParameterError);
    EXPECT_THROW(sweep(w, base, BenchGrid{{}, {30}, {BenchMode::Evctrl}}, opts), ParameterError);
    EXPECT_EQ(calls, 0);
}

TEST(Sweep, CallbackErrorAbortsSweep) {
    const RunConfig base = testing::small_run(12, 0);
    int calls = 0;
    SweepOptions opts{1, 1, [&](const BenchReport&) {
                          if (++calls == 2) throw WriteError("disk full");
                      }};
    EXPECT_THROW(sweep(build_model(base.model), base, BenchGrid::parse("N=2,3,4"), opts), WriteError);
    EXPECT_EQ(calls, 2);
}

TEST(Report, JsonRoundTripAndCsv) {
    BenchReport r;
    r.seed = 4;
    r.config_hash = "abc";
    r.total_steps = 50;
    r.repeats = 3;
    r.complete = true;
    BenchRow ok;
    ok.mode = "evctrl";
    ok.interval = 8;
    ok.ratio = 30;
    ok.critical_steps = {10};
    ok.flops = 123;
    ok.wall_ms = 1.5;
    ok.speedup = 2.5;
    ok.quality = {30.0, 0.9, 0.1};
    ok.trace = "FPF";
    BenchRow bad;
    bad.mode = "wa";
    bad.failed = true;
    bad.error = "boom";
    r.rows = {ok, bad};
    EXPECT_EQ(bench_report_from_json(nlohmann::json::parse(to_json(r).dump())), r);
    const std::string csv = format_csv(r);
    EXPECT_EQ(csv.substr(0, csv.find('\n')), "mode,N,P,flops,wall_ms,speedup,psnr,ssim,rel_l2");
    EXPECT_NE(csv.find("evctrl,8,30,123,1.500,2.5,30,0.9,0.1"), std::string::npos) << csv;
    EXPECT_NE(csv.find("wa,1,0,,,,,,"), std::string::npos) << csv;
}

TEST(Report, ConfigHashTracksInputs) {
    RunConfig a = testing::small_run(12, 0);
    RunConfig b = a;
    EXPECT_EQ(config_hash(a), config_hash(b));
    b.seed = 1;
    EXPECT_NE(config_hash(a), config_hash(b));
}

// A sweep killed mid-run leaves a parseable report with the rows finished so far.
TEST(Report, SurvivesCrashAfterRow) {
    const fs::path dir = fs::temp_directory_path() / ("evctrl_bench_crash_" + std::to_string(::getpid()));
    fs::remove_all(dir);
    fs::create_directories(dir);

    const pid_t pid = ::fork();
    ASSERT_GE(pid, 0);
    if (pid == 0) {
        const RunConfig base = testing::small_run(12, 5);
        SweepOptions opts{1, 1, [&](const BenchReport& r) {
                              write_report(dir, r);
                              if (r.rows.size() == 3) ::_exit(3);
                          }};
        sweep(build_model(base.model), base, BenchGrid::parse("N=1,2,3,4,6"), opts);
        ::_exit(0);
    }
    int status = 0;
    ::waitpid(pid, &status, 0);
    ASSERT_TRUE(WIFEXITED(status));
    EXPECT_EQ(WEXITSTATUS(status), 3);

    const BenchReport r = bench_report_from_json(nlohmann::json::parse(read_file(dir / "report.json")));
    EXPECT_FALSE(r.complete);
    ASSERT_EQ(r.rows.size(), 3u);
    EXPECT_EQ(r.rows[0].mode, "baseline");
    for (const auto& entry : fs::directory_iterator(dir))
        EXPECT_EQ(entry.path().filename().string().find(".tmp"), std::string::npos) << entry.path();
    fs::remove_all(dir);
}

} // namespace
} // namespace evctrl
