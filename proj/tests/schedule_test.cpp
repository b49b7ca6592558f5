// Copyright 2026 The evctrl Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include "test_support.hpp"

namespace evctrl {
namespace {

std::vector<std::size_t> full_steps(const StepSchedule& s) {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < s.size(); ++i)
        if (s.modes[i] == StepMode::Full) out.push_back(i);
    return out;
}

TEST(BuildSchedule, IntervalWithCriticalAndLast) {
    const StepSchedule s = build_schedule({8, {10}, 50, true});
    EXPECT_EQ(full_steps(s), (std::vector<std::size_t>{0, 8, 10, 16, 24, 32, 40, 48, 49}));
    EXPECT_EQ(s.trace().size(), 50u);
    EXPECT_EQ(s.trace().substr(0, 11), "FPPPPPPPFPF");
}

TEST(BuildSchedule, SmallExamples) {
    EXPECT_EQ(build_schedule({1, {}, 5, true}).trace(), "FFFFF");
    EXPECT_EQ(build_schedule({2, {}, 5, false}).trace(), "FPFPF");
    EXPECT_EQ(build_schedule({3, {}, 5, false}).trace(), "FPPFP");
    EXPECT_EQ(build_schedule({3, {}, 5, true}).trace(), "FPPFF");
    EXPECT_EQ(build_schedule({5, {2}, 5, false}).trace(), "FPFPP");
    EXPECT_EQ(build_schedule({1, {}, 1, true}).trace(), "F");
}

TEST(BuildSchedule, RejectsBadPolicies) {
    EXPECT_THROW(build_schedule({0, {}, 10, true}), ParameterError);
    EXPECT_THROW(build_schedule({11, {}, 10, true}), ParameterError);
    EXPECT_THROW(build_schedule({2, {10}, 10, true}), ParameterError);
    EXPECT_THROW(build_schedule({1, {}, 0, true}), ParameterError);
}

TEST(BuildSchedule, TotalAndFirstStepFull) {
    Xoshiro256 rng(3);
    for (int i = 0; i < 300; ++i) {
        CachePolicy p;
        p.total_steps = 1 + rng.below(120);
        p.interval = 1 + rng.below(p.total_steps);
        p.force_last = rng.below(2) == 1;
        for (std::size_t k = rng.below(4); k > 0; --k) p.critical_steps.push_back(rng.below(p.total_steps));
        const StepSchedule s = build_schedule(p);
        ASSERT_EQ(s.size(), p.total_steps);
        EXPECT_EQ(s.modes[0], StepMode::Full);
        EXPECT_NO_THROW(s.validate(p.total_steps));
    }
}

TEST(BuildSchedule, FullCountNonIncreasingInInterval) {
    for (std::size_t T : {7u, 50u, 97u})
        for (bool last : {false, true})
            for (std::size_t n = 1; n < T; ++n)
                EXPECT_GE(build_schedule({n, {}, T, last}).full_count(),
                          build_schedule({n + 1, {}, T, last}).full_count());
}

TEST(ScheduleJson, RoundTrips) {
    const StepSchedule s = build_schedule({4, {5}, 13, true});
    EXPECT_EQ(schedule_from_json(schedule_to_json(s)), s);
    EXPECT_THROW(schedule_from_json(nlohmann::json{{"modes", {"F", "X"}}}), ConfigError);
    EXPECT_THROW(schedule_from_json(nlohmann::json::array()), ConfigError);
}

TEST(ScheduleValidate, MustStartFullAndMatchLength) {
    StepSchedule s{{StepMode::Partial, StepMode::Full}};
    EXPECT_THROW(s.validate(2), SchedulingError);
    EXPECT_THROW(build_schedule({1, {}, 3, true}).validate(4), ConfigError);
}

TEST(FlopModel, DefaultConfigTotals) {
    const ModelConfig cfg;
    const SelectionPolicy sel{30.0, RefreshMode::Both};
    const ZoneMap zones = ZoneMap::later_half(cfg);
    EXPECT_EQ(flop_model::full_step(cfg), 385875968u);
    EXPECT_EQ(flop_model::block_partial(256, 64, 76, RefreshMode::Both), 7700480u);
    EXPECT_EQ(flop_model::partial_step(cfg, sel, zones), 77692928u);

    const StepSchedule s = build_schedule({8, {}, 50, true});
    EXPECT_EQ(s.full_count(), 8u);
    EXPECT_EQ(flop_model::scheduled(s, cfg, sel, zones), 6350110720u);
    EXPECT_EQ(flop_model::baseline(cfg, 50), 19293798400u);
    EXPECT_DOUBLE_EQ(theoretical_speedup({8, {}, 50, true}, cfg, sel, zones), 19293798400.0 / 6350110720.0);
    EXPECT_EQ(flop_model::scheduled(build_schedule({8, {10}, 50, true}), cfg, sel, zones), 6658293760u);
}

TEST(FlopModel, SpeedupMonotoneInIntervalAndRatio) {
    const ModelConfig cfg;
    const ZoneMap zones = ZoneMap::later_half(cfg);
    for (double p : {0.0, 10.0, 30.0, 60.0, 100.0})
        for (std::size_t n = 1; n < 50; ++n)
            EXPECT_LE(theoretical_speedup({n, {}, 50, true}, cfg, {p, RefreshMode::Both}, zones),
                      theoretical_speedup({n + 1, {}, 50, true}, cfg, {p, RefreshMode::Both}, zones) + 1e-12);
    for (std::size_t n : {2u, 8u, 25u})
        for (double p = 0; p < 100; p += 5)
            EXPECT_GE(theoretical_speedup({n, {}, 50, true}, cfg, {p, RefreshMode::Both}, zones),
                      theoretical_speedup({n, {}, 50, true}, cfg, {p + 5, RefreshMode::Both}, zones));
}

TEST(FlopModel, EmptySelectionCostsOnlyOverhead) {
    const ModelConfig cfg;
    EXPECT_EQ(flop_model::partial_step(cfg, {0.0, RefreshMode::Both}, ZoneMap::uniform(cfg, Zone::Local)),
              flop_model::step_overhead(cfg));
    EXPECT_EQ(flop_model::partial_step(cfg, {100.0, RefreshMode::Both}, ZoneMap::uniform(cfg, Zone::Global)),
              flop_model::step_overhead(cfg));
}

} // namespace
} // namespace evctrl
