// Copyright 2026 The evctrl Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "evctrl/bench.hpp"
#include "evctrl/condition.hpp"
#include "evctrl/errors.hpp"
#include "evctrl/grid.hpp"
#include "evctrl/io.hpp"
#include "evctrl/lfoc.hpp"
#include "evctrl/metrics.hpp"
#include "evctrl/model.hpp"
#include "evctrl/oracles.hpp"
#include "evctrl/pipeline.hpp"
#include "evctrl/profiler.hpp"
#include "evctrl/rng.hpp"
#include "evctrl/schedule.hpp"
#include "evctrl/serialize.hpp"
#include "evctrl/tensor.hpp"
