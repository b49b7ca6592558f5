// Copyright 2026 The evctrl Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "evctrl/errors.hpp"
#include "evctrl/lfoc.hpp"
#include "evctrl/model.hpp"

namespace evctrl {

using nlohmann::json;

namespace detail {

/// Rejects keys outside `allowed` so typos in config files surface.
inline void require_known_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
    if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
    for (const auto& [key, _] : j.items())
        if (!allowed.contains(key)) throw ConfigError("unknown key '" + key + "' in " + where);
}

template <typename T>
T get_as(const json& j, const char* key, const std::string& where) {
    try {
        return j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ConfigError(where + "." + key + ": " + e.what());
    }
}

} // namespace detail

inline json to_json(const ModelConfig& c) {
    return {{"grid_side", c.grid_side}, {"hidden_dim", c.hidden_dim}, {"num_blocks", c.num_blocks},
            {"heads", c.heads},         {"control_blocks", c.control_blocks}, {"seed", c.seed}};
}

/// Missing keys keep their defaults; unknown keys are an error.
inline ModelConfig model_config_from_json(const json& j, ModelConfig c = {}) {
    detail::require_known_keys(j, {"grid_side", "hidden_dim", "num_blocks", "heads", "control_blocks", "seed"},
                               "model");
    auto take = [&](const char* key, auto& field) {
        if (j.contains(key)) field = detail::get_as<std::decay_t<decltype(field)>>(j, key, "model");
    };
    take("grid_side", c.grid_side);
    take("hidden_dim", c.hidden_dim);
    take("num_blocks", c.num_blocks);
    take("heads", c.heads);
    take("control_blocks", c.control_blocks);
    take("seed", c.seed);
    return c;
}

inline Zone zone_from_string(const std::string& s) {
    if (s == "global") return Zone::Global;
    if (s == "local") return Zone::Local;
    throw ConfigError("unknown zone '" + s + "'");
}

inline json to_json(const ZoneMap& z) {
    auto names = [](const std::vector<Zone>& zones) {
        json a = json::array();
        for (Zone x : zones) a.push_back(to_string(x));
        return a;
    };
    return {{"main", names(z.main)}, {"control", names(z.control)}};
}

inline ZoneMap zone_map_from_json(const json& j) {
    detail::require_known_keys(j, {"main", "control"}, "zones");
    ZoneMap z;
    for (const auto& s : detail::get_as<std::vector<std::string>>(j, "main", "zones")) z.main.push_back(zone_from_string(s));
    for (const auto& s : detail::get_as<std::vector<std::string>>(j, "control", "zones"))
        z.control.push_back(zone_from_string(s));
    return z;
}

} // namespace evctrl
