#pragma once

#include <map>
#include <string>

#include "lacoste/nn.hpp"

namespace lacoste::checkpoint {

// On-disk layout: <dir>/manifest.json plus one little-endian float32 .bin per
// parameter array. Parameter names are prefixed with their component
// ("qbs.", "stscls.", "lacls."); save_component merges into an existing
// manifest so several components can share one checkpoint directory.
//
// manifest.json:
//   { "format": "lacoste-checkpoint-v1",
//     "components": { "<component>": { <config echo> } },
//     "params": [ {"name","shape","dtype","file"}, ... ] }

void save_component(const std::string& dir, const std::string& component,
                    const nn::ParamStore& params, const std::string& config_json_echo);

// Loads every parameter whose name starts with "<component>." into `params`
// (which must already contain identically shaped entries).
void load_component(const std::string& dir, const std::string& component,
                    nn::ParamStore& params);

bool has_component(const std::string& dir, const std::string& component);

// Config echo stored for a component at save time ("{}" when absent).
std::string component_config(const std::string& dir, const std::string& component);

}  // namespace lacoste::checkpoint
