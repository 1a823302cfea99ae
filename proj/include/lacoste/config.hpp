#pragma once

#include <string>

#include "lacoste/pipeline.hpp"
#include "lacoste/synthdata.hpp"

namespace lacoste {

// JSON config round trips. Files may specify any subset of keys; the rest
// keep the built-in defaults.
std::string config_to_json(const pipeline::SystemConfig& cfg);
pipeline::SystemConfig config_from_json(const std::string& json_text);
pipeline::SystemConfig load_config(const std::string& path);  // path may be empty -> defaults
void save_config(const pipeline::SystemConfig& cfg, const std::string& path);

std::string scene_to_json(const synthdata::SceneConfig& cfg);
synthdata::SceneConfig scene_from_json(const std::string& json_text);

}  // namespace lacoste
