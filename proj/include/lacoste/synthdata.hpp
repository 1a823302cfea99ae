#pragma once

#include <string>
#include <vector>

#include "lacoste/data.hpp"

namespace lacoste::synthdata {

// Deterministic synthetic stereo scenes: textured ellipses at known depths
// moving with bounded velocity, both views rendered from the same scene so
// the true disparity bf/Z is exact (per-object disparities are snapped to
// integers, which makes left/right correspondence pixel-exact off occlusions).
struct SceneConfig {
    int64_t height = 64;
    int64_t width = 96;
    int classes = 4;
    int objects_min = 2;
    int objects_max = 4;
    double velocity_cap = 2.0;   // px/frame, must stay < width / clip_len
    double z_min = 4.0;
    double z_max = 12.0;
    double z_background = 16.0;
    double bf = 40.0;            // baseline * focal
    int64_t clip_len = 8;
    uint64_t seed = 1;
    // Dataset-design knobs (all off by default):
    double placement_bias = 0.0;   // chance a class spawns in its preferred quadrant
    double flicker_prob = 0.0;     // per object-frame texture corruption
    double glare_prob = 0.0;       // per frame left-view-only glare band
    std::vector<double> class_weights;  // sampling weights, empty = uniform

    void validate() const;
};

StereoClip generate_clip(const SceneConfig& cfg, int64_t clip_index);

// True per-pixel disparity of the left view (bf / depth), all valid.
geometry::DisparityField true_disparity(const StereoFrame& frame, double bf);

// Layout per sequence under dir/<clip id>/:
//   frames/left_%06d.png, frames/right_%06d.png (8-bit RGB)
//   masks/%06d.png (16-bit instance ids), depth/%06d.pfm
//   instances.json  (instance id -> {class, identity})
// plus dir/dataset.json with the config echo and clip list.
void write_clip(const StereoClip& clip, const std::string& dir, bool monocular);
void write_dataset(const SceneConfig& cfg, int64_t num_clips, const std::string& dir,
                   bool monocular);

struct DatasetIndex {
    std::string dir;
    int64_t height = 0, width = 0;
    int classes = 0;
    double bf = 0.0;
    bool monocular = false;
    std::vector<std::string> clip_ids;
};

DatasetIndex load_dataset(const std::string& dir);
StereoClip load_clip(const DatasetIndex& index, const std::string& clip_id);

}  // namespace lacoste::synthdata
