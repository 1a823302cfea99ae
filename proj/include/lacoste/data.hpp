#pragma once

#include <optional>
#include <string>
#include <vector>

#include "lacoste/geometry.hpp"
#include "lacoste/imageio.hpp"

namespace lacoste {

// One annotated instance: class id in 1..C, persistent identity within a
// sequence, full-resolution binary mask.
struct GtInstance {
    int class_id = 0;
    int identity = 0;
    std::vector<uint8_t> mask;
};

// Ground truth for one frame; instance masks are pairwise disjoint.
struct GroundTruthSet {
    int64_t h = 0, w = 0;
    std::vector<GtInstance> instances;
    size_t size() const { return instances.size(); }
    bool empty() const { return instances.empty(); }
};

struct StereoFrame {
    ImageU8 left;
    std::optional<ImageU8> right;   // absent in monocular datasets
    geometry::DepthField depth;     // left-view depth
    GroundTruthSet gt;
};

// The unit of training and inference: ordered left/right frame pairs with
// depth, masks, identities.
struct StereoClip {
    std::string id;
    int64_t h = 0, w = 0;
    double bf = 0.0;  // stereo baseline * focal length: true disparity = bf / Z
    std::vector<StereoFrame> frames;
    int64_t length() const { return static_cast<int64_t>(frames.size()); }
};

}  // namespace lacoste
