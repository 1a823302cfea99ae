#pragma once

#include <optional>

#include "lacoste/autodiff.hpp"
#include "lacoste/imageio.hpp"
#include "lacoste/tensor.hpp"

namespace lacoste::geometry {

// Channels-first feature map with a per-pixel validity mask.
struct FeatureMap {
    Tensor data;                  // [C,H,W]
    std::vector<uint8_t> valid;   // H*W, 1 = usable

    FeatureMap() = default;
    FeatureMap(int64_t c, int64_t h, int64_t w)
        : data(Tensor({c, h, w})), valid(static_cast<size_t>(h * w), 1) {}
    explicit FeatureMap(Tensor t)
        : data(std::move(t)), valid(static_cast<size_t>(data.dim(1) * data.dim(2)), 1) {}
    int64_t channels() const { return data.dim(0); }
    int64_t h() const { return data.dim(1); }
    int64_t w() const { return data.dim(2); }
};

// Horizontal disparity in pixels; left pixel (x,y) corresponds to right pixel
// (x - d, y). Nonnegative on valid pixels.
struct DisparityField {
    int64_t h = 0, w = 0;
    std::vector<double> d;
    std::vector<uint8_t> valid;

    DisparityField() = default;
    DisparityField(int64_t h_, int64_t w_)
        : h(h_), w(w_), d(static_cast<size_t>(h_ * w_), 0.0),
          valid(static_cast<size_t>(h_ * w_), 1) {}
    double at(int64_t y, int64_t x) const { return d[static_cast<size_t>(y * w + x)]; }
};

struct DepthField {
    int64_t h = 0, w = 0;
    std::vector<double> z;
    std::vector<uint8_t> valid;

    DepthField() = default;
    DepthField(int64_t h_, int64_t w_)
        : h(h_), w(w_), z(static_cast<size_t>(h_ * w_), 1.0),
          valid(static_cast<size_t>(h_ * w_), 1) {}
    // Maximum depth over valid pixels.
    double z_max() const;
};

enum class FillMode { temporal_donor, blank_with_mask };

struct PseudoStereoConfig {
    double d_min = 5.0;
    double d_max = 15.0;
    double sobel_threshold = 1.0;
    FillMode fill_mode = FillMode::temporal_donor;
};

// Shared gather plan (indices, weights, validity) for a horizontal backward
// warp: output (x,y) samples the source at (x - d(x,y), y).
ad::WarpPlan make_warp_plan(const DisparityField& disp, const std::vector<uint8_t>& src_valid,
                            bool negate = false);

FeatureMap backward_warp(const FeatureMap& source, const DisparityField& disparity);

// Per-pixel cosine similarity in [-1,1]; 0 where b is invalid or either norm
// is below eps.
Tensor cosine_fusion_weight(const FeatureMap& a, const FeatureMap& b, double eps = 1e-8);

// F_DFP = left + w * warped; identical to left where warped is invalid.
FeatureMap fuse_dfp(const FeatureMap& left, const FeatureMap& warped, const Tensor& weight);

// D = d_s * z_max / Z. Nonpositive depth on a valid pixel is a data error.
DisparityField disparity_from_depth(const DepthField& depth, double d_s);

// Marks pixels whose Sobel gradient magnitude exceeds the threshold ("flying
// pixels") and removes them from the valid set.
std::pair<DisparityField, std::vector<uint8_t>> sharpen_disparity(const DisparityField& disparity,
                                                                  const PseudoStereoConfig& cfg);

// Splats each valid source pixel to (x - d, y) (nearest target pixel);
// collisions keep the larger disparity. Uncovered targets are invalid.
std::pair<FeatureMap, std::vector<uint8_t>> forward_warp(const FeatureMap& image,
                                                         const DisparityField& disparity);

FeatureMap fill_holes(const FeatureMap& image, const std::vector<uint8_t>& valid,
                      const FeatureMap* donor, FillMode mode);

// disparity_from_depth -> sharpen_disparity -> forward_warp -> fill_holes.
// Returns the synthesized right view and its validity mask (all-true except in
// blank_with_mask mode, where holes stay flagged).
std::pair<FeatureMap, std::vector<uint8_t>> synth_right_view(const FeatureMap& left,
                                                             const DepthField& depth, double d_s,
                                                             const FeatureMap* donor,
                                                             const PseudoStereoConfig& cfg);

// Averages valid full-resolution disparities over stride x stride blocks and
// rescales to feature-pixel units; a block with no valid pixel is invalid.
DisparityField downsample_disparity(const DisparityField& disp, int stride);

// Conversions for image-valued maps ([0,1] float channels).
FeatureMap image_to_features(const ImageU8& img);
ImageU8 features_to_image(const FeatureMap& f);

}  // namespace lacoste::geometry
