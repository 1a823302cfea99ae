#pragma once

#include <optional>
#include <vector>

#include "lacoste/common.hpp"

namespace lacoste::metrics {

// Per-pixel class ids; 0 = background, 1..C instruments.
struct LabelMap {
    int64_t h = 0, w = 0;
    std::vector<int> ids;

    LabelMap() = default;
    LabelMap(int64_t h_, int64_t w_) : h(h_), w(w_), ids(static_cast<size_t>(h_ * w_), 0) {}
    int at(int64_t y, int64_t x) const { return ids[static_cast<size_t>(y * w + x)]; }
    int& at(int64_t y, int64_t x) { return ids[static_cast<size_t>(y * w + x)]; }
};

// |P∩G|/|P∪G| for class c; nullopt when the union is empty.
std::optional<double> per_class_iou(const LabelMap& pred, const LabelMap& gt, int c);

struct IouSummary {
    double ch_iou = 0.0;   // frame-mean over GT-present classes
    double isi_iou = 0.0;  // frame-mean over classes present in pred ∪ GT
    double mc_iou = 0.0;   // class-mean over frames where defined
    std::vector<double> per_class;       // mean IoU per class id 1..C (NaN if never defined)
    int64_t frames = 0;
};

IouSummary dataset_ious(const std::vector<LabelMap>& preds, const std::vector<LabelMap>& gts,
                        int num_classes);

struct DiceSummary {
    double dsc = 0.0;  // aggregated like Ch_IoU
    double mcd = 0.0;  // aggregated like mcIoU
};

DiceSummary dice_scores(const std::vector<LabelMap>& preds, const std::vector<LabelMap>& gts,
                        int num_classes);

// Hausdorff distance (exact max) and average symmetric surface distance over
// 4-connectivity boundary pixels, Euclidean, pixel units. nullopt when either
// mask is empty.
std::optional<std::pair<double, double>> surface_distances(const std::vector<uint8_t>& pred_mask,
                                                           const std::vector<uint8_t>& gt_mask,
                                                           int64_t h, int64_t w);

struct SurfaceSummary {
    double hd = 0.0;   // mean over defined class-frame pairs
    double asd = 0.0;
    int64_t defined_pairs = 0;
    int64_t excluded_pairs = 0;
};

SurfaceSummary dataset_surface_distances(const std::vector<LabelMap>& preds,
                                         const std::vector<LabelMap>& gts, int num_classes);

}  // namespace lacoste::metrics
