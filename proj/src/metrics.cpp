#include "lacoste/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace lacoste::metrics {

namespace {

void check_aligned(const std::vector<LabelMap>& preds, const std::vector<LabelMap>& gts) {
    if (preds.empty() || preds.size() != gts.size())
        throw data_error("metrics: need at least one aligned frame pair");
    for (size_t i = 0; i < preds.size(); ++i)
        if (preds[i].h != gts[i].h || preds[i].w != gts[i].w)
            throw argument_error("metrics: frame shape mismatch");
}

struct ClassCounts {
    int64_t inter = 0, pred = 0, gt = 0;
    int64_t uni() const { return pred + gt - inter; }
};

// One pass over the frame, counting per class.
std::vector<ClassCounts> count_frame(const LabelMap& pred, const LabelMap& gt, int num_classes) {
    std::vector<ClassCounts> cc(static_cast<size_t>(num_classes) + 1);
    for (size_t i = 0; i < pred.ids.size(); ++i) {
        const int p = pred.ids[i], g = gt.ids[i];
        if (p > 0 && p <= num_classes) ++cc[static_cast<size_t>(p)].pred;
        if (g > 0 && g <= num_classes) ++cc[static_cast<size_t>(g)].gt;
        if (p == g && p > 0 && p <= num_classes) ++cc[static_cast<size_t>(p)].inter;
    }
    return cc;
}

}  // namespace

std::optional<double> per_class_iou(const LabelMap& pred, const LabelMap& gt, int c) {
    if (pred.h != gt.h || pred.w != gt.w) throw argument_error("per_class_iou: shape mismatch");
    int64_t inter = 0, uni = 0;
    for (size_t i = 0; i < pred.ids.size(); ++i) {
        const bool p = pred.ids[i] == c, g = gt.ids[i] == c;
        inter += (p && g) ? 1 : 0;
        uni += (p || g) ? 1 : 0;
    }
    if (uni == 0) return std::nullopt;
    return static_cast<double>(inter) / static_cast<double>(uni);
}

IouSummary dataset_ious(const std::vector<LabelMap>& preds, const std::vector<LabelMap>& gts,
                        int num_classes) {
    check_aligned(preds, gts);
    IouSummary out;
    out.frames = static_cast<int64_t>(preds.size());
    double ch_sum = 0.0, isi_sum = 0.0;
    int64_t ch_frames = 0, isi_frames = 0;
    std::vector<double> class_sum(static_cast<size_t>(num_classes) + 1, 0.0);
    std::vector<int64_t> class_cnt(static_cast<size_t>(num_classes) + 1, 0);
    for (size_t f = 0; f < preds.size(); ++f) {
        const auto cc = count_frame(preds[f], gts[f], num_classes);
        double gt_sum = 0.0, present_sum = 0.0;
        int gt_classes = 0, present_classes = 0;
        for (int c = 1; c <= num_classes; ++c) {
            const auto& k = cc[static_cast<size_t>(c)];
            if (k.uni() == 0) continue;
            const double iou = static_cast<double>(k.inter) / static_cast<double>(k.uni());
            class_sum[static_cast<size_t>(c)] += iou;
            ++class_cnt[static_cast<size_t>(c)];
            present_sum += iou;
            ++present_classes;
            if (k.gt > 0) {
                gt_sum += iou;
                ++gt_classes;
            }
        }
        if (gt_classes > 0) {
            ch_sum += gt_sum / gt_classes;
            ++ch_frames;
        }
        if (present_classes > 0) {
            isi_sum += present_sum / present_classes;
            ++isi_frames;
        }
    }
    out.ch_iou = ch_frames > 0 ? ch_sum / ch_frames : 0.0;
    out.isi_iou = isi_frames > 0 ? isi_sum / isi_frames : 0.0;
    out.per_class.assign(static_cast<size_t>(num_classes), 0.0);
    double mc_sum = 0.0;
    int mc_classes = 0;
    for (int c = 1; c <= num_classes; ++c) {
        if (class_cnt[static_cast<size_t>(c)] == 0) {
            out.per_class[static_cast<size_t>(c - 1)] = std::numeric_limits<double>::quiet_NaN();
            continue;
        }
        const double m = class_sum[static_cast<size_t>(c)] /
                         static_cast<double>(class_cnt[static_cast<size_t>(c)]);
        out.per_class[static_cast<size_t>(c - 1)] = m;
        mc_sum += m;
        ++mc_classes;
    }
    out.mc_iou = mc_classes > 0 ? mc_sum / mc_classes : 0.0;
    return out;
}

DiceSummary dice_scores(const std::vector<LabelMap>& preds, const std::vector<LabelMap>& gts,
                        int num_classes) {
    check_aligned(preds, gts);
    DiceSummary out;
    double dsc_sum = 0.0;
    int64_t dsc_frames = 0;
    std::vector<double> class_sum(static_cast<size_t>(num_classes) + 1, 0.0);
    std::vector<int64_t> class_cnt(static_cast<size_t>(num_classes) + 1, 0);
    for (size_t f = 0; f < preds.size(); ++f) {
        const auto cc = count_frame(preds[f], gts[f], num_classes);
        double gt_sum = 0.0;
        int gt_classes = 0;
        for (int c = 1; c <= num_classes; ++c) {
            const auto& k = cc[static_cast<size_t>(c)];
            if (k.pred + k.gt == 0) continue;
            const double dice =
                2.0 * static_cast<double>(k.inter) / static_cast<double>(k.pred + k.gt);
            class_sum[static_cast<size_t>(c)] += dice;
            ++class_cnt[static_cast<size_t>(c)];
            if (k.gt > 0) {
                gt_sum += dice;
                ++gt_classes;
            }
        }
        if (gt_classes > 0) {
            dsc_sum += gt_sum / gt_classes;
            ++dsc_frames;
        }
    }
    out.dsc = dsc_frames > 0 ? dsc_sum / dsc_frames : 0.0;
    double mc_sum = 0.0;
    int mc_classes = 0;
    for (int c = 1; c <= num_classes; ++c) {
        if (class_cnt[static_cast<size_t>(c)] == 0) continue;
        mc_sum += class_sum[static_cast<size_t>(c)] /
                  static_cast<double>(class_cnt[static_cast<size_t>(c)]);
        ++mc_classes;
    }
    out.mcd = mc_classes > 0 ? mc_sum / mc_classes : 0.0;
    return out;
}

namespace {

// Boundary under 4-connectivity: mask pixels with at least one background
// 4-neighbour; pixels on the image border count as boundary.
std::vector<std::pair<int64_t, int64_t>> boundary_pixels(const std::vector<uint8_t>& mask,
                                                         int64_t h, int64_t w) {
    std::vector<std::pair<int64_t, int64_t>> b;
    auto inside = [&](int64_t y, int64_t x) {
        return y >= 0 && y < h && x >= 0 && x < w && mask[static_cast<size_t>(y * w + x)];
    };
    for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x) {
            if (!mask[static_cast<size_t>(y * w + x)]) continue;
            if (!inside(y - 1, x) || !inside(y + 1, x) || !inside(y, x - 1) || !inside(y, x + 1))
                b.emplace_back(y, x);
        }
    return b;
}

}  // namespace

std::optional<std::pair<double, double>> surface_distances(const std::vector<uint8_t>& pred_mask,
                                                           const std::vector<uint8_t>& gt_mask,
                                                           int64_t h, int64_t w) {
    if (static_cast<int64_t>(pred_mask.size()) != h * w ||
        static_cast<int64_t>(gt_mask.size()) != h * w)
        throw argument_error("surface_distances: shape mismatch");
    const auto bp = boundary_pixels(pred_mask, h, w);
    const auto bg = boundary_pixels(gt_mask, h, w);
    if (bp.empty() || bg.empty()) return std::nullopt;
    auto directed = [](const std::vector<std::pair<int64_t, int64_t>>& from,
                       const std::vector<std::pair<int64_t, int64_t>>& to) {
        double max_d = 0.0, sum_d = 0.0;
        for (const auto& [fy, fx] : from) {
            double best = std::numeric_limits<double>::infinity();
            for (const auto& [ty, tx] : to) {
                const double dy = static_cast<double>(fy - ty);
                const double dx = static_cast<double>(fx - tx);
                best = std::min(best, dy * dy + dx * dx);
            }
            best = std::sqrt(best);
            max_d = std::max(max_d, best);
            sum_d += best;
        }
        return std::make_pair(max_d, sum_d / static_cast<double>(from.size()));
    };
    const auto [max_pg, mean_pg] = directed(bp, bg);
    const auto [max_gp, mean_gp] = directed(bg, bp);
    const double hd = std::max(max_pg, max_gp);
    const double asd = 0.5 * (mean_pg + mean_gp);
    return std::make_pair(hd, asd);
}

SurfaceSummary dataset_surface_distances(const std::vector<LabelMap>& preds,
                                         const std::vector<LabelMap>& gts, int num_classes) {
    check_aligned(preds, gts);
    SurfaceSummary out;
    double hd_sum = 0.0, asd_sum = 0.0;
    for (size_t f = 0; f < preds.size(); ++f) {
        const int64_t h = preds[f].h, w = preds[f].w;
        for (int c = 1; c <= num_classes; ++c) {
            std::vector<uint8_t> pm(static_cast<size_t>(h * w), 0);
            std::vector<uint8_t> gm(static_cast<size_t>(h * w), 0);
            bool any_p = false, any_g = false;
            for (size_t i = 0; i < pm.size(); ++i) {
                pm[i] = preds[f].ids[i] == c;
                gm[i] = gts[f].ids[i] == c;
                any_p |= pm[i];
                any_g |= gm[i];
            }
            if (!any_p && !any_g) continue;  // class absent from the pair entirely
            const auto sd = surface_distances(pm, gm, h, w);
            if (!sd) {
                ++out.excluded_pairs;
                continue;
            }
            hd_sum += sd->first;
            asd_sum += sd->second;
            ++out.defined_pairs;
        }
    }
    if (out.defined_pairs > 0) {
        out.hd = hd_sum / static_cast<double>(out.defined_pairs);
        out.asd = asd_sum / static_cast<double>(out.defined_pairs);
    }
    return out;
}

}  // namespace lacoste::metrics
