#include "lacoste/geometry.hpp"

#include <algorithm>
#include <cmath>

namespace lacoste::geometry {

double DepthField::z_max() const {
    double m = 0.0;
    bool any = false;
    for (size_t i = 0; i < z.size(); ++i)
        if (valid[i]) {
            m = any ? std::max(m, z[i]) : z[i];
            any = true;
        }
    if (!any) throw data_error("DepthField::z_max: no valid pixels");
    return m;
}

ad::WarpPlan make_warp_plan(const DisparityField& disp, const std::vector<uint8_t>& src_valid,
                            bool negate) {
    if (static_cast<int64_t>(src_valid.size()) != disp.h * disp.w)
        throw argument_error("make_warp_plan: mask size mismatch");
    ad::WarpPlan plan;
    plan.h = disp.h;
    plan.w = disp.w;
    const int64_t n = disp.h * disp.w;
    plan.idx0.assign(n, 0);
    plan.idx1.assign(n, 0);
    plan.w0.assign(n, 0.0);
    plan.w1.assign(n, 0.0);
    plan.valid.assign(n, 0);
    for (int64_t y = 0; y < disp.h; ++y)
        for (int64_t x = 0; x < disp.w; ++x) {
            const int64_t p = y * disp.w + x;
            if (!disp.valid[p]) continue;
            const double sx =
                static_cast<double>(x) + (negate ? disp.d[p] : -disp.d[p]);
            const int64_t x0 = static_cast<int64_t>(std::floor(sx));
            const double f = sx - static_cast<double>(x0);
            const int64_t x1 = (f > 0.0) ? x0 + 1 : x0;  // integral sample touches one pixel
            if (x0 < 0 || x1 >= disp.w) continue;
            if (!src_valid[y * disp.w + x0] || !src_valid[y * disp.w + x1]) continue;
            plan.idx0[p] = y * disp.w + x0;
            plan.idx1[p] = y * disp.w + x1;
            plan.w0[p] = 1.0 - f;
            plan.w1[p] = f;
            plan.valid[p] = 1;
        }
    return plan;
}

FeatureMap backward_warp(const FeatureMap& source, const DisparityField& disparity) {
    if (source.h() != disparity.h || source.w() != disparity.w)
        throw argument_error("backward_warp: shape mismatch");
    const ad::WarpPlan plan = make_warp_plan(disparity, source.valid);
    FeatureMap out(source.channels(), source.h(), source.w());
    out.valid = plan.valid;
    const int64_t hw = source.h() * source.w();
    for (int64_t p = 0; p < hw; ++p) {
        if (!plan.valid[p]) continue;
        for (int64_t ch = 0; ch < source.channels(); ++ch)
            out.data[ch * hw + p] = plan.w0[p] * source.data[ch * hw + plan.idx0[p]] +
                                    plan.w1[p] * source.data[ch * hw + plan.idx1[p]];
    }
    return out;
}

Tensor cosine_fusion_weight(const FeatureMap& a, const FeatureMap& b, double eps) {
    if (!a.data.same_shape(b.data)) throw argument_error("cosine_fusion_weight: shape mismatch");
    const int64_t c = a.channels(), hw = a.h() * a.w();
    Tensor w({a.h(), a.w()});
    for (int64_t p = 0; p < hw; ++p) {
        if (!b.valid[p]) continue;
        double dot = 0.0, na = 0.0, nb = 0.0;
        for (int64_t ch = 0; ch < c; ++ch) {
            const double av = a.data[ch * hw + p], bv = b.data[ch * hw + p];
            dot += av * bv;
            na += av * av;
            nb += bv * bv;
        }
        na = std::sqrt(na);
        nb = std::sqrt(nb);
        if (na < eps || nb < eps) continue;
        w[p] = dot / (na * nb + eps);
    }
    return w;
}

FeatureMap fuse_dfp(const FeatureMap& left, const FeatureMap& warped, const Tensor& weight) {
    if (!left.data.same_shape(warped.data) || weight.dim(0) != left.h() ||
        weight.dim(1) != left.w())
        throw argument_error("fuse_dfp: shape mismatch");
    FeatureMap out = left;
    const int64_t c = left.channels(), hw = left.h() * left.w();
    for (int64_t p = 0; p < hw; ++p) {
        if (!warped.valid[p]) continue;
        for (int64_t ch = 0; ch < c; ++ch)
            out.data[ch * hw + p] += weight[p] * warped.data[ch * hw + p];
    }
    return out;
}

DisparityField disparity_from_depth(const DepthField& depth, double d_s) {
    if (d_s < 0.0) throw argument_error("disparity_from_depth: d_s must be >= 0");
    DisparityField out(depth.h, depth.w);
    out.valid = depth.valid;
    const double zmax = depth.z_max();
    for (size_t i = 0; i < depth.z.size(); ++i) {
        if (!depth.valid[i]) continue;
        if (depth.z[i] <= 0.0)
            throw data_error("disparity_from_depth: nonpositive depth on a valid pixel");
        out.d[i] = d_s * zmax / depth.z[i];
    }
    return out;
}

std::pair<DisparityField, std::vector<uint8_t>> sharpen_disparity(const DisparityField& disparity,
                                                                  const PseudoStereoConfig& cfg) {
    const int64_t h = disparity.h, w = disparity.w;
    std::vector<uint8_t> flying(static_cast<size_t>(h * w), 0);
    DisparityField out = disparity;
    auto sample = [&](int64_t y, int64_t x) {  // replicate borders
        y = std::clamp<int64_t>(y, 0, h - 1);
        x = std::clamp<int64_t>(x, 0, w - 1);
        return disparity.d[static_cast<size_t>(y * w + x)];
    };
    for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x) {
            const int64_t p = y * w + x;
            if (!disparity.valid[p]) continue;
            const double gx = (sample(y - 1, x + 1) + 2.0 * sample(y, x + 1) + sample(y + 1, x + 1)) -
                              (sample(y - 1, x - 1) + 2.0 * sample(y, x - 1) + sample(y + 1, x - 1));
            const double gy = (sample(y + 1, x - 1) + 2.0 * sample(y + 1, x) + sample(y + 1, x + 1)) -
                              (sample(y - 1, x - 1) + 2.0 * sample(y - 1, x) + sample(y - 1, x + 1));
            if (std::sqrt(gx * gx + gy * gy) > cfg.sobel_threshold) {
                flying[p] = 1;
                out.valid[p] = 0;
            }
        }
    return {std::move(out), std::move(flying)};
}

std::pair<FeatureMap, std::vector<uint8_t>> forward_warp(const FeatureMap& image,
                                                         const DisparityField& disparity) {
    if (image.h() != disparity.h || image.w() != disparity.w)
        throw argument_error("forward_warp: shape mismatch");
    const int64_t c = image.channels(), h = image.h(), w = image.w(), hw = h * w;
    FeatureMap out(c, h, w);
    std::vector<uint8_t> covered(static_cast<size_t>(hw), 0);
    std::vector<double> depth_rank(static_cast<size_t>(hw), -1.0);  // larger disparity wins
    for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x) {
            const int64_t p = y * w + x;
            if (!image.valid[p] || !disparity.valid[p]) continue;
            const double d = disparity.d[p];
            const int64_t tx = std::llround(static_cast<double>(x) - d);
            if (tx < 0 || tx >= w) continue;
            const int64_t tp = y * w + tx;
            if (covered[tp] && depth_rank[tp] >= d) continue;
            covered[tp] = 1;
            depth_rank[tp] = d;
            for (int64_t ch = 0; ch < c; ++ch) out.data[ch * hw + tp] = image.data[ch * hw + p];
        }
    out.valid = covered;
    return {std::move(out), std::move(covered)};
}

FeatureMap fill_holes(const FeatureMap& image, const std::vector<uint8_t>& valid,
                      const FeatureMap* donor, FillMode mode) {
    if (static_cast<int64_t>(valid.size()) != image.h() * image.w())
        throw argument_error("fill_holes: mask size mismatch");
    if (mode == FillMode::temporal_donor) {
        if (!donor) throw argument_error("fill_holes: temporal_donor mode needs a donor");
        if (!donor->data.same_shape(image.data))
            throw argument_error("fill_holes: donor shape mismatch");
    }
    FeatureMap out = image;
    const int64_t c = image.channels(), hw = image.h() * image.w();
    for (int64_t p = 0; p < hw; ++p) {
        if (valid[p]) {
            out.valid[p] = 1;
            continue;
        }
        if (mode == FillMode::temporal_donor) {
            for (int64_t ch = 0; ch < c; ++ch) out.data[ch * hw + p] = donor->data[ch * hw + p];
            out.valid[p] = 1;
        } else {
            for (int64_t ch = 0; ch < c; ++ch) out.data[ch * hw + p] = 0.0;
            out.valid[p] = 0;
        }
    }
    return out;
}

std::pair<FeatureMap, std::vector<uint8_t>> synth_right_view(const FeatureMap& left,
                                                             const DepthField& depth, double d_s,
                                                             const FeatureMap* donor,
                                                             const PseudoStereoConfig& cfg) {
    DisparityField disp = disparity_from_depth(depth, d_s);
    auto [sharp, flying] = sharpen_disparity(disp, cfg);
    auto [warped, covered] = forward_warp(left, sharp);
    FeatureMap filled = fill_holes(warped, covered, donor, cfg.fill_mode);
    std::vector<uint8_t> out_valid = filled.valid;
    return {std::move(filled), std::move(out_valid)};
}

DisparityField downsample_disparity(const DisparityField& disp, int stride) {
    if (stride <= 0 || disp.h % stride != 0 || disp.w % stride != 0)
        throw argument_error("downsample_disparity: size not divisible by stride");
    const int64_t oh = disp.h / stride, ow = disp.w / stride;
    DisparityField out(oh, ow);
    for (int64_t oy = 0; oy < oh; ++oy)
        for (int64_t ox = 0; ox < ow; ++ox) {
            double sum = 0.0;
            int64_t cnt = 0;
            for (int dy = 0; dy < stride; ++dy)
                for (int dx = 0; dx < stride; ++dx) {
                    const int64_t p = (oy * stride + dy) * disp.w + ox * stride + dx;
                    if (!disp.valid[p]) continue;
                    sum += disp.d[p];
                    ++cnt;
                }
            const int64_t op = oy * ow + ox;
            if (cnt == 0) {
                out.valid[op] = 0;
            } else {
                out.d[op] = sum / static_cast<double>(cnt) / static_cast<double>(stride);
            }
        }
    return out;
}

FeatureMap image_to_features(const ImageU8& img) {
    FeatureMap f(img.c, img.h, img.w);
    const int64_t hw = img.h * img.w;
    for (int64_t y = 0; y < img.h; ++y)
        for (int64_t x = 0; x < img.w; ++x)
            for (int64_t ch = 0; ch < img.c; ++ch)
                f.data[ch * hw + y * img.w + x] =
                    static_cast<double>(img.at(y, x, ch)) / 255.0;
    return f;
}

ImageU8 features_to_image(const FeatureMap& f) {
    ImageU8 img(f.h(), f.w(), f.channels());
    const int64_t hw = f.h() * f.w();
    for (int64_t y = 0; y < f.h(); ++y)
        for (int64_t x = 0; x < f.w(); ++x)
            for (int64_t ch = 0; ch < f.channels(); ++ch) {
                const double v = std::clamp(f.data[ch * hw + y * f.w() + x], 0.0, 1.0);
                img.at(y, x, ch) = static_cast<uint8_t>(std::lround(v * 255.0));
            }
    return img;
}

}  // namespace lacoste::geometry
