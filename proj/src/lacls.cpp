#include "lacoste/lacls.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>

#include "lacoste/geometry.hpp"
#include "lacoste/optim.hpp"

namespace lacoste::lacls {

std::optional<Tensor> crop_and_mask(const Tensor& image, const std::vector<uint8_t>& mask,
                                    const PatchSpec& spec) {
    spec.validate();
    if (image.ndim() != 3) throw argument_error("crop_and_mask: expect [C,H,W]");
    const int64_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
    if (static_cast<int64_t>(mask.size()) != h * w)
        throw argument_error("crop_and_mask: mask size mismatch");

    int64_t x0 = w, x1 = -1, y0 = h, y1 = -1;
    int64_t area = 0;
    for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x)
            if (mask[static_cast<size_t>(y * w + x)]) {
                x0 = std::min(x0, x);
                x1 = std::max(x1, x);
                y0 = std::min(y0, y);
                y1 = std::max(y1, y);
                ++area;
            }
    if (area == 0) return std::nullopt;

    // expand the tight box around its center, clip to the image
    const double cx = 0.5 * static_cast<double>(x0 + x1 + 1);
    const double cy = 0.5 * static_cast<double>(y0 + y1 + 1);
    const double hx = 0.5 * static_cast<double>(x1 - x0 + 1) * spec.expansion;
    const double hy = 0.5 * static_cast<double>(y1 - y0 + 1) * spec.expansion;
    const int64_t bx0 = std::max<int64_t>(0, static_cast<int64_t>(std::floor(cx - hx)));
    const int64_t bx1 = std::min<int64_t>(w, static_cast<int64_t>(std::ceil(cx + hx)));
    const int64_t by0 = std::max<int64_t>(0, static_cast<int64_t>(std::floor(cy - hy)));
    const int64_t by1 = std::min<int64_t>(h, static_cast<int64_t>(std::ceil(cy + hy)));

    std::vector<double> fill(static_cast<size_t>(c), 0.0);
    if (spec.fill == PatchSpec::Fill::mean) {
        for (int64_t ch = 0; ch < c; ++ch) {
            double s = 0.0;
            for (int64_t p = 0; p < h * w; ++p)
                if (mask[static_cast<size_t>(p)]) s += image[ch * h * w + p];
            fill[static_cast<size_t>(ch)] = s / static_cast<double>(area);
        }
    }

    const int64_t bh = by1 - by0, bw = bx1 - bx0;
    Tensor crop({c, bh, bw});
    for (int64_t ch = 0; ch < c; ++ch)
        for (int64_t y = 0; y < bh; ++y)
            for (int64_t x = 0; x < bw; ++x) {
                const int64_t sy = by0 + y, sx = bx0 + x;
                const bool in = mask[static_cast<size_t>(sy * w + sx)] != 0;
                crop.at3(ch, y, x) =
                    in ? image[ch * h * w + sy * w + sx] : fill[static_cast<size_t>(ch)];
            }
    return ad::upsample_bilinear(ad::constant(std::move(crop)), spec.out_h, spec.out_w)->val;
}

LaclsModel::LaclsModel(const ClassifierConfig& cfg, int num_classes, const PatchSpec& spec,
                       nn::ParamStore& ps, Rng& rng)
    : cfg_(cfg), num_classes_(num_classes), spec_(spec) {
    cfg_.validate();
    spec_.validate();
    if (spec_.out_h % cfg_.grid != 0 || spec_.out_w % cfg_.grid != 0)
        throw argument_error("LaclsModel: patch size must divide the token grid");
    const int64_t d = cfg_.dim;
    const int64_t cell = (spec_.out_h / cfg_.grid) * (spec_.out_w / cfg_.grid) * 3;
    patch_embed_ = nn::Linear(ps, "lacls.embed", cell, d, true, rng);
    pos_embed_ = ps.create("lacls.pos",
                           random_normal({static_cast<int64_t>(cfg_.grid) * cfg_.grid, d}, 0.0,
                                         0.02, rng));
    cls_token_ = ps.create("lacls.cls_token", random_normal({1, d}, 0.0, 0.5, rng));
    layers_.resize(static_cast<size_t>(cfg_.layers));
    for (int l = 0; l < cfg_.layers; ++l) {
        const std::string base = "lacls.enc.l" + std::to_string(l);
        auto& layer = layers_[static_cast<size_t>(l)];
        layer.attn = nn::MultiheadAttention(ps, base + ".attn", d, cfg_.heads, rng);
        layer.ffn = nn::FeedForward(ps, base + ".ffn", d, 4 * d, rng);
        layer.n1 = nn::LayerNorm(ps, base + ".n1", d);
        layer.n2 = nn::LayerNorm(ps, base + ".n2", d);
    }
    head_ = nn::Linear(ps, "lacls.head", d, num_classes + 1, true, rng);
}

LaclsModel::Output LaclsModel::classify(const Tensor& patch) const {
    if (patch.ndim() != 3 || patch.dim(0) != 3 || patch.dim(1) != spec_.out_h ||
        patch.dim(2) != spec_.out_w)
        throw argument_error("classify_patch: patch must match the spec size");
    const int64_t g = cfg_.grid;
    const int64_t ph = spec_.out_h / g, pw = spec_.out_w / g;
    Tensor tokens({g * g, ph * pw * 3});
    for (int64_t gy = 0; gy < g; ++gy)
        for (int64_t gx = 0; gx < g; ++gx) {
            int64_t col = 0;
            for (int64_t ch = 0; ch < 3; ++ch)
                for (int64_t y = 0; y < ph; ++y)
                    for (int64_t x = 0; x < pw; ++x)
                        tokens.at2(gy * g + gx, col++) =
                            patch.at3(ch, gy * ph + y, gx * pw + x);
        }
    ad::Var x = patch_embed_(ad::constant(std::move(tokens)));
    x = ad::add(x, pos_embed_);
    x = ad::concat_rows({cls_token_, x});
    for (const auto& layer : layers_) {
        x = layer.n1(ad::add(x, layer.attn(x, x, x)));
        x = layer.n2(ad::add(x, layer.ffn(x)));
    }
    Output out;
    out.embedding = ad::slice_rows(x, 0, 1);
    out.logits = head_(out.embedding);
    return out;
}

Tensor LaclsModel::class_probs(const Tensor& patch) const {
    return ad::softmax_rows(classify(patch).logits)->val;
}

TrainStats train_lacls_offline(const synthdata::DatasetIndex& data, LaclsModel& model,
                               nn::ParamStore& ps, const TrainOptions& opt) {
    struct Sample {
        std::vector<uint8_t> patch;  // quantized, 3 x out_h x out_w
        int class_id;
    };
    std::vector<Sample> samples;
    const PatchSpec& spec = model.patch_spec();
    const int64_t patch_len = 3 * spec.out_h * spec.out_w;

    for (const auto& clip_id : data.clip_ids) {
        StereoClip clip = synthdata::load_clip(data, clip_id);
        for (int64_t t = 0; t < clip.length(); t += std::max(1, opt.frame_stride)) {
            const StereoFrame& fr = clip.frames[static_cast<size_t>(t)];
            Tensor img = geometry::image_to_features(fr.left).data;
            for (const GtInstance& inst : fr.gt.instances) {
                auto patch = crop_and_mask(img, inst.mask, spec);
                if (!patch) continue;
                Sample s;
                s.class_id = inst.class_id;
                s.patch.resize(static_cast<size_t>(patch_len));
                for (int64_t i = 0; i < patch_len; ++i)
                    s.patch[static_cast<size_t>(i)] = static_cast<uint8_t>(
                        std::lround(std::clamp((*patch)[i], 0.0, 1.0) * 255.0));
                samples.push_back(std::move(s));
                if (opt.max_samples > 0 &&
                    static_cast<int64_t>(samples.size()) >= opt.max_samples)
                    goto collected;
            }
        }
    }
collected:
    if (samples.empty()) throw data_error("train_lacls_offline: dataset has no instances");

    Rng rng(opt.seed);
    optim::AdamW adam(opt.lr, 0.9, 0.999, 1e-8, opt.weight_decay);
    const int64_t n = static_cast<int64_t>(samples.size());
    std::vector<int64_t> order(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;

    const int64_t steps_per_epoch = (n + opt.batch - 1) / opt.batch;
    const int64_t total_steps = steps_per_epoch * opt.epochs;
    TrainStats stats;
    stats.samples = n;
    int64_t step = 0;
    auto unpack = [&](const Sample& s) {
        Tensor p({3, spec.out_h, spec.out_w});
        for (int64_t i = 0; i < patch_len; ++i)
            p[i] = static_cast<double>(s.patch[static_cast<size_t>(i)]) / 255.0;
        return p;
    };
    for (int epoch = 0; epoch < opt.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        for (int64_t b = 0; b < n; b += opt.batch, ++step) {
            adam.set_lr(optim::poly_lr(opt.lr, step, total_steps));
            optim::GradByName grads;
            double batch_loss = 0.0;
            const int64_t take = std::min<int64_t>(opt.batch, n - b);
            for (int64_t k = 0; k < take; ++k) {
                const Sample& s = samples[static_cast<size_t>(order[static_cast<size_t>(b + k)])];
                auto out = model.classify(unpack(s));
                ad::Var loss = ad::affine(
                    ad::cross_entropy_rows(out.logits, {s.class_id - 1}, {1.0}),
                    1.0 / static_cast<double>(take), 0.0);
                batch_loss += loss->val[0];
                optim::accumulate_grads(ps, ad::backward(loss), grads);
            }
            adam.step(ps, grads);
            stats.final_loss = batch_loss;
            if (opt.verbose && step % 50 == 0)
                std::cout << "[lacls] step " << step << "/" << total_steps << " loss "
                          << batch_loss << "\n";
        }
    }

    int64_t correct = 0;
    for (const Sample& s : samples) {
        Tensor probs = model.class_probs(unpack(s));
        int64_t arg = 0;
        for (int64_t j = 1; j < probs.dim(1); ++j)
            if (probs.at2(0, j) > probs.at2(0, arg)) arg = j;
        correct += arg == s.class_id - 1;
    }
    stats.train_accuracy = static_cast<double>(correct) / static_cast<double>(n);
    return stats;
}

}  // namespace lacoste::lacls
