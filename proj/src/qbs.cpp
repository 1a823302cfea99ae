#include "lacoste/qbs.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace lacoste::qbs {

void ModelConfig::validate() const {
    if (num_queries < 1 || num_classes < 1 || decoder_layers < 1)
        throw argument_error("ModelConfig: counts must be positive");
    if (embed_dim % 4 != 0 || embed_dim % heads != 0)
        throw argument_error("ModelConfig: embed_dim must divide by 4 and by heads");
    if (lambda_bce < 0 || lambda_dice < 0 || lambda_cls < 0 || no_object_weight < 0)
        throw argument_error("ModelConfig: loss weights must be nonnegative");
}

std::vector<uint8_t> downsample_valid(const std::vector<uint8_t>& valid, int64_t h, int64_t w,
                                      int stride, bool require_all) {
    if (static_cast<int64_t>(valid.size()) != h * w || h % stride != 0 || w % stride != 0)
        throw argument_error("downsample_valid: bad sizes");
    const int64_t oh = h / stride, ow = w / stride;
    std::vector<uint8_t> out(static_cast<size_t>(oh * ow), 0);
    for (int64_t oy = 0; oy < oh; ++oy)
        for (int64_t ox = 0; ox < ow; ++ox) {
            bool all = true, any = false;
            for (int dy = 0; dy < stride; ++dy)
                for (int dx = 0; dx < stride; ++dx) {
                    const bool v = valid[(oy * stride + dy) * w + ox * stride + dx] != 0;
                    all &= v;
                    any |= v;
                }
            out[static_cast<size_t>(oy * ow + ox)] = require_all ? all : any;
        }
    return out;
}

// ----------------------------------------------------------- assignment solver

MatchResult solve_assignment(const Tensor& cost) {
    if (cost.ndim() != 2) throw argument_error("solve_assignment: need 2-D cost");
    const int64_t rows = cost.dim(0), cols = cost.dim(1);
    if (rows > cols) throw data_error("solve_assignment: more rows than columns");
    const int64_t n = cols;  // pad with zero-cost dummy rows
    auto at = [&](int64_t i, int64_t j) { return i < rows ? cost.at2(i, j) : 0.0; };

    const double INF = std::numeric_limits<double>::infinity();
    std::vector<double> u(static_cast<size_t>(n) + 1, 0.0), v(static_cast<size_t>(n) + 1, 0.0);
    std::vector<int64_t> p(static_cast<size_t>(n) + 1, 0), way(static_cast<size_t>(n) + 1, 0);
    for (int64_t i = 1; i <= n; ++i) {
        p[0] = i;
        int64_t j0 = 0;
        std::vector<double> minv(static_cast<size_t>(n) + 1, INF);
        std::vector<char> used(static_cast<size_t>(n) + 1, 0);
        do {
            used[static_cast<size_t>(j0)] = 1;
            const int64_t i0 = p[static_cast<size_t>(j0)];
            int64_t j1 = 0;
            double delta = INF;
            for (int64_t j = 1; j <= n; ++j) {
                if (used[static_cast<size_t>(j)]) continue;
                const double cur =
                    at(i0 - 1, j - 1) - u[static_cast<size_t>(i0)] - v[static_cast<size_t>(j)];
                if (cur < minv[static_cast<size_t>(j)]) {
                    minv[static_cast<size_t>(j)] = cur;
                    way[static_cast<size_t>(j)] = j0;
                }
                if (minv[static_cast<size_t>(j)] < delta) {  // first minimum wins ties
                    delta = minv[static_cast<size_t>(j)];
                    j1 = j;
                }
            }
            for (int64_t j = 0; j <= n; ++j) {
                if (used[static_cast<size_t>(j)]) {
                    u[static_cast<size_t>(p[static_cast<size_t>(j)])] += delta;
                    v[static_cast<size_t>(j)] -= delta;
                } else {
                    minv[static_cast<size_t>(j)] -= delta;
                }
            }
            j0 = j1;
        } while (p[static_cast<size_t>(j0)] != 0);
        do {
            const int64_t j1 = way[static_cast<size_t>(j0)];
            p[static_cast<size_t>(j0)] = p[static_cast<size_t>(j1)];
            j0 = j1;
        } while (j0 != 0);
    }

    MatchResult res;
    res.gt_to_query.assign(static_cast<size_t>(rows), -1);
    for (int64_t j = 1; j <= n; ++j) {
        const int64_t i = p[static_cast<size_t>(j)];
        if (i >= 1 && i <= rows)
            res.gt_to_query[static_cast<size_t>(i - 1)] = static_cast<int>(j - 1);
    }
    for (int64_t k = 0; k < rows; ++k)
        res.total_cost += cost.at2(k, res.gt_to_query[static_cast<size_t>(k)]);
    return res;
}

namespace {

Tensor gt_mask_tensor(const GtInstance& inst) {
    Tensor t({static_cast<int64_t>(inst.mask.size())});
    for (size_t i = 0; i < inst.mask.size(); ++i) t[static_cast<int64_t>(i)] = inst.mask[i];
    return t;
}

}  // namespace

MatchResult hungarian_match(const Tensor& class_probs, const Tensor& mask_logits_full,
                            const GroundTruthSet& gt, const LossWeights& weights) {
    const int64_t n_q = class_probs.dim(0);
    const int64_t n_gt = static_cast<int64_t>(gt.size());
    if (n_gt > n_q) throw data_error("hungarian_match: more GT instances than queries");
    if (n_gt == 0) return {};
    const int64_t hw = mask_logits_full.numel() / n_q;
    if (hw != gt.h * gt.w) throw argument_error("hungarian_match: mask resolution mismatch");

    // Per-query precomputation: sigmoid sums and the label-independent BCE part.
    std::vector<double> sig(static_cast<size_t>(n_q * hw));
    std::vector<double> sig_sum(static_cast<size_t>(n_q), 0.0);
    std::vector<double> bce_base(static_cast<size_t>(n_q), 0.0);
    for (int64_t q = 0; q < n_q; ++q)
        for (int64_t p = 0; p < hw; ++p) {
            const double z = mask_logits_full[q * hw + p];
            const double s = 1.0 / (1.0 + std::exp(-z));
            sig[static_cast<size_t>(q * hw + p)] = s;
            sig_sum[static_cast<size_t>(q)] += s;
            bce_base[static_cast<size_t>(q)] +=
                std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z)));
        }

    Tensor cost({n_gt, n_q});
    for (int64_t k = 0; k < n_gt; ++k) {
        const GtInstance& inst = gt.instances[static_cast<size_t>(k)];
        const int cls_idx = inst.class_id - 1;
        double gt_area = 0.0;
        for (uint8_t m : inst.mask) gt_area += m;
        for (int64_t q = 0; q < n_q; ++q) {
            double z_on_gt = 0.0, inter = 0.0;
            for (int64_t p = 0; p < hw; ++p) {
                if (!inst.mask[static_cast<size_t>(p)]) continue;
                z_on_gt += mask_logits_full[q * hw + p];
                inter += sig[static_cast<size_t>(q * hw + p)];
            }
            const double bce =
                (bce_base[static_cast<size_t>(q)] - z_on_gt) / static_cast<double>(hw);
            const double dice = 1.0 - 2.0 * inter / (sig_sum[static_cast<size_t>(q)] + gt_area);
            const double cls = 1.0 - class_probs.at2(q, cls_idx);
            cost.at2(k, q) = weights.cls * cls + weights.bce * bce + weights.dice * dice;
        }
    }
    return solve_assignment(cost);
}

MatchResult hungarian_match(const PredictionSet& pred, const GroundTruthSet& gt,
                            const LossWeights& weights) {
    const int64_t n = pred.class_probs.dim(0);
    return hungarian_match(pred.class_probs, pred.mask_logits.reshaped({n, gt.h * gt.w}), gt,
                           weights);
}

BaselineLoss loss_baseline(const ad::Var& class_logits, const ad::Var& mask_logits_full,
                           const GroundTruthSet& gt, const MatchResult& match,
                           const LossWeights& weights) {
    const int64_t n_q = class_logits->val.dim(0);
    const int64_t n_cls = class_logits->val.dim(1);
    if (match.gt_to_query.size() != gt.size())
        throw argument_error("loss_baseline: match does not cover the GT set");

    std::vector<int> targets(static_cast<size_t>(n_q), static_cast<int>(n_cls - 1));
    std::vector<double> cw(static_cast<size_t>(n_q), weights.no_object);
    for (size_t k = 0; k < gt.size(); ++k) {
        const int q = match.gt_to_query[k];
        targets[static_cast<size_t>(q)] = gt.instances[k].class_id - 1;
        cw[static_cast<size_t>(q)] = 1.0;
    }
    BaselineLoss out;
    out.cls = ad::cross_entropy_rows(class_logits, targets, cw);
    if (!gt.empty()) {
        std::vector<ad::Var> bces, dices;
        for (size_t k = 0; k < gt.size(); ++k) {
            const int q = match.gt_to_query[k];
            ad::Var row = ad::reshape(ad::index_rows(mask_logits_full, {q}),
                                      {mask_logits_full->val.dim(1)});
            Tensor y = gt_mask_tensor(gt.instances[k]);
            bces.push_back(ad::bce_with_logits(row, y, true));
            dices.push_back(ad::dice_loss_with_logits(row, y));
        }
        out.bce = ad::add_all(bces);
        out.dice = ad::add_all(dices);
    } else {
        out.bce = ad::constant(Tensor::scalar(0.0));
        out.dice = ad::constant(Tensor::scalar(0.0));
    }
    out.total = ad::add_all({ad::affine(out.bce, weights.bce, 0.0),
                             ad::affine(out.dice, weights.dice, 0.0),
                             ad::affine(out.cls, weights.cls, 0.0)});
    return out;
}

geometry::DisparityField TrueDisparityProvider::estimate(const StereoFrame& frame, double bf) {
    if (frame.depth.h == 0) throw provider_error("TrueDisparityProvider: frame has no depth");
    geometry::DisparityField d(frame.depth.h, frame.depth.w);
    for (size_t i = 0; i < frame.depth.z.size(); ++i) {
        if (frame.depth.z[i] <= 0.0)
            throw provider_error("TrueDisparityProvider: nonpositive depth");
        d.d[i] = bf / frame.depth.z[i];
    }
    return d;
}

// ----------------------------------------------------------------- the model

QbsModel::QbsModel(const ModelConfig& cfg, nn::ParamStore& ps, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    const int64_t d = cfg_.embed_dim;
    queries_ = ps.create("qbs.queries", random_normal({cfg_.num_queries, d}, 0.0, 0.5, rng));
    conv1_ = nn::Conv2d(ps, "qbs.enc.conv1", 3, cfg_.enc_ch1, 3, 2, 1, rng);
    conv2_ = nn::Conv2d(ps, "qbs.enc.conv2", cfg_.enc_ch1, cfg_.enc_ch2, 3, 2, 1, rng);
    conv3_ = nn::Conv2d(ps, "qbs.enc.conv3", cfg_.enc_ch2, cfg_.enc_ch2, 3, 2, 1, rng);
    proj8_ = nn::Conv2d(ps, "qbs.enc.proj8", cfg_.enc_ch2, static_cast<int>(d), 1, 1, 0, rng);
    lat4_ = nn::Conv2d(ps, "qbs.enc.lat4", cfg_.enc_ch2, static_cast<int>(d), 1, 1, 0, rng);
    fuse4_ =
        nn::Conv2d(ps, "qbs.enc.fuse4", static_cast<int>(d), static_cast<int>(d), 3, 1, 1, rng);
    // bias-free so masked-out or zeroed memory reduces attention to its
    // output-projection bias exactly
    mem_conv_ = nn::Conv2d(ps, "qbs.dec.mem", static_cast<int>(d), static_cast<int>(d), 3, 2, 1,
                           rng, false);
    layers_.resize(static_cast<size_t>(cfg_.decoder_layers));
    for (int l = 0; l < cfg_.decoder_layers; ++l) {
        const std::string base = "qbs.dec.l" + std::to_string(l);
        auto& layer = layers_[static_cast<size_t>(l)];
        layer.cross = nn::MultiheadAttention(ps, base + ".cross", d, cfg_.heads, rng);
        layer.self = nn::MultiheadAttention(ps, base + ".self", d, cfg_.heads, rng);
        layer.ffn = nn::FeedForward(ps, base + ".ffn", d, 4 * d, rng);
        layer.n1 = nn::LayerNorm(ps, base + ".n1", d);
        layer.n2 = nn::LayerNorm(ps, base + ".n2", d);
        layer.n3 = nn::LayerNorm(ps, base + ".n3", d);
    }
    class_head_ = nn::Linear(ps, "qbs.head.class", d, cfg_.num_classes + 1, false, rng);
    mask_mlp1_ = nn::Linear(ps, "qbs.head.mask1", d, d, true, rng);
    mask_mlp2_ = nn::Linear(ps, "qbs.head.mask2", d, d, true, rng);
    mask_bias_ = ps.create("qbs.head.mask_bias", Tensor({1}));
}

LossWeights QbsModel::loss_weights() const {
    return {cfg_.lambda_bce, cfg_.lambda_dice, cfg_.lambda_cls, cfg_.no_object_weight};
}

QbsModel::Encoded QbsModel::encode_image(const Tensor& image,
                                         const std::vector<uint8_t>* image_valid) const {
    if (image.ndim() != 3 || image.dim(0) != 3)
        throw argument_error("encode_image: expect [3,H,W]");
    const int64_t h = image.dim(1), w = image.dim(2);
    if (h % ModelConfig::total_stride != 0 || w % ModelConfig::total_stride != 0)
        throw argument_error("encode_image: dimensions must divide the total stride");

    ad::Var x = ad::constant(image);
    ad::Var x1 = ad::gelu(conv1_(x));
    ad::Var x2 = ad::gelu(conv2_(x1));
    ad::Var s8 = ad::gelu(conv3_(x2));
    ad::Var up = ad::upsample_bilinear(proj8_(s8), h / 4, w / 4);
    ad::Var f4 = ad::gelu(fuse4_(ad::add(up, lat4_(x2))));

    Encoded enc;
    enc.f4 = f4;
    enc.s8 = s8;
    enc.img_h = h;
    enc.img_w = w;
    std::vector<uint8_t> all(static_cast<size_t>(h * w), 1);
    const std::vector<uint8_t>& base = image_valid ? *image_valid : all;
    enc.valid4 = downsample_valid(base, h, w, 4, true);
    enc.valid8 = downsample_valid(base, h, w, 8, false);
    return enc;
}

QbsModel::Decoded QbsModel::transformer_decode(const ad::Var& f4,
                                               const std::vector<uint8_t>& mem_keep,
                                               const ad::Var& initial_queries) const {
    if (initial_queries->val.dim(0) != cfg_.num_queries ||
        initial_queries->val.dim(1) != cfg_.embed_dim)
        throw argument_error("transformer_decode: initial queries must be [N,D]");
    const int64_t d = cfg_.embed_dim;
    const int64_t h8 = f4->val.dim(1) / 2, w8 = f4->val.dim(2) / 2;
    ad::Var mem = mem_conv_(f4);  // [D, h8, w8]
    ad::Var tokens = ad::transpose(ad::reshape(mem, {d, h8 * w8}));
    ad::Var keys = ad::add(tokens, ad::constant(nn::positional_encoding_2d(h8, w8, d)));
    if (static_cast<int64_t>(mem_keep.size()) != h8 * w8)
        throw argument_error("transformer_decode: memory mask size mismatch");

    Decoded out;
    ad::Var x = initial_queries;
    for (const auto& layer : layers_) {
        x = layer.n1(ad::add(x, layer.cross(x, keys, tokens, &mem_keep)));
        x = layer.n2(ad::add(x, layer.self(x, x, x)));
        x = layer.n3(ad::add(x, layer.ffn(x)));
        out.layers.push_back(x);
    }
    return out;
}

std::pair<ad::Var, ad::Var> QbsModel::predict_heads(const ad::Var& embeddings,
                                                    const ad::Var& f4) const {
    ad::Var cls = class_head_(embeddings);
    ad::Var embed = mask_mlp2_(ad::gelu(mask_mlp1_(embeddings)));
    const int64_t h4 = f4->val.dim(1), w4 = f4->val.dim(2);
    ad::Var flat = ad::reshape(f4, {cfg_.embed_dim, h4 * w4});
    ad::Var mask = ad::add_scalar_var(ad::matmul(embed, flat), mask_bias_);
    return {cls, ad::reshape(mask, {embeddings->val.dim(0), h4, w4})};
}

ad::Var QbsModel::dfp_fuse(const ad::Var& f_target, const ad::Var& f_source,
                           const geometry::DisparityField& disp,
                           const std::vector<uint8_t>& source_valid4, bool negate) const {
    geometry::DisparityField disp4 = geometry::downsample_disparity(disp, 4);
    if (disp4.h != f_target->val.dim(1) || disp4.w != f_target->val.dim(2))
        throw argument_error("dfp_fuse: disparity does not match feature resolution");
    const ad::WarpPlan plan = geometry::make_warp_plan(disp4, source_valid4, negate);
    ad::Var warped = ad::warp_with_plan(f_source, plan);
    ad::Var w = ad::cosine_weight(f_target, warped, plan.valid);
    // invalid pixels carry w == 0 and warped == 0, so the sum is the identity there
    return ad::add(f_target, ad::mul_spatial(warped, w));
}

ad::Var QbsModel::ViewOutput::class_probs(int layer) const {
    const size_t l = layer < 0 ? class_logits.size() - 1 : static_cast<size_t>(layer);
    return ad::softmax_rows(class_logits.at(l));
}

ad::Var QbsModel::ViewOutput::mask_logits_full(int layer) const {
    const size_t l = layer < 0 ? mask_logits4.size() - 1 : static_cast<size_t>(layer);
    const ad::Var& m4 = mask_logits4.at(l);
    ad::Var up = ad::upsample_bilinear(m4, img_h, img_w);
    return ad::reshape(up, {m4->val.dim(0), img_h * img_w});
}

PredictionSet QbsModel::ViewOutput::to_prediction_set() const {
    PredictionSet ps;
    ps.class_probs = class_probs()->val;
    ps.embeddings = embeddings.back()->val;
    for (const auto& e : embeddings) ps.layer_embeddings.push_back(e->val);
    const int64_t n = mask_logits4.back()->val.dim(0);
    ps.mask_logits = mask_logits_full()->val.reshaped({n, img_h, img_w});
    ps.img_h = img_h;
    ps.img_w = img_w;
    return ps;
}

QbsModel::ViewOutput QbsModel::run_view(const ad::Var& f4_fused,
                                        const std::vector<uint8_t>& mem_keep,
                                        const ad::Var& initial_queries, int64_t img_h,
                                        int64_t img_w) const {
    Decoded dec = transformer_decode(f4_fused, mem_keep, initial_queries);
    ViewOutput out;
    out.img_h = img_h;
    out.img_w = img_w;
    for (const auto& e : dec.layers) {
        auto [cls, mask4] = predict_heads(e, f4_fused);
        out.embeddings.push_back(e);
        out.class_logits.push_back(cls);
        out.mask_logits4.push_back(mask4);
    }
    return out;
}

QbsModel::ViewOutput QbsModel::forward(const ImageU8& image,
                                       const ad::Var& initial_queries) const {
    Encoded enc = encode_image(geometry::image_to_features(image).data);
    return run_view(enc.f4, enc.valid8, initial_queries, enc.img_h, enc.img_w);
}

QbsModel::BdfpOutput QbsModel::forward_bdfp(const ImageU8& left, const ImageU8& right,
                                            const std::vector<uint8_t>* right_valid,
                                            const geometry::DisparityField& disparity,
                                            const ad::Var& initial_queries, bool use_dfp,
                                            bool decode_right) const {
    if (left.h != right.h || left.w != right.w)
        throw argument_error("forward_bdfp: left/right size mismatch");
    if (disparity.h != left.h || disparity.w != left.w)
        throw argument_error("forward_bdfp: disparity size mismatch");
    Encoded el = encode_image(geometry::image_to_features(left).data);
    Encoded er = encode_image(geometry::image_to_features(right).data, right_valid);

    ad::Var fl = el.f4, fr = er.f4;
    if (use_dfp) {
        fl = dfp_fuse(el.f4, er.f4, disparity, er.valid4, false);
        fr = dfp_fuse(er.f4, el.f4, disparity, el.valid4, true);
    }
    BdfpOutput out;
    out.left = run_view(fl, el.valid8, initial_queries, el.img_h, el.img_w);
    if (decode_right)
        out.right = run_view(fr, er.valid8, initial_queries, er.img_h, er.img_w);
    return out;
}

QbsModel::BdfpOutput QbsModel::forward_bdfp(const StereoFrame& frame, double bf,
                                            DisparityProvider& provider,
                                            const ad::Var& initial_queries, bool use_dfp) const {
    if (!frame.right) throw argument_error("forward_bdfp: frame has no right view");
    geometry::DisparityField d;
    try {
        d = provider.estimate(frame, bf);
    } catch (const provider_error&) {
        throw;
    } catch (const std::exception& e) {
        throw provider_error(std::string("disparity provider failed: ") + e.what());
    }
    return forward_bdfp(frame.left, *frame.right, nullptr, d, initial_queries, use_dfp);
}

BaselineLoss QbsModel::loss_deep(const ViewOutput& view, const GroundTruthSet& gt) const {
    const LossWeights w = loss_weights();
    std::vector<ad::Var> totals, clss, bces, dices;
    for (size_t l = 0; l < view.class_logits.size(); ++l) {
        ad::Var mask_full = view.mask_logits_full(static_cast<int>(l));
        ad::Var probs = view.class_probs(static_cast<int>(l));
        MatchResult match = hungarian_match(probs->val, mask_full->val, gt, w);
        BaselineLoss part = loss_baseline(view.class_logits[l], mask_full, gt, match, w);
        totals.push_back(part.total);
        clss.push_back(part.cls);
        bces.push_back(part.bce);
        dices.push_back(part.dice);
    }
    const double inv = 1.0 / static_cast<double>(totals.size());
    BaselineLoss out;
    out.total = ad::affine(ad::add_all(totals), inv, 0.0);
    out.cls = ad::affine(ad::add_all(clss), inv, 0.0);
    out.bce = ad::affine(ad::add_all(bces), inv, 0.0);
    out.dice = ad::affine(ad::add_all(dices), inv, 0.0);
    return out;
}

}  // namespace lacoste::qbs
