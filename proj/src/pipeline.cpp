#include "lacoste/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <map>

#include "lacoste/checkpoint.hpp"
#include "lacoste/config.hpp"

namespace lacoste::pipeline {

namespace {

uint64_t mix64(uint64_t a, uint64_t b) {
    uint64_t x = a + 0x9e3779b97f4a7c15ULL * (b + 1);
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

int64_t argmax_row(const Tensor& m, int64_t row) {
    int64_t best = 0;
    for (int64_t j = 1; j < m.dim(1); ++j)
        if (m.at2(row, j) > m.at2(row, best)) best = j;
    return best;
}

Tensor row_of(const Tensor& m, int64_t row) {
    Tensor out({1, m.dim(1)});
    for (int64_t j = 0; j < m.dim(1); ++j) out.at2(0, j) = m.at2(row, j);
    return out;
}

Tensor upsample_mask_logits(const Tensor& mask4, int64_t h, int64_t w) {
    return ad::upsample_bilinear(ad::constant(mask4), h, w)->val;
}

}  // namespace

void SystemConfig::validate() const {
    model.validate();
    set_classifier.validate();
    lacls_model.validate();
    patch.validate();
    ensemble.validate();
    if (clip_len < 1 || delta_t_max < 1 || top_k < 1 || batch < 1)
        throw argument_error("SystemConfig: counts must be positive");
    if (mask_threshold <= 0.0 || mask_threshold >= 1.0)
        throw argument_error("SystemConfig: mask threshold in (0,1)");
    if (pseudo.d_min <= 0 || pseudo.d_max < pseudo.d_min)
        throw argument_error("SystemConfig: pseudo disparity range invalid");
}

System::System(const SystemConfig& cfg, uint64_t init_seed) : cfg_(cfg) {
    cfg_.set_classifier.token_dim = cfg_.model.embed_dim;  // tracklet tokens live in query space
    cfg_.validate();
    Rng rng(init_seed);
    qbs_ = std::make_unique<qbs::QbsModel>(cfg_.model, params_, rng);
    set_ = std::make_unique<stscls::SetClassifier>(cfg_.set_classifier, cfg_.model.embed_dim,
                                                   cfg_.model.num_classes, params_, rng);
    lacls_ = std::make_unique<lacls::LaclsModel>(cfg_.lacls_model, cfg_.model.num_classes,
                                                 cfg_.patch, params_, rng);
}

void System::save(const std::string& dir, bool include_lacls) const {
    const std::string echo = config_to_json(cfg_);
    checkpoint::save_component(dir, "qbs", params_, echo);
    checkpoint::save_component(dir, "stscls", params_, "{}");
    if (include_lacls) checkpoint::save_component(dir, "lacls", params_, "{}");
}

void System::save_lacls(const std::string& dir) const {
    checkpoint::save_component(dir, "lacls", params_, "{}");
}

void System::load(const std::string& dir) {
    checkpoint::load_component(dir, "qbs", params_);
    const bool need_stscls = cfg_.use_stscls && cfg_.ensemble.alpha_s > 0;
    const bool need_lacls = cfg_.use_lacls && cfg_.ensemble.alpha_a > 0;
    if (need_stscls) {
        if (!checkpoint::has_component(dir, "stscls"))
            throw config_error("checkpoint misses component 'stscls' required by the ensemble");
        checkpoint::load_component(dir, "stscls", params_);
    } else if (checkpoint::has_component(dir, "stscls")) {
        checkpoint::load_component(dir, "stscls", params_);
    }
    if (need_lacls) {
        if (!checkpoint::has_component(dir, "lacls"))
            throw config_error("checkpoint misses component 'lacls' required by the ensemble");
        checkpoint::load_component(dir, "lacls", params_);
    } else if (checkpoint::has_component(dir, "lacls")) {
        checkpoint::load_component(dir, "lacls", params_);
    }
}

// ---------------------------------------------------------------- memory bank

ViewEntry MemoryBank::get_or_compute(const BankKey& key,
                                     const std::function<ViewEntry()>& compute) {
    {
        std::lock_guard<std::mutex> lock(mu_);
        auto it = index_.find(key);
        if (it != index_.end()) {
            touch(it->second);
            return lru_.front().second;
        }
    }
    ViewEntry fresh = compute();
    {
        std::lock_guard<std::mutex> lock(mu_);
        ++computes_;
        auto it = index_.find(key);  // racing writer may have inserted meanwhile
        if (it == index_.end()) {
            lru_.emplace_front(key, fresh);
            index_[key] = lru_.begin();
            while (lru_.size() > capacity_) {
                index_.erase(lru_.back().first);
                lru_.pop_back();
            }
        }
    }
    return fresh;
}

bool MemoryBank::get(const BankKey& key, ViewEntry& out) {
    std::lock_guard<std::mutex> lock(mu_);
    auto it = index_.find(key);
    if (it == index_.end()) return false;
    touch(it->second);
    out = lru_.front().second;
    return true;
}

void MemoryBank::put(const BankKey& key, ViewEntry entry) {
    std::lock_guard<std::mutex> lock(mu_);
    auto it = index_.find(key);
    if (it != index_.end()) {
        it->second->second = std::move(entry);
        touch(it->second);
        return;
    }
    lru_.emplace_front(key, std::move(entry));
    index_[key] = lru_.begin();
    while (lru_.size() > capacity_) {
        index_.erase(lru_.back().first);
        lru_.pop_back();
    }
}

size_t MemoryBank::size() const {
    std::lock_guard<std::mutex> lock(mu_);
    return lru_.size();
}

void MemoryBank::touch(std::list<std::pair<BankKey, ViewEntry>>::iterator it) {
    lru_.splice(lru_.begin(), lru_, it);
}

// -------------------------------------------------------- shared forward pass

namespace {

ViewEntry to_entry(const qbs::QbsModel::ViewOutput& view, int num_classes) {
    ViewEntry e;
    e.final_embeddings = view.embeddings.back()->val;
    for (const auto& layer : view.embeddings) e.layer_embeddings.push_back(layer->val);
    e.class_probs = view.class_probs()->val;
    e.mask_logits4 = view.mask_logits4.back()->val;
    const int64_t n = e.class_probs.dim(0);
    e.valid_queries.assign(static_cast<size_t>(n), 0);
    for (int64_t i = 0; i < n; ++i)
        e.valid_queries[static_cast<size_t>(i)] = argmax_row(e.class_probs, i) != num_classes;
    return e;
}

const StereoFrame& frame_at(const StereoClip& clip, int64_t t) {
    // virtual timestamps beyond the sequence replicate the last frame
    const int64_t idx = std::min<int64_t>(t, clip.length());
    return clip.frames[static_cast<size_t>(idx - 1)];
}

// One BDFP forward at (virtual) timestamp t, resolving the right view and
// disparity source: real stereo or pseudo-stereo synthesis from depth.
// need_right=false skips the right-view decode; without DFP it skips the
// right view entirely (plain monocular QBS).
qbs::QbsModel::BdfpOutput run_bdfp(const System& sys, const StereoClip& clip, int64_t t,
                                   const ad::Var& q_init, double d_s, bool need_right = true) {
    const SystemConfig& cfg = sys.config();
    const StereoFrame& fr = frame_at(clip, t);
    if (fr.gt.h == 0 && fr.left.h == 0) throw data_error("run_bdfp: frame has no image");
    if (!need_right && !cfg.use_dfp) {
        qbs::QbsModel::BdfpOutput out;
        out.left = sys.qbs_model().forward(fr.left, q_init);
        return out;
    }
    const bool pseudo = cfg.pseudo_stereo || !fr.right.has_value();
    if (!pseudo) {
        qbs::TrueDisparityProvider provider;
        geometry::DisparityField disp = provider.estimate(fr, clip.bf);
        return sys.qbs_model().forward_bdfp(fr.left, *fr.right, nullptr, disp, q_init,
                                            cfg.use_dfp, need_right);
    }
    if (fr.depth.h == 0)
        throw config_error("pseudo stereo requested but the frame carries no depth");
    geometry::FeatureMap left_f = geometry::image_to_features(fr.left);
    const StereoFrame& donor_frame = frame_at(clip, std::max<int64_t>(1, t - 1));
    geometry::FeatureMap donor =
        (&donor_frame == &fr) ? left_f : geometry::image_to_features(donor_frame.left);
    auto [right_f, right_valid] =
        geometry::synth_right_view(left_f, fr.depth, d_s, &donor, cfg.pseudo);
    geometry::DisparityField disp = geometry::disparity_from_depth(fr.depth, d_s);
    ImageU8 right_img = geometry::features_to_image(right_f);
    return sys.qbs_model().forward_bdfp(fr.left, right_img, &right_valid, disp, q_init,
                                        cfg.use_dfp, need_right);
}

}  // namespace

// ------------------------------------------------------------------ inference

InferenceEngine::InferenceEngine(const System& system, bool use_bank)
    : sys_(system), use_bank_(use_bank), bank_(system.config().bank_capacity) {}

InferenceEngine::FramePair InferenceEngine::compute_frame(const StereoClip& clip, int64_t t,
                                                          const Tensor* prev_left_final) {
    ad::NoGradGuard no_grad;
    const SystemConfig& cfg = sys_.config();
    ad::Var q_init = sys_.qbs_model().learned_queries();
    if (cfg.query_alignment && prev_left_final)
        q_init = stscls::align_queries(ad::constant(*prev_left_final),
                                       sys_.qbs_model().learned_queries());
    const double d_s = 0.5 * (cfg.pseudo.d_min + cfg.pseudo.d_max);  // inference: average scale
    const bool need_right = cfg.use_stscls && cfg.ensemble.alpha_s > 0;
    auto out = run_bdfp(sys_, clip, t, q_init, d_s, need_right);
    ++frame_computes_;
    FramePair pair;
    pair.left = to_entry(out.left, cfg.model.num_classes);
    pair.right = need_right ? to_entry(out.right, cfg.model.num_classes) : pair.left;
    return pair;
}

InferenceEngine::FramePair InferenceEngine::chain_frame(
    const StereoClip& clip, int64_t t, std::unordered_map<int64_t, FramePair>& scratch) {
    auto lookup = [&](int64_t ts, FramePair& out) {
        if (use_bank_) {
            ViewEntry l, r;
            if (bank_.get({clip.id, ts, 0}, l) && bank_.get({clip.id, ts, 1}, r)) {
                out = {std::move(l), std::move(r)};
                return true;
            }
            return false;
        }
        auto it = scratch.find(ts);
        if (it == scratch.end()) return false;
        out = it->second;
        return true;
    };
    FramePair result;
    if (lookup(t, result)) return result;

    // walk back to the last cached timestamp, then roll the alignment chain
    int64_t start = t;
    FramePair prev;
    bool have_prev = false;
    while (start > 1 && !have_prev) {
        if (lookup(start - 1, prev)) {
            have_prev = true;
            break;
        }
        --start;
    }
    for (int64_t ts = start; ts <= t; ++ts) {
        const Tensor* q = have_prev ? &prev.left.final_embeddings : nullptr;
        FramePair cur = compute_frame(clip, ts, q);
        if (use_bank_) {
            bank_.put({clip.id, ts, 0}, cur.left);
            bank_.put({clip.id, ts, 1}, cur.right);
        } else {
            scratch[ts] = cur;
        }
        prev = std::move(cur);
        have_prev = true;
    }
    return prev;
}

std::pair<Tensor, Tensor> InferenceEngine::tracklet_probs(
    const std::vector<std::pair<ViewEntry, ViewEntry>>& window, const Tensor& p_b) const {
    ad::NoGradGuard no_grad;
    const SystemConfig& cfg = sys_.config();
    Tensor out = p_b;  // per-query fallback: the frame-step distribution
    const int64_t n = p_b.dim(0);
    Tensor emb({n, cfg.model.embed_dim});
    for (int64_t q = 0; q < n; ++q) {
        stscls::Tracklet trk;
        bool any_object = false;
        int ts = 1;
        for (const auto& [left, right] : window) {
            for (int view = 0; view < 2; ++view) {
                const ViewEntry& e = view == 0 ? left : right;
                stscls::TrackletItem item;
                item.embedding = ad::constant(row_of(e.final_embeddings, q));
                item.tag = {view == 0 ? stscls::View::left : stscls::View::right, ts,
                            cfg.model.decoder_layers};
                item.identity = q + 1;
                item.label = cfg.model.num_classes + 1;
                item.non_object = !e.valid_queries[static_cast<size_t>(q)];
                any_object |= !item.non_object;
                trk.items.push_back(std::move(item));
            }
            ++ts;
        }
        if (cfg.set_classifier.mask_non_objects && !any_object)
            continue;  // all-no-object tracklet: keep p_b for this query
        auto res = sys_.set_classifier().classify(trk);
        Tensor probs = ad::softmax_rows(res.set_logits)->val;
        for (int64_t j = 0; j < out.dim(1); ++j) out.at2(q, j) = probs.at2(0, j);
        for (int64_t j = 0; j < emb.dim(1); ++j)
            emb.at2(q, j) = res.set_embedding->val.at2(0, j);
    }
    return {std::move(out), std::move(emb)};
}

std::pair<Tensor, Tensor> InferenceEngine::lacls_probs(
    const ImageU8& left_image, const Tensor& mask_logits_full,
    const std::vector<uint8_t>& valid_queries) const {
    ad::NoGradGuard no_grad;
    const SystemConfig& cfg = sys_.config();
    const int64_t n = mask_logits_full.dim(0);
    const int64_t classes = cfg.model.num_classes;
    Tensor out = Tensor::full({n, classes + 1}, 1.0 / static_cast<double>(classes + 1));
    Tensor emb({n, cfg.lacls_model.dim});
    const Tensor img = geometry::image_to_features(left_image).data;
    const int64_t hw = left_image.h * left_image.w;
    const double logit_thr =
        std::log(cfg.mask_threshold / (1.0 - cfg.mask_threshold));
    for (int64_t q = 0; q < n; ++q) {
        if (!valid_queries[static_cast<size_t>(q)]) continue;  // no-object: uniform
        std::vector<uint8_t> mask(static_cast<size_t>(hw), 0);
        for (int64_t p = 0; p < hw; ++p)
            mask[static_cast<size_t>(p)] = mask_logits_full[q * hw + p] > logit_thr;
        auto patch = lacls::crop_and_mask(img, mask, cfg.patch);
        if (!patch) continue;  // empty segment: keep the uniform row
        auto res = sys_.lacls_model().classify(*patch);
        Tensor probs = ad::softmax_rows(res.logits)->val;
        for (int64_t j = 0; j <= classes; ++j) out.at2(q, j) = probs.at2(0, j);
        for (int64_t j = 0; j < emb.dim(1); ++j) emb.at2(q, j) = res.embedding->val.at2(0, j);
    }
    return {std::move(out), std::move(emb)};
}

Tensor ensemble_probs(const Tensor& p_b, const Tensor& p_s, const Tensor& p_a,
                      const EnsembleConfig& alphas) {
    alphas.validate();
    if (!p_b.same_shape(p_s) || !p_b.same_shape(p_a))
        throw argument_error("ensemble_probs: shape mismatch");
    Tensor out(p_b.shape());
    for (int64_t i = 0; i < out.numel(); ++i) {
        double v = alphas.alpha_b * p_b[i];
        if (alphas.alpha_s > 0) v += alphas.alpha_s * p_s[i];
        if (alphas.alpha_a > 0) v += alphas.alpha_a * p_a[i];
        out[i] = v;
    }
    return out;
}

metrics::LabelMap semantic_merge(const FinalPrediction& pred, int k, double mask_threshold,
                                 ImageU16* instance_map, std::vector<int>* kept) {
    if (k < 1) throw argument_error("semantic_merge: k >= 1");
    const int64_t n = pred.p_f.dim(0);
    const int64_t classes = pred.p_f.dim(1) - 1;
    const int64_t h = pred.mask_logits.dim(1), w = pred.mask_logits.dim(2);
    struct Cand {
        double conf;
        int64_t query;
        int64_t cls;  // 1..C
    };
    std::vector<Cand> cands;
    for (int64_t q = 0; q < n; ++q) {
        const int64_t arg = argmax_row(pred.p_f, q);
        if (arg == classes) continue;  // no-object
        cands.push_back({pred.p_f.at2(q, arg), q, arg + 1});
    }
    std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
        if (a.conf != b.conf) return a.conf > b.conf;
        return a.query < b.query;
    });
    if (static_cast<int>(cands.size()) > k) cands.resize(static_cast<size_t>(k));
    // paint ascending so higher confidence overwrites overlaps
    std::reverse(cands.begin(), cands.end());

    metrics::LabelMap map(h, w);
    if (instance_map) *instance_map = ImageU16(h, w);
    if (kept) kept->clear();
    const double logit_thr = std::log(mask_threshold / (1.0 - mask_threshold));
    for (const Cand& c : cands) {
        if (kept) kept->push_back(static_cast<int>(c.query));
        for (int64_t p = 0; p < h * w; ++p) {
            if (pred.mask_logits[c.query * h * w + p] <= logit_thr) continue;
            map.ids[static_cast<size_t>(p)] = static_cast<int>(c.cls);
            if (instance_map)
                instance_map->data[static_cast<size_t>(p)] =
                    static_cast<uint16_t>(c.query + 1);
        }
    }
    return map;
}

FinalPrediction InferenceEngine::predict_at(const StereoClip& clip, int64_t t_star,
                                            int64_t win_begin, int64_t win_end,
                                            std::unordered_map<int64_t, FramePair>& scratch) {
    const SystemConfig& cfg = sys_.config();
    std::vector<std::pair<ViewEntry, ViewEntry>> window;
    FramePair star;
    for (int64_t t = win_begin; t <= win_end; ++t) {
        FramePair p = chain_frame(clip, t, scratch);
        if (t == t_star) star = p;
        window.emplace_back(std::move(p.left), std::move(p.right));
    }

    const StereoFrame& fr = frame_at(clip, t_star);
    FinalPrediction out;
    out.t_star = t_star;
    out.p_b = star.left.class_probs;
    out.valid_queries = star.left.valid_queries;
    {
        ad::NoGradGuard no_grad;
        const int64_t n = star.left.mask_logits4.dim(0);
        out.mask_logits =
            upsample_mask_logits(star.left.mask_logits4, fr.left.h, fr.left.w)
                .reshaped({n, fr.left.h, fr.left.w});
    }

    const bool run_s = cfg.use_stscls && cfg.ensemble.alpha_s > 0;
    const bool run_a = cfg.use_lacls && cfg.ensemble.alpha_a > 0;
    out.emb_b = star.left.final_embeddings;
    if (run_s) {
        auto [probs, emb] = tracklet_probs(window, out.p_b);
        out.p_s = std::move(probs);
        out.emb_s = std::move(emb);
    } else {
        out.p_s = out.p_b;
    }
    if (run_a) {
        auto [probs, emb] = lacls_probs(
            fr.left,
            out.mask_logits.reshaped({out.mask_logits.dim(0), fr.left.h * fr.left.w}),
            out.valid_queries);
        out.p_a = std::move(probs);
        out.emb_a = std::move(emb);
    } else {
        out.p_a = Tensor::full({out.p_b.dim(0), out.p_b.dim(1)},
                               1.0 / static_cast<double>(out.p_b.dim(1)));
    }
    out.p_f = ensemble_probs(out.p_b, out.p_s, out.p_a, cfg.ensemble);
    out.semantic = semantic_merge(out, cfg.top_k, cfg.mask_threshold, &out.instance_map,
                                  &out.kept_queries);
    return out;
}

FinalPrediction InferenceEngine::infer_clip(const StereoClip& clip, int64_t t_star) {
    if (clip.length() < 1) throw argument_error("infer_clip: empty clip");
    if (t_star < 1 || t_star > clip.length())
        throw argument_error("infer_clip: t_star out of range");
    std::unordered_map<int64_t, FramePair> scratch;
    return predict_at(clip, t_star, 1, clip.length(), scratch);
}

FinalPrediction InferenceEngine::infer_at(const StereoClip& clip, int64_t t_star) {
    const int64_t S = clip.length();
    if (S < 1) throw argument_error("infer_at: empty clip");
    if (t_star < 1 || t_star > S) throw argument_error("infer_at: t_star out of range");
    const int64_t T = sys_.config().clip_len;
    const int64_t Sv = std::max(S, T);  // short sequences pad by edge replication
    const int64_t center = std::max<int64_t>(1, T / 2);
    const int64_t start =
        std::clamp<int64_t>(t_star - (center - 1), 1, std::max<int64_t>(1, Sv - T + 1));
    std::unordered_map<int64_t, FramePair> scratch;
    return predict_at(clip, t_star, start, start + T - 1, scratch);
}

std::vector<FinalPrediction> InferenceEngine::infer_sequence(const StereoClip& clip) {
    std::vector<FinalPrediction> out;
    out.reserve(static_cast<size_t>(clip.length()));
    for (int64_t t_star = 1; t_star <= clip.length(); ++t_star)
        out.push_back(infer_at(clip, t_star));
    return out;
}

// ------------------------------------------------------------------- training

Trainer::Trainer(System& system, const synthdata::DatasetIndex& data)
    : sys_(system),
      data_(data),
      rng_(system.config().seed),
      opt_(system.config().lr, 0.9, 0.999, 1e-8, system.config().weight_decay) {
    if (data_.clip_ids.empty()) throw data_error("Trainer: dataset has no clips");
}

const StereoClip& Trainer::clip(const std::string& id) {
    for (auto it = clip_cache_.begin(); it != clip_cache_.end(); ++it)
        if (it->first == id) {
            clip_cache_.splice(clip_cache_.begin(), clip_cache_, it);
            return clip_cache_.front().second;
        }
    clip_cache_.emplace_front(id, synthdata::load_clip(data_, id));
    if (clip_cache_.size() > kClipCacheSize) clip_cache_.pop_back();
    return clip_cache_.front().second;
}

TrainStepResult Trainer::step() {
    const SystemConfig& cfg = sys_.config();
    opt_.set_lr(optim::poly_lr(cfg.lr, step_, cfg.steps, cfg.poly_power));

    struct Item {
        const StereoClip* clip = nullptr;
        int64_t t = 0, dt = 0;
        double ds_cur = 0, ds_tmp = 0;
    };
    std::vector<Item> batch(static_cast<size_t>(cfg.batch));
    for (auto& item : batch) {
        const auto& id = data_.clip_ids[static_cast<size_t>(
            uniform_int(rng_, 0, static_cast<int64_t>(data_.clip_ids.size()) - 1))];
        item.clip = &clip(id);
        const int64_t T = item.clip->length();
        if (T < 2) throw data_error("Trainer: clips must have at least 2 frames");
        item.dt = uniform_int(rng_, 1, std::min<int64_t>(cfg.delta_t_max, T - 1));
        item.t = uniform_int(rng_, 1, T - item.dt);
        item.ds_cur = uniform_real(rng_, cfg.pseudo.d_min, cfg.pseudo.d_max);
        item.ds_tmp = uniform_real(rng_, cfg.pseudo.d_min, cfg.pseudo.d_max);
    }

    std::vector<ad::Var> baseline_terms;
    std::vector<stscls::TrackletItem> pool;
    std::vector<ad::Var> ida_rows;
    std::vector<int64_t> ida_ids;
    const int64_t N = cfg.model.num_queries;
    const int L = cfg.model.decoder_layers;

    // The temporal pass only feeds query alignment and the set-classifier
    // losses; a plain single-frame baseline trains on current frames alone.
    const bool temporal_pass = cfg.use_stscls || cfg.query_alignment;

    for (size_t bi = 0; bi < batch.size(); ++bi) {
        const Item& item = batch[bi];
        const StereoFrame& cur_fr = item.clip->frames[static_cast<size_t>(item.t - 1)];
        const StereoFrame& tmp_fr = item.clip->frames[static_cast<size_t>(item.t + item.dt - 1)];
        if (cur_fr.gt.h == 0 || tmp_fr.gt.h == 0)
            throw data_error("train_step: frame lacks ground truth");

        auto out_cur = run_bdfp(sys_, *item.clip, item.t, sys_.qbs_model().learned_queries(),
                                item.ds_cur, cfg.use_stscls);
        baseline_terms.push_back(sys_.qbs_model().loss_deep(out_cur.left, cur_fr.gt).total);
        if (!temporal_pass) continue;

        ad::Var q_tmp = cfg.query_alignment
                            ? stscls::align_queries(out_cur.left.embeddings.back(),
                                                    sys_.qbs_model().learned_queries())
                            : sys_.qbs_model().learned_queries();
        auto out_tmp =
            run_bdfp(sys_, *item.clip, item.t + item.dt, q_tmp, item.ds_tmp, cfg.use_stscls);
        baseline_terms.push_back(sys_.qbs_model().loss_deep(out_tmp.left, tmp_fr.gt).total);

        if (!cfg.use_stscls || cfg.sampler.num_tracklets <= 0) continue;

        const auto w = sys_.qbs_model().loss_weights();
        auto matched_cur =
            stscls::identity_match_filter(out_cur.left.to_prediction_set(), cur_fr.gt, w);
        std::map<int, int> tmp_class;
        for (auto [q, c] :
             stscls::identity_match_filter(out_tmp.left.to_prediction_set(), tmp_fr.gt, w))
            tmp_class[q] = c;

        for (auto [q, cls] : matched_cur) {
            const int64_t pid =
                stscls::label_pseudo_ids(static_cast<int64_t>(bi) + 1, q + 1, N);
            const int tmp_label = tmp_class.count(q) ? tmp_class[q] : cls;
            struct Src {
                const qbs::QbsModel::ViewOutput* view;
                stscls::View tag;
                int ts;
                int label;
            };
            const Src sources[4] = {
                {&out_cur.left, stscls::View::left, 1, cls},
                {&out_cur.right, stscls::View::right, 1, cls},
                {&out_tmp.left, stscls::View::left, 2, tmp_label},
                {&out_tmp.right, stscls::View::right, 2, tmp_label},
            };
            for (const Src& src : sources) {
                for (int l = 0; l < L; ++l) {
                    stscls::TrackletItem ti;
                    ti.embedding = ad::index_rows(src.view->embeddings[static_cast<size_t>(l)],
                                                  {q});
                    ti.tag = {src.tag, src.ts, l + 1};
                    ti.identity = pid;
                    ti.label = src.label;
                    pool.push_back(std::move(ti));
                }
                if (cfg.use_ida) {
                    ida_rows.push_back(
                        ad::index_rows(src.view->embeddings.back(), {q}));
                    ida_ids.push_back(pid);
                }
            }
        }
    }

    ad::Var baseline = ad::affine(ad::add_all(baseline_terms),
                                  1.0 / static_cast<double>(baseline_terms.size()), 0.0);

    TrainStepResult res;
    ad::Var total = baseline;
    if (cfg.use_stscls && cfg.sampler.num_tracklets > 0 && !pool.empty()) {
        auto tracklets =
            stscls::generate_tracklets(pool, cfg.sampler, mix64(cfg.seed, static_cast<uint64_t>(step_)));
        std::vector<ad::Var> set_logits, item_logits;
        std::vector<int> labels;
        std::vector<std::vector<int>> item_labels;
        for (const auto& trk : tracklets) {
            auto cls = sys_.set_classifier().classify(trk);
            set_logits.push_back(cls.set_logits);
            item_logits.push_back(cls.item_logits);
            labels.push_back(trk.label);
            std::vector<int> il;
            for (const auto& it : trk.items) il.push_back(it.label);
            item_labels.push_back(std::move(il));
        }
        ad::Var sim_logits;
        Tensor targets({0, 0});
        if (cfg.use_ida && !ida_rows.empty()) {
            auto sim = stscls::pairwise_similarity(ad::concat_rows(ida_rows),
                                                   cfg.set_classifier.temperature);
            sim_logits = sim.logits;
            targets = stscls::identity_targets(ida_ids);
        }
        auto sts = stscls::loss_stscls(set_logits, item_logits, labels, item_labels, sim_logits,
                                       targets);
        res.sc = sts.sc->val[0];
        res.lc = sts.lc->val[0];
        res.ida = sts.ida->val[0];
        res.stscls_total = sts.total->val[0];
        total = ad::add(total, sts.total);
    }

    res.baseline = baseline->val[0];
    res.total = total->val[0];

    optim::GradByName grads;
    optim::accumulate_grads(sys_.params(), ad::backward(total), grads);
    opt_.step(sys_.params(), grads);
    ++step_;
    return res;
}

void Trainer::run(int64_t steps, bool verbose) {
    for (int64_t s = 0; s < steps; ++s) {
        TrainStepResult r = step();
        if (verbose && (s % 25 == 0 || s == steps - 1))
            std::cout << "[train] step " << s << "/" << steps << " total " << r.total
                      << " baseline " << r.baseline << " stscls " << r.stscls_total << " (sc "
                      << r.sc << " lc " << r.lc << " ida " << r.ida << ")\n";
    }
}

// ------------------------------------------------------------------ evaluation

metrics::LabelMap gt_semantic_map(const GroundTruthSet& gt) {
    metrics::LabelMap map(gt.h, gt.w);
    for (const GtInstance& inst : gt.instances)
        for (size_t p = 0; p < inst.mask.size(); ++p)
            if (inst.mask[p]) map.ids[p] = inst.class_id;
    return map;
}

EvalSummary evaluate_dataset(System& system, const synthdata::DatasetIndex& data,
                             const EvalOptions& opt) {
    const SystemConfig& cfg = system.config();
    EvalSummary sum;
    std::vector<metrics::LabelMap> preds, gts;
    int64_t acc_b = 0, acc_s = 0, acc_a = 0, acc_f = 0;
    int64_t id_consistent = 0, id_total = 0;

    InferenceEngine engine(system, opt.use_bank);
    const auto weights = system.qbs_model().loss_weights();
    for (const auto& clip_id : data.clip_ids) {
        StereoClip clip = synthdata::load_clip(data, clip_id);
        auto results = engine.infer_sequence(clip);
        std::map<int, int> prev_id_to_query;
        for (int64_t t = 1; t <= clip.length(); t += std::max(1, opt.frame_stride)) {
            const FinalPrediction& pred = results[static_cast<size_t>(t - 1)];
            const GroundTruthSet& gt = clip.frames[static_cast<size_t>(t - 1)].gt;
            preds.push_back(pred.semantic);
            gts.push_back(gt_semantic_map(gt));
            ++sum.frames;

            std::map<int, int> id_to_query;
            if (!gt.empty()) {
                qbs::PredictionSet pset;
                pset.class_probs = pred.p_b;
                pset.mask_logits = pred.mask_logits;
                pset.img_h = gt.h;
                pset.img_w = gt.w;
                qbs::MatchResult match = qbs::hungarian_match(pset, gt, weights);
                for (size_t k = 0; k < gt.size(); ++k) {
                    const int q = match.gt_to_query[k];
                    const int cls_idx = gt.instances[k].class_id - 1;
                    acc_b += argmax_row(pred.p_b, q) == cls_idx;
                    acc_s += argmax_row(pred.p_s, q) == cls_idx;
                    acc_a += argmax_row(pred.p_a, q) == cls_idx;
                    acc_f += argmax_row(pred.p_f, q) == cls_idx;
                    ++sum.matched_queries;
                    id_to_query[gt.instances[k].identity] = q;
                }
            }
            if (opt.frame_stride == 1) {
                for (const auto& [identity, q] : id_to_query) {
                    auto it = prev_id_to_query.find(identity);
                    if (it == prev_id_to_query.end()) continue;
                    ++id_total;
                    id_consistent += it->second == q;
                }
            }
            prev_id_to_query = std::move(id_to_query);
        }
    }
    sum.iou = metrics::dataset_ious(preds, gts, cfg.model.num_classes);
    sum.dice = metrics::dice_scores(preds, gts, cfg.model.num_classes);
    sum.surface = metrics::dataset_surface_distances(preds, gts, cfg.model.num_classes);
    if (sum.matched_queries > 0) {
        sum.acc_frame = static_cast<double>(acc_b) / static_cast<double>(sum.matched_queries);
        sum.acc_tracklet = static_cast<double>(acc_s) / static_cast<double>(sum.matched_queries);
        sum.acc_agnostic = static_cast<double>(acc_a) / static_cast<double>(sum.matched_queries);
        sum.acc_ensemble = static_cast<double>(acc_f) / static_cast<double>(sum.matched_queries);
    }
    sum.identity_pairs = id_total;
    sum.identity_consistency =
        id_total > 0 ? static_cast<double>(id_consistent) / static_cast<double>(id_total) : 0.0;
    return sum;
}

}  // namespace lacoste::pipeline
