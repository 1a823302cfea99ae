#include "lacoste/stscls.hpp"

#include <algorithm>
#include <fstream>
#include <map>

#include "json.hpp"

using nlohmann::json;

namespace lacoste::stscls {

ad::Var align_queries(const ad::Var& prev_left_final, const ad::Var& learned_queries) {
    if (!prev_left_final) return learned_queries;
    if (!prev_left_final->val.same_shape(learned_queries->val))
        throw argument_error("align_queries: previous embeddings must be [N,D]");
    return prev_left_final;
}

int64_t label_pseudo_ids(int64_t batch_index, int64_t query_index, int64_t num_queries) {
    if (batch_index < 1 || query_index < 1 || query_index > num_queries)
        throw argument_error("label_pseudo_ids: indices are 1-based, query index <= N");
    return (batch_index - 1) * num_queries + query_index;
}

std::vector<std::pair<int, int>> identity_match_filter(const qbs::PredictionSet& pred,
                                                       const GroundTruthSet& gt,
                                                       const qbs::LossWeights& weights) {
    std::vector<std::pair<int, int>> out;
    if (gt.empty()) return out;
    qbs::MatchResult match = qbs::hungarian_match(pred, gt, weights);
    for (size_t k = 0; k < gt.size(); ++k)
        out.emplace_back(match.gt_to_query[k], gt.instances[k].class_id);
    std::sort(out.begin(), out.end());
    return out;
}

namespace {

struct IdentityInfo {
    std::vector<size_t> items;  // pool indices
    int category = 0;
};

std::map<int64_t, IdentityInfo> group_identities(const std::vector<TrackletItem>& pool) {
    std::map<int64_t, IdentityInfo> ids;
    for (size_t i = 0; i < pool.size(); ++i) ids[pool[i].identity].items.push_back(i);
    for (auto& [id, info] : ids) {
        // category = majority item label, ties toward the smaller class id
        std::map<int, int> votes;
        for (size_t i : info.items) ++votes[pool[i].label];
        int best_label = 0, best_votes = -1;
        for (const auto& [label, v] : votes)
            if (v > best_votes) {
                best_votes = v;
                best_label = label;
            }
        info.category = best_label;
    }
    return ids;
}

}  // namespace

std::vector<std::pair<int, double>> anchor_category_weights(
    const std::vector<TrackletItem>& pool) {
    auto ids = group_identities(pool);
    std::map<int, int> counts;  // identities per category
    for (const auto& [id, info] : ids) ++counts[info.category];
    double z = 0.0;
    for (const auto& [cat, n] : counts) z += 1.0 / static_cast<double>(n);
    std::vector<std::pair<int, double>> out;
    for (const auto& [cat, n] : counts)
        out.emplace_back(cat, 1.0 / static_cast<double>(n) / z);
    return out;
}

std::vector<Tracklet> generate_tracklets(const std::vector<TrackletItem>& pool,
                                         const SamplerConfig& cfg, uint64_t seed) {
    std::vector<Tracklet> out;
    if (pool.empty() || cfg.num_tracklets <= 0) return out;

    auto ids = group_identities(pool);
    std::map<int, std::vector<int64_t>> by_category;  // category -> identity list
    for (const auto& [id, info] : ids) by_category[info.category].push_back(id);

    std::vector<int> cats;
    std::vector<double> weights;
    for (const auto& [cat, list] : by_category) {
        cats.push_back(cat);
        weights.push_back(1.0 / static_cast<double>(list.size()));
    }
    Rng rng(seed);
    std::discrete_distribution<size_t> cat_dist(weights.begin(), weights.end());

    out.reserve(static_cast<size_t>(cfg.num_tracklets));
    for (int s = 0; s < cfg.num_tracklets; ++s) {
        const int cat = cats[cat_dist(rng)];
        const auto& id_list = by_category[cat];
        const int64_t anchor =
            id_list[static_cast<size_t>(uniform_int(rng, 0, static_cast<int64_t>(id_list.size()) - 1))];
        const auto& anchor_items = ids[anchor].items;

        int target_len = cfg.lengths.empty()
                             ? 1
                             : cfg.lengths[static_cast<size_t>(uniform_int(
                                   rng, 0, static_cast<int64_t>(cfg.lengths.size()) - 1))];
        target_len = std::max(1, target_len);

        std::vector<size_t> distractors;
        for (size_t i = 0; i < pool.size(); ++i)
            if (pool[i].identity != anchor) distractors.push_back(i);
        const int64_t dis_cap =
            std::min<int64_t>(static_cast<int64_t>(cfg.max_distractor_fraction * target_len),
                              static_cast<int64_t>(distractors.size()));
        const int64_t n_dis = dis_cap > 0 ? uniform_int(rng, 0, dis_cap) : 0;
        int64_t n_anchor = target_len - n_dis;

        std::vector<size_t> chosen;
        // anchor items: without replacement while the pool lasts, then with
        // replacement (multiset); a single-item pool is not repeated, which
        // yields length-1 tracklets for degenerate pools
        std::vector<size_t> shuffled = anchor_items;
        std::shuffle(shuffled.begin(), shuffled.end(), rng);
        const int64_t direct = std::min<int64_t>(n_anchor, static_cast<int64_t>(shuffled.size()));
        chosen.insert(chosen.end(), shuffled.begin(), shuffled.begin() + direct);
        if (n_anchor > direct && anchor_items.size() > 1)
            for (int64_t k = direct; k < n_anchor; ++k)
                chosen.push_back(anchor_items[static_cast<size_t>(
                    uniform_int(rng, 0, static_cast<int64_t>(anchor_items.size()) - 1))]);

        std::shuffle(distractors.begin(), distractors.end(), rng);
        for (int64_t k = 0; k < n_dis; ++k) chosen.push_back(distractors[static_cast<size_t>(k)]);
        std::shuffle(chosen.begin(), chosen.end(), rng);

        Tracklet t;
        t.label = ids[anchor].category;
        for (size_t idx : chosen) t.items.push_back(pool[idx]);
        out.push_back(std::move(t));
    }
    return out;
}

Similarity pairwise_similarity(const ad::Var& embeddings, double tau) {
    if (embeddings->val.ndim() != 2 || embeddings->val.dim(0) < 1)
        throw argument_error("pairwise_similarity: need [K,D] with K >= 1");
    if (tau <= 0) throw argument_error("pairwise_similarity: tau must be positive");
    // normalize_rows raises data_error on zero-norm rows
    ad::Var unit = ad::normalize_rows(embeddings);
    Similarity sim;
    sim.logits = ad::affine(ad::matmul(unit, ad::transpose(unit)), 1.0 / tau, 0.0);
    sim.probs = ad::sigmoid(sim.logits);
    return sim;
}

Tensor identity_targets(const std::vector<int64_t>& ids) {
    const int64_t k = static_cast<int64_t>(ids.size());
    Tensor t({k, k});
    for (int64_t i = 0; i < k; ++i)
        for (int64_t j = 0; j < k; ++j)
            t.at2(i, j) = ids[static_cast<size_t>(i)] == ids[static_cast<size_t>(j)] ? 1.0 : 0.0;
    return t;
}

SetClassifier::SetClassifier(const SetClassifierConfig& cfg, int64_t input_dim, int num_classes,
                             nn::ParamStore& ps, Rng& rng)
    : cfg_(cfg), num_classes_(num_classes) {
    cfg_.validate();
    const int64_t d = cfg_.token_dim;
    set_token_ = ps.create("stscls.set_token", random_normal({1, d}, 0.0, 0.5, rng));
    proj_ = nn::Linear(ps, "stscls.proj", input_dim, d, true, rng);
    layers_.resize(static_cast<size_t>(cfg_.encoder_layers));
    for (int l = 0; l < cfg_.encoder_layers; ++l) {
        const std::string base = "stscls.enc.l" + std::to_string(l);
        auto& layer = layers_[static_cast<size_t>(l)];
        layer.attn = nn::MultiheadAttention(ps, base + ".attn", d, cfg_.heads, rng);
        layer.ffn = nn::FeedForward(ps, base + ".ffn", d, 4 * d, rng);
        layer.n1 = nn::LayerNorm(ps, base + ".n1", d);
        layer.n2 = nn::LayerNorm(ps, base + ".n2", d);
    }
    set_head_ = nn::Linear(ps, "stscls.head.set", d, num_classes + 1, true, rng);
    item_head_ = nn::Linear(ps, "stscls.head.item", d, num_classes + 1, true, rng);
}

SetClassifier::Output SetClassifier::classify(const Tracklet& t) const {
    if (t.items.empty()) throw argument_error("set_classify: empty tracklet");
    const int64_t m = static_cast<int64_t>(t.items.size());
    std::vector<ad::Var> rows;
    rows.reserve(t.items.size());
    for (const auto& item : t.items) rows.push_back(item.embedding);
    ad::Var tokens = proj_(ad::concat_rows(rows));            // [M, D]
    ad::Var x = ad::concat_rows({set_token_, tokens});        // [M+1, D]

    std::vector<uint8_t> keep(static_cast<size_t>(m) + 1, 1);
    Output out;
    out.attended.assign(static_cast<size_t>(m), 1);
    if (cfg_.mask_non_objects)
        for (int64_t i = 0; i < m; ++i)
            if (t.items[static_cast<size_t>(i)].non_object) {
                keep[static_cast<size_t>(i + 1)] = 0;
                out.attended[static_cast<size_t>(i)] = 0;
            }

    for (const auto& layer : layers_) {
        x = layer.n1(ad::add(x, layer.attn(x, x, x, &keep)));
        x = layer.n2(ad::add(x, layer.ffn(x)));
    }
    out.set_embedding = ad::slice_rows(x, 0, 1);
    out.set_logits = set_head_(out.set_embedding);
    out.item_logits = item_head_(ad::slice_rows(x, 1, m));
    return out;
}

StsclsLoss loss_stscls(const std::vector<ad::Var>& set_logits,
                       const std::vector<ad::Var>& item_logits,
                       const std::vector<int>& tracklet_labels,
                       const std::vector<std::vector<int>>& item_labels,
                       const ad::Var& sim_logits, const Tensor& identity_target_matrix) {
    if (set_logits.size() != tracklet_labels.size() || item_logits.size() != item_labels.size() ||
        set_logits.size() != item_logits.size())
        throw argument_error("loss_stscls: arity mismatch");
    StsclsLoss out;
    std::vector<ad::Var> sc_terms, lc_terms;
    for (size_t s = 0; s < set_logits.size(); ++s) {
        sc_terms.push_back(
            ad::cross_entropy_rows(set_logits[s], {tracklet_labels[s] - 1}, {1.0}));
        std::vector<int> targets;
        targets.reserve(item_labels[s].size());
        for (int y : item_labels[s]) targets.push_back(y - 1);
        lc_terms.push_back(ad::cross_entropy_rows(
            item_logits[s], targets, std::vector<double>(targets.size(), 1.0)));
    }
    out.sc = sc_terms.empty() ? ad::constant(Tensor::scalar(0.0)) : ad::add_all(sc_terms);
    out.lc = lc_terms.empty() ? ad::constant(Tensor::scalar(0.0)) : ad::add_all(lc_terms);
    if (sim_logits) {
        if (!sim_logits->val.same_shape(identity_target_matrix))
            throw argument_error("loss_stscls: similarity/target shape mismatch");
        out.ida = ad::bce_with_logits(sim_logits, identity_target_matrix, false);
    } else {
        out.ida = ad::constant(Tensor::scalar(0.0));
    }
    out.total = ad::add_all({out.sc, out.lc, out.ida});
    return out;
}

void dump_tracklets_jsonl(const std::vector<Tracklet>& tracklets, const std::string& jsonl_path,
                          const std::string& bin_path) {
    std::ofstream js(jsonl_path);
    std::ofstream bin(bin_path, std::ios::binary);
    if (!js || !bin) throw data_error("dump_tracklets_jsonl: cannot open output files");
    int64_t offset = 0;
    for (size_t s = 0; s < tracklets.size(); ++s) {
        json line;
        line["tracklet"] = s;
        line["label"] = tracklets[s].label;
        json items = json::array();
        for (const auto& item : tracklets[s].items) {
            const Tensor& e = item.embedding->val;
            std::vector<float> buf(static_cast<size_t>(e.numel()));
            for (int64_t i = 0; i < e.numel(); ++i) buf[static_cast<size_t>(i)] = static_cast<float>(e[i]);
            bin.write(reinterpret_cast<const char*>(buf.data()),
                      static_cast<std::streamsize>(buf.size() * sizeof(float)));
            json rec;
            rec["view"] = item.tag.view == View::left ? "left" : "right";
            rec["t"] = item.tag.timestamp;
            rec["layer"] = item.tag.layer;
            rec["identity"] = item.identity;
            rec["label"] = item.label;
            rec["non_object"] = item.non_object;
            rec["offset"] = offset;
            rec["dim"] = e.numel();
            items.push_back(rec);
            offset += e.numel() * static_cast<int64_t>(sizeof(float));
        }
        line["items"] = items;
        js << line.dump() << "\n";
    }
}

}  // namespace lacoste::stscls
