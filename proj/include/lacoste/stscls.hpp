#pragma once

#include <optional>

#include "lacoste/data.hpp"
#include "lacoste/nn.hpp"
#include "lacoste/qbs.hpp"

namespace lacoste::stscls {

enum class View { left = 0, right = 1 };

struct SourceTag {
    View view = View::left;
    int timestamp = 0;  // 1-based within the clip/window
    int layer = 0;      // decoder layer, 1-based
};

// One entry of a tracklet: an object-query embedding with its provenance,
// pseudo identity and per-item label.
struct TrackletItem {
    ad::Var embedding;  // [1, D]
    SourceTag tag;
    int64_t identity = 0;
    int label = 0;  // 1..C (matched class); C+1 marks no-object
    bool non_object = false;
};

// Ordered multiset of object-query embeddings with one tracklet-level label.
struct Tracklet {
    std::vector<TrackletItem> items;
    int label = 0;  // y^s, the anchor identity's category
    size_t size() const { return items.size(); }
};

struct SetClassifierConfig {
    int encoder_layers = 3;  // N_E
    int heads = 4;
    int token_dim = 64;
    double temperature = 0.1;  // tau of the pairwise similarity map
    bool mask_non_objects = false;

    void validate() const {
        if (encoder_layers < 1 || heads < 1 || token_dim < heads)
            throw argument_error("SetClassifierConfig: bad encoder geometry");
        if (temperature <= 0) throw argument_error("SetClassifierConfig: tau must be positive");
    }
};

struct SamplerConfig {
    std::vector<int> lengths{2, 4, 8};
    int num_tracklets = 32;  // N_s
    double max_distractor_fraction = 0.5;
};

// Alg. 1/2 query alignment: the previous frame's final left-view embeddings
// verbatim, or the learned queries at the first timestamp.
ad::Var align_queries(const ad::Var& prev_left_final, const ad::Var& learned_queries);

// Pseudo identity: (i-1)*N + n over 1-based batch index and query index.
int64_t label_pseudo_ids(int64_t batch_index, int64_t query_index, int64_t num_queries);

// Matched (query index, class) pairs of the current left frame, ascending by
// query index. Empty GT yields an empty result.
std::vector<std::pair<int, int>> identity_match_filter(const qbs::PredictionSet& pred,
                                                       const GroundTruthSet& gt,
                                                       const qbs::LossWeights& weights);

// Inverse-category-frequency anchored sampling with bounded identity mixing;
// deterministic per seed.
std::vector<Tracklet> generate_tracklets(const std::vector<TrackletItem>& pool,
                                         const SamplerConfig& cfg, uint64_t seed);

// Anchor-category weights the sampler uses (exposed for property tests):
// proportional to 1 / (identities of that category), renormalized.
std::vector<std::pair<int, double>> anchor_category_weights(const std::vector<TrackletItem>& pool);

struct Similarity {
    ad::Var logits;  // [K,K], dot(e_i, e_j)/tau on unit-normalized rows
    ad::Var probs;   // logistic of the above, symmetric, in (0,1)
};
// Throws data_error on zero-norm embeddings.
Similarity pairwise_similarity(const ad::Var& embeddings, double tau);

// M-tilde: 1 where identities agree (diagonal included).
Tensor identity_targets(const std::vector<int64_t>& ids);

class SetClassifier {
  public:
    SetClassifier(const SetClassifierConfig& cfg, int64_t input_dim, int num_classes,
                  nn::ParamStore& ps, Rng& rng);

    const SetClassifierConfig& config() const { return cfg_; }

    struct Output {
        ad::Var set_embedding;  // e^s = z_0, [1, D]
        ad::Var set_logits;     // [1, C+1]
        ad::Var item_logits;    // [M, C+1], rows follow the tracklet order
        std::vector<uint8_t> attended;  // per item, 0 when masked out
    };
    Output classify(const Tracklet& t) const;

  private:
    SetClassifierConfig cfg_;
    int num_classes_;
    ad::Var set_token_;  // [1, D]
    nn::Linear proj_;
    struct EncoderLayer {
        nn::MultiheadAttention attn;
        nn::FeedForward ffn;
        nn::LayerNorm n1, n2;
    };
    std::vector<EncoderLayer> layers_;
    nn::Linear set_head_, item_head_;
};

struct StsclsLoss {
    ad::Var total, sc, lc, ida;
};

// Eq. (6)-(8): set CE + item CE summed over tracklets, plus identity
// alignment BCE over all K^2 ordered pairs (diagonal included), unit weights.
StsclsLoss loss_stscls(const std::vector<ad::Var>& set_logits,
                       const std::vector<ad::Var>& item_logits,
                       const std::vector<int>& tracklet_labels,
                       const std::vector<std::vector<int>>& item_labels,
                       const ad::Var& sim_logits, const Tensor& identity_target_matrix);

// Debug dumps: one JSON line per tracklet (tags, ids, labels, embedding file
// offsets); float32 embeddings appended to bin_path.
void dump_tracklets_jsonl(const std::vector<Tracklet>& tracklets, const std::string& jsonl_path,
                          const std::string& bin_path);

}  // namespace lacoste::stscls
