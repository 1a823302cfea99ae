#pragma once

#include <functional>
#include <list>
#include <memory>
#include <mutex>
#include <unordered_map>

#include "lacoste/lacls.hpp"
#include "lacoste/metrics.hpp"
#include "lacoste/optim.hpp"
#include "lacoste/stscls.hpp"
#include "lacoste/synthdata.hpp"

namespace lacoste::pipeline {

struct EnsembleConfig {
    double alpha_b = 1.0 / 3.0;
    double alpha_s = 1.0 / 3.0;
    double alpha_a = 1.0 / 3.0;

    void validate() const {
        if (alpha_b < 0 || alpha_s < 0 || alpha_a < 0 || alpha_b + alpha_s + alpha_a <= 0)
            throw argument_error("EnsembleConfig: alphas nonnegative with positive sum");
    }
};

// Whole-system configuration; every default here is a key of the JSON config
// file (see config.hpp).
struct SystemConfig {
    qbs::ModelConfig model;
    stscls::SetClassifierConfig set_classifier;
    stscls::SamplerConfig sampler;
    lacls::ClassifierConfig lacls_model;
    lacls::PatchSpec patch;
    geometry::PseudoStereoConfig pseudo;
    EnsembleConfig ensemble;

    int64_t clip_len = 8;  // T
    int delta_t_max = 4;
    int top_k = 5;
    double mask_threshold = 0.5;
    size_t bank_capacity = 128;

    bool use_dfp = true;
    bool use_stscls = true;
    bool use_lacls = true;
    bool query_alignment = true;
    bool use_ida = true;
    bool pseudo_stereo = false;  // synthesize right views from depth

    // training
    double lr = 1e-4;
    double weight_decay = 0.01;
    double poly_power = 0.9;
    int64_t steps = 600;
    int batch = 4;
    uint64_t seed = 1;

    void validate() const;
};

// Owns the parameter store and the three model components.
class System {
  public:
    System(const SystemConfig& cfg, uint64_t init_seed);

    const SystemConfig& config() const { return cfg_; }
    nn::ParamStore& params() { return params_; }
    const nn::ParamStore& params() const { return params_; }
    const qbs::QbsModel& qbs_model() const { return *qbs_; }
    const stscls::SetClassifier& set_classifier() const { return *set_; }
    const lacls::LaclsModel& lacls_model() const { return *lacls_; }

    void save(const std::string& dir, bool include_lacls) const;
    void save_lacls(const std::string& dir) const;
    // Loads qbs always, stscls/lacls when the configuration needs them; a
    // needed-but-missing component is a configuration error.
    void load(const std::string& dir);

  private:
    SystemConfig cfg_;
    nn::ParamStore params_;
    std::unique_ptr<qbs::QbsModel> qbs_;
    std::unique_ptr<stscls::SetClassifier> set_;
    std::unique_ptr<lacls::LaclsModel> lacls_;
};

// ---------------------------------------------------------------- memory bank

struct BankKey {
    std::string seq;
    int64_t t = 0;
    int view = 0;  // 0 left, 1 right
    bool operator==(const BankKey& o) const {
        return t == o.t && view == o.view && seq == o.seq;
    }
};

struct BankKeyHash {
    size_t operator()(const BankKey& k) const {
        return std::hash<std::string>()(k.seq) ^ (std::hash<int64_t>()(k.t) * 1315423911u) ^
               static_cast<size_t>(k.view);
    }
};

// Frame-step results for one view at one timestamp.
struct ViewEntry {
    Tensor final_embeddings;            // [N, D]
    std::vector<Tensor> layer_embeddings;  // L x [N, D]
    Tensor class_probs;                 // [N, C+1]
    Tensor mask_logits4;                // [N, h4, w4], final layer
    std::vector<uint8_t> valid_queries;  // 1 where argmax is a real class
};

// LRU store of frame-step results, internally synchronized.
class MemoryBank {
  public:
    explicit MemoryBank(size_t capacity) : capacity_(capacity) {}

    ViewEntry get_or_compute(const BankKey& key, const std::function<ViewEntry()>& compute);
    bool get(const BankKey& key, ViewEntry& out);
    void put(const BankKey& key, ViewEntry entry);
    size_t size() const;
    int64_t compute_count() const { return computes_; }
    void reset_compute_count() { computes_ = 0; }

  private:
    void touch(std::list<std::pair<BankKey, ViewEntry>>::iterator it);
    size_t capacity_;
    mutable std::mutex mu_;
    std::list<std::pair<BankKey, ViewEntry>> lru_;  // front = most recent
    std::unordered_map<BankKey, std::list<std::pair<BankKey, ViewEntry>>::iterator, BankKeyHash>
        index_;
    int64_t computes_ = 0;
};

// ------------------------------------------------------------------ inference

struct FinalPrediction {
    Tensor p_b, p_s, p_a, p_f;  // [N, C+1]
    Tensor mask_logits;         // [N, H, W], identical to the frame step at t*
    Tensor emb_b, emb_s, emb_a;  // e^b / e^s / e^a per query (e^s, e^a empty when skipped)
    std::vector<uint8_t> valid_queries;
    metrics::LabelMap semantic;  // merged top-k semantic map
    ImageU16 instance_map;       // painted query ids (query index + 1)
    std::vector<int> kept_queries;
    int64_t t_star = 0;  // 1-based timestamp within the sequence
};

// p_f = alpha_b p_b + alpha_s p_s + alpha_a p_a; zero-weight terms are skipped
// so a degenerate ensemble passes its remaining input through bit-exactly.
Tensor ensemble_probs(const Tensor& p_b, const Tensor& p_s, const Tensor& p_a,
                      const EnsembleConfig& alphas);

// Drops no-object queries, keeps the top-k by class confidence, binarizes
// masks and paints ascending so higher confidence overwrites overlaps.
metrics::LabelMap semantic_merge(const FinalPrediction& pred, int k, double mask_threshold,
                                 ImageU16* instance_map = nullptr,
                                 std::vector<int>* kept = nullptr);

class InferenceEngine {
  public:
    InferenceEngine(const System& system, bool use_bank);

    // Alg. 1 on a standalone clip (t_star 1-based, the window is the clip).
    FinalPrediction infer_clip(const StereoClip& clip, int64_t t_star);
    // Sliding-window prediction for one t*: a length-T window clamped inside
    // the sequence, query alignment chained from frame 1.
    FinalPrediction infer_at(const StereoClip& clip, int64_t t_star);
    // infer_at for every frame of the sequence.
    std::vector<FinalPrediction> infer_sequence(const StereoClip& clip);

    int64_t frame_computations() const { return frame_computes_; }
    void reset_counters() { frame_computes_ = 0; }

    // Exposed for the step-commutation property: both are pure given the
    // frame-step results. Each returns (class probs [N,C+1], embeddings [N,*]).
    std::pair<Tensor, Tensor> tracklet_probs(
        const std::vector<std::pair<ViewEntry, ViewEntry>>& window, const Tensor& p_b) const;
    std::pair<Tensor, Tensor> lacls_probs(const ImageU8& left_image,
                                          const Tensor& mask_logits_full,
                                          const std::vector<uint8_t>& valid_queries) const;

  private:
    struct FramePair {
        ViewEntry left, right;
    };
    FramePair compute_frame(const StereoClip& clip, int64_t t, const Tensor* prev_left_final);
    FramePair chain_frame(const StereoClip& clip, int64_t t,
                          std::unordered_map<int64_t, FramePair>& scratch);
    FinalPrediction predict_at(const StereoClip& clip, int64_t t_star, int64_t win_begin,
                               int64_t win_end,
                               std::unordered_map<int64_t, FramePair>& scratch);

    const System& sys_;
    bool use_bank_;
    MemoryBank bank_;
    int64_t frame_computes_ = 0;
};

// ------------------------------------------------------------------- training

struct TrainStepResult {
    double total = 0.0;
    double baseline = 0.0;
    double stscls_total = 0.0;
    double sc = 0.0, lc = 0.0, ida = 0.0;
};

class Trainer {
  public:
    Trainer(System& system, const synthdata::DatasetIndex& data);

    TrainStepResult step();
    void run(int64_t steps, bool verbose);
    int64_t steps_done() const { return step_; }

  private:
    const StereoClip& clip(const std::string& id);

    System& sys_;
    synthdata::DatasetIndex data_;
    Rng rng_;
    optim::AdamW opt_;
    int64_t step_ = 0;
    std::list<std::pair<std::string, StereoClip>> clip_cache_;
    static constexpr size_t kClipCacheSize = 48;
};

// ------------------------------------------------------------------ evaluation

struct EvalOptions {
    bool use_bank = true;
    int frame_stride = 1;  // evaluate every k-th frame as t*
};

struct EvalSummary {
    metrics::IouSummary iou;
    metrics::DiceSummary dice;
    metrics::SurfaceSummary surface;
    // classification accuracy over GT-matched queries, per ensemble item
    double acc_frame = 0.0, acc_tracklet = 0.0, acc_agnostic = 0.0, acc_ensemble = 0.0;
    int64_t matched_queries = 0;
    // fraction of consecutive-frame identity matches that keep the query index
    double identity_consistency = 0.0;
    int64_t identity_pairs = 0;
    int64_t frames = 0;
};

metrics::LabelMap gt_semantic_map(const GroundTruthSet& gt);

EvalSummary evaluate_dataset(System& system, const synthdata::DatasetIndex& data,
                             const EvalOptions& opt);

}  // namespace lacoste::pipeline
