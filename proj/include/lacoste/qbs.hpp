#pragma once

#include <memory>

#include "lacoste/data.hpp"
#include "lacoste/geometry.hpp"
#include "lacoste/nn.hpp"

namespace lacoste::qbs {

struct ModelConfig {
    int num_queries = 20;    // N
    int num_classes = 4;     // C (class probabilities span C+1 with trailing no-object)
    int embed_dim = 64;      // D
    int decoder_layers = 3;  // L
    int heads = 4;
    int enc_ch1 = 32;        // stage channels at strides 2 / 4 (stride 8 reuses ch2)
    int enc_ch2 = 64;
    double lambda_bce = 5.0;
    double lambda_dice = 5.0;
    double lambda_cls = 2.0;
    double no_object_weight = 0.1;  // CE weight on unmatched-query rows

    int no_object_index() const { return num_classes; }
    static constexpr int total_stride = 8;
    void validate() const;
};

// Value-level prediction set for one frame view: z = {(p_n, e_n, m_n)} plus
// the per-decoder-layer intermediate embeddings.
struct PredictionSet {
    Tensor class_probs;                  // [N, C+1], rows sum to 1
    Tensor embeddings;                   // [N, D] final decoder layer
    std::vector<Tensor> layer_embeddings;  // L x [N, D]
    Tensor mask_logits;                  // [N, H, W] full resolution, final layer
    int64_t img_h = 0, img_w = 0;
};

struct MatchResult {
    std::vector<int> gt_to_query;  // injective, one query per GT record
    double total_cost = 0.0;
};

struct LossWeights {
    double bce = 5.0, dice = 5.0, cls = 2.0, no_object = 0.1;
};

// Minimum-cost injective assignment of GT records to queries; pair cost is
// lambda_cls*(1 - p_n(c)) + lambda_bce*meanBCE(sigma(m_n), m) +
// lambda_dice*Dice(sigma(m_n), m).
MatchResult hungarian_match(const Tensor& class_probs, const Tensor& mask_logits_full,
                            const GroundTruthSet& gt, const LossWeights& weights);
MatchResult hungarian_match(const PredictionSet& pred, const GroundTruthSet& gt,
                            const LossWeights& weights);
// Exposed for oracle tests: solves an explicit cost matrix [rows x cols],
// rows <= cols.
MatchResult solve_assignment(const Tensor& cost);

struct BaselineLoss {
    ad::Var total, cls, bce, dice;
};

// Eq.-(1)-style loss for a single prediction layer: CE over all N queries
// (unmatched target no-object at reduced weight), mask BCE + Dice over
// matched pairs only.
BaselineLoss loss_baseline(const ad::Var& class_logits, const ad::Var& mask_logits_full,
                           const GroundTruthSet& gt, const MatchResult& match,
                           const LossWeights& weights);

// Pluggable disparity source (the paper's offline estimation network); the
// default implementation reads exact synthetic depth. Failures must surface
// as provider_error.
class DisparityProvider {
  public:
    virtual ~DisparityProvider() = default;
    virtual geometry::DisparityField estimate(const StereoFrame& frame, double bf) = 0;
};

class TrueDisparityProvider : public DisparityProvider {
  public:
    geometry::DisparityField estimate(const StereoFrame& frame, double bf) override;
};

// Returns a precomputed field regardless of the frame (pseudo-stereo path).
class FixedDisparityProvider : public DisparityProvider {
  public:
    explicit FixedDisparityProvider(geometry::DisparityField d) : d_(std::move(d)) {}
    geometry::DisparityField estimate(const StereoFrame&, double) override { return d_; }

  private:
    geometry::DisparityField d_;
};

class QbsModel {
  public:
    QbsModel(const ModelConfig& cfg, nn::ParamStore& ps, Rng& rng);

    const ModelConfig& config() const { return cfg_; }
    ad::Var learned_queries() const { return queries_; }

    struct Encoded {
        ad::Var f4;  // [D, H/4, W/4] per-pixel features
        ad::Var s8;  // [ch2, H/8, W/8] pyramid stage
        std::vector<uint8_t> valid4, valid8;
        int64_t img_h = 0, img_w = 0;
    };
    // image: [3,H,W] in [0,1]; dims must divide the total stride.
    Encoded encode_image(const Tensor& image, const std::vector<uint8_t>* image_valid = nullptr) const;

    struct Decoded {
        std::vector<ad::Var> layers;  // L x [N, D]
    };
    Decoded transformer_decode(const ad::Var& f4, const std::vector<uint8_t>& mem_keep,
                               const ad::Var& initial_queries) const;

    // (class_logits [N,C+1], mask_logits [N,h4,w4]) for one embedding set.
    std::pair<ad::Var, ad::Var> predict_heads(const ad::Var& embeddings, const ad::Var& f4) const;

    // DFP: warp source-view stride-4 features into target geometry and fuse
    // with cosine weights. disp is full-resolution, left-convention; negate
    // flips the sampling direction for the left->right pass.
    ad::Var dfp_fuse(const ad::Var& f_target, const ad::Var& f_source,
                     const geometry::DisparityField& disp, const std::vector<uint8_t>& source_valid4,
                     bool negate) const;

    struct ViewOutput {
        std::vector<ad::Var> embeddings;    // L x [N,D]
        std::vector<ad::Var> class_logits;  // L x [N,C+1]
        std::vector<ad::Var> mask_logits4;  // L x [N,h4,w4]
        int64_t img_h = 0, img_w = 0;

        ad::Var class_probs(int layer = -1) const;       // softmax rows
        ad::Var mask_logits_full(int layer = -1) const;  // [N, H*W]
        PredictionSet to_prediction_set() const;
    };

    struct BdfpOutput {
        ViewOutput left, right;
    };

    // Monocular forward (the plain QBS baseline).
    ViewOutput forward(const ImageU8& image, const ad::Var& initial_queries) const;

    // Stereo forward with DFP on both views. right_valid covers synthesized
    // right views (null = fully valid). decode_right=false skips the
    // right-view decoder pass (the right view still feeds DFP fusion) and
    // leaves BdfpOutput::right empty.
    BdfpOutput forward_bdfp(const ImageU8& left, const ImageU8& right,
                            const std::vector<uint8_t>* right_valid,
                            const geometry::DisparityField& disparity,
                            const ad::Var& initial_queries, bool use_dfp = true,
                            bool decode_right = true) const;

    // Spec surface: resolves the disparity through a provider (failures are
    // wrapped into provider_error), then runs the stereo forward.
    BdfpOutput forward_bdfp(const StereoFrame& frame, double bf, DisparityProvider& provider,
                            const ad::Var& initial_queries, bool use_dfp = true) const;

    // Same loss at every decoder layer, averaged (deep supervision), with a
    // fresh assignment per layer.
    BaselineLoss loss_deep(const ViewOutput& view, const GroundTruthSet& gt) const;

    LossWeights loss_weights() const;

  private:
    ViewOutput run_view(const ad::Var& f4_fused, const std::vector<uint8_t>& mem_keep,
                        const ad::Var& initial_queries, int64_t img_h, int64_t img_w) const;

    ModelConfig cfg_;
    ad::Var queries_;  // [N, D] learned initial queries
    nn::Conv2d conv1_, conv2_, conv3_, proj8_, lat4_, fuse4_, mem_conv_;
    struct DecoderLayer {
        nn::MultiheadAttention cross, self;
        nn::FeedForward ffn;
        nn::LayerNorm n1, n2, n3;
    };
    std::vector<DecoderLayer> layers_;
    nn::Linear class_head_;            // bias-free
    nn::Linear mask_mlp1_, mask_mlp2_;
    ad::Var mask_bias_;                // scalar
};

// Validity mask downsampling: all-valid blocks (conservative, for feature
// maps) or any-valid blocks (permissive, for attention keys).
std::vector<uint8_t> downsample_valid(const std::vector<uint8_t>& valid, int64_t h, int64_t w,
                                      int stride, bool require_all);

}  // namespace lacoste::qbs
