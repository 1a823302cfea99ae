#pragma once

#include <optional>

#include "lacoste/nn.hpp"
#include "lacoste/synthdata.hpp"

namespace lacoste::lacls {

struct PatchSpec {
    int64_t out_h = 64, out_w = 64;
    double expansion = 1.2;  // bbox growth around the mask
    enum class Fill { zeros, mean } fill = Fill::zeros;

    void validate() const {
        if (out_h < 16 || out_w < 16) throw argument_error("PatchSpec: output size >= 16");
        if (expansion < 1.0) throw argument_error("PatchSpec: expansion >= 1.0");
    }
};

// Tight mask bbox expanded and clipped, background filled per spec, resized
// bilinearly to the patch size. Empty mask -> nullopt (caller skips the
// query).
std::optional<Tensor> crop_and_mask(const Tensor& image, const std::vector<uint8_t>& mask,
                                    const PatchSpec& spec);

struct ClassifierConfig {
    int64_t dim = 64;
    int layers = 2;
    int heads = 4;
    int grid = 8;  // grid x grid tokens over the patch

    void validate() const {
        if (dim % 4 != 0 || dim % heads != 0 || layers < 1 || grid < 1)
            throw argument_error("lacls::ClassifierConfig: bad geometry");
    }
};

// Small attention-based patch classifier; the class token of the last layer
// is the location-agnostic object query embedding e^a.
class LaclsModel {
  public:
    LaclsModel(const ClassifierConfig& cfg, int num_classes, const PatchSpec& spec,
               nn::ParamStore& ps, Rng& rng);

    struct Output {
        ad::Var embedding;  // e^a, [1, dim]
        ad::Var logits;     // [1, C+1]
    };
    Output classify(const Tensor& patch) const;
    Tensor class_probs(const Tensor& patch) const;  // p^a, sums to 1

    const PatchSpec& patch_spec() const { return spec_; }
    const ClassifierConfig& config() const { return cfg_; }
    int num_classes() const { return num_classes_; }

  private:
    ClassifierConfig cfg_;
    int num_classes_;
    PatchSpec spec_;
    nn::Linear patch_embed_;
    ad::Var pos_embed_;  // [grid*grid, dim]
    ad::Var cls_token_;  // [1, dim]
    struct EncoderLayer {
        nn::MultiheadAttention attn;
        nn::FeedForward ffn;
        nn::LayerNorm n1, n2;
    };
    std::vector<EncoderLayer> layers_;
    nn::Linear head_;
};

struct TrainOptions {
    int epochs = 4;
    int batch = 16;
    double lr = 1e-3;
    double weight_decay = 0.01;
    uint64_t seed = 1;
    int frame_stride = 1;   // subsample frames when building the patch set
    int64_t max_samples = 0;  // 0 = unlimited
    bool verbose = false;
};

struct TrainStats {
    double final_loss = 0.0;
    double train_accuracy = 0.0;
    int64_t samples = 0;
};

// Offline training on ground-truth masks (crop_and_mask(image, gt mask) vs
// class), cross-entropy objective, AdamW; deterministic per seed.
TrainStats train_lacls_offline(const synthdata::DatasetIndex& data, LaclsModel& model,
                               nn::ParamStore& ps, const TrainOptions& opt);

}  // namespace lacoste::lacls
