#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <thread>

#include "lacoste/config.hpp"
#include "lacoste/pipeline.hpp"
#include "testutil.hpp"

using namespace lacoste;
using namespace lacoste::pipeline;
namespace tu = testutil;
namespace fs = std::filesystem;

namespace {

// Tiny system + dataset shared across the suite.
SystemConfig tiny_system_cfg() {
    SystemConfig cfg;
    cfg.model.num_queries = 6;
    cfg.model.num_classes = 3;
    cfg.model.embed_dim = 16;
    cfg.model.decoder_layers = 2;
    cfg.model.heads = 4;
    cfg.model.enc_ch1 = 8;
    cfg.model.enc_ch2 = 12;
    cfg.set_classifier.encoder_layers = 1;
    cfg.set_classifier.heads = 4;
    cfg.sampler.num_tracklets = 8;
    cfg.sampler.lengths = {2, 4};
    cfg.lacls_model.dim = 16;
    cfg.lacls_model.layers = 1;
    cfg.lacls_model.heads = 4;
    cfg.lacls_model.grid = 4;
    cfg.patch.out_h = cfg.patch.out_w = 32;
    cfg.pseudo.d_min = 1.0;
    cfg.pseudo.d_max = 3.0;
    cfg.clip_len = 4;
    cfg.batch = 2;
    cfg.steps = 10;
    cfg.lr = 1e-3;
    return cfg;
}

synthdata::SceneConfig tiny_scene_cfg(uint64_t seed, int64_t clip_len = 4) {
    synthdata::SceneConfig scfg;
    scfg.height = 32;
    scfg.width = 48;
    scfg.classes = 3;
    scfg.objects_min = 1;
    scfg.objects_max = 2;
    scfg.clip_len = clip_len;
    scfg.bf = 24.0;
    scfg.seed = seed;
    return scfg;
}

struct TempDataset {
    std::string dir;
    synthdata::DatasetIndex index;
    TempDataset(const synthdata::SceneConfig& scfg, int64_t clips, bool monocular,
                const std::string& name) {
        dir = (fs::temp_directory_path() / name).string();
        fs::remove_all(dir);
        synthdata::write_dataset(scfg, clips, dir, monocular);
        index = synthdata::load_dataset(dir);
    }
    ~TempDataset() { fs::remove_all(dir); }
};

}  // namespace

TEST_CASE("memory bank: cache hit, LRU eviction at capacity 1") {
    MemoryBank bank(1);
    int calls = 0;
    auto entry = [&] {
        ViewEntry e;
        e.class_probs = Tensor::scalar(static_cast<double>(++calls)).reshaped({1, 1});
        return e;
    };
    BankKey a{"seq", 1, 0}, b{"seq", 2, 0};
    ViewEntry e1 = bank.get_or_compute(a, entry);
    CHECK(calls == 1);
    ViewEntry e2 = bank.get_or_compute(a, entry);  // hit: no recompute
    CHECK(calls == 1);
    CHECK(e2.class_probs[0] == e1.class_probs[0]);
    bank.get_or_compute(b, entry);  // evicts a (capacity 1)
    CHECK(calls == 2);
    bank.get_or_compute(a, entry);  // a was evicted: recompute
    CHECK(calls == 3);
    CHECK(bank.compute_count() == 3);
}

TEST_CASE("ensemble: degenerate passthrough is bitwise, weighted sum matches hand value") {
    Tensor p_b({1, 2}, {0.8, 0.2});
    Tensor p_s({1, 2}, {0.6, 0.4});
    Tensor p_a({1, 2}, {0.5, 0.5});
    EnsembleConfig mix{0.5, 0.3, 0.2};
    Tensor p_f = ensemble_probs(p_b, p_s, p_a, mix);
    CHECK(p_f[0] == doctest::Approx(0.68).epsilon(1e-12));
    CHECK(p_f[1] == doctest::Approx(0.32).epsilon(1e-12));

    EnsembleConfig only_b{1.0, 0.0, 0.0};
    Tensor pass = ensemble_probs(p_b, p_s, p_a, only_b);
    CHECK(std::memcmp(pass.data(), p_b.data(), sizeof(double) * 2) == 0);

    EnsembleConfig bad{0.0, 0.0, 0.0};
    CHECK_THROWS_AS(ensemble_probs(p_b, p_s, p_a, bad), argument_error);

    // argmax of p_f invariant under uniform alpha scaling
    EnsembleConfig scaled{1.5, 0.9, 0.6};
    Tensor p_f2 = ensemble_probs(p_b, p_s, p_a, scaled);
    CHECK((p_f2[0] > p_f2[1]) == (p_f[0] > p_f[1]));
}

TEST_CASE("semantic merge: single instance, overlap rule, empty scene") {
    FinalPrediction pred;
    pred.p_f = Tensor({3, 3});  // 2 classes + no-object
    pred.mask_logits = Tensor::full({3, 4, 4}, -10.0);
    // query 0: class 1, conf 0.9, covers left half
    pred.p_f.at2(0, 0) = 0.9;
    pred.p_f.at2(0, 2) = 0.1;
    for (int64_t y = 0; y < 4; ++y)
        for (int64_t x = 0; x < 2; ++x) pred.mask_logits.at3(0, y, x) = 10.0;
    // query 1: class 2, conf 0.6, covers columns 1..2 (overlaps query 0 at column 1)
    pred.p_f.at2(1, 1) = 0.6;
    pred.p_f.at2(1, 2) = 0.4;
    for (int64_t y = 0; y < 4; ++y)
        for (int64_t x = 1; x < 3; ++x) pred.mask_logits.at3(1, y, x) = 10.0;
    // query 2: no-object
    pred.p_f.at2(2, 2) = 1.0;

    ImageU16 ids;
    std::vector<int> kept;
    metrics::LabelMap map = semantic_merge(pred, 5, 0.5, &ids, &kept);
    CHECK(kept.size() == 2);
    for (int64_t y = 0; y < 4; ++y) {
        CHECK(map.at(y, 0) == 1);
        CHECK(map.at(y, 1) == 1);  // overlap: 0.9 beats 0.6
        CHECK(map.at(y, 2) == 2);
        CHECK(map.at(y, 3) == 0);
        CHECK(ids.at(y, 1) == 1);  // query index + 1
    }

    // all no-object -> all background
    FinalPrediction none;
    none.p_f = Tensor({2, 3});
    none.p_f.at2(0, 2) = 1.0;
    none.p_f.at2(1, 2) = 1.0;
    none.mask_logits = Tensor::full({2, 4, 4}, 10.0);
    metrics::LabelMap empty_map = semantic_merge(none, 5, 0.5);
    for (int v : empty_map.ids) CHECK(v == 0);

    // k = 1 keeps only the most confident
    metrics::LabelMap top1 = semantic_merge(pred, 1, 0.5);
    bool has2 = false;
    for (int v : top1.ids) has2 |= v == 2;
    CHECK(!has2);
}

TEST_CASE("system: save/load round trip and missing-component config error") {
    SystemConfig cfg = tiny_system_cfg();
    System sys(cfg, 42);
    const std::string dir = (fs::temp_directory_path() / "lacoste_sys_ckpt").string();
    fs::remove_all(dir);
    sys.save(dir, false);  // qbs + stscls only

    System loaded(cfg, 7);  // different init, then overwritten by load
    CHECK_THROWS_AS(loaded.load(dir), config_error);  // lacls required but absent
    sys.save_lacls(dir);
    loaded.load(dir);
    for (const auto& name : sys.params().names())
        for (int64_t i = 0; i < sys.params().get(name)->val.numel(); ++i)
            CHECK(static_cast<float>(sys.params().get(name)->val[i]) ==
                  static_cast<float>(loaded.params().get(name)->val[i]));
    fs::remove_all(dir);
}

TEST_CASE("inference: degenerate ensemble equals frame step bitwise; single-frame clip works") {
    TempDataset data(tiny_scene_cfg(3), 1, false, "lacoste_pipe_ds1");
    StereoClip clip = synthdata::load_clip(data.index, data.index.clip_ids[0]);

    SystemConfig cfg = tiny_system_cfg();
    cfg.ensemble = {1.0, 0.0, 0.0};
    System sys(cfg, 11);
    InferenceEngine engine(sys, true);
    FinalPrediction pred = engine.infer_clip(clip, 2);
    CHECK(std::memcmp(pred.p_f.data(), pred.p_b.data(),
                      sizeof(double) * static_cast<size_t>(pred.p_b.numel())) == 0);

    // spec boundary: T = 1 clip still completes, masks pass through
    StereoClip one = clip;
    one.frames.resize(1);
    one.id = "one";
    SystemConfig full_cfg = tiny_system_cfg();
    System full_sys(full_cfg, 11);
    InferenceEngine full_engine(full_sys, true);
    FinalPrediction p1 = full_engine.infer_clip(one, 1);
    CHECK(p1.p_f.dim(0) == full_cfg.model.num_queries);
    CHECK(p1.mask_logits.dim(1) == clip.h);
    CHECK_THROWS_AS(full_engine.infer_clip(one, 2), argument_error);
}

TEST_CASE("tracklet and location-agnostic steps commute and are pure") {
    TempDataset data(tiny_scene_cfg(5), 1, false, "lacoste_pipe_ds2");
    StereoClip clip = synthdata::load_clip(data.index, data.index.clip_ids[0]);
    SystemConfig cfg = tiny_system_cfg();
    System sys(cfg, 13);
    InferenceEngine engine(sys, true);
    FinalPrediction pred = engine.infer_clip(clip, 2);

    // rebuild the two step outputs in both orders from the same frame-step data
    InferenceEngine e2(sys, true);
    FinalPrediction again = e2.infer_clip(clip, 2);
    CHECK(tu::max_abs_diff(pred.p_s, again.p_s) == 0.0);
    CHECK(tu::max_abs_diff(pred.p_a, again.p_a) == 0.0);
    CHECK(tu::max_abs_diff(pred.p_f, again.p_f) == 0.0);
}

TEST_CASE("memory bank equivalence and one-new-timestamp-per-slide accounting") {
    TempDataset data(tiny_scene_cfg(7, 12), 1, false, "lacoste_pipe_ds3");
    StereoClip clip = synthdata::load_clip(data.index, data.index.clip_ids[0]);
    SystemConfig cfg = tiny_system_cfg();
    cfg.clip_len = 4;
    System sys(cfg, 17);

    InferenceEngine with_bank(sys, true);
    auto banked = with_bank.infer_sequence(clip);
    CHECK(with_bank.frame_computations() == clip.length());

    InferenceEngine without(sys, false);
    auto plain = without.infer_sequence(clip);
    REQUIRE(banked.size() == plain.size());
    for (size_t i = 0; i < banked.size(); ++i) {
        CHECK(tu::max_abs_diff(banked[i].p_f, plain[i].p_f) < 1e-6);
        CHECK(tu::max_abs_diff(banked[i].mask_logits, plain[i].mask_logits) < 1e-6);
    }

    // per-slide accounting: the first window costs T timestamps, then each
    // window advance costs exactly one, and clamped windows cost nothing
    InferenceEngine counted(sys, true);
    const int64_t T = cfg.clip_len, S = clip.length();
    const int64_t center = std::max<int64_t>(1, T / 2);
    int64_t prev_start = -1, prev_count = 0;
    for (int64_t t_star = 1; t_star <= S; ++t_star) {
        counted.infer_at(clip, t_star);
        const int64_t start = std::clamp<int64_t>(t_star - (center - 1), 1, S - T + 1);
        const int64_t delta = counted.frame_computations() - prev_count;
        if (prev_start < 0)
            CHECK(delta == T);
        else if (start != prev_start)
            CHECK(delta == 1);
        else
            CHECK(delta == 0);
        prev_start = start;
        prev_count = counted.frame_computations();
    }
    CHECK(counted.frame_computations() == S);
}

TEST_CASE("training: determinism, N_s = 0 reduces to baseline, loss decreases") {
    TempDataset data(tiny_scene_cfg(23), 3, false, "lacoste_pipe_ds4");

    auto trajectory = [&](int steps) {
        SystemConfig cfg = tiny_system_cfg();
        cfg.steps = steps;
        System sys(cfg, 31);
        Trainer trainer(sys, data.index);
        std::vector<double> losses;
        for (int s = 0; s < steps; ++s) losses.push_back(trainer.step().total);
        return losses;
    };
    auto l1 = trajectory(3), l2 = trajectory(3);
    CHECK(l1 == l2);  // fixed seed: identical loss trajectory

    {
        SystemConfig cfg = tiny_system_cfg();
        cfg.sampler.num_tracklets = 0;
        System sys(cfg, 31);
        Trainer trainer(sys, data.index);
        TrainStepResult r = trainer.step();
        CHECK(r.total == doctest::Approx(r.baseline).epsilon(1e-12));
        CHECK(r.stscls_total == 0.0);
    }

    {
        SystemConfig cfg = tiny_system_cfg();
        cfg.steps = 40;
        cfg.lr = 2e-3;
        System sys(cfg, 31);
        Trainer trainer(sys, data.index);
        double first = 0, last = 0;
        for (int s = 0; s < 40; ++s) {
            double t = trainer.step().baseline;
            if (s == 0) first = t;
            last = t;
        }
        CHECK(last < first);  // optimization smoke
    }
}

TEST_CASE("pseudo-stereo inference runs on monocular data") {
    TempDataset data(tiny_scene_cfg(29), 1, true, "lacoste_pipe_ds5");
    StereoClip clip = synthdata::load_clip(data.index, data.index.clip_ids[0]);
    CHECK(!clip.frames[0].right.has_value());
    SystemConfig cfg = tiny_system_cfg();
    cfg.pseudo_stereo = true;
    System sys(cfg, 37);
    InferenceEngine engine(sys, true);
    FinalPrediction pred = engine.infer_clip(clip, 2);
    CHECK(pred.p_f.dim(0) == cfg.model.num_queries);
    // deterministic
    InferenceEngine engine2(sys, true);
    FinalPrediction again = engine2.infer_clip(clip, 2);
    CHECK(tu::max_abs_diff(pred.p_f, again.p_f) == 0.0);
}

TEST_CASE("concurrent inference over distinct clips matches sequential") {
    TempDataset data(tiny_scene_cfg(41), 2, false, "lacoste_pipe_ds6");
    StereoClip c0 = synthdata::load_clip(data.index, data.index.clip_ids[0]);
    StereoClip c1 = synthdata::load_clip(data.index, data.index.clip_ids[1]);
    SystemConfig cfg = tiny_system_cfg();
    System sys(cfg, 43);

    InferenceEngine seq_engine(sys, true);
    FinalPrediction s0 = seq_engine.infer_clip(c0, 2);
    FinalPrediction s1 = seq_engine.infer_clip(c1, 2);

    FinalPrediction t0, t1;
    std::thread a([&] {
        InferenceEngine e(sys, true);
        t0 = e.infer_clip(c0, 2);
    });
    std::thread b([&] {
        InferenceEngine e(sys, true);
        t1 = e.infer_clip(c1, 2);
    });
    a.join();
    b.join();
    CHECK(tu::max_abs_diff(t0.p_f, s0.p_f) == 0.0);
    CHECK(tu::max_abs_diff(t1.p_f, s1.p_f) == 0.0);
}

TEST_CASE("gt semantic map and dataset evaluation smoke") {
    TempDataset data(tiny_scene_cfg(47), 2, false, "lacoste_pipe_ds7");
    StereoClip clip = synthdata::load_clip(data.index, data.index.clip_ids[0]);
    metrics::LabelMap gt = pipeline::gt_semantic_map(clip.frames[0].gt);
    int64_t nonzero = 0;
    for (int v : gt.ids) nonzero += v != 0;
    CHECK(nonzero > 0);

    SystemConfig cfg = tiny_system_cfg();
    System sys(cfg, 53);
    EvalOptions opt;
    EvalSummary sum = evaluate_dataset(sys, data.index, opt);
    CHECK(sum.frames == 8);
    CHECK(sum.matched_queries > 0);
    CHECK(sum.iou.mc_iou >= 0.0);
    CHECK(sum.iou.mc_iou <= 1.0);
}

TEST_CASE("config json round trip preserves every key") {
    SystemConfig cfg = tiny_system_cfg();
    cfg.ensemble = {0.5, 0.25, 0.25};
    cfg.pseudo_stereo = true;
    cfg.set_classifier.mask_non_objects = true;
    cfg.seed = 991;
    std::string text = config_to_json(cfg);
    SystemConfig back = config_from_json(text);
    CHECK(back.model.num_queries == cfg.model.num_queries);
    CHECK(back.model.embed_dim == cfg.model.embed_dim);
    CHECK(back.ensemble.alpha_b == cfg.ensemble.alpha_b);
    CHECK(back.pseudo_stereo == cfg.pseudo_stereo);
    CHECK(back.set_classifier.mask_non_objects == cfg.set_classifier.mask_non_objects);
    CHECK(back.seed == cfg.seed);
    CHECK(back.sampler.lengths == cfg.sampler.lengths);
    // defaults survive partial configs
    SystemConfig partial = config_from_json(R"({"train": {"lr": 0.5}})");
    CHECK(partial.lr == 0.5);
    CHECK(partial.model.num_queries == 20);
    CHECK_THROWS_AS(config_from_json("not json"), config_error);
}
