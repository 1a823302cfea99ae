#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>

#include "lacoste/lacls.hpp"
#include "lacoste/geometry.hpp"
#include "testutil.hpp"

using namespace lacoste;
using namespace lacoste::lacls;
namespace tu = testutil;
namespace fs = std::filesystem;

namespace {

// textured square at (y0,x0) of side s on an otherwise noisy image
Tensor scene_with_square(int64_t h, int64_t w, int64_t y0, int64_t x0, int64_t side, Rng& rng,
                         std::vector<uint8_t>& mask) {
    Tensor img({3, h, w});
    for (int64_t i = 0; i < img.numel(); ++i) img[i] = uniform_real(rng, 0, 1);
    mask.assign(static_cast<size_t>(h * w), 0);
    for (int64_t y = 0; y < side; ++y)
        for (int64_t x = 0; x < side; ++x) {
            const int64_t p = (y0 + y) * w + (x0 + x);
            mask[static_cast<size_t>(p)] = 1;
            // texture anchored to the square's own coordinates
            img[0 * h * w + p] = (x / 2 + y / 2) % 2 ? 0.9 : 0.1;
            img[1 * h * w + p] = 0.5;
            img[2 * h * w + p] = (x / 3) % 2 ? 0.8 : 0.2;
        }
    return img;
}

}  // namespace

TEST_CASE("crop_and_mask: full-image mask is a plain resize") {
    Rng rng(3);
    Tensor img({3, 32, 48});
    for (int64_t i = 0; i < img.numel(); ++i) img[i] = uniform_real(rng, 0, 1);
    std::vector<uint8_t> full(32 * 48, 1);
    PatchSpec spec;
    spec.expansion = 1.0;
    auto patch = crop_and_mask(img, full, spec);
    REQUIRE(patch.has_value());
    Tensor direct = ad::upsample_bilinear(ad::constant(img), 64, 64)->val;
    CHECK(tu::max_abs_diff(*patch, direct) < 1e-12);
}

TEST_CASE("crop_and_mask: corner square keeps texture, zero fill elsewhere") {
    Rng rng(5);
    std::vector<uint8_t> mask;
    Tensor img = scene_with_square(40, 40, 0, 0, 10, rng, mask);
    PatchSpec spec;
    spec.expansion = 1.0;
    auto patch = crop_and_mask(img, mask, spec);
    REQUIRE(patch.has_value());
    // non-mask background never leaks into the patch: everything outside the
    // square is exactly fill (the square fills the whole bbox here, so just
    // verify the patch reproduces a pure upscale of the masked square)
    Tensor square({3, 10, 10});
    for (int64_t c = 0; c < 3; ++c)
        for (int64_t y = 0; y < 10; ++y)
            for (int64_t x = 0; x < 10; ++x) square.at3(c, y, x) = img.at3(c, y, x);
    Tensor expect = ad::upsample_bilinear(ad::constant(square), 64, 64)->val;
    CHECK(tu::max_abs_diff(*patch, expect) < 1e-12);
}

TEST_CASE("crop_and_mask: translated instance yields the same patch") {
    Rng rng(7);
    std::vector<uint8_t> mask1, mask2;
    Tensor img1 = scene_with_square(48, 64, 5, 7, 12, rng, mask1);
    Tensor img2 = scene_with_square(48, 64, 20, 30, 12, rng, mask2);
    // force identical texture: copy the square pixels from img1
    for (int64_t c = 0; c < 3; ++c)
        for (int64_t y = 0; y < 12; ++y)
            for (int64_t x = 0; x < 12; ++x)
                img2.at3(c, 20 + y, 30 + x) = img1.at3(c, 5 + y, 7 + x);
    PatchSpec spec;
    auto p1 = crop_and_mask(img1, mask1, spec);
    auto p2 = crop_and_mask(img2, mask2, spec);
    REQUIRE(p1.has_value());
    REQUIRE(p2.has_value());
    double mean_abs = 0;
    for (int64_t i = 0; i < p1->numel(); ++i) mean_abs += std::abs((*p1)[i] - (*p2)[i]);
    mean_abs /= static_cast<double>(p1->numel());
    CHECK(mean_abs < 1e-3);
}

TEST_CASE("crop_and_mask: empty mask signals empty-segment; errors") {
    Tensor img({3, 8, 8});
    std::vector<uint8_t> empty(64, 0);
    PatchSpec spec;
    CHECK(!crop_and_mask(img, empty, spec).has_value());
    std::vector<uint8_t> bad(32, 1);
    CHECK_THROWS_AS(crop_and_mask(img, bad, spec), argument_error);
    PatchSpec tiny;
    tiny.out_h = 8;
    CHECK_THROWS_AS(tiny.validate(), argument_error);
    PatchSpec shrink;
    shrink.expansion = 0.5;
    CHECK_THROWS_AS(shrink.validate(), argument_error);
}

TEST_CASE("classify_patch: normalized, deterministic, background-independent with zero fill") {
    Rng rng(11);
    ClassifierConfig cfg;
    cfg.dim = 32;
    cfg.layers = 1;
    cfg.heads = 4;
    PatchSpec spec;
    nn::ParamStore ps;
    LaclsModel model(cfg, 3, spec, ps, rng);

    std::vector<uint8_t> mask;
    Tensor img = scene_with_square(40, 40, 8, 8, 12, rng, mask);
    auto patch = crop_and_mask(img, mask, spec);
    REQUIRE(patch.has_value());
    Tensor probs = model.class_probs(*patch);
    double s = 0;
    for (int64_t j = 0; j < probs.dim(1); ++j) s += probs.at2(0, j);
    CHECK(s == doctest::Approx(1.0).epsilon(1e-6));

    Tensor probs2 = model.class_probs(*patch);
    CHECK(tu::max_abs_diff(probs, probs2) == 0.0);

    // same foreground, different background: identical outputs under zero fill
    Tensor img2 = img;
    for (int64_t p = 0; p < 40 * 40; ++p)
        if (!mask[static_cast<size_t>(p)])
            for (int64_t c = 0; c < 3; ++c) img2[c * 1600 + p] = uniform_real(rng, 0, 1);
    auto patch2 = crop_and_mask(img2, mask, spec);
    CHECK(tu::max_abs_diff(*patch, *patch2) < 1e-12);
    CHECK(tu::max_abs_diff(model.class_probs(*patch2), probs) < 1e-6);

    CHECK_THROWS_AS(model.classify(Tensor({3, 32, 32})), argument_error);
}

TEST_CASE("lacls CE gradients pass finite differences") {
    Rng rng(13);
    ClassifierConfig cfg;
    cfg.dim = 16;
    cfg.layers = 1;
    cfg.heads = 2;
    cfg.grid = 4;
    PatchSpec spec;
    spec.out_h = spec.out_w = 16;
    nn::ParamStore ps;
    LaclsModel model(cfg, 2, spec, ps, rng);
    Tensor patch = random_uniform({3, 16, 16}, 0, 1, rng);
    auto loss_fn = [&] {
        return ad::cross_entropy_rows(model.classify(patch).logits, {1}, {1.0});
    };
    auto res = tu::check_param_gradients(ps, loss_fn, rng, 3);
    INFO("worst at ", res.worst_where);
    CHECK(res.worst_rel < 1e-3);
}

TEST_CASE("offline training separates an easy 2-class set and is byte-deterministic") {
    const std::string dir = (fs::temp_directory_path() / "lacoste_lacls_ds").string();
    fs::remove_all(dir);
    synthdata::SceneConfig scfg;
    scfg.height = 48;
    scfg.width = 64;
    scfg.classes = 2;
    scfg.objects_min = 2;
    scfg.objects_max = 2;
    scfg.clip_len = 2;
    scfg.bf = 30;
    scfg.seed = 5;
    synthdata::write_dataset(scfg, 10, dir, false);
    auto data = synthdata::load_dataset(dir);

    auto run = [&](nn::ParamStore& ps) {
        Rng rng(21);
        ClassifierConfig cfg;
        cfg.dim = 32;
        cfg.layers = 1;
        cfg.heads = 4;
        PatchSpec spec;
        LaclsModel model(cfg, 2, spec, ps, rng);
        TrainOptions opt;
        opt.epochs = 6;
        opt.seed = 77;
        opt.lr = 2e-3;
        return train_lacls_offline(data, model, ps, opt);
    };
    nn::ParamStore ps1, ps2;
    TrainStats s1 = run(ps1);
    CHECK(s1.samples > 20);
    CHECK(s1.train_accuracy >= 0.99);

    TrainStats s2 = run(ps2);
    CHECK(s2.train_accuracy == s1.train_accuracy);
    for (const auto& name : ps1.names())
        CHECK(tu::max_abs_diff(ps1.get(name)->val, ps2.get(name)->val) == 0.0);

    // empty dataset -> data error
    fs::remove_all(dir);
    synthdata::DatasetIndex empty;
    empty.dir = dir;
    nn::ParamStore ps3;
    Rng rng(1);
    ClassifierConfig cfg;
    cfg.dim = 32;
    cfg.layers = 1;
    PatchSpec spec;
    LaclsModel model(cfg, 2, spec, ps3, rng);
    TrainOptions opt;
    CHECK_THROWS_AS(train_lacls_offline(empty, model, ps3, opt), data_error);
}
