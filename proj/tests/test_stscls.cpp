#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>

#include "lacoste/stscls.hpp"
#include "testutil.hpp"

using namespace lacoste;
using namespace lacoste::stscls;
namespace tu = testutil;

namespace {

TrackletItem make_item(Tensor e, int64_t identity, int label, View view = View::left, int t = 1,
                       int layer = 1, bool non_object = false) {
    TrackletItem item;
    item.embedding = ad::leaf(e.reshaped({1, e.numel()}), false);
    item.identity = identity;
    item.label = label;
    item.tag = {view, t, layer};
    item.non_object = non_object;
    return item;
}

std::vector<TrackletItem> random_pool(int identities, int items_per_id, int64_t dim,
                                      const std::vector<int>& labels, Rng& rng) {
    std::vector<TrackletItem> pool;
    for (int id = 1; id <= identities; ++id)
        for (int k = 0; k < items_per_id; ++k)
            pool.push_back(make_item(random_uniform({dim}, -1, 1, rng), id,
                                     labels[static_cast<size_t>(id - 1)]));
    return pool;
}

}  // namespace

TEST_CASE("align_queries: learned at t=1, verbatim copy later, length check") {
    Rng rng(3);
    ad::Var learned = ad::leaf(random_uniform({5, 8}, -1, 1, rng), true);
    CHECK(align_queries(nullptr, learned).get() == learned.get());
    ad::Var prev = ad::leaf(random_uniform({5, 8}, -1, 1, rng), false);
    CHECK(align_queries(prev, learned).get() == prev.get());
    ad::Var bad = ad::leaf(random_uniform({4, 8}, -1, 1, rng), false);
    CHECK_THROWS_AS(align_queries(bad, learned), argument_error);
}

TEST_CASE("label_pseudo_ids: formula, injectivity, range errors") {
    CHECK(label_pseudo_ids(1, 1, 100) == 1);
    CHECK(label_pseudo_ids(2, 5, 100) == 105);
    std::map<int64_t, std::pair<int, int>> seen;
    for (int i = 1; i <= 8; ++i)
        for (int n = 1; n <= 20; ++n) {
            const int64_t id = label_pseudo_ids(i, n, 20);
            CHECK(seen.emplace(id, std::make_pair(i, n)).second);
        }
    CHECK_THROWS_AS(label_pseudo_ids(0, 1, 10), argument_error);
    CHECK_THROWS_AS(label_pseudo_ids(1, 11, 10), argument_error);
    CHECK_THROWS_AS(label_pseudo_ids(1, 0, 10), argument_error);
}

TEST_CASE("identity_match_filter: sizes, engineered routing, empty GT") {
    const int64_t h = 4, w = 4;
    qbs::PredictionSet pred;
    pred.class_probs = Tensor({5, 3});
    pred.class_probs.fill(1.0 / 3.0);
    pred.mask_logits = Tensor::full({5, h, w}, -8.0);
    pred.img_h = h;
    pred.img_w = w;
    GroundTruthSet gt;
    gt.h = h;
    gt.w = w;
    GtInstance a;
    a.class_id = 2;
    a.identity = 1;
    a.mask.assign(16, 0);
    a.mask[3] = 1;
    GtInstance b;
    b.class_id = 1;
    b.identity = 2;
    b.mask.assign(16, 0);
    b.mask[12] = 1;
    gt.instances = {a, b};
    pred.class_probs.at2(3, 1) = 0.98;
    pred.class_probs.at2(3, 0) = pred.class_probs.at2(3, 2) = 0.01;
    pred.mask_logits[3 * 16 + 3] = 9.0;
    qbs::LossWeights weights;
    auto matched = identity_match_filter(pred, gt, weights);
    CHECK(matched.size() == 2);
    bool found = false;
    for (auto [q, c] : matched)
        if (q == 3) {
            CHECK(c == 2);
            found = true;
        }
    CHECK(found);

    GroundTruthSet empty;
    empty.h = h;
    empty.w = w;
    CHECK(identity_match_filter(pred, empty, weights).empty());
}

TEST_CASE("anchor weights follow inverse category frequency") {
    Rng rng(5);
    std::vector<TrackletItem> pool;
    for (int id = 1; id <= 100; ++id)
        pool.push_back(make_item(random_uniform({8}, -1, 1, rng), id, id <= 90 ? 1 : 2));
    auto weights = anchor_category_weights(pool);
    REQUIRE(weights.size() == 2);
    std::map<int, double> by_cat(weights.begin(), weights.end());
    CHECK(by_cat[1] == doctest::Approx(0.1).epsilon(1e-9));
    CHECK(by_cat[2] == doctest::Approx(0.9).epsilon(1e-9));

    SamplerConfig cfg;
    cfg.num_tracklets = 2000;
    cfg.lengths = {2};
    cfg.max_distractor_fraction = 0.0;
    auto tracklets = generate_tracklets(pool, cfg, 99);
    int class2 = 0;
    for (const auto& t : tracklets) class2 += t.label == 2;
    CHECK(std::abs(class2 / 2000.0 - 0.9) < 0.05);
}

TEST_CASE("generate_tracklets: mixing cap, anchor majority, determinism, degenerate pool") {
    Rng rng(7);
    std::vector<TrackletItem> pool = random_pool(4, 6, 8, {1, 2, 3, 4}, rng);

    SamplerConfig no_mix;
    no_mix.num_tracklets = 50;
    no_mix.max_distractor_fraction = 0.0;
    for (const auto& t : generate_tracklets(pool, no_mix, 5)) {
        const int64_t id0 = t.items[0].identity;
        for (const auto& item : t.items) {
            CHECK(item.identity == id0);
            CHECK(item.label == t.label);
        }
    }

    SamplerConfig mix;
    mix.num_tracklets = 200;
    auto tracklets = generate_tracklets(pool, mix, 17);
    for (const auto& t : tracklets) {
        REQUIRE(!t.items.empty());
        CHECK(std::find(mix.lengths.begin(), mix.lengths.end(),
                        static_cast<int>(t.items.size())) != mix.lengths.end());
        std::map<int64_t, int> counts;
        for (const auto& item : t.items) ++counts[item.identity];
        int best = 0;
        for (auto [id, n] : counts) best = std::max(best, n);
        CHECK(best * 2 >= static_cast<int>(t.items.size()));
    }

    auto again = generate_tracklets(pool, mix, 17);
    REQUIRE(again.size() == tracklets.size());
    for (size_t i = 0; i < again.size(); ++i) {
        CHECK(again[i].label == tracklets[i].label);
        REQUIRE(again[i].items.size() == tracklets[i].items.size());
        for (size_t k = 0; k < again[i].items.size(); ++k)
            CHECK(again[i].items[k].identity == tracklets[i].items[k].identity);
    }

    std::vector<TrackletItem> tiny{make_item(random_uniform({8}, -1, 1, rng), 1, 2)};
    for (const auto& t : generate_tracklets(tiny, mix, 3)) {
        CHECK(t.items.size() == 1);
        CHECK(t.label == 2);
    }
}

TEST_CASE("pairwise_similarity: hand values, symmetry, zero-norm error") {
    Tensor same({2, 3}, {1, 2, 2, 1, 2, 2});
    auto sim = pairwise_similarity(ad::leaf(same, false), 0.1);
    CHECK(sim.probs->val.at2(0, 1) == doctest::Approx(0.99995).epsilon(1e-5));
    CHECK(sim.probs->val.at2(0, 0) == doctest::Approx(0.99995).epsilon(1e-5));

    Tensor ortho({2, 2}, {1, 0, 0, 1});
    auto sim2 = pairwise_similarity(ad::leaf(ortho, false), 0.1);
    CHECK(sim2.probs->val.at2(0, 1) == doctest::Approx(0.5));
    CHECK(sim2.probs->val.at2(1, 0) == doctest::Approx(0.5));

    Rng rng(11);
    auto sim3 = pairwise_similarity(ad::leaf(random_uniform({5, 7}, -1, 1, rng), false), 0.3);
    for (int64_t i = 0; i < 5; ++i)
        for (int64_t j = 0; j < 5; ++j) {
            CHECK(sim3.probs->val.at2(i, j) == sim3.probs->val.at2(j, i));
            CHECK(sim3.probs->val.at2(i, j) > 0.0);
            CHECK(sim3.probs->val.at2(i, j) < 1.0);
        }

    Tensor with_zero({2, 3}, {0, 0, 0, 1, 1, 1});
    CHECK_THROWS_AS(pairwise_similarity(ad::leaf(with_zero, false), 0.1), data_error);
}

TEST_CASE("identity targets: symmetric with unit diagonal") {
    Tensor t = identity_targets({7, 7, 9});
    CHECK(t.at2(0, 0) == 1.0);
    CHECK(t.at2(0, 1) == 1.0);
    CHECK(t.at2(1, 0) == 1.0);
    CHECK(t.at2(0, 2) == 0.0);
    CHECK(t.at2(2, 2) == 1.0);
}

TEST_CASE("set_classify: shapes, softmax, permutation invariance, masking") {
    Rng rng(13);
    SetClassifierConfig cfg;
    cfg.token_dim = 16;
    cfg.encoder_layers = 2;
    cfg.heads = 4;
    nn::ParamStore ps;
    SetClassifier cls(cfg, 8, 3, ps, rng);

    Tracklet single;
    single.label = 2;
    single.items = {make_item(random_uniform({8}, -1, 1, rng), 1, 2)};
    auto out1 = cls.classify(single);
    CHECK(out1.set_logits->val.shape() == std::vector<int64_t>{1, 4});
    CHECK(out1.item_logits->val.shape() == std::vector<int64_t>{1, 4});
    ad::Var sp = ad::softmax_rows(out1.set_logits);
    double sum = 0;
    for (int64_t j = 0; j < 4; ++j) sum += sp->val.at2(0, j);
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));

    Tracklet t3;
    t3.label = 1;
    for (int k = 0; k < 3; ++k)
        t3.items.push_back(make_item(random_uniform({8}, -1, 1, rng), k + 1, 1));
    auto base = cls.classify(t3);

    Tracklet perm = t3;
    std::swap(perm.items[0], perm.items[2]);
    auto permuted = cls.classify(perm);
    CHECK(tu::max_abs_diff(base.set_logits->val, permuted.set_logits->val) < 1e-9);
    for (int64_t j = 0; j < 4; ++j) {
        CHECK(permuted.item_logits->val.at2(0, j) ==
              doctest::Approx(base.item_logits->val.at2(2, j)).epsilon(1e-9));
        CHECK(permuted.item_logits->val.at2(2, j) ==
              doctest::Approx(base.item_logits->val.at2(0, j)).epsilon(1e-9));
    }

    SetClassifierConfig mcfg = cfg;
    mcfg.mask_non_objects = true;
    nn::ParamStore ps2;
    Rng rng2(13);
    SetClassifier mcls(mcfg, 8, 3, ps2, rng2);
    Tracklet masked = t3;
    masked.items[1].non_object = true;
    auto with_mask = mcls.classify(masked);
    CHECK(with_mask.attended == std::vector<uint8_t>{1, 0, 1});
    Tracklet reduced;
    reduced.label = t3.label;
    reduced.items = {t3.items[0], t3.items[2]};
    auto red = mcls.classify(reduced);
    CHECK(tu::max_abs_diff(with_mask.set_logits->val, red.set_logits->val) < 1e-6);
    for (int64_t j = 0; j < 4; ++j) {
        CHECK(with_mask.item_logits->val.at2(0, j) ==
              doctest::Approx(red.item_logits->val.at2(0, j)).epsilon(1e-9));
        CHECK(with_mask.item_logits->val.at2(2, j) ==
              doctest::Approx(red.item_logits->val.at2(1, j)).epsilon(1e-9));
    }

    Tracklet empty;
    CHECK_THROWS_AS(cls.classify(empty), argument_error);
}

TEST_CASE("loss_stscls: zero loss, hand CE and BCE values") {
    ad::Var set_perfect = ad::leaf(Tensor({1, 3}, {500.0, 0.0, 0.0}), false);
    ad::Var items_perfect = ad::leaf(Tensor({2, 3}, {500, 0, 0, 500, 0, 0}), false);
    ad::Var sim_perfect = ad::leaf(Tensor({2, 2}, {500, 500, 500, 500}), false);
    Tensor target = identity_targets({4, 4});
    auto zero = loss_stscls({set_perfect}, {items_perfect}, {1}, {{1, 1}}, sim_perfect, target);
    CHECK(zero.total->val[0] == doctest::Approx(0.0).epsilon(1e-9));

    // p^s(y^s) = 0.25 via uniform logits over 4 entries
    ad::Var uniform4 = ad::leaf(Tensor({1, 4}), false);
    ad::Var no_items = ad::leaf(Tensor({0, 4}), false);
    auto sc = loss_stscls({uniform4}, {no_items}, {2}, {{}}, nullptr, Tensor({0, 0}));
    CHECK(sc.sc->val[0] == doctest::Approx(1.38629).epsilon(1e-5));

    const double logit08 = std::log(0.8 / 0.2);
    ad::Var sim08 = ad::leaf(Tensor::full({2, 2}, logit08), false);
    auto ida = loss_stscls({}, {}, {}, {}, sim08, identity_targets({3, 3}));
    CHECK(ida.ida->val[0] == doctest::Approx(0.89257).epsilon(1e-5));
    CHECK(ida.total->val[0] == doctest::Approx(0.89257).epsilon(1e-5));
}

TEST_CASE("L_ida invariant under simultaneous permutation of embeddings and targets") {
    Rng rng(17);
    Tensor e = random_uniform({4, 6}, -1, 1, rng);
    std::vector<int64_t> ids{1, 1, 2, 3};
    auto sim = pairwise_similarity(ad::leaf(e, false), 0.2);
    auto loss = loss_stscls({}, {}, {}, {}, sim.logits, identity_targets(ids));

    std::vector<int64_t> perm{2, 0, 3, 1};
    Tensor ep({4, 6});
    std::vector<int64_t> idp(4);
    for (int64_t i = 0; i < 4; ++i) {
        idp[static_cast<size_t>(i)] = ids[static_cast<size_t>(perm[static_cast<size_t>(i)])];
        for (int64_t j = 0; j < 6; ++j)
            ep.at2(i, j) = e.at2(perm[static_cast<size_t>(i)], j);
    }
    auto simp = pairwise_similarity(ad::leaf(ep, false), 0.2);
    auto lossp = loss_stscls({}, {}, {}, {}, simp.logits, identity_targets(idp));
    CHECK(loss.ida->val[0] == doctest::Approx(lossp.ida->val[0]).epsilon(1e-12));
}

TEST_CASE("gradients: set classifier and all three losses") {
    Rng rng(19);
    SetClassifierConfig cfg;
    cfg.token_dim = 12;
    cfg.encoder_layers = 1;
    cfg.heads = 2;
    nn::ParamStore ps;
    SetClassifier cls(cfg, 6, 2, ps, rng);

    std::vector<ad::Var> leaves;
    Tracklet t;
    t.label = 1;
    for (int k = 0; k < 3; ++k) {
        TrackletItem item = make_item(random_uniform({6}, -1, 1, rng), k % 2 + 1, k % 2 + 1);
        item.embedding = ad::leaf(item.embedding->val, true);
        leaves.push_back(item.embedding);
        t.items.push_back(item);
    }
    auto loss_fn = [&] {
        auto out = cls.classify(t);
        std::vector<ad::Var> rows;
        for (const auto& item : t.items) rows.push_back(item.embedding);
        auto sim = pairwise_similarity(ad::concat_rows(rows), 0.2);
        auto loss = loss_stscls({out.set_logits}, {out.item_logits}, {t.label}, {{1, 2, 1}},
                                sim.logits, identity_targets({1, 2, 1}));
        return loss.total;
    };
    std::vector<std::pair<std::string, ad::Var>> checked;
    for (const auto& name : ps.names()) checked.emplace_back(name, ps.get(name));
    for (size_t i = 0; i < leaves.size(); ++i)
        checked.emplace_back("item" + std::to_string(i), leaves[i]);
    auto res = tu::check_gradients(checked, loss_fn, rng, 3);
    INFO("worst at ", res.worst_where);
    CHECK(res.worst_rel < 1e-3);
}

TEST_CASE("tracklet jsonl dump carries tags, ids, labels and offsets") {
    namespace fs = std::filesystem;
    Rng rng(23);
    std::vector<TrackletItem> pool = random_pool(2, 2, 4, {1, 2}, rng);
    SamplerConfig cfg;
    cfg.num_tracklets = 3;
    cfg.lengths = {2};
    auto tracklets = generate_tracklets(pool, cfg, 7);
    const auto dir = fs::temp_directory_path();
    const std::string jsonl = (dir / "lacoste_tracklets.jsonl").string();
    const std::string bin = (dir / "lacoste_tracklets.bin").string();
    dump_tracklets_jsonl(tracklets, jsonl, bin);
    std::ifstream in(jsonl);
    std::string line;
    int lines = 0;
    int64_t items = 0;
    while (std::getline(in, line)) {
        CHECK(line.find("\"offset\"") != std::string::npos);
        CHECK(line.find("\"identity\"") != std::string::npos);
        ++lines;
    }
    for (const auto& t : tracklets) items += static_cast<int64_t>(t.items.size());
    CHECK(lines == 3);
    CHECK(fs::file_size(bin) == static_cast<uintmax_t>(items * 4 * sizeof(float)));
    fs::remove(jsonl);
    fs::remove(bin);
}
