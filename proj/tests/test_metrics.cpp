#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <set>

#include "lacoste/metrics.hpp"
#include "testutil.hpp"

using namespace lacoste;
using namespace lacoste::metrics;

namespace {

// Independent oracle built on literal pixel index sets; the implementation
// under test uses single-pass counting, so the two routes stay distinct.
struct Oracle {
    static std::set<int64_t> pixels(const LabelMap& m, int c) {
        std::set<int64_t> s;
        for (size_t i = 0; i < m.ids.size(); ++i)
            if (m.ids[i] == c) s.insert(static_cast<int64_t>(i));
        return s;
    }
    static std::optional<double> iou(const LabelMap& p, const LabelMap& g, int c) {
        auto sp = pixels(p, c), sg = pixels(g, c);
        std::vector<int64_t> inter, uni;
        std::set_intersection(sp.begin(), sp.end(), sg.begin(), sg.end(),
                              std::back_inserter(inter));
        std::set_union(sp.begin(), sp.end(), sg.begin(), sg.end(), std::back_inserter(uni));
        if (uni.empty()) return std::nullopt;
        return static_cast<double>(inter.size()) / static_cast<double>(uni.size());
    }
    static std::optional<double> dice(const LabelMap& p, const LabelMap& g, int c) {
        auto sp = pixels(p, c), sg = pixels(g, c);
        if (sp.empty() && sg.empty()) return std::nullopt;
        std::vector<int64_t> inter;
        std::set_intersection(sp.begin(), sp.end(), sg.begin(), sg.end(),
                              std::back_inserter(inter));
        return 2.0 * static_cast<double>(inter.size()) /
               static_cast<double>(sp.size() + sg.size());
    }
    static IouSummary ious(const std::vector<LabelMap>& preds, const std::vector<LabelMap>& gts,
                           int C) {
        IouSummary s;
        s.frames = static_cast<int64_t>(preds.size());
        double ch = 0, isi = 0;
        int64_t chf = 0, isif = 0;
        std::vector<double> csum(static_cast<size_t>(C) + 1, 0);
        std::vector<int64_t> ccnt(static_cast<size_t>(C) + 1, 0);
        for (size_t f = 0; f < preds.size(); ++f) {
            double chs = 0, isis = 0;
            int chn = 0, isin = 0;
            for (int c = 1; c <= C; ++c) {
                auto v = iou(preds[f], gts[f], c);
                if (!v) continue;
                csum[static_cast<size_t>(c)] += *v;
                ++ccnt[static_cast<size_t>(c)];
                isis += *v;
                ++isin;
                if (!pixels(gts[f], c).empty()) {
                    chs += *v;
                    ++chn;
                }
            }
            if (chn) {
                ch += chs / chn;
                ++chf;
            }
            if (isin) {
                isi += isis / isin;
                ++isif;
            }
        }
        s.ch_iou = chf ? ch / chf : 0;
        s.isi_iou = isif ? isi / isif : 0;
        double mc = 0;
        int mcn = 0;
        for (int c = 1; c <= C; ++c)
            if (ccnt[static_cast<size_t>(c)]) {
                mc += csum[static_cast<size_t>(c)] / ccnt[static_cast<size_t>(c)];
                ++mcn;
            }
        s.mc_iou = mcn ? mc / mcn : 0;
        return s;
    }
};

LabelMap random_map(int64_t h, int64_t w, int C, Rng& rng) {
    LabelMap m(h, w);
    for (auto& v : m.ids) v = static_cast<int>(uniform_int(rng, 0, C));
    return m;
}

}  // namespace

TEST_CASE("per_class_iou: identity, half overlap, empty union") {
    LabelMap a(2, 4), b(2, 4);
    for (int i = 0; i < 4; ++i) b.ids[i] = 1;  // GT: 4 px of class 1
    a.ids[0] = a.ids[1] = 1;                   // pred: 2 px inside
    CHECK(per_class_iou(a, b, 1).value() == doctest::Approx(0.5));
    CHECK(per_class_iou(b, b, 1).value() == doctest::Approx(1.0));
    CHECK(!per_class_iou(a, b, 3).has_value());
    CHECK_THROWS_AS(per_class_iou(a, LabelMap(1, 1), 1), argument_error);
}

TEST_CASE("worked Ch/ISI example: true class at 0.5, false positive class") {
    // frame: GT class 1 covers 4 px, prediction covers 2 of them plus a
    // class-2 false positive elsewhere
    LabelMap gt(4, 4), pred(4, 4);
    gt.at(0, 0) = gt.at(0, 1) = gt.at(0, 2) = gt.at(0, 3) = 1;
    pred.at(0, 0) = pred.at(0, 1) = 1;
    pred.at(0, 2) = pred.at(0, 3) = 0;  // miss half: IoU_1 = 2/4 = 0.5
    pred.at(2, 0) = pred.at(2, 1) = 2;  // false positive: IoU_2 = 0
    auto s = dataset_ious({pred}, {gt}, 4);
    CHECK(s.ch_iou == doctest::Approx(0.5));
    CHECK(s.isi_iou == doctest::Approx(0.25));
}

TEST_CASE("perfect predictions give all ones; class-mean arithmetic") {
    Rng rng(5);
    std::vector<LabelMap> maps;
    for (int f = 0; f < 3; ++f) maps.push_back(random_map(8, 8, 3, rng));
    auto s = dataset_ious(maps, maps, 3);
    CHECK(s.ch_iou == doctest::Approx(1.0));
    CHECK(s.isi_iou == doctest::Approx(1.0));
    CHECK(s.mc_iou == doctest::Approx(1.0));

    // two classes with per-class means 0.2 and 0.8 -> mcIoU = 0.5
    // class 1: 1/5 overlap; class 2: 4/5 overlap (crafted below)
    LabelMap gt(1, 10), pr(1, 10);
    for (int i = 0; i < 5; ++i) gt.ids[i] = 1;
    pr.ids[0] = 1;                                // IoU_1 = 1/5
    for (int i = 5; i < 10; ++i) gt.ids[i] = 2;
    for (int i = 5; i < 9; ++i) pr.ids[i] = 2;    // IoU_2 = 4/5
    auto s2 = dataset_ious({pr}, {gt}, 2);
    CHECK(s2.mc_iou == doctest::Approx(0.5));
    CHECK(s2.per_class[0] == doctest::Approx(0.2));
    CHECK(s2.per_class[1] == doctest::Approx(0.8));
}

TEST_CASE("dice: identity, hand value, disjoint") {
    LabelMap gt(1, 8), pr(1, 8);
    for (int i = 0; i < 4; ++i) gt.ids[i] = 1;  // G = 4 px
    pr.ids[0] = pr.ids[1] = 1;                  // P = 2 px inside
    auto s = dice_scores({pr}, {gt}, 1);
    CHECK(s.dsc == doctest::Approx(2.0 * 2 / (2 + 4)).epsilon(1e-9));
    CHECK(s.dsc == doctest::Approx(0.66667).epsilon(1e-4));

    auto s1 = dice_scores({gt}, {gt}, 1);
    CHECK(s1.dsc == doctest::Approx(1.0));

    LabelMap pr2(1, 8);
    pr2.ids[6] = 1;  // disjoint from GT
    auto s2 = dice_scores({pr2}, {gt}, 1);
    CHECK(s2.dsc == doctest::Approx(0.0));
}

TEST_CASE("dice = 2*iou/(1+iou) for every defined class-frame pair") {
    Rng rng(17);
    for (int trial = 0; trial < 20; ++trial) {
        LabelMap p = random_map(16, 16, 4, rng), g = random_map(16, 16, 4, rng);
        for (int c = 1; c <= 4; ++c) {
            auto i = per_class_iou(p, g, c);
            auto d = Oracle::dice(p, g, c);
            if (!i) continue;
            CHECK(*d == doctest::Approx(2.0 * *i / (1.0 + *i)).epsilon(1e-12));
            CHECK(*i <= *d);
            CHECK(*d <= 1.0);
        }
    }
}

TEST_CASE("aggregates match brute-force oracle on random 16x16 maps") {
    Rng rng(23);
    std::vector<LabelMap> preds, gts;
    for (int f = 0; f < 50; ++f) {
        preds.push_back(random_map(16, 16, 4, rng));
        gts.push_back(random_map(16, 16, 4, rng));
    }
    auto impl = dataset_ious(preds, gts, 4);
    auto oracle = Oracle::ious(preds, gts, 4);
    CHECK(std::abs(impl.ch_iou - oracle.ch_iou) < 1e-9);
    CHECK(std::abs(impl.isi_iou - oracle.isi_iou) < 1e-9);
    CHECK(std::abs(impl.mc_iou - oracle.mc_iou) < 1e-9);
}

TEST_CASE("relabeling invariance") {
    Rng rng(29);
    std::vector<LabelMap> preds, gts, rp, rg;
    std::vector<int> perm{0, 3, 1, 4, 2};  // relabel 1..4 -> 3,1,4,2
    for (int f = 0; f < 5; ++f) {
        preds.push_back(random_map(12, 12, 4, rng));
        gts.push_back(random_map(12, 12, 4, rng));
        LabelMap a = preds.back(), b = gts.back();
        for (auto& v : a.ids) v = perm[static_cast<size_t>(v)];
        for (auto& v : b.ids) v = perm[static_cast<size_t>(v)];
        rp.push_back(a);
        rg.push_back(b);
    }
    auto s1 = dataset_ious(preds, gts, 4);
    auto s2 = dataset_ious(rp, rg, 4);
    CHECK(s1.ch_iou == doctest::Approx(s2.ch_iou).epsilon(1e-12));
    CHECK(s1.isi_iou == doctest::Approx(s2.isi_iou).epsilon(1e-12));
    CHECK(s1.mc_iou == doctest::Approx(s2.mc_iou).epsilon(1e-12));
    auto d1 = dice_scores(preds, gts, 4);
    auto d2 = dice_scores(rp, rg, 4);
    CHECK(d1.dsc == doctest::Approx(d2.dsc).epsilon(1e-12));
    CHECK(d1.mcd == doctest::Approx(d2.mcd).epsilon(1e-12));
}

TEST_CASE("surface distances: identity, two pixels, offset squares") {
    // identical masks -> (0,0)
    std::vector<uint8_t> m(6 * 6, 0);
    m[1 * 6 + 1] = m[1 * 6 + 2] = m[2 * 6 + 1] = m[2 * 6 + 2] = 1;
    auto sd = surface_distances(m, m, 6, 6);
    CHECK(sd->first == 0.0);
    CHECK(sd->second == 0.0);

    // two single pixels 3 apart -> (3,3)
    std::vector<uint8_t> a(6 * 6, 0), b(6 * 6, 0);
    a[2 * 6 + 1] = 1;
    b[2 * 6 + 4] = 1;
    auto sd2 = surface_distances(a, b, 6, 6);
    CHECK(sd2->first == doctest::Approx(3.0));
    CHECK(sd2->second == doctest::Approx(3.0));

    // 2x2 squares offset by one column -> HD = 1
    std::vector<uint8_t> p(6 * 6, 0), g(6 * 6, 0);
    p[1 * 6 + 1] = p[1 * 6 + 2] = p[2 * 6 + 1] = p[2 * 6 + 2] = 1;
    g[1 * 6 + 2] = g[1 * 6 + 3] = g[2 * 6 + 2] = g[2 * 6 + 3] = 1;
    auto sd3 = surface_distances(p, g, 6, 6);
    CHECK(sd3->first == doctest::Approx(1.0));

    // empty mask -> undefined
    std::vector<uint8_t> e(6 * 6, 0);
    CHECK(!surface_distances(e, m, 6, 6).has_value());

    // HD >= ASD >= 0 on random masks
    Rng rng(31);
    for (int t = 0; t < 20; ++t) {
        std::vector<uint8_t> x(8 * 8, 0), y(8 * 8, 0);
        for (auto& v : x) v = uniform_int(rng, 0, 2) == 0;
        for (auto& v : y) v = uniform_int(rng, 0, 2) == 0;
        auto s = surface_distances(x, y, 8, 8);
        if (!s) continue;
        CHECK(s->first >= s->second);
        CHECK(s->second >= 0.0);
    }
}

TEST_CASE("dataset surface distances exclude empty pairs and count them") {
    LabelMap gt(4, 4), pr(4, 4);
    gt.at(1, 1) = 1;
    pr.at(1, 2) = 1;
    gt.at(3, 3) = 2;  // class 2 only in GT: excluded, counted
    auto s = dataset_surface_distances({pr}, {gt}, 2);
    CHECK(s.defined_pairs == 1);
    CHECK(s.excluded_pairs == 1);
    CHECK(s.hd == doctest::Approx(1.0));
}

TEST_CASE("zero frames is a data error") {
    CHECK_THROWS_AS(dataset_ious({}, {}, 2), data_error);
}
