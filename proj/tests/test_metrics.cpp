#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include <json.hpp>

#include "deviant/metrics.hpp"
#include "support/oracles.hpp"

using namespace deviant;

namespace {

using S = std::vector<double>;
using L = std::vector<std::uint8_t>;

// Scores from a small alphabet so ties are common; both classes present.
void random_case(std::mt19937_64& rng, std::size_t n, S& s, L& y) {
    s.resize(n);
    y.resize(n);
    const int levels = 2 + int(rng() % 10);
    for (std::size_t i = 0; i < n; ++i) {
        s[i] = double(rng() % levels) / levels + 0.05;
        y[i] = rng() % 2;
    }
    y[0] = 1;
    y[n - 1] = 0;
}

S transform(const S& s, int which) {
    S out(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) out[i] = which == 0 ? 2 * s[i] + 1 : s[i] * s[i] * s[i];
    return out;
}

double pro_of(const std::vector<oracle::ProImage>& imgs, ProConfig cfg = {}) {
    std::vector<PixelImage> px;
    for (const auto& im : imgs) px.push_back({im.h, im.w, im.scores, im.mask});
    return pro(px, cfg).value();
}

oracle::ProImage random_pro_image(std::mt19937_64& rng, std::size_t h, std::size_t w, int levels) {
    oracle::ProImage im{h, w, std::vector<float>(h * w), std::vector<std::uint8_t>(h * w)};
    for (std::size_t i = 0; i < h * w; ++i) {
        im.mask[i] = rng() % 3 == 0;
        im.scores[i] = float(rng() % levels) / float(levels) + (im.mask[i] ? 0.1f : 0.0f);
    }
    return im;
}

}  // namespace

TEST(Auroc, Examples) {
    EXPECT_EQ(auroc(S{0.1, 0.9}, L{0, 1}).value(), 1.0);
    EXPECT_EQ(auroc(S{0.4, 0.4, 0.4}, L{0, 1, 1}).value(), 0.5);
    EXPECT_FALSE(auroc(S{0.1, 0.2}, L{1, 1}).has_value());
    EXPECT_FALSE(auroc(S{}, L{}).has_value());
}

TEST(Auroc, MatchesPairCountingOracle) {
    std::mt19937_64 rng(1);
    for (int rep = 0; rep < 500; ++rep) {
        S s;
        L y;
        random_case(rng, 2 + rng() % 31, s, y);
        EXPECT_NEAR(auroc(s, y).value(), oracle::auroc_pairs(s, y), 1e-12);
    }
}

TEST(Auroc, LabelFlipSymmetry) {
    std::mt19937_64 rng(2);
    for (int rep = 0; rep < 200; ++rep) {
        S s;
        L y;
        random_case(rng, 2 + rng() % 31, s, y);
        L f(y.size());
        for (std::size_t i = 0; i < y.size(); ++i) f[i] = 1 - y[i];
        EXPECT_NEAR(auroc(s, y).value(), 1 - auroc(s, f).value(), 1e-12);
    }
}

TEST(AveragePrecision, Examples) {
    EXPECT_EQ(average_precision(S{0.9, 0.8, 0.2, 0.1}, L{1, 1, 0, 0}).value(), 1.0);
    EXPECT_NEAR(average_precision(S{0.1, 0.5, 0.6, 0.7}, L{1, 0, 0, 0}).value(), 0.25, 1e-15);
    EXPECT_FALSE(average_precision(S{0.1}, L{0}).has_value());
}

TEST(AveragePrecision, MatchesPrefixOracle) {
    std::mt19937_64 rng(3);
    for (int rep = 0; rep < 500; ++rep) {
        S s;
        L y;
        random_case(rng, 2 + rng() % 31, s, y);
        EXPECT_NEAR(average_precision(s, y).value(), oracle::ap_prefix(s, y), 1e-12);
    }
}

TEST(F1Max, Examples) {
    EXPECT_EQ(f1_max(S{0.1, 0.2, 0.8}, L{0, 0, 1}).value(), 1.0);
    EXPECT_NEAR(f1_max(S{0.1, 0.5, 0.6}, L{1, 0, 0}).value(), 0.5, 1e-15);
    EXPECT_FALSE(f1_max(S{0.3}, L{0}).has_value());
}

TEST(F1Max, LowestPositiveAmongFour) {
    // 1 positive scored lowest among 4: predicting everything positive gives P = 1/4, R = 1.
    EXPECT_NEAR(f1_max(S{0.1, 0.5, 0.6, 0.7}, L{1, 0, 0, 0}).value(), 0.4, 1e-15);
}

TEST(F1Max, MatchesThresholdSweep) {
    std::mt19937_64 rng(4);
    for (int rep = 0; rep < 500; ++rep) {
        S s;
        L y;
        random_case(rng, 2 + rng() % 31, s, y);
        EXPECT_NEAR(f1_max(s, y).value(), oracle::f1_sweep(s, y), 1e-12);
    }
}

TEST(Metrics, MonotoneTransformInvariance) {
    std::mt19937_64 rng(5);
    for (int rep = 0; rep < 200; ++rep) {
        S s;
        L y;
        random_case(rng, 2 + rng() % 31, s, y);
        for (int t = 0; t < 2; ++t) {
            const S u = transform(s, t);
            EXPECT_NEAR(auroc(u, y).value(), auroc(s, y).value(), 1e-12);
            EXPECT_NEAR(average_precision(u, y).value(), average_precision(s, y).value(), 1e-12);
            EXPECT_NEAR(f1_max(u, y).value(), f1_max(s, y).value(), 1e-12);
        }
    }
}

TEST(Components, MatchUnionFindOracle) {
    std::mt19937_64 rng(6);
    for (int rep = 0; rep < 100; ++rep) {
        const std::size_t h = 1 + rng() % 9, w = 1 + rng() % 9;
        L m(h * w);
        for (auto& b : m) b = rng() % 2;
        std::size_t count = 0;
        const auto lab = label_components(m, h, w, &count);
        const auto ref = oracle::components(m, h, w);
        int ref_count = 0;
        for (int l : ref) ref_count = std::max(ref_count, l + 1);
        EXPECT_EQ(count, std::size_t(ref_count));
        // Same partition: pixel pairs share a label in one iff they do in the other.
        for (std::size_t i = 0; i < h * w; ++i) {
            EXPECT_EQ(lab[i] == 0, ref[i] < 0);
            for (std::size_t j = 0; j < h * w; ++j)
                if (m[i] && m[j]) {
                    EXPECT_EQ(lab[i] == lab[j], ref[i] == ref[j]);
                }
        }
    }
}

TEST(Components, DiagonalTouchIsConnected) {
    std::size_t count = 0;
    label_components(L{1, 0, 0, 1}, 2, 2, &count);
    EXPECT_EQ(count, 1u);
}

TEST(Pro, ScoreEqualToMaskIsOne) {
    oracle::ProImage im{4, 4, std::vector<float>(16, 0.0f), L(16, 0)};
    for (std::size_t i : {0u, 1u, 5u, 14u}) {
        im.mask[i] = 1;
        im.scores[i] = 1.0f;
    }
    EXPECT_NEAR(pro_of({im}), 1.0, 1e-12);
}

TEST(Pro, ConstantMapIsZero) {
    oracle::ProImage im{4, 4, std::vector<float>(16, 0.5f), L(16, 0)};
    for (std::size_t i = 0; i < 8; ++i) im.mask[i] = 1;
    EXPECT_NEAR(pro_of({im}), 0.0, 1e-12);
}

TEST(Pro, UndefinedWithoutRegionsOrNegatives) {
    const std::vector<float> s(4, 0.2f);
    const L none(4, 0), all(4, 1);
    const PixelImage a{2, 2, s, none}, b{2, 2, s, all};
    EXPECT_FALSE(pro(std::span(&a, 1)).has_value());
    EXPECT_FALSE(pro(std::span(&b, 1)).has_value());
}

TEST(Pro, TwoRegionToyWithinQuadratureTolerance) {
    // 8x8 map, two separated regions, continuous scores: more distinct values than steps.
    std::mt19937_64 rng(7);
    for (int rep = 0; rep < 10; ++rep) {
        oracle::ProImage im{8, 8, std::vector<float>(64), L(64, 0)};
        for (std::size_t y = 1; y < 3; ++y)
            for (std::size_t x = 1; x < 4; ++x) im.mask[y * 8 + x] = 1;
        for (std::size_t y = 5; y < 8; ++y)
            for (std::size_t x = 5; x < 7; ++x) im.mask[y * 8 + x] = 1;
        std::uniform_real_distribution<float> u(0, 1);
        for (std::size_t i = 0; i < 64; ++i) im.scores[i] = u(rng) * 0.7f + (im.mask[i] ? 0.3f : 0.0f);
        ProConfig cfg;
        cfg.steps = 1000;
        EXPECT_NEAR(pro_of({im}, cfg), oracle::pro_exhaustive({im}, 0.3), 1e-3);
    }
}

TEST(Pro, SmallInstancesMatchExhaustiveOracle) {
    std::mt19937_64 rng(8);
    int tested = 0;
    while (tested < 300) {
        std::vector<oracle::ProImage> imgs;
        const std::size_t n = 1 + rng() % 2;
        for (std::size_t k = 0; k < n; ++k) imgs.push_back(random_pro_image(rng, 1 + rng() % 4, 1 + rng() % 4, 2 + int(rng() % 6)));
        std::vector<PixelImage> px;
        for (const auto& im : imgs) px.push_back({im.h, im.w, im.scores, im.mask});
        const auto got = pro(px);
        bool any_pos = false, any_neg = false;
        for (const auto& im : imgs)
            for (auto b : im.mask) (b ? any_pos : any_neg) = true;
        EXPECT_EQ(got.has_value(), any_pos && any_neg);
        if (!got) continue;
        EXPECT_NEAR(*got, oracle::pro_exhaustive(imgs, 0.3), 1e-12);
        EXPECT_GE(*got, 0.0);
        EXPECT_LE(*got, 1.0);
        ++tested;
    }
}

TEST(Pro, MonotoneTransformInvariance) {
    std::mt19937_64 rng(9);
    for (int rep = 0; rep < 100; ++rep) {
        auto im = random_pro_image(rng, 4, 4, 5);
        im.mask[0] = 1;
        im.mask[15] = 0;
        auto cubed = im;
        for (auto& v : cubed.scores) v = v * v * v;
        EXPECT_NEAR(pro_of({im}), pro_of({cubed}), 1e-12);
    }
}

TEST(TaskDifficulty, Examples) {
    const auto a = Tensor<float>::matrix(2, 2, {1, 0, 0, 1});
    EXPECT_NEAR(task_difficulty(a, L{1, 1}, a, L{1, 1}).value(), 1.0, 1e-12);
    const auto b = Tensor<float>::matrix(1, 2, {0, 3});
    EXPECT_NEAR(task_difficulty(Tensor<float>::matrix(1, 2, {2, 0}), L{1}, b, L{1}).value(), 0.0, 1e-12);
    EXPECT_FALSE(task_difficulty(a, L{0, 0}, a, L{1, 1}).has_value());
}

TEST(TaskDifficulty, MatchesDoubleLoop) {
    std::mt19937_64 rng(10);
    std::normal_distribution<float> g;
    for (int rep = 0; rep < 50; ++rep) {
        const std::size_t nr = 1 + rng() % 8, nt = 1 + rng() % 8, c = 1 + rng() % 5;
        Tensor<float> r = Tensor<float>::zeros({nr, c}), t = Tensor<float>::zeros({nt, c});
        for (auto& v : r.data) v = g(rng);
        for (auto& v : t.data) v = g(rng);
        L rm(nr), tm(nt);
        for (auto& b : rm) b = rng() % 2;
        for (auto& b : tm) b = rng() % 2;
        rm[0] = tm[0] = 1;
        EXPECT_NEAR(task_difficulty(r, rm, t, tm).value(),
                    oracle::task_difficulty(oracle::to_mat(r.data, nr, c), rm, oracle::to_mat(t.data, nt, c), tm), 1e-12);
    }
}

namespace {

FeatureSet eval_dataset() {
    FeatureSet fs = FeatureSet::empty(4, 2);
    const std::vector<float> f(8, 1.0f);
    fs.add_image(f, L(4, 0), 0);
    fs.add_image(f, L(4, 0), 0);
    fs.add_image(f, L{1, 0, 0, 0}, 1, "a");
    fs.add_image(f, L{0, 0, 0, 1}, 1, "b");
    return fs;
}

ScoreMap map_of(std::vector<float> patches, float image) {
    ScoreMap m;
    m.grid = 2;
    m.height = 4;
    m.width = 4;
    m.patch_scores = patches;
    m.pixel_map.resize(16);
    for (std::size_t y = 0; y < 4; ++y)
        for (std::size_t x = 0; x < 4; ++x) m.pixel_map[y * 4 + x] = patches[(y / 2) * 2 + x / 2];
    m.image_score = image;
    return m;
}

}  // namespace

TEST(Evaluate, PerfectSeparation) {
    const auto fs = eval_dataset();
    const EpisodeManifest m{"d", 0, 1, 1, Setting::General, {0}, {2}, "a"};
    std::vector<std::pair<std::size_t, ScoreMap>> scored = {
        {0, map_of({0.1f, 0.1f, 0.1f, 0.1f}, 0.1f)},
        {1, map_of({0.2f, 0.1f, 0.1f, 0.1f}, 0.2f)},
        {2, map_of({0.9f, 0.1f, 0.1f, 0.1f}, 0.9f)},
        {3, map_of({0.1f, 0.1f, 0.1f, 0.8f}, 0.8f)}};
    const auto r = evaluate(fs, m, scored);
    EXPECT_EQ(r.image_auroc.value(), 1.0);
    EXPECT_EQ(r.image_ap.value(), 1.0);
    EXPECT_EQ(r.pixel_auroc.value(), 1.0);
    EXPECT_NEAR(r.pixel_pro.value(), 1.0, 1e-12);
    EXPECT_EQ(r.n_images, 4u);
    EXPECT_EQ(r.n_abnormal, 2u);
    EXPECT_EQ(r.n_anomalous_pixels, 8u);
    EXPECT_EQ(r.n_normal_pixels, 56u);
    EXPECT_EQ(report_summary(r), "(100.0 / 100.0)");
    const auto j = nlohmann::json::parse(report_to_json(r));
    EXPECT_EQ(j["setting"], "general");
    EXPECT_TRUE(j.contains("task_difficulty"));
}

TEST(Evaluate, SingleClassGivesNull) {
    const auto fs = eval_dataset();
    const EpisodeManifest m{"d", 0, 1, 1, Setting::General, {0}, {2}, "a"};
    std::vector<std::pair<std::size_t, ScoreMap>> scored = {{0, map_of({0.1f, 0.1f, 0.1f, 0.1f}, 0.1f)},
                                                           {1, map_of({0.2f, 0.1f, 0.1f, 0.1f}, 0.2f)}};
    const auto r = evaluate(fs, m, scored);
    EXPECT_FALSE(r.image_auroc.has_value());
    EXPECT_FALSE(r.pixel_pro.has_value());
    const auto j = nlohmann::json::parse(report_to_json(r));
    EXPECT_TRUE(j["image_auroc"].is_null());
}
