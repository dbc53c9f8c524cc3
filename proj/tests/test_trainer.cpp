#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <random>

#include "deviant/trainer.hpp"
#include "support/fd_harness.hpp"
#include "support/oracles.hpp"
#include "support/small_world.hpp"

using namespace deviant;

namespace {

double focal_of(std::vector<double> a, std::vector<std::uint8_t> m, double alpha, double gamma) {
    Tape<double> tape;
    const Var s = tape.constant(Tensor<double>::matrix(a.size(), 1, a));
    return tape.value(focal_loss(tape, s, m, alpha, gamma, 1e-6)).data[0];
}

double dice_of(std::vector<double> a, std::vector<std::uint8_t> m) {
    Tape<double> tape;
    const Var s = tape.constant(Tensor<double>::matrix(a.size(), 1, a));
    return tape.value(dice_loss(tape, s, m, 1e-5)).data[0];
}

double bce_of(double p, std::uint8_t y) {
    Tape<double> tape;
    return tape.value(bce_loss(tape, tape.constant(Tensor<double>::scalar(p)), y, 1e-6)).data[0];
}

std::vector<std::uint8_t> checkpoint_bytes(const TrainResult& r) { return encode_checkpoint(r.checkpoint); }

}  // namespace

TEST(FocalLoss, PerfectPrediction) {
    EXPECT_NEAR(focal_of({1, 0, 1, 0}, {1, 0, 1, 0}, 0.25, 2.0), 0.0, 1e-5);
}

TEST(FocalLoss, GammaZeroIsHalfCrossEntropy) {
    const double ce = -(std::log(0.9) + std::log(0.8) + std::log(0.6) + std::log(0.7)) / 4.0;
    EXPECT_NEAR(focal_of({0.9, 0.2, 0.6, 0.3}, {1, 0, 1, 0}, 0.5, 0.0), 0.5 * ce, 1e-12);
}

TEST(FocalLoss, SinglePatchClosedForm) {
    EXPECT_NEAR(focal_of({0.5}, {1}, 0.25, 2.0), 0.25 * 0.25 * std::log(2.0), 1e-12);
    EXPECT_NEAR(focal_of({0.5}, {1}, 0.25, 2.0), 0.04332, 1e-5);
}

TEST(FocalLoss, GraphMatchesValueFunction) {
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> u(0, 1);
    for (int rep = 0; rep < 20; ++rep) {
        std::vector<double> a(9);
        std::vector<std::uint8_t> m(9);
        for (auto& v : a) v = u(rng);
        for (auto& b : m) b = rng() % 2;
        EXPECT_NEAR(focal_of(a, m, 0.25, 2.0), oracle::focal(a, m, 0.25, 2.0, 1e-6), 1e-12);
        EXPECT_NEAR(focal_loss_value(a, m, 0.25, 2.0, 1e-6), oracle::focal(a, m, 0.25, 2.0, 1e-6), 1e-12);
    }
}

TEST(DiceLoss, Examples) {
    EXPECT_NEAR(dice_of({1, 0, 1, 0}, {1, 0, 1, 0}), 0.0, 1e-5);
    EXPECT_NEAR(dice_of({0, 1, 0, 1}, {1, 0, 1, 0}), 1.0, 1e-5);
    EXPECT_NEAR(dice_of({0.5, 0.5, 0.5, 0.5}, {1, 1, 0, 0}), 1 - (2.0 + 1e-5) / (4.0 + 1e-5), 1e-12);
    EXPECT_NEAR(dice_of({0.5, 0.5, 0.5, 0.5}, {1, 1, 0, 0}), 0.5, 1e-5);
}

TEST(BceLoss, Examples) {
    EXPECT_NEAR(bce_of(1 - 1e-6, 1), 0.0, 1e-5);
    EXPECT_NEAR(bce_of(0.5, 0), std::log(2.0), 1e-12);
    EXPECT_NEAR(bce_of(0.5, 1), std::log(2.0), 1e-12);
    EXPECT_NEAR(bce_of(0.9, 0), 2.3026, 1e-4);
    EXPECT_NEAR(bce_of(0.0, 1), -std::log(1e-6), 1e-9);
    EXPECT_NEAR(bce_loss_value(0.9, 0, 1e-6), -std::log(0.1), 1e-12);
}

TEST(BceLoss, GradientSign) {
    for (std::uint8_t y : {0, 1}) {
        Tensor<double> p = Tensor<double>::scalar(0.3);
        p.requires_grad = true;
        p.zero_grad();
        Tape<double> tape;
        tape.backward(bce_loss(tape, tape.parameter(p), y, 1e-6));
        const double want = y ? -1 / 0.3 : 1 / 0.7;
        EXPECT_NEAR((*p.grad)[0], want, 1e-9);
    }
}

TEST(EpisodeLoss, TotalIsSumOfComponents) {
    std::mt19937_64 rng(2);
    const auto cfg = fd::toy_config();
    for (std::uint8_t label : {0, 1}) {
        auto params = IdeParams<double>::init(cfg.ide, 4);
        const auto ep = fd::toy_episode(rng, label);
        Tape<double> tape;
        const auto vars = bind_parameters(tape, params);
        const auto g = episode_loss(tape, vars, ep, cfg, false, nullptr);
        const auto v = g.values(tape);
        const auto& s = tape.value(g.patch_scores).data;
        const double img = tape.value(g.image_score).data[0];
        const double focal = focal_loss_value(s, ep.query_mask, 0.25, 2.0, 1e-6);
        const double dice = dice_loss_value(s, ep.query_mask, 1e-5);
        const double bce = bce_loss_value(img, label, 1e-6);
        const auto& dev = tape.value(g.deviations);
        const double dual = oracle::dual_loss(oracle::to_mat(dev.data, dev.rows(), dev.cols()),
                                              oracle::to_mat(ep.ref_values.data, 4, 8), ep.ref_mask, 1.0, 0.8);
        EXPECT_NEAR(v.focal, focal, 1e-12);
        EXPECT_NEAR(v.dice, dice, 1e-12);
        EXPECT_NEAR(v.bce, bce, 1e-12);
        EXPECT_NEAR(v.dual, dual, 1e-12);
        EXPECT_NEAR(v.total, focal + dice + bce + dual, 1e-6);
    }
}

TEST(EpisodeLoss, GradientsReachOnlyParameters) {
    std::mt19937_64 rng(3);
    const auto cfg = fd::toy_config();
    auto params = IdeParams<double>::init(cfg.ide, 4);
    params.set_requires_grad(true);
    const auto ep = fd::toy_episode(rng, 1);
    Tape<double> tape;
    const auto vars = bind_parameters(tape, params);
    const std::size_t first_free = tape.size();
    const auto g = episode_loss(tape, vars, ep, cfg, false, nullptr);
    tape.backward(g.total);
    for (const auto* t : params.tensors()) {
        ASSERT_TRUE(t->grad.has_value());
        double n = 0;
        for (double v : *t->grad) n += v * v;
        EXPECT_GT(n, 0.0);
    }
    // Every leaf created after the parameters is a constant and receives no gradient.
    for (std::size_t id = first_free; id < tape.size(); ++id) {
        if (!tape.inputs(Var{id}).empty()) continue;
        EXPECT_FALSE(tape.requires_grad(Var{id})) << tape.op_name(Var{id});
        EXPECT_TRUE(tape.grad(Var{id}).empty());
    }
    EXPECT_FALSE(ep.ref_features.requires_grad);
    EXPECT_FALSE(ep.query_deviations.grad.has_value());
}

TEST(EpisodeLoss, FullGraphGradientCheck) {
    for (std::uint64_t seed : {1u, 2u, 3u, 4u}) EXPECT_LT(fd::check_episode_graph(seed), 1e-5) << seed;
}

TEST(TrainConfig, Validation) {
    TrainConfig cfg;
    EXPECT_NO_THROW(cfg.validate());
    EXPECT_EQ(cfg.steps_per_epoch(), 32u);
    cfg.bce_eps = 1e-2;
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg = TrainConfig{};
    cfg.mode = ScoringMode::NveOnly;
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg = TrainConfig{};
    cfg.shots = {1, 1, false};
    EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Train, ZeroLearningRateLeavesParameters) {
    const auto world = generate_world(small_world::spec());
    auto cfg = small_world::train_config(1);
    cfg.warmup_epochs = 0;
    cfg.queries_per_epoch = 1;
    cfg.batch_size = 1;
    cfg.base_lr = 0;
    cfg.warmup_start_lr = 0;
    const auto r = train(world.train, cfg);
    ASSERT_EQ(r.trace.size(), 1u);
    const auto init = initial_parameters(cfg);
    const auto a = r.checkpoint.params.tensors();
    const auto b = init.tensors();
    for (std::size_t i = 0; i < a.size(); ++i)
        EXPECT_EQ(std::memcmp(a[i]->data.data(), b[i]->data.data(), a[i]->numel() * sizeof(float)), 0);
    EXPECT_EQ(r.checkpoint.optimizer_steps, 1u);
}

TEST(Train, DeterministicCheckpoints) {
    const auto world = generate_world(small_world::spec());
    const auto cfg = small_world::train_config(2);
    const auto a = train(world.train, cfg), b = train(world.train, cfg);
    EXPECT_EQ(checkpoint_bytes(a), checkpoint_bytes(b));
    EXPECT_EQ(format_loss_trace(a.trace), format_loss_trace(b.trace));
    auto other = cfg;
    other.seed = 99;
    EXPECT_NE(checkpoint_bytes(train(world.train, other)), checkpoint_bytes(a));
}

TEST(Train, LossDecreasesOnSyntheticWorld) {
    const auto world = generate_world(small_world::spec());
    const auto cfg = small_world::train_config(5);
    const auto r = train(world.train, cfg);
    const std::size_t spe = cfg.steps_per_epoch();
    ASSERT_EQ(r.trace.size(), 5 * spe);
    double first = 0, last = 0;
    for (std::size_t i = 0; i < spe; ++i) {
        first += r.trace[i].loss.total;
        last += r.trace[r.trace.size() - spe + i].loss.total;
    }
    EXPECT_LT(last, first);
}

TEST(Train, TraceFormat) {
    const auto world = generate_world(small_world::spec());
    const auto r = train(world.train, small_world::train_config(2));
    const auto text = format_loss_trace(r.trace);
    const std::string first = text.substr(0, text.find('\n'));
    EXPECT_EQ(std::count(first.begin(), first.end(), '\t'), 6);
    EXPECT_EQ(first.substr(0, 2), "0\t");
    EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), static_cast<long>(r.trace.size()));
    EXPECT_NEAR(r.trace.front().lr, 1e-5, 1e-12);
}

TEST(Infer, EmptyQueryListAndFixity) {
    const auto world = generate_world(small_world::spec());
    const auto r = train(world.train, small_world::train_config(2));
    ScoringConfig sc;
    sc.nve = small_world::train_config().nve;
    const auto general = build_inference_manifest(world.test, {}, 5, Setting::General);
    auto hard = general;
    hard.setting = Setting::Hard;
    EXPECT_TRUE(infer(world.test, general, std::span<const std::size_t>{}, &r.checkpoint, sc).empty());
    const auto g = infer(world.test, general, &r.checkpoint, sc);
    const auto h = infer(world.test, hard, &r.checkpoint, sc);
    EXPECT_EQ(g.size(), world.test.n_images);
    EXPECT_LT(h.size(), g.size());
    std::size_t shared = 0;
    for (const auto& [id, map] : h)
        for (const auto& [gid, gmap] : g)
            if (gid == id) {
                EXPECT_EQ(encode_score_map(map), encode_score_map(gmap));
                ++shared;
            }
    EXPECT_EQ(shared, h.size());
}

TEST(Infer, CheckpointRoundTripReproducesScores) {
    const auto world = generate_world(small_world::spec());
    const auto r = train(world.train, small_world::train_config(2));
    const auto back = decode_checkpoint(encode_checkpoint(r.checkpoint));
    ScoringConfig sc;
    sc.nve = small_world::train_config().nve;
    const auto m = build_inference_manifest(world.test, {}, 5, Setting::General);
    const auto a = infer(world.test, m, &r.checkpoint, sc), b = infer(world.test, m, &back, sc);
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(encode_score_map(a[i].second), encode_score_map(b[i].second));
}

TEST(DeriveSeed, StreamsDiffer) {
    EXPECT_EQ(derive_seed(1, 2, 3), derive_seed(1, 2, 3));
    EXPECT_NE(derive_seed(1, 2, 3), derive_seed(1, 2, 4));
    EXPECT_NE(derive_seed(1, 2, 3), derive_seed(1, 3, 3));
}
