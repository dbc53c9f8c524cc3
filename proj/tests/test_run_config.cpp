#include <gtest/gtest.h>

#include <json.hpp>

#include "deviant/run_config.hpp"

using namespace deviant;

TEST(RunConfig, EmptyObjectKeepsDefaults) {
    const RunConfig c = run_config_from_json("{}");
    const TrainConfig d;
    EXPECT_EQ(c.train.epochs, d.epochs);
    EXPECT_EQ(c.train.nve.k, d.nve.k);
    EXPECT_EQ(c.train.ide.tokens, d.ide.tokens);
    EXPECT_TRUE(c.nve);
    EXPECT_TRUE(c.ide);
    EXPECT_EQ(c.mode(), ScoringMode::Full);
}

TEST(RunConfig, KeysAreApplied) {
    const RunConfig c = run_config_from_json(
        R"({"epochs": 3, "k": 7, "r": 2, "alpha": 0.25, "tokens": 5, "heads": 1, "attention_scale": "full",
            "upsample": "nearest", "L1": 4, "L2": 2, "seed": 11})");
    EXPECT_EQ(c.train.epochs, 3u);
    EXPECT_EQ(c.train.nve.k, 7u);
    EXPECT_EQ(c.scoring.nve.r, 2u);
    EXPECT_DOUBLE_EQ(c.scoring.nve.alpha, 0.25);
    EXPECT_EQ(c.train.ide.tokens, 5u);
    EXPECT_EQ(c.train.ide.scale, AttentionScale::FullWidth);
    EXPECT_EQ(c.scoring.upsample, Upsample::Nearest);
    EXPECT_EQ(c.train.shots.l1, 4u);
    EXPECT_EQ(c.train.seed, 11u);
}

TEST(RunConfig, SwitchesSelectMode) {
    EXPECT_EQ(run_config_from_json(R"({"nve": false})").mode(), ScoringMode::IdeOnly);
    EXPECT_EQ(run_config_from_json(R"({"ide": false})").mode(), ScoringMode::NveOnly);
    EXPECT_EQ(run_config_from_json(R"({"nve": false, "ide": false})").scoring.mode, ScoringMode::MatchingOnly);
}

TEST(RunConfig, RejectsUnknownKeyWrongTypeAndBadJson) {
    EXPECT_THROW(run_config_from_json(R"({"epoch": 3})"), ConfigError);
    EXPECT_THROW(run_config_from_json(R"({"epochs": "three"})"), ConfigError);
    EXPECT_THROW(run_config_from_json(R"({"attention_scale": "wide"})"), ConfigError);
    EXPECT_THROW(run_config_from_json("[1, 2]"), ConfigError);
    EXPECT_THROW(run_config_from_json("{"), ConfigError);
    EXPECT_THROW(read_run_config("/nonexistent/config.json"), ConfigError);
}

TEST(RunConfig, ValidateRejectsBadValues) {
    EXPECT_THROW(run_config_from_json(R"({"k": 3, "r": 3})").validate(), ConfigError);
    EXPECT_NO_THROW(run_config_from_json("{}").validate());
}

TEST(RunConfig, JsonRoundTrip) {
    const RunConfig a = run_config_from_json(R"({"epochs": 4, "alpha": 0.5, "ide": false, "dropout": 0.0})");
    const RunConfig b = run_config_from_json(run_config_to_json(a));
    EXPECT_EQ(run_config_to_json(a), run_config_to_json(b));
    EXPECT_FALSE(b.ide);
}

TEST(RunConfig, DefaultsListEveryKey) {
    const auto keys = nlohmann::json::parse(run_config_to_json(RunConfig{}));
    const std::string listed = run_config_defaults();
    for (const auto& [k, v] : keys.items()) EXPECT_NE(listed.find(k + " = "), std::string::npos) << k;
}

TEST(RunConfig, CheckpointNve) {
    Checkpoint ck;
    EXPECT_FALSE(checkpoint_nve(ck).has_value());
    ck.meta["meta.nve"] = R"({"k": 9, "r": 3, "alpha": 0.75})";
    const auto n = checkpoint_nve(ck);
    ASSERT_TRUE(n.has_value());
    EXPECT_EQ(n->k, 9u);
    EXPECT_EQ(n->r, 3u);
    EXPECT_DOUBLE_EQ(n->alpha, 0.75);
    ck.meta["meta.nve"] = R"({"k": 9})";
    EXPECT_THROW(checkpoint_nve(ck), FormatError);
}
