#include <gtest/gtest.h>

#include <cmath>

#include <nlohmann/json.hpp>

#include "emi/ablation.hpp"

using namespace emi;

namespace {

Config tiny_config()
{
    Config c;
    c.corpus.n_samples = 12;
    c.corpus.frames = 6;
    c.corpus.dims = {5, 6, 4};
    c.encoder = {4, 6, 32};
    c.fusion.tcn_layers = 1;
    c.fusion.tcn_channels = 4;
    c.fusion.lstm_hidden = 2;
    c.fusion.segments = 2;
    c.fusion.d_shared = 4;
    c.fusion.map_hidden = 4;
    c.fusion.quality_hidden = 3;
    c.fusion.layers = 1;
    c.fusion.heads = 2;
    c.fusion.ff_hidden = 4;
    c.train.epochs = 2;
    c.train.batch_size = 4;
    return c;
}

AblationPlan one_cell_plan()
{
    AblationPlan p;
    p.cells.push_back({ModalitySet::parse("V+A+T"), true, true});
    p.seeds = {3};
    return p;
}

class Ablation : public ::testing::Test {
protected:
    void SetUp() override
    {
        cfg = tiny_config();
        corpus = generate_corpus(1, cfg.corpus);
        encoders = random_frozen_encoders(corpus, cfg);
    }
    Config cfg;
    std::vector<SampleBundle> corpus;
    AlignedEncoders encoders;
};

} // namespace

TEST(Plan, ParsesCellsSeedsDegradationAndConfig)
{
    AblationPlan p = parse_plan(R"({
        "cells": [{"modalities": "V+A+T", "tfe": false, "qam": true}, {"modalities": "A"}],
        "seeds": [1, 2, 3],
        "degradation": {"visual_rate": 0.25, "span": 0.4},
        "config": {"train.epochs": 5, "fusion.mode": "concat", "train.eta_max": 0.125},
        "compensation": true
    })");
    ASSERT_EQ(p.cells.size(), 2u);
    EXPECT_FALSE(p.cells[0].tfe);
    EXPECT_TRUE(p.cells[0].qam);
    EXPECT_TRUE(p.cells[1].tfe && p.cells[1].qam);
    EXPECT_EQ(p.cells[1].modalities.label(), "A");
    EXPECT_EQ(p.seeds, (std::vector<std::uint64_t>{1, 2, 3}));
    EXPECT_EQ(p.degradation.visual_rate, 0.25);
    EXPECT_EQ(p.degradation.audio_rate, 0.0);
    EXPECT_EQ(p.degradation.span, 0.4);
    EXPECT_TRUE(p.compensation);
    Config c = parse_config(p.config_overrides);
    EXPECT_EQ(c.train.epochs, 5u);
    EXPECT_EQ(c.fusion.mode, FusionMode::Concat);
    EXPECT_EQ(c.train.eta_max, 0.125);
}

TEST(Plan, CrossProductForm)
{
    AblationPlan p = parse_plan(R"({"modality_subsets": ["V", "A+T"],
        "toggles": [{"tfe": true, "qam": true}, {"tfe": false, "qam": false}], "seeds": [1]})");
    ASSERT_EQ(p.cells.size(), 4u);
    EXPECT_EQ(p.cells[3].label(), "A+T baseline");
}

TEST(Plan, JsonRoundTrip)
{
    AblationPlan p = standard_plan({4, 5});
    p.config_overrides = "train.epochs = 3\n";
    AblationPlan back = parse_plan(plan_to_json(p));
    ASSERT_EQ(back.cells.size(), p.cells.size());
    for (std::size_t i = 0; i < p.cells.size(); ++i) {
        EXPECT_EQ(back.cells[i].label(), p.cells[i].label());
    }
    EXPECT_EQ(back.seeds, p.seeds);
    EXPECT_EQ(back.degradation.visual_rate, p.degradation.visual_rate);
    EXPECT_EQ(back.config_overrides, p.config_overrides);
}

TEST(Plan, RejectsInvalidPlans)
{
    EXPECT_THROW(parse_plan(R"({"cells": [{"modalities": "V"}], "seeds": []})"), ParameterError);
    EXPECT_THROW(parse_plan(R"({"cells": [], "seeds": [1]})"), ParameterError);
    EXPECT_THROW(parse_plan(R"({"cells": [{"modalities": ""}], "seeds": [1]})"), ParameterError);
    EXPECT_THROW(parse_plan(R"({"cells": [{"modalities": "VQ"}], "seeds": [1]})"), ParameterError);
    EXPECT_THROW(parse_plan(R"({"cells": [{"modalities": "V"}], "seeds": [1], "degradation": {"visual_rate": 2}})"),
                 ParameterError);
    EXPECT_THROW(parse_plan("{not json"), ParameterError);
    EXPECT_THROW(parse_plan(R"({"cells": [{"modalities": "V"}]})"), ParameterError);
}

TEST(Plan, StandardPlanCoversSubsetsAndToggles)
{
    AblationPlan p = standard_plan({1, 2, 3, 4, 5});
    EXPECT_NO_THROW(p.validate());
    EXPECT_EQ(p.cells.size(), 9u);
    for (const auto& c : p.cells) {
        EXPECT_GE(c.modalities.count(), 1u);
    }
}

TEST_F(Ablation, OneCellOneSeedGivesOneRow)
{
    AblationTable t = run_ablation(one_cell_plan(), corpus, encoders, cfg);
    ASSERT_EQ(t.rows.size(), 1u);
    ASSERT_EQ(t.rows[0].runs.size(), 1u);
    EXPECT_EQ(t.rows[0].completed, 1u);
    ASSERT_TRUE(t.rows[0].runs[0].val_rho.has_value());
    EXPECT_EQ(t.rows[0].mean, *t.rows[0].runs[0].val_rho);
    EXPECT_EQ(t.rows[0].stddev, 0.0);
}

TEST_F(Ablation, TrainerSeesCellTogglesSeedAndOverrides)
{
    AblationPlan p = one_cell_plan();
    p.cells[0] = {ModalitySet::parse("A+T"), false, true};
    p.seeds = {9};
    p.config_overrides = "train.epochs = 7\n";
    Config seen;
    run_ablation(p, corpus, encoders, cfg, {}, [&](const Config& c) {
        seen = c;
        return 0.5;
    });
    EXPECT_EQ(seen.fusion.modalities.label(), "A+T");
    EXPECT_FALSE(seen.fusion.tfe);
    EXPECT_TRUE(seen.fusion.qam);
    EXPECT_EQ(seen.seed, 9u);
    EXPECT_EQ(seen.train.epochs, 7u);
}

TEST_F(Ablation, MeanAndSampleStdOverSeeds)
{
    AblationPlan p = one_cell_plan();
    p.seeds = {1, 2};
    auto t = run_ablation(p, corpus, encoders, cfg, {}, [](const Config& c) { return c.seed == 1 ? 0.2 : 0.4; });
    EXPECT_NEAR(t.rows[0].mean, 0.3, 1e-15);
    EXPECT_NEAR(t.rows[0].stddev, std::sqrt(0.02), 1e-15);
}

TEST_F(Ablation, FailingRunsAreRecordedAndTheSweepContinues)
{
    AblationPlan p = standard_plan({1, 2});
    std::size_t calls = 0;
    auto t = run_ablation(p, corpus, encoders, cfg, {}, [&](const Config& c) -> double {
        ++calls;
        if (c.fusion.modalities.label() == "A" && c.seed == 2) {
            throw NumericError("diverged");
        }
        if (c.fusion.modalities.label() == "V") {
            return std::numeric_limits<double>::quiet_NaN();
        }
        return 0.5;
    });
    EXPECT_EQ(calls, p.cells.size() * 2);
    const CellResult* a = t.find("A", true, true);
    ASSERT_NE(a, nullptr);
    EXPECT_EQ(a->completed, 1u);
    EXPECT_EQ(a->runs[1].error, "diverged");
    EXPECT_EQ(a->mean, 0.5);
    const CellResult* v = t.find("V", true, true);
    EXPECT_EQ(v->completed, 0u);
    EXPECT_TRUE(std::isnan(v->mean));
    EXPECT_EQ(t.find("V+A+T", false, false)->completed, 2u);

    auto j = nlohmann::json::parse(t.to_json());
    EXPECT_EQ(j["rows"].size(), p.cells.size());
    EXPECT_TRUE(j["rows"][0]["mean"].is_null());
    EXPECT_EQ(j["rows"][1]["runs"][1]["error"], "diverged");
    std::string text = t.to_text();
    EXPECT_NE(text.find("n/a"), std::string::npos);
    EXPECT_NE(text.find("V+A+T"), std::string::npos);
}

TEST_F(Ablation, DegradationIsSeededAndLeavesTargetsAlone)
{
    Degradation none;
    auto same = degrade_corpus(corpus, none, 3);
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        EXPECT_TRUE(bit_equal(same[i], corpus[i]));
    }
    Degradation all{1.0, 0.0, 0.5};
    auto a = degrade_corpus(corpus, all, 3), b = degrade_corpus(corpus, all, 3);
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        EXPECT_TRUE(bit_equal(a[i], b[i]));
        EXPECT_EQ(a[i].target, corpus[i].target);
        ASSERT_EQ(a[i].corruption.size(), 1u);
        auto [lo, hi] = *a[i].corruption[0].frame_span;
        EXPECT_EQ(hi - lo, 3u);
        for (std::size_t t = lo; t < hi; ++t) {
            for (std::size_t d = 0; d < a[i].visual.width(); ++d) {
                EXPECT_EQ(a[i].visual.frames.at(t, d), 0.0);
            }
        }
        EXPECT_TRUE(bit_equal(a[i].audio.frames, corpus[i].audio.frames));
    }
    EXPECT_THROW(occlude_span(corpus[0], Modality::Text, 0.5, 1), ParameterError);
}

TEST_F(Ablation, CompensationReportIsWellFormed)
{
    auto rep = qam_compensation(corpus, encoders, cfg, {1, 2}, Degradation{0.5, 0.0, 0.5});
    ASSERT_EQ(rep.runs.size(), 2u);
    for (const auto& r : rep.runs) {
        EXPECT_GT(r.beta_v_occluded, 0.0);
        EXPECT_LT(r.beta_v_occluded, 1.0);
        EXPECT_GT(r.beta_v_clean, 0.0);
        EXPECT_LT(r.beta_v_clean, 1.0);
    }
    EXPECT_LE(rep.qam_wins, 2u);
    auto j = nlohmann::json::parse(rep.to_json());
    EXPECT_EQ(j["runs"].size(), 2u);
    EXPECT_THROW(qam_compensation(corpus, encoders, cfg, {}, Degradation{}), ParameterError);
}
