#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "emi/align.hpp"
#include "emi/ops.hpp"
#include "gradcheck.hpp"

using namespace emi;
using emi::testing::grad_check;
using emi::testing::random_tensor;

namespace {

Tensor unit_rows(std::size_t n, std::size_t d, std::mt19937_64& rng)
{
    return l2_normalize_rows(random_tensor({n, d}, rng, -1.0, 1.0)).detach();
}

// Weighted modality-to-text InfoNCE evaluated directly from a logit matrix.
double loop_infonce(const std::vector<std::vector<double>>& logits, const std::vector<double>& w)
{
    const std::size_t n = logits.size();
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double denom = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            denom += std::exp(logits[i][j]);
        }
        total += w[i] * std::log(std::exp(logits[i][i]) / denom);
    }
    return -total / static_cast<double>(n);
}

std::vector<std::vector<double>> loop_logits(const Tensor& f, const Tensor& g, double tau)
{
    const std::size_t n = f.rows(), d = f.cols();
    std::vector<std::vector<double>> s(n, std::vector<double>(n, 0.0));
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            for (std::size_t k = 0; k < d; ++k) {
                s[i][j] += f.at(i, k) * g.at(j, k);
            }
            s[i][j] /= tau;
        }
    }
    return s;
}

Tensor permute_rows(const Tensor& t, const std::vector<std::size_t>& perm)
{
    std::vector<double> out;
    for (auto r : perm) {
        for (std::size_t k = 0; k < t.cols(); ++k) {
            out.push_back(t.at(r, k));
        }
    }
    return Tensor(t.shape(), out);
}

} // namespace

TEST(Tokenize, SplitsOnWhitespaceAndTemplatePunctuation)
{
    auto tokens = tokenize("Happy (Intensity: High) with AU12 (Lip Corner Puller), Valence=0.52, Arousal=-0.31");
    std::vector<std::string> expected{"Happy", "Intensity", "High",    "with",    "AU12", "Lip",
                                      "Corner", "Puller",   "Valence", "0.52", "Arousal", "-0.31"};
    EXPECT_EQ(tokens, expected);
}

TEST(Tokenize, HashIsStable)
{
    // FNV-1a 64 reference values.
    EXPECT_EQ(token_hash(""), 14695981039346656037ull);
    EXPECT_EQ(token_hash("a"), 0xaf63dc4c8601ec8cull);
}

TEST(TextEncoder, IdenticalPromptsGiveIdenticalEmbeddings)
{
    std::mt19937_64 rng(1);
    Tensor table = random_tensor({64, 8}, rng, -1, 1);
    EXPECT_TRUE(bit_equal(encode_text_tokens("Sad (Intensity: Low)", table),
                          encode_text_tokens("Sad (Intensity: Low)", table)));
}

TEST(TextEncoder, SingleTokenIsItsNormalizedRow)
{
    std::mt19937_64 rng(2);
    const std::size_t V = 32, d = 5;
    Tensor table = random_tensor({V, d}, rng, -1, 1);
    Tensor e = encode_text_tokens("Happy", table);
    const std::size_t row = token_hash("Happy") % V;
    double norm = 0.0;
    for (std::size_t k = 0; k < d; ++k) {
        norm += table.at(row, k) * table.at(row, k);
    }
    norm = std::sqrt(norm);
    for (std::size_t k = 0; k < d; ++k) {
        EXPECT_NEAR(e.at(0, k), table.at(row, k) / norm, 1e-14);
    }
}

TEST(TextEncoder, TokenOrderDoesNotMatter)
{
    std::mt19937_64 rng(3);
    Tensor table = random_tensor({128, 6}, rng, -1, 1);
    Tensor a = encode_text_tokens("Fear with AU4 and AU20", table);
    Tensor b = encode_text_tokens("AU20 and AU4 with Fear", table);
    for (std::size_t k = 0; k < 6; ++k) {
        EXPECT_NEAR(a.at(0, k), b.at(0, k), 1e-14);
    }
}

TEST(TextEncoder, EmptyPromptThrows)
{
    Tensor table = Tensor::ones({8, 2});
    EXPECT_THROW(encode_text_tokens("", table), ParameterError);
    EXPECT_THROW(encode_text_tokens(" (,) ", table), ParameterError);
}

TEST(InfoNce, SinglePairIsZero)
{
    std::mt19937_64 rng(4);
    Tensor f = unit_rows(1, 4, rng), g = unit_rows(1, 4, rng);
    EXPECT_NEAR(infonce_weighted({f, g, {1.0}, 0.07}).item(), 0.0, 1e-15);
}

TEST(InfoNce, EqualSimilaritiesGiveLogN)
{
    for (std::size_t n : {2u, 5u, 64u}) {
        Tensor same = l2_normalize_rows(Tensor::ones({n, 3})).detach();
        double loss = infonce_weighted({same, same, std::vector<double>(n, 1.0), 0.07}).item();
        EXPECT_NEAR(loss, std::log(static_cast<double>(n)), 1e-12) << n;
    }
}

TEST(InfoNce, TwoPairDiagonalMargin)
{
    // Orthonormal rows with tau=0.1 give logits [[10,0],[0,10]].
    Tensor e = Tensor::eye(2);
    double loss = infonce_weighted({e, e, {1.0, 1.0}, 0.1}).item();
    EXPECT_NEAR(loss, std::log1p(std::exp(-10.0)), 1e-15);
    EXPECT_NEAR(loss, 4.54e-5, 1e-7);
}

TEST(InfoNce, MatchesLoopOracleWithWeights)
{
    std::mt19937_64 rng(5);
    Tensor f = unit_rows(7, 5, rng), g = unit_rows(7, 5, rng);
    std::vector<double> w{0.5, 1.5, 1.0, 0.2, 2.0, 0.8, 1.0};
    double got = infonce_weighted({f, g, w, 0.07}).item();
    EXPECT_NEAR(got, loop_infonce(loop_logits(f, g, 0.07), w), 1e-12);
}

TEST(InfoNce, UnitWeightsEqualUnweighted)
{
    std::mt19937_64 rng(6);
    Tensor f = unit_rows(6, 4, rng), g = unit_rows(6, 4, rng);
    std::vector<double> ones(6, 1.0);
    EXPECT_NEAR(infonce_weighted({f, g, ones, 0.5}).item(), loop_infonce(loop_logits(f, g, 0.5), ones), 1e-13);
}

TEST(InfoNce, CommonRowPermutationLeavesLossUnchanged)
{
    std::mt19937_64 rng(7);
    Tensor f = unit_rows(8, 4, rng), g = unit_rows(8, 4, rng);
    std::vector<double> w{1, 2, 0.5, 1, 1, 0.3, 1.2, 1};
    std::vector<std::size_t> perm(8);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<double> wp;
    for (auto p : perm) {
        wp.push_back(w[p]);
    }
    double a = infonce_weighted({f, g, w, 0.07}).item();
    double b = infonce_weighted({permute_rows(f, perm), permute_rows(g, perm), wp, 0.07}).item();
    EXPECT_NEAR(a, b, 1e-12);
}

TEST(InfoNce, TemperatureConsistency)
{
    std::mt19937_64 rng(8);
    Tensor f = unit_rows(5, 3, rng), g = unit_rows(5, 3, rng);
    std::vector<double> w(5, 1.0);
    const double tau = 0.2, c = 3.0;
    auto s = loop_logits(f, g, 1.0);
    auto scaled = s;
    for (auto& row : scaled) {
        for (auto& v : row) {
            v = (v * c) / (tau * c);
        }
    }
    EXPECT_NEAR(infonce_weighted({f, g, w, tau}).item(), loop_infonce(scaled, w), 1e-12);
}

TEST(InfoNce, SymmetricMatchesOneWayOnSymmetricLogits)
{
    std::mt19937_64 rng(9);
    Tensor f = unit_rows(4, 3, rng);
    std::vector<double> w(4, 1.0);
    EXPECT_NEAR(infonce_weighted({f, f, w, 0.1}, true).item(), infonce_weighted({f, f, w, 0.1}, false).item(),
                1e-12);
}

TEST(InfoNce, GradientMatchesFiniteDifferences)
{
    std::mt19937_64 rng(10);
    Tensor raw_f = random_tensor({5, 4}, rng, -1, 1);
    Tensor raw_g = random_tensor({5, 4}, rng, -1, 1);
    std::vector<double> w{1.2, 0.8, 1.0, 0.5, 1.5};
    for (bool sym : {false, true}) {
        auto r = grad_check(
            [&] { return infonce_weighted({l2_normalize_rows(raw_f), l2_normalize_rows(raw_g), w, 0.3}, sym); },
            {raw_f, raw_g});
        EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
    }
}

TEST(InfoNce, RejectsBadInputs)
{
    Tensor e = Tensor::eye(2);
    EXPECT_THROW(infonce_weighted({e, e, {1, 1}, 0.0}), ParameterError);
    EXPECT_THROW(infonce_weighted({e, e, {1, 1}, -0.1}), ParameterError);
    EXPECT_THROW(infonce_weighted({e, e, {1}, 0.1}), DimensionError);
    EXPECT_THROW(infonce_weighted({e, e, {1, -1}, 0.1}), ParameterError);
    EXPECT_THROW(infonce_weighted({e, Tensor::eye(3), {1, 1}, 0.1}), DimensionError);
    EXPECT_THROW(infonce_weighted({Tensor::ones({2, 2}), e, {1, 1}, 0.1}), ParameterError);
}

TEST(ConfidenceWeight, EqualSpreadGivesOnes)
{
    std::vector<double> sd(5, 0.3);
    for (double w : confidence_weights(sd)) {
        EXPECT_NEAR(w, 1.0, 1e-15);
    }
}

TEST(ConfidenceWeight, TwoSampleArithmetic)
{
    std::vector<double> sd{0.0, 1.0};
    auto w = confidence_weights(sd);
    EXPECT_NEAR(w[0], 4.0 / 3.0, 1e-15);
    EXPECT_NEAR(w[1], 2.0 / 3.0, 1e-15);
}

TEST(ConfidenceWeight, LargeSpreadVanishesBeforeRescaling)
{
    EXPECT_LT(confidence_weight(1e12, 1.0), 1e-11);
    EXPECT_EQ(confidence_weight(0.0, 1.0), 1.0);
}

TEST(ConfidenceWeight, NegativeSpreadThrows)
{
    EXPECT_THROW(confidence_weight(-0.1, 1.0), ParameterError);
    std::vector<double> sd{0.1, -1.0};
    EXPECT_THROW(confidence_weights(sd), ParameterError);
}

TEST(Retrieval, IdentityIsPerfect)
{
    EXPECT_EQ(retrieval_top1(Tensor::eye(4), Tensor::eye(4)), 1.0);
    Tensor swapped = Tensor::matrix({{0, 1}, {1, 0}});
    EXPECT_EQ(retrieval_top1(Tensor::eye(2), swapped), 0.0);
}

TEST(ToyEncoder, OutputsUnitRows)
{
    std::mt19937_64 rng(11);
    ToyEncoder enc(6, 10, 4, rng);
    Tensor y = enc.encode(random_tensor({7, 6}, rng, -3, 3));
    ASSERT_EQ(y.shape(), (Shape{7, 4}));
    for (std::size_t i = 0; i < 7; ++i) {
        double sq = 0.0;
        for (std::size_t k = 0; k < 4; ++k) {
            sq += y.at(i, k) * y.at(i, k);
        }
        EXPECT_NEAR(std::sqrt(sq), 1.0, 1e-12);
    }
}

TEST(ToyEncoder, StandardizerCentersAndScales)
{
    std::mt19937_64 rng(12);
    ToyEncoder enc(2, 3, 2, rng);
    enc.fit_standardizer(Tensor::matrix({{1, 10}, {3, 10}, {5, 10}}));
    EXPECT_NEAR(enc.shift.at(0, 0), 3.0, 1e-15);
    EXPECT_NEAR(enc.inv_scale.at(0, 0), 1.0 / std::sqrt(8.0 / 3.0), 1e-15);
    // Constant feature keeps unit scale.
    EXPECT_EQ(enc.inv_scale.at(0, 1), 1.0);
}

class PretrainAlign : public ::testing::Test {
protected:
    void SetUp() override
    {
        corpus = generate_corpus(21, 64, 20, cfg.corpus.dims);
        annotations = synthesize_annotations(corpus, 21);
    }
    Config cfg;
    std::vector<SampleBundle> corpus;
    std::vector<Annotation> annotations;
};

TEST_F(PretrainAlign, RetrievalAndLossBeatChance)
{
    AlignReport rep;
    pretrain_align(corpus, annotations, cfg, &rep);
    EXPECT_GE(rep.retrieval_visual, 0.8);
    EXPECT_GE(rep.retrieval_audio, 0.8);
    EXPECT_LT(rep.final_loss_visual, std::log(64.0));
    EXPECT_LT(rep.final_loss_audio, std::log(64.0));
    EXPECT_EQ(rep.epoch_loss.size(), cfg.align.epochs);
    EXPECT_LT(rep.epoch_loss.back(), rep.epoch_loss.front());
}

TEST_F(PretrainAlign, FrozenEncodersAreStableAndRecordNothing)
{
    cfg.align.epochs = 2;
    AlignedEncoders enc = pretrain_align(corpus, annotations, cfg);
    EXPECT_TRUE(enc.frozen);
    for (const auto& [name, p] : enc.parameters()) {
        EXPECT_FALSE(p.requires_grad()) << name;
    }
    GradTape tape;
    Tensor a, b;
    {
        GradTape::Recording rec(tape);
        a = enc.encode_frames(corpus[0].visual);
        b = enc.encode_frames(corpus[0].visual);
    }
    EXPECT_TRUE(bit_equal(a, b));
    EXPECT_EQ(tape.size(), 0u);
}

TEST_F(PretrainAlign, SeededRunsAreBitIdentical)
{
    cfg.align.epochs = 3;
    AlignedEncoders a = pretrain_align(corpus, annotations, cfg);
    AlignedEncoders b = pretrain_align(corpus, annotations, cfg);
    auto pa = a.parameters(), pb = b.parameters();
    ASSERT_EQ(pa.size(), pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) {
        EXPECT_TRUE(bit_equal(pa[i].second, pb[i].second)) << pa[i].first;
    }
}

TEST_F(PretrainAlign, UnpairedIdsThrow)
{
    auto missing = annotations;
    missing.pop_back();
    EXPECT_THROW(pretrain_align(corpus, missing, cfg), ParameterError);
    auto renamed = annotations;
    renamed[3].id = "sample-99999";
    EXPECT_THROW(pretrain_align(corpus, renamed, cfg), ParameterError);
    auto dup = annotations;
    dup[4].id = dup[5].id;
    EXPECT_THROW(pretrain_align(corpus, dup, cfg), ParameterError);
}

TEST_F(PretrainAlign, TextStreamHasNoFrameEncoder)
{
    cfg.align.epochs = 1;
    AlignedEncoders enc = pretrain_align(corpus, annotations, cfg);
    EXPECT_THROW(enc.encode_frames(corpus[0].text), ParameterError);
}
