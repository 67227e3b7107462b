#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "emi/corpus.hpp"
#include "probe.hpp"

using namespace emi;
namespace fs = std::filesystem;

namespace {

fs::path temp_path(const std::string& name)
{
    return fs::temp_directory_path() / ("emi_corpus_" + name + "_" + std::to_string(::getpid()));
}

AnnotationRecord happy_record()
{
    AnnotationRecord r;
    r.expression = ExpressionClass::Happy;
    r.intensity = IntensityLevel::High;
    r.aus = {make_au(6), make_au(12)};
    r.valence = 0.83;
    r.arousal = 0.65;
    r.va_stddev = 0.1;
    return r;
}

} // namespace

TEST(Generate, SameSeedIsBitIdentical)
{
    auto a = generate_corpus(17, 6, 12, CorpusDims{8, 10, 4});
    auto b = generate_corpus(17, 6, 12, CorpusDims{8, 10, 4});
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_TRUE(bit_equal(a[i], b[i]));
    }
    auto c = generate_corpus(18, 6, 12, CorpusDims{8, 10, 4});
    EXPECT_FALSE(bit_equal(a[0], c[0]));
}

TEST(Generate, ShapeContract)
{
    auto c = generate_corpus(1, 1, 4, CorpusDims{8, 8, 8});
    ASSERT_EQ(c.size(), 1u);
    EXPECT_EQ(c[0].visual.frames.shape(), (Shape{4, 8}));
    EXPECT_EQ(c[0].audio.frames.shape(), (Shape{4, 8}));
    EXPECT_EQ(c[0].text.frames.shape(), (Shape{1, 8}));
}

TEST(Generate, RejectsDegenerateParameters)
{
    EXPECT_THROW(generate_corpus(1, 1, 4, CorpusDims{0, 8, 8}), ParameterError);
    EXPECT_THROW(generate_corpus(1, 0, 4, CorpusDims{}), ParameterError);
    EXPECT_THROW(generate_corpus(1, 1, 3, CorpusDims{}), ParameterError);
}

TEST(Generate, AlignmentAndTargetRange)
{
    for (std::uint64_t seed : {1u, 2u, 3u, 4u}) {
        for (const auto& s : generate_corpus(seed, 20, 16, CorpusDims{6, 7, 5})) {
            EXPECT_EQ(s.visual.length(), s.audio.length());
            EXPECT_EQ(s.text.length(), 1u);
            for (double v : s.target) {
                EXPECT_GE(v, 0.0);
                EXPECT_LE(v, 1.0);
            }
        }
    }
}

TEST(Generate, NoiselessTargetsRecoverableByLeastSquares)
{
    CorpusParams p;
    p.n_samples = 60;
    p.frames = 20;
    p.dims = {8, 8, 8};
    p.visual_noise = p.audio_noise = p.text_noise = 0.0;
    auto corpus = generate_corpus(5, p);
    // Visual temporal means plus intercept: rank 9 >= 6.
    Eigen::MatrixXd X = emi::testing::design(corpus, true, false, false);
    Eigen::MatrixXd Y = emi::testing::targets(corpus);
    Eigen::MatrixXd W = X.colPivHouseholderQr().solve(Y);
    double worst = (X * W - Y).cwiseAbs().maxCoeff();
    EXPECT_LT(worst, 1e-5);
}

TEST(Generate, CleanCorpusIsLearnableByRidgeProbe)
{
    auto train = generate_corpus(21, CorpusParams{.n_samples = 400});
    auto test = generate_corpus(21, CorpusParams{.n_samples = 600});
    test.erase(test.begin(), test.begin() + 400);
    EXPECT_GT(emi::testing::ridge_probe_rho(train, test), 0.9);
}

TEST(Generate, RidgeProbeDegradesWithCorruptionStrength)
{
    const std::vector<double> strengths{0.0, 0.25, 0.5, 1.0};
    std::vector<double> rho(strengths.size(), 0.0);
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        auto all = generate_corpus(100 + seed, CorpusParams{.n_samples = 300});
        std::vector<SampleBundle> train(all.begin(), all.begin() + 200);
        std::vector<SampleBundle> test(all.begin() + 200, all.end());
        for (std::size_t k = 0; k < strengths.size(); ++k) {
            std::vector<SampleBundle> noisy;
            for (std::size_t i = 0; i < test.size(); ++i) {
                SampleBundle s = test[i];
                for (Modality m : {Modality::Visual, Modality::Audio, Modality::Text}) {
                    s = corrupt(s, {m, CorruptionKind::GaussianNoise, strengths[k], std::nullopt}, seed * 1000 + i);
                }
                noisy.push_back(std::move(s));
            }
            rho[k] += emi::testing::ridge_probe_rho(train, noisy) / 5.0;
        }
    }
    for (std::size_t k = 1; k < rho.size(); ++k) {
        EXPECT_LE(rho[k], rho[k - 1]) << "strength " << strengths[k];
    }
}

TEST(Corrupt, ZeroStrengthIsIdentity)
{
    auto s = generate_corpus(3, 1, 10, CorpusDims{4, 4, 4})[0];
    for (auto kind : {CorruptionKind::GaussianNoise, CorruptionKind::OcclusionMask, CorruptionKind::DropoutFrames}) {
        auto c = corrupt(s, {Modality::Visual, kind, 0.0, std::nullopt}, 9);
        EXPECT_TRUE(bit_equal(c.visual.frames, s.visual.frames));
        EXPECT_EQ(c.target, s.target);
    }
}

TEST(Corrupt, FullOcclusionZeroesModality)
{
    auto s = generate_corpus(3, 1, 10, CorpusDims{4, 4, 4})[0];
    auto c = corrupt(s, {Modality::Audio, CorruptionKind::OcclusionMask, 1.0, std::make_pair<std::size_t>(0, 10)}, 1);
    for (double v : c.audio.frames.values()) {
        EXPECT_EQ(v, 0.0);
    }
    EXPECT_TRUE(bit_equal(c.visual.frames, s.visual.frames));
    EXPECT_EQ(c.target, s.target);
    ASSERT_EQ(c.corruption.size(), 1u);
}

TEST(Corrupt, PartialOcclusionOnlyTouchesSpan)
{
    auto s = generate_corpus(3, 1, 10, CorpusDims{4, 4, 4})[0];
    auto c = corrupt(s, {Modality::Visual, CorruptionKind::OcclusionMask, 1.0, std::make_pair<std::size_t>(2, 5)}, 1);
    for (std::size_t t = 0; t < 10; ++t) {
        for (std::size_t d = 0; d < 4; ++d) {
            double v = c.visual.frames.at(t, d);
            if (t >= 2 && t < 5) {
                EXPECT_EQ(v, 0.0);
            } else {
                EXPECT_EQ(v, s.visual.frames.at(t, d));
            }
        }
    }
}

TEST(Corrupt, GaussianNoiseDoublesFeatureVariance)
{
    auto s = generate_corpus(8, 1, 64, CorpusDims{32, 4, 4})[0]; // T*D = 2048
    auto c = corrupt(s, {Modality::Visual, CorruptionKind::GaussianNoise, 1.0, std::nullopt}, 77);
    auto variance = [](const Tensor& x, std::size_t d) {
        double m = 0.0, m2 = 0.0;
        for (std::size_t t = 0; t < x.rows(); ++t) {
            m += x.at(t, d);
        }
        m /= static_cast<double>(x.rows());
        for (std::size_t t = 0; t < x.rows(); ++t) {
            m2 += (x.at(t, d) - m) * (x.at(t, d) - m);
        }
        return m2 / static_cast<double>(x.rows());
    };
    double before = 0.0, after = 0.0;
    for (std::size_t d = 0; d < 32; ++d) {
        before += variance(s.visual.frames, d);
        after += variance(c.visual.frames, d);
    }
    double ratio = after / before;
    EXPECT_GT(ratio, 2.0 * 0.8);
    EXPECT_LT(ratio, 2.0 * 1.2);
}

TEST(Corrupt, DropoutZeroesWholeFrames)
{
    auto s = generate_corpus(4, 1, 40, CorpusDims{5, 5, 5})[0];
    auto c = corrupt(s, {Modality::Visual, CorruptionKind::DropoutFrames, 0.5, std::nullopt}, 3);
    std::size_t dropped = 0;
    for (std::size_t t = 0; t < 40; ++t) {
        bool zero = true, same = true;
        for (std::size_t d = 0; d < 5; ++d) {
            zero = zero && c.visual.frames.at(t, d) == 0.0;
            same = same && c.visual.frames.at(t, d) == s.visual.frames.at(t, d);
        }
        EXPECT_TRUE(zero || same);
        dropped += zero;
    }
    EXPECT_GT(dropped, 5u);
    EXPECT_LT(dropped, 35u);
}

TEST(Corrupt, RejectsInvalidSpecs)
{
    auto s = generate_corpus(3, 1, 10, CorpusDims{4, 4, 4})[0];
    EXPECT_THROW(corrupt(s, {Modality::Visual, CorruptionKind::OcclusionMask, 1.0, std::make_pair<std::size_t>(5, 11)}, 1),
                 ParameterError);
    EXPECT_THROW(corrupt(s, {Modality::Visual, CorruptionKind::OcclusionMask, 1.0, std::make_pair<std::size_t>(4, 4)}, 1),
                 ParameterError);
    EXPECT_THROW(corrupt(s, {Modality::Visual, CorruptionKind::GaussianNoise, 1.5, std::nullopt}, 1), ParameterError);
}

TEST(Emif, RoundTripIsBitExact)
{
    auto corpus = generate_corpus(11, 5, 9, CorpusDims{6, 7, 3});
    corpus[2] = corrupt(corpus[2], {Modality::Visual, CorruptionKind::GaussianNoise, 0.7, std::nullopt}, 4);
    corpus[3] = corrupt(corpus[3], {Modality::Audio, CorruptionKind::OcclusionMask, 1.0, std::make_pair<std::size_t>(1, 4)}, 4);
    auto path = temp_path("roundtrip");
    write_features(path, corpus);
    auto back = read_features(path);
    fs::remove(path);
    ASSERT_EQ(back.size(), corpus.size());
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        EXPECT_TRUE(bit_equal(back[i], corpus[i])) << i;
    }
}

TEST(Emif, DistinctErrors)
{
    auto corpus = generate_corpus(11, 2, 6, CorpusDims{4, 4, 2});
    auto path = temp_path("errors");
    write_features(path, corpus);
    std::string bytes;
    {
        std::ifstream in(path, std::ios::binary);
        bytes.assign(std::istreambuf_iterator<char>(in), {});
    }
    auto expect_code = [&](std::string content, FormatError::Code code) {
        {
            std::ofstream out(path, std::ios::binary | std::ios::trunc);
            out << content;
        }
        try {
            read_features(path);
            ADD_FAILURE() << "expected FormatError";
        } catch (const FormatError& e) {
            EXPECT_EQ(e.code(), code) << e.what();
        }
    };
    std::string bad_magic = bytes;
    bad_magic[0] = 'X';
    expect_code(bad_magic, FormatError::Code::BadMagic);
    std::string bad_version = bytes;
    bad_version[4] = 9;
    expect_code(bad_version, FormatError::Code::VersionMismatch);
    expect_code(bytes.substr(0, bytes.size() - 10), FormatError::Code::TruncatedPayload);
    fs::remove(path);
}

TEST(Resample, AveragesWindowsPerFrame)
{
    Tensor w({6, 1}, {1, 3, 5, 7, 9, 11});
    EXPECT_EQ(resample_to_frames(w, 3).values(), (std::vector<double>{2, 6, 10}));
    EXPECT_EQ(resample_to_frames(Tensor({5, 1}, {1, 2, 3, 4, 5}), 2).values(), (std::vector<double>{2, 4.5}));
    EXPECT_THROW(resample_to_frames(w, 7), ParameterError);
}

TEST(Prompt, MatchesTemplate)
{
    EXPECT_EQ(render_prompt(happy_record()),
              "Happy (Intensity: High) with AU6 (Cheek Raiser) and AU12 (Lip Corner Puller), Valence=0.83, "
              "Arousal=0.65");
}

TEST(Prompt, SingleAuHasNoSeparator)
{
    auto r = happy_record();
    r.aus = {make_au(4)};
    auto p = render_prompt(r);
    EXPECT_EQ(p.find(" and "), std::string::npos);
    EXPECT_NE(p.find("AU4 (Brow Lowerer)"), std::string::npos);
}

TEST(Prompt, FixedTwoDecimals)
{
    auto r = happy_record();
    r.valence = 0.0;
    r.arousal = -0.5;
    auto p = render_prompt(r);
    EXPECT_NE(p.find("Valence=0.00"), std::string::npos);
    EXPECT_NE(p.find("Arousal=-0.50"), std::string::npos);
}

TEST(Prompt, UnknownAuAndEmptyList)
{
    auto r = happy_record();
    r.aus = {make_au(99)};
    EXPECT_NE(render_prompt(r).find("AU99 (Unknown)"), std::string::npos);
    r.aus.clear();
    EXPECT_THROW(render_prompt(r), ParameterError);
}

TEST(Annotations, SynthesizedRecordsAreValidAndRoundTrip)
{
    auto corpus = generate_corpus(2, 30, 8, CorpusDims{4, 4, 4});
    auto anns = synthesize_annotations(corpus, 2);
    ASSERT_EQ(anns.size(), corpus.size());
    auto path = temp_path("ann");
    write_annotations(path, anns);
    auto back = read_annotations(path);
    fs::remove(path);
    ASSERT_EQ(back.size(), anns.size());
    for (std::size_t i = 0; i < anns.size(); ++i) {
        EXPECT_EQ(anns[i].id, corpus[i].id);
        EXPECT_NO_THROW(anns[i].record.validate());
        EXPECT_EQ(render_prompt(back[i].record), render_prompt(anns[i].record));
        EXPECT_EQ(back[i].record.va_stddev, anns[i].record.va_stddev);
    }
    EXPECT_THROW(annotation_from_json(R"({"id":"x","class":"Happy"})"), FormatError);
    EXPECT_THROW(annotation_from_json(R"({"id":"x","class":"Bored","intensity":"Low","aus":[1],"valence":0,"arousal":0,"va_std":0})"),
                 FormatError);
}
