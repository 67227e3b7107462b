#include "emi/corpus.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numbers>
#include <random>

#include <nlohmann/json.hpp>

namespace emi {

namespace {

double to_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

void quantize(Tensor& t)
{
    for (double& v : t.mutable_data()) {
        v = to_f32(v);
    }
}

struct Mixing {
    std::vector<double> weights; // rows x cols
    std::vector<double> bias;    // rows
    std::size_t rows = 0;
    std::size_t cols = 0;

    void apply(const double* in, double* out) const
    {
        for (std::size_t r = 0; r < rows; ++r) {
            double s = bias[r];
            for (std::size_t c = 0; c < cols; ++c) {
                s += weights[r * cols + c] * in[c];
            }
            out[r] = s;
        }
    }
};

Mixing random_mixing(std::size_t rows, std::size_t cols, double bias_scale, std::mt19937_64& rng)
{
    std::normal_distribution<double> n01(0.0, 1.0);
    Mixing m;
    m.rows = rows;
    m.cols = cols;
    m.weights.resize(rows * cols);
    m.bias.resize(rows);
    const double s = 1.0 / std::sqrt(static_cast<double>(cols));
    for (auto& w : m.weights) {
        w = n01(rng) * s * 2.0;
    }
    for (auto& b : m.bias) {
        b = n01(rng) * bias_scale;
    }
    return m;
}

constexpr std::size_t kNuisance = 3;

} // namespace

std::string_view modality_name(Modality m)
{
    switch (m) {
    case Modality::Visual:
        return "visual";
    case Modality::Audio:
        return "audio";
    case Modality::Text:
        return "text";
    }
    return "?";
}

const FeatureSequence& SampleBundle::stream(Modality m) const
{
    switch (m) {
    case Modality::Visual:
        return visual;
    case Modality::Audio:
        return audio;
    default:
        return text;
    }
}

FeatureSequence& SampleBundle::stream(Modality m)
{
    return const_cast<FeatureSequence&>(static_cast<const SampleBundle&>(*this).stream(m));
}

bool bit_equal(const SampleBundle& a, const SampleBundle& b)
{
    auto same_seq = [](const FeatureSequence& x, const FeatureSequence& y) {
        return x.modality == y.modality && x.frame_rate_hz == y.frame_rate_hz && bit_equal(x.frames, y.frames);
    };
    if (a.id != b.id || a.target != b.target || !same_seq(a.visual, b.visual) || !same_seq(a.audio, b.audio) ||
        !same_seq(a.text, b.text) || a.corruption.size() != b.corruption.size()) {
        return false;
    }
    for (std::size_t i = 0; i < a.corruption.size(); ++i) {
        const auto& x = a.corruption[i];
        const auto& y = b.corruption[i];
        if (x.modality != y.modality || x.kind != y.kind || x.strength != y.strength || x.frame_span != y.frame_span) {
            return false;
        }
    }
    return true;
}

void CorruptionSpec::validate(std::size_t frames) const
{
    if (!(strength >= 0.0 && strength <= 1.0)) {
        throw ParameterError("corruption strength must lie in [0,1]");
    }
    if (frame_span) {
        auto [start, end] = *frame_span;
        if (start >= end || end > frames) {
            throw ParameterError("corruption span [" + std::to_string(start) + "," + std::to_string(end) +
                                 ") outside [0," + std::to_string(frames) + ")");
        }
    }
}

double emotion_salience(Modality m, std::size_t emotion, double floor)
{
    const std::size_t first = 2 * static_cast<std::size_t>(m);
    const std::size_t offset = (emotion + kNumEmotions - first) % kNumEmotions;
    return offset < 3 ? 1.0 : floor;
}

std::vector<SampleBundle> generate_corpus(std::uint64_t seed, const CorpusParams& p)
{
    if (p.n_samples < 1) {
        throw ParameterError("generate_corpus: n_samples must be at least 1");
    }
    if (p.frames < 4) {
        throw ParameterError("generate_corpus: need at least 4 frames");
    }
    if (p.dims.visual == 0 || p.dims.audio == 0 || p.dims.text == 0) {
        throw ParameterError("generate_corpus: feature dimensions must be positive");
    }
    if (!(p.frame_rate_hz > 0.0)) {
        throw ParameterError("generate_corpus: frame rate must be positive");
    }
    if (!(p.salience_floor >= 0.0 && p.salience_floor <= 1.0)) {
        throw ParameterError("generate_corpus: salience floor must be in [0,1]");
    }
    const std::size_t T = p.frames;
    const std::size_t E = kNumEmotions;
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> n01(0.0, 1.0);

    const Mixing vis = random_mixing(p.dims.visual, E, 0.5, rng);
    const Mixing aud = random_mixing(p.dims.audio, E, 0.5, rng);
    const Mixing aud_fast = random_mixing(p.dims.audio, kNuisance, 0.0, rng);
    const Mixing txt = random_mixing(p.dims.text, E, 0.5, rng);

    auto salient = [&](Modality m, const double* z_row, double* out) {
        for (std::size_t e = 0; e < E; ++e) {
            out[e] = 0.5 + emotion_salience(m, e, p.salience_floor) * (z_row[e] - 0.5);
        }
    };
    double zs[kNumEmotions];

    std::vector<SampleBundle> corpus;
    corpus.reserve(p.n_samples);
    for (std::size_t i = 0; i < p.n_samples; ++i) {
        // Latent trajectory: offset plus three slow sinusoids per emotion, squashed into [0,1].
        std::vector<double> z(T * E);
        for (std::size_t e = 0; e < E; ++e) {
            double offset = 2.0 * unit(rng) - 1.0;
            double amp[3], freq[3], phase[3];
            double amp_sum = 0.0;
            for (int k = 0; k < 3; ++k) {
                amp[k] = 0.1 + 0.4 * unit(rng);
                freq[k] = 0.01 + 0.07 * unit(rng);
                phase[k] = 2.0 * std::numbers::pi * unit(rng);
                amp_sum += amp[k];
            }
            for (std::size_t t = 0; t < T; ++t) {
                double s = offset;
                for (int k = 0; k < 3; ++k) {
                    s += amp[k] * std::sin(2.0 * std::numbers::pi * freq[k] * static_cast<double>(t) + phase[k]);
                }
                z[t * E + e] = 0.5 + 0.5 * s / (1.0 + amp_sum);
            }
        }
        std::vector<double> zmean(E, 0.0);
        for (std::size_t t = 0; t < T; ++t) {
            for (std::size_t e = 0; e < E; ++e) {
                zmean[e] += z[t * E + e];
            }
        }
        SampleBundle s;
        for (std::size_t e = 0; e < E; ++e) {
            zmean[e] /= static_cast<double>(T);
            s.target[e] = std::clamp(to_f32(zmean[e]), 0.0, 1.0);
        }

        auto persistent = [&](std::size_t d) {
            std::vector<double> v(d);
            for (auto& x : v) {
                x = n01(rng);
            }
            return v;
        };

        std::vector<double> vis_data(T * p.dims.visual);
        auto vis_bias = persistent(p.dims.visual);
        for (std::size_t t = 0; t < T; ++t) {
            double* row = vis_data.data() + t * p.dims.visual;
            salient(Modality::Visual, z.data() + t * E, zs);
            vis.apply(zs, row);
            for (std::size_t d = 0; d < p.dims.visual; ++d) {
                row[d] += p.visual_noise * (vis_bias[d] + 0.5 * n01(rng));
            }
        }

        std::vector<double> aud_data(T * p.dims.audio);
        auto aud_bias = persistent(p.dims.audio);
        double fast_freq[kNuisance], fast_phase[kNuisance];
        for (std::size_t k = 0; k < kNuisance; ++k) {
            fast_freq[k] = 0.2 + 0.25 * unit(rng);
            fast_phase[k] = 2.0 * std::numbers::pi * unit(rng);
        }
        std::vector<double> fast(p.dims.audio);
        for (std::size_t t = 0; t < T; ++t) {
            double* row = aud_data.data() + t * p.dims.audio;
            salient(Modality::Audio, z.data() + t * E, zs);
            aud.apply(zs, row);
            double osc[kNuisance];
            for (std::size_t k = 0; k < kNuisance; ++k) {
                osc[k] = 0.5 * std::sin(2.0 * std::numbers::pi * fast_freq[k] * static_cast<double>(t) + fast_phase[k]);
            }
            aud_fast.apply(osc, fast.data());
            for (std::size_t d = 0; d < p.dims.audio; ++d) {
                row[d] += fast[d] + p.audio_noise * (aud_bias[d] + 0.5 * n01(rng));
            }
        }

        std::vector<double> txt_data(p.dims.text);
        salient(Modality::Text, zmean.data(), zs);
        txt.apply(zs, txt_data.data());
        for (std::size_t d = 0; d < p.dims.text; ++d) {
            txt_data[d] += p.text_noise * n01(rng);
        }

        char id[32];
        std::snprintf(id, sizeof id, "sample-%05zu", i);
        s.id = id;
        s.visual = {Modality::Visual, Tensor({T, p.dims.visual}, std::move(vis_data)), p.frame_rate_hz};
        s.audio = {Modality::Audio, Tensor({T, p.dims.audio}, std::move(aud_data)), p.frame_rate_hz};
        s.text = {Modality::Text, Tensor({1, p.dims.text}, std::move(txt_data)),
                  p.frame_rate_hz / static_cast<double>(T)};
        quantize(s.visual.frames);
        quantize(s.audio.frames);
        quantize(s.text.frames);
        corpus.push_back(std::move(s));
    }
    return corpus;
}

std::vector<SampleBundle> generate_corpus(std::uint64_t seed, std::size_t n_samples, std::size_t frames,
                                          CorpusDims dims)
{
    CorpusParams p;
    p.n_samples = n_samples;
    p.frames = frames;
    p.dims = dims;
    return generate_corpus(seed, p);
}

SampleBundle corrupt(const SampleBundle& sample, const CorruptionSpec& spec, std::uint64_t seed)
{
    const FeatureSequence& src = sample.stream(spec.modality);
    const std::size_t T = src.length();
    const std::size_t D = src.width();
    spec.validate(T);

    SampleBundle out = sample;
    FeatureSequence& seq = out.stream(spec.modality);
    seq.frames = src.frames.clone();
    out.corruption.push_back(spec);
    if (spec.strength == 0.0) {
        return out;
    }
    const std::size_t start = spec.frame_span ? spec.frame_span->first : 0;
    const std::size_t end = spec.frame_span ? spec.frame_span->second : T;
    auto data = seq.frames.mutable_data();
    std::mt19937_64 rng(seed);

    switch (spec.kind) {
    case CorruptionKind::GaussianNoise: {
        // Per-feature temporal std; a single-frame stream falls back to the spread across features.
        std::vector<double> stddev(D, 0.0);
        if (T >= 2) {
            for (std::size_t d = 0; d < D; ++d) {
                double m = 0.0, m2 = 0.0;
                for (std::size_t t = 0; t < T; ++t) {
                    m += data[t * D + d];
                }
                m /= static_cast<double>(T);
                for (std::size_t t = 0; t < T; ++t) {
                    double c = data[t * D + d] - m;
                    m2 += c * c;
                }
                stddev[d] = std::sqrt(m2 / static_cast<double>(T));
            }
        } else {
            double m = 0.0, m2 = 0.0;
            for (std::size_t d = 0; d < D; ++d) {
                m += data[d];
            }
            m /= static_cast<double>(D);
            for (std::size_t d = 0; d < D; ++d) {
                m2 += (data[d] - m) * (data[d] - m);
            }
            std::fill(stddev.begin(), stddev.end(), std::sqrt(m2 / static_cast<double>(D)));
        }
        std::normal_distribution<double> n01(0.0, 1.0);
        for (std::size_t t = start; t < end; ++t) {
            for (std::size_t d = 0; d < D; ++d) {
                data[t * D + d] += spec.strength * stddev[d] * n01(rng);
            }
        }
        break;
    }
    case CorruptionKind::OcclusionMask:
        for (std::size_t t = start; t < end; ++t) {
            for (std::size_t d = 0; d < D; ++d) {
                data[t * D + d] *= 1.0 - spec.strength;
            }
        }
        break;
    case CorruptionKind::DropoutFrames: {
        std::bernoulli_distribution drop(spec.strength);
        for (std::size_t t = start; t < end; ++t) {
            if (drop(rng)) {
                std::fill_n(data.begin() + static_cast<std::ptrdiff_t>(t * D), D, 0.0);
            }
        }
        break;
    }
    }
    quantize(seq.frames);
    return out;
}

Tensor resample_to_frames(const Tensor& windows, std::size_t frames)
{
    const std::size_t W = windows.rows();
    const std::size_t D = windows.cols();
    if (frames == 0 || W < frames) {
        throw ParameterError("resample_to_frames: need at least one window per frame");
    }
    std::vector<double> out(frames * D, 0.0);
    std::vector<std::size_t> count(frames, 0);
    for (std::size_t i = 0; i < W; ++i) {
        std::size_t f = i * frames / W;
        ++count[f];
        for (std::size_t d = 0; d < D; ++d) {
            out[f * D + d] += windows.values()[i * D + d];
        }
    }
    for (std::size_t f = 0; f < frames; ++f) {
        for (std::size_t d = 0; d < D; ++d) {
            out[f * D + d] /= static_cast<double>(count[f]);
        }
    }
    return Tensor({frames, D}, std::move(out));
}

// Annotations --------------------------------------------------------------

namespace {

constexpr std::array<std::string_view, 8> kExpressionNames{"Neutral", "Happy", "Sad",     "Surprise",
                                                           "Fear",    "Disgust", "Anger", "Contempt"};
constexpr std::array<std::string_view, 3> kIntensityNames{"Low", "Medium", "High"};

struct AuEntry {
    int id;
    std::string_view name;
};

constexpr std::array<AuEntry, 17> kAuTable{{
    {1, "Inner Brow Raiser"},
    {2, "Outer Brow Raiser"},
    {4, "Brow Lowerer"},
    {5, "Upper Lid Raiser"},
    {6, "Cheek Raiser"},
    {7, "Lid Tightener"},
    {9, "Nose Wrinkler"},
    {10, "Upper Lip Raiser"},
    {12, "Lip Corner Puller"},
    {14, "Dimpler"},
    {15, "Lip Corner Depressor"},
    {17, "Chin Raiser"},
    {20, "Lip Stretcher"},
    {23, "Lip Tightener"},
    {25, "Lips Part"},
    {26, "Jaw Drop"},
    {45, "Blink"},
}};

std::string two_decimals(double v)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}

} // namespace

std::string_view expression_name(ExpressionClass c) { return kExpressionNames[static_cast<std::size_t>(c)]; }

std::string_view intensity_name(IntensityLevel l) { return kIntensityNames[static_cast<std::size_t>(l)]; }

ExpressionClass parse_expression(std::string_view name)
{
    for (std::size_t i = 0; i < kExpressionNames.size(); ++i) {
        if (kExpressionNames[i] == name) {
            return static_cast<ExpressionClass>(i);
        }
    }
    throw FormatError(FormatError::Code::Malformed, "unknown expression class '" + std::string(name) + "'");
}

IntensityLevel parse_intensity(std::string_view name)
{
    for (std::size_t i = 0; i < kIntensityNames.size(); ++i) {
        if (kIntensityNames[i] == name) {
            return static_cast<IntensityLevel>(i);
        }
    }
    throw FormatError(FormatError::Code::Malformed, "unknown intensity level '" + std::string(name) + "'");
}

std::string au_name(int id)
{
    for (const auto& e : kAuTable) {
        if (e.id == id) {
            return std::string(e.name);
        }
    }
    return "Unknown";
}

ActionUnit make_au(int id) { return ActionUnit{id, au_name(id)}; }

void AnnotationRecord::validate() const
{
    if (aus.empty()) {
        throw ParameterError("annotation needs at least one action unit");
    }
    if (!(valence >= -1.0 && valence <= 1.0) || !(arousal >= -1.0 && arousal <= 1.0)) {
        throw ParameterError("valence and arousal must lie in [-1,1]");
    }
    if (!(va_stddev >= 0.0)) {
        throw ParameterError("va_stddev must be non-negative");
    }
}

std::string render_prompt(const AnnotationRecord& rec)
{
    rec.validate();
    std::string out(expression_name(rec.expression));
    out += " (Intensity: ";
    out += intensity_name(rec.intensity);
    out += ") with ";
    for (std::size_t i = 0; i < rec.aus.size(); ++i) {
        if (i) {
            out += " and ";
        }
        out += "AU" + std::to_string(rec.aus[i].id) + " (" + rec.aus[i].name + ")";
    }
    out += ", Valence=" + two_decimals(rec.valence) + ", Arousal=" + two_decimals(rec.arousal);
    return out;
}

std::vector<Annotation> synthesize_annotations(const std::vector<SampleBundle>& corpus, std::uint64_t seed)
{
    std::mt19937_64 rng(seed ^ 0x5eedA11Full);
    std::normal_distribution<double> n01(0.0, 1.0);
    std::uniform_real_distribution<double> spread(0.05, 0.5);
    auto matrix = [&](std::size_t rows) {
        std::vector<double> m(rows * kNumEmotions);
        for (auto& v : m) {
            v = n01(rng);
        }
        return m;
    };
    const auto class_map = matrix(kExpressionNames.size());
    const auto au_map = matrix(kAuTable.size());
    const auto va_map = matrix(2);

    auto project = [](const std::vector<double>& m, std::size_t row, const std::array<double, kNumEmotions>& x) {
        double s = 0.0;
        for (std::size_t e = 0; e < kNumEmotions; ++e) {
            s += m[row * kNumEmotions + e] * x[e];
        }
        return s;
    };

    std::vector<Annotation> out;
    out.reserve(corpus.size());
    for (const auto& s : corpus) {
        std::array<double, kNumEmotions> c{};
        double peak = 0.0;
        for (std::size_t e = 0; e < kNumEmotions; ++e) {
            c[e] = s.target[e] - 0.5;
            peak = std::max(peak, s.target[e]);
        }
        AnnotationRecord rec;
        std::size_t best = 0;
        for (std::size_t k = 1; k < kExpressionNames.size(); ++k) {
            if (project(class_map, k, c) > project(class_map, best, c)) {
                best = k;
            }
        }
        rec.expression = static_cast<ExpressionClass>(best);
        rec.intensity = peak < 0.6 ? IntensityLevel::Low : peak < 0.75 ? IntensityLevel::Medium : IntensityLevel::High;

        std::vector<std::pair<double, int>> act;
        for (std::size_t k = 0; k < kAuTable.size(); ++k) {
            act.emplace_back(project(au_map, k, c), kAuTable[k].id);
        }
        std::sort(act.begin(), act.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
        for (std::size_t k = 0; k < act.size() && rec.aus.size() < 4; ++k) {
            if (k == 0 || act[k].first > 0.3) {
                rec.aus.push_back(make_au(act[k].second));
            }
        }
        rec.valence = std::tanh(2.0 * project(va_map, 0, c));
        rec.arousal = std::tanh(2.0 * project(va_map, 1, c));
        rec.va_stddev = spread(rng);
        out.push_back({s.id, std::move(rec)});
    }
    return out;
}

std::string annotation_to_json(const Annotation& a)
{
    nlohmann::json j;
    j["id"] = a.id;
    j["class"] = std::string(expression_name(a.record.expression));
    j["intensity"] = std::string(intensity_name(a.record.intensity));
    std::vector<int> aus;
    for (const auto& au : a.record.aus) {
        aus.push_back(au.id);
    }
    j["aus"] = aus;
    j["valence"] = a.record.valence;
    j["arousal"] = a.record.arousal;
    j["va_std"] = a.record.va_stddev;
    return j.dump();
}

Annotation annotation_from_json(std::string_view line)
{
    try {
        auto j = nlohmann::json::parse(line);
        Annotation a;
        a.id = j.at("id").get<std::string>();
        a.record.expression = parse_expression(j.at("class").get<std::string>());
        a.record.intensity = parse_intensity(j.at("intensity").get<std::string>());
        for (int id : j.at("aus").get<std::vector<int>>()) {
            a.record.aus.push_back(make_au(id));
        }
        a.record.valence = j.at("valence").get<double>();
        a.record.arousal = j.at("arousal").get<double>();
        a.record.va_stddev = j.at("va_std").get<double>();
        a.record.validate();
        return a;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(FormatError::Code::Malformed, std::string("annotation line: ") + e.what());
    } catch (const ParameterError& e) {
        throw FormatError(FormatError::Code::Malformed, std::string("annotation line: ") + e.what());
    }
}

void write_annotations(const std::filesystem::path& path, const std::vector<Annotation>& annotations)
{
    std::ofstream out(path);
    if (!out) {
        throw FormatError(FormatError::Code::Io, "cannot open " + path.string() + " for writing");
    }
    for (const auto& a : annotations) {
        out << annotation_to_json(a) << '\n';
    }
}

std::vector<Annotation> read_annotations(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) {
        throw FormatError(FormatError::Code::Io, "cannot open " + path.string());
    }
    std::vector<Annotation> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.find_first_not_of(" \t\r") == std::string::npos) {
            continue;
        }
        out.push_back(annotation_from_json(line));
    }
    return out;
}

// EMIF ---------------------------------------------------------------------

namespace {

constexpr char kEmifMagic[4] = {'E', 'M', 'I', 'F'};

class ByteWriter {
public:
    void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
    void u32(std::uint32_t v)
    {
        for (int i = 0; i < 4; ++i) {
            buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
        }
    }
    void u64(std::uint64_t v)
    {
        for (int i = 0; i < 8; ++i) {
            buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
        }
    }
    void f32(double v) { u32(std::bit_cast<std::uint32_t>(static_cast<float>(v))); }
    void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
    void bytes(std::string_view s) { buf_.append(s); }
    const std::string& str() const { return buf_; }

private:
    std::string buf_;
};

class ByteReader {
public:
    explicit ByteReader(std::string buf) : buf_(std::move(buf)) {}

    std::size_t remaining() const { return buf_.size() - pos_; }
    void need(std::size_t n, const char* what) const
    {
        if (remaining() < n) {
            throw FormatError(FormatError::Code::TruncatedPayload,
                              std::string("truncated payload while reading ") + what);
        }
    }
    std::uint8_t u8(const char* what)
    {
        need(1, what);
        return static_cast<std::uint8_t>(buf_[pos_++]);
    }
    std::uint32_t u32(const char* what)
    {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) {
            v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf_[pos_++])) << (8 * i);
        }
        return v;
    }
    std::uint64_t u64(const char* what)
    {
        need(8, what);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) {
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf_[pos_++])) << (8 * i);
        }
        return v;
    }
    double f32(const char* what) { return static_cast<double>(std::bit_cast<float>(u32(what))); }
    double f64(const char* what) { return std::bit_cast<double>(u64(what)); }
    std::string bytes(std::size_t n, const char* what)
    {
        need(n, what);
        std::string s = buf_.substr(pos_, n);
        pos_ += n;
        return s;
    }

private:
    std::string buf_;
    std::size_t pos_ = 0;
};

void write_corruption(ByteWriter& w, const CorruptionSpec& c)
{
    w.u8(static_cast<std::uint8_t>(c.modality));
    w.u8(static_cast<std::uint8_t>(c.kind));
    w.f64(c.strength);
    w.u8(c.frame_span ? 1 : 0);
    w.u32(c.frame_span ? static_cast<std::uint32_t>(c.frame_span->first) : 0);
    w.u32(c.frame_span ? static_cast<std::uint32_t>(c.frame_span->second) : 0);
}

CorruptionSpec read_corruption(ByteReader& r)
{
    CorruptionSpec c;
    auto modality = r.u8("corruption modality");
    auto kind = r.u8("corruption kind");
    if (modality > 2 || kind > 2) {
        throw FormatError(FormatError::Code::Malformed, "invalid corruption descriptor");
    }
    c.modality = static_cast<Modality>(modality);
    c.kind = static_cast<CorruptionKind>(kind);
    c.strength = r.f64("corruption strength");
    bool has_span = r.u8("corruption span flag") != 0;
    std::size_t start = r.u32("corruption span");
    std::size_t end = r.u32("corruption span");
    if (has_span) {
        c.frame_span = std::make_pair(start, end);
    }
    return c;
}

} // namespace

void write_features(const std::filesystem::path& path, const std::vector<SampleBundle>& samples)
{
    ByteWriter w;
    w.bytes(std::string_view(kEmifMagic, 4));
    w.u32(kEmifVersion);
    w.u32(static_cast<std::uint32_t>(samples.size()));
    for (const auto& s : samples) {
        const std::size_t T = s.visual.length();
        if (s.audio.length() != T || s.text.length() != 1) {
            throw DimensionError("write_features: sample " + s.id + " is not aligned");
        }
        w.u32(static_cast<std::uint32_t>(s.id.size()));
        w.bytes(s.id);
        w.u32(static_cast<std::uint32_t>(T));
        w.u32(static_cast<std::uint32_t>(s.visual.width()));
        w.u32(static_cast<std::uint32_t>(s.audio.width()));
        w.u32(static_cast<std::uint32_t>(s.text.width()));
        for (double v : s.target) {
            w.f32(v);
        }
        w.f64(s.visual.frame_rate_hz);
        w.f64(s.audio.frame_rate_hz);
        w.f64(s.text.frame_rate_hz);
        w.u32(static_cast<std::uint32_t>(s.corruption.size()));
        for (const auto& c : s.corruption) {
            write_corruption(w, c);
        }
        for (const FeatureSequence* seq : {&s.visual, &s.audio, &s.text}) {
            for (double v : seq->frames.values()) {
                w.f32(v);
            }
        }
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw FormatError(FormatError::Code::Io, "cannot open " + path.string() + " for writing");
    }
    out.write(w.str().data(), static_cast<std::streamsize>(w.str().size()));
    if (!out) {
        throw FormatError(FormatError::Code::Io, "write failed for " + path.string());
    }
}

std::vector<SampleBundle> read_features(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw FormatError(FormatError::Code::Io, "cannot open " + path.string());
    }
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    ByteReader r(std::move(buf));
    if (r.remaining() < 4 || r.bytes(4, "magic") != std::string_view(kEmifMagic, 4)) {
        throw FormatError(FormatError::Code::BadMagic, "bad magic: " + path.string() + " is not an EMIF file");
    }
    std::uint32_t version = r.u32("version");
    if (version != kEmifVersion) {
        throw FormatError(FormatError::Code::VersionMismatch,
                          "version mismatch: file has " + std::to_string(version) + ", expected " +
                              std::to_string(kEmifVersion));
    }
    std::uint32_t count = r.u32("sample count");
    std::vector<SampleBundle> out;
    for (std::uint32_t i = 0; i < count; ++i) {
        SampleBundle s;
        s.id = r.bytes(r.u32("id length"), "id");
        std::size_t T = r.u32("frame count");
        std::size_t dv = r.u32("visual width");
        std::size_t da = r.u32("audio width");
        std::size_t ds = r.u32("text width");
        for (double& v : s.target) {
            v = r.f32("target");
        }
        double rates[3];
        for (double& rate : rates) {
            rate = r.f64("frame rate");
        }
        std::uint32_t n_corr = r.u32("corruption count");
        for (std::uint32_t k = 0; k < n_corr; ++k) {
            s.corruption.push_back(read_corruption(r));
        }
        std::size_t payload = (T * dv + T * da + ds) * 4;
        if (r.remaining() < payload) {
            throw FormatError(FormatError::Code::TruncatedPayload,
                              "truncated payload: sample " + s.id + " declares " + std::to_string(payload) +
                                  " bytes, " + std::to_string(r.remaining()) + " remain");
        }
        auto read_seq = [&](Modality m, std::size_t rows, std::size_t cols, double rate) {
            std::vector<double> v(rows * cols);
            for (double& x : v) {
                x = r.f32("payload");
            }
            return FeatureSequence{m, Tensor({rows, cols}, std::move(v)), rate};
        };
        s.visual = read_seq(Modality::Visual, T, dv, rates[0]);
        s.audio = read_seq(Modality::Audio, T, da, rates[1]);
        s.text = read_seq(Modality::Text, 1, ds, rates[2]);
        out.push_back(std::move(s));
    }
    return out;
}

} // namespace emi
