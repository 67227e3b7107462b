#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "emi/tensor.hpp"

namespace emi {

inline constexpr std::size_t kNumEmotions = 6;
using Intensity = std::array<double, kNumEmotions>;

enum class Modality : std::uint8_t { Visual = 0, Audio = 1, Text = 2 };

std::string_view modality_name(Modality m);

/// Per-frame features of one modality of one sample, [T x D].
struct FeatureSequence {
    Modality modality = Modality::Visual;
    Tensor frames;
    double frame_rate_hz = 5.0;

    std::size_t length() const { return frames.rows(); }
    std::size_t width() const { return frames.cols(); }
};

enum class CorruptionKind : std::uint8_t { GaussianNoise = 0, OcclusionMask = 1, DropoutFrames = 2 };

struct CorruptionSpec {
    Modality modality = Modality::Visual;
    CorruptionKind kind = CorruptionKind::GaussianNoise;
    double strength = 0.0;
    /// Half-open [start, end) frame range; the whole sequence when absent.
    std::optional<std::pair<std::size_t, std::size_t>> frame_span;

    /// Throws ParameterError when strength is outside [0,1] or the span leaves [0,T).
    void validate(std::size_t frames) const;
};

/// One aligned trimodal sample with its six-dimensional intensity target.
struct SampleBundle {
    std::string id;
    FeatureSequence visual;
    FeatureSequence audio;
    FeatureSequence text;
    Intensity target{};
    /// Corruptions applied so far, in order.
    std::vector<CorruptionSpec> corruption;

    const FeatureSequence& stream(Modality m) const;
    FeatureSequence& stream(Modality m);
    std::size_t frames() const { return visual.length(); }
};

bool bit_equal(const SampleBundle& a, const SampleBundle& b);

struct CorpusDims {
    std::size_t visual = 32;
    std::size_t audio = 48;
    std::size_t text = 16;
};

struct CorpusParams {
    std::size_t n_samples = 64;
    std::size_t frames = 50;
    CorpusDims dims;
    double frame_rate_hz = 5.0;
    // Scale of the per-sample (persistent) and per-frame feature noise.
    double visual_noise = 0.4;
    double audio_noise = 0.3;
    double text_noise = 0.5;
    /// Modality m carries emotions 2m, 2m+1, 2m+2 (mod 6) at full strength and
    /// the rest scaled by this floor around 0.5. 1 gives every modality every emotion.
    double salience_floor = 1.0;
};

/// Strength of emotion e in modality m under the given floor.
double emotion_salience(Modality m, std::size_t emotion, double floor);

/// Builds a corpus from latent smooth intensity trajectories. Every feature value
/// is single-precision representable so the EMIF round trip is exact.
std::vector<SampleBundle> generate_corpus(std::uint64_t seed, const CorpusParams& params);
std::vector<SampleBundle> generate_corpus(std::uint64_t seed, std::size_t n_samples, std::size_t frames,
                                          CorpusDims dims);

/// Returns a degraded copy of one modality; the target is untouched.
SampleBundle corrupt(const SampleBundle& sample, const CorruptionSpec& spec, std::uint64_t seed);

/// Averages audio windows into video-frame intervals: window i of W lands in
/// frame floor(i * F / W). Every frame must receive at least one window.
Tensor resample_to_frames(const Tensor& windows, std::size_t frames);

// Annotation records and prompts -------------------------------------------

enum class ExpressionClass : std::uint8_t { Neutral, Happy, Sad, Surprise, Fear, Disgust, Anger, Contempt };
enum class IntensityLevel : std::uint8_t { Low, Medium, High };

std::string_view expression_name(ExpressionClass c);
std::string_view intensity_name(IntensityLevel l);
ExpressionClass parse_expression(std::string_view name);
IntensityLevel parse_intensity(std::string_view name);

struct ActionUnit {
    int id = 0;
    std::string name;
};

/// FACS name for the 17 commonly coded AUs, "Unknown" otherwise.
std::string au_name(int id);
ActionUnit make_au(int id);

struct AnnotationRecord {
    ExpressionClass expression = ExpressionClass::Neutral;
    IntensityLevel intensity = IntensityLevel::Low;
    std::vector<ActionUnit> aus;
    double valence = 0.0;
    double arousal = 0.0;
    double va_stddev = 0.0;

    void validate() const;
};

/// "{Class} (Intensity: {Level}) with {AU} and {AU}, Valence=v, Arousal=a"
std::string render_prompt(const AnnotationRecord& rec);

struct Annotation {
    std::string id;
    AnnotationRecord record;
};

/// Derives a plausible annotation per sample from its target through fixed
/// random maps; va_stddev is drawn independently.
std::vector<Annotation> synthesize_annotations(const std::vector<SampleBundle>& corpus, std::uint64_t seed);

std::string annotation_to_json(const Annotation& a);
Annotation annotation_from_json(std::string_view line);
void write_annotations(const std::filesystem::path& path, const std::vector<Annotation>& annotations);
std::vector<Annotation> read_annotations(const std::filesystem::path& path);

// EMIF feature files --------------------------------------------------------

class FormatError : public Error {
public:
    enum class Code { Io, BadMagic, VersionMismatch, TruncatedPayload, Malformed };

    FormatError(Code code, const std::string& what) : Error(what), code_(code) {}
    Code code() const { return code_; }

private:
    Code code_;
};

inline constexpr std::uint32_t kEmifVersion = 1;

void write_features(const std::filesystem::path& path, const std::vector<SampleBundle>& samples);
std::vector<SampleBundle> read_features(const std::filesystem::path& path);

} // namespace emi
