#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "emi/corpus.hpp"

namespace emi {

struct EncoderConfig {
    std::size_t embed_dim = 32;
    std::size_t hidden = 64;
    std::size_t vocab = 512;
};

struct AlignConfig {
    std::size_t epochs = 30;
    std::size_t batch_size = 16;
    double tau = 0.07;
    double eta_max = 0.05;
    double eta_min = 1e-3;
    std::size_t cycle = 10;
    double momentum = 0.9;
    bool symmetric = false;
};

enum class FusionMode { Sum, Concat };

std::string fusion_mode_name(FusionMode m);
/// Throws ParameterError for anything other than "sum" or "concat".
FusionMode parse_fusion_mode(const std::string& s);

/// Which of visual, audio, text feed the fusion.
struct ModalitySet {
    bool visual = true;
    bool audio = true;
    bool text = true;

    bool has(Modality m) const;
    std::size_t count() const { return visual + audio + text; }
    /// "V+A+T" style label.
    std::string label() const;
    /// Parses "V", "A+T", "V+A+T", ... Empty or unknown letters throw ParameterError.
    static ModalitySet parse(const std::string& s);
};

struct FusionConfig {
    std::size_t tcn_layers = 4;
    std::size_t tcn_kernel = 3;
    std::size_t tcn_channels = 32;
    std::size_t lstm_hidden = 32;
    std::size_t segments = 5;
    std::size_t d_shared = 32;
    std::size_t map_hidden = 32;
    std::size_t quality_hidden = 16;
    std::size_t layers = 2;
    std::size_t heads = 4;
    std::size_t ff_hidden = 64;
    FusionMode mode = FusionMode::Sum;
    bool tfe = true;
    bool qam = true;
    ModalitySet modalities;
};

struct TrainConfig {
    std::size_t epochs = 200;
    std::size_t batch_size = 8;
    double eta_max = 0.5;
    double eta_min = 5e-3;
    std::size_t cycle = 10;
    double momentum = 0.9;
    double ema_gamma = 0.999;
    double clip_norm = 5.0;
    /// Fraction of the corpus held out for validation; 0 validates on the training set.
    double val_fraction = 0.25;
};

struct Config {
    std::uint64_t seed = 7;
    CorpusParams corpus;
    EncoderConfig encoder;
    AlignConfig align;
    FusionConfig fusion;
    TrainConfig train;

    /// Throws ParameterError on out-of-range values.
    void validate() const;
};

/// key = value lines; '#' starts a comment. Unknown keys and malformed values
/// throw ParameterError naming the line.
Config parse_config(const std::string& text, Config base = {});
Config load_config(const std::filesystem::path& path);
/// Round-trips through parse_config.
std::string serialize_config(const Config& cfg);
std::vector<std::string> config_keys();

} // namespace emi
