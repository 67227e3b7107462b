#include "emi/config.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>

namespace emi {

std::string fusion_mode_name(FusionMode m) { return m == FusionMode::Sum ? "sum" : "concat"; }

FusionMode parse_fusion_mode(const std::string& s)
{
    if (s == "sum") {
        return FusionMode::Sum;
    }
    if (s == "concat") {
        return FusionMode::Concat;
    }
    throw ParameterError("fusion mode must be 'sum' or 'concat', got '" + s + "'");
}

bool ModalitySet::has(Modality m) const
{
    switch (m) {
    case Modality::Visual:
        return visual;
    case Modality::Audio:
        return audio;
    case Modality::Text:
        return text;
    }
    return false;
}

std::string ModalitySet::label() const
{
    std::string out;
    auto put = [&](bool on, const char* s) {
        if (on) {
            out += out.empty() ? s : std::string("+") + s;
        }
    };
    put(visual, "V");
    put(audio, "A");
    put(text, "T");
    return out;
}

ModalitySet ModalitySet::parse(const std::string& s)
{
    ModalitySet m{false, false, false};
    for (char c : s) {
        switch (c) {
        case 'V':
        case 'v':
            m.visual = true;
            break;
        case 'A':
        case 'a':
            m.audio = true;
            break;
        case 'T':
        case 't':
            m.text = true;
            break;
        case '+':
        case ' ':
            break;
        default:
            throw ParameterError("unknown modality letter '" + std::string(1, c) + "' in '" + s + "'");
        }
    }
    if (m.count() == 0) {
        throw ParameterError("modality subset '" + s + "' selects nothing");
    }
    return m;
}

namespace {

std::string fmt_double(double v)
{
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

double to_double(const std::string& s)
{
    std::size_t pos = 0;
    double v = std::stod(s, &pos);
    if (pos != s.size()) {
        throw std::invalid_argument(s);
    }
    return v;
}

std::uint64_t to_u64(const std::string& s)
{
    std::uint64_t v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || p != s.data() + s.size()) {
        throw std::invalid_argument(s);
    }
    return v;
}

bool to_bool(const std::string& s)
{
    if (s == "true" || s == "1" || s == "on") {
        return true;
    }
    if (s == "false" || s == "0" || s == "off") {
        return false;
    }
    throw std::invalid_argument(s);
}

struct Key {
    std::string name;
    std::function<std::string(const Config&)> get;
    std::function<void(Config&, const std::string&)> set;
};

template <class T>
Key size_key(std::string name, T Config::*section, std::size_t T::*field)
{
    return {std::move(name), [=](const Config& c) { return std::to_string(c.*section.*field); },
            [=](Config& c, const std::string& v) { c.*section.*field = static_cast<std::size_t>(to_u64(v)); }};
}

template <class T>
Key real_key(std::string name, T Config::*section, double T::*field)
{
    return {std::move(name), [=](const Config& c) { return fmt_double(c.*section.*field); },
            [=](Config& c, const std::string& v) { c.*section.*field = to_double(v); }};
}

template <class T>
Key bool_key(std::string name, T Config::*section, bool T::*field)
{
    return {std::move(name), [=](const Config& c) { return std::string(c.*section.*field ? "true" : "false"); },
            [=](Config& c, const std::string& v) { c.*section.*field = to_bool(v); }};
}

const std::vector<Key>& keys()
{
    static const std::vector<Key> table = [] {
        std::vector<Key> k;
        k.push_back({"seed", [](const Config& c) { return std::to_string(c.seed); },
                     [](Config& c, const std::string& v) { c.seed = to_u64(v); }});

        k.push_back(size_key("corpus.samples", &Config::corpus, &CorpusParams::n_samples));
        k.push_back(size_key("corpus.frames", &Config::corpus, &CorpusParams::frames));
        k.push_back({"corpus.dim_visual", [](const Config& c) { return std::to_string(c.corpus.dims.visual); },
                     [](Config& c, const std::string& v) { c.corpus.dims.visual = to_u64(v); }});
        k.push_back({"corpus.dim_audio", [](const Config& c) { return std::to_string(c.corpus.dims.audio); },
                     [](Config& c, const std::string& v) { c.corpus.dims.audio = to_u64(v); }});
        k.push_back({"corpus.dim_text", [](const Config& c) { return std::to_string(c.corpus.dims.text); },
                     [](Config& c, const std::string& v) { c.corpus.dims.text = to_u64(v); }});
        k.push_back(real_key("corpus.frame_rate_hz", &Config::corpus, &CorpusParams::frame_rate_hz));
        k.push_back(real_key("corpus.visual_noise", &Config::corpus, &CorpusParams::visual_noise));
        k.push_back(real_key("corpus.audio_noise", &Config::corpus, &CorpusParams::audio_noise));
        k.push_back(real_key("corpus.text_noise", &Config::corpus, &CorpusParams::text_noise));
        k.push_back(real_key("corpus.salience_floor", &Config::corpus, &CorpusParams::salience_floor));

        k.push_back(size_key("encoder.embed_dim", &Config::encoder, &EncoderConfig::embed_dim));
        k.push_back(size_key("encoder.hidden", &Config::encoder, &EncoderConfig::hidden));
        k.push_back(size_key("encoder.vocab", &Config::encoder, &EncoderConfig::vocab));

        k.push_back(size_key("align.epochs", &Config::align, &AlignConfig::epochs));
        k.push_back(size_key("align.batch_size", &Config::align, &AlignConfig::batch_size));
        k.push_back(real_key("align.tau", &Config::align, &AlignConfig::tau));
        k.push_back(real_key("align.eta_max", &Config::align, &AlignConfig::eta_max));
        k.push_back(real_key("align.eta_min", &Config::align, &AlignConfig::eta_min));
        k.push_back(size_key("align.cycle", &Config::align, &AlignConfig::cycle));
        k.push_back(real_key("align.momentum", &Config::align, &AlignConfig::momentum));
        k.push_back(bool_key("align.symmetric", &Config::align, &AlignConfig::symmetric));

        k.push_back(size_key("fusion.tcn_layers", &Config::fusion, &FusionConfig::tcn_layers));
        k.push_back(size_key("fusion.tcn_kernel", &Config::fusion, &FusionConfig::tcn_kernel));
        k.push_back(size_key("fusion.tcn_channels", &Config::fusion, &FusionConfig::tcn_channels));
        k.push_back(size_key("fusion.lstm_hidden", &Config::fusion, &FusionConfig::lstm_hidden));
        k.push_back(size_key("fusion.segments", &Config::fusion, &FusionConfig::segments));
        k.push_back(size_key("fusion.d_shared", &Config::fusion, &FusionConfig::d_shared));
        k.push_back(size_key("fusion.map_hidden", &Config::fusion, &FusionConfig::map_hidden));
        k.push_back(size_key("fusion.quality_hidden", &Config::fusion, &FusionConfig::quality_hidden));
        k.push_back(size_key("fusion.layers", &Config::fusion, &FusionConfig::layers));
        k.push_back(size_key("fusion.heads", &Config::fusion, &FusionConfig::heads));
        k.push_back(size_key("fusion.ff_hidden", &Config::fusion, &FusionConfig::ff_hidden));
        k.push_back({"fusion.mode", [](const Config& c) { return fusion_mode_name(c.fusion.mode); },
                     [](Config& c, const std::string& v) { c.fusion.mode = parse_fusion_mode(v); }});
        k.push_back(bool_key("fusion.tfe", &Config::fusion, &FusionConfig::tfe));
        k.push_back(bool_key("fusion.qam", &Config::fusion, &FusionConfig::qam));
        k.push_back({"fusion.modalities", [](const Config& c) { return c.fusion.modalities.label(); },
                     [](Config& c, const std::string& v) { c.fusion.modalities = ModalitySet::parse(v); }});

        k.push_back(size_key("train.epochs", &Config::train, &TrainConfig::epochs));
        k.push_back(size_key("train.batch_size", &Config::train, &TrainConfig::batch_size));
        k.push_back(real_key("train.eta_max", &Config::train, &TrainConfig::eta_max));
        k.push_back(real_key("train.eta_min", &Config::train, &TrainConfig::eta_min));
        k.push_back(size_key("train.cycle", &Config::train, &TrainConfig::cycle));
        k.push_back(real_key("train.momentum", &Config::train, &TrainConfig::momentum));
        k.push_back(real_key("train.ema_gamma", &Config::train, &TrainConfig::ema_gamma));
        k.push_back(real_key("train.clip_norm", &Config::train, &TrainConfig::clip_norm));
        k.push_back(real_key("train.val_fraction", &Config::train, &TrainConfig::val_fraction));
        return k;
    }();
    return table;
}

std::string trim(const std::string& s)
{
    auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) {
        return {};
    }
    auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

} // namespace

void Config::validate() const
{
    auto need = [](bool ok, const char* what) {
        if (!ok) {
            throw ParameterError(std::string("config: ") + what);
        }
    };
    need(corpus.frames >= 1, "corpus.frames must be at least 1");
    need(corpus.salience_floor >= 0.0 && corpus.salience_floor <= 1.0, "corpus.salience_floor must be in [0,1]");
    need(corpus.dims.visual > 0 && corpus.dims.audio > 0 && corpus.dims.text > 0, "corpus dims must be positive");
    need(encoder.embed_dim > 0 && encoder.hidden > 0 && encoder.vocab > 0, "encoder sizes must be positive");
    need(align.tau > 0.0, "align.tau must be positive");
    need(align.batch_size > 0 && train.batch_size > 0, "batch sizes must be positive");
    need(align.cycle > 0 && train.cycle > 0, "schedule cycles must be positive");
    need(align.eta_min > 0.0 && align.eta_max >= align.eta_min, "align needs 0 < eta_min <= eta_max");
    need(train.eta_min > 0.0 && train.eta_max >= train.eta_min, "train needs 0 < eta_min <= eta_max");
    need(align.momentum >= 0.0 && align.momentum < 1.0, "align.momentum must be in [0,1)");
    need(train.momentum >= 0.0 && train.momentum < 1.0, "train.momentum must be in [0,1)");
    need(train.ema_gamma >= 0.0 && train.ema_gamma < 1.0, "train.ema_gamma must be in [0,1)");
    need(train.val_fraction >= 0.0 && train.val_fraction < 1.0, "train.val_fraction must be in [0,1)");
    need(fusion.tcn_layers >= 1 && fusion.tcn_kernel >= 1 && fusion.tcn_channels >= 1, "tcn sizes must be positive");
    need(fusion.segments >= 1, "fusion.segments must be at least 1");
    need(fusion.segments <= corpus.frames, "fusion.segments exceeds corpus.frames");
    need(fusion.heads >= 1 && fusion.d_shared % fusion.heads == 0, "fusion.heads must divide the model width");
    need(fusion.mode == FusionMode::Sum || (fusion.d_shared * fusion.modalities.count()) % fusion.heads == 0,
         "fusion.heads must divide the concatenated width");
    need(fusion.modalities.count() > 0, "at least one modality");
}

Config parse_config(const std::string& text, Config cfg)
{
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        auto hash = line.find('#');
        if (hash != std::string::npos) {
            line.erase(hash);
        }
        line = trim(line);
        if (line.empty()) {
            continue;
        }
        auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ParameterError("config line " + std::to_string(lineno) + ": expected key = value");
        }
        std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        const auto& table = keys();
        auto it = std::find_if(table.begin(), table.end(), [&](const Key& k) { return k.name == key; });
        if (it == table.end()) {
            throw ParameterError("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
        }
        try {
            it->set(cfg, value);
        } catch (const ParameterError& e) {
            throw ParameterError("config line " + std::to_string(lineno) + ": " + e.what());
        } catch (const std::exception&) {
            throw ParameterError("config line " + std::to_string(lineno) + ": bad value '" + value + "' for " + key);
        }
    }
    cfg.validate();
    return cfg;
}

Config load_config(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) {
        throw FormatError(FormatError::Code::Io, "cannot open config " + path.string());
    }
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str());
}

std::string serialize_config(const Config& cfg)
{
    std::string out;
    for (const auto& k : keys()) {
        out += k.name + " = " + k.get(cfg) + "\n";
    }
    return out;
}

std::vector<std::string> config_keys()
{
    std::vector<std::string> out;
    for (const auto& k : keys()) {
        out.push_back(k.name);
    }
    return out;
}

} // namespace emi
