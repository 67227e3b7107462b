#include "emi/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <unordered_map>

namespace emi {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'E', 'M', 'I', 'C'};
const std::string kEncPrefix = "encoders.";
const std::string kModelPrefix = "model.";

class Writer {
public:
    template <typename T>
    void put(T v)
    {
        const auto* p = reinterpret_cast<const char*>(&v);
        buf.insert(buf.end(), p, p + sizeof(T));
    }
    void put_bytes(const std::string& s) { buf.insert(buf.end(), s.begin(), s.end()); }

    void put_table(const ParamList& params)
    {
        put<std::uint64_t>(params.size());
        for (const auto& [name, t] : params) {
            put<std::uint32_t>(static_cast<std::uint32_t>(name.size()));
            put_bytes(name);
            put<std::uint32_t>(static_cast<std::uint32_t>(t.rank()));
            for (auto d : t.shape()) {
                put<std::uint64_t>(d);
            }
            for (double v : t.data()) {
                put(v);
            }
        }
    }

    std::string buf;
};

class Reader {
public:
    Reader(const std::string& buf, std::size_t end) : buf_(buf), end_(end) {}

    template <typename T>
    T get()
    {
        need(sizeof(T));
        T v;
        std::memcpy(&v, buf_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }
    std::string get_bytes(std::size_t n)
    {
        need(n);
        std::string s = buf_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    ParamList get_table()
    {
        auto count = get<std::uint64_t>();
        ParamList out;
        for (std::uint64_t i = 0; i < count; ++i) {
            std::string name = get_bytes(get<std::uint32_t>());
            auto rank = get<std::uint32_t>();
            Shape shape;
            std::size_t n = 1;
            for (std::uint32_t k = 0; k < rank; ++k) {
                shape.push_back(get<std::uint64_t>());
                n *= shape.back();
            }
            need(n * sizeof(double));
            std::vector<double> data(n);
            std::memcpy(data.data(), buf_.data() + pos_, n * sizeof(double));
            pos_ += n * sizeof(double);
            out.emplace_back(std::move(name), Tensor(std::move(shape), std::move(data)));
        }
        return out;
    }

    bool done() const { return pos_ == end_; }

private:
    void need(std::size_t n) const
    {
        if (end_ - pos_ < n) {
            throw CheckpointError(CheckpointError::Code::Malformed, "checkpoint: record runs past the payload");
        }
    }

    const std::string& buf_;
    std::size_t end_;
    std::size_t pos_ = 0;
};

std::uint64_t checksum(const std::string& buf, std::size_t n)
{
    return token_hash(std::string_view(buf.data(), n));
}

ParamList prefixed(const ParamList& params, const std::string& prefix)
{
    ParamList out;
    for (const auto& [name, t] : params) {
        out.emplace_back(prefix + name, t.detach());
    }
    return out;
}

void load_into(const ParamList& source, const std::string& prefix, ParamList dst)
{
    std::unordered_map<std::string, const Tensor*> by_name;
    for (const auto& [name, t] : source) {
        by_name[name] = &t;
    }
    for (auto& [name, t] : dst) {
        auto it = by_name.find(prefix + name);
        if (it == by_name.end()) {
            throw CheckpointError(CheckpointError::Code::MissingTensor, "checkpoint: missing tensor " + prefix + name);
        }
        if (it->second->shape() != t.shape()) {
            throw CheckpointError(CheckpointError::Code::Malformed,
                                  "checkpoint: tensor " + prefix + name + " has shape " +
                                      shape_str(it->second->shape()) + ", expected " + shape_str(t.shape()));
        }
        auto from = it->second->data();
        std::copy(from.begin(), from.end(), t.mutable_data().begin());
    }
}

} // namespace

std::string_view stage_name(StageTag s) { return s == StageTag::Align ? "align" : "fusion"; }

const Tensor& Checkpoint::tensor(const std::string& name) const
{
    for (const auto& [n, t] : tensors) {
        if (n == name) {
            return t;
        }
    }
    throw CheckpointError(CheckpointError::Code::MissingTensor, "checkpoint: missing tensor " + name);
}

Config Checkpoint::parsed_config() const { return parse_config(config); }

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt)
{
    Writer w;
    w.put_bytes(std::string(kMagic, 4));
    w.put<std::uint32_t>(ckpt.version);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(ckpt.stage));
    w.put<std::uint64_t>(ckpt.seed);
    w.put<std::uint64_t>(ckpt.config.size());
    w.put_bytes(ckpt.config);
    w.put_table(ckpt.tensors);
    w.put<std::uint8_t>(ckpt.ema_shadow ? 1 : 0);
    if (ckpt.ema_shadow) {
        w.put_table(*ckpt.ema_shadow);
    }
    w.put<std::uint64_t>(checksum(w.buf, w.buf.size()));

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw CheckpointError(CheckpointError::Code::Io, "cannot write checkpoint " + path.string());
    }
    out.write(w.buf.data(), static_cast<std::streamsize>(w.buf.size()));
    if (!out) {
        throw CheckpointError(CheckpointError::Code::Io, "write failed for " + path.string());
    }
}

Checkpoint load_checkpoint(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw CheckpointError(CheckpointError::Code::Io, "cannot open checkpoint " + path.string());
    }
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (buf.size() < 4 || std::memcmp(buf.data(), kMagic, 4) != 0) {
        throw CheckpointError(CheckpointError::Code::BadMagic, path.string() + " is not a checkpoint");
    }
    if (buf.size() < 4 + sizeof(std::uint64_t)) {
        throw CheckpointError(CheckpointError::Code::ChecksumFailure, "checkpoint " + path.string() + " is truncated");
    }
    const std::size_t body = buf.size() - sizeof(std::uint64_t);
    std::uint64_t stored;
    std::memcpy(&stored, buf.data() + body, sizeof stored);
    if (stored != checksum(buf, body)) {
        throw CheckpointError(CheckpointError::Code::ChecksumFailure,
                              "checkpoint " + path.string() + " failed its checksum (truncated or corrupted)");
    }

    Reader r(buf, body);
    r.get_bytes(4);
    Checkpoint c;
    c.version = r.get<std::uint32_t>();
    if (c.version != kCheckpointVersion) {
        throw CheckpointError(CheckpointError::Code::VersionMismatch,
                              "checkpoint version " + std::to_string(c.version) + ", expected " +
                                  std::to_string(kCheckpointVersion));
    }
    auto stage = r.get<std::uint8_t>();
    if (stage > 1) {
        throw CheckpointError(CheckpointError::Code::Malformed, "checkpoint: unknown stage tag");
    }
    c.stage = static_cast<StageTag>(stage);
    c.seed = r.get<std::uint64_t>();
    c.config = r.get_bytes(r.get<std::uint64_t>());
    c.tensors = r.get_table();
    if (r.get<std::uint8_t>()) {
        c.ema_shadow = r.get_table();
    }
    if (!r.done()) {
        throw CheckpointError(CheckpointError::Code::Malformed, "checkpoint: trailing bytes before checksum");
    }
    return c;
}

Checkpoint align_checkpoint(const AlignedEncoders& encoders, const Config& cfg)
{
    Checkpoint c;
    c.stage = StageTag::Align;
    c.seed = cfg.seed;
    c.config = serialize_config(cfg);
    c.tensors = prefixed(encoders.parameters(), kEncPrefix);
    return c;
}

Checkpoint fusion_checkpoint(const AlignedEncoders& encoders, const FusionModel& model, const EmaState* ema,
                             const Config& cfg)
{
    Checkpoint c = align_checkpoint(encoders, cfg);
    c.stage = StageTag::Fusion;
    for (auto& p : prefixed(model.parameters(), kModelPrefix)) {
        c.tensors.push_back(std::move(p));
    }
    if (ema && ema->initialized()) {
        c.ema_shadow = prefixed(ema->shadow, kModelPrefix);
    }
    return c;
}

AlignedEncoders restore_encoders(const Checkpoint& ckpt)
{
    Config cfg = ckpt.parsed_config();
    AlignedEncoders enc = make_encoders(cfg.corpus.dims, cfg.encoder, ckpt.seed);
    load_into(ckpt.tensors, kEncPrefix, enc.parameters());
    enc.freeze();
    return enc;
}

FusionModel restore_model(const Checkpoint& ckpt, bool use_ema)
{
    if (ckpt.stage != StageTag::Fusion) {
        throw CheckpointError(CheckpointError::Code::StageMismatch,
                              "expected a fusion checkpoint, got stage " + std::string(stage_name(ckpt.stage)));
    }
    Config cfg = ckpt.parsed_config();
    AlignedEncoders enc = restore_encoders(ckpt);
    FusionModel model(cfg.fusion, input_dims(enc, cfg.corpus.dims), ckpt.seed);
    const ParamList& source = use_ema && ckpt.ema_shadow ? *ckpt.ema_shadow : ckpt.tensors;
    load_into(source, kModelPrefix, model.parameters());
    return model;
}

} // namespace emi
