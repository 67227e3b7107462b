#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include "emi/trainer.hpp"

namespace emi {

class CheckpointError : public Error {
public:
    enum class Code { Io, BadMagic, VersionMismatch, ChecksumFailure, MissingTensor, StageMismatch, Malformed };

    CheckpointError(Code code, const std::string& what) : Error(what), code_(code) {}
    Code code() const { return code_; }

private:
    Code code_;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class StageTag : std::uint8_t { Align = 0, Fusion = 1 };

std::string_view stage_name(StageTag s);

/// Encoder tensors are stored under "encoders.", model tensors under "model.".
struct Checkpoint {
    std::uint32_t version = kCheckpointVersion;
    StageTag stage = StageTag::Align;
    std::uint64_t seed = 0;
    std::string config;  ///< serialize_config text
    ParamList tensors;
    std::optional<ParamList> ema_shadow;

    /// Throws CheckpointError(MissingTensor).
    const Tensor& tensor(const std::string& name) const;
    Config parsed_config() const;
};

/// Layout: "EMIC", u32 version, u8 stage, u64 seed, u64 config length and bytes,
/// a tensor table, u8 EMA flag and an optional second table, then an FNV-1a 64
/// checksum of every preceding byte. Little-endian, doubles stored bit-exact.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

Checkpoint align_checkpoint(const AlignedEncoders& encoders, const Config& cfg);
Checkpoint fusion_checkpoint(const AlignedEncoders& encoders, const FusionModel& model, const EmaState* ema,
                             const Config& cfg);

/// Accepts either stage; the result is frozen.
AlignedEncoders restore_encoders(const Checkpoint& ckpt);
/// Requires a fusion checkpoint. With use_ema set and a shadow present, the
/// shadow values are loaded instead of the live ones.
FusionModel restore_model(const Checkpoint& ckpt, bool use_ema = true);

} // namespace emi
