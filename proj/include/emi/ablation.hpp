#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "emi/trainer.hpp"

namespace emi {

struct AblationCell {
    ModalitySet modalities;
    bool tfe = true;
    bool qam = true;

    /// "V+A+T +TFE +QAM", "V+A+T baseline", ...
    std::string label() const;
};

/// Random visual/audio occlusion applied to a fraction of the corpus before
/// training, so quality varies across samples.
struct Degradation {
    double visual_rate = 0.0;
    double audio_rate = 0.0;
    /// Occluded span as a fraction of the sequence length.
    double span = 0.5;
};

struct AblationPlan {
    std::vector<AblationCell> cells;
    std::vector<std::uint64_t> seeds;
    Degradation degradation;
    /// key = value lines applied over the base config.
    std::string config_overrides;
    /// Also run the occlusion compensation sweep.
    bool compensation = false;

    /// Throws ParameterError on an empty plan, an empty seed list or rates outside [0,1].
    void validate() const;
};

AblationPlan parse_plan(const std::string& json);
AblationPlan load_plan(const std::filesystem::path& path);
std::string plan_to_json(const AblationPlan& plan);

/// Every modality subset with both modules on, then V+A+T with the four
/// module toggles.
AblationPlan standard_plan(std::vector<std::uint64_t> seeds);

/// Base configuration sized for sweeps of dozens of trainings.
Config ablation_config();

/// Occluded copy of the corpus; which samples and spans are drawn from `seed`.
std::vector<SampleBundle> degrade_corpus(const std::vector<SampleBundle>& corpus, const Degradation& d,
                                         std::uint64_t seed);

/// Occludes one contiguous span of `span` * T frames of one modality.
SampleBundle occlude_span(const SampleBundle& s, Modality m, double span, std::uint64_t seed);

struct RunOutcome {
    std::uint64_t seed = 0;
    std::optional<double> val_rho;
    std::string error;
};

struct CellResult {
    AblationCell cell;
    std::vector<RunOutcome> runs;
    /// Over completed runs; NaN when none completed.
    double mean = 0.0;
    double stddev = 0.0;
    std::size_t completed = 0;
};

struct AblationTable {
    std::vector<CellResult> rows;

    const CellResult* find(const std::string& modalities, bool tfe, bool qam) const;
    std::string to_json() const;
    std::string to_text() const;
};

/// Trains one cell for one seed and returns its validation mean rho.
using CellTrainer = std::function<double(const Config& cfg)>;
using CellProgress = std::function<void(const AblationCell&, const RunOutcome&)>;

/// Cells run in plan order, seeds in plan order. Every run of every cell uses
/// the same degraded corpus and the seed's split, so cells are paired by seed.
/// A failing run is recorded and the sweep continues.
AblationTable run_ablation(const AblationPlan& plan, const std::vector<SampleBundle>& corpus,
                           const AlignedEncoders& encoders, const Config& base, const CellProgress& progress = {},
                           const CellTrainer& trainer = {});

struct CompensationRun {
    std::uint64_t seed = 0;
    double rho_qam = 0.0;
    double rho_plain = 0.0;
    /// QAM model, occluded frames of the occluded eval set vs the same frames clean.
    double beta_v_occluded = 0.0;
    double beta_v_clean = 0.0;
};

struct CompensationReport {
    std::vector<CompensationRun> runs;
    double mean_rho_qam = 0.0;
    double mean_rho_plain = 0.0;
    double mean_beta_v_occluded = 0.0;
    double mean_beta_v_clean = 0.0;
    std::size_t qam_wins = 0;

    std::string to_json() const;
};

/// For each seed trains V+A+T with QAM on and off (TFE off in both) on the
/// degraded corpus, then evaluates on the validation split with every sample
/// visually occluded over `span` of its frames.
CompensationReport qam_compensation(const std::vector<SampleBundle>& corpus, const AlignedEncoders& encoders,
                                    const Config& base, const std::vector<std::uint64_t>& seeds,
                                    const Degradation& train_degradation, double span = 0.5,
                                    const CellProgress& progress = {});

} // namespace emi
