#pragma once

#include <array>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "emi/align.hpp"
#include "emi/fusion.hpp"

namespace emi {

/// Population Pearson correlation. Empty when either argument has zero
/// variance. Throws ParameterError for n < 2 or a length mismatch.
std::optional<double> pearson(std::span<const double> y, std::span<const double> yhat);

struct PearsonReport {
    std::array<std::optional<double>, kNumEmotions> rho_per_emotion{};
    /// Mean over the defined entries; NaN when none is defined.
    double rho_mean = 0.0;
    std::size_t n_samples = 0;
    std::vector<std::string> warnings;

    std::size_t defined_count() const;
    bool all_defined() const { return defined_count() == kNumEmotions; }
};

/// Mean of the defined entries, NaN when none is defined.
double mean_defined(const std::array<std::optional<double>, kNumEmotions>& rho);

PearsonReport pearson_report(const std::vector<Intensity>& targets, const std::vector<Intensity>& predictions);

/// A sample with its frozen-encoder embeddings precomputed.
struct PreparedSample {
    std::string id;
    ModelInputs inputs;
    Tensor target;  ///< [1 x 6]
};

std::vector<PreparedSample> prepare_inputs(const std::vector<SampleBundle>& corpus, const AlignedEncoders& encoders);
FusionInputDims input_dims(const AlignedEncoders& encoders, const CorpusDims& corpus_dims);

std::vector<Intensity> predict(const FusionModel& model, const std::vector<PreparedSample>& samples);
/// Throws ParameterError for an empty sample set.
PearsonReport evaluate(const FusionModel& model, const std::vector<PreparedSample>& samples);

/// {"n_samples":..,"rho_mean":..,"rho_per_emotion":[..]} with null for undefined entries.
std::string report_json(const PearsonReport& r);

} // namespace emi
