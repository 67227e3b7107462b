#pragma once

#include <array>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "emi/config.hpp"
#include "emi/eval.hpp"
#include "emi/optim.hpp"

namespace emi {

struct EpochLog {
    std::size_t epoch = 0;  ///< 1-based
    double eta = 0.0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double val_rho_mean = 0.0;
    std::array<std::optional<double>, kNumEmotions> val_rho_per_emotion{};

    std::string to_json() const;
};

struct TrainResult {
    FusionModel model;  ///< live parameters at the best epoch
    EmaState ema;       ///< shadow at the best epoch
    std::size_t best_epoch = 0;
    double best_val_rho = 0.0;
    std::vector<EpochLog> log;
    std::vector<std::string> train_ids;
    std::vector<std::string> val_ids;
};

/// Disjoint train/validation ids drawn with the config seed. A zero
/// val_fraction validates on the training set.
struct Split {
    std::vector<std::size_t> train;
    std::vector<std::size_t> val;
};
Split split_indices(std::size_t n, double val_fraction, std::uint64_t seed);

/// Encoders with random weights and standardizers fitted on the corpus frames,
/// frozen. Used when Stage I is skipped.
AlignedEncoders random_frozen_encoders(const std::vector<SampleBundle>& corpus, const Config& cfg);

/// Copy of `like` whose parameters hold `values` (names must match).
FusionModel with_values(const FusionModel& like, const ParamList& values);

using EpochCallback = std::function<void(const EpochLog&)>;

/// Minibatch momentum SGD on the per-sample MSE with cosine restarts per epoch,
/// global-norm clipping and an EMA shadow updated every step. Validation uses
/// the shadow. Throws NumericError on a non-finite loss and ParameterError on
/// an empty corpus or unfrozen encoders.
TrainResult train_stage2(const std::vector<SampleBundle>& corpus, const AlignedEncoders& encoders, const Config& cfg,
                         const EpochCallback& on_epoch = {});

/// Same loop on already-encoded samples.
TrainResult train_stage2(const std::vector<PreparedSample>& train, const std::vector<PreparedSample>& val,
                         const FusionInputDims& dims, const Config& cfg, const EpochCallback& on_epoch = {});

/// Shadow parameters applied to the model architecture.
FusionModel ema_model(const TrainResult& r);

} // namespace emi
