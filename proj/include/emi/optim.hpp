#pragma once

#include <cstddef>
#include <vector>

#include "emi/layers.hpp"

namespace emi {

/// Cosine annealing with warm restarts, advanced once per epoch.
struct ScheduleState {
    double eta_max = 1e-2;
    double eta_min = 1e-4;
    std::size_t T_i = 10;
    std::size_t T_cur = 0;
    double current_eta = 1e-2;

    ScheduleState() = default;
    ScheduleState(double eta_max, double eta_min, std::size_t T_i);

    /// T_cur += 1, wrapping to 0 once it reaches T_i. Refreshes current_eta.
    void advance();
    void validate() const;
};

double cosine_eta(const ScheduleState& s);
/// Learning rate for a zero-based epoch index under the restart rule.
double eta_at_epoch(double eta_max, double eta_min, std::size_t T_i, std::size_t epoch);

struct OptimState {
    double momentum = 0.9;
    std::vector<std::vector<double>> buffers;
};

/// b <- mu*b + g; theta <- theta - eta*b. Buffers are created on the first call.
void sgd_momentum_step(ParamList& params, const std::vector<Tensor>& grads, OptimState& opt, double eta);

struct EmaState {
    double gamma = 0.999;
    ParamList shadow;

    bool initialized() const { return !shadow.empty(); }
    /// shadow <- deep copy of live.
    void init(const ParamList& live);
};

/// shadow <- gamma*shadow + (1-gamma)*live.
void ema_update(EmaState& ema, const ParamList& live);

/// Rescales grads in place so their global L2 norm is at most max_norm.
/// Returns the norm before clipping.
double clip_global_norm(std::vector<Tensor>& grads, double max_norm);

/// Mean of squared differences between two equal-length vectors.
Tensor mse_loss(const Tensor& pred, const Tensor& target);

} // namespace emi
