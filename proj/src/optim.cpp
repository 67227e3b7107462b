#include "emi/optim.hpp"

#include <cmath>
#include <numbers>

#include "emi/ops.hpp"

namespace emi {

ScheduleState::ScheduleState(double eta_max_, double eta_min_, std::size_t T_i_)
    : eta_max(eta_max_), eta_min(eta_min_), T_i(T_i_)
{
    validate();
    current_eta = cosine_eta(*this);
}

void ScheduleState::validate() const
{
    if (T_i == 0) {
        throw ParameterError("schedule cycle length must be positive");
    }
    if (!(eta_min > 0.0) || !(eta_max >= eta_min)) {
        throw ParameterError("schedule needs 0 < eta_min <= eta_max");
    }
    if (T_cur > T_i) {
        throw ParameterError("T_cur exceeds T_i");
    }
}

void ScheduleState::advance()
{
    ++T_cur;
    if (T_cur >= T_i) {
        T_cur = 0;
    }
    current_eta = cosine_eta(*this);
}

double cosine_eta(const ScheduleState& s)
{
    if (s.T_i == 0) {
        throw ParameterError("schedule cycle length must be positive");
    }
    const double phase = std::numbers::pi * static_cast<double>(s.T_cur) / static_cast<double>(s.T_i);
    return s.eta_min + 0.5 * (s.eta_max - s.eta_min) * (1.0 + std::cos(phase));
}

double eta_at_epoch(double eta_max, double eta_min, std::size_t T_i, std::size_t epoch)
{
    ScheduleState s(eta_max, eta_min, T_i);
    s.T_cur = epoch % T_i;
    return cosine_eta(s);
}

void sgd_momentum_step(ParamList& params, const std::vector<Tensor>& grads, OptimState& opt, double eta)
{
    if (grads.size() != params.size()) {
        throw DimensionError("sgd: " + std::to_string(grads.size()) + " gradients for " +
                             std::to_string(params.size()) + " parameters");
    }
    if (opt.buffers.empty()) {
        opt.buffers.resize(params.size());
        for (std::size_t i = 0; i < params.size(); ++i) {
            opt.buffers[i].assign(params[i].second.numel(), 0.0);
        }
    }
    if (opt.buffers.size() != params.size()) {
        throw DimensionError("sgd: momentum buffers do not mirror the parameter list");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& [name, p] = params[i];
        if (grads[i].shape() != p.shape() || opt.buffers[i].size() != p.numel()) {
            throw DimensionError("sgd: shape mismatch for " + name + ": " + shape_str(p.shape()) + " vs " +
                                 shape_str(grads[i].shape()));
        }
        auto g = grads[i].data();
        auto& b = opt.buffers[i];
        auto theta = p.mutable_data();
        for (std::size_t k = 0; k < b.size(); ++k) {
            b[k] = opt.momentum * b[k] + g[k];
            theta[k] -= eta * b[k];
        }
    }
}

void EmaState::init(const ParamList& live) { shadow = clone_params(live); }

void ema_update(EmaState& ema, const ParamList& live)
{
    if (!ema.initialized()) {
        throw Error("ema_update: shadow parameters are not initialized");
    }
    if (ema.shadow.size() != live.size()) {
        throw DimensionError("ema_update: shadow does not mirror live parameters");
    }
    const double g = ema.gamma;
    for (std::size_t i = 0; i < live.size(); ++i) {
        if (ema.shadow[i].second.shape() != live[i].second.shape()) {
            throw DimensionError("ema_update: shape mismatch for " + live[i].first);
        }
        auto s = ema.shadow[i].second.mutable_data();
        auto v = live[i].second.data();
        for (std::size_t k = 0; k < s.size(); ++k) {
            s[k] = g * s[k] + (1.0 - g) * v[k];
        }
    }
}

double clip_global_norm(std::vector<Tensor>& grads, double max_norm)
{
    double sq = 0.0;
    for (const auto& g : grads) {
        for (double x : g.data()) {
            sq += x * x;
        }
    }
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const double f = max_norm / norm;
        for (auto& g : grads) {
            for (double& x : g.mutable_data()) {
                x *= f;
            }
        }
    }
    return norm;
}

Tensor mse_loss(const Tensor& pred, const Tensor& target) { return mse(pred, target); }

} // namespace emi
