#include "emi/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include <nlohmann/json.hpp>

#include "emi/ops.hpp"

namespace emi {

std::string EpochLog::to_json() const
{
    auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
    nlohmann::json j;
    j["epoch"] = epoch;
    j["eta"] = eta;
    j["train_loss"] = num(train_loss);
    j["val_loss"] = num(val_loss);
    j["val_rho_mean"] = num(val_rho_mean);
    auto per = nlohmann::json::array();
    for (const auto& r : val_rho_per_emotion) {
        per.push_back(r ? nlohmann::json(*r) : nlohmann::json(nullptr));
    }
    j["val_rho_per_emotion"] = per;
    return j.dump();
}

Split split_indices(std::size_t n, double val_fraction, std::uint64_t seed)
{
    if (val_fraction < 0.0 || val_fraction >= 1.0) {
        throw ParameterError("validation fraction must be in [0,1)");
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(seed ^ 0x5b117ull);
    std::shuffle(order.begin(), order.end(), rng);
    auto n_val = static_cast<std::size_t>(std::round(val_fraction * static_cast<double>(n)));
    Split s;
    if (n_val == 0 || n_val >= n) {
        s.train = order;
        std::sort(s.train.begin(), s.train.end());
        s.val = s.train;
        return s;
    }
    s.val.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
    s.train.assign(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
    std::sort(s.val.begin(), s.val.end());
    std::sort(s.train.begin(), s.train.end());
    return s;
}

AlignedEncoders random_frozen_encoders(const std::vector<SampleBundle>& corpus, const Config& cfg)
{
    if (corpus.empty()) {
        throw ParameterError("train: empty corpus");
    }
    AlignedEncoders enc = make_encoders(cfg.corpus.dims, cfg.encoder, cfg.seed);
    std::vector<Tensor> v, a;
    for (const auto& s : corpus) {
        v.push_back(s.visual.frames);
        a.push_back(s.audio.frames);
    }
    enc.visual.fit_standardizer(concat(v, 0));
    enc.audio.fit_standardizer(concat(a, 0));
    enc.freeze();
    return enc;
}

FusionModel with_values(const FusionModel& like, const ParamList& values)
{
    FusionModel out(like.config(), like.input_dims(), 0);
    ParamList dst = out.parameters();
    copy_values(values, dst);
    return out;
}

FusionModel ema_model(const TrainResult& r) { return with_values(r.model, r.ema.shadow); }

namespace {

double mean_loss(const FusionModel& model, const std::vector<PreparedSample>& samples)
{
    double total = 0.0;
    for (const auto& s : samples) {
        total += mse(model.forward(s.inputs).prediction, s.target).item();
    }
    return total / static_cast<double>(samples.size());
}

} // namespace

TrainResult train_stage2(const std::vector<PreparedSample>& train, const std::vector<PreparedSample>& val,
                         const FusionInputDims& dims, const Config& cfg, const EpochCallback& on_epoch)
{
    if (train.empty() || val.empty()) {
        throw ParameterError("train: empty corpus");
    }
    const auto& tc = cfg.train;
    FusionModel model(cfg.fusion, dims, cfg.seed);
    ParamList params = model.parameters();
    ScheduleState sched(tc.eta_max, tc.eta_min, tc.cycle);
    OptimState opt;
    opt.momentum = tc.momentum;
    EmaState ema;
    ema.gamma = tc.ema_gamma;
    ema.init(params);

    TrainResult result;
    result.model = with_values(model, params);
    result.ema = EmaState{ema.gamma, clone_params(ema.shadow)};
    result.best_val_rho = -std::numeric_limits<double>::infinity();

    std::mt19937_64 rng(cfg.seed ^ 0x7ea1ull);
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);

    for (std::size_t epoch = 1; epoch <= tc.epochs; ++epoch) {
        const double eta = sched.current_eta;
        std::shuffle(order.begin(), order.end(), rng);
        double total = 0.0;
        for (std::size_t start = 0; start < order.size(); start += tc.batch_size) {
            const std::size_t end = std::min(order.size(), start + tc.batch_size);
            GradTape tape;
            Tensor loss;
            {
                GradTape::Recording rec(tape);
                for (std::size_t b = start; b < end; ++b) {
                    const auto& s = train[order[b]];
                    Tensor l = mse(model.forward(s.inputs).prediction, s.target);
                    loss = loss.defined() ? add(loss, l) : l;
                }
                loss = scale(loss, 1.0 / static_cast<double>(end - start));
            }
            const double value = loss.item();
            if (!std::isfinite(value)) {
                throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                                   std::to_string(start / tc.batch_size + 1) + " (eta " + std::to_string(eta) + ")");
            }
            tape.backward(loss);
            std::vector<Tensor> grads;
            grads.reserve(params.size());
            for (const auto& [name, p] : params) {
                grads.push_back(tape.has_grad(p) ? tape.grad(p) : Tensor::zeros(p.shape()));
            }
            clip_global_norm(grads, tc.clip_norm);
            sgd_momentum_step(params, grads, opt, eta);
            ema_update(ema, params);
            total += value * static_cast<double>(end - start);
        }

        EpochLog log;
        log.epoch = epoch;
        log.eta = eta;
        log.train_loss = total / static_cast<double>(train.size());
        FusionModel shadow = with_values(model, ema.shadow);
        log.val_loss = mean_loss(shadow, val);
        PearsonReport rep = evaluate(shadow, val);
        log.val_rho_mean = rep.rho_mean;
        log.val_rho_per_emotion = rep.rho_per_emotion;
        if (!std::isfinite(log.val_loss)) {
            throw NumericError("train: non-finite validation loss at epoch " + std::to_string(epoch));
        }
        const double score = std::isfinite(rep.rho_mean) ? rep.rho_mean : -std::numeric_limits<double>::infinity();
        if (result.best_epoch == 0 || score > result.best_val_rho) {
            result.best_val_rho = score;
            result.best_epoch = epoch;
            result.model = with_values(model, params);
            result.ema = EmaState{ema.gamma, clone_params(ema.shadow)};
        }
        result.log.push_back(log);
        if (on_epoch) {
            on_epoch(log);
        }
        sched.advance();
    }
    return result;
}

TrainResult train_stage2(const std::vector<SampleBundle>& corpus, const AlignedEncoders& encoders, const Config& cfg,
                         const EpochCallback& on_epoch)
{
    if (corpus.empty()) {
        throw ParameterError("train: empty corpus");
    }
    if (!encoders.frozen) {
        throw ParameterError("train: encoders must be frozen before Stage II");
    }
    cfg.validate();
    auto prepared = prepare_inputs(corpus, encoders);
    Split split = split_indices(corpus.size(), cfg.train.val_fraction, cfg.seed);
    std::vector<PreparedSample> tr, va;
    for (auto i : split.train) {
        tr.push_back(prepared[i]);
    }
    for (auto i : split.val) {
        va.push_back(prepared[i]);
    }
    TrainResult r = train_stage2(tr, va, input_dims(encoders, cfg.corpus.dims), cfg, on_epoch);
    for (const auto& s : tr) {
        r.train_ids.push_back(s.id);
    }
    for (const auto& s : va) {
        r.val_ids.push_back(s.id);
    }
    return r;
}

} // namespace emi
