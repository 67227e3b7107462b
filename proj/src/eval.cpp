#include "emi/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <nlohmann/json.hpp>

namespace emi {

std::optional<double> pearson(std::span<const double> y, std::span<const double> yhat)
{
    if (y.size() != yhat.size()) {
        throw ParameterError("pearson: lengths differ (" + std::to_string(y.size()) + " vs " +
                             std::to_string(yhat.size()) + ")");
    }
    const std::size_t n = y.size();
    if (n < 2) {
        throw ParameterError("pearson: need at least two points");
    }
    double my = 0.0, mh = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        my += y[i];
        mh += yhat[i];
    }
    my /= static_cast<double>(n);
    mh /= static_cast<double>(n);
    double cov = 0.0, vy = 0.0, vh = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double a = y[i] - my, b = yhat[i] - mh;
        cov += a * b;
        vy += a * a;
        vh += b * b;
    }
    if (vy == 0.0 || vh == 0.0) {
        return std::nullopt;
    }
    const double rho = cov / std::sqrt(vy * vh);
    return std::clamp(rho, -1.0, 1.0);
}

std::size_t PearsonReport::defined_count() const
{
    std::size_t n = 0;
    for (const auto& r : rho_per_emotion) {
        n += r.has_value();
    }
    return n;
}

double mean_defined(const std::array<std::optional<double>, kNumEmotions>& rho)
{
    double total = 0.0;
    std::size_t k = 0;
    for (const auto& r : rho) {
        if (r) {
            total += *r;
            ++k;
        }
    }
    return k ? total / static_cast<double>(k) : std::numeric_limits<double>::quiet_NaN();
}

PearsonReport pearson_report(const std::vector<Intensity>& targets, const std::vector<Intensity>& predictions)
{
    if (targets.size() != predictions.size()) {
        throw ParameterError("evaluate: " + std::to_string(targets.size()) + " targets for " +
                             std::to_string(predictions.size()) + " predictions");
    }
    if (targets.empty()) {
        throw ParameterError("evaluate: empty sample set");
    }
    PearsonReport rep;
    rep.n_samples = targets.size();
    std::vector<double> y(targets.size()), yh(targets.size());
    for (std::size_t e = 0; e < kNumEmotions; ++e) {
        for (std::size_t i = 0; i < targets.size(); ++i) {
            y[i] = targets[i][e];
            yh[i] = predictions[i][e];
        }
        rep.rho_per_emotion[e] = targets.size() < 2 ? std::nullopt : pearson(y, yh);
        if (!rep.rho_per_emotion[e]) {
            rep.warnings.push_back("emotion " + std::to_string(e) +
                                   ": correlation undefined (zero variance), excluded from the mean");
        }
    }
    rep.rho_mean = mean_defined(rep.rho_per_emotion);
    return rep;
}

FusionInputDims input_dims(const AlignedEncoders& encoders, const CorpusDims& corpus_dims)
{
    return {encoders.visual.embed_dim(), encoders.audio.embed_dim(), corpus_dims.text};
}

std::vector<PreparedSample> prepare_inputs(const std::vector<SampleBundle>& corpus, const AlignedEncoders& encoders)
{
    std::vector<PreparedSample> out;
    out.reserve(corpus.size());
    for (const auto& s : corpus) {
        PreparedSample p;
        p.id = s.id;
        p.inputs.visual = encoders.encode_frames(s.visual).detach();
        p.inputs.audio = encoders.encode_frames(s.audio).detach();
        p.inputs.text = s.text.frames.detach();
        p.target = Tensor({1, kNumEmotions}, std::vector<double>(s.target.begin(), s.target.end()));
        out.push_back(std::move(p));
    }
    return out;
}

std::vector<Intensity> predict(const FusionModel& model, const std::vector<PreparedSample>& samples)
{
    std::vector<Intensity> out;
    out.reserve(samples.size());
    for (const auto& s : samples) {
        Tensor y = model.forward(s.inputs).prediction;
        Intensity v{};
        std::copy(y.data().begin(), y.data().end(), v.begin());
        out.push_back(v);
    }
    return out;
}

PearsonReport evaluate(const FusionModel& model, const std::vector<PreparedSample>& samples)
{
    if (samples.empty()) {
        throw ParameterError("evaluate: empty sample set");
    }
    std::vector<Intensity> targets;
    for (const auto& s : samples) {
        Intensity t{};
        std::copy(s.target.data().begin(), s.target.data().end(), t.begin());
        targets.push_back(t);
    }
    return pearson_report(targets, predict(model, samples));
}

std::string report_json(const PearsonReport& r)
{
    nlohmann::json j;
    j["n_samples"] = r.n_samples;
    j["rho_mean"] = std::isfinite(r.rho_mean) ? nlohmann::json(r.rho_mean) : nlohmann::json(nullptr);
    auto per = nlohmann::json::array();
    for (const auto& v : r.rho_per_emotion) {
        per.push_back(v ? nlohmann::json(*v) : nlohmann::json(nullptr));
    }
    j["rho_per_emotion"] = per;
    return j.dump();
}

} // namespace emi
