#include "emi/ablation.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <random>
#include <sstream>
#include <unordered_map>

#include <nlohmann/json.hpp>

namespace emi {

using nlohmann::json;

namespace {

std::string config_value(const json& v)
{
    if (v.is_string()) {
        return v.get<std::string>();
    }
    if (v.is_boolean()) {
        return v.get<bool>() ? "true" : "false";
    }
    if (v.is_number_integer() || v.is_number_unsigned()) {
        return v.dump();
    }
    if (v.is_number_float()) {
        char buf[64];
        std::snprintf(buf, sizeof buf, "%.17g", v.get<double>());
        return buf;
    }
    throw ParameterError("plan: config values must be strings, numbers or booleans");
}

AblationCell parse_cell(const json& j)
{
    AblationCell c;
    c.modalities = ModalitySet::parse(j.at("modalities").get<std::string>());
    c.tfe = j.value("tfe", true);
    c.qam = j.value("qam", true);
    return c;
}

json cell_json(const AblationCell& c)
{
    return {{"modalities", c.modalities.label()}, {"tfe", c.tfe}, {"qam", c.qam}};
}

json number_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

std::pair<double, double> mean_std(const std::vector<double>& xs)
{
    if (xs.empty()) {
        return {std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN()};
    }
    double m = 0.0;
    for (double x : xs) {
        m += x;
    }
    m /= static_cast<double>(xs.size());
    if (xs.size() < 2) {
        return {m, 0.0};
    }
    double ss = 0.0;
    for (double x : xs) {
        ss += (x - m) * (x - m);
    }
    return {m, std::sqrt(ss / static_cast<double>(xs.size() - 1))};
}

Config cell_config(const Config& base, const AblationCell& cell, std::uint64_t seed)
{
    Config cfg = base;
    cfg.fusion.modalities = cell.modalities;
    cfg.fusion.tfe = cell.tfe;
    cfg.fusion.qam = cell.qam;
    cfg.seed = seed;
    return cfg;
}

std::pair<std::size_t, std::size_t> span_bounds(std::size_t T, double span, std::uint64_t seed)
{
    const auto len = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(span * static_cast<double>(T))), 1, T);
    std::mt19937_64 rng(seed);
    const std::size_t start = std::uniform_int_distribution<std::size_t>(0, T - len)(rng);
    return {start, start + len};
}

} // namespace

std::string AblationCell::label() const
{
    std::string s = modalities.label();
    if (!tfe && !qam) {
        return s + " baseline";
    }
    if (tfe) {
        s += " +TFE";
    }
    if (qam) {
        s += " +QAM";
    }
    return s;
}

void AblationPlan::validate() const
{
    if (cells.empty()) {
        throw ParameterError("plan: no cells");
    }
    if (seeds.empty()) {
        throw ParameterError("plan: no seeds");
    }
    for (const auto& c : cells) {
        if (c.modalities.count() == 0) {
            throw ParameterError("plan: every cell needs at least one modality");
        }
    }
    auto rate = [](double r, const char* what) {
        if (!(r >= 0.0 && r <= 1.0)) {
            throw ParameterError(std::string("plan: ") + what + " must be in [0,1]");
        }
    };
    rate(degradation.visual_rate, "degradation.visual_rate");
    rate(degradation.audio_rate, "degradation.audio_rate");
    if (!(degradation.span > 0.0 && degradation.span <= 1.0)) {
        throw ParameterError("plan: degradation.span must be in (0,1]");
    }
}

AblationPlan parse_plan(const std::string& text)
{
    AblationPlan plan;
    try {
        json j = json::parse(text);
        if (j.contains("cells")) {
            for (const auto& c : j.at("cells")) {
                plan.cells.push_back(parse_cell(c));
            }
        }
        if (j.contains("modality_subsets")) {
            json toggles = j.value("toggles", json::array({json{{"tfe", true}, {"qam", true}}}));
            for (const auto& m : j.at("modality_subsets")) {
                for (const auto& t : toggles) {
                    AblationCell c;
                    c.modalities = ModalitySet::parse(m.get<std::string>());
                    c.tfe = t.value("tfe", true);
                    c.qam = t.value("qam", true);
                    plan.cells.push_back(c);
                }
            }
        }
        for (const auto& s : j.at("seeds")) {
            plan.seeds.push_back(s.get<std::uint64_t>());
        }
        if (j.contains("degradation")) {
            const auto& d = j.at("degradation");
            plan.degradation.visual_rate = d.value("visual_rate", 0.0);
            plan.degradation.audio_rate = d.value("audio_rate", 0.0);
            plan.degradation.span = d.value("span", 0.5);
        }
        if (j.contains("config")) {
            const auto& c = j.at("config");
            if (c.is_string()) {
                plan.config_overrides = c.get<std::string>();
            } else {
                for (const auto& [key, value] : c.items()) {
                    plan.config_overrides += key + " = " + config_value(value) + "\n";
                }
            }
        }
        plan.compensation = j.value("compensation", false);
    } catch (const json::exception& e) {
        throw ParameterError(std::string("plan: ") + e.what());
    }
    plan.validate();
    return plan;
}

AblationPlan load_plan(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) {
        throw ParameterError("cannot read plan " + path.string());
    }
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_plan(ss.str());
}

std::string plan_to_json(const AblationPlan& plan)
{
    json j;
    j["cells"] = json::array();
    for (const auto& c : plan.cells) {
        j["cells"].push_back(cell_json(c));
    }
    j["seeds"] = plan.seeds;
    j["degradation"] = {{"visual_rate", plan.degradation.visual_rate},
                        {"audio_rate", plan.degradation.audio_rate},
                        {"span", plan.degradation.span}};
    j["config"] = plan.config_overrides;
    j["compensation"] = plan.compensation;
    return j.dump(2);
}

AblationPlan standard_plan(std::vector<std::uint64_t> seeds)
{
    AblationPlan plan;
    for (const char* m : {"V", "A", "V+T", "V+A", "A+T", "V+A+T"}) {
        plan.cells.push_back({ModalitySet::parse(m), true, true});
    }
    const ModalitySet all = ModalitySet::parse("V+A+T");
    plan.cells.push_back({all, false, false});
    plan.cells.push_back({all, true, false});
    plan.cells.push_back({all, false, true});
    plan.seeds = std::move(seeds);
    plan.degradation.visual_rate = 0.3;
    plan.degradation.span = 0.5;
    plan.compensation = true;
    return plan;
}

Config ablation_config()
{
    Config c;
    c.corpus.n_samples = 160;
    c.corpus.frames = 20;
    c.corpus.salience_floor = 0.5;
    c.fusion.tcn_layers = 3;
    c.fusion.tcn_channels = 16;
    c.fusion.lstm_hidden = 8;
    c.fusion.segments = 4;
    c.fusion.d_shared = 16;
    c.fusion.map_hidden = 16;
    c.fusion.quality_hidden = 8;
    c.fusion.layers = 1;
    c.fusion.heads = 2;
    c.fusion.ff_hidden = 32;
    c.train.epochs = 60;
    c.train.eta_max = 2.0;
    c.train.eta_min = 0.02;
    c.train.ema_gamma = 0.99;
    return c;
}

SampleBundle occlude_span(const SampleBundle& s, Modality m, double span, std::uint64_t seed)
{
    if (m == Modality::Text) {
        throw ParameterError("occlusion spans apply to visual or audio frames");
    }
    CorruptionSpec spec;
    spec.modality = m;
    spec.kind = CorruptionKind::OcclusionMask;
    spec.strength = 1.0;
    spec.frame_span = span_bounds(s.stream(m).length(), span, seed);
    return corrupt(s, spec, seed);
}

std::vector<SampleBundle> degrade_corpus(const std::vector<SampleBundle>& corpus, const Degradation& d,
                                         std::uint64_t seed)
{
    std::vector<SampleBundle> out;
    out.reserve(corpus.size());
    std::mt19937_64 rng(seed ^ 0xdec0ull);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (const auto& s : corpus) {
        const double uv = unit(rng), ua = unit(rng);
        const std::uint64_t sv = rng(), sa = rng();
        SampleBundle b = s;
        if (uv < d.visual_rate) {
            b = occlude_span(b, Modality::Visual, d.span, sv);
        }
        if (ua < d.audio_rate) {
            b = occlude_span(b, Modality::Audio, d.span, sa);
        }
        out.push_back(std::move(b));
    }
    return out;
}

const CellResult* AblationTable::find(const std::string& modalities, bool tfe, bool qam) const
{
    const std::string want = ModalitySet::parse(modalities).label();
    for (const auto& r : rows) {
        if (r.cell.modalities.label() == want && r.cell.tfe == tfe && r.cell.qam == qam) {
            return &r;
        }
    }
    return nullptr;
}

std::string AblationTable::to_json() const
{
    json j;
    j["rows"] = json::array();
    for (const auto& r : rows) {
        json row = cell_json(r.cell);
        row["label"] = r.cell.label();
        row["mean"] = number_or_null(r.mean);
        row["std"] = number_or_null(r.stddev);
        row["completed"] = r.completed;
        row["runs"] = json::array();
        for (const auto& run : r.runs) {
            row["runs"].push_back({{"seed", run.seed},
                                   {"val_rho", run.val_rho ? json(*run.val_rho) : json(nullptr)},
                                   {"error", run.error.empty() ? json(nullptr) : json(run.error)}});
        }
        j["rows"].push_back(row);
    }
    return j.dump(2);
}

std::string AblationTable::to_text() const
{
    std::ostringstream os;
    char line[160];
    std::snprintf(line, sizeof line, "%-22s %-5s %-5s %14s %8s\n", "Modalities", "TFE", "QAM", "rho (mean+-std)", "runs");
    os << line;
    for (const auto& r : rows) {
        char stat[40];
        if (std::isfinite(r.mean)) {
            std::snprintf(stat, sizeof stat, "%.4f+-%.4f", r.mean, r.stddev);
        } else {
            std::snprintf(stat, sizeof stat, "n/a");
        }
        std::snprintf(line, sizeof line, "%-22s %-5s %-5s %14s %4zu/%zu\n", r.cell.modalities.label().c_str(),
                      r.cell.tfe ? "on" : "off", r.cell.qam ? "on" : "off", stat, r.completed, r.runs.size());
        os << line;
    }
    return os.str();
}

AblationTable run_ablation(const AblationPlan& plan, const std::vector<SampleBundle>& corpus,
                           const AlignedEncoders& encoders, const Config& base_in, const CellProgress& progress,
                           const CellTrainer& trainer)
{
    plan.validate();
    if (corpus.empty()) {
        throw ParameterError("ablation: empty corpus");
    }
    const Config base = parse_config(plan.config_overrides, base_in);
    const auto degraded = degrade_corpus(corpus, plan.degradation, base.seed);
    CellTrainer train = trainer;
    if (!train) {
        train = [&](const Config& cfg) { return train_stage2(degraded, encoders, cfg).best_val_rho; };
    }

    AblationTable table;
    for (const auto& cell : plan.cells) {
        CellResult row;
        row.cell = cell;
        std::vector<double> ok;
        for (auto seed : plan.seeds) {
            RunOutcome run;
            run.seed = seed;
            try {
                Config cfg = cell_config(base, cell, seed);
                cfg.validate();
                const double rho = train(cfg);
                if (std::isfinite(rho)) {
                    run.val_rho = rho;
                    ok.push_back(rho);
                } else {
                    run.error = "validation rho undefined";
                }
            } catch (const std::exception& e) {
                run.error = e.what();
            }
            if (progress) {
                progress(cell, run);
            }
            row.runs.push_back(std::move(run));
        }
        row.completed = ok.size();
        std::tie(row.mean, row.stddev) = mean_std(ok);
        table.rows.push_back(std::move(row));
    }
    return table;
}

std::string CompensationReport::to_json() const
{
    json j;
    j["runs"] = json::array();
    for (const auto& r : runs) {
        j["runs"].push_back({{"seed", r.seed},
                             {"rho_qam", number_or_null(r.rho_qam)},
                             {"rho_plain", number_or_null(r.rho_plain)},
                             {"beta_v_occluded", r.beta_v_occluded},
                             {"beta_v_clean", r.beta_v_clean}});
    }
    j["mean_rho_qam"] = number_or_null(mean_rho_qam);
    j["mean_rho_plain"] = number_or_null(mean_rho_plain);
    j["mean_beta_v_occluded"] = mean_beta_v_occluded;
    j["mean_beta_v_clean"] = mean_beta_v_clean;
    j["qam_wins"] = qam_wins;
    return j.dump(2);
}

CompensationReport qam_compensation(const std::vector<SampleBundle>& corpus, const AlignedEncoders& encoders,
                                    const Config& base, const std::vector<std::uint64_t>& seeds,
                                    const Degradation& train_degradation, double span, const CellProgress& progress)
{
    if (corpus.empty() || seeds.empty()) {
        throw ParameterError("compensation: need a corpus and at least one seed");
    }
    const auto degraded = degrade_corpus(corpus, train_degradation, base.seed);
    std::unordered_map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        index[corpus[i].id] = i;
    }
    const ModalitySet all = ModalitySet::parse("V+A+T");
    const AblationCell with_qam{all, false, true}, without_qam{all, false, false};

    CompensationReport rep;
    for (auto seed : seeds) {
        TrainResult rq = train_stage2(degraded, encoders, cell_config(base, with_qam, seed));
        TrainResult rp = train_stage2(degraded, encoders, cell_config(base, without_qam, seed));

        std::vector<SampleBundle> clean, occluded;
        std::vector<std::pair<std::size_t, std::size_t>> spans;
        for (const auto& id : rq.val_ids) {
            const SampleBundle& s = corpus[index.at(id)];
            const std::uint64_t span_seed = seed * 0x9e3779b97f4a7c15ull + index.at(id);
            clean.push_back(s);
            occluded.push_back(occlude_span(s, Modality::Visual, span, span_seed));
            spans.push_back(*occluded.back().corruption.back().frame_span);
        }
        const auto clean_in = prepare_inputs(clean, encoders);
        const auto occl_in = prepare_inputs(occluded, encoders);
        FusionModel mq = ema_model(rq), mp = ema_model(rp);

        CompensationRun run;
        run.seed = seed;
        run.rho_qam = evaluate(mq, occl_in).rho_mean;
        run.rho_plain = evaluate(mp, occl_in).rho_mean;
        double occ = 0.0, cln = 0.0;
        std::size_t frames = 0;
        for (std::size_t i = 0; i < occl_in.size(); ++i) {
            Tensor bo = mq.forward(occl_in[i].inputs).quality.column(Modality::Visual);
            Tensor bc = mq.forward(clean_in[i].inputs).quality.column(Modality::Visual);
            for (std::size_t t = spans[i].first; t < spans[i].second; ++t) {
                occ += bo.data()[t];
                cln += bc.data()[t];
                ++frames;
            }
        }
        run.beta_v_occluded = occ / static_cast<double>(frames);
        run.beta_v_clean = cln / static_cast<double>(frames);
        if (progress) {
            progress(with_qam, {seed, run.rho_qam, {}});
            progress(without_qam, {seed, run.rho_plain, {}});
        }
        rep.runs.push_back(run);
    }
    const double n = static_cast<double>(rep.runs.size());
    for (const auto& r : rep.runs) {
        rep.mean_rho_qam += r.rho_qam / n;
        rep.mean_rho_plain += r.rho_plain / n;
        rep.mean_beta_v_occluded += r.beta_v_occluded / n;
        rep.mean_beta_v_clean += r.beta_v_clean / n;
        if (r.rho_qam > r.rho_plain) {
            ++rep.qam_wins;
        }
    }
    return rep;
}

} // namespace emi
