#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "emi/ablation.hpp"
#include "emi/checkpoint.hpp"

using namespace emi;
namespace fs = std::filesystem;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNumeric = 3;

const char* kFeatures = "features.emif";
const char* kAnnotations = "annotations.jsonl";

Config base_config(const std::string& path, const Config& fallback = {})
{
    return path.empty() ? fallback : parse_config([&] {
        std::ifstream in(path);
        if (!in) {
            throw ParameterError("cannot read config " + path);
        }
        std::stringstream ss;
        ss << in.rdbuf();
        return ss.str();
    }(), fallback);
}

std::vector<SampleBundle> load_data(const fs::path& dir)
{
    fs::path p = fs::is_directory(dir) ? dir / kFeatures : dir;
    auto corpus = read_features(p);
    if (corpus.empty()) {
        throw ParameterError("no samples in " + p.string());
    }
    return corpus;
}

/// Aligns the corpus part of the config with what is on disk.
void adopt_data_shape(Config& cfg, const std::vector<SampleBundle>& corpus)
{
    cfg.corpus.n_samples = corpus.size();
    cfg.corpus.frames = corpus.front().frames();
    cfg.corpus.dims = {corpus.front().visual.width(), corpus.front().audio.width(), corpus.front().text.width()};
}

void write_text(const fs::path& path, const std::string& text)
{
    std::ofstream out(path);
    if (!out) {
        throw ParameterError("cannot write " + path.string());
    }
    out << text;
}

void check_finite(const std::vector<Intensity>& preds)
{
    for (const auto& p : preds) {
        for (double v : p) {
            if (!std::isfinite(v)) {
                throw NumericError("prediction is not finite");
            }
        }
    }
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Emotional mimicry intensity estimation"};
    app.require_subcommand(1);

    std::uint64_t seed = 7;
    std::size_t count = 64, frames = 50;
    std::vector<std::size_t> dims;
    std::string config_path, data, out, encoders_path, checkpoint_path, plan_path, log_path;
    bool random_encoders = false, live = false;
    std::optional<std::uint64_t> seed_override;

    auto* gen = app.add_subcommand("gen-data", "Generate a synthetic trimodal corpus");
    gen->add_option("--seed", seed, "Corpus seed")->capture_default_str();
    gen->add_option("--count", count, "Number of samples")->capture_default_str();
    gen->add_option("--frames", frames, "Frames per sample")->capture_default_str();
    gen->add_option("--dims", dims, "Feature widths: visual audio text")->expected(3)->delimiter(',');
    gen->add_option("--config", config_path, "Config file for noise and salience");
    gen->add_option("--out", out, "Output directory")->required();

    auto* align = app.add_subcommand("pretrain-align", "Stage I contrastive alignment");
    align->add_option("--config", config_path, "Config file");
    align->add_option("--data", data, "Data directory")->required();
    align->add_option("--out", out, "Encoder checkpoint")->required();
    align->add_option("--seed", seed_override, "Override the config seed");

    auto* train = app.add_subcommand("train", "Stage II training; writes JSONL epoch logs");
    train->add_option("--config", config_path, "Config file");
    train->add_option("--data", data, "Data directory")->required();
    auto* enc_opt = train->add_option("--encoders", encoders_path, "Stage I checkpoint");
    auto* rnd_opt = train->add_flag("--random-encoders", random_encoders, "Skip Stage I with random frozen encoders");
    enc_opt->excludes(rnd_opt);
    train->add_option("--out", out, "Model checkpoint")->required();
    train->add_option("--log", log_path, "Epoch log file (stdout when omitted)");
    train->add_option("--seed", seed_override, "Override the config seed");

    auto* eval = app.add_subcommand("eval", "Pearson report on a corpus");
    eval->add_option("--checkpoint", checkpoint_path, "Model checkpoint")->required();
    eval->add_option("--data", data, "Data directory")->required();
    eval->add_flag("--live", live, "Use live parameters instead of the EMA shadow");

    auto* pred = app.add_subcommand("predict", "Per-sample predictions as JSONL");
    pred->add_option("--checkpoint", checkpoint_path, "Model checkpoint")->required();
    pred->add_option("--data", data, "Data directory")->required();
    pred->add_option("--out", out, "Output file")->required();
    pred->add_flag("--live", live, "Use live parameters instead of the EMA shadow");

    auto* abl = app.add_subcommand("ablate", "Module and modality ablation sweep");
    abl->add_option("--plan", plan_path, "Plan JSON")->required();
    abl->add_option("--data", data, "Data directory")->required();
    abl->add_option("--out", out, "Output directory")->required();
    abl->add_option("--config", config_path, "Base config (sweep defaults when omitted)");
    abl->add_option("--encoders", encoders_path, "Stage I checkpoint (random frozen encoders when omitted)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitUsage;
    }

    try {
        if (*gen) {
            Config cfg = base_config(config_path);
            CorpusParams p = cfg.corpus;
            p.n_samples = count;
            p.frames = frames;
            if (!dims.empty()) {
                p.dims = {dims[0], dims[1], dims[2]};
            }
            auto corpus = generate_corpus(seed, p);
            fs::create_directories(out);
            write_features(fs::path(out) / kFeatures, corpus);
            write_annotations(fs::path(out) / kAnnotations, synthesize_annotations(corpus, seed));
            std::fprintf(stderr, "wrote %zu samples to %s\n", corpus.size(), out.c_str());
        } else if (*align) {
            Config cfg = base_config(config_path);
            if (seed_override) {
                cfg.seed = *seed_override;
            }
            auto corpus = load_data(data);
            adopt_data_shape(cfg, corpus);
            auto annotations = read_annotations(fs::path(data) / kAnnotations);
            AlignReport rep;
            AlignedEncoders enc = pretrain_align(corpus, annotations, cfg, &rep);
            save_checkpoint(out, align_checkpoint(enc, cfg));
            nlohmann::json j{{"loss_visual", rep.final_loss_visual},
                             {"loss_audio", rep.final_loss_audio},
                             {"retrieval_visual", rep.retrieval_visual},
                             {"retrieval_audio", rep.retrieval_audio}};
            std::cout << j.dump() << "\n";
        } else if (*train) {
            if (encoders_path.empty() && !random_encoders) {
                throw CLI::RequiredError("--encoders or --random-encoders");
            }
            Config cfg = base_config(config_path);
            if (seed_override) {
                cfg.seed = *seed_override;
            }
            auto corpus = load_data(data);
            adopt_data_shape(cfg, corpus);
            AlignedEncoders enc;
            if (random_encoders) {
                enc = random_frozen_encoders(corpus, cfg);
            } else {
                Checkpoint c = load_checkpoint(encoders_path);
                enc = restore_encoders(c);
                cfg.encoder = c.parsed_config().encoder;
            }
            std::ofstream log_file;
            if (!log_path.empty()) {
                log_file.open(log_path);
                if (!log_file) {
                    throw ParameterError("cannot write " + log_path);
                }
            }
            std::ostream& log = log_path.empty() ? std::cout : log_file;
            TrainResult r = train_stage2(corpus, enc, cfg, [&](const EpochLog& l) { log << l.to_json() << "\n" << std::flush; });
            save_checkpoint(out, fusion_checkpoint(enc, r.model, &r.ema, cfg));
            std::fprintf(stderr, "best epoch %zu, validation rho %.4f\n", r.best_epoch, r.best_val_rho);
        } else if (*eval || *pred) {
            Checkpoint c = load_checkpoint(checkpoint_path);
            FusionModel model = restore_model(c, !live);
            AlignedEncoders enc = restore_encoders(c);
            auto samples = prepare_inputs(load_data(data), enc);
            auto preds = predict(model, samples);
            check_finite(preds);
            if (*eval) {
                std::vector<Intensity> targets;
                for (const auto& s : samples) {
                    Intensity t{};
                    std::copy_n(s.target.data().begin(), kNumEmotions, t.begin());
                    targets.push_back(t);
                }
                PearsonReport rep = pearson_report(targets, preds);
                for (const auto& w : rep.warnings) {
                    std::fprintf(stderr, "warning: %s\n", w.c_str());
                }
                std::cout << report_json(rep) << "\n";
            } else {
                std::ofstream o(out);
                if (!o) {
                    throw ParameterError("cannot write " + out);
                }
                for (std::size_t i = 0; i < samples.size(); ++i) {
                    nlohmann::json j{{"id", samples[i].id}, {"yhat", preds[i]}};
                    o << j.dump() << "\n";
                }
            }
        } else if (*abl) {
            AblationPlan plan = load_plan(plan_path);
            Config cfg = base_config(config_path, ablation_config());
            auto corpus = load_data(data);
            adopt_data_shape(cfg, corpus);
            AlignedEncoders enc;
            if (encoders_path.empty()) {
                enc = random_frozen_encoders(corpus, cfg);
            } else {
                Checkpoint c = load_checkpoint(encoders_path);
                enc = restore_encoders(c);
                cfg.encoder = c.parsed_config().encoder;
            }
            auto progress = [](const AblationCell& cell, const RunOutcome& r) {
                if (r.val_rho) {
                    std::fprintf(stderr, "%s seed %llu: rho %.4f\n", cell.label().c_str(),
                                 static_cast<unsigned long long>(r.seed), *r.val_rho);
                } else {
                    std::fprintf(stderr, "%s seed %llu: failed: %s\n", cell.label().c_str(),
                                 static_cast<unsigned long long>(r.seed), r.error.c_str());
                }
            };
            AblationTable table = run_ablation(plan, corpus, enc, cfg, progress);
            fs::create_directories(out);
            write_text(fs::path(out) / "ablation.json", table.to_json() + "\n");
            write_text(fs::path(out) / "ablation.txt", table.to_text());
            std::cout << table.to_text();
            if (plan.compensation) {
                Config comp_cfg = parse_config(plan.config_overrides, cfg);
                auto rep = qam_compensation(corpus, enc, comp_cfg, plan.seeds, plan.degradation, 0.5, progress);
                write_text(fs::path(out) / "compensation.json", rep.to_json() + "\n");
                std::cout << rep.to_json() << "\n";
            }
        }
    } catch (const CLI::Error& e) {
        std::fprintf(stderr, "usage error: %s\n", e.what());
        return kExitUsage;
    } catch (const NumericError& e) {
        std::fprintf(stderr, "numeric failure: %s\n", e.what());
        return kExitNumeric;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitData;
    }
    return kExitOk;
}
