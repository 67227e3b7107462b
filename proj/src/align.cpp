#include "emi/align.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <unordered_map>

#include "emi/ops.hpp"
#include "emi/optim.hpp"

namespace emi {

ToyEncoder::ToyEncoder(std::size_t input_dim, std::size_t hidden_dim, std::size_t embed_dim, std::mt19937_64& rng)
    : shift(Tensor::zeros({1, input_dim})),
      inv_scale(Tensor::ones({1, input_dim})),
      hidden(input_dim, hidden_dim, rng),
      out(hidden_dim, embed_dim, rng)
{
}

Tensor ToyEncoder::encode(const Tensor& x) const
{
    Tensor z = mul(sub(x, shift), inv_scale);
    return l2_normalize_rows(out.forward(tanh(hidden.forward(z))));
}

void ToyEncoder::fit_standardizer(const Tensor& x)
{
    const std::size_t n = x.rows();
    const std::size_t d = x.cols();
    if (d != input_dim() || n == 0) {
        throw DimensionError("fit_standardizer: got " + shape_str(x.shape()));
    }
    auto v = x.data();
    auto mu = shift.mutable_data();
    auto inv = inv_scale.mutable_data();
    for (std::size_t k = 0; k < d; ++k) {
        double m = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            m += v[i * d + k];
        }
        m /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            var += (v[i * d + k] - m) * (v[i * d + k] - m);
        }
        var /= static_cast<double>(n);
        mu[k] = m;
        inv[k] = var > 1e-12 ? 1.0 / std::sqrt(var) : 1.0;
    }
}

void ToyEncoder::collect(ParamList& params, const std::string& prefix) const
{
    params.emplace_back(prefix + ".shift", shift);
    params.emplace_back(prefix + ".inv_scale", inv_scale);
    collect_trainable(params, prefix);
}

void ToyEncoder::collect_trainable(ParamList& params, const std::string& prefix) const
{
    hidden.collect(params, prefix + ".0");
    out.collect(params, prefix + ".1");
}

std::vector<std::string> tokenize(std::string_view prompt)
{
    static constexpr std::string_view separators = " \t\r\n(),:=";
    std::vector<std::string> tokens;
    std::string cur;
    for (char c : prompt) {
        if (separators.find(c) != std::string_view::npos) {
            if (!cur.empty()) {
                tokens.push_back(std::move(cur));
                cur.clear();
            }
        } else {
            cur.push_back(c);
        }
    }
    if (!cur.empty()) {
        tokens.push_back(std::move(cur));
    }
    return tokens;
}

std::uint64_t token_hash(std::string_view token)
{
    std::uint64_t h = 14695981039346656037ull;
    for (unsigned char c : token) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

Tensor encode_text_batch(const std::vector<std::string>& prompts, const Tensor& vocab_embedding)
{
    const std::size_t V = vocab_embedding.rows();
    if (V == 0) {
        throw DimensionError("text encoder: empty vocabulary table");
    }
    std::vector<double> counts(prompts.size() * V, 0.0);
    for (std::size_t i = 0; i < prompts.size(); ++i) {
        auto tokens = tokenize(prompts[i]);
        if (tokens.empty()) {
            throw ParameterError("text encoder: prompt has no tokens");
        }
        const double w = 1.0 / static_cast<double>(tokens.size());
        for (const auto& t : tokens) {
            counts[i * V + token_hash(t) % V] += w;
        }
    }
    Tensor pooling({prompts.size(), V}, std::move(counts));
    return l2_normalize_rows(matmul(pooling, vocab_embedding));
}

Tensor encode_text_tokens(const std::string& prompt, const Tensor& vocab_embedding)
{
    return encode_text_batch({prompt}, vocab_embedding);
}

void EmbeddingBatch::validate() const
{
    if (!(temperature_tau > 0.0)) {
        throw ParameterError("infonce: temperature must be positive");
    }
    if (f_mod.rank() != 2 || f_mod.shape() != f_text.shape()) {
        throw DimensionError("infonce: embedding shapes differ: " + shape_str(f_mod.shape()) + " vs " +
                             shape_str(f_text.shape()));
    }
    const std::size_t n = f_mod.rows();
    if (n == 0) {
        throw DimensionError("infonce: empty batch");
    }
    if (weights_w.size() != n) {
        throw DimensionError("infonce: " + std::to_string(weights_w.size()) + " weights for " + std::to_string(n) +
                             " pairs");
    }
    for (double w : weights_w) {
        if (!(w >= 0.0)) {
            throw ParameterError("infonce: weights must be non-negative");
        }
    }
    for (const Tensor* t : {&f_mod, &f_text}) {
        const std::size_t d = t->cols();
        auto v = t->data();
        for (std::size_t i = 0; i < n; ++i) {
            double sq = 0.0;
            for (std::size_t k = 0; k < d; ++k) {
                sq += v[i * d + k] * v[i * d + k];
            }
            if (std::abs(std::sqrt(sq) - 1.0) > 1e-6) {
                throw ParameterError("infonce: embedding rows must be unit-norm");
            }
        }
    }
}

namespace {

Tensor weighted_diag_nll(const Tensor& logits, const std::vector<double>& w)
{
    const std::size_t n = logits.rows();
    std::vector<double> mask(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        mask[i * n + i] = w[i];
    }
    Tensor picked = mul(log_softmax_rows(logits), Tensor({n, n}, std::move(mask)));
    return scale(sum(picked), -1.0 / static_cast<double>(n));
}

} // namespace

Tensor infonce_weighted(const EmbeddingBatch& batch, bool symmetric)
{
    batch.validate();
    Tensor logits = scale(matmul(batch.f_mod, transpose(batch.f_text)), 1.0 / batch.temperature_tau);
    Tensor loss = weighted_diag_nll(logits, batch.weights_w);
    if (symmetric) {
        loss = scale(add(loss, weighted_diag_nll(transpose(logits), batch.weights_w)), 0.5);
    }
    return loss;
}

double confidence_weight(double va_stddev, double batch_mean_raw)
{
    if (!(va_stddev >= 0.0)) {
        throw ParameterError("confidence_weight: negative VA standard deviation");
    }
    if (!(batch_mean_raw > 0.0)) {
        throw ParameterError("confidence_weight: batch mean must be positive");
    }
    return (1.0 / (1.0 + va_stddev)) / batch_mean_raw;
}

std::vector<double> confidence_weights(std::span<const double> va_stddev)
{
    if (va_stddev.empty()) {
        return {};
    }
    double mean_raw = 0.0;
    for (double s : va_stddev) {
        if (!(s >= 0.0)) {
            throw ParameterError("confidence_weight: negative VA standard deviation");
        }
        mean_raw += 1.0 / (1.0 + s);
    }
    mean_raw /= static_cast<double>(va_stddev.size());
    std::vector<double> out;
    out.reserve(va_stddev.size());
    for (double s : va_stddev) {
        out.push_back(confidence_weight(s, mean_raw));
    }
    return out;
}

ParamList AlignedEncoders::parameters() const
{
    ParamList p;
    visual.collect(p, "visual");
    audio.collect(p, "audio");
    p.emplace_back("text.vocab", vocab);
    return p;
}

ParamList AlignedEncoders::trainable_parameters() const
{
    ParamList p;
    visual.collect_trainable(p, "visual");
    audio.collect_trainable(p, "audio");
    p.emplace_back("text.vocab", vocab);
    return p;
}

void AlignedEncoders::freeze()
{
    auto p = parameters();
    set_trainable(p, false);
    frozen = true;
}

Tensor AlignedEncoders::encode_frames(const FeatureSequence& seq) const
{
    switch (seq.modality) {
    case Modality::Visual:
        return visual.encode(seq.frames);
    case Modality::Audio:
        return audio.encode(seq.frames);
    case Modality::Text:
        break;
    }
    throw ParameterError("encode_frames: the text stream has no frame encoder");
}

Tensor AlignedEncoders::encode_clip(const FeatureSequence& seq) const
{
    return encode_frames(FeatureSequence{seq.modality, mean(seq.frames, 0), seq.frame_rate_hz});
}

AlignedEncoders make_encoders(const CorpusDims& dims, const EncoderConfig& cfg, std::uint64_t seed)
{
    std::mt19937_64 rng(seed ^ 0xa11e9ull);
    AlignedEncoders enc;
    enc.visual = ToyEncoder(dims.visual, cfg.hidden, cfg.embed_dim, rng);
    enc.audio = ToyEncoder(dims.audio, cfg.hidden, cfg.embed_dim, rng);
    enc.vocab = uniform_init({cfg.vocab, cfg.embed_dim}, 1, rng);
    return enc;
}

namespace {

struct PairedSet {
    Tensor visual_means;  // [N x Dv]
    Tensor audio_means;   // [N x Da]
    std::vector<std::string> prompts;
    std::vector<double> stddev;
};

Tensor stack_means(const std::vector<SampleBundle>& corpus, Modality m, const std::vector<std::size_t>& rows)
{
    const std::size_t d = corpus.front().stream(m).width();
    std::vector<double> out;
    out.reserve(rows.size() * d);
    for (auto i : rows) {
        const auto& seq = corpus[i].stream(m);
        if (seq.width() != d) {
            throw DimensionError("align: inconsistent feature widths across the corpus");
        }
        Tensor mu = mean(seq.frames, 0);
        out.insert(out.end(), mu.data().begin(), mu.data().end());
    }
    return Tensor({rows.size(), d}, std::move(out));
}

PairedSet pair_up(const std::vector<SampleBundle>& corpus, const std::vector<Annotation>& annotations)
{
    if (corpus.empty()) {
        throw ParameterError("align: empty corpus");
    }
    std::unordered_map<std::string, std::size_t> by_id;
    for (std::size_t i = 0; i < annotations.size(); ++i) {
        if (!by_id.emplace(annotations[i].id, i).second) {
            throw ParameterError("align: duplicate annotation id '" + annotations[i].id + "'");
        }
    }
    if (annotations.size() != corpus.size()) {
        throw ParameterError("align: " + std::to_string(corpus.size()) + " samples but " +
                             std::to_string(annotations.size()) + " annotations");
    }
    PairedSet set;
    std::vector<std::size_t> rows(corpus.size());
    std::iota(rows.begin(), rows.end(), 0);
    for (const auto& s : corpus) {
        auto it = by_id.find(s.id);
        if (it == by_id.end()) {
            throw ParameterError("align: sample '" + s.id + "' has no annotation");
        }
        const auto& rec = annotations[it->second].record;
        set.prompts.push_back(render_prompt(rec));
        set.stddev.push_back(rec.va_stddev);
    }
    set.visual_means = stack_means(corpus, Modality::Visual, rows);
    set.audio_means = stack_means(corpus, Modality::Audio, rows);
    return set;
}

Tensor gather_rows(const Tensor& t, const std::vector<std::size_t>& rows)
{
    const std::size_t d = t.cols();
    std::vector<double> out;
    out.reserve(rows.size() * d);
    auto v = t.data();
    for (auto r : rows) {
        out.insert(out.end(), v.begin() + static_cast<std::ptrdiff_t>(r * d),
                   v.begin() + static_cast<std::ptrdiff_t>((r + 1) * d));
    }
    return Tensor({rows.size(), d}, std::move(out));
}

} // namespace

double retrieval_top1(const Tensor& f_text, const Tensor& f_mod)
{
    if (f_text.shape() != f_mod.shape() || f_text.rank() != 2) {
        throw DimensionError("retrieval: shapes differ");
    }
    const std::size_t n = f_text.rows();
    if (n == 0) {
        return 0.0;
    }
    Tensor sim = matmul(f_text.detach(), transpose(f_mod.detach()));
    auto s = sim.data();
    std::size_t hits = 0;
    for (std::size_t i = 0; i < n; ++i) {
        auto row = s.subspan(i * n, n);
        auto best = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
        hits += best == i;
    }
    return static_cast<double>(hits) / static_cast<double>(n);
}

AlignEval evaluate_alignment(const AlignedEncoders& enc, const std::vector<SampleBundle>& corpus,
                             const std::vector<Annotation>& annotations, double tau)
{
    PairedSet set = pair_up(corpus, annotations);
    Tensor text = encode_text_batch(set.prompts, enc.vocab).detach();
    Tensor fv = enc.visual.encode(set.visual_means).detach();
    Tensor fa = enc.audio.encode(set.audio_means).detach();
    auto w = confidence_weights(set.stddev);
    AlignEval out;
    out.loss_visual = infonce_weighted({fv, text, w, tau}).item();
    out.loss_audio = infonce_weighted({fa, text, w, tau}).item();
    out.retrieval_visual = retrieval_top1(text, fv);
    out.retrieval_audio = retrieval_top1(text, fa);
    return out;
}

AlignedEncoders pretrain_align(const std::vector<SampleBundle>& corpus, const std::vector<Annotation>& annotations,
                               const Config& cfg, AlignReport* report)
{
    cfg.validate();
    PairedSet set = pair_up(corpus, annotations);
    AlignedEncoders enc = make_encoders(cfg.corpus.dims, cfg.encoder, cfg.seed);
    if (enc.visual.input_dim() != set.visual_means.cols() || enc.audio.input_dim() != set.audio_means.cols()) {
        throw DimensionError("align: corpus feature widths differ from the configured dims");
    }
    enc.visual.fit_standardizer(set.visual_means);
    enc.audio.fit_standardizer(set.audio_means);
    ParamList params = enc.trainable_parameters();
    set_trainable(params, true);

    const auto& ac = cfg.align;
    ScheduleState sched(ac.eta_max, ac.eta_min, ac.cycle);
    OptimState opt;
    opt.momentum = ac.momentum;
    std::mt19937_64 rng(cfg.seed ^ 0x5a1f7ull);
    const std::size_t n = corpus.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);

    std::vector<double> epoch_loss;
    for (std::size_t epoch = 0; epoch < ac.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double total = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < n; start += ac.batch_size) {
            std::vector<std::size_t> rows(order.begin() + static_cast<std::ptrdiff_t>(start),
                                          order.begin() + static_cast<std::ptrdiff_t>(std::min(n, start + ac.batch_size)));
            std::vector<std::string> prompts;
            std::vector<double> sd;
            for (auto r : rows) {
                prompts.push_back(set.prompts[r]);
                sd.push_back(set.stddev[r]);
            }
            auto w = confidence_weights(sd);

            GradTape tape;
            Tensor loss;
            {
                GradTape::Recording rec(tape);
                Tensor text = encode_text_batch(prompts, enc.vocab);
                Tensor fv = enc.visual.encode(gather_rows(set.visual_means, rows));
                Tensor fa = enc.audio.encode(gather_rows(set.audio_means, rows));
                loss = add(infonce_weighted({fv, text, w, ac.tau}, ac.symmetric),
                           infonce_weighted({fa, text, w, ac.tau}, ac.symmetric));
            }
            if (!std::isfinite(loss.item())) {
                throw NumericError("align: non-finite contrastive loss at epoch " + std::to_string(epoch + 1));
            }
            tape.backward(loss);
            std::vector<Tensor> grads;
            grads.reserve(params.size());
            for (const auto& [name, p] : params) {
                grads.push_back(tape.has_grad(p) ? tape.grad(p) : Tensor::zeros(p.shape()));
            }
            sgd_momentum_step(params, grads, opt, sched.current_eta);
            total += loss.item();
            ++batches;
        }
        epoch_loss.push_back(total / static_cast<double>(batches));
        sched.advance();
    }

    enc.freeze();
    if (report) {
        report->epoch_loss = std::move(epoch_loss);
        AlignEval ev = evaluate_alignment(enc, corpus, annotations, ac.tau);
        report->final_loss_visual = ev.loss_visual;
        report->final_loss_audio = ev.loss_audio;
        report->retrieval_visual = ev.retrieval_visual;
        report->retrieval_audio = ev.retrieval_audio;
    }
    return enc;
}

} // namespace emi
