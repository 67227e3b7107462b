#include "emi/fusion.hpp"

#include <cmath>

#include "emi/ops.hpp"

namespace emi {

namespace {

// Each module draws from its own stream so toggling one part of the model
// leaves the initialization of the others untouched.
std::mt19937_64 module_rng(std::uint64_t seed, std::string_view name)
{
    std::uint64_t h = 14695981039346656037ull;
    for (unsigned char c : name) {
        h ^= c;
        h *= 1099511628211ull;
    }
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(h), static_cast<std::uint32_t>(h >> 32)};
    return std::mt19937_64(seq);
}

Tensor trainable(Tensor t) { return t.set_requires_grad(true); }

} // namespace

// TCN ----------------------------------------------------------------------

TcnStack::TcnStack(std::size_t input_dim, std::size_t channels, std::size_t layers, std::size_t kernel_width,
                   std::mt19937_64& rng)
    : projection(input_dim, channels, rng)
{
    if (layers == 0 || kernel_width == 0 || channels == 0) {
        throw ParameterError("tcn: layers, kernel width and channels must be positive");
    }
    for (std::size_t k = 0; k < layers; ++k) {
        kernels.push_back(uniform_init({kernel_width, channels, channels}, kernel_width * channels, rng));
        biases.push_back(uniform_init({1, channels}, kernel_width * channels, rng));
    }
}

std::vector<std::size_t> TcnStack::dilations() const
{
    std::vector<std::size_t> d;
    for (std::size_t k = 0; k < kernels.size(); ++k) {
        d.push_back(std::size_t{1} << k);
    }
    return d;
}

std::size_t tcn_receptive_field(std::size_t kernel_width, const std::vector<std::size_t>& dilations)
{
    std::size_t total = 0;
    for (auto d : dilations) {
        total += d;
    }
    return 1 + (kernel_width - 1) * total;
}

std::size_t TcnStack::receptive_field() const { return tcn_receptive_field(kernel_width(), dilations()); }

void TcnStack::collect(ParamList& out, const std::string& prefix) const
{
    projection.collect(out, prefix + ".proj");
    for (std::size_t k = 0; k < kernels.size(); ++k) {
        out.emplace_back(prefix + ".conv" + std::to_string(k) + ".kernel", kernels[k]);
        out.emplace_back(prefix + ".conv" + std::to_string(k) + ".bias", biases[k]);
    }
}

Tensor tcn_forward(const Tensor& x, const TcnStack& stack)
{
    if (x.rank() != 2 || x.rows() == 0) {
        throw DimensionError("tcn: expected a non-empty [T x D] sequence, got " + shape_str(x.shape()));
    }
    Tensor h = stack.projection.forward(x);
    const auto dil = stack.dilations();
    for (std::size_t k = 0; k < stack.layers(); ++k) {
        h = add(h, relu(add(dilated_conv1d(h, stack.kernels[k], dil[k]), stack.biases[k])));
    }
    return h;
}

// LSTM ---------------------------------------------------------------------

LstmCell::LstmCell(std::size_t input_dim, std::size_t hidden_dim, std::mt19937_64& rng)
    : w_x(uniform_init({input_dim, 4 * hidden_dim}, hidden_dim, rng)),
      w_h(uniform_init({hidden_dim, 4 * hidden_dim}, hidden_dim, rng)),
      bias(uniform_init({1, 4 * hidden_dim}, hidden_dim, rng))
{
    auto b = bias.mutable_data();
    for (std::size_t k = hidden_dim; k < 2 * hidden_dim; ++k) {
        b[k] = 1.0;
    }
}

std::pair<Tensor, Tensor> LstmCell::step(const Tensor& x_term, const Tensor& h, const Tensor& c) const
{
    const std::size_t H = hidden();
    Tensor z = add(x_term, matmul(h, w_h));
    Tensor i = sigmoid(slice(z, 1, 0, H));
    Tensor f = sigmoid(slice(z, 1, H, 2 * H));
    Tensor g = tanh(slice(z, 1, 2 * H, 3 * H));
    Tensor o = sigmoid(slice(z, 1, 3 * H, 4 * H));
    Tensor c_next = add(mul(f, c), mul(i, g));
    Tensor h_next = mul(o, tanh(c_next));
    return {h_next, c_next};
}

Tensor LstmCell::run(const Tensor& x, bool reverse) const
{
    if (x.rank() != 2 || x.rows() == 0) {
        throw DimensionError("lstm: expected a non-empty [T x D] sequence, got " + shape_str(x.shape()));
    }
    return lstm_recurrence(add(matmul(x, w_x), bias), w_h, reverse);
}

void LstmCell::collect(ParamList& out, const std::string& prefix) const
{
    out.emplace_back(prefix + ".w_x", w_x);
    out.emplace_back(prefix + ".w_h", w_h);
    out.emplace_back(prefix + ".bias", bias);
}

BiLstmParams::BiLstmParams(std::size_t input_dim, std::size_t hidden_dim, std::mt19937_64& rng)
    : forward(input_dim, hidden_dim, rng), backward(input_dim, hidden_dim, rng)
{
}

void BiLstmParams::collect(ParamList& out, const std::string& prefix) const
{
    forward.collect(out, prefix + ".fwd");
    backward.collect(out, prefix + ".bwd");
}

Tensor bilstm_forward(const Tensor& x, const BiLstmParams& params)
{
    return concat({params.forward.run(x, false), params.backward.run(x, true)}, 1);
}

// Segment pooling and gating ----------------------------------------------------

SegmentPlan make_segment_plan(std::size_t frames, std::size_t segments)
{
    if (segments == 0) {
        throw ParameterError("segment plan: M must be at least 1");
    }
    if (segments > frames) {
        throw ParameterError("segment plan: M=" + std::to_string(segments) + " exceeds T=" + std::to_string(frames));
    }
    SegmentPlan plan;
    plan.frames = frames;
    const std::size_t base = frames / segments;
    const std::size_t extra = frames % segments;
    std::size_t start = 0;
    for (std::size_t m = 0; m < segments; ++m) {
        const std::size_t len = base + (m < extra ? 1 : 0);
        plan.ranges.emplace_back(start, start + len);
        start += len;
    }
    return plan;
}

SegmentPooled segment_pool(const Tensor& h, const SegmentPlan& plan)
{
    const std::size_t T = h.rows();
    if (T != plan.frames) {
        throw DimensionError("segment_pool: plan covers " + std::to_string(plan.frames) + " frames, input has " +
                             std::to_string(T));
    }
    const std::size_t M = plan.segments();
    std::vector<double> pool(M * T, 0.0), spread(T * M, 0.0);
    for (std::size_t m = 0; m < M; ++m) {
        const auto [b, e] = plan.ranges[m];
        for (std::size_t t = b; t < e; ++t) {
            pool[m * T + t] = 1.0 / static_cast<double>(e - b);
            spread[t * M + m] = 1.0;
        }
    }
    SegmentPooled out;
    out.means = matmul(Tensor({M, T}, std::move(pool)), h);
    out.upsampled = matmul(Tensor({T, M}, std::move(spread)), out.means);
    return out;
}

GatedAttention::GatedAttention(std::size_t width, std::mt19937_64& rng) : w_g(uniform_init({2 * width, width}, 2 * width, rng))
{
}

void GatedAttention::collect(ParamList& out, const std::string& prefix) const { out.emplace_back(prefix + ".w_g", w_g); }

Tensor frame_differences(const Tensor& h)
{
    const std::size_t T = h.rows();
    Tensor first = Tensor::zeros({1, h.cols()});
    if (T == 1) {
        return first;
    }
    return concat({first, sub(slice(h, 0, 1, T), slice(h, 0, 0, T - 1))}, 0);
}

Tensor gated_attention(const Tensor& h, const GatedAttention& gate)
{
    if (gate.w_g.rows() != 2 * h.cols()) {
        throw DimensionError("gated_attention: gate " + shape_str(gate.w_g.shape()) + " for features " +
                             shape_str(h.shape()));
    }
    Tensor alpha = sigmoid(matmul(concat({h, frame_differences(h)}, 1), gate.w_g));
    return mul(alpha, h);
}

// Quality weights --------------------------------------------------------------------

std::size_t QualityWeights::index(Modality m) const
{
    for (std::size_t i = 0; i < order.size(); ++i) {
        if (order[i] == m) {
            return i;
        }
    }
    throw ParameterError("quality weights: modality " + std::string(modality_name(m)) + " is not enabled");
}

Tensor QualityWeights::column(Modality m) const
{
    const std::size_t i = index(m);
    return slice(beta, 1, i, i + 1);
}

QualityWeights quality_weights(const std::vector<std::pair<Modality, Tensor>>& scores, std::size_t frames)
{
    if (scores.empty()) {
        throw ParameterError("quality weights: no modality scores");
    }
    QualityWeights q;
    std::vector<Tensor> cols;
    for (const auto& [m, s] : scores) {
        q.order.push_back(m);
        q.scores.push_back(s);
        if (s.numel() == 1 && frames != 1) {
            cols.push_back(add(Tensor::zeros({frames, 1}), s));
        } else if (s.rows() == frames && s.cols() == 1) {
            cols.push_back(s);
        } else {
            throw DimensionError("quality weights: score " + shape_str(s.shape()) + " for " + std::to_string(frames) +
                                 " frames");
        }
    }
    q.beta = softmax_rows(cols.size() == 1 ? cols[0] : concat(cols, 1));
    return q;
}

QualityWeights uniform_weights(const std::vector<Modality>& order, std::size_t frames)
{
    if (order.empty()) {
        throw ParameterError("quality weights: no modalities");
    }
    QualityWeights q;
    q.order = order;
    q.beta = Tensor::full({frames, order.size()}, 1.0 / static_cast<double>(order.size()));
    return q;
}

// Transformer -----------------------------------------------------------------------------

Tensor sinusoidal_positions(std::size_t frames, std::size_t width)
{
    std::vector<double> pe(frames * width);
    for (std::size_t t = 0; t < frames; ++t) {
        for (std::size_t k = 0; k < width; ++k) {
            const double i2 = static_cast<double>(k - k % 2);
            const double angle = static_cast<double>(t) / std::pow(10000.0, i2 / static_cast<double>(width));
            pe[t * width + k] = k % 2 == 0 ? std::sin(angle) : std::cos(angle);
        }
    }
    return Tensor({frames, width}, std::move(pe));
}

TransformerLayer::TransformerLayer(std::size_t width, std::size_t heads_, std::size_t ff_hidden, std::mt19937_64& rng)
    : wq(uniform_init({width, width}, width, rng)),
      wk(uniform_init({width, width}, width, rng)),
      wv(uniform_init({width, width}, width, rng)),
      wo(width, width, rng),
      ln1_gamma(trainable(Tensor::ones({1, width}))),
      ln1_beta(trainable(Tensor::zeros({1, width}))),
      ff1(width, ff_hidden, rng),
      ff2(ff_hidden, width, rng),
      ln2_gamma(trainable(Tensor::ones({1, width}))),
      ln2_beta(trainable(Tensor::zeros({1, width}))),
      heads(heads_)
{
    if (heads == 0 || width % heads != 0) {
        throw ParameterError("transformer: " + std::to_string(heads) + " heads do not divide width " +
                             std::to_string(width));
    }
}

Tensor TransformerLayer::attention(const Tensor& x) const
{
    const std::size_t D = width();
    const std::size_t dh = D / heads;
    Tensor q = matmul(x, wq), k = matmul(x, wk), v = matmul(x, wv);
    const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<Tensor> outs;
    for (std::size_t h = 0; h < heads; ++h) {
        Tensor qh = heads == 1 ? q : slice(q, 1, h * dh, (h + 1) * dh);
        Tensor kh = heads == 1 ? k : slice(k, 1, h * dh, (h + 1) * dh);
        Tensor vh = heads == 1 ? v : slice(v, 1, h * dh, (h + 1) * dh);
        Tensor a = softmax_rows(scale(matmul(qh, transpose(kh)), inv));
        outs.push_back(matmul(a, vh));
    }
    return wo.forward(heads == 1 ? outs[0] : concat(outs, 1));
}

Tensor TransformerLayer::forward(const Tensor& x) const
{
    Tensor x1 = layer_norm_rows(add(x, attention(x)), ln1_gamma, ln1_beta);
    Tensor f = ff2.forward(relu(ff1.forward(x1)));
    return layer_norm_rows(add(x1, f), ln2_gamma, ln2_beta);
}

void TransformerLayer::collect(ParamList& out, const std::string& prefix) const
{
    out.emplace_back(prefix + ".wq", wq);
    out.emplace_back(prefix + ".wk", wk);
    out.emplace_back(prefix + ".wv", wv);
    wo.collect(out, prefix + ".wo");
    out.emplace_back(prefix + ".ln1.gamma", ln1_gamma);
    out.emplace_back(prefix + ".ln1.beta", ln1_beta);
    ff1.collect(out, prefix + ".ff1");
    ff2.collect(out, prefix + ".ff2");
    out.emplace_back(prefix + ".ln2.gamma", ln2_gamma);
    out.emplace_back(prefix + ".ln2.beta", ln2_beta);
}

// Model -------------------------------------------------------------------------------------

std::size_t ModelInputs::frames() const
{
    if (visual.defined()) {
        return visual.rows();
    }
    if (audio.defined()) {
        return audio.rows();
    }
    return 1;
}

FusionModel::FusionModel(const FusionConfig& cfg, const FusionInputDims& dims, std::uint64_t seed)
    : cfg_(cfg), dims_(dims)
{
    if (cfg.modalities.count() == 0) {
        throw ParameterError("fusion: at least one modality must be enabled");
    }
    const std::size_t d = cfg.d_shared;
    if (cfg.modalities.visual) {
        auto rng = module_rng(seed, "tcn");
        tcn = TcnStack(dims.visual, cfg.tcn_channels, cfg.tcn_layers, cfg.tcn_kernel, rng);
        auto mrng = module_rng(seed, "map.visual");
        map_visual = Mlp(cfg.tcn_channels, cfg.map_hidden, d, mrng);
        auto srng = module_rng(seed, "quality.visual");
        score_visual = Mlp(d, cfg.quality_hidden, 1, srng);
    }
    if (cfg.modalities.audio) {
        auto rng = module_rng(seed, "lstm");
        lstm = BiLstmParams(dims.audio, cfg.lstm_hidden, rng);
        auto grng = module_rng(seed, "gate");
        gate = GatedAttention(2 * cfg.lstm_hidden, grng);
        auto mrng = module_rng(seed, "map.audio");
        map_audio = Mlp(2 * cfg.lstm_hidden, cfg.map_hidden, d, mrng);
        auto srng = module_rng(seed, "quality.audio");
        score_audio = Mlp(d, cfg.quality_hidden, 1, srng);
    }
    if (cfg.modalities.text) {
        auto mrng = module_rng(seed, "map.text");
        map_text = Mlp(dims.text, cfg.map_hidden, d, mrng);
        auto srng = module_rng(seed, "quality.text");
        score_text = Mlp(d, cfg.quality_hidden, 1, srng);
    }
    const std::size_t width = model_width();
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        auto rng = module_rng(seed, "encoder." + std::to_string(l));
        encoder.emplace_back(width, cfg.heads, cfg.ff_hidden, rng);
    }
    auto hrng = module_rng(seed, "head");
    head = Linear(width, kNumEmotions, hrng);
}

std::vector<Modality> FusionModel::enabled() const
{
    std::vector<Modality> out;
    for (Modality m : {Modality::Visual, Modality::Audio, Modality::Text}) {
        if (cfg_.modalities.has(m)) {
            out.push_back(m);
        }
    }
    return out;
}

std::size_t FusionModel::model_width() const
{
    return cfg_.mode == FusionMode::Sum ? cfg_.d_shared : cfg_.d_shared * cfg_.modalities.count();
}

FusionOutput FusionModel::forward(const ModelInputs& in) const
{
    const std::size_t T = in.frames();
    std::vector<std::pair<Modality, Tensor>> mapped;
    if (cfg_.modalities.visual) {
        Tensor h = tcn_forward(in.visual, tcn);
        if (cfg_.tfe) {
            h = segment_pool(h, make_segment_plan(T, cfg_.segments)).upsampled;
        }
        mapped.emplace_back(Modality::Visual, map_visual.forward(h));
    }
    if (cfg_.modalities.audio) {
        if (in.audio.rows() != T) {
            throw DimensionError("fusion: audio has " + std::to_string(in.audio.rows()) + " frames, expected " +
                                 std::to_string(T));
        }
        Tensor h = bilstm_forward(in.audio, lstm);
        if (cfg_.tfe) {
            h = gated_attention(h, gate);
        }
        mapped.emplace_back(Modality::Audio, map_audio.forward(h));
    }
    if (cfg_.modalities.text) {
        if (in.text.rank() != 2 || in.text.rows() != 1) {
            throw DimensionError("fusion: text must be a single row, got " + shape_str(in.text.shape()));
        }
        mapped.emplace_back(Modality::Text, map_text.forward(in.text));
    }

    FusionOutput out;
    if (cfg_.qam) {
        std::vector<std::pair<Modality, Tensor>> scores;
        for (const auto& [m, h] : mapped) {
            const Mlp& scorer = m == Modality::Visual ? score_visual : m == Modality::Audio ? score_audio : score_text;
            scores.emplace_back(m, scorer.forward(h));
        }
        out.quality = quality_weights(scores, T);
    } else {
        out.quality = uniform_weights(enabled(), T);
    }

    std::vector<Tensor> weighted;
    for (std::size_t i = 0; i < mapped.size(); ++i) {
        const auto& [m, h] = mapped[i];
        Tensor beta = mapped.size() == 1 ? out.quality.beta : slice(out.quality.beta, 1, i, i + 1);
        // [T x 1] times [1 x d] spreads the text row over time.
        weighted.push_back(h.rows() == 1 && T != 1 ? matmul(beta, h) : mul(h, beta));
    }
    Tensor fused = weighted[0];
    if (cfg_.mode == FusionMode::Sum) {
        for (std::size_t i = 1; i < weighted.size(); ++i) {
            fused = add(fused, weighted[i]);
        }
    } else if (weighted.size() > 1) {
        fused = concat(weighted, 1);
    }
    out.fused = fused;

    Tensor x = add(fused, sinusoidal_positions(T, model_width()));
    for (const auto& layer : encoder) {
        x = layer.forward(x);
    }
    out.prediction = sigmoid(head.forward(mean(x, 0)));
    return out;
}

ParamList FusionModel::parameters() const
{
    ParamList p;
    if (cfg_.modalities.visual) {
        tcn.collect(p, "tcn");
    }
    if (cfg_.modalities.audio) {
        lstm.collect(p, "lstm");
        if (cfg_.tfe) {
            gate.collect(p, "gate");
        }
    }
    if (cfg_.modalities.visual) {
        map_visual.collect(p, "map.visual");
    }
    if (cfg_.modalities.audio) {
        map_audio.collect(p, "map.audio");
    }
    if (cfg_.modalities.text) {
        map_text.collect(p, "map.text");
    }
    if (cfg_.qam) {
        if (cfg_.modalities.visual) {
            score_visual.collect(p, "quality.visual");
        }
        if (cfg_.modalities.audio) {
            score_audio.collect(p, "quality.audio");
        }
        if (cfg_.modalities.text) {
            score_text.collect(p, "quality.text");
        }
    }
    for (std::size_t l = 0; l < encoder.size(); ++l) {
        encoder[l].collect(p, "encoder." + std::to_string(l));
    }
    head.collect(p, "head");
    return p;
}

} // namespace emi
