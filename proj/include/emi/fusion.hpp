#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "emi/config.hpp"
#include "emi/layers.hpp"

namespace emi {

// Temporal convolution --------------------------------------------------------

/// Input projection to C channels, then K layers of
/// h <- h + relu(causal_conv(h, dilation 2^(k-1)) + b).
struct TcnStack {
    Linear projection;
    std::vector<Tensor> kernels;  ///< [k_w x C x C] each
    std::vector<Tensor> biases;   ///< [1 x C] each

    TcnStack() = default;
    TcnStack(std::size_t input_dim, std::size_t channels, std::size_t layers, std::size_t kernel_width,
             std::mt19937_64& rng);

    std::size_t layers() const { return kernels.size(); }
    std::size_t kernel_width() const { return kernels.empty() ? 0 : kernels.front().dim(0); }
    std::vector<std::size_t> dilations() const;
    std::size_t receptive_field() const;
    void collect(ParamList& out, const std::string& prefix) const;
};

/// 1 + (k_w - 1) * sum(d_k).
std::size_t tcn_receptive_field(std::size_t kernel_width, const std::vector<std::size_t>& dilations);
Tensor tcn_forward(const Tensor& x, const TcnStack& stack);

// Recurrent audio path ----------------------------------------------------------

/// Gate blocks along the 4H axis are ordered input, forget, cell, output.
struct LstmCell {
    Tensor w_x;   ///< [D x 4H]
    Tensor w_h;   ///< [H x 4H]
    Tensor bias;  ///< [1 x 4H], forget block initialized to 1

    LstmCell() = default;
    LstmCell(std::size_t input_dim, std::size_t hidden, std::mt19937_64& rng);

    std::size_t hidden() const { return w_h.rows(); }
    /// One step from (h, c) given the precomputed input term x_t W_x + b.
    std::pair<Tensor, Tensor> step(const Tensor& x_term, const Tensor& h, const Tensor& c) const;
    /// Runs over rows of x in order, returning [T x H].
    Tensor run(const Tensor& x, bool reverse) const;
    void collect(ParamList& out, const std::string& prefix) const;
};

struct BiLstmParams {
    LstmCell forward;
    LstmCell backward;

    BiLstmParams() = default;
    BiLstmParams(std::size_t input_dim, std::size_t hidden, std::mt19937_64& rng);

    std::size_t hidden() const { return forward.hidden(); }
    void collect(ParamList& out, const std::string& prefix) const;
};

/// [T x D] -> [T x 2H]; row t is forward_t followed by backward_t.
Tensor bilstm_forward(const Tensor& x, const BiLstmParams& params);

// Temporal feature enhancement ------------------------------------------------------

/// M contiguous half-open ranges covering [0, T); the first T mod M are one longer.
struct SegmentPlan {
    std::size_t frames = 0;
    std::vector<std::pair<std::size_t, std::size_t>> ranges;

    std::size_t segments() const { return ranges.size(); }
};

/// Throws ParameterError when M is 0 or exceeds T.
SegmentPlan make_segment_plan(std::size_t frames, std::size_t segments);

struct SegmentPooled {
    Tensor means;      ///< [M x C]
    Tensor upsampled;  ///< [T x C], each segment mean repeated over its own frames
};

SegmentPooled segment_pool(const Tensor& h, const SegmentPlan& plan);

/// alpha_t = sigmoid([h_t, h_t - h_{t-1}] W_g), output alpha_t * h_t, with the
/// difference at t = 0 taken as zero.
struct GatedAttention {
    Tensor w_g;  ///< [2W x W]

    GatedAttention() = default;
    GatedAttention(std::size_t width, std::mt19937_64& rng);
    void collect(ParamList& out, const std::string& prefix) const;
};

/// Adjacent-frame differences, first row zero.
Tensor frame_differences(const Tensor& h);
Tensor gated_attention(const Tensor& h, const GatedAttention& gate);

// Quality-aware fusion -------------------------------------------------------------

/// Per-timestep weights over the enabled modalities, [T x k] with rows on the
/// simplex. Column order follows visual, audio, text.
struct QualityWeights {
    std::vector<Modality> order;
    Tensor beta;
    /// Raw scores, one [T x 1] (text: [1 x 1]) per enabled modality; empty when QAM is off.
    std::vector<Tensor> scores;

    /// Column of beta for modality m, [T x 1].
    Tensor column(Modality m) const;
    std::size_t index(Modality m) const;
};

/// Softmax over per-modality scores. Text scores are [1 x 1] and held constant over t.
QualityWeights quality_weights(const std::vector<std::pair<Modality, Tensor>>& scores, std::size_t frames);
/// Equal weights 1/k.
QualityWeights uniform_weights(const std::vector<Modality>& order, std::size_t frames);

// Transformer head --------------------------------------------------------------------

/// PE[t, 2i] = sin(t / 10000^(2i/D)), PE[t, 2i+1] = cos(t / 10000^(2i/D)).
Tensor sinusoidal_positions(std::size_t frames, std::size_t width);

/// Post-norm encoder layer: X <- LN(X + MHA(X)); X <- LN(X + FFN(X)).
struct TransformerLayer {
    Tensor wq, wk, wv;  ///< [D x D], no bias
    Linear wo;
    Tensor ln1_gamma, ln1_beta;
    Linear ff1, ff2;
    Tensor ln2_gamma, ln2_beta;
    std::size_t heads = 1;

    TransformerLayer() = default;
    TransformerLayer(std::size_t width, std::size_t heads, std::size_t ff_hidden, std::mt19937_64& rng);

    std::size_t width() const { return wq.rows(); }
    Tensor attention(const Tensor& x) const;
    Tensor forward(const Tensor& x) const;
    void collect(ParamList& out, const std::string& prefix) const;
};

// Full model ----------------------------------------------------------------------------

/// Per-sample inputs: frame embeddings for visual and audio, one text vector.
struct ModelInputs {
    Tensor visual;  ///< [T x d_v]
    Tensor audio;   ///< [T x d_a]
    Tensor text;    ///< [1 x d_s]

    std::size_t frames() const;
};

struct FusionOutput {
    Tensor fused;       ///< [T x D] Transformer input
    Tensor prediction;  ///< [1 x 6], sigmoid outputs
    QualityWeights quality;
};

struct FusionInputDims {
    std::size_t visual = 32;
    std::size_t audio = 32;
    std::size_t text = 16;
};

class FusionModel {
public:
    FusionModel() = default;
    FusionModel(const FusionConfig& cfg, const FusionInputDims& dims, std::uint64_t seed);

    const FusionConfig& config() const { return cfg_; }
    const FusionInputDims& input_dims() const { return dims_; }
    std::vector<Modality> enabled() const;
    std::size_t model_width() const;

    FusionOutput forward(const ModelInputs& in) const;
    /// Parameters the configuration actually uses, in a fixed order.
    ParamList parameters() const;

    TcnStack tcn;
    BiLstmParams lstm;
    GatedAttention gate;
    Mlp map_visual, map_audio, map_text;
    Mlp score_visual, score_audio, score_text;
    std::vector<TransformerLayer> encoder;
    Linear head;

private:
    FusionConfig cfg_;
    FusionInputDims dims_;
};

} // namespace emi
