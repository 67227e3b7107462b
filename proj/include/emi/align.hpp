#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "emi/config.hpp"
#include "emi/corpus.hpp"
#include "emi/layers.hpp"

namespace emi {

/// Input standardization, then two affine maps with tanh between, rows
/// L2-normalized at the output. The standardization is fitted from data and
/// never trained.
struct ToyEncoder {
    Tensor shift;      ///< [1 x in], subtracted
    Tensor inv_scale;  ///< [1 x in], multiplied
    Linear hidden;
    Linear out;

    ToyEncoder() = default;
    ToyEncoder(std::size_t input_dim, std::size_t hidden_dim, std::size_t embed_dim, std::mt19937_64& rng);

    std::size_t input_dim() const { return hidden.in_features(); }
    std::size_t embed_dim() const { return out.out_features(); }
    /// [N x input_dim] -> [N x embed_dim], unit rows.
    Tensor encode(const Tensor& x) const;
    /// Per-feature mean and standard deviation over all rows of x.
    void fit_standardizer(const Tensor& x);
    void collect(ParamList& params, const std::string& prefix) const;
    void collect_trainable(ParamList& params, const std::string& prefix) const;
};

/// Splits on whitespace and the characters "(),:=". Dots and dashes stay
/// inside tokens so "0.52" and "-0.31" survive as single tokens.
std::vector<std::string> tokenize(std::string_view prompt);
/// FNV-1a 64.
std::uint64_t token_hash(std::string_view token);

/// Mean of hashed embedding rows, L2-normalized. Throws ParameterError for an
/// empty prompt.
Tensor encode_text_tokens(const std::string& prompt, const Tensor& vocab_embedding);
/// Row i encodes prompts[i].
Tensor encode_text_batch(const std::vector<std::string>& prompts, const Tensor& vocab_embedding);

struct EmbeddingBatch {
    Tensor f_mod;
    Tensor f_text;
    std::vector<double> weights_w;
    double temperature_tau = 0.07;

    /// Shapes, weight count and sign, tau > 0 and unit rows within 1e-6.
    void validate() const;
};

/// -(1/N) sum_i w_i log softmax_j(f_i . g_j / tau)_i. With symmetric set, the
/// text-to-modality direction is averaged in.
Tensor infonce_weighted(const EmbeddingBatch& batch, bool symmetric = false);

/// 1/(1+sigma) divided by batch_mean_raw, the batch mean of 1/(1+sigma).
double confidence_weight(double va_stddev, double batch_mean_raw);
/// Weights for a whole batch, rescaled to mean 1.
std::vector<double> confidence_weights(std::span<const double> va_stddev);

struct AlignedEncoders {
    ToyEncoder visual;
    ToyEncoder audio;
    Tensor vocab;  ///< [V x d] text embedding table
    bool frozen = false;

    /// Everything a checkpoint needs, standardizers included.
    ParamList parameters() const;
    ParamList trainable_parameters() const;
    void freeze();
    /// Per-frame embeddings of one stream, [T x d].
    Tensor encode_frames(const FeatureSequence& seq) const;
    /// One embedding per clip from the frame mean, [1 x d].
    Tensor encode_clip(const FeatureSequence& seq) const;
};

AlignedEncoders make_encoders(const CorpusDims& dims, const EncoderConfig& cfg, std::uint64_t seed);

struct AlignReport {
    std::vector<double> epoch_loss;
    /// Full-batch weighted loss (visual + audio) after training.
    double final_loss_visual = 0.0;
    double final_loss_audio = 0.0;
    double retrieval_visual = 0.0;
    double retrieval_audio = 0.0;
};

/// Trains the visual-text and audio-text paths jointly and returns frozen
/// encoders. Annotations are matched by id; an id present on one side only
/// throws ParameterError.
AlignedEncoders pretrain_align(const std::vector<SampleBundle>& corpus, const std::vector<Annotation>& annotations,
                               const Config& cfg, AlignReport* report = nullptr);

/// Fraction of text rows i whose most similar modality row is i.
double retrieval_top1(const Tensor& f_text, const Tensor& f_mod);

struct AlignEval {
    double loss_visual = 0.0;
    double loss_audio = 0.0;
    double retrieval_visual = 0.0;
    double retrieval_audio = 0.0;
};

/// Full-batch evaluation over the paired corpus.
AlignEval evaluate_alignment(const AlignedEncoders& enc, const std::vector<SampleBundle>& corpus,
                             const std::vector<Annotation>& annotations, double tau);

} // namespace emi
