#pragma once

// The detection transformer for sound events: a strided convolutional
// backbone, a 1x1 channel projection, time-only sinusoidal positional
// encoding, a post-norm transformer encoder/decoder with N event queries plus
// one audio query, and the boundary / class / tag heads.

#include "sedt/autograd.hpp"
#include "sedt/core.hpp"
#include "sedt/prediction.hpp"

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace sedt {

struct BackboneStage {
    int channels = 32;
    int stride_time = 2;
    int stride_freq = 2;
};

struct ModelConfig {
    int n_mels = 64;
    std::vector<BackboneStage> backbone = {{32, 2, 2}, {64, 2, 2}, {128, 2, 2}, {256, 2, 2}};
    int d_model = 128;
    int n_heads = 8;
    int ffn_width = 256;
    int encoder_layers = 3;
    int decoder_layers = 3;
    int num_queries = 10;
    int num_classes = 5;
    double dropout = 0.1;
    int boundary_head_layers = 1;  // 1 = affine + sigmoid, 3 = MLP

    void validate() const;
    int time_stride() const;
    int freq_stride() const;
};

/// Sinusoidal encoding of the time index only; identical across frequency.
/// Rows are tokens t*F + f, columns are the d channels.
Matrix positional_encoding(int time_steps, int freq_bins, int d_model);

/// Kernel size used for a given stride; together with padding (k-1)/2 it maps a length L to ceil(L / stride).
int backbone_kernel(int stride);

/// Downsamples a time padding mask (1 = padding) by a stride.
std::vector<char> downsample_mask(std::span<const char> mask, int stride);

struct RunOptions {
    bool track_grad = true;
    bool training = false;       // enables dropout
    std::mt19937_64* rng = nullptr;
};

/// Intermediate and final nodes of one clip's forward pass.
struct ForwardGraph {
    ag::Var backbone;     // C x (T*F)
    ag::Var projected;    // d x (T*F)
    ag::Var memory;       // (T*F) x d
    int time_steps = 0;
    int freq_bins = 0;
    std::vector<char> token_mask;              // T*F, 1 = padding
    std::vector<ag::Var> decoder_states;       // M of (N+1) x d, after the shared output norm
    std::vector<ag::Var> class_probs;          // M of N x (K+1)
    std::vector<ag::Var> boundaries;           // M of N x 2
    ag::Var tag_probs;                         // 1 x K

    PredictionSet prediction() const;
};

class SedtModel {
public:
    explicit SedtModel(ModelConfig cfg, std::uint64_t seed = 0);

    const ModelConfig& config() const { return cfg_; }
    std::vector<ag::Parameter>& parameters() { return params_; }
    const std::vector<ag::Parameter>& parameters() const { return params_; }
    std::size_t parameter_count() const;
    ag::Parameter& parameter(const std::string& name);

    void zero_grad();

    /// Full forward pass on a T0 x F0 spectrogram with a T0 padding mask (1 = padding; empty = none).
    ForwardGraph forward(ag::Tape& tape, const Matrix& spec, std::span<const char> pad_mask,
                         const RunOptions& opts) const;

    /// Inference without gradient tracking or dropout.
    PredictionSet predict(const Matrix& spec, std::span<const char> pad_mask = {}) const;

    // ---- stages, exposed for testing --------------------------------------
    ag::Var backbone_forward(ag::Tape& tape, const Matrix& spec, std::span<const char> pad_mask,
                             std::vector<char>* out_mask, int* out_t, int* out_f, const RunOptions& opts) const;
    ag::Var channel_projection(ag::Tape& tape, const ag::Var& fmap, const RunOptions& opts) const;
    ag::Var encoder_forward(ag::Tape& tape, const ag::Var& tokens, const Matrix& pos, std::span<const char> token_mask,
                            const RunOptions& opts) const;
    std::vector<ag::Var> decoder_forward(ag::Tape& tape, const ag::Var& memory, const Matrix& pos,
                                         std::span<const char> token_mask, const RunOptions& opts) const;
    /// Event-slot heads of one decoder state: class probabilities and boundaries.
    std::pair<ag::Var, ag::Var> event_heads(ag::Tape& tape, const ag::Var& state, const RunOptions& opts) const;
    ag::Var tag_head(ag::Tape& tape, const ag::Var& state, const RunOptions& opts) const;

    /// Multi-head attention with optional attention-weight capture (one matrix per head).
    ag::Var attention(ag::Tape& tape, int block, const ag::Var& query, const ag::Var& key, const ag::Var& value,
                      std::span<const char> key_mask, const RunOptions& opts,
                      std::vector<Matrix>* weights = nullptr) const;

    // ---- serialization ----------------------------------------------------
    void save_parameters(std::ostream& os) const;
    void load_parameters(std::istream& is);

private:
    struct Linear {
        int weight = -1;  // in x out
        int bias = -1;    // 1 x out
    };
    struct Norm {
        int gain = -1;
        int bias = -1;
    };
    struct Attention {
        Linear q, k, v, o;
    };
    struct EncoderBlock {
        Attention self_attn;
        Norm norm1, norm2;
        Linear ffn1, ffn2;
    };
    struct DecoderBlock {
        Attention self_attn, cross_attn;
        Norm norm1, norm2, norm3;
        Linear ffn1, ffn2;
    };
    struct Conv {
        int weight = -1;
        int bias = -1;
    };

    int add_param(const std::string& name, Matrix value);
    Linear make_linear(const std::string& name, int in, int out, std::mt19937_64& rng);
    Norm make_norm(const std::string& name, int width);
    Attention make_attention(const std::string& name, std::mt19937_64& rng);

    ag::Var param(ag::Tape& tape, int index, const RunOptions& opts) const;
    ag::Var linear(ag::Tape& tape, const Linear& l, const ag::Var& x, const RunOptions& opts) const;
    ag::Var norm(ag::Tape& tape, const Norm& n, const ag::Var& x, const RunOptions& opts) const;
    ag::Var drop(const ag::Var& x, const RunOptions& opts) const;

    ModelConfig cfg_;
    std::vector<ag::Parameter> params_;
    std::vector<Conv> stages_;
    Conv projection_;
    std::vector<EncoderBlock> encoder_;
    std::vector<DecoderBlock> decoder_;
    std::vector<Attention> attention_index_;  // all attention blocks, encoder first then decoder (self, cross)
    Norm decoder_norm_;
    int query_embed_ = -1;                    // (N+1) x d, last row is the audio query
    Linear class_head_;
    std::vector<Linear> boundary_head_;
    Linear tag_head_;
};

/// Adds a custom scalar node whose gradient w.r.t. the head outputs is `grad`.
ag::Var attach_loss(ag::Tape& tape, const ForwardGraph& graph, double value, const PredictionGrad& grad);

}  // namespace sedt
