// SPDX-License-Identifier: Apache-2.0
//
// Toy teacher/student architectures: a caption encoder, a multi-codebook
// autoregressive transformer, a convolutional codec with residual vector
// quantization, and multi-scale waveform discriminators.
#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "kdforge/nn.hpp"
#include "kdforge/rng.hpp"
#include "kdforge/tensor.hpp"

namespace kdforge {

// Integer codes laid out [batch, codebooks, time], each in [0, cardinality).
struct TokenBatch {
    std::size_t batch = 0;
    std::size_t codebooks = 0;
    std::size_t time = 0;
    std::size_t cardinality = 0;
    std::vector<std::size_t> codes;

    TokenBatch() = default;
    TokenBatch(std::size_t batch, std::size_t codebooks, std::size_t time, std::size_t cardinality);

    std::size_t& at(std::size_t b, std::size_t k, std::size_t t) { return codes[(b * codebooks + k) * time + t]; }
    std::size_t at(std::size_t b, std::size_t k, std::size_t t) const { return codes[(b * codebooks + k) * time + t]; }
    Shape shape() const { return {batch, codebooks, time}; }
    // Throws ShapeError on a size mismatch and RangeError on an out-of-range code.
    void validate() const;
};

// Caption token ids laid out [batch, length]; length may be zero.
struct CaptionBatch {
    std::size_t batch = 0;
    std::size_t length = 0;
    std::vector<std::size_t> tokens;
};

// Per-block outputs [B, T, dim], one entry per transformer block.
using HiddenTrace = std::vector<Tensor>;

// ---------------------------------------------------------------------------
// Caption encoder

struct ConditionerConfig {
    std::size_t vocab = 16;
    std::size_t dim = 32;
    std::size_t layers = 4;
    std::size_t heads = 4;
    std::size_t ffn_mult = 2;
    std::size_t max_len = 16;

    void validate() const;
};

struct EncoderLayer {
    LayerNorm attn_norm;
    MultiHeadAttention attn;
    LayerNorm ffn_norm;
    FeedForward ffn;

    Tensor operator()(const Tensor& h) const;
    void collect(const std::string& prefix, NamedTensors& out) const;
    EncoderLayer clone() const;
};

class Conditioner {
public:
    Conditioner() = default;
    Conditioner(const ConditionerConfig& cfg, Rng& rng);

    // [B, length, dim]. `trace`, when given, receives every layer output.
    Tensor encode(const CaptionBatch& captions, HiddenTrace* trace = nullptr) const;
    // Removes the last `n` layers; the remaining weights are untouched.
    void drop_layers(std::size_t n);

    std::size_t layer_count() const { return layers_.size(); }
    const ConditionerConfig& config() const { return cfg_; }
    NamedTensors named_parameters() const;
    Conditioner clone() const;

private:
    ConditionerConfig cfg_;
    Tensor token_embedding_;  // [vocab, dim]
    Tensor positional_;       // [max_len, dim]
    std::vector<EncoderLayer> layers_;
    LayerNorm final_norm_;
};

// ---------------------------------------------------------------------------
// Multi-codebook language model

struct LmConfig {
    std::size_t layers = 4;
    std::size_t heads = 4;
    std::size_t dim = 32;
    std::size_t codebooks = 4;
    std::size_t cardinality = 64;
    std::size_t max_time = 32;
    std::size_t cond_dim = 32;
    std::size_t ffn_mult = 4;

    void validate() const;
    // Exact trainable parameter count of a LanguageModel with this config.
    std::size_t parameter_count() const;

    // Full-scale geometries (layers / heads / width).
    static LmConfig full_scale_teacher();
    static LmConfig full_scale_v1();
    static LmConfig full_scale_v2();
    // Desk-scale counterparts used by tests and the acceptance run.
    static LmConfig desk_teacher();
    static LmConfig desk_v1();
    static LmConfig desk_v2();
};

struct DecoderBlock {
    LayerNorm self_norm;
    MultiHeadAttention self_attn;
    LayerNorm cross_norm;
    MultiHeadAttention cross_attn;
    Tensor null_context;  // [dim], used when the caption is empty
    LayerNorm ffn_norm;
    FeedForward ffn;

    // h [B, T, dim], cond [B, S, cond_dim].
    Tensor operator()(const Tensor& h, const Tensor& cond) const;
    void collect(const std::string& prefix, NamedTensors& out) const;
    DecoderBlock clone() const;
};

struct LmOutput {
    Tensor logits;  // [B, K, T, C]
    HiddenTrace trace;
};

class LanguageModel {
public:
    LanguageModel() = default;
    LanguageModel(const LmConfig& cfg, Rng& rng);

    // Logits at time t depend only on codes at times < t and on `cond`.
    LmOutput forward(const TokenBatch& tokens, const Tensor& cond) const;
    // Input embedding sequence [B, T, dim] fed to the first block.
    Tensor embed(const TokenBatch& tokens) const;
    const DecoderBlock& block(std::size_t k) const { return blocks_.at(k); }
    std::size_t block_count() const { return blocks_.size(); }

    const LmConfig& config() const { return cfg_; }
    NamedTensors named_parameters() const;
    // Parameters of block k only, named "blocks.<k>.*".
    NamedTensors block_parameters(std::size_t k) const;
    LanguageModel clone() const;

private:
    LmConfig cfg_;
    Tensor token_embedding_;  // [K * (C + 1), dim]; row k*(C+1)+C is the start symbol
    Tensor positional_;       // [max_time, dim]
    std::vector<DecoderBlock> blocks_;
    LayerNorm final_norm_;
    Linear head_;  // dim -> K*C
};

// ---------------------------------------------------------------------------
// Codec

struct CodecConfig {
    std::size_t base_channels = 8;
    std::vector<std::size_t> strides = {2, 2, 4, 4};
    std::size_t rvq_stages = 2;
    std::size_t rvq_codebook_size = 32;
    std::size_t decoder_channels = 8;
    std::size_t latent_dim = 16;
    bool residual_units = false;
    std::size_t sample_rate = 8000;

    void validate() const;
    std::size_t downsample() const;

    static CodecConfig full_scale_teacher();
    static CodecConfig desk_teacher();
    // Teacher geometry with a narrower decoder.
    static CodecConfig desk_student();
};

// Kernel and padding of a downsampling conv so that length maps to length/stride.
struct StridedGeometry {
    std::size_t kernel;
    std::size_t padding;
    std::size_t output_padding;  // for the mirrored transposed conv
};
StridedGeometry strided_geometry(std::size_t stride);

struct ResidualUnit {
    Conv1d conv;
    Tensor operator()(const Tensor& x) const;
};

class CodecEncoder {
public:
    CodecEncoder() = default;
    CodecEncoder(const CodecConfig& cfg, Rng& rng);
    // [B, 1, N] -> [B, latent_dim, N / downsample].
    Tensor operator()(const Tensor& x) const;
    NamedTensors named_parameters() const;
    CodecEncoder clone() const;

private:
    Conv1d conv_in_;
    std::vector<ResidualUnit> residual_;
    std::vector<Conv1d> down_;
    Conv1d conv_out_;
    bool residual_units_ = false;
};

// Per stage: the residual entering the stage and the codebook entry chosen
// for it, both laid out [B * frames, latent_dim].
struct ResidualTrace {
    std::vector<Tensor> residuals;
    std::vector<Tensor> selected;
};

struct Quantized {
    TokenBatch codes;   // [B, stages, frames], cardinality = codebook size
    Tensor quantized;   // [B, latent_dim, frames]
    ResidualTrace trace;
};

class ResidualQuantizer {
public:
    ResidualQuantizer() = default;
    ResidualQuantizer(std::size_t stages, std::size_t codebook_size, std::size_t dim, Rng& rng);

    Quantized quantize(const Tensor& latent) const;
    // Sum of the selected entries, [B, latent_dim, frames].
    Tensor dequantize(const TokenBatch& codes) const;
    // Seeds entries 1.. of every stage from residuals of randomly chosen frames.
    void init_from_data(const Tensor& latent, Rng& rng);
    // Entry 0 of every stage is kept at the origin so that a stage can never
    // increase the residual norm.
    void pin_null_entry();

    std::size_t stages() const { return codebooks_.size(); }
    std::size_t codebook_size() const { return codebooks_.empty() ? 0 : codebooks_[0].size(0); }
    const Tensor& codebook(std::size_t s) const { return codebooks_.at(s); }
    NamedTensors named_parameters() const;
    ResidualQuantizer clone() const;

private:
    std::vector<Tensor> codebooks_;  // [size, dim] each
};

class CodecDecoder {
public:
    CodecDecoder() = default;
    CodecDecoder(const CodecConfig& cfg, Rng& rng);
    // [B, latent_dim, frames] -> [B, 1, frames * downsample], in (-1, 1).
    Tensor operator()(const Tensor& latent) const;
    NamedTensors named_parameters() const;
    CodecDecoder clone() const;

private:
    Conv1d conv_in_;
    std::vector<ConvTranspose1d> up_;
    std::vector<ResidualUnit> residual_;
    Conv1d conv_out_;
    bool residual_units_ = false;
};

struct Reconstruction {
    Tensor audio;  // [B, 1, N]
    Quantized quantized;
};

class Codec {
public:
    Codec() = default;
    Codec(const CodecConfig& cfg, Rng& rng);
    // Same encoder and quantizer values as `teacher`, fresh decoder of
    // `cfg.decoder_channels` width.
    static Codec with_fresh_decoder(const Codec& teacher, const CodecConfig& cfg, Rng& rng);

    // Throws ShapeError unless N is a multiple of the total downsample.
    Quantized encode_quantize(const Tensor& x) const;
    Tensor decode(const TokenBatch& codes) const;
    // Encode, quantize and decode. With `straight_through` the decoder input
    // carries the encoder's gradient past the nearest-neighbour lookup.
    Reconstruction autoencode(const Tensor& x, bool straight_through = false) const;

    const CodecConfig& config() const { return cfg_; }
    CodecEncoder& encoder() { return encoder_; }
    ResidualQuantizer& quantizer() { return quantizer_; }
    const ResidualQuantizer& quantizer() const { return quantizer_; }
    CodecDecoder& decoder() { return decoder_; }
    const CodecDecoder& decoder() const { return decoder_; }

    NamedTensors named_parameters() const;
    NamedTensors encoder_parameters() const;
    NamedTensors quantizer_parameters() const;
    NamedTensors decoder_parameters() const;

private:
    void check_length(const Tensor& x) const;

    CodecConfig cfg_;
    CodecEncoder encoder_;
    ResidualQuantizer quantizer_;
    CodecDecoder decoder_;
};

// ---------------------------------------------------------------------------
// Discriminators

struct DiscriminatorConfig {
    std::size_t count = 3;
    std::size_t layers = 4;
    std::size_t channels = 16;
    std::size_t kernel = 7;
    double negative_slope = 0.2;
    bool zero_init_final = false;

    void validate() const;
};

struct DiscriminatorOutput {
    std::vector<Tensor> scores;                 // one score map per discriminator
    std::vector<std::vector<Tensor>> features;  // [discriminator][layer]
};

class WaveDiscriminator {
public:
    WaveDiscriminator() = default;
    WaveDiscriminator(const DiscriminatorConfig& cfg, Rng& rng);
    Tensor operator()(const Tensor& x, std::vector<Tensor>* features) const;
    void collect(const std::string& prefix, NamedTensors& out) const;

private:
    std::vector<Conv1d> convs_;
    Conv1d score_;
    double slope_ = 0.2;
};

class MultiScaleDiscriminator {
public:
    MultiScaleDiscriminator() = default;
    MultiScaleDiscriminator(const DiscriminatorConfig& cfg, Rng& rng);
    // Discriminator k sees the input average-pooled by 2^k.
    DiscriminatorOutput operator()(const Tensor& x) const;
    std::size_t count() const { return discs_.size(); }
    const DiscriminatorConfig& config() const { return cfg_; }
    NamedTensors named_parameters() const;

private:
    DiscriminatorConfig cfg_;
    std::vector<WaveDiscriminator> discs_;
};

}  // namespace kdforge
