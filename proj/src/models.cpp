// SPDX-License-Identifier: Apache-2.0
#include "kdforge/models.hpp"

#include <cmath>
#include <limits>

#include "kdforge/errors.hpp"
#include "kdforge/ops.hpp"

namespace kdforge {

namespace {

std::string str(std::size_t v) {
    return std::to_string(v);
}

Tensor clone_leaf(const Tensor& t) {
    Tensor c = t.detach();
    c.set_requires_grad(t.requires_grad());
    return c;
}

}  // namespace

// ---------------------------------------------------------------------------
// TokenBatch

TokenBatch::TokenBatch(std::size_t b, std::size_t k, std::size_t t, std::size_t c)
    : batch(b), codebooks(k), time(t), cardinality(c), codes(b * k * t, 0) {}

void TokenBatch::validate() const {
    if (codes.size() != batch * codebooks * time) {
        throw ShapeError("token batch: " + str(codes.size()) + " codes do not fill " + shape_str(shape()));
    }
    for (std::size_t c : codes) {
        if (c >= cardinality) {
            throw RangeError("token batch: code " + str(c) + " out of range for cardinality " + str(cardinality));
        }
    }
}

// ---------------------------------------------------------------------------
// Conditioner

void ConditionerConfig::validate() const {
    if (vocab == 0 || dim == 0 || heads == 0 || max_len == 0 || ffn_mult == 0) {
        throw ConfigError("conditioner: vocab, dim, heads, max_len and ffn_mult must be positive");
    }
    if (dim % heads != 0) {
        throw ConfigError("conditioner: dim " + str(dim) + " is not divisible by " + str(heads) + " heads");
    }
}

Tensor EncoderLayer::operator()(const Tensor& h) const {
    const Tensor n = attn_norm(h);
    const Tensor x = add(h, attn(n, n, false));
    return add(x, ffn(ffn_norm(x)));
}

void EncoderLayer::collect(const std::string& prefix, NamedTensors& out) const {
    attn_norm.collect(prefix + ".attn_norm", out);
    attn.collect(prefix + ".attn", out);
    ffn_norm.collect(prefix + ".ffn_norm", out);
    ffn.collect(prefix + ".ffn", out);
}

EncoderLayer EncoderLayer::clone() const {
    return {attn_norm.clone(), attn.clone(), ffn_norm.clone(), ffn.clone()};
}

Conditioner::Conditioner(const ConditionerConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    token_embedding_ = make_parameter({cfg.vocab, cfg.dim}, rng, 1.0);
    positional_ = make_parameter({cfg.max_len, cfg.dim}, rng, 0.1);
    const double out_gain = 1.0 / std::sqrt(2.0 * static_cast<double>(std::max<std::size_t>(cfg.layers, 1)));
    for (std::size_t i = 0; i < cfg.layers; ++i) {
        layers_.push_back({LayerNorm(cfg.dim), MultiHeadAttention(cfg.dim, cfg.dim, cfg.heads, rng, out_gain),
                           LayerNorm(cfg.dim), FeedForward(cfg.dim, cfg.dim * cfg.ffn_mult, rng, out_gain)});
    }
    final_norm_ = LayerNorm(cfg.dim);
}

Tensor Conditioner::encode(const CaptionBatch& captions, HiddenTrace* trace) const {
    if (captions.tokens.size() != captions.batch * captions.length) {
        throw ShapeError("conditioner: " + str(captions.tokens.size()) + " tokens do not fill [" +
                         str(captions.batch) + ", " + str(captions.length) + "]");
    }
    if (captions.length > cfg_.max_len) {
        throw RangeError("conditioner: caption length " + str(captions.length) + " exceeds max_len " +
                         str(cfg_.max_len));
    }
    for (std::size_t tok : captions.tokens) {
        if (tok >= cfg_.vocab) {
            throw RangeError("conditioner: token " + str(tok) + " outside vocabulary of " + str(cfg_.vocab));
        }
    }
    if (trace) {
        trace->clear();
    }
    if (captions.length == 0) {
        const Tensor empty({captions.batch, 0, cfg_.dim});
        if (trace) {
            trace->assign(layers_.size(), empty);
        }
        return empty;
    }
    Tensor h = embedding(token_embedding_, captions.tokens, {captions.batch, captions.length});
    h = add(h, slice(positional_, 0, 0, captions.length));
    for (const auto& layer : layers_) {
        h = layer(h);
        if (trace) {
            trace->push_back(h);
        }
    }
    return final_norm_(h);
}

void Conditioner::drop_layers(std::size_t n) {
    if (n >= layers_.size()) {
        throw ValidationError("conditioner: cannot drop " + str(n) + " of " + str(layers_.size()) + " layers");
    }
    layers_.resize(layers_.size() - n);
    cfg_.layers = layers_.size();
}

NamedTensors Conditioner::named_parameters() const {
    NamedTensors out;
    out.emplace_back("token_embedding", token_embedding_);
    out.emplace_back("positional", positional_);
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        layers_[i].collect("layers." + str(i), out);
    }
    final_norm_.collect("final_norm", out);
    return out;
}

Conditioner Conditioner::clone() const {
    Conditioner c;
    c.cfg_ = cfg_;
    c.token_embedding_ = clone_leaf(token_embedding_);
    c.positional_ = clone_leaf(positional_);
    for (const auto& l : layers_) {
        c.layers_.push_back(l.clone());
    }
    c.final_norm_ = final_norm_.clone();
    return c;
}

// ---------------------------------------------------------------------------
// Language model

void LmConfig::validate() const {
    if (heads == 0 || dim == 0 || dim % heads != 0) {
        throw ConfigError("lm: dim " + str(dim) + " is not divisible by " + str(heads) + " heads");
    }
    if (codebooks < 1) {
        throw ConfigError("lm: at least one codebook is required");
    }
    if (cardinality < 2) {
        throw ConfigError("lm: cardinality must be at least 2, got " + str(cardinality));
    }
    if (layers == 0 || max_time == 0 || cond_dim == 0 || ffn_mult == 0) {
        throw ConfigError("lm: layers, max_time, cond_dim and ffn_mult must be positive");
    }
}

std::size_t LmConfig::parameter_count() const {
    const std::size_t d = dim;
    const std::size_t hidden = ffn_mult * d;
    const std::size_t self_attn = 4 * (d * d + d);
    const std::size_t cross_attn = 2 * (d * d + d) + 2 * (cond_dim * d + d);
    const std::size_t ffn = d * hidden + hidden + hidden * d + d;
    const std::size_t norms = 3 * 2 * d;
    const std::size_t block = self_attn + cross_attn + ffn + norms + d;
    const std::size_t embeddings = codebooks * (cardinality + 1) * d + max_time * d;
    const std::size_t head = d * codebooks * cardinality + codebooks * cardinality;
    return embeddings + layers * block + 2 * d + head;
}

LmConfig LmConfig::full_scale_teacher() {
    LmConfig c;
    c.layers = 24;
    c.heads = 16;
    c.dim = 1024;
    c.cond_dim = 1024;
    c.max_time = 1500;
    return c;
}

LmConfig LmConfig::full_scale_v1() {
    LmConfig c = full_scale_teacher();
    c.layers = 4;
    return c;
}

LmConfig LmConfig::full_scale_v2() {
    LmConfig c = full_scale_teacher();
    c.layers = 7;
    c.heads = 8;
    c.dim = 720;
    return c;
}

LmConfig LmConfig::desk_teacher() {
    LmConfig c;
    c.layers = 24;
    c.heads = 4;
    c.dim = 32;
    return c;
}

LmConfig LmConfig::desk_v1() {
    LmConfig c = desk_teacher();
    c.layers = 4;
    return c;
}

LmConfig LmConfig::desk_v2() {
    LmConfig c = desk_teacher();
    c.layers = 7;
    c.heads = 2;
    c.dim = 24;
    return c;
}

Tensor DecoderBlock::operator()(const Tensor& h, const Tensor& cond) const {
    const Tensor n = self_norm(h);
    Tensor x = add(h, self_attn(n, n, true));
    if (cond.size(1) == 0) {
        x = add(x, null_context);
    } else {
        x = add(x, cross_attn(cross_norm(x), cond, false));
    }
    return add(x, ffn(ffn_norm(x)));
}

void DecoderBlock::collect(const std::string& prefix, NamedTensors& out) const {
    self_norm.collect(prefix + ".self_norm", out);
    self_attn.collect(prefix + ".self_attn", out);
    cross_norm.collect(prefix + ".cross_norm", out);
    cross_attn.collect(prefix + ".cross_attn", out);
    out.emplace_back(prefix + ".null_context", null_context);
    ffn_norm.collect(prefix + ".ffn_norm", out);
    ffn.collect(prefix + ".ffn", out);
}

DecoderBlock DecoderBlock::clone() const {
    return {self_norm.clone(),  self_attn.clone(),       cross_norm.clone(), cross_attn.clone(),
            clone_leaf(null_context), ffn_norm.clone(), ffn.clone()};
}

LanguageModel::LanguageModel(const LmConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    const std::size_t d = cfg.dim;
    token_embedding_ = make_parameter({cfg.codebooks * (cfg.cardinality + 1), d}, rng,
                                      1.0 / std::sqrt(static_cast<double>(cfg.codebooks)));
    positional_ = make_parameter({cfg.max_time, d}, rng, 0.1);
    const double out_gain = 1.0 / std::sqrt(2.0 * static_cast<double>(cfg.layers));
    for (std::size_t i = 0; i < cfg.layers; ++i) {
        DecoderBlock b{LayerNorm(d),
                       MultiHeadAttention(d, d, cfg.heads, rng, out_gain),
                       LayerNorm(d),
                       MultiHeadAttention(d, cfg.cond_dim, cfg.heads, rng, out_gain),
                       make_parameter({d}, 0.0),
                       LayerNorm(d),
                       FeedForward(d, d * cfg.ffn_mult, rng, out_gain)};
        blocks_.push_back(std::move(b));
    }
    final_norm_ = LayerNorm(d);
    head_ = Linear(d, cfg.codebooks * cfg.cardinality, rng);
}

Tensor LanguageModel::embed(const TokenBatch& tokens) const {
    const std::size_t b = tokens.batch;
    const std::size_t k = tokens.codebooks;
    const std::size_t t = tokens.time;
    const std::size_t c = cfg_.cardinality;
    std::vector<std::size_t> idx(b * t * k);
    for (std::size_t bi = 0; bi < b; ++bi) {
        for (std::size_t ti = 0; ti < t; ++ti) {
            for (std::size_t ki = 0; ki < k; ++ki) {
                const std::size_t prev = ti == 0 ? c : tokens.at(bi, ki, ti - 1);
                idx[(bi * t + ti) * k + ki] = ki * (c + 1) + prev;
            }
        }
    }
    const Tensor e = sum(embedding(token_embedding_, idx, {b, t, k}), 2);
    return add(e, slice(positional_, 0, 0, t));
}

LmOutput LanguageModel::forward(const TokenBatch& tokens, const Tensor& cond) const {
    if (tokens.codebooks != cfg_.codebooks || tokens.cardinality != cfg_.cardinality) {
        throw ShapeError("lm: tokens have " + str(tokens.codebooks) + " codebooks of cardinality " +
                         str(tokens.cardinality) + ", model expects " + str(cfg_.codebooks) + " of " +
                         str(cfg_.cardinality));
    }
    tokens.validate();
    if (tokens.time == 0 || tokens.time > cfg_.max_time) {
        throw RangeError("lm: sequence length " + str(tokens.time) + " outside [1, " + str(cfg_.max_time) + "]");
    }
    if (cond.rank() != 3 || cond.size(0) != tokens.batch || cond.size(2) != cfg_.cond_dim) {
        throw ShapeError("lm: conditioning " + shape_str(cond.shape()) + " does not match [" + str(tokens.batch) +
                         ", S, " + str(cfg_.cond_dim) + "]");
    }
    LmOutput out;
    Tensor h = embed(tokens);
    for (const auto& block : blocks_) {
        h = block(h, cond);
        out.trace.push_back(h);
    }
    const Tensor flat = head_(final_norm_(h));  // [B, T, K*C]
    out.logits =
        permute(reshape(flat, {tokens.batch, tokens.time, cfg_.codebooks, cfg_.cardinality}), {0, 2, 1, 3});
    return out;
}

NamedTensors LanguageModel::named_parameters() const {
    NamedTensors out;
    out.emplace_back("token_embedding", token_embedding_);
    out.emplace_back("positional", positional_);
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
        blocks_[i].collect("blocks." + str(i), out);
    }
    final_norm_.collect("final_norm", out);
    head_.collect("head", out);
    return out;
}

NamedTensors LanguageModel::block_parameters(std::size_t k) const {
    NamedTensors out;
    blocks_.at(k).collect("blocks." + str(k), out);
    return out;
}

LanguageModel LanguageModel::clone() const {
    LanguageModel m;
    m.cfg_ = cfg_;
    m.token_embedding_ = clone_leaf(token_embedding_);
    m.positional_ = clone_leaf(positional_);
    for (const auto& b : blocks_) {
        m.blocks_.push_back(b.clone());
    }
    m.final_norm_ = final_norm_.clone();
    m.head_ = head_.clone();
    return m;
}

// ---------------------------------------------------------------------------
// Codec

void CodecConfig::validate() const {
    if (strides.empty()) {
        throw ConfigError("codec: strides must be nonempty");
    }
    for (std::size_t s : strides) {
        if (s == 0) {
            throw ConfigError("codec: strides must be positive");
        }
    }
    if (base_channels == 0 || decoder_channels == 0 || latent_dim == 0 || rvq_stages == 0) {
        throw ConfigError("codec: channel counts, latent_dim and rvq_stages must be positive");
    }
    if (rvq_codebook_size < 2) {
        throw ConfigError("codec: rvq_codebook_size must be at least 2");
    }
    if (sample_rate == 0) {
        throw ConfigError("codec: sample_rate must be positive");
    }
}

std::size_t CodecConfig::downsample() const {
    std::size_t p = 1;
    for (std::size_t s : strides) {
        p *= s;
    }
    return p;
}

CodecConfig CodecConfig::full_scale_teacher() {
    CodecConfig c;
    c.base_channels = 64;
    c.decoder_channels = 64;
    c.strides = {2, 4, 5, 8};
    c.latent_dim = 128;
    c.rvq_stages = 4;
    c.rvq_codebook_size = 2048;
    c.sample_rate = 32000;
    return c;
}

CodecConfig CodecConfig::desk_teacher() {
    return CodecConfig{};
}

CodecConfig CodecConfig::desk_student() {
    CodecConfig c;
    c.decoder_channels = 4;
    return c;
}

StridedGeometry strided_geometry(std::size_t stride) {
    if (stride == 1) {
        return {3, 1, 0};
    }
    const std::size_t pad = (stride + 1) / 2;
    return {2 * stride, pad, 2 * pad - stride};
}

Tensor ResidualUnit::operator()(const Tensor& x) const {
    return add(x, conv(elu(x)));
}

CodecEncoder::CodecEncoder(const CodecConfig& cfg, Rng& rng) : residual_units_(cfg.residual_units) {
    cfg.validate();
    std::size_t ch = cfg.base_channels;
    conv_in_ = Conv1d(1, ch, 7, 1, 3, rng);
    for (std::size_t s : cfg.strides) {
        const StridedGeometry g = strided_geometry(s);
        if (residual_units_) {
            residual_.push_back({Conv1d(ch, ch, 3, 1, 1, rng)});
        }
        down_.emplace_back(ch, 2 * ch, g.kernel, s, g.padding, rng);
        ch *= 2;
    }
    conv_out_ = Conv1d(ch, cfg.latent_dim, 3, 1, 1, rng);
}

Tensor CodecEncoder::operator()(const Tensor& x) const {
    Tensor h = conv_in_(x);
    for (std::size_t i = 0; i < down_.size(); ++i) {
        if (residual_units_) {
            h = residual_[i](h);
        }
        h = down_[i](elu(h));
    }
    return conv_out_(elu(h));
}

NamedTensors CodecEncoder::named_parameters() const {
    NamedTensors out;
    conv_in_.collect("conv_in", out);
    for (std::size_t i = 0; i < down_.size(); ++i) {
        if (residual_units_) {
            residual_[i].conv.collect("res." + str(i), out);
        }
        down_[i].collect("down." + str(i), out);
    }
    conv_out_.collect("conv_out", out);
    return out;
}

CodecEncoder CodecEncoder::clone() const {
    CodecEncoder e;
    e.conv_in_ = conv_in_.clone();
    for (const auto& r : residual_) {
        e.residual_.push_back({r.conv.clone()});
    }
    for (const auto& d : down_) {
        e.down_.push_back(d.clone());
    }
    e.conv_out_ = conv_out_.clone();
    e.residual_units_ = residual_units_;
    return e;
}

ResidualQuantizer::ResidualQuantizer(std::size_t stages, std::size_t codebook_size, std::size_t dim, Rng& rng) {
    for (std::size_t s = 0; s < stages; ++s) {
        codebooks_.push_back(make_parameter({codebook_size, dim}, rng, 1.0 / static_cast<double>(s + 1)));
    }
    pin_null_entry();
}

void ResidualQuantizer::pin_null_entry() {
    for (auto& cb : codebooks_) {
        auto d = cb.mutable_data();
        std::fill_n(d.begin(), cb.size(1), 0.0);
    }
}

namespace {

// [B, D, F] -> [B*F, D]
Tensor frames_as_rows(const Tensor& latent) {
    const std::size_t b = latent.size(0);
    const std::size_t d = latent.size(1);
    const std::size_t f = latent.size(2);
    return reshape(permute(latent, {0, 2, 1}), {b * f, d});
}

Tensor rows_as_frames(const Tensor& rows, std::size_t batch, std::size_t frames) {
    const std::size_t d = rows.size(1);
    return permute(reshape(rows, {batch, frames, d}), {0, 2, 1});
}

std::size_t nearest_entry(std::span<const double> codebook, std::size_t size, std::size_t dim,
                          std::span<const double> v) {
    std::size_t best = 0;
    double best_dist = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < size; ++c) {
        double dist = 0.0;
        for (std::size_t j = 0; j < dim; ++j) {
            const double diff = v[j] - codebook[c * dim + j];
            dist += diff * diff;
        }
        if (dist < best_dist) {
            best_dist = dist;
            best = c;
        }
    }
    return best;
}

}  // namespace

Quantized ResidualQuantizer::quantize(const Tensor& latent) const {
    if (latent.rank() != 3) {
        throw ShapeError("quantizer: expected latent [B, D, F], got " + shape_str(latent.shape()));
    }
    const std::size_t b = latent.size(0);
    const std::size_t d = latent.size(1);
    const std::size_t f = latent.size(2);
    if (!codebooks_.empty() && codebooks_[0].size(1) != d) {
        throw ShapeError("quantizer: latent " + shape_str(latent.shape()) + " vs codebook " +
                         shape_str(codebooks_[0].shape()));
    }
    const std::size_t size = codebook_size();
    Quantized q;
    q.codes = TokenBatch(b, stages(), f, size);
    Tensor residual = frames_as_rows(latent);
    Tensor total;
    for (std::size_t s = 0; s < stages(); ++s) {
        const auto rd = residual.data();
        const auto cd = codebooks_[s].data();
        std::vector<std::size_t> idx(b * f);
        for (std::size_t r = 0; r < b * f; ++r) {
            idx[r] = nearest_entry(cd, size, d, rd.subspan(r * d, d));
            q.codes.at(r / f, s, r % f) = idx[r];
        }
        const Tensor chosen = embedding(codebooks_[s], idx, {b * f});
        q.trace.residuals.push_back(residual);
        q.trace.selected.push_back(chosen);
        total = total.defined() ? add(total, chosen) : chosen;
        residual = sub(residual, chosen);
    }
    q.quantized = rows_as_frames(total, b, f);
    return q;
}

Tensor ResidualQuantizer::dequantize(const TokenBatch& codes) const {
    if (codes.codebooks != stages()) {
        throw ShapeError("quantizer: codes carry " + str(codes.codebooks) + " stages, quantizer has " +
                         str(stages()));
    }
    const std::size_t size = codebook_size();
    for (std::size_t c : codes.codes) {
        if (c >= size) {
            throw RangeError("quantizer: code " + str(c) + " out of range for codebook size " + str(size));
        }
    }
    const std::size_t b = codes.batch;
    const std::size_t f = codes.time;
    Tensor total;
    for (std::size_t s = 0; s < stages(); ++s) {
        std::vector<std::size_t> idx(b * f);
        for (std::size_t r = 0; r < b * f; ++r) {
            idx[r] = codes.at(r / f, s, r % f);
        }
        const Tensor chosen = embedding(codebooks_[s], idx, {b * f});
        total = total.defined() ? add(total, chosen) : chosen;
    }
    return rows_as_frames(total, b, f);
}

void ResidualQuantizer::init_from_data(const Tensor& latent, Rng& rng) {
    NoGradGuard guard;
    const std::size_t d = latent.size(1);
    Tensor residual = frames_as_rows(latent);
    const std::size_t rows = residual.size(0);
    for (auto& cb : codebooks_) {
        auto cd = cb.mutable_data();
        const auto rd = residual.data();
        for (std::size_t c = 1; c < cb.size(0); ++c) {
            const std::size_t r = rng.below(rows);
            std::copy_n(rd.begin() + static_cast<std::ptrdiff_t>(r * d), d, cd.begin() + static_cast<std::ptrdiff_t>(c * d));
        }
        snap_to_f32(cb);
        std::vector<std::size_t> idx(rows);
        for (std::size_t r = 0; r < rows; ++r) {
            idx[r] = nearest_entry(cb.data(), cb.size(0), d, rd.subspan(r * d, d));
        }
        residual = sub(residual, embedding(cb, idx, {rows}));
    }
    pin_null_entry();
}

NamedTensors ResidualQuantizer::named_parameters() const {
    NamedTensors out;
    for (std::size_t s = 0; s < codebooks_.size(); ++s) {
        out.emplace_back("codebook." + str(s), codebooks_[s]);
    }
    return out;
}

ResidualQuantizer ResidualQuantizer::clone() const {
    ResidualQuantizer q;
    for (const auto& cb : codebooks_) {
        q.codebooks_.push_back(clone_leaf(cb));
    }
    return q;
}

CodecDecoder::CodecDecoder(const CodecConfig& cfg, Rng& rng) : residual_units_(cfg.residual_units) {
    cfg.validate();
    const std::size_t n = cfg.strides.size();
    std::size_t ch = cfg.decoder_channels << n;
    conv_in_ = Conv1d(cfg.latent_dim, ch, 7, 1, 3, rng);
    for (std::size_t i = n; i-- > 0;) {
        const std::size_t s = cfg.strides[i];
        const StridedGeometry g = strided_geometry(s);
        up_.emplace_back(ch, ch / 2, g.kernel, s, g.padding, g.output_padding, rng);
        ch /= 2;
        if (residual_units_) {
            residual_.push_back({Conv1d(ch, ch, 3, 1, 1, rng)});
        }
    }
    conv_out_ = Conv1d(ch, 1, 7, 1, 3, rng);
}

Tensor CodecDecoder::operator()(const Tensor& latent) const {
    Tensor h = conv_in_(latent);
    for (std::size_t i = 0; i < up_.size(); ++i) {
        h = up_[i](elu(h));
        if (residual_units_) {
            h = residual_[i](h);
        }
    }
    return tanh(conv_out_(elu(h)));
}

NamedTensors CodecDecoder::named_parameters() const {
    NamedTensors out;
    conv_in_.collect("conv_in", out);
    for (std::size_t i = 0; i < up_.size(); ++i) {
        up_[i].collect("up." + str(i), out);
        if (residual_units_) {
            residual_[i].conv.collect("res." + str(i), out);
        }
    }
    conv_out_.collect("conv_out", out);
    return out;
}

CodecDecoder CodecDecoder::clone() const {
    CodecDecoder d;
    d.conv_in_ = conv_in_.clone();
    for (const auto& u : up_) {
        d.up_.push_back(u.clone());
    }
    for (const auto& r : residual_) {
        d.residual_.push_back({r.conv.clone()});
    }
    d.conv_out_ = conv_out_.clone();
    d.residual_units_ = residual_units_;
    return d;
}

Codec::Codec(const CodecConfig& cfg, Rng& rng)
    : cfg_(cfg),
      encoder_(cfg, rng),
      quantizer_(cfg.rvq_stages, cfg.rvq_codebook_size, cfg.latent_dim, rng),
      decoder_(cfg, rng) {}

Codec Codec::with_fresh_decoder(const Codec& teacher, const CodecConfig& cfg, Rng& rng) {
    const CodecConfig& t = teacher.cfg_;
    if (cfg.strides != t.strides || cfg.latent_dim != t.latent_dim || cfg.rvq_stages != t.rvq_stages ||
        cfg.rvq_codebook_size != t.rvq_codebook_size || cfg.base_channels != t.base_channels) {
        throw ConfigError("codec: student must share the teacher's encoder and quantizer geometry");
    }
    Codec c;
    c.cfg_ = cfg;
    c.encoder_ = teacher.encoder_.clone();
    c.quantizer_ = teacher.quantizer_.clone();
    c.decoder_ = CodecDecoder(cfg, rng);
    return c;
}

void Codec::check_length(const Tensor& x) const {
    if (x.rank() != 3 || x.size(1) != 1) {
        throw ShapeError("codec: expected waveform [B, 1, N], got " + shape_str(x.shape()));
    }
    const std::size_t ds = cfg_.downsample();
    if (x.size(2) == 0 || x.size(2) % ds != 0) {
        throw ShapeError("codec: waveform length " + str(x.size(2)) + " is not a multiple of the downsample " +
                         str(ds));
    }
}

Quantized Codec::encode_quantize(const Tensor& x) const {
    check_length(x);
    return quantizer_.quantize(encoder_(x));
}

Tensor Codec::decode(const TokenBatch& codes) const {
    return decoder_(quantizer_.dequantize(codes));
}

Reconstruction Codec::autoencode(const Tensor& x, bool straight_through) const {
    check_length(x);
    const Tensor latent = encoder_(x);
    Reconstruction r;
    r.quantized = quantizer_.quantize(latent);
    Tensor input = r.quantized.quantized;
    if (straight_through) {
        input = add(latent, sub(input.detach(), latent.detach()));
    }
    r.audio = decoder_(input);
    return r;
}

NamedTensors Codec::named_parameters() const {
    NamedTensors out;
    for (const auto& [n, t] : encoder_parameters()) {
        out.emplace_back(n, t);
    }
    for (const auto& [n, t] : quantizer_parameters()) {
        out.emplace_back(n, t);
    }
    for (const auto& [n, t] : decoder_parameters()) {
        out.emplace_back(n, t);
    }
    return out;
}

namespace {
NamedTensors prefixed(const std::string& prefix, NamedTensors params) {
    for (auto& [n, t] : params) {
        n = prefix + n;
    }
    return params;
}
}  // namespace

NamedTensors Codec::encoder_parameters() const {
    return prefixed("encoder.", encoder_.named_parameters());
}

NamedTensors Codec::quantizer_parameters() const {
    return prefixed("quantizer.", quantizer_.named_parameters());
}

NamedTensors Codec::decoder_parameters() const {
    return prefixed("decoder.", decoder_.named_parameters());
}

// ---------------------------------------------------------------------------
// Discriminators

void DiscriminatorConfig::validate() const {
    if (count == 0 || layers == 0 || channels == 0 || kernel == 0) {
        throw ConfigError("discriminator: count, layers, channels and kernel must be positive");
    }
}

WaveDiscriminator::WaveDiscriminator(const DiscriminatorConfig& cfg, Rng& rng) : slope_(cfg.negative_slope) {
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        const std::size_t in = l == 0 ? 1 : cfg.channels;
        const std::size_t stride = l == 0 ? 1 : 2;
        convs_.emplace_back(in, cfg.channels, cfg.kernel, stride, cfg.kernel / 2, rng);
    }
    score_ = Conv1d(cfg.channels, 1, 3, 1, 1, rng);
    if (cfg.zero_init_final) {
        std::fill(score_.weight.mutable_data().begin(), score_.weight.mutable_data().end(), 0.0);
    }
}

Tensor WaveDiscriminator::operator()(const Tensor& x, std::vector<Tensor>* features) const {
    Tensor h = x;
    for (const auto& conv : convs_) {
        h = leaky_relu(conv(h), slope_);
        if (features) {
            features->push_back(h);
        }
    }
    return score_(h);
}

void WaveDiscriminator::collect(const std::string& prefix, NamedTensors& out) const {
    for (std::size_t l = 0; l < convs_.size(); ++l) {
        convs_[l].collect(prefix + ".conv." + str(l), out);
    }
    score_.collect(prefix + ".score", out);
}

MultiScaleDiscriminator::MultiScaleDiscriminator(const DiscriminatorConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    for (std::size_t k = 0; k < cfg.count; ++k) {
        discs_.emplace_back(cfg, rng);
    }
}

DiscriminatorOutput MultiScaleDiscriminator::operator()(const Tensor& x) const {
    DiscriminatorOutput out;
    out.features.resize(discs_.size());
    for (std::size_t k = 0; k < discs_.size(); ++k) {
        const Tensor input = k == 0 ? x : avg_pool1d(x, std::size_t{1} << k);
        out.scores.push_back(discs_[k](input, &out.features[k]));
    }
    return out;
}

NamedTensors MultiScaleDiscriminator::named_parameters() const {
    NamedTensors out;
    for (std::size_t k = 0; k < discs_.size(); ++k) {
        discs_[k].collect("disc." + str(k), out);
    }
    return out;
}

}  // namespace kdforge
