// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <sstream>

#include "kdforge/checkpoint.hpp"
#include "kdforge/errors.hpp"
#include "kdforge/models.hpp"
#include "kdforge/ops.hpp"

using namespace kdforge;

namespace {

LmConfig tiny_lm() {
    LmConfig c;
    c.layers = 2;
    c.heads = 2;
    c.dim = 8;
    c.codebooks = 2;
    c.cardinality = 5;
    c.max_time = 10;
    c.cond_dim = 8;
    c.ffn_mult = 2;
    return c;
}

ConditionerConfig tiny_cond() {
    ConditionerConfig c;
    c.vocab = 6;
    c.dim = 8;
    c.layers = 4;
    c.heads = 2;
    return c;
}

TokenBatch random_tokens(Rng& rng, std::size_t b, std::size_t k, std::size_t t, std::size_t c) {
    TokenBatch tb(b, k, t, c);
    for (auto& code : tb.codes) {
        code = rng.below(c);
    }
    return tb;
}

CaptionBatch caption(std::size_t batch, std::vector<std::size_t> tokens) {
    CaptionBatch cb;
    cb.batch = batch;
    cb.length = tokens.size() / batch;
    cb.tokens = std::move(tokens);
    return cb;
}

bool bit_equal(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        return false;
    }
    for (std::size_t i = 0; i < a.numel(); ++i) {
        if (a.at(i) != b.at(i)) {
            return false;
        }
    }
    return true;
}

}  // namespace

TEST_CASE("lm logits never see the present or future") {
    Rng rng(11);
    const LanguageModel lm(tiny_lm(), rng);
    Conditioner cond(tiny_cond(), rng);
    const Tensor c = cond.encode(caption(2, {1, 2, 3, 4, 5, 0}));
    const TokenBatch base = random_tokens(rng, 2, 2, 8, 5);
    const Tensor ref = lm.forward(base, c).logits;
    for (std::size_t t_pert = 0; t_pert < 8; ++t_pert) {
        TokenBatch pert = base;
        for (std::size_t b = 0; b < 2; ++b) {
            for (std::size_t k = 0; k < 2; ++k) {
                pert.at(b, k, t_pert) = (pert.at(b, k, t_pert) + 1 + b + k) % 5;
            }
        }
        const Tensor out = lm.forward(pert, c).logits;
        bool later_changed = false;
        for (std::size_t b = 0; b < 2; ++b) {
            for (std::size_t k = 0; k < 2; ++k) {
                for (std::size_t t = 0; t < 8; ++t) {
                    for (std::size_t v = 0; v < 5; ++v) {
                        const std::size_t i = ((b * 2 + k) * 8 + t) * 5 + v;
                        if (t <= t_pert) {
                            REQUIRE(out.at(i) == ref.at(i));
                        } else if (out.at(i) != ref.at(i)) {
                            later_changed = true;
                        }
                    }
                }
            }
        }
        if (t_pert + 1 < 8) {
            CHECK(later_changed);
        }
    }
}

TEST_CASE("lm output shapes and trace length") {
    Rng rng(2);
    const LanguageModel lm(tiny_lm(), rng);
    const Tensor c = Tensor::randn({3, 4, 8}, rng);
    const LmOutput out = lm.forward(random_tokens(rng, 3, 2, 6, 5), c);
    CHECK(out.logits.shape() == Shape{3, 2, 6, 5});
    REQUIRE(out.trace.size() == 2);
    CHECK(out.trace[0].shape() == Shape{3, 6, 8});
}

TEST_CASE("lm rejects sequences longer than max_time and foreign token layouts") {
    Rng rng(2);
    const LanguageModel lm(tiny_lm(), rng);
    const Tensor c = Tensor::randn({1, 1, 8}, rng);
    CHECK_THROWS_AS(lm.forward(random_tokens(rng, 1, 2, 11, 5), c), RangeError);
    CHECK_THROWS_AS(lm.forward(random_tokens(rng, 1, 3, 4, 5), c), ShapeError);
    TokenBatch bad = random_tokens(rng, 1, 2, 4, 5);
    bad.codes[0] = 5;
    CHECK_THROWS_AS(lm.forward(bad, c), RangeError);
}

TEST_CASE("empty caption falls back to the learned null context") {
    Rng rng(5);
    Conditioner cond(tiny_cond(), rng);
    HiddenTrace trace;
    const Tensor c = cond.encode(caption(2, {}), &trace);
    CHECK(c.shape() == Shape{2, 0, 8});
    CHECK(trace.size() == 4);
    const LanguageModel lm(tiny_lm(), rng);
    const LmOutput out = lm.forward(random_tokens(rng, 2, 2, 3, 5), c);
    for (double v : out.logits.data()) {
        CHECK(std::isfinite(v));
    }
}

TEST_CASE("conditioner rejects out-of-vocabulary tokens") {
    Rng rng(5);
    Conditioner cond(tiny_cond(), rng);
    CHECK_THROWS_AS(cond.encode(caption(1, {6})), RangeError);
}

TEST_CASE("conditioner layer dropping") {
    Rng rng(8);
    Conditioner cond(tiny_cond(), rng);
    const CaptionBatch cap = caption(1, {1, 2, 3});
    HiddenTrace trace;
    const Tensor full = cond.encode(cap, &trace);
    CHECK(trace.size() == 4);
    const std::size_t full_params = count_parameters(cond.named_parameters());

    SUBCASE("drop 0 is the identity") {
        cond.drop_layers(0);
        CHECK(bit_equal(cond.encode(cap), full));
    }
    SUBCASE("drop 1 and 2") {
        Conditioner one = cond.clone();
        one.drop_layers(1);
        CHECK(one.layer_count() == 3);
        CHECK_FALSE(bit_equal(one.encode(cap), full));
        CHECK(count_parameters(one.named_parameters()) < full_params);
        // Surviving layers are untouched.
        for (const auto& [name, t] : one.named_parameters()) {
            for (const auto& [n2, t2] : cond.named_parameters()) {
                if (n2 == name) {
                    CHECK(bit_equal(t, t2));
                }
            }
        }
        Conditioner two = cond.clone();
        two.drop_layers(2);
        CHECK(two.layer_count() == 2);
    }
    SUBCASE("cannot drop everything") {
        CHECK_THROWS_AS(cond.drop_layers(4), ValidationError);
    }
}

TEST_CASE("analytic parameter count matches the built model") {
    Rng rng(1);
    for (const LmConfig& cfg : {tiny_lm(), LmConfig::desk_v1(), LmConfig::desk_v2()}) {
        const LanguageModel lm(cfg, rng);
        CHECK(count_parameters(lm.named_parameters()) == cfg.parameter_count());
    }
}

TEST_CASE("full-scale geometries") {
    const LmConfig v1 = LmConfig::full_scale_v1();
    const LmConfig v2 = LmConfig::full_scale_v2();
    const LmConfig t = LmConfig::full_scale_teacher();
    CHECK(v1.layers == 4);
    CHECK(v1.heads == 16);
    CHECK(v1.dim == 1024);
    CHECK(v2.layers == 7);
    CHECK(v2.heads == 8);
    CHECK(v2.dim == 720);
    CHECK(t.layers == 24);
    CHECK(t.parameter_count() > v1.parameter_count());
    CHECK(v1.parameter_count() > v2.parameter_count());
    CHECK(LmConfig::desk_teacher().layers == 24);
    LmConfig bad = v2;
    bad.heads = 7;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("codec shapes and divisibility") {
    Rng rng(3);
    const CodecConfig cfg = CodecConfig::desk_teacher();
    const Codec codec(cfg, rng);
    const Tensor x = Tensor::uniform({2, 1, 256}, rng, -0.5, 0.5);
    const Quantized q = codec.encode_quantize(x);
    CHECK(q.codes.shape() == Shape{2, cfg.rvq_stages, 256 / cfg.downsample()});
    const Tensor y = codec.decode(q.codes);
    CHECK(y.shape() == Shape{2, 1, 256});
    for (double v : y.data()) {
        CHECK(std::abs(v) < 1.0);
    }
    CHECK(bit_equal(codec.decode(q.codes), y));
    CHECK_THROWS_AS(codec.encode_quantize(Tensor::zeros({1, 1, 100})), ShapeError);
    TokenBatch bad = q.codes;
    bad.codes[0] = cfg.rvq_codebook_size;
    CHECK_THROWS_AS(codec.decode(bad), RangeError);
}

TEST_CASE("strided geometry maps length to length / stride and back") {
    for (std::size_t s = 1; s <= 8; ++s) {
        const StridedGeometry g = strided_geometry(s);
        for (std::size_t frames = 1; frames <= 5; ++frames) {
            const std::size_t n = frames * s;
            CHECK(conv1d_output_length(n, g.kernel, s, g.padding) == frames);
            CHECK((frames - 1) * s + g.kernel + g.output_padding - 2 * g.padding == n);
        }
    }
}

TEST_CASE("residual quantization never increases the residual") {
    Rng rng(9);
    CodecConfig cfg = CodecConfig::desk_teacher();
    cfg.rvq_stages = 4;
    Codec codec(cfg, rng);
    for (int trial = 0; trial < 5; ++trial) {
        const Tensor x = Tensor::uniform({2, 1, 128}, rng, -1.0, 1.0);
        const Quantized q = codec.encode_quantize(x);
        const std::size_t rows = q.trace.residuals[0].size(0);
        const std::size_t d = q.trace.residuals[0].size(1);
        for (std::size_t s = 0; s < cfg.rvq_stages; ++s) {
            const Tensor after = sub(q.trace.residuals[s], q.trace.selected[s]);
            for (std::size_t r = 0; r < rows; ++r) {
                double before_sq = 0.0;
                double after_sq = 0.0;
                for (std::size_t j = 0; j < d; ++j) {
                    before_sq += std::pow(q.trace.residuals[s].at(r * d + j), 2);
                    after_sq += std::pow(after.at(r * d + j), 2);
                }
                CHECK(after_sq <= before_sq);
            }
        }
    }
}

TEST_CASE("zero latent with a zero codebook entry quantizes exactly") {
    Rng rng(4);
    ResidualQuantizer rvq(2, 8, 3, rng);
    const Quantized q = rvq.quantize(Tensor::zeros({1, 3, 4}));
    const Tensor after = sub(q.trace.residuals[0], q.trace.selected[0]);
    for (double v : after.data()) {
        CHECK(v == 0.0);
    }
}

TEST_CASE("student decoder is smaller and shares encoder values") {
    Rng rng(6);
    const Codec teacher(CodecConfig::desk_teacher(), rng);
    const Codec student = Codec::with_fresh_decoder(teacher, CodecConfig::desk_student(), rng);
    CHECK(count_parameters(student.decoder_parameters()) < count_parameters(teacher.decoder_parameters()));
    CHECK(parameter_hash(student.encoder_parameters()) == parameter_hash(teacher.encoder_parameters()));
    CHECK(parameter_hash(student.quantizer_parameters()) == parameter_hash(teacher.quantizer_parameters()));
    CHECK(CodecConfig::full_scale_teacher().strides.size() == 4);
    CHECK(CodecConfig::full_scale_teacher().base_channels == 64);
}

TEST_CASE("multi-scale discriminator layout") {
    Rng rng(12);
    DiscriminatorConfig cfg;
    cfg.zero_init_final = true;
    const MultiScaleDiscriminator disc(cfg, rng);
    const Tensor x = Tensor::uniform({2, 1, 256}, rng, -1.0, 1.0);
    const DiscriminatorOutput out = disc(x);
    std::size_t maps = 0;
    for (const auto& f : out.features) {
        CHECK(f.size() == 4);
        maps += f.size();
    }
    CHECK(maps == 12);
    CHECK(out.features[1][0].size(2) == 128);
    for (const Tensor& s : out.scores) {
        for (double v : s.data()) {
            CHECK(v == 0.0);
        }
    }
}

TEST_CASE("checkpoint round trip is bit exact") {
    Rng rng(21);
    const LanguageModel lm(tiny_lm(), rng);
    std::stringstream a;
    write_checkpoint(a, lm.named_parameters());
    const NamedTensors loaded = read_checkpoint(a);
    std::stringstream b;
    write_checkpoint(b, loaded);
    CHECK(a.str() == b.str());
    CHECK(parameter_hash(loaded) == parameter_hash(lm.named_parameters()));

    LanguageModel other(tiny_lm(), rng);
    copy_parameters(other.named_parameters(), loaded);
    CHECK(parameter_hash(other.named_parameters()) == parameter_hash(lm.named_parameters()));
}

TEST_CASE("checkpoint corruption is reported with typed errors") {
    Rng rng(21);
    const LanguageModel lm(tiny_lm(), rng);
    std::stringstream ss;
    write_checkpoint(ss, lm.named_parameters());
    const std::string bytes = ss.str();

    std::string magic = bytes;
    magic[0] = 'X';
    std::istringstream m(magic);
    CHECK_THROWS_AS(read_checkpoint(m), BadMagicError);

    std::string version = bytes;
    version[4] = static_cast<char>(version[4] + 1);
    std::istringstream v(version);
    CHECK_THROWS_AS(read_checkpoint(v), UnsupportedVersionError);

    std::istringstream t(bytes.substr(0, bytes.size() - 3));
    CHECK_THROWS_AS(read_checkpoint(t), TruncatedError);
}
