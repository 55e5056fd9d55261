// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "kdforge/checkpoint.hpp"
#include "kdforge/errors.hpp"
#include "kdforge/ops.hpp"
#include "kdforge/optim.hpp"
#include "kdforge/run_config.hpp"
#include "kdforge/trainer.hpp"

using namespace kdforge;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / ("kdforge_trainer_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(is), {});
}

std::vector<nlohmann::json> log_lines(const fs::path& p) {
    std::vector<nlohmann::json> out;
    std::ifstream is(p);
    for (std::string line; std::getline(is, line);) {
        out.push_back(nlohmann::json::parse(line));
    }
    return out;
}

// Tiny LM world: 2 codebooks of 6 codes, 6 steps, 2 caption classes.
struct LmWorld {
    fs::path dir;
    RunConfig base;
};

LmWorld make_lm_world(const std::string& name) {
    LmWorld w;
    w.dir = scratch(name);
    MarkovShape shape;
    shape.codebooks = 2;
    shape.cardinality = 6;
    shape.classes = 2;
    shape.caption_vocab = 4;
    shape.caption_length = 2;
    shape.sequence_length = 6;
    const MarkovSpec spec = random_markov_spec(shape, 5);
    save_markov_spec(w.dir / "spec.json", spec);
    save_token_corpus(w.dir / "corpus.kdtc", gen_token_corpus(spec, 48));
    RunConfig& c = w.base;
    c.teacher_lm.layers = 8;
    c.teacher_lm.heads = 2;
    c.teacher_lm.dim = 8;
    c.teacher_lm.codebooks = 2;
    c.teacher_lm.cardinality = 6;
    c.teacher_lm.max_time = 6;
    c.teacher_lm.cond_dim = 8;
    c.teacher_lm.ffn_mult = 2;
    c.conditioner.vocab = 4;
    c.conditioner.dim = 8;
    c.conditioner.layers = 2;
    c.conditioner.heads = 2;
    c.conditioner.max_len = 4;
    c.batch = 8;
    c.eval_contexts = 8;
    c.paths.corpus = (w.dir / "corpus.kdtc").string();
    c.paths.markov_spec = (w.dir / "spec.json").string();
    return w;
}

RunConfig teacher_run(const LmWorld& w, std::uint64_t seed, std::size_t steps, const std::string& tag) {
    RunConfig c = w.base;
    c.task = Task::train_teacher;
    c.seed = seed;
    c.steps = steps;
    c.optimizer.lr = 3e-3;
    c.paths.output = (w.dir / (tag + ".ckpt")).string();
    c.paths.log = (w.dir / (tag + ".jsonl")).string();
    return c;
}

}  // namespace

// ---------------------------------------------------------------------------
// Optimizer

TEST_CASE("zero gradient leaves parameters unchanged") {
    Rng rng(1);
    Tensor p = Tensor::randn({4}, rng);
    // Model parameters are always binary32 values.
    for (double& v : p.mutable_data()) {
        v = static_cast<float>(v);
    }
    p.set_requires_grad(true);
    const std::vector<double> before(p.data().begin(), p.data().end());
    Adam opt({{"p", p}}, OptimizerConfig{});
    for (double& g : p.mutable_grad()) {
        g = 0.0;
    }
    opt.step();
    CHECK(std::vector<double>(p.data().begin(), p.data().end()) == before);
}

TEST_CASE("constant gradient gives steps of size lr in the sign direction") {
    Tensor p({3}, std::vector<double>{0.0, 0.0, 0.0});
    p.set_requires_grad(true);
    OptimizerConfig cfg;
    cfg.lr = 1e-3;
    cfg.clip = 0.0;
    Adam opt({{"p", p}}, cfg);
    const std::vector<double> g = {0.5, -2.0, 1e-3};
    std::vector<double> prev(3, 0.0);
    for (int i = 0; i < 200; ++i) {
        auto grad = p.mutable_grad();
        std::copy(g.begin(), g.end(), grad.begin());
        opt.step();
        for (std::size_t j = 0; j < 3; ++j) {
            const double delta = p.data()[j] - prev[j];
            CHECK(std::abs(std::abs(delta) - cfg.lr) < 2e-5);
            CHECK((delta < 0) == (g[j] > 0));
            prev[j] = p.data()[j];
        }
    }
}

TEST_CASE("gradient of norm 10 with clip 1 is rescaled by 0.1") {
    // A large eps makes the Adam step depend on the gradient scale:
    // the first update is lr * g / (|g| + eps) per component.
    for (const double clip : {1.0, 0.0}) {
        Tensor p({2}, std::vector<double>{0.0, 0.0});
        p.set_requires_grad(true);
        OptimizerConfig cfg;
        cfg.lr = 0.5;
        cfg.eps = 1.0;
        cfg.clip = clip;
        Adam opt({{"p", p}}, cfg);
        auto grad = p.mutable_grad();
        grad[0] = 6.0;
        grad[1] = 8.0;
        CHECK(opt.step() == doctest::Approx(10.0));
        const double scale = clip > 0.0 ? 0.1 : 1.0;
        for (std::size_t j = 0; j < 2; ++j) {
            const double g = (j == 0 ? 6.0 : 8.0) * scale;
            CHECK(p.data()[j] == doctest::Approx(-0.5 * g / (g + 1.0)).epsilon(1e-6));
        }
    }
}

TEST_CASE("non-finite gradients abort with the parameter name") {
    Tensor a({2}, 1.0);
    Tensor b({2}, 1.0);
    a.set_requires_grad(true);
    b.set_requires_grad(true);
    Adam opt({{"alpha", a}, {"beta.weight", b}}, OptimizerConfig{});
    a.mutable_grad()[0] = 0.1;
    b.mutable_grad()[1] = std::nan("");
    try {
        opt.step();
        FAIL("expected NumericError");
    } catch (const NumericError& e) {
        CHECK(std::string(e.what()).find("beta.weight") != std::string::npos);
    }
    CHECK(a.data()[0] == 1.0);
}

// ---------------------------------------------------------------------------
// Configs and row labels

TEST_CASE("every LM ablation row maps to one constructible config") {
    const std::vector<std::string> rows = {
        "Teacher Random",       "Teacher FT Weight Copy", "V1 H Random",      "V1 S Random",
        "V1 H Weight copy",     "V1 S Weight copy",       "V1 H/mse Random",  "V1 S/mse Random",
        "V1 H/S/mse Random",    "V2 H Random",            "V2 S Random",      "V2 H/mse Random",
        "V2 S/mse Random",      "V2 H/S/mse Random",      "V2 H/S/mse/S1 Random", "V2 H/S/mse/S2 Random",
    };
    RunConfig base;
    base.paths.teacher = "teacher.ckpt";
    std::set<std::string> hashes;
    for (const std::string& row : rows) {
        CAPTURE(row);
        const RunConfig c = config_for_row(row, base);
        CHECK_NOTHROW(c.validate());
        CHECK(hashes.insert(c.hash()).second);
        // The label round-trips up to capitalization.
        CHECK(config_for_row(row_label(c), base).hash() == c.hash());
    }
    const RunConfig v2 = config_for_row("V2 H/S/mse/S2", base);
    CHECK(v2.sampling == SamplingStrategy::s2);
    CHECK(v2.losses.hard);
    CHECK(v2.losses.soft);
    CHECK(v2.losses.mse);
    CHECK(v2.variant == Variant::v2);
    const RunConfig copy = config_for_row("V1 S Weight copy", base);
    CHECK(copy.init == InitStrategy::transfer);
    CHECK(copy.losses.label() == "S");
    CHECK(copy.resolved_student_lm().dim == base.teacher_lm.dim);
}

TEST_CASE("invalid combinations are rejected") {
    RunConfig base;
    base.paths.teacher = "t.ckpt";
    CHECK_THROWS_AS(config_for_row("V3 H", base), ConfigError);
    CHECK_THROWS_AS(config_for_row("V1 X", base), ConfigError);
    CHECK_THROWS_AS(config_for_row("V1 H/H", base), ConfigError);
    // Sampling needs at least two active terms.
    CHECK_THROWS_AS(config_for_row("V1 H/S1", base).validate(), ConfigError);
    // Weight copy into the narrower variant names both widths.
    try {
        config_for_row("V2 H Weight copy", base).validate();
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        CHECK(std::string(e.what()).find("24") != std::string::npos);
        CHECK(std::string(e.what()).find("32") != std::string::npos);
    }
}

TEST_CASE("variant geometries follow the teacher") {
    const LmConfig t = LmConfig::desk_teacher();
    const LmConfig v1 = variant_geometry(t, Variant::v1);
    const LmConfig v2 = variant_geometry(t, Variant::v2);
    CHECK(v1.layers == 4);
    CHECK(v1.dim == t.dim);
    CHECK(v2.layers == 7);
    CHECK(v2.heads == 2);
    CHECK(v2.dim == 24);
    CHECK(v2.dim == LmConfig::desk_v2().dim);
    // V2 keeps the parameter budget close to V1.
    const double ratio = static_cast<double>(v2.parameter_count()) / static_cast<double>(v1.parameter_count());
    CHECK(ratio > 0.7);
    CHECK(ratio < 1.4);
}

TEST_CASE("run config JSON round trips and rejects unknown keys") {
    RunConfig c = config_for_row("V2 H/S/mse/S1");
    c.mse_rule = MappingRule::first_anchored;
    c.lambdas.weight_factor = 0.75;
    c.student_lm = LmConfig::desk_v2();
    c.paths.teacher = "a";
    const nlohmann::json j = to_json(c);
    const RunConfig back = run_config_from_json(j);
    CHECK(to_json(back) == j);
    CHECK(back.hash() == c.hash());

    nlohmann::json bad = j;
    bad["optimiser"] = {{"lr", 1}};
    CHECK_THROWS_AS(run_config_from_json(bad), ConfigError);
    bad = j;
    bad["optimizer"]["momentum"] = 0.9;
    CHECK_THROWS_AS(run_config_from_json(bad), ConfigError);
    bad = j;
    bad["steps"] = -3;
    CHECK_THROWS_AS(run_config_from_json(bad), ConfigError);
    bad = j;
    bad["sampling"] = "s3";
    CHECK_THROWS_AS(run_config_from_json(bad), ConfigError);
}

// ---------------------------------------------------------------------------
// Training runs

TEST_CASE("teacher loss decreases over the first 100 steps") {
    const LmWorld w = make_lm_world("teacher_loss");
    int passed = 0;
    for (std::uint64_t seed : {1, 2, 3}) {
        RunConfig c = teacher_run(w, seed, 100, "t" + std::to_string(seed));
        c.paths.markov_spec.clear();
        train_teacher(c);
        const auto lines = log_lines(c.paths.log);
        REQUIRE(lines.size() == 100);
        double head = 0.0, tail = 0.0;
        for (int i = 0; i < 10; ++i) {
            head += lines[i]["loss"]["total"].get<double>();
            tail += lines[90 + i]["loss"]["total"].get<double>();
        }
        passed += tail < head ? 1 : 0;
    }
    CHECK(passed >= 2);
}

TEST_CASE("identical seeds give identical logs and checkpoints") {
    const LmWorld w = make_lm_world("determinism");
    RunConfig a = teacher_run(w, 7, 12, "a");
    RunConfig b = teacher_run(w, 7, 12, "b");
    a.eval_every = 4;
    b.eval_every = 4;
    const TrainResult ra = train_teacher(a);
    const TrainResult rb = train_teacher(b);
    CHECK(slurp(a.paths.log) == slurp(b.paths.log));
    CHECK(slurp(a.paths.output) == slurp(b.paths.output));
    CHECK(ra.parameter_hash == rb.parameter_hash);
    RunConfig c = teacher_run(w, 8, 12, "c");
    train_teacher(c);
    CHECK(slurp(a.paths.output) != slurp(c.paths.output));

    // Distillation with sampled weights is deterministic too.
    RunConfig d1 = config_for_row("V2 H/S/mse/S2", w.base);
    d1.steps = 6;
    d1.paths.teacher = a.paths.output;
    d1.paths.output = (w.dir / "d1.ckpt").string();
    d1.paths.log = (w.dir / "d1.jsonl").string();
    RunConfig d2 = d1;
    d2.paths.output = (w.dir / "d2.ckpt").string();
    d2.paths.log = (w.dir / "d2.jsonl").string();
    distill_lm(d1);
    distill_lm(d2);
    CHECK(slurp(d1.paths.log) == slurp(d2.paths.log));
    CHECK(slurp(d1.paths.output) == slurp(d2.paths.output));
}

TEST_CASE("teacher training rejects a corpus that does not fit the model") {
    LmWorld w = make_lm_world("schema");
    RunConfig c = teacher_run(w, 1, 2, "bad");
    c.teacher_lm.cardinality = 7;
    CHECK_THROWS_AS(train_teacher(c), ConfigError);
    c = teacher_run(w, 1, 2, "bad");
    c.teacher_lm.max_time = 4;
    CHECK_THROWS_AS(train_teacher(c), ConfigError);
    c = teacher_run(w, 1, 2, "bad");
    c.batch = 100;
    CHECK_THROWS_AS(train_teacher(c), ConfigError);
}

TEST_CASE("LM distillation: logged terms, weights and a frozen teacher") {
    const LmWorld w = make_lm_world("distill");
    const RunConfig t = teacher_run(w, 3, 20, "teacher");
    train_teacher(t);
    const std::string teacher_bytes = slurp(t.paths.output);

    SUBCASE("hard-only step loss is exactly l_s times the student loss") {
        RunConfig c = config_for_row("V1 H", w.base);
        c.scales.student = 0.37;
        c.steps = 5;
        c.paths.teacher = t.paths.output;
        c.paths.output = (w.dir / "h.ckpt").string();
        c.paths.log = (w.dir / "h.jsonl").string();
        distill_lm(c);
        for (const auto& line : log_lines(c.paths.log)) {
            const double student = line["loss"]["student"].get<double>();
            CHECK(line["loss"]["total"].get<double>() == 0.37 * student);
            CHECK(line["weights"].is_null());
            CHECK(!line["loss"].contains("teacher"));
        }
    }
    SUBCASE("sampled weights lie on the simplex and vary") {
        RunConfig c = config_for_row("V2 H/S/mse/S1", w.base);
        c.steps = 8;
        c.paths.teacher = t.paths.output;
        c.paths.output = (w.dir / "s.ckpt").string();
        c.paths.log = (w.dir / "s.jsonl").string();
        const TrainResult r = distill_lm(c);
        std::set<double> first;
        for (const auto& line : log_lines(c.paths.log)) {
            const auto a = line["weights"].get<std::vector<double>>();
            REQUIRE(a.size() == 3);
            CHECK(a[0] + a[1] + a[2] == doctest::Approx(1.0).epsilon(1e-12));
            for (double v : a) {
                CHECK(v >= 0.0);
            }
            first.insert(a[0]);
        }
        CHECK(first.size() > 1);
        CHECK(r.manifest["teacher_hash"] == read_manifest(t.paths.output)["parameter_hash"]);
        CHECK(r.manifest.contains("projection_hash"));
        CHECK(r.manifest["mapping"]["mse"] == nlohmann::json(std::vector<std::size_t>{0, 1, 2, 3, 4, 5, 7}));
        // The student bundle loads and evaluates.
        const LmBundle student = load_lm_bundle(c.paths.output);
        CHECK(student.lm.config().layers == 7);
    }
    SUBCASE("inactive terms get zero weight") {
        RunConfig c = config_for_row("V1 S/mse/S2", w.base);
        c.steps = 4;
        c.paths.teacher = t.paths.output;
        c.paths.output = (w.dir / "sm.ckpt").string();
        c.paths.log = (w.dir / "sm.jsonl").string();
        distill_lm(c);
        for (const auto& line : log_lines(c.paths.log)) {
            const auto a = line["weights"].get<std::vector<double>>();
            CHECK(a[0] == 0.0);
            CHECK(a[1] + a[2] == doctest::Approx(1.0).epsilon(1e-12));
        }
    }
    SUBCASE("weight copy starts from the teacher's mapped blocks") {
        RunConfig c = config_for_row("V1 S Weight copy", w.base);
        c.steps = 1;
        c.optimizer.lr = 1e-12;
        c.paths.teacher = t.paths.output;
        c.paths.output = (w.dir / "wc.ckpt").string();
        const TrainResult r = distill_lm(c);
        CHECK(r.manifest["mapping"]["transfer"] == nlohmann::json(std::vector<std::size_t>{1, 3, 5, 7}));
        const LmBundle teacher = load_lm_bundle(t.paths.output);
        const LmBundle student = load_lm_bundle(c.paths.output);
        const auto tp = teacher.lm.block_parameters(7);
        const auto sp = student.lm.block_parameters(3);
        REQUIRE(tp.size() == sp.size());
        double diff = 0.0;
        for (std::size_t i = 0; i < tp.size(); ++i) {
            for (std::size_t j = 0; j < tp[i].second.numel(); ++j) {
                diff = std::max(diff, std::abs(tp[i].second.at(j) - sp[i].second.at(j)));
            }
        }
        CHECK(diff < 1e-9);
    }
    SUBCASE("conditioner layers can be dropped") {
        RunConfig c = config_for_row("V1 H", w.base);
        c.steps = 2;
        c.conditioner_drop = 1;
        c.paths.teacher = t.paths.output;
        c.paths.output = (w.dir / "drop.ckpt").string();
        distill_lm(c);
        CHECK(load_lm_bundle(c.paths.output).conditioner.layer_count() == 1);
    }
    CHECK(slurp(t.paths.output) == teacher_bytes);
}

TEST_CASE("trained teacher beats its initialization on exact KL") {
    const LmWorld w = make_lm_world("kl_regression");
    RunConfig c = teacher_run(w, 2, 150, "kl");
    c.eval_contexts = 32;
    const TrainResult r = train_teacher(c);
    REQUIRE(r.initial_metric);
    REQUIRE(r.final_metric);
    CHECK(*r.final_metric < *r.initial_metric);
}

// ---------------------------------------------------------------------------
// Codec

namespace {

struct CodecWorld {
    fs::path dir;
    RunConfig base;
};

CodecWorld make_codec_world(const std::string& name) {
    CodecWorld w;
    w.dir = scratch(name);
    WaveSpec spec;
    spec.clip_length = 256;
    spec.seed = 3;
    write_wave_corpus(w.dir / "train", spec, 16);
    spec.seed = 4;
    write_wave_corpus(w.dir / "eval", spec, 4);
    RunConfig& c = w.base;
    c.teacher_codec.base_channels = 4;
    c.teacher_codec.strides = {2, 4};
    c.teacher_codec.latent_dim = 8;
    c.teacher_codec.rvq_codebook_size = 16;
    c.teacher_codec.decoder_channels = 4;
    c.student_codec = c.teacher_codec;
    c.student_codec.decoder_channels = 2;
    c.discriminator.count = 2;
    c.discriminator.layers = 2;
    c.discriminator.channels = 4;
    c.mel.scales = {5, 6};
    c.mel.mel_bins = 8;
    c.batch = 4;
    c.eval_contexts = 4;
    c.paths.corpus = (w.dir / "train").string();
    c.paths.eval_corpus = (w.dir / "eval").string();
    return w;
}

}  // namespace

TEST_CASE("codec teacher and decoder distillation") {
    const CodecWorld w = make_codec_world("codec");
    RunConfig t = w.base;
    t.task = Task::train_teacher;
    t.model = ModelKind::codec;
    t.steps = 10;
    t.optimizer.lr = 3e-3;
    t.paths.output = (w.dir / "teacher.ckpt").string();
    const TrainResult tr = train_teacher(t);
    CHECK(*tr.final_metric < *tr.initial_metric);
    const Codec teacher = load_codec_bundle(t.paths.output);
    for (std::size_t s = 0; s < teacher.quantizer().stages(); ++s) {
        for (std::size_t j = 0; j < teacher.config().latent_dim; ++j) {
            CHECK(teacher.quantizer().codebook(s).at(j) == 0.0);
        }
    }

    for (double wf : {0.75, 1.0, 1.25}) {
        CAPTURE(wf);
        RunConfig c = w.base;
        c.task = Task::distill_codec;
        c.steps = 6;
        c.lambdas.weight_factor = wf;
        c.paths.teacher = t.paths.output;
        c.paths.output = (w.dir / "student.ckpt").string();
        c.paths.log = (w.dir / "student.jsonl").string();
        const TrainResult r = distill_codec(c);
        const Codec student = load_codec_bundle(c.paths.output);
        CHECK(student.config().decoder_channels == 2);
        CHECK(parameter_hash(student.encoder_parameters()) == parameter_hash(teacher.encoder_parameters()));
        CHECK(parameter_hash(student.quantizer_parameters()) == parameter_hash(teacher.quantizer_parameters()));
        const auto lines = log_lines(c.paths.log);
        REQUIRE(lines.size() == 6);
        CHECK(lines[0].contains("disc_loss"));
        CHECK(r.manifest["config"]["lambdas"]["weight_factor"].get<double>() == wf);
    }

    const CodecEval e = evaluate_codec(teacher, read_wave_corpus(w.dir / "eval").clips, w.base.mel);
    CHECK(e.mel > 0.0);
    CHECK(e.frechet >= 0.0);
    CHECK(e.kl >= 0.0);

    RunConfig bad = w.base;
    bad.task = Task::distill_codec;
    bad.paths.teacher = t.paths.output;
    bad.paths.output = (w.dir / "x.ckpt").string();
    bad.student_codec.latent_dim = 4;
    CHECK_THROWS_AS(distill_codec(bad), ConfigError);
}

TEST_CASE("codec runs reject clips that do not fit the strides") {
    CodecWorld w = make_codec_world("codec_bad");
    WaveSpec spec;
    spec.clip_length = 100;
    write_wave_corpus(w.dir / "odd", spec, 4);
    RunConfig t = w.base;
    t.task = Task::train_teacher;
    t.model = ModelKind::codec;
    t.steps = 1;
    t.paths.corpus = (w.dir / "odd").string();
    t.paths.output = (w.dir / "t.ckpt").string();
    CHECK_THROWS_AS(train_teacher(t), ConfigError);
}
