// SPDX-License-Identifier: Apache-2.0
//
// kdforge command-line entry point. Machine-readable results go to stdout
// as JSON (CSV for sample-weights); progress and diagnostics go to stderr.
// Exit codes: 0 success, 1 validation error, 2 runtime error.
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "kdforge/checkpoint.hpp"
#include "kdforge/data_synth.hpp"
#include "kdforge/errors.hpp"
#include "kdforge/gradcheck_suite.hpp"
#include "kdforge/metrics.hpp"
#include "kdforge/run_config.hpp"
#include "kdforge/sampling.hpp"
#include "kdforge/threads.hpp"
#include "kdforge/trainer.hpp"

using namespace kdforge;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kEvalSeedOffset = 0x5EED;

void emit(const json& j) {
    std::cout << j.dump(2) << '\n';
}

// ---------------------------------------------------------------------------
// gen-data

struct TokenArgs {
    std::string out;
    std::string spec_path;
    std::size_t clips = 1024;
    std::uint64_t seed = 1;
    MarkovShape shape;
};

struct WaveArgs {
    std::string out;
    std::size_t clips = 64;
    WaveSpec spec;
};

json gen_tokens(const TokenArgs& a) {
    MarkovSpec spec;
    if (a.spec_path.empty()) {
        spec = random_markov_spec(a.shape, a.seed);
    } else {
        // Reuse an existing chain, sampling fresh clips under the given seed.
        spec = load_markov_spec(a.spec_path);
        spec.seed = a.seed;
    }
    fs::create_directories(a.out);
    const fs::path corpus = fs::path(a.out) / "corpus.kdtc";
    const fs::path spec_file = fs::path(a.out) / "spec.json";
    save_token_corpus(corpus, gen_token_corpus(spec, a.clips));
    save_markov_spec(spec_file, spec);
    return {{"kind", "tokens"},
            {"corpus", corpus.string()},
            {"spec", spec_file.string()},
            {"clips", a.clips},
            {"codebooks", spec.codebooks},
            {"cardinality", spec.cardinality},
            {"sequence_length", spec.sequence_length},
            {"seed", a.seed}};
}

json gen_waves(const WaveArgs& a) {
    a.spec.validate();
    write_wave_corpus(a.out, a.spec, a.clips);
    return {{"kind", "waves"},
            {"dir", a.out},
            {"manifest", (fs::path(a.out) / "manifest.json").string()},
            {"clips", a.clips},
            {"spec_hash", a.spec.hash()},
            {"seed", a.spec.seed}};
}

// ---------------------------------------------------------------------------
// training subcommands

struct TrainArgs {
    std::string config;
    std::string row;
    std::string losses;
    std::string sampling;
    std::string init;
    std::string variant;
    std::string model;
    std::string transfer_rule;
    std::string mse_rule;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> steps;
    std::optional<std::size_t> batch;
    std::optional<std::size_t> eval_every;
    std::optional<std::size_t> eval_contexts;
    std::optional<std::size_t> conditioner_drop;
    std::optional<double> lr;
    std::optional<double> weight_factor;
    std::string corpus;
    std::string eval_corpus;
    std::string markov_spec;
    std::string teacher;
    std::string output;
    std::string log;
    bool wall_time = false;
    bool dry_run = false;
};

void add_train_options(CLI::App* sub, TrainArgs& a, bool is_teacher, bool is_lm_distill) {
    sub->add_option("--config", a.config, "Run config JSON; flags below override its fields")->check(CLI::ExistingFile);
    if (is_lm_distill) {
        sub->add_option("--row", a.row, "Ablation row label, e.g. \"V2 H/S/mse/S2\" or \"V1 S Weight copy\"");
        sub->add_option("--losses", a.losses, "Active loss terms, subset of H,S,mse");
        sub->add_option("--sampling", a.sampling, "Loss-weight sampling: none, s1 or s2");
        sub->add_option("--init", a.init, "Student initialization: random or transfer");
        sub->add_option("--variant", a.variant, "Student geometry: v1 or v2");
        sub->add_option("--transfer-rule", a.transfer_rule, "Layer mapping for weight copy");
        sub->add_option("--mse-rule", a.mse_rule, "Layer mapping for the intermediate loss");
        sub->add_option("--conditioner-drop", a.conditioner_drop, "Caption-encoder layers to drop");
        sub->add_option("--markov-spec", a.markov_spec, "Markov spec JSON for exact-KL evaluation");
    }
    if (is_teacher) {
        sub->add_option("--model", a.model, "Teacher kind: lm or codec");
        sub->add_option("--markov-spec", a.markov_spec, "Markov spec JSON for exact-KL evaluation (lm)");
        sub->add_option("--eval-corpus", a.eval_corpus, "Held-out wave corpus directory (codec)");
        sub->add_option("--init", a.init, "random, or transfer to fine-tune from --teacher");
    }
    if (!is_teacher && !is_lm_distill) {
        sub->add_option("--weight-factor", a.weight_factor, "Scale applied to the codec loss weights");
        sub->add_option("--eval-corpus", a.eval_corpus, "Held-out wave corpus directory");
    }
    sub->add_option("--seed", a.seed, "Run seed");
    sub->add_option("--steps", a.steps, "Optimizer steps");
    sub->add_option("--batch", a.batch, "Batch size");
    sub->add_option("--lr", a.lr, "Learning rate");
    sub->add_option("--eval-every", a.eval_every, "Evaluation interval in steps (0: start and end only)");
    sub->add_option("--eval-contexts", a.eval_contexts, "Sequences or clips used for evaluation");
    sub->add_option("--corpus", a.corpus, "Training corpus (token file or wave directory)");
    sub->add_option("--teacher", a.teacher, "Teacher checkpoint");
    sub->add_option("--output", a.output, "Checkpoint to write");
    sub->add_option("--log", a.log, "JSON-lines metrics log");
    sub->add_flag("--log-wall-time", a.wall_time, "Add wall-clock seconds to log lines");
    sub->add_flag("--dry-run", a.dry_run, "Print the resolved config and exit");
}

RunConfig resolve_config(const TrainArgs& a, Task task) {
    RunConfig cfg;
    if (!a.config.empty()) {
        cfg = load_run_config(a.config);
    }
    cfg.task = task;
    if (!a.row.empty()) {
        cfg = config_for_row(a.row, cfg);
        if (cfg.task != task) {
            throw ConfigError("--row '" + a.row + "' does not describe a " + to_string(task) + " run");
        }
    }
    if (!a.losses.empty()) {
        cfg.losses = parse_loss_flags(a.losses);
    }
    if (!a.sampling.empty()) {
        cfg.sampling = parse_sampling(a.sampling);
    }
    if (!a.init.empty()) {
        cfg.init = parse_init(a.init);
    }
    if (!a.variant.empty()) {
        cfg.variant = parse_variant(a.variant);
    }
    if (!a.model.empty()) {
        cfg.model = parse_model_kind(a.model);
    }
    if (!a.transfer_rule.empty()) {
        cfg.transfer_rule = parse_mapping_rule(a.transfer_rule);
    }
    if (!a.mse_rule.empty()) {
        cfg.mse_rule = parse_mapping_rule(a.mse_rule);
    }
    if (a.seed) cfg.seed = *a.seed;
    if (a.steps) cfg.steps = *a.steps;
    if (a.batch) cfg.batch = *a.batch;
    if (a.lr) cfg.optimizer.lr = *a.lr;
    if (a.eval_every) cfg.eval_every = *a.eval_every;
    if (a.eval_contexts) cfg.eval_contexts = *a.eval_contexts;
    if (a.conditioner_drop) cfg.conditioner_drop = *a.conditioner_drop;
    if (a.weight_factor) cfg.lambdas.weight_factor = *a.weight_factor;
    if (a.wall_time) cfg.log_wall_time = true;
    if (!a.corpus.empty()) cfg.paths.corpus = a.corpus;
    if (!a.eval_corpus.empty()) cfg.paths.eval_corpus = a.eval_corpus;
    if (!a.markov_spec.empty()) cfg.paths.markov_spec = a.markov_spec;
    if (!a.teacher.empty()) cfg.paths.teacher = a.teacher;
    if (!a.output.empty()) cfg.paths.output = a.output;
    if (!a.log.empty()) cfg.paths.log = a.log;
    if (task == Task::distill_codec) {
        cfg.model = ModelKind::codec;
    } else if (task == Task::distill_lm) {
        cfg.model = ModelKind::lm;
    }
    cfg.validate();
    return cfg;
}

json run_train(const TrainArgs& a, Task task) {
    const RunConfig cfg = resolve_config(a, task);
    std::cerr << "config hash: " << cfg.hash() << '\n';
    if (a.dry_run) {
        return {{"config", to_json(cfg)}, {"config_hash", cfg.hash()}, {"row_label", row_label(cfg)}};
    }
    if (cfg.paths.output.empty()) {
        throw ConfigError("--output is required");
    }
    const TrainResult r = run_training(cfg, &std::cerr);
    json out = {{"checkpoint", r.checkpoint},
                {"config_hash", cfg.hash()},
                {"parameter_hash", r.parameter_hash},
                {"steps", r.steps},
                {"first_loss", r.first_loss},
                {"final_loss", r.final_loss},
                {"initial_metric", r.initial_metric ? json(*r.initial_metric) : json(nullptr)},
                {"final_metric", r.final_metric ? json(*r.final_metric) : json(nullptr)}};
    if (task == Task::distill_lm) {
        out["row_label"] = row_label(cfg);
    }
    return out;
}

// ---------------------------------------------------------------------------
// eval

struct EvalArgs {
    std::string checkpoint;
    std::string markov_spec;
    std::string corpus;
    std::string reference;
    std::size_t contexts = 256;
    std::uint64_t seed = 1;
    std::uint64_t extractor_seed = ExtractorConfig{}.seed;
};

json run_eval(const EvalArgs& a) {
    const json manifest = read_manifest(a.checkpoint);
    const std::string kind = manifest.at("model").at("kind").get<std::string>();
    if (kind == "lm") {
        if (a.markov_spec.empty()) {
            throw ConfigError("eval: LM checkpoints need --markov-spec");
        }
        const LmBundle bundle = load_lm_bundle(a.checkpoint);
        const MarkovSpec spec = load_markov_spec(a.markov_spec);
        const double kl = exact_conditional_kl(lm_posteriors(bundle), spec, a.contexts, a.seed + kEvalSeedOffset);
        return {{"kind", "lm"}, {"kl", kl}, {"n_contexts", a.contexts}, {"seed", a.seed}};
    }
    if (a.corpus.empty()) {
        throw ConfigError("eval: codec checkpoints need --corpus");
    }
    const Codec codec = load_codec_bundle(a.checkpoint);
    const WaveCorpus clips = read_wave_corpus(a.corpus);
    MelConfig mel = run_config_from_json(manifest.at("config")).mel;
    const CodecEval e = evaluate_codec(codec, clips.clips, mel);
    json out = {{"kind", "codec"},
                {"mel", e.mel},
                {"time_l1", e.time_l1},
                {"frechet", e.frechet},
                {"kl", e.kl},
                {"n_samples", clips.clips.size()},
                {"extractor_seed", ExtractorConfig{}.seed}};
    if (!a.reference.empty()) {
        // Compares the corpus itself with a reference corpus, no codec involved.
        ExtractorConfig ec;
        ec.seed = a.extractor_seed;
        const ToyFeatureExtractor fx(ec);
        const ExtractedFeatures gen = fx.extract(clips.clips, worker_threads());
        const ExtractedFeatures ref = fx.extract(read_wave_corpus(a.reference).clips, worker_threads());
        out["corpus_vs_reference"] = {
            {"frechet", frechet_distance(gaussian_stats(gen.embeddings), gaussian_stats(ref.embeddings))},
            {"kl", pairwise_kl(gen.posteriors, ref.posteriors)},
            {"extractor_seed", a.extractor_seed}};
    }
    return out;
}

// ---------------------------------------------------------------------------
// inspect-checkpoint

json inspect(const std::string& path) {
    const NamedTensors tensors = load_checkpoint(path);
    json list = json::array();
    std::size_t total = 0;
    for (const auto& [name, t] : tensors) {
        list.push_back({{"name", name}, {"shape", t.shape()}});
        total += t.numel();
    }
    json out = {{"path", path},
                {"tensors", list},
                {"parameters", total},
                {"parameter_hash", parameter_hash(tensors)}};
    if (fs::exists(path + ".json")) {
        out["manifest"] = read_manifest(path);
    }
    return out;
}

int fail(int code, const std::string& what) {
    std::cerr << "error: " << what << '\n';
    return code;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"kdforge: distillation toolkit for token language models and audio codecs"};
    app.require_subcommand(1);
    app.set_version_flag("--version", KDFORGE_VERSION);

    // gen-data
    CLI::App* gen = app.add_subcommand("gen-data", "Generate synthetic corpora");
    gen->require_subcommand(1);
    TokenArgs tok;
    CLI::App* gen_tok = gen->add_subcommand("tokens", "Markov token corpus plus its spec");
    gen_tok->add_option("--out", tok.out, "Output directory")->required();
    gen_tok->add_option("--clips", tok.clips, "Number of clips");
    gen_tok->add_option("--seed", tok.seed, "Seed for the chain and the clips");
    gen_tok->add_option("--spec", tok.spec_path, "Reuse this Markov spec instead of drawing a new one")
        ->check(CLI::ExistingFile);
    gen_tok->add_option("--codebooks", tok.shape.codebooks, "Parallel codebooks");
    gen_tok->add_option("--cardinality", tok.shape.cardinality, "Codes per codebook");
    gen_tok->add_option("--classes", tok.shape.classes, "Caption classes");
    gen_tok->add_option("--caption-vocab", tok.shape.caption_vocab, "Caption vocabulary size");
    gen_tok->add_option("--caption-length", tok.shape.caption_length, "Caption tokens per clip");
    gen_tok->add_option("--length", tok.shape.sequence_length, "Time steps per clip");
    gen_tok->add_option("--support", tok.shape.support, "Nonzero transition entries before smoothing");
    gen_tok->add_option("--smoothing", tok.shape.smoothing, "Probability mass spread uniformly per row");
    WaveArgs wav;
    CLI::App* gen_wav = gen->add_subcommand("waves", "Sinusoid-mixture WAV corpus plus manifest");
    gen_wav->add_option("--out", wav.out, "Output directory")->required();
    gen_wav->add_option("--clips", wav.clips, "Number of clips");
    gen_wav->add_option("--seed", wav.spec.seed, "Seed");
    gen_wav->add_option("--length", wav.spec.clip_length, "Samples per clip");
    gen_wav->add_option("--sample-rate", wav.spec.sample_rate, "Sample rate in Hz");
    gen_wav->add_option("--min-components", wav.spec.min_components, "Fewest sinusoids per clip");
    gen_wav->add_option("--max-components", wav.spec.max_components, "Most sinusoids per clip");
    gen_wav->add_option("--min-freq", wav.spec.min_freq, "Lowest frequency in Hz");
    gen_wav->add_option("--max-freq", wav.spec.max_freq, "Highest frequency in Hz");
    gen_wav->add_option("--noise", wav.spec.noise_floor, "Gaussian noise level before normalization");

    // training
    TrainArgs teacher_args;
    CLI::App* teacher = app.add_subcommand("train-teacher", "Train an LM or codec teacher");
    add_train_options(teacher, teacher_args, true, false);
    TrainArgs lm_args;
    CLI::App* lm = app.add_subcommand("distill-lm", "Distill a student LM from a teacher checkpoint");
    add_train_options(lm, lm_args, false, true);
    TrainArgs codec_args;
    CLI::App* codec = app.add_subcommand("distill-codec", "Distill a codec decoder from a teacher checkpoint");
    add_train_options(codec, codec_args, false, false);

    // eval
    EvalArgs eval_args;
    CLI::App* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
    eval->add_option("--checkpoint", eval_args.checkpoint, "Checkpoint with its manifest")
        ->required()
        ->check(CLI::ExistingFile);
    eval->add_option("--markov-spec", eval_args.markov_spec, "Markov spec JSON (LM)");
    eval->add_option("--contexts", eval_args.contexts, "Sequences for the exact KL (LM)");
    eval->add_option("--seed", eval_args.seed, "Evaluation seed (LM)");
    eval->add_option("--corpus", eval_args.corpus, "Wave corpus to reconstruct (codec)");
    eval->add_option("--reference", eval_args.reference, "Also compare --corpus against this wave corpus");
    eval->add_option("--extractor-seed", eval_args.extractor_seed, "Feature-extractor seed for --reference");

    // sample-weights
    std::string strategy = "s2";
    std::size_t count = 10;
    std::uint64_t weight_seed = 1;
    std::size_t terms = 3;
    CLI::App* weights = app.add_subcommand("sample-weights", "Draw loss weights as CSV rows");
    weights->add_option("--strategy", strategy, "s1 or s2")->check(CLI::IsMember({"s1", "s2"}));
    weights->add_option("--count", count, "Number of draws");
    weights->add_option("--seed", weight_seed, "Seed");
    weights->add_option("--terms", terms, "Weights per draw")->check(CLI::Range(2, 64));

    // gradcheck
    bool all = false;
    std::string kernel;
    std::size_t seeds = 10;
    CLI::App* grad = app.add_subcommand("gradcheck", "Central-difference gradient checks");
    grad->add_flag("--all", all, "Check every kernel and loss");
    grad->add_option("--kernel", kernel, "Check one kernel by name");
    grad->add_option("--seeds", seeds, "Random inputs per kernel");
    bool list = false;
    grad->add_flag("--list", list, "List kernel names");

    // inspect-checkpoint
    std::string inspect_path;
    CLI::App* ins = app.add_subcommand("inspect-checkpoint", "Print tensor names, shapes and the manifest");
    ins->add_option("checkpoint", inspect_path, "Checkpoint file")->required()->check(CLI::ExistingFile);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }

    try {
        if (gen_tok->parsed()) {
            emit(gen_tokens(tok));
        } else if (gen_wav->parsed()) {
            emit(gen_waves(wav));
        } else if (teacher->parsed()) {
            emit(run_train(teacher_args, Task::train_teacher));
        } else if (lm->parsed()) {
            emit(run_train(lm_args, Task::distill_lm));
        } else if (codec->parsed()) {
            emit(run_train(codec_args, Task::distill_codec));
        } else if (eval->parsed()) {
            emit(run_eval(eval_args));
        } else if (weights->parsed()) {
            Rng rng(weight_seed);
            const SamplingStrategy s = parse_sampling(strategy);
            for (std::size_t i = 0; i < count; ++i) {
                const SimplexWeights w = sample_weights(s, rng, terms);
                for (std::size_t j = 0; j < w.a.size(); ++j) {
                    std::printf(j ? ",%.17g" : "%.17g", w.a[j]);
                }
                std::printf("\n");
            }
        } else if (grad->parsed()) {
            if (list) {
                json names = json::array();
                for (const GradCheckCase& c : gradcheck_cases()) {
                    names.push_back(c.name);
                }
                emit(names);
                return 0;
            }
            if (all == !kernel.empty()) {
                throw ConfigError("gradcheck: pass exactly one of --all or --kernel");
            }
            const auto results = run_gradcheck_suite(seeds, 1, kernel);
            if (results.empty()) {
                throw ConfigError("gradcheck: unknown kernel '" + kernel + "'");
            }
            json out = json::object();
            bool ok = true;
            for (const GradCheckResult& r : results) {
                out[r.name] = r.max_error;
                ok = ok && r.max_error < 1e-3;
            }
            emit(out);
            if (!ok) {
                return fail(2, "gradcheck: some kernels exceed 1e-3");
            }
        } else if (ins->parsed()) {
            emit(inspect(inspect_path));
        }
    } catch (const ValidationError& e) {
        return fail(1, e.what());
    } catch (const std::exception& e) {
        return fail(2, e.what());
    }
    return 0;
}
