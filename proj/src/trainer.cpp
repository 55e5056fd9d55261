// SPDX-License-Identifier: Apache-2.0
#include "kdforge/trainer.hpp"

#include <chrono>
#include <fstream>
#include <ostream>
#include <sstream>

#include "kdforge/checkpoint.hpp"
#include "kdforge/codec_losses.hpp"
#include "kdforge/errors.hpp"
#include "kdforge/hash.hpp"
#include "kdforge/kd_losses.hpp"
#include "kdforge/mel.hpp"
#include "kdforge/metrics.hpp"
#include "kdforge/ops.hpp"
#include "kdforge/optim.hpp"
#include "kdforge/sampling.hpp"
#include "kdforge/threads.hpp"
#include "kdforge/transfer.hpp"

namespace kdforge {

using nlohmann::json;

namespace {

// Seed streams, one per source of randomness in a run.
constexpr std::uint64_t kInitStream = 1;
constexpr std::uint64_t kBatchStream = 2;
constexpr std::uint64_t kWeightStream = 3;
constexpr std::uint64_t kEvalSeedOffset = 0x5EED;

constexpr std::uint32_t kManifestVersion = 1;

NamedTensors prefixed(const std::string& prefix, const NamedTensors& params) {
    NamedTensors out;
    out.reserve(params.size());
    for (const auto& [name, t] : params) {
        out.emplace_back(prefix + name, t);
    }
    return out;
}

void append(NamedTensors& into, const NamedTensors& more) {
    into.insert(into.end(), more.begin(), more.end());
}

// Epoch-wise shuffled batches; a trailing partial batch is skipped.
class BatchSampler {
public:
    BatchSampler(std::size_t n, std::size_t batch, Rng rng) : n_(n), batch_(batch), rng_(rng) {
        if (batch_ > n_) {
            throw ConfigError("batch size " + std::to_string(batch_) + " exceeds the " + std::to_string(n_) +
                              " clips in the corpus");
        }
    }

    std::vector<std::size_t> next() {
        if (pos_ + batch_ > order_.size()) {
            order_.resize(n_);
            for (std::size_t i = 0; i < n_; ++i) {
                order_[i] = i;
            }
            for (std::size_t i = n_; i > 1; --i) {
                std::swap(order_[i - 1], order_[rng_.below(i)]);
            }
            pos_ = 0;
        }
        std::vector<std::size_t> out(order_.begin() + static_cast<std::ptrdiff_t>(pos_),
                                     order_.begin() + static_cast<std::ptrdiff_t>(pos_ + batch_));
        pos_ += batch_;
        return out;
    }

private:
    std::size_t n_;
    std::size_t batch_;
    Rng rng_;
    std::vector<std::size_t> order_;
    std::size_t pos_ = 0;
};

// JSON-lines metrics, one line per optimizer step. Lines are also hashed so
// the manifest can vouch for the log.
class MetricsLog {
public:
    MetricsLog(const std::string& path, bool wall_time) : wall_time_(wall_time), start_(clock::now()) {
        if (!path.empty()) {
            os_.open(path, std::ios::trunc);
            if (!os_) {
                throw Error("cannot open metrics log '" + path + "'");
            }
        }
    }

    void write(json line) {
        if (wall_time_) {
            line["wall_time"] = std::chrono::duration<double>(clock::now() - start_).count();
        }
        const std::string text = line.dump();
        hash_.update(text);
        hash_.update("\n");
        if (os_.is_open()) {
            os_ << text << '\n';
        }
    }

    std::string hash() const { return hash_.hex(); }

private:
    using clock = std::chrono::steady_clock;
    std::ofstream os_;
    bool wall_time_;
    clock::time_point start_;
    Fnv1a hash_;
};

void say(std::ostream* progress, const std::string& text) {
    if (progress) {
        *progress << text << '\n';
    }
}

bool should_report(std::size_t step, std::size_t steps) {
    const std::size_t every = std::max<std::size_t>(1, steps / 10);
    return step % every == 0 || step == steps;
}

bool should_eval(const RunConfig& cfg, std::size_t step) {
    return step == cfg.steps || (cfg.eval_every > 0 && step % cfg.eval_every == 0);
}

json base_manifest(const RunConfig& cfg) {
    return {{"format", "kdforge-run"},
            {"version", kManifestVersion},
            {"kdforge_version", KDFORGE_VERSION},
            {"task", to_string(cfg.task)},
            {"config", to_json(cfg)},
            {"config_hash", cfg.hash()},
            {"seed", cfg.seed}};
}

void write_manifest(const std::string& checkpoint, const json& manifest) {
    std::ofstream os(checkpoint + ".json", std::ios::trunc);
    if (!os) {
        throw Error("cannot write manifest '" + checkpoint + ".json'");
    }
    os << manifest.dump(2) << '\n';
}

void require_output(const RunConfig& cfg) {
    if (cfg.paths.output.empty()) {
        throw ConfigError("run config: paths.output is required");
    }
}

std::optional<MarkovSpec> maybe_spec(const RunConfig& cfg) {
    if (cfg.paths.markov_spec.empty()) {
        return std::nullopt;
    }
    return load_markov_spec(cfg.paths.markov_spec);
}

TokenCorpus load_checked_corpus(const RunConfig& cfg, const LmConfig& lm, const ConditionerConfig& cond) {
    if (cfg.paths.corpus.empty()) {
        throw ConfigError("run config: paths.corpus is required");
    }
    TokenCorpus corpus = load_token_corpus(cfg.paths.corpus);
    if (corpus.clips.empty()) {
        throw ConfigError("token corpus '" + cfg.paths.corpus + "' is empty");
    }
    if (corpus.codebooks != lm.codebooks || corpus.cardinality != lm.cardinality) {
        throw ConfigError("token corpus has K=" + std::to_string(corpus.codebooks) + ", C=" +
                          std::to_string(corpus.cardinality) + " but the model expects K=" +
                          std::to_string(lm.codebooks) + ", C=" + std::to_string(lm.cardinality));
    }
    for (const TokenClip& clip : corpus.clips) {
        if (clip.time > lm.max_time) {
            throw ConfigError("token corpus clip of length " + std::to_string(clip.time) + " exceeds max_time " +
                              std::to_string(lm.max_time));
        }
        if (clip.caption.size() > cond.max_len) {
            throw ConfigError("token corpus caption of length " + std::to_string(clip.caption.size()) +
                              " exceeds the conditioner's max_len " + std::to_string(cond.max_len));
        }
        for (std::uint16_t tok : clip.caption) {
            if (tok >= cond.vocab) {
                throw ConfigError("token corpus caption token " + std::to_string(tok) +
                                  " is outside the conditioner vocabulary of " + std::to_string(cond.vocab));
            }
        }
    }
    return corpus;
}

std::vector<std::vector<double>> load_checked_waves(const std::string& dir, const CodecConfig& codec,
                                                    const char* what) {
    if (dir.empty()) {
        throw ConfigError(std::string("run config: ") + what + " is required");
    }
    WaveCorpus corpus = read_wave_corpus(dir);
    if (corpus.clips.empty()) {
        throw ConfigError("wave corpus '" + dir + "' is empty");
    }
    if (corpus.sample_rate != static_cast<double>(codec.sample_rate)) {
        throw ConfigError("wave corpus sample rate " + std::to_string(corpus.sample_rate) + " differs from the codec's " +
                          std::to_string(codec.sample_rate));
    }
    for (const auto& clip : corpus.clips) {
        if (clip.size() % codec.downsample() != 0 || clip.size() != corpus.clips[0].size()) {
            throw ConfigError("wave corpus clip length " + std::to_string(clip.size()) +
                              " is not a common multiple of the codec downsample " +
                              std::to_string(codec.downsample()));
        }
    }
    return std::move(corpus.clips);
}

json mapping_json(const LayerMapping& m) {
    return m.map;
}

double held_out_mel(const Codec& codec, const std::vector<std::vector<double>>& clips, const MultiScaleMel& mel,
                    std::size_t limit) {
    NoGradGuard no_grad;
    const std::size_t n = std::min(limit, clips.size());
    const std::size_t chunk = 16;
    double total = 0.0;
    for (std::size_t start = 0; start < n; start += chunk) {
        std::vector<std::size_t> idx;
        for (std::size_t i = start; i < std::min(n, start + chunk); ++i) {
            idx.push_back(i);
        }
        const Tensor x = stack_clips(clips, idx);
        const Tensor y = codec.autoencode(x).audio;
        total += mel.loss(x, y).item() * static_cast<double>(idx.size());
    }
    return total / static_cast<double>(n);
}

// Frozen teacher outputs, computed once per clip: logits and the hidden
// states of the blocks the intermediate loss reads.
struct TeacherCache {
    std::size_t per_logits = 0;
    std::size_t per_hidden = 0;
    std::vector<std::size_t> layers;            // teacher blocks kept
    std::vector<std::vector<double>> logits;    // per clip [K, T, C]
    std::vector<std::vector<std::vector<double>>> hidden;  // per clip, per kept layer [T, dim]
};

TeacherCache cache_teacher(const LmBundle& teacher, const TokenCorpus& corpus, const std::vector<std::size_t>& layers) {
    NoGradGuard no_grad;
    TeacherCache cache;
    cache.layers = layers;
    cache.logits.resize(corpus.clips.size());
    cache.hidden.resize(corpus.clips.size());
    const std::size_t chunk = 32;
    for (std::size_t start = 0; start < corpus.clips.size(); start += chunk) {
        std::vector<std::size_t> idx;
        for (std::size_t i = start; i < std::min(corpus.clips.size(), start + chunk); ++i) {
            idx.push_back(i);
        }
        const auto [cap, tok] = make_token_batch(corpus, idx);
        const LmOutput out = teacher.lm.forward(tok, teacher.conditioner.encode(cap));
        cache.per_logits = out.logits.numel() / idx.size();
        const auto ld = out.logits.data();
        for (std::size_t b = 0; b < idx.size(); ++b) {
            cache.logits[idx[b]].assign(ld.begin() + static_cast<std::ptrdiff_t>(b * cache.per_logits),
                                        ld.begin() + static_cast<std::ptrdiff_t>((b + 1) * cache.per_logits));
            cache.hidden[idx[b]].resize(layers.size());
        }
        for (std::size_t l = 0; l < layers.size(); ++l) {
            const Tensor& h = out.trace.at(layers[l]);
            cache.per_hidden = h.numel() / idx.size();
            const auto hd = h.data();
            for (std::size_t b = 0; b < idx.size(); ++b) {
                cache.hidden[idx[b]][l].assign(hd.begin() + static_cast<std::ptrdiff_t>(b * cache.per_hidden),
                                               hd.begin() + static_cast<std::ptrdiff_t>((b + 1) * cache.per_hidden));
            }
        }
    }
    return cache;
}

Tensor gather(const std::vector<std::vector<double>>& rows, const std::vector<std::size_t>& idx, Shape per_row) {
    std::vector<double> data;
    for (std::size_t i : idx) {
        data.insert(data.end(), rows[i].begin(), rows[i].end());
    }
    per_row.insert(per_row.begin(), idx.size());
    return Tensor(std::move(per_row), std::move(data));
}

// ---------------------------------------------------------------------------

TrainResult train_lm_teacher(const RunConfig& cfg, std::ostream* progress) {
    require_output(cfg);
    const TokenCorpus corpus = load_checked_corpus(cfg, cfg.teacher_lm, cfg.conditioner);
    const std::optional<MarkovSpec> spec = maybe_spec(cfg);

    Rng init_rng(cfg.seed, kInitStream);
    LmBundle model{LanguageModel(cfg.teacher_lm, init_rng), Conditioner(cfg.conditioner, init_rng)};
    if (cfg.init == InitStrategy::transfer) {
        // Fine-tuning: start from an existing teacher of the same geometry.
        const LmBundle start = load_lm_bundle(cfg.paths.teacher);
        copy_parameters(model.named_parameters(), start.named_parameters(), true);
        say(progress, "fine-tuning from " + cfg.paths.teacher);
    }
    const NamedTensors params = model.named_parameters();
    set_requires_grad(params, true);
    Adam opt(params, cfg.optimizer);
    BatchSampler sampler(corpus.clips.size(), cfg.batch, Rng(cfg.seed, kBatchStream));
    MetricsLog log(cfg.paths.log, cfg.log_wall_time);

    auto eval = [&]() -> std::optional<double> {
        if (!spec) {
            return std::nullopt;
        }
        return exact_conditional_kl(lm_posteriors(model), *spec, cfg.eval_contexts, cfg.seed + kEvalSeedOffset);
    };

    TrainResult result;
    result.initial_metric = eval();
    for (std::size_t step = 1; step <= cfg.steps; ++step) {
        const auto idx = sampler.next();
        const auto [cap, tok] = make_token_batch(corpus, idx);
        opt.zero_grad();
        const LmOutput out = model.lm.forward(tok, model.conditioner.encode(cap));
        const Tensor loss = student_loss(out.logits, tok, cfg.kd);
        const double value = loss.item();
        backward(loss);
        const double norm = opt.step();
        if (step == 1) {
            result.first_loss = value;
        }
        result.final_loss = value;
        json line = {{"step", step},
                     {"loss", {{"student", value}, {"total", value}}},
                     {"weights", nullptr},
                     {"lr", cfg.optimizer.lr},
                     {"grad_norm", norm}};
        if (should_eval(cfg, step) && spec) {
            result.final_metric = eval();
            line["eval_kl"] = *result.final_metric;
        }
        log.write(std::move(line));
        if (should_report(step, cfg.steps)) {
            say(progress, "step " + std::to_string(step) + "/" + std::to_string(cfg.steps) +
                              " loss " + std::to_string(value));
        }
    }

    json manifest = base_manifest(cfg);
    manifest["log_hash"] = log.hash();
    manifest["initial_metric"] = result.initial_metric ? json(*result.initial_metric) : json(nullptr);
    manifest["final_metric"] = result.final_metric ? json(*result.final_metric) : json(nullptr);
    save_lm_bundle(cfg.paths.output, model, manifest);
    result.checkpoint = cfg.paths.output;
    result.parameter_hash = parameter_hash(params);
    result.steps = cfg.steps;
    result.manifest = read_manifest(cfg.paths.output);
    return result;
}

TrainResult train_codec_teacher(const RunConfig& cfg, std::ostream* progress) {
    require_output(cfg);
    const auto clips = load_checked_waves(cfg.paths.corpus, cfg.teacher_codec, "paths.corpus");
    std::vector<std::vector<double>> held_out;
    if (!cfg.paths.eval_corpus.empty()) {
        held_out = load_checked_waves(cfg.paths.eval_corpus, cfg.teacher_codec, "paths.eval_corpus");
    }
    const MultiScaleMel mel(cfg.mel);

    Rng init_rng(cfg.seed, kInitStream);
    Codec codec(cfg.teacher_codec, init_rng);
    BatchSampler sampler(clips.size(), cfg.batch, Rng(cfg.seed, kBatchStream));
    {
        // Seed the codebooks from encoder outputs of the whole corpus.
        NoGradGuard no_grad;
        std::vector<std::size_t> all(clips.size());
        for (std::size_t i = 0; i < all.size(); ++i) {
            all[i] = i;
        }
        codec.quantizer().init_from_data(codec.encoder()(stack_clips(clips, all)), init_rng);
        codec.quantizer().pin_null_entry();
    }
    const NamedTensors params = codec.named_parameters();
    set_requires_grad(params, true);
    Adam opt(params, cfg.optimizer);
    MetricsLog log(cfg.paths.log, cfg.log_wall_time);

    auto eval = [&]() -> std::optional<double> {
        if (held_out.empty()) {
            return std::nullopt;
        }
        return held_out_mel(codec, held_out, mel, cfg.eval_contexts);
    };

    TrainResult result;
    result.initial_metric = eval();
    for (std::size_t step = 1; step <= cfg.steps; ++step) {
        const Tensor x = stack_clips(clips, sampler.next());
        opt.zero_grad();
        const Reconstruction r = codec.autoencode(x, true);
        const Tensor l_time = time_l1(x, r.audio);
        const Tensor l_mel = mel.loss(x, r.audio);
        const Tensor l_commit = commitment(r.quantized.trace);
        const Tensor loss = add(add(scale(l_time, cfg.lambdas.time), scale(l_mel, cfg.lambdas.mel)),
                                scale(l_commit, cfg.lambdas.commit));
        const double value = loss.item();
        backward(loss);
        const double norm = opt.step();
        codec.quantizer().pin_null_entry();
        if (step == 1) {
            result.first_loss = value;
        }
        result.final_loss = value;
        json line = {{"step", step},
                     {"loss",
                      {{"time", l_time.item()}, {"mel", l_mel.item()}, {"commit", l_commit.item()}, {"total", value}}},
                     {"lr", cfg.optimizer.lr},
                     {"grad_norm", norm}};
        if (should_eval(cfg, step) && !held_out.empty()) {
            result.final_metric = eval();
            line["eval_mel"] = *result.final_metric;
        }
        log.write(std::move(line));
        if (should_report(step, cfg.steps)) {
            say(progress, "step " + std::to_string(step) + "/" + std::to_string(cfg.steps) +
                              " loss " + std::to_string(value));
        }
    }

    json manifest = base_manifest(cfg);
    manifest["log_hash"] = log.hash();
    manifest["initial_metric"] = result.initial_metric ? json(*result.initial_metric) : json(nullptr);
    manifest["final_metric"] = result.final_metric ? json(*result.final_metric) : json(nullptr);
    save_codec_bundle(cfg.paths.output, codec, manifest);
    result.checkpoint = cfg.paths.output;
    result.parameter_hash = parameter_hash(params);
    result.steps = cfg.steps;
    result.manifest = read_manifest(cfg.paths.output);
    return result;
}

}  // namespace

// ---------------------------------------------------------------------------
// Bundles

NamedTensors LmBundle::named_parameters() const {
    NamedTensors out = prefixed("lm.", lm.named_parameters());
    append(out, prefixed("conditioner.", conditioner.named_parameters()));
    return out;
}

nlohmann::json read_manifest(const std::string& checkpoint_path) {
    std::ifstream is(checkpoint_path + ".json");
    if (!is) {
        throw Error("missing run manifest '" + checkpoint_path + ".json'");
    }
    json j;
    try {
        j = json::parse(is);
    } catch (const json::exception& e) {
        throw FormatError("run manifest '" + checkpoint_path + ".json': " + e.what());
    }
    if (j.value("format", "") != "kdforge-run") {
        throw BadMagicError("run manifest '" + checkpoint_path + ".json': unexpected format tag");
    }
    if (j.value("version", 0u) != kManifestVersion) {
        throw UnsupportedVersionError("run manifest '" + checkpoint_path + ".json': unsupported version " +
                                      j.value("version", json(0)).dump());
    }
    return j;
}

void save_lm_bundle(const std::string& path, const LmBundle& bundle, nlohmann::json manifest) {
    const NamedTensors params = bundle.named_parameters();
    save_checkpoint(path, params);
    manifest["model"] = {{"kind", "lm"},
                         {"lm", to_json(bundle.lm.config())},
                         {"conditioner", to_json(bundle.conditioner.config())}};
    manifest["parameter_hash"] = parameter_hash(params);
    write_manifest(path, manifest);
}

LmBundle load_lm_bundle(const std::string& path) {
    const json manifest = read_manifest(path);
    const json& model = manifest.at("model");
    if (model.value("kind", "") != "lm") {
        throw ConfigError("checkpoint '" + path + "' does not hold a language model");
    }
    Rng rng(0);
    LmBundle bundle{LanguageModel(lm_config_from_json(model.at("lm")), rng),
                    Conditioner(conditioner_config_from_json(model.at("conditioner")), rng)};
    copy_parameters(bundle.named_parameters(), load_checkpoint(path), true);
    return bundle;
}

void save_codec_bundle(const std::string& path, const Codec& codec, nlohmann::json manifest) {
    const NamedTensors params = codec.named_parameters();
    save_checkpoint(path, params);
    manifest["model"] = {{"kind", "codec"}, {"codec", to_json(codec.config())}};
    manifest["parameter_hash"] = parameter_hash(params);
    write_manifest(path, manifest);
}

Codec load_codec_bundle(const std::string& path) {
    const json manifest = read_manifest(path);
    const json& model = manifest.at("model");
    if (model.value("kind", "") != "codec") {
        throw ConfigError("checkpoint '" + path + "' does not hold a codec");
    }
    Rng rng(0);
    Codec codec(codec_config_from_json(model.at("codec")), rng);
    copy_parameters(codec.named_parameters(), load_checkpoint(path), true);
    return codec;
}

PosteriorFn lm_posteriors(const LmBundle& bundle) {
    return [&bundle](const CaptionBatch& cap, const TokenBatch& tok) {
        NoGradGuard no_grad;
        return softmax(bundle.lm.forward(tok, bundle.conditioner.encode(cap)).logits, -1);
    };
}

CodecEval evaluate_codec(const Codec& codec, const std::vector<std::vector<double>>& clips, const MelConfig& mel_cfg,
                         std::size_t batch) {
    if (clips.empty() || batch == 0) {
        throw ValidationError("evaluate codec: need clips and a positive batch size");
    }
    NoGradGuard no_grad;
    const MultiScaleMel mel(mel_cfg);
    CodecEval out;
    std::vector<std::vector<double>> recon;
    for (std::size_t start = 0; start < clips.size(); start += batch) {
        std::vector<std::size_t> idx;
        for (std::size_t i = start; i < std::min(clips.size(), start + batch); ++i) {
            idx.push_back(i);
        }
        const Tensor x = stack_clips(clips, idx);
        const Tensor y = codec.autoencode(x).audio;
        const double w = static_cast<double>(idx.size());
        out.mel += mel.loss(x, y).item() * w;
        out.time_l1 += time_l1(x, y).item() * w;
        const auto yd = y.data();
        const std::size_t n = x.size(2);
        for (std::size_t b = 0; b < idx.size(); ++b) {
            recon.emplace_back(yd.begin() + static_cast<std::ptrdiff_t>(b * n),
                               yd.begin() + static_cast<std::ptrdiff_t>((b + 1) * n));
        }
    }
    out.mel /= static_cast<double>(clips.size());
    out.time_l1 /= static_cast<double>(clips.size());
    const ToyFeatureExtractor extractor;
    const ExtractedFeatures ref = extractor.extract(clips, worker_threads());
    const ExtractedFeatures gen = extractor.extract(recon, worker_threads());
    out.frechet = frechet_distance(gaussian_stats(gen.embeddings), gaussian_stats(ref.embeddings));
    out.kl = pairwise_kl(gen.posteriors, ref.posteriors);
    return out;
}

// ---------------------------------------------------------------------------

TrainResult train_teacher(const RunConfig& cfg, std::ostream* progress) {
    if (cfg.task != Task::train_teacher) {
        throw ConfigError("train_teacher: config task is " + to_string(cfg.task));
    }
    cfg.validate();
    return cfg.model == ModelKind::lm ? train_lm_teacher(cfg, progress) : train_codec_teacher(cfg, progress);
}

TrainResult distill_lm(const RunConfig& base, std::ostream* progress) {
    if (base.task != Task::distill_lm) {
        throw ConfigError("distill_lm: config task is " + to_string(base.task));
    }
    if (base.paths.teacher.empty()) {
        throw ConfigError("run config: paths.teacher is required for distillation");
    }
    const LmBundle teacher = load_lm_bundle(base.paths.teacher);
    // The teacher checkpoint is the authority on its own geometry.
    RunConfig cfg = base;
    cfg.teacher_lm = teacher.lm.config();
    cfg.conditioner = teacher.conditioner.config();
    cfg.validate();
    require_output(cfg);

    const LmConfig student_cfg = cfg.resolved_student_lm();
    const TokenCorpus corpus = load_checked_corpus(cfg, student_cfg, cfg.conditioner);
    const std::optional<MarkovSpec> spec = maybe_spec(cfg);

    Rng init_rng(cfg.seed, kInitStream);
    LmBundle student{LanguageModel(student_cfg, init_rng), teacher.conditioner.clone()};
    if (cfg.conditioner_drop > 0) {
        student.conditioner.drop_layers(cfg.conditioner_drop);
    }
    const LayerMapping transfer_map =
        equidistant_map(student_cfg.layers, cfg.teacher_lm.layers, cfg.transfer_rule);
    const LayerMapping mse_map = equidistant_map(student_cfg.layers, cfg.teacher_lm.layers, cfg.effective_mse_rule());
    if (cfg.init == InitStrategy::transfer) {
        transfer_weights(teacher.lm, student.lm, transfer_map);
    }
    Linear projection;
    const bool project = cfg.losses.mse && student_cfg.dim != cfg.teacher_lm.dim;
    if (project) {
        projection = Linear(student_cfg.dim, cfg.teacher_lm.dim, init_rng, true);
    }

    NamedTensors params = prefixed("lm.", student.lm.named_parameters());
    if (project) {
        NamedTensors p;
        projection.collect("projection", p);
        append(params, p);
    }
    set_requires_grad(params, true);
    set_requires_grad(student.conditioner.named_parameters(), false);
    const std::string teacher_hash = parameter_hash(teacher.named_parameters());

    std::vector<std::size_t> kept;
    if (cfg.losses.mse) {
        kept = mse_map.map;
        kept.erase(std::unique(kept.begin(), kept.end()), kept.end());
    }
    say(progress, "caching teacher outputs for " + std::to_string(corpus.clips.size()) + " clips");
    const TeacherCache cache = cache_teacher(teacher, corpus, kept);
    const std::size_t t_len = corpus.clips[0].time;

    Adam opt(params, cfg.optimizer);
    BatchSampler sampler(corpus.clips.size(), cfg.batch, Rng(cfg.seed, kBatchStream));
    Rng weight_rng(cfg.seed, kWeightStream);
    MetricsLog log(cfg.paths.log, cfg.log_wall_time);

    auto eval = [&]() -> std::optional<double> {
        if (!spec) {
            return std::nullopt;
        }
        return exact_conditional_kl(lm_posteriors(student), *spec, cfg.eval_contexts, cfg.seed + kEvalSeedOffset);
    };

    TrainResult result;
    result.initial_metric = eval();
    const KdOptions& kd = cfg.kd;
    for (std::size_t step = 1; step <= cfg.steps; ++step) {
        const auto idx = sampler.next();
        const auto [cap, tok] = make_token_batch(corpus, idx);
        std::optional<SimplexWeights> weights;
        if (cfg.sampling != SamplingStrategy::none) {
            weights = restrict_to_active(sample_weights(cfg.sampling, weight_rng), cfg.losses.active());
        }
        Tensor cond;
        {
            NoGradGuard no_grad;
            cond = student.conditioner.encode(cap);
        }
        opt.zero_grad();
        const LmOutput out = student.lm.forward(tok, cond);
        Tensor hard, soft, inter;
        if (cfg.losses.hard) {
            hard = student_loss(out.logits, tok, kd);
        }
        if (cfg.losses.soft) {
            const Tensor t_logits = gather(cache.logits, idx, {student_cfg.codebooks, t_len, student_cfg.cardinality});
            soft = teacher_loss(out.logits, t_logits, kd);
        }
        if (cfg.losses.mse) {
            HiddenTrace t_trace(cfg.teacher_lm.layers);
            for (std::size_t l = 0; l < kept.size(); ++l) {
                std::vector<std::vector<double>> rows;
                rows.reserve(idx.size());
                std::vector<std::size_t> pos;
                for (std::size_t i : idx) {
                    rows.push_back(cache.hidden[i][l]);
                    pos.push_back(rows.size() - 1);
                }
                t_trace[kept[l]] = gather(rows, pos, {t_len, cfg.teacher_lm.dim});
            }
            inter = intermediate_mse(out.trace, t_trace, mse_map, project ? &projection : nullptr);
        }
        LossBreakdown parts;
        const Tensor loss = combine_losses(hard, soft, inter, cfg.scales, weights, &parts);
        backward(loss);
        const double norm = opt.step();
        if (step == 1) {
            result.first_loss = parts.total;
        }
        result.final_loss = parts.total;
        json terms = {{"total", parts.total}};
        if (cfg.losses.hard) {
            terms["student"] = parts.student;
        }
        if (cfg.losses.soft) {
            terms["teacher"] = parts.teacher;
        }
        if (cfg.losses.mse) {
            terms["mse"] = parts.mse;
        }
        json line = {{"step", step},
                     {"loss", terms},
                     {"weights", weights ? json(weights->a) : json(nullptr)},
                     {"lr", cfg.optimizer.lr},
                     {"grad_norm", norm}};
        if (should_eval(cfg, step) && spec) {
            result.final_metric = eval();
            line["eval_kl"] = *result.final_metric;
        }
        log.write(std::move(line));
        if (should_report(step, cfg.steps)) {
            say(progress, "step " + std::to_string(step) + "/" + std::to_string(cfg.steps) + " loss " +
                              std::to_string(parts.total));
        }
    }
    if (parameter_hash(teacher.named_parameters()) != teacher_hash) {
        throw Error("distill-lm: teacher parameters changed during distillation");
    }

    json manifest = base_manifest(cfg);
    manifest["row_label"] = row_label(cfg);
    manifest["mapping"] = {{"transfer", mapping_json(transfer_map)},
                           {"mse", mapping_json(mse_map)},
                           {"transfer_rule", to_string(cfg.transfer_rule)},
                           {"mse_rule", to_string(cfg.effective_mse_rule())}};
    manifest["teacher_hash"] = teacher_hash;
    manifest["log_hash"] = log.hash();
    manifest["initial_metric"] = result.initial_metric ? json(*result.initial_metric) : json(nullptr);
    manifest["final_metric"] = result.final_metric ? json(*result.final_metric) : json(nullptr);
    if (project) {
        NamedTensors p;
        projection.collect("projection", p);
        manifest["projection_hash"] = parameter_hash(p);
    }
    save_lm_bundle(cfg.paths.output, student, manifest);
    result.checkpoint = cfg.paths.output;
    result.parameter_hash = parameter_hash(student.named_parameters());
    result.steps = cfg.steps;
    result.manifest = read_manifest(cfg.paths.output);
    return result;
}

TrainResult distill_codec(const RunConfig& base, std::ostream* progress) {
    if (base.task != Task::distill_codec) {
        throw ConfigError("distill_codec: config task is " + to_string(base.task));
    }
    if (base.paths.teacher.empty()) {
        throw ConfigError("run config: paths.teacher is required for distillation");
    }
    const Codec teacher = load_codec_bundle(base.paths.teacher);
    RunConfig cfg = base;
    cfg.teacher_codec = teacher.config();
    cfg.validate();
    require_output(cfg);

    const auto clips = load_checked_waves(cfg.paths.corpus, cfg.teacher_codec, "paths.corpus");
    std::vector<std::vector<double>> held_out;
    if (!cfg.paths.eval_corpus.empty()) {
        held_out = load_checked_waves(cfg.paths.eval_corpus, cfg.teacher_codec, "paths.eval_corpus");
    }
    const MultiScaleMel mel(cfg.mel);

    Rng init_rng(cfg.seed, kInitStream);
    Codec student = Codec::with_fresh_decoder(teacher, cfg.student_codec, init_rng);
    const MultiScaleDiscriminator disc(cfg.discriminator, init_rng);

    NamedTensors frozen = prefixed("encoder.", student.encoder_parameters());
    append(frozen, prefixed("quantizer.", student.quantizer_parameters()));
    set_requires_grad(frozen, false);
    const std::string frozen_hash = parameter_hash(frozen);
    const std::string teacher_hash = parameter_hash(teacher.named_parameters());

    const NamedTensors gen_params = student.decoder_parameters();
    const NamedTensors disc_params = disc.named_parameters();
    set_requires_grad(gen_params, true);
    set_requires_grad(disc_params, true);
    Adam gen_opt(gen_params, cfg.optimizer);
    Adam disc_opt(disc_params, cfg.optimizer);
    BatchSampler sampler(clips.size(), cfg.batch, Rng(cfg.seed, kBatchStream));
    MetricsLog log(cfg.paths.log, cfg.log_wall_time);
    CodecLossOptions opts;
    opts.adversarial_on_student = cfg.adversarial_on_student;

    auto eval = [&]() -> std::optional<double> {
        if (held_out.empty()) {
            return std::nullopt;
        }
        return held_out_mel(student, held_out, mel, cfg.eval_contexts);
    };

    TrainResult result;
    result.initial_metric = eval();
    for (std::size_t step = 1; step <= cfg.steps; ++step) {
        const Tensor x = stack_clips(clips, sampler.next());
        Quantized q;
        Tensor t;
        Tensor commit;
        {
            NoGradGuard no_grad;
            q = student.encode_quantize(x);
            t = teacher.decoder()(q.quantized);
            commit = commitment(q.trace);
        }
        gen_opt.zero_grad();
        const Tensor s = student.decoder()(q.quantized);

        // Discriminator update on detached outputs, then the generator
        // update against the refreshed discriminator.
        disc_opt.zero_grad();
        const Tensor d_loss = disc_loss(x, s, t, disc);
        const double d_value = d_loss.item();
        backward(d_loss);
        const double d_norm = disc_opt.step();

        disc_opt.zero_grad();
        CodecLossBreakdown parts;
        const Tensor g_loss = codec_total(x, s, t, commit, disc, mel, cfg.lambdas, opts, &parts);
        backward(g_loss);
        const double g_norm = gen_opt.step();
        disc_opt.zero_grad();

        if (step == 1) {
            result.first_loss = parts.total;
        }
        result.final_loss = parts.total;
        json line = {{"step", step},
                     {"loss",
                      {{"time_real", parts.time_real},
                       {"time_teacher", parts.time_teacher},
                       {"mel_real", parts.mel_real},
                       {"mel_teacher", parts.mel_teacher},
                       {"adv_real", parts.adv_real},
                       {"adv_teacher", parts.adv_teacher},
                       {"feat_real", parts.feat_real},
                       {"feat_teacher", parts.feat_teacher},
                       {"commit", parts.commit},
                       {"total", parts.total}}},
                     {"disc_loss", d_value},
                     {"lr", cfg.optimizer.lr},
                     {"grad_norm", g_norm},
                     {"disc_grad_norm", d_norm}};
        if (should_eval(cfg, step) && !held_out.empty()) {
            result.final_metric = eval();
            line["eval_mel"] = *result.final_metric;
        }
        log.write(std::move(line));
        if (should_report(step, cfg.steps)) {
            say(progress, "step " + std::to_string(step) + "/" + std::to_string(cfg.steps) + " gen " +
                              std::to_string(parts.total) + " disc " + std::to_string(d_value));
        }
    }
    if (parameter_hash(frozen) != frozen_hash) {
        throw Error("distill-codec: encoder or quantizer changed during distillation");
    }
    if (parameter_hash(teacher.named_parameters()) != teacher_hash) {
        throw Error("distill-codec: teacher parameters changed during distillation");
    }

    json manifest = base_manifest(cfg);
    manifest["frozen_hash"] = frozen_hash;
    manifest["teacher_hash"] = teacher_hash;
    manifest["log_hash"] = log.hash();
    manifest["initial_metric"] = result.initial_metric ? json(*result.initial_metric) : json(nullptr);
    manifest["final_metric"] = result.final_metric ? json(*result.final_metric) : json(nullptr);
    save_codec_bundle(cfg.paths.output, student, manifest);
    result.checkpoint = cfg.paths.output;
    result.parameter_hash = parameter_hash(student.named_parameters());
    result.steps = cfg.steps;
    result.manifest = read_manifest(cfg.paths.output);
    return result;
}

TrainResult run_training(const RunConfig& cfg, std::ostream* progress) {
    switch (cfg.task) {
        case Task::train_teacher: return train_teacher(cfg, progress);
        case Task::distill_lm: return distill_lm(cfg, progress);
        case Task::distill_codec: return distill_codec(cfg, progress);
    }
    throw ConfigError("unknown task");
}

}  // namespace kdforge
