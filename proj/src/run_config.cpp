// SPDX-License-Identifier: Apache-2.0
#include "kdforge/run_config.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <set>
#include <sstream>
#include <type_traits>

#include "kdforge/errors.hpp"
#include "kdforge/hash.hpp"

namespace kdforge {

using nlohmann::json;

namespace {

std::string lower(std::string_view s) {
    std::string out(s);
    std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) { return std::tolower(c); });
    return out;
}

std::vector<std::string> split(std::string_view s, std::string_view seps) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (seps.find(c) != std::string_view::npos) {
            if (!cur.empty()) {
                out.push_back(cur);
            }
            cur.clear();
        } else {
            cur += c;
        }
    }
    if (!cur.empty()) {
        out.push_back(cur);
    }
    return out;
}

// Reads known keys of a JSON object and rejects everything else.
class ObjectReader {
public:
    ObjectReader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
        if (!j_.is_object()) {
            throw ConfigError(where_ + ": expected a JSON object");
        }
    }

    template <class T>
    void get(const std::string& key, T& out) {
        seen_.insert(key);
        const auto it = j_.find(key);
        if (it == j_.end()) {
            return;
        }
        try {
            if constexpr (std::is_same_v<T, bool>) {
                if (!it->is_boolean()) {
                    throw ConfigError("");
                }
            } else if constexpr (std::is_unsigned_v<T>) {
                if (!it->is_number_unsigned()) {
                    throw ConfigError("");
                }
            } else if constexpr (std::is_floating_point_v<T>) {
                if (!it->is_number()) {
                    throw ConfigError("");
                }
            }
            out = it->get<T>();
        } catch (const std::exception&) {
            throw ConfigError(where_ + "." + key + ": unexpected value " + it->dump());
        }
    }

    template <class E, class Parse>
    void get_enum(const std::string& key, E& out, Parse parse) {
        std::string s;
        get(key, s);
        if (j_.contains(key)) {
            out = parse(s);
        }
    }

    const json* sub(const std::string& key) {
        seen_.insert(key);
        const auto it = j_.find(key);
        return it == j_.end() || it->is_null() ? nullptr : &*it;
    }

    void finish() const {
        for (const auto& [key, value] : j_.items()) {
            if (!seen_.count(key)) {
                throw ConfigError(where_ + ": unknown key '" + key + "'");
            }
        }
    }

private:
    const json& j_;
    std::string where_;
    std::set<std::string> seen_;
};

json to_json(const OptimizerConfig& c) {
    return {{"lr", c.lr}, {"beta1", c.beta1}, {"beta2", c.beta2}, {"eps", c.eps}, {"clip", c.clip}};
}

OptimizerConfig optimizer_from_json(const json& j, OptimizerConfig c) {
    ObjectReader r(j, "optimizer");
    r.get("lr", c.lr);
    r.get("beta1", c.beta1);
    r.get("beta2", c.beta2);
    r.get("eps", c.eps);
    r.get("clip", c.clip);
    r.finish();
    return c;
}

json to_json(const LossScales& s) {
    return {{"student", s.student}, {"teacher", s.teacher}, {"mse", s.mse}};
}

LossScales scales_from_json(const json& j, LossScales s) {
    ObjectReader r(j, "scales");
    r.get("student", s.student);
    r.get("teacher", s.teacher);
    r.get("mse", s.mse);
    r.finish();
    return s;
}

json to_json(const Lambdas& l) {
    return {{"time", l.time},     {"mel", l.mel},
            {"adv", l.adv},       {"feat", l.feat},
            {"commit", l.commit}, {"weight_factor", l.weight_factor},
            {"scope", to_string(l.scope)}};
}

Lambdas lambdas_from_json(const json& j, Lambdas l) {
    ObjectReader r(j, "lambdas");
    r.get("time", l.time);
    r.get("mel", l.mel);
    r.get("adv", l.adv);
    r.get("feat", l.feat);
    r.get("commit", l.commit);
    r.get("weight_factor", l.weight_factor);
    r.get_enum("scope", l.scope, parse_weight_factor_scope);
    r.finish();
    return l;
}

json to_json(const DiscriminatorConfig& c) {
    return {{"count", c.count},   {"layers", c.layers},
            {"channels", c.channels}, {"kernel", c.kernel},
            {"negative_slope", c.negative_slope}, {"zero_init_final", c.zero_init_final}};
}

DiscriminatorConfig discriminator_from_json(const json& j, DiscriminatorConfig c) {
    ObjectReader r(j, "discriminator");
    r.get("count", c.count);
    r.get("layers", c.layers);
    r.get("channels", c.channels);
    r.get("kernel", c.kernel);
    r.get("negative_slope", c.negative_slope);
    r.get("zero_init_final", c.zero_init_final);
    r.finish();
    return c;
}

json to_json(const MelConfig& c) {
    return {{"scales", c.scales}, {"mel_bins", c.mel_bins}, {"alpha", c.alpha}, {"sample_rate", c.sample_rate}};
}

MelConfig mel_from_json(const json& j, MelConfig c) {
    ObjectReader r(j, "mel");
    r.get("scales", c.scales);
    r.get("mel_bins", c.mel_bins);
    r.get("alpha", c.alpha);
    r.get("sample_rate", c.sample_rate);
    r.finish();
    return c;
}

json to_json(const KdOptions& k) {
    return {{"sum_over_time", k.sum_over_time}, {"temperature", k.temperature}};
}

KdOptions kd_from_json(const json& j, KdOptions k) {
    ObjectReader r(j, "kd");
    r.get("sum_over_time", k.sum_over_time);
    r.get("temperature", k.temperature);
    r.finish();
    return k;
}

}  // namespace

// ---------------------------------------------------------------------------

Task parse_task(std::string_view s) {
    if (s == "train-teacher" || s == "train_teacher") {
        return Task::train_teacher;
    }
    if (s == "distill-lm" || s == "distill_lm") {
        return Task::distill_lm;
    }
    if (s == "distill-codec" || s == "distill_codec") {
        return Task::distill_codec;
    }
    throw ConfigError("unknown task '" + std::string(s) + "' (expected train-teacher, distill-lm or distill-codec)");
}

ModelKind parse_model_kind(std::string_view s) {
    if (s == "lm") {
        return ModelKind::lm;
    }
    if (s == "codec") {
        return ModelKind::codec;
    }
    throw ConfigError("unknown model '" + std::string(s) + "' (expected lm or codec)");
}

Variant parse_variant(std::string_view s) {
    const std::string l = lower(s);
    if (l == "v1") {
        return Variant::v1;
    }
    if (l == "v2") {
        return Variant::v2;
    }
    throw ConfigError("unknown variant '" + std::string(s) + "' (expected v1 or v2)");
}

InitStrategy parse_init(std::string_view s) {
    const std::string l = lower(s);
    if (l == "random") {
        return InitStrategy::random;
    }
    if (l == "transfer" || l == "weight copy" || l == "weight-copy" || l == "copy") {
        return InitStrategy::transfer;
    }
    throw ConfigError("unknown init strategy '" + std::string(s) + "' (expected random or transfer)");
}

std::string to_string(Task v) {
    switch (v) {
        case Task::train_teacher: return "train-teacher";
        case Task::distill_lm: return "distill-lm";
        case Task::distill_codec: return "distill-codec";
    }
    return "?";
}

std::string to_string(ModelKind v) {
    return v == ModelKind::lm ? "lm" : "codec";
}

std::string to_string(Variant v) {
    return v == Variant::v1 ? "v1" : "v2";
}

std::string to_string(InitStrategy v) {
    return v == InitStrategy::random ? "random" : "transfer";
}

std::string LossFlags::label() const {
    std::vector<std::string> parts;
    if (hard) {
        parts.push_back("H");
    }
    if (soft) {
        parts.push_back("S");
    }
    if (mse) {
        parts.push_back("mse");
    }
    std::string out;
    for (std::size_t i = 0; i < parts.size(); ++i) {
        out += (i ? "/" : "") + parts[i];
    }
    return out;
}

LossFlags parse_loss_flags(std::string_view s) {
    LossFlags f{false, false, false};
    const auto parts = split(s, "/,+ ");
    if (parts.empty()) {
        throw ConfigError("loss flags: empty selection");
    }
    for (const std::string& p : parts) {
        const std::string l = lower(p);
        bool* slot = l == "h" ? &f.hard : l == "s" ? &f.soft : l == "mse" ? &f.mse : nullptr;
        if (slot == nullptr) {
            throw ConfigError("loss flags: unknown term '" + p + "' (expected H, S or mse)");
        }
        if (*slot) {
            throw ConfigError("loss flags: term '" + p + "' given twice");
        }
        *slot = true;
    }
    return f;
}

LmConfig variant_geometry(const LmConfig& teacher, Variant v) {
    LmConfig s = teacher;
    if (v == Variant::v1) {
        s.layers = 4;
        return s;
    }
    s.layers = 7;
    s.heads = std::max<std::size_t>(1, teacher.heads / 2);
    const std::size_t target = teacher.dim * 3 / 4;
    s.dim = std::max<std::size_t>(s.heads, target / s.heads * s.heads);
    return s;
}

LmConfig RunConfig::resolved_student_lm() const {
    return student_lm ? *student_lm : variant_geometry(teacher_lm, variant);
}

void RunConfig::validate() const {
    if (steps == 0 || batch == 0) {
        throw ConfigError("run config: steps and batch must be positive");
    }
    optimizer.validate();
    scales.validate();
    lambdas.validate();
    conditioner.validate();
    if (task == Task::distill_codec || (task == Task::train_teacher && model == ModelKind::codec)) {
        teacher_codec.validate();
        mel.validate();
        discriminator.validate();
        if (task == Task::distill_codec) {
            student_codec.validate();
            const auto& t = teacher_codec;
            const auto& s = student_codec;
            if (t.base_channels != s.base_channels || t.strides != s.strides || t.rvq_stages != s.rvq_stages ||
                t.rvq_codebook_size != s.rvq_codebook_size || t.latent_dim != s.latent_dim ||
                t.residual_units != s.residual_units) {
                throw ConfigError("run config: student codec must share the teacher's encoder and quantizer geometry");
            }
        }
        if (mel.sample_rate != static_cast<double>(teacher_codec.sample_rate)) {
            throw ConfigError("run config: mel sample rate differs from the codec sample rate");
        }
        return;
    }
    teacher_lm.validate();
    if (teacher_lm.cond_dim != conditioner.dim) {
        throw ConfigError("run config: teacher cond_dim " + std::to_string(teacher_lm.cond_dim) +
                          " differs from the conditioner width " + std::to_string(conditioner.dim));
    }
    if (task == Task::train_teacher) {
        if (init == InitStrategy::transfer && paths.teacher.empty()) {
            throw ConfigError("run config: fine-tuning a teacher needs paths.teacher");
        }
        return;
    }
    if (conditioner_drop >= conditioner.layers) {
        throw ConfigError("run config: cannot drop " + std::to_string(conditioner_drop) + " of " +
                          std::to_string(conditioner.layers) + " conditioner layers");
    }
    if (losses.active_count() == 0) {
        throw ConfigError("run config: no loss term is active");
    }
    if (sampling != SamplingStrategy::none && losses.active_count() < 2) {
        throw ConfigError("run config: sampling " + to_string(sampling) + " needs at least two active loss terms, got " +
                          losses.label());
    }
    const LmConfig student = resolved_student_lm();
    student.validate();
    if (student.codebooks != teacher_lm.codebooks || student.cardinality != teacher_lm.cardinality ||
        student.cond_dim != teacher_lm.cond_dim) {
        throw ConfigError("run config: student and teacher must agree on codebooks, cardinality and cond_dim");
    }
    if (student.layers > teacher_lm.layers) {
        throw ConfigError("run config: student has more blocks than the teacher");
    }
    if (init == InitStrategy::transfer) {
        check_transfer_compatible(teacher_lm, student);
    }
}

std::string RunConfig::hash() const {
    return fnv1a_hex(to_json(*this).dump());
}

nlohmann::json to_json(const LmConfig& c) {
    return {{"layers", c.layers},     {"heads", c.heads},       {"dim", c.dim},
            {"codebooks", c.codebooks}, {"cardinality", c.cardinality}, {"max_time", c.max_time},
            {"cond_dim", c.cond_dim}, {"ffn_mult", c.ffn_mult}};
}

nlohmann::json to_json(const ConditionerConfig& c) {
    return {{"vocab", c.vocab},   {"dim", c.dim},           {"layers", c.layers},
            {"heads", c.heads},   {"ffn_mult", c.ffn_mult}, {"max_len", c.max_len}};
}

nlohmann::json to_json(const CodecConfig& c) {
    return {{"base_channels", c.base_channels},
            {"strides", c.strides},
            {"rvq_stages", c.rvq_stages},
            {"rvq_codebook_size", c.rvq_codebook_size},
            {"decoder_channels", c.decoder_channels},
            {"latent_dim", c.latent_dim},
            {"residual_units", c.residual_units},
            {"sample_rate", c.sample_rate}};
}

LmConfig lm_config_from_json(const nlohmann::json& j, const LmConfig& base) {
    LmConfig c = base;
    ObjectReader r(j, "lm");
    r.get("layers", c.layers);
    r.get("heads", c.heads);
    r.get("dim", c.dim);
    r.get("codebooks", c.codebooks);
    r.get("cardinality", c.cardinality);
    r.get("max_time", c.max_time);
    r.get("cond_dim", c.cond_dim);
    r.get("ffn_mult", c.ffn_mult);
    r.finish();
    return c;
}

ConditionerConfig conditioner_config_from_json(const nlohmann::json& j, const ConditionerConfig& base) {
    ConditionerConfig c = base;
    ObjectReader r(j, "conditioner");
    r.get("vocab", c.vocab);
    r.get("dim", c.dim);
    r.get("layers", c.layers);
    r.get("heads", c.heads);
    r.get("ffn_mult", c.ffn_mult);
    r.get("max_len", c.max_len);
    r.finish();
    return c;
}

CodecConfig codec_config_from_json(const nlohmann::json& j, const CodecConfig& base) {
    CodecConfig c = base;
    ObjectReader r(j, "codec");
    r.get("base_channels", c.base_channels);
    r.get("strides", c.strides);
    r.get("rvq_stages", c.rvq_stages);
    r.get("rvq_codebook_size", c.rvq_codebook_size);
    r.get("decoder_channels", c.decoder_channels);
    r.get("latent_dim", c.latent_dim);
    r.get("residual_units", c.residual_units);
    r.get("sample_rate", c.sample_rate);
    r.finish();
    return c;
}

nlohmann::json to_json(const RunConfig& c) {
    json j = {
        {"task", to_string(c.task)},
        {"model", to_string(c.model)},
        {"variant", to_string(c.variant)},
        {"losses", c.losses.label()},
        {"sampling", to_string(c.sampling)},
        {"init", to_string(c.init)},
        {"scales", to_json(c.scales)},
        {"kd", to_json(c.kd)},
        {"transfer_rule", to_string(c.transfer_rule)},
        {"mse_rule", c.mse_rule ? json(to_string(*c.mse_rule)) : json(nullptr)},
        {"lambdas", to_json(c.lambdas)},
        {"adversarial_on_student", c.adversarial_on_student},
        {"optimizer", to_json(c.optimizer)},
        {"steps", c.steps},
        {"batch", c.batch},
        {"seed", c.seed},
        {"eval_every", c.eval_every},
        {"eval_contexts", c.eval_contexts},
        {"log_wall_time", c.log_wall_time},
        {"conditioner_drop", c.conditioner_drop},
        {"teacher_lm", to_json(c.teacher_lm)},
        {"conditioner", to_json(c.conditioner)},
        {"student_lm", c.student_lm ? to_json(*c.student_lm) : json(nullptr)},
        {"teacher_codec", to_json(c.teacher_codec)},
        {"student_codec", to_json(c.student_codec)},
        {"discriminator", to_json(c.discriminator)},
        {"mel", to_json(c.mel)},
        {"paths",
         {{"corpus", c.paths.corpus},
          {"eval_corpus", c.paths.eval_corpus},
          {"markov_spec", c.paths.markov_spec},
          {"teacher", c.paths.teacher},
          {"output", c.paths.output},
          {"log", c.paths.log}}},
    };
    return j;
}

RunConfig run_config_from_json(const nlohmann::json& j, const RunConfig& base) {
    RunConfig c = base;
    ObjectReader r(j, "config");
    r.get_enum("task", c.task, parse_task);
    r.get_enum("model", c.model, parse_model_kind);
    r.get_enum("variant", c.variant, parse_variant);
    r.get_enum("losses", c.losses, parse_loss_flags);
    r.get_enum("sampling", c.sampling, parse_sampling);
    r.get_enum("init", c.init, parse_init);
    if (const json* s = r.sub("scales")) {
        c.scales = scales_from_json(*s, c.scales);
    }
    if (const json* s = r.sub("kd")) {
        c.kd = kd_from_json(*s, c.kd);
    }
    r.get_enum("transfer_rule", c.transfer_rule, parse_mapping_rule);
    if (const json* s = r.sub("mse_rule")) {
        if (!s->is_string()) {
            throw ConfigError("config.mse_rule: expected a string or null");
        }
        c.mse_rule = parse_mapping_rule(s->get<std::string>());
    }
    if (const json* s = r.sub("lambdas")) {
        c.lambdas = lambdas_from_json(*s, c.lambdas);
    }
    r.get("adversarial_on_student", c.adversarial_on_student);
    if (const json* s = r.sub("optimizer")) {
        c.optimizer = optimizer_from_json(*s, c.optimizer);
    }
    r.get("steps", c.steps);
    r.get("batch", c.batch);
    r.get("seed", c.seed);
    r.get("eval_every", c.eval_every);
    r.get("eval_contexts", c.eval_contexts);
    r.get("log_wall_time", c.log_wall_time);
    r.get("conditioner_drop", c.conditioner_drop);
    if (const json* s = r.sub("teacher_lm")) {
        c.teacher_lm = lm_config_from_json(*s, c.teacher_lm);
    }
    if (const json* s = r.sub("conditioner")) {
        c.conditioner = conditioner_config_from_json(*s, c.conditioner);
    }
    if (const json* s = r.sub("student_lm")) {
        c.student_lm = lm_config_from_json(*s, c.student_lm.value_or(c.resolved_student_lm()));
    }
    if (const json* s = r.sub("teacher_codec")) {
        c.teacher_codec = codec_config_from_json(*s, c.teacher_codec);
    }
    if (const json* s = r.sub("student_codec")) {
        c.student_codec = codec_config_from_json(*s, c.student_codec);
    }
    if (const json* s = r.sub("discriminator")) {
        c.discriminator = discriminator_from_json(*s, c.discriminator);
    }
    if (const json* s = r.sub("mel")) {
        c.mel = mel_from_json(*s, c.mel);
    }
    if (const json* s = r.sub("paths")) {
        ObjectReader p(*s, "paths");
        p.get("corpus", c.paths.corpus);
        p.get("eval_corpus", c.paths.eval_corpus);
        p.get("markov_spec", c.paths.markov_spec);
        p.get("teacher", c.paths.teacher);
        p.get("output", c.paths.output);
        p.get("log", c.paths.log);
        p.finish();
    }
    r.finish();
    return c;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) {
        throw ConfigError("cannot open config '" + path + "'");
    }
    json j;
    try {
        j = json::parse(is);
    } catch (const json::exception& e) {
        throw ConfigError("config '" + path + "': " + e.what());
    }
    return run_config_from_json(j);
}

// ---------------------------------------------------------------------------
// Ablation-row labels

RunConfig config_for_row(std::string_view label, const RunConfig& base) {
    const auto words = split(label, " \t");
    if (words.empty()) {
        throw ConfigError("row label: empty");
    }
    RunConfig c = base;
    std::size_t i = 0;
    const std::string head = lower(words[i++]);
    if (head == "teacher") {
        c.task = Task::train_teacher;
        c.model = ModelKind::lm;
        c.init = InitStrategy::random;
        if (i < words.size() && lower(words[i]) == "ft") {
            c.init = InitStrategy::transfer;
            ++i;
        }
    } else {
        c.task = Task::distill_lm;
        c.variant = parse_variant(head);
        if (i >= words.size()) {
            throw ConfigError("row label '" + std::string(label) + "': missing loss terms");
        }
        std::string terms = words[i++];
        c.sampling = SamplingStrategy::none;
        const auto slash = terms.rfind('/');
        if (slash != std::string::npos) {
            const std::string tail = lower(terms.substr(slash + 1));
            if (tail == "s1" || tail == "s2" || tail == "s₁" || tail == "s₂") {
                c.sampling = (tail == "s1" || tail == "s₁") ? SamplingStrategy::s1 : SamplingStrategy::s2;
                terms = terms.substr(0, slash);
            }
        }
        c.losses = parse_loss_flags(terms);
        c.init = InitStrategy::random;
    }
    if (i < words.size()) {
        std::string rest;
        for (; i < words.size(); ++i) {
            rest += (rest.empty() ? "" : " ") + words[i];
        }
        const InitStrategy init = parse_init(rest);
        // "Teacher FT" is already the weight-copy row; a bare "Teacher" is random only.
        if (c.task == Task::train_teacher && init != c.init) {
            throw ConfigError("row label '" + std::string(label) + "': teacher rows fix the init strategy");
        }
        c.init = init;
    }
    return c;
}

std::string row_label(const RunConfig& c) {
    if (c.task == Task::train_teacher) {
        return c.init == InitStrategy::transfer ? "Teacher FT Weight copy" : "Teacher Random";
    }
    std::string s = (c.variant == Variant::v1 ? "V1 " : "V2 ") + c.losses.label();
    if (c.sampling != SamplingStrategy::none) {
        s += c.sampling == SamplingStrategy::s1 ? "/S1" : "/S2";
    }
    s += c.init == InitStrategy::transfer ? " Weight copy" : " Random";
    return s;
}

}  // namespace kdforge
