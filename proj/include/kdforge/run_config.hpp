// SPDX-License-Identifier: Apache-2.0
//
// Run configuration for teacher training and both distillation tasks, with
// a strict JSON form (unknown keys are rejected) and the ablation-row labels
// used to name LM distillation setups, e.g. "V2 H/S/mse/S2" or
// "V1 S Weight copy".
#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "kdforge/codec_losses.hpp"
#include "kdforge/kd_losses.hpp"
#include "kdforge/mel.hpp"
#include "kdforge/models.hpp"
#include "kdforge/optim.hpp"
#include "kdforge/sampling.hpp"
#include "kdforge/transfer.hpp"

namespace kdforge {

enum class Task { train_teacher, distill_lm, distill_codec };
enum class ModelKind { lm, codec };
enum class Variant { v1, v2 };
enum class InitStrategy { random, transfer };

Task parse_task(std::string_view s);
ModelKind parse_model_kind(std::string_view s);
Variant parse_variant(std::string_view s);
InitStrategy parse_init(std::string_view s);
std::string to_string(Task v);
std::string to_string(ModelKind v);
std::string to_string(Variant v);
std::string to_string(InitStrategy v);

// Which of the student (H), teacher (S) and intermediate (mse) terms are on.
struct LossFlags {
    bool hard = true;
    bool soft = false;
    bool mse = false;

    std::size_t active_count() const { return std::size_t{hard} + std::size_t{soft} + std::size_t{mse}; }
    std::vector<bool> active() const { return {hard, soft, mse}; }
    // "H", "S/mse", "H/S/mse", ...
    std::string label() const;
};

// Accepts '/' or ',' separated subsets of {H, S, mse}, case-insensitive.
LossFlags parse_loss_flags(std::string_view s);

struct RunPaths {
    std::string corpus;       // token corpus file or wave corpus directory
    std::string eval_corpus;  // held-out wave corpus (codec runs)
    std::string markov_spec;  // JSON spec for exact-KL evaluation (LM runs)
    std::string teacher;      // teacher checkpoint
    std::string output;       // checkpoint written at the end; manifest goes to output + ".json"
    std::string log;          // JSON-lines metrics log
};

struct RunConfig {
    Task task = Task::train_teacher;
    ModelKind model = ModelKind::lm;  // train_teacher only
    Variant variant = Variant::v2;
    LossFlags losses;
    SamplingStrategy sampling = SamplingStrategy::none;
    InitStrategy init = InitStrategy::random;
    LossScales scales;
    KdOptions kd;
    MappingRule transfer_rule = MappingRule::final_anchored;
    std::optional<MappingRule> mse_rule;  // defaults to transfer_rule
    Lambdas lambdas;
    bool adversarial_on_student = false;
    OptimizerConfig optimizer;
    std::size_t steps = 1000;
    std::size_t batch = 16;
    std::uint64_t seed = 1;
    std::size_t eval_every = 0;      // 0: only at the start and the end
    std::size_t eval_contexts = 64;  // sequences (LM) or clips (codec) for evaluation
    bool log_wall_time = false;
    std::size_t conditioner_drop = 0;  // caption-encoder layers removed before distillation

    LmConfig teacher_lm = LmConfig::desk_teacher();
    ConditionerConfig conditioner;
    std::optional<LmConfig> student_lm;  // defaults to the variant's geometry
    CodecConfig teacher_codec = CodecConfig::desk_teacher();
    CodecConfig student_codec = CodecConfig::desk_student();
    DiscriminatorConfig discriminator;
    MelConfig mel;

    RunPaths paths;

    // ConfigError on inconsistent settings: sampling with fewer than two
    // active terms, no active term, transfer into a mismatched geometry, ...
    void validate() const;
    MappingRule effective_mse_rule() const { return mse_rule.value_or(transfer_rule); }
    // Student geometry: explicit override or derived from the teacher.
    LmConfig resolved_student_lm() const;
    std::string hash() const;
};

// V1 keeps the teacher width with 4 blocks; V2 has 7 narrower blocks
// (3/4 width, half the heads) so that its size stays close to V1.
LmConfig variant_geometry(const LmConfig& teacher, Variant v);

nlohmann::json to_json(const RunConfig& cfg);
// Missing keys keep their defaults; unknown keys raise ConfigError.
RunConfig run_config_from_json(const nlohmann::json& j, const RunConfig& base = {});
RunConfig load_run_config(const std::string& path);

nlohmann::json to_json(const LmConfig& c);
nlohmann::json to_json(const ConditionerConfig& c);
nlohmann::json to_json(const CodecConfig& c);
LmConfig lm_config_from_json(const nlohmann::json& j, const LmConfig& base = {});
ConditionerConfig conditioner_config_from_json(const nlohmann::json& j, const ConditionerConfig& base = {});
CodecConfig codec_config_from_json(const nlohmann::json& j, const CodecConfig& base = {});

// Applies an ablation-row label to `base` and returns the LM distillation
// config. Grammar: "<V1|V2> <losses>[/S1|/S2] [Random|Weight copy]", plus
// "Teacher" and "Teacher FT" (teacher training, fine-tuned from an existing
// checkpoint). ConfigError on anything else.
RunConfig config_for_row(std::string_view label, const RunConfig& base = {});
// The label a config answers to; inverse of config_for_row.
std::string row_label(const RunConfig& cfg);

}  // namespace kdforge
