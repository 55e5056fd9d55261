// SPDX-License-Identifier: Apache-2.0
//
// Training loops: teacher training (LM or codec), LM distillation and codec
// decoder distillation. Every run is a pure function of its RunConfig:
// batches, initialization and loss weights are drawn from streams of the
// config seed, so identical configs produce identical logs and checkpoints.
//
// Each checkpoint `path` is accompanied by `path.json`, a run manifest that
// records the model geometry needed to load it again.
#pragma once

#include <cstddef>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "kdforge/data_synth.hpp"
#include "kdforge/models.hpp"
#include "kdforge/run_config.hpp"

namespace kdforge {

struct LmBundle {
    LanguageModel lm;
    Conditioner conditioner;

    NamedTensors named_parameters() const;
};

void save_lm_bundle(const std::string& path, const LmBundle& bundle, nlohmann::json manifest);
LmBundle load_lm_bundle(const std::string& path);
void save_codec_bundle(const std::string& path, const Codec& codec, nlohmann::json manifest);
Codec load_codec_bundle(const std::string& path);
nlohmann::json read_manifest(const std::string& checkpoint_path);

// Next-code probabilities [B, K, T, C] under teacher forcing.
PosteriorFn lm_posteriors(const LmBundle& bundle);

struct CodecEval {
    double mel = 0.0;      // multi-scale mel loss against the input
    double time_l1 = 0.0;  // mean absolute sample error
    double frechet = 0.0;  // toy-extractor embedding distance, reconstruction vs input
    double kl = 0.0;       // toy-extractor posterior KL, input as reference
};

// Reconstructs `clips` through encoder, quantizer and decoder.
CodecEval evaluate_codec(const Codec& codec, const std::vector<std::vector<double>>& clips, const MelConfig& mel,
                         std::size_t batch = 16);

struct TrainResult {
    std::string checkpoint;
    std::string parameter_hash;
    std::size_t steps = 0;
    double first_loss = 0.0;
    double final_loss = 0.0;
    // Exact conditional KL (LM runs with a Markov spec) or held-out mel
    // loss (codec runs with an evaluation corpus), before and after.
    std::optional<double> initial_metric;
    std::optional<double> final_metric;
    nlohmann::json manifest;
};

// `progress`, when given, receives human-readable status lines.
TrainResult run_training(const RunConfig& cfg, std::ostream* progress = nullptr);
TrainResult train_teacher(const RunConfig& cfg, std::ostream* progress = nullptr);
TrainResult distill_lm(const RunConfig& cfg, std::ostream* progress = nullptr);
TrainResult distill_codec(const RunConfig& cfg, std::ostream* progress = nullptr);

}  // namespace kdforge
