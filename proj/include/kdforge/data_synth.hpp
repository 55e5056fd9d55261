// SPDX-License-Identifier: Apache-2.0
//
// Synthetic corpora with known generating distributions.
//
// Token track: each clip has a caption whose first token is its class id
// (the remaining tokens are filler drawn above the class range). Every
// codebook then follows its own first-order Markov chain, whose initial
// distribution and transition matrix depend on the class. Because the true
// next-code distribution is known, a model's quality can be scored exactly.
//
// Wave track: sums of random sinusoids plus Gaussian noise, peak-normalized
// and stored as 32-bit float WAV files with a JSON manifest.
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "kdforge/models.hpp"

namespace kdforge {

struct MarkovSpec {
    std::size_t codebooks = 4;
    std::size_t cardinality = 64;
    std::size_t classes = 4;
    std::size_t caption_vocab = 16;
    std::size_t caption_length = 3;
    std::size_t sequence_length = 16;
    std::vector<double> initial;      // [classes][codebooks][cardinality]
    std::vector<double> transitions;  // [classes][codebooks][cardinality][cardinality]
    std::uint64_t seed = 1;

    // Throws ValidationError for inconsistent sizes or rows that are not
    // probability vectors within 1e-9.
    void validate() const;

    double initial_prob(std::size_t cls, std::size_t k, std::size_t c) const {
        return initial[(cls * codebooks + k) * cardinality + c];
    }
    double transition(std::size_t cls, std::size_t k, std::size_t from, std::size_t to) const {
        return transitions[((cls * codebooks + k) * cardinality + from) * cardinality + to];
    }
    // True distribution of code (k, t) given the class and the previous code.
    std::span<const double> conditional(std::size_t cls, std::size_t k, std::size_t t, std::size_t prev) const;
};

// JSON form with full double precision, so a loaded spec is bit-identical.
void save_markov_spec(const std::filesystem::path& path, const MarkovSpec& spec);
MarkovSpec load_markov_spec(const std::filesystem::path& path);

struct MarkovShape {
    std::size_t codebooks = 4;
    std::size_t cardinality = 64;
    std::size_t classes = 4;
    std::size_t caption_vocab = 16;
    std::size_t caption_length = 3;
    std::size_t sequence_length = 16;
    std::size_t support = 3;   // nonzero entries before smoothing
    double smoothing = 0.05;   // mass spread uniformly over every row
};

// Rows put (1 - smoothing) on `support` random entries with random weights
// and the remainder uniformly.
MarkovSpec random_markov_spec(const MarkovShape& shape, std::uint64_t seed);

struct TokenClip {
    std::vector<std::uint16_t> caption;
    std::uint32_t time = 0;
    std::vector<std::uint16_t> codes;  // [codebooks][time]
};

struct TokenCorpus {
    std::uint32_t codebooks = 0;
    std::uint32_t cardinality = 0;
    std::vector<TokenClip> clips;
};

// Clip i is drawn from its own stream of the spec seed.
TokenCorpus gen_token_corpus(const MarkovSpec& spec, std::size_t n_clips);

inline constexpr std::uint32_t kTokenCorpusVersion = 1;
void write_token_corpus(std::ostream& os, const TokenCorpus& corpus);
TokenCorpus read_token_corpus(std::istream& is);
void save_token_corpus(const std::filesystem::path& path, const TokenCorpus& corpus);
TokenCorpus load_token_corpus(const std::filesystem::path& path);

// Batch of the given clips; all must share caption length and time.
std::pair<CaptionBatch, TokenBatch> make_token_batch(const TokenCorpus& corpus, std::span<const std::size_t> clips);

// Maps (captions, tokens) to next-code probabilities [B, K, T, C] under
// teacher forcing.
using PosteriorFn = std::function<Tensor(const CaptionBatch&, const TokenBatch&)>;

// Mean over positions of KL(true || model), per codebook, then averaged over
// codebooks. Contexts are `n_contexts` fresh sequences drawn from `spec`
// with the given seed.
double exact_conditional_kl(const PosteriorFn& model, const MarkovSpec& spec, std::size_t n_contexts,
                            std::uint64_t seed, std::size_t batch = 32);

// Posterior function that returns the spec's own conditionals.
PosteriorFn oracle_posteriors(const MarkovSpec& spec);

// ---------------------------------------------------------------------------

struct WaveSpec {
    double sample_rate = 8000.0;
    std::size_t clip_length = 1024;
    std::size_t min_components = 1;
    std::size_t max_components = 3;
    double min_freq = 100.0;
    double max_freq = 2000.0;
    double noise_floor = 0.01;
    std::uint64_t seed = 1;

    void validate() const;
    std::string hash() const;
};

inline constexpr double kWavePeak = 0.95;

// Samples are binary32 values so that they survive the WAV round trip.
std::vector<double> gen_wave_clip(const WaveSpec& spec, std::size_t index);
std::vector<std::vector<double>> gen_wave_clips(const WaveSpec& spec, std::size_t n_clips, std::size_t first = 0);

void write_wav(std::ostream& os, std::span<const double> samples, std::uint32_t sample_rate);
struct WavData {
    std::uint32_t sample_rate = 0;
    std::vector<double> samples;
};
WavData read_wav(std::istream& is);

inline constexpr std::uint32_t kWaveCorpusVersion = 1;

// Writes clip_00000.wav ... and manifest.json into `dir`.
void write_wave_corpus(const std::filesystem::path& dir, const WaveSpec& spec, std::size_t n_clips);

struct WaveCorpus {
    double sample_rate = 0.0;
    std::vector<std::vector<double>> clips;
    std::string spec_hash;
};
WaveCorpus read_wave_corpus(const std::filesystem::path& dir);

// Stacks equally long clips into a [B, 1, N] waveform.
Tensor stack_clips(const std::vector<std::vector<double>>& clips, std::span<const std::size_t> indices);

}  // namespace kdforge
