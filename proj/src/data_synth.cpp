// SPDX-License-Identifier: Apache-2.0
#include "kdforge/data_synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>

#include <json.hpp>

#include "kdforge/binary_io.hpp"
#include "kdforge/errors.hpp"
#include "kdforge/hash.hpp"
#include "kdforge/ops.hpp"
#include "kdforge/threads.hpp"

namespace kdforge {

namespace {

void check_distribution(std::span<const double> row, const std::string& what) {
    double total = 0.0;
    for (double p : row) {
        if (!(p >= 0.0) || !std::isfinite(p)) {
            throw ValidationError(what + ": negative or non-finite probability");
        }
        total += p;
    }
    if (std::abs(total - 1.0) > 1e-9) {
        throw ValidationError(what + ": row sums to " + std::to_string(total));
    }
}

std::size_t sample_categorical(std::span<const double> probs, Rng& rng) {
    const double u = rng.uniform();
    double acc = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        acc += probs[i];
        if (u < acc) {
            return i;
        }
    }
    // Rounding left u above the accumulated mass: take the last supported entry.
    for (std::size_t i = probs.size(); i-- > 0;) {
        if (probs[i] > 0.0) {
            return i;
        }
    }
    return probs.size() - 1;
}

}  // namespace

void MarkovSpec::validate() const {
    if (codebooks == 0 || cardinality < 2 || classes == 0 || sequence_length == 0) {
        throw ValidationError("markov spec: need codebooks >= 1, cardinality >= 2, classes >= 1, length >= 1");
    }
    if (cardinality > 65536 || caption_vocab > 65536) {
        throw ValidationError("markov spec: codes and caption tokens must fit in 16 bits");
    }
    if (caption_length == 0 || caption_vocab < classes || (caption_length > 1 && caption_vocab <= classes)) {
        throw ValidationError("markov spec: caption vocabulary " + std::to_string(caption_vocab) +
                              " cannot hold " + std::to_string(classes) + " class tokens plus filler");
    }
    if (initial.size() != classes * codebooks * cardinality ||
        transitions.size() != classes * codebooks * cardinality * cardinality) {
        throw ValidationError("markov spec: table sizes do not match classes x codebooks x cardinality");
    }
    for (std::size_t r = 0; r < classes * codebooks; ++r) {
        check_distribution(std::span(initial).subspan(r * cardinality, cardinality), "initial distribution");
    }
    for (std::size_t r = 0; r < classes * codebooks * cardinality; ++r) {
        check_distribution(std::span(transitions).subspan(r * cardinality, cardinality), "transition matrix");
    }
}

std::span<const double> MarkovSpec::conditional(std::size_t cls, std::size_t k, std::size_t t,
                                                std::size_t prev) const {
    if (t == 0) {
        return std::span(initial).subspan((cls * codebooks + k) * cardinality, cardinality);
    }
    return std::span(transitions).subspan(((cls * codebooks + k) * cardinality + prev) * cardinality, cardinality);
}

void save_markov_spec(const std::filesystem::path& path, const MarkovSpec& spec) {
    spec.validate();
    const nlohmann::json j = {{"format", "kdforge-markov-spec"},
                              {"version", 1},
                              {"codebooks", spec.codebooks},
                              {"cardinality", spec.cardinality},
                              {"classes", spec.classes},
                              {"caption_vocab", spec.caption_vocab},
                              {"caption_length", spec.caption_length},
                              {"sequence_length", spec.sequence_length},
                              {"seed", spec.seed},
                              {"initial", spec.initial},
                              {"transitions", spec.transitions}};
    std::ofstream os(path);
    if (!os) {
        throw Error("cannot open '" + path.string() + "' for writing");
    }
    os << j.dump() << "\n";
}

MarkovSpec load_markov_spec(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) {
        throw Error("cannot open '" + path.string() + "'");
    }
    MarkovSpec s;
    try {
        const nlohmann::json j = nlohmann::json::parse(is);
        if (j.value("format", "") != "kdforge-markov-spec") {
            throw BadMagicError("markov spec: unexpected format tag in '" + path.string() + "'");
        }
        if (j.value("version", 0) != 1) {
            throw UnsupportedVersionError("markov spec: unsupported version " + j.at("version").dump());
        }
        s.codebooks = j.at("codebooks").get<std::size_t>();
        s.cardinality = j.at("cardinality").get<std::size_t>();
        s.classes = j.at("classes").get<std::size_t>();
        s.caption_vocab = j.at("caption_vocab").get<std::size_t>();
        s.caption_length = j.at("caption_length").get<std::size_t>();
        s.sequence_length = j.at("sequence_length").get<std::size_t>();
        s.seed = j.at("seed").get<std::uint64_t>();
        s.initial = j.at("initial").get<std::vector<double>>();
        s.transitions = j.at("transitions").get<std::vector<double>>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("markov spec '" + path.string() + "': " + e.what());
    }
    s.validate();
    return s;
}

MarkovSpec random_markov_spec(const MarkovShape& shape, std::uint64_t seed) {
    if (shape.support == 0 || shape.support > shape.cardinality || shape.smoothing < 0.0 || shape.smoothing > 1.0) {
        throw ValidationError("markov shape: support must be in [1, C] and smoothing in [0, 1]");
    }
    MarkovSpec s;
    s.codebooks = shape.codebooks;
    s.cardinality = shape.cardinality;
    s.classes = shape.classes;
    s.caption_vocab = shape.caption_vocab;
    s.caption_length = shape.caption_length;
    s.sequence_length = shape.sequence_length;
    s.seed = seed;
    Rng rng(seed, 0x5350);
    const std::size_t c = shape.cardinality;
    auto fill_row = [&](std::span<double> row) {
        std::vector<std::size_t> perm(c);
        for (std::size_t i = 0; i < c; ++i) {
            perm[i] = i;
        }
        for (std::size_t i = 0; i < shape.support; ++i) {
            std::swap(perm[i], perm[i + rng.below(c - i)]);
        }
        std::vector<double> w(shape.support);
        double total = 0.0;
        for (double& x : w) {
            x = 0.2 + rng.uniform();
            total += x;
        }
        for (double& p : row) {
            p = shape.smoothing / static_cast<double>(c);
        }
        for (std::size_t i = 0; i < shape.support; ++i) {
            row[perm[i]] += (1.0 - shape.smoothing) * w[i] / total;
        }
        // Absorb rounding so the row sums to one as closely as possible.
        double sum = 0.0;
        for (double p : row) {
            sum += p;
        }
        row[perm[0]] += 1.0 - sum;
    };
    s.initial.assign(s.classes * s.codebooks * c, 0.0);
    s.transitions.assign(s.classes * s.codebooks * c * c, 0.0);
    for (std::size_t r = 0; r < s.classes * s.codebooks; ++r) {
        fill_row(std::span(s.initial).subspan(r * c, c));
    }
    for (std::size_t r = 0; r < s.classes * s.codebooks * c; ++r) {
        fill_row(std::span(s.transitions).subspan(r * c, c));
    }
    s.validate();
    return s;
}

TokenCorpus gen_token_corpus(const MarkovSpec& spec, std::size_t n_clips) {
    spec.validate();
    TokenCorpus corpus;
    corpus.codebooks = static_cast<std::uint32_t>(spec.codebooks);
    corpus.cardinality = static_cast<std::uint32_t>(spec.cardinality);
    corpus.clips.resize(n_clips);
    const std::size_t t_len = spec.sequence_length;
    parallel_for(n_clips, worker_threads(), [&](std::size_t i) {
        Rng rng(spec.seed, i + 1);
        TokenClip& clip = corpus.clips[i];
        const std::size_t cls = rng.below(spec.classes);
        clip.caption.push_back(static_cast<std::uint16_t>(cls));
        for (std::size_t j = 1; j < spec.caption_length; ++j) {
            clip.caption.push_back(static_cast<std::uint16_t>(spec.classes + rng.below(spec.caption_vocab - spec.classes)));
        }
        clip.time = static_cast<std::uint32_t>(t_len);
        clip.codes.resize(spec.codebooks * t_len);
        for (std::size_t k = 0; k < spec.codebooks; ++k) {
            std::size_t prev = 0;
            for (std::size_t t = 0; t < t_len; ++t) {
                prev = sample_categorical(spec.conditional(cls, k, t, prev), rng);
                clip.codes[k * t_len + t] = static_cast<std::uint16_t>(prev);
            }
        }
    });
    return corpus;
}

void write_token_corpus(std::ostream& os, const TokenCorpus& corpus) {
    binio::write_bytes(os, "KDTC");
    binio::write_u32(os, kTokenCorpusVersion);
    binio::write_u32(os, corpus.codebooks);
    binio::write_u32(os, corpus.cardinality);
    binio::write_u32(os, static_cast<std::uint32_t>(corpus.clips.size()));
    for (const TokenClip& clip : corpus.clips) {
        if (clip.caption.size() > 0xFFFF) {
            throw ValidationError("token corpus: caption longer than 65535 tokens");
        }
        if (clip.codes.size() != static_cast<std::size_t>(corpus.codebooks) * clip.time) {
            throw ShapeError("token corpus: clip holds " + std::to_string(clip.codes.size()) + " codes, expected " +
                             std::to_string(corpus.codebooks) + " x " + std::to_string(clip.time));
        }
        binio::write_u16(os, static_cast<std::uint16_t>(clip.caption.size()));
        for (std::uint16_t tok : clip.caption) {
            binio::write_u16(os, tok);
        }
        binio::write_u32(os, clip.time);
        for (std::uint16_t c : clip.codes) {
            binio::write_u16(os, c);
        }
    }
}

TokenCorpus read_token_corpus(std::istream& is) {
    binio::expect_header(is, "KDTC", kTokenCorpusVersion, "token corpus");
    TokenCorpus corpus;
    corpus.codebooks = binio::read_u32(is, "codebook count");
    corpus.cardinality = binio::read_u32(is, "cardinality");
    const std::uint32_t n = binio::read_u32(is, "clip count");
    for (std::uint32_t i = 0; i < n; ++i) {
        TokenClip clip;
        const std::uint16_t len = binio::read_u16(is, "caption length");
        for (std::uint16_t j = 0; j < len; ++j) {
            clip.caption.push_back(binio::read_u16(is, "caption token"));
        }
        clip.time = binio::read_u32(is, "clip length");
        const std::size_t count = static_cast<std::size_t>(corpus.codebooks) * clip.time;
        clip.codes.reserve(std::min<std::size_t>(count, std::size_t{1} << 20));
        for (std::size_t j = 0; j < count; ++j) {
            const std::uint16_t c = binio::read_u16(is, "code");
            if (c >= corpus.cardinality) {
                throw FormatError("token corpus: code " + std::to_string(c) + " exceeds cardinality " +
                                  std::to_string(corpus.cardinality));
            }
            clip.codes.push_back(c);
        }
        corpus.clips.push_back(std::move(clip));
    }
    return corpus;
}

void save_token_corpus(const std::filesystem::path& path, const TokenCorpus& corpus) {
    std::ofstream os(path, std::ios::binary);
    if (!os) {
        throw Error("cannot open '" + path.string() + "' for writing");
    }
    write_token_corpus(os, corpus);
}

TokenCorpus load_token_corpus(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw Error("cannot open '" + path.string() + "'");
    }
    return read_token_corpus(is);
}

std::pair<CaptionBatch, TokenBatch> make_token_batch(const TokenCorpus& corpus, std::span<const std::size_t> clips) {
    if (clips.empty()) {
        throw ValidationError("token batch: no clips selected");
    }
    const TokenClip& first = corpus.clips.at(clips[0]);
    CaptionBatch cap;
    cap.batch = clips.size();
    cap.length = first.caption.size();
    TokenBatch tok(clips.size(), corpus.codebooks, first.time, corpus.cardinality);
    for (std::size_t b = 0; b < clips.size(); ++b) {
        const TokenClip& clip = corpus.clips.at(clips[b]);
        if (clip.caption.size() != cap.length || clip.time != first.time) {
            throw ShapeError("token batch: clips differ in caption length or duration");
        }
        cap.tokens.insert(cap.tokens.end(), clip.caption.begin(), clip.caption.end());
        std::copy(clip.codes.begin(), clip.codes.end(),
                  tok.codes.begin() + static_cast<std::ptrdiff_t>(b * clip.codes.size()));
    }
    return {std::move(cap), std::move(tok)};
}

double exact_conditional_kl(const PosteriorFn& model, const MarkovSpec& spec, std::size_t n_contexts,
                            std::uint64_t seed, std::size_t batch) {
    if (n_contexts == 0 || batch == 0) {
        throw ValidationError("conditional kl: need at least one context and a positive batch size");
    }
    MarkovSpec draw = spec;
    draw.seed = seed;
    const TokenCorpus corpus = gen_token_corpus(draw, n_contexts);
    const std::size_t k_count = spec.codebooks;
    const std::size_t c_count = spec.cardinality;
    const std::size_t t_len = spec.sequence_length;
    std::vector<double> per_codebook(k_count, 0.0);
    for (std::size_t start = 0; start < n_contexts; start += batch) {
        std::vector<std::size_t> idx;
        for (std::size_t i = start; i < std::min(n_contexts, start + batch); ++i) {
            idx.push_back(i);
        }
        const auto [cap, tok] = make_token_batch(corpus, idx);
        const Tensor probs = model(cap, tok);
        if (probs.shape() != Shape{idx.size(), k_count, t_len, c_count}) {
            throw ShapeError("conditional kl: model returned " + shape_str(probs.shape()));
        }
        const auto pd = probs.data();
        for (std::size_t b = 0; b < idx.size(); ++b) {
            const std::size_t cls = cap.tokens[b * cap.length];
            for (std::size_t k = 0; k < k_count; ++k) {
                for (std::size_t t = 0; t < t_len; ++t) {
                    const std::size_t prev = t == 0 ? 0 : tok.at(b, k, t - 1);
                    const auto truth = spec.conditional(cls, k, t, prev);
                    const std::size_t base = ((b * k_count + k) * t_len + t) * c_count;
                    double kl = 0.0;
                    for (std::size_t c = 0; c < c_count; ++c) {
                        if (truth[c] > 0.0) {
                            kl += truth[c] * (std::log(truth[c]) - std::log(std::max(pd[base + c], 1e-12)));
                        }
                    }
                    per_codebook[k] += kl;
                }
            }
        }
    }
    double total = 0.0;
    for (double v : per_codebook) {
        total += v / static_cast<double>(n_contexts * t_len);
    }
    return total / static_cast<double>(k_count);
}

PosteriorFn oracle_posteriors(const MarkovSpec& spec) {
    return [spec](const CaptionBatch& cap, const TokenBatch& tok) {
        Tensor out({tok.batch, tok.codebooks, tok.time, spec.cardinality});
        auto d = out.mutable_data();
        for (std::size_t b = 0; b < tok.batch; ++b) {
            const std::size_t cls = cap.tokens[b * cap.length];
            for (std::size_t k = 0; k < tok.codebooks; ++k) {
                for (std::size_t t = 0; t < tok.time; ++t) {
                    const auto row = spec.conditional(cls, k, t, t == 0 ? 0 : tok.at(b, k, t - 1));
                    std::copy(row.begin(), row.end(),
                              d.begin() + static_cast<std::ptrdiff_t>(((b * tok.codebooks + k) * tok.time + t) *
                                                                      spec.cardinality));
                }
            }
        }
        return out;
    };
}

// ---------------------------------------------------------------------------
// Waveforms

void WaveSpec::validate() const {
    if (!(sample_rate > 0.0) || clip_length == 0) {
        throw ValidationError("wave spec: sample rate and clip length must be positive");
    }
    if (min_components == 0 || min_components > max_components) {
        throw ValidationError("wave spec: need 1 <= min_components <= max_components");
    }
    if (!(min_freq > 0.0) || min_freq > max_freq || max_freq >= sample_rate / 2.0) {
        throw ValidationError("wave spec: frequencies must satisfy 0 < min <= max < Nyquist");
    }
    if (noise_floor < 0.0) {
        throw ValidationError("wave spec: noise floor must be nonnegative");
    }
}

namespace {
nlohmann::json wave_spec_json(const WaveSpec& s) {
    return {{"sample_rate", s.sample_rate},       {"clip_length", s.clip_length},
            {"min_components", s.min_components}, {"max_components", s.max_components},
            {"min_freq", s.min_freq},             {"max_freq", s.max_freq},
            {"noise_floor", s.noise_floor},       {"seed", s.seed}};
}
}  // namespace

std::string WaveSpec::hash() const {
    return fnv1a_hex(wave_spec_json(*this).dump());
}

std::vector<double> gen_wave_clip(const WaveSpec& spec, std::size_t index) {
    spec.validate();
    Rng rng(spec.seed, index + 1);
    const std::size_t comps = spec.min_components + rng.below(spec.max_components - spec.min_components + 1);
    std::vector<double> x(spec.clip_length, 0.0);
    for (std::size_t c = 0; c < comps; ++c) {
        const double f = rng.uniform(spec.min_freq, spec.max_freq);
        const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
        const double amp = rng.uniform(0.2, 1.0);
        for (std::size_t i = 0; i < x.size(); ++i) {
            x[i] += amp * std::sin(2.0 * std::numbers::pi * f * static_cast<double>(i) / spec.sample_rate + phase);
        }
    }
    if (spec.noise_floor > 0.0) {
        for (double& v : x) {
            v += spec.noise_floor * rng.normal();
        }
    }
    double peak = 0.0;
    for (double v : x) {
        peak = std::max(peak, std::abs(v));
    }
    const double gain = peak > 0.0 ? kWavePeak / peak : 0.0;
    for (double& v : x) {
        float f = static_cast<float>(v * gain);
        // Rounding to binary32 may nudge a sample past the peak bound.
        if (std::abs(f) > kWavePeak) {
            f = std::nextafter(f, 0.0f);
        }
        v = f;
    }
    return x;
}

std::vector<std::vector<double>> gen_wave_clips(const WaveSpec& spec, std::size_t n_clips, std::size_t first) {
    spec.validate();
    std::vector<std::vector<double>> out(n_clips);
    parallel_for(n_clips, worker_threads(), [&](std::size_t i) { out[i] = gen_wave_clip(spec, first + i); });
    return out;
}

void write_wav(std::ostream& os, std::span<const double> samples, std::uint32_t sample_rate) {
    const auto data_bytes = static_cast<std::uint32_t>(samples.size() * 4);
    binio::write_bytes(os, "RIFF");
    binio::write_u32(os, 36 + data_bytes);
    binio::write_bytes(os, "WAVE");
    binio::write_bytes(os, "fmt ");
    binio::write_u32(os, 16);
    binio::write_u16(os, 3);  // IEEE float
    binio::write_u16(os, 1);  // mono
    binio::write_u32(os, sample_rate);
    binio::write_u32(os, sample_rate * 4);
    binio::write_u16(os, 4);
    binio::write_u16(os, 32);
    binio::write_bytes(os, "data");
    binio::write_u32(os, data_bytes);
    for (double v : samples) {
        binio::write_f32(os, static_cast<float>(v));
    }
}

WavData read_wav(std::istream& is) {
    const std::string riff = binio::read_bytes(is, 4, "RIFF tag");
    binio::read_u32(is, "RIFF size");
    const std::string wave = binio::read_bytes(is, 4, "WAVE tag");
    if (riff != "RIFF" || wave != "WAVE") {
        throw BadMagicError("wav: not a RIFF/WAVE stream");
    }
    WavData out;
    bool have_fmt = false;
    for (;;) {
        const std::string id = binio::read_bytes(is, 4, "chunk id");
        const std::uint32_t size = binio::read_u32(is, "chunk size");
        if (id == "fmt ") {
            const std::uint16_t format = binio::read_u16(is, "format tag");
            const std::uint16_t channels = binio::read_u16(is, "channel count");
            out.sample_rate = binio::read_u32(is, "sample rate");
            binio::read_u32(is, "byte rate");
            binio::read_u16(is, "block align");
            const std::uint16_t bits = binio::read_u16(is, "bits per sample");
            if (format != 3 || channels != 1 || bits != 32) {
                throw FormatError("wav: only mono 32-bit float is supported");
            }
            if (size > 16) {
                binio::read_bytes(is, size - 16, "fmt extension");
            }
            have_fmt = true;
        } else if (id == "data") {
            if (!have_fmt) {
                throw FormatError("wav: data chunk before fmt chunk");
            }
            out.samples.reserve(std::min<std::size_t>(size / 4, std::size_t{1} << 24));
            for (std::uint32_t i = 0; i < size / 4; ++i) {
                out.samples.push_back(binio::read_f32(is, "sample"));
            }
            return out;
        } else {
            binio::read_bytes(is, size + (size & 1), "chunk body");
        }
    }
}

void write_wave_corpus(const std::filesystem::path& dir, const WaveSpec& spec, std::size_t n_clips) {
    spec.validate();
    std::filesystem::create_directories(dir);
    const auto audio = gen_wave_clips(spec, n_clips);
    nlohmann::json clips = nlohmann::json::array();
    for (std::size_t i = 0; i < n_clips; ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "clip_%05zu.wav", i);
        const std::vector<double>& x = audio[i];
        std::ofstream os(dir / name, std::ios::binary);
        if (!os) {
            throw Error("cannot write '" + (dir / name).string() + "'");
        }
        write_wav(os, x, static_cast<std::uint32_t>(std::lround(spec.sample_rate)));
        clips.push_back({{"path", name}, {"seed", spec.seed}, {"stream", i + 1}});
    }
    const nlohmann::json manifest = {{"format", "kdforge-wave-corpus"},
                                     {"version", kWaveCorpusVersion},
                                     {"spec", wave_spec_json(spec)},
                                     {"spec_hash", spec.hash()},
                                     {"clips", clips}};
    std::ofstream os(dir / "manifest.json");
    os << manifest.dump(2) << "\n";
}

WaveCorpus read_wave_corpus(const std::filesystem::path& dir) {
    std::ifstream is(dir / "manifest.json");
    if (!is) {
        throw Error("cannot open '" + (dir / "manifest.json").string() + "'");
    }
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(is);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("wave corpus manifest: ") + e.what());
    }
    if (manifest.value("format", "") != "kdforge-wave-corpus") {
        throw BadMagicError("wave corpus manifest: unexpected format tag");
    }
    if (manifest.value("version", 0u) != kWaveCorpusVersion) {
        throw UnsupportedVersionError("wave corpus manifest: unsupported version " +
                                      manifest.value("version", nlohmann::json(0)).dump());
    }
    WaveCorpus corpus;
    corpus.spec_hash = manifest.value("spec_hash", "");
    corpus.sample_rate = manifest.at("spec").at("sample_rate").get<double>();
    for (const auto& clip : manifest.at("clips")) {
        std::ifstream ws(dir / clip.at("path").get<std::string>(), std::ios::binary);
        if (!ws) {
            throw Error("cannot open clip '" + clip.at("path").get<std::string>() + "'");
        }
        corpus.clips.push_back(read_wav(ws).samples);
    }
    return corpus;
}

Tensor stack_clips(const std::vector<std::vector<double>>& clips, std::span<const std::size_t> indices) {
    if (indices.empty()) {
        throw ValidationError("stack clips: nothing selected");
    }
    const std::size_t n = clips.at(indices[0]).size();
    std::vector<double> data;
    data.reserve(indices.size() * n);
    for (std::size_t i : indices) {
        const auto& c = clips.at(i);
        if (c.size() != n) {
            throw ShapeError("stack clips: lengths " + std::to_string(c.size()) + " vs " + std::to_string(n));
        }
        data.insert(data.end(), c.begin(), c.end());
    }
    return Tensor({indices.size(), 1, n}, std::move(data));
}

}  // namespace kdforge
