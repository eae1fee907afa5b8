// Copyright 2026 the tsrelab authors
// SPDX-License-Identifier: Apache-2.0
//
// Synthetic retrieval corpus: caption latents rendered into frame sequences,
// colored per speaker, mixed K at a time, with enrollment-based speaker
// embeddings and image-disjoint train/val/test splits.
//
// Rendering: content channels carry base + sum_j z_j * lexicon_j, passed
// through a per-speaker affine coloring M(sig) = I + gain_scale *
// sum_g sig_g * B_g with frozen random B_g; identity channels carry a
// fixed-RMS signature image, constant over time; i.i.d. noise on top.
// Content is linear in the caption latent and the speaker coloring is linear
// in the signature, so both are recoverable by linear probes; time-averaging
// suppresses content but not identity, which is what makes enrollment
// embeddings speaker-discriminative.
//
// On disk a corpus is manifest.jsonl (one sample per line) plus frames.bin,
// a TSRELAB1 container holding frames, enrollment vectors, caption latents,
// signatures and the generation config. Both files are byte-deterministic
// in (config, seed).

#ifndef TSRELAB_DATAGEN_HPP
#define TSRELAB_DATAGEN_HPP

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "tsrelab/container.hpp"
#include "tsrelab/rng.hpp"
#include "tsrelab/tensor.hpp"

namespace tsrelab {

struct DatagenConfig {
  std::size_t num_images = 400;
  std::size_t captions_per_image = 1;
  std::size_t mixtures_per_caption = 1;  // renditions with fresh speaker draws
  std::size_t num_speakers = 40;
  std::size_t num_conditions = 2;  // speakers per mixture (K)
  std::size_t frames = 24;
  std::size_t enroll_frames = 24;
  std::size_t latent_dim = 24;
  std::size_t identity_channels = 8;
  std::size_t signature_dim = 8;
  std::size_t speaker_dim = 16;
  std::size_t val_images = 50;
  std::size_t test_images = 50;
  double noise_sigma = 0.05;
  double gain_scale = 0.5;
  double identity_scale = 1.5;
  double activity_floor = 0.15;  // quietest point of the burst envelope
  std::uint64_t seed = 1;

  std::size_t input_dim() const { return latent_dim + identity_channels; }
  std::size_t train_images() const {
    return num_images - val_images - test_images;
  }
  std::size_t num_captions() const { return num_images * captions_per_image; }

  void validate() const {
    if (num_images == 0 || captions_per_image == 0 ||
        mixtures_per_caption == 0 || num_speakers == 0 || frames == 0 ||
        enroll_frames == 0 || latent_dim == 0 || identity_channels == 0 ||
        signature_dim == 0 || speaker_dim == 0)
      throw ConfigError("DatagenConfig: all sizes must be >= 1");
    if (num_conditions == 0 || num_conditions > 3)
      throw ConfigError("DatagenConfig: num_conditions must be in 1..3");
    if (num_speakers < num_conditions)
      throw ConfigError("DatagenConfig: need at least num_conditions speakers");
    if (val_images + test_images >= num_images)
      throw ConfigError("DatagenConfig: splits leave no training images");
    // every split must offer K-1 distractor captions besides the target
    std::size_t smallest = std::min(
        {train_images(), val_images, test_images});
    if (smallest * captions_per_image < num_conditions)
      throw ConfigError(
          "DatagenConfig: smallest split too small for the mixture size");
    if (noise_sigma < 0.0)
      throw ConfigError("DatagenConfig: noise_sigma must be >= 0");
    if (!(activity_floor > 0.0) || activity_floor > 1.0)
      throw ConfigError("DatagenConfig: activity_floor must be in (0, 1]");
  }
};

inline void to_json(nlohmann::json& j, const DatagenConfig& c) {
  j = nlohmann::json{{"num_images", c.num_images},
                     {"captions_per_image", c.captions_per_image},
                     {"mixtures_per_caption", c.mixtures_per_caption},
                     {"num_speakers", c.num_speakers},
                     {"num_conditions", c.num_conditions},
                     {"frames", c.frames},
                     {"enroll_frames", c.enroll_frames},
                     {"latent_dim", c.latent_dim},
                     {"identity_channels", c.identity_channels},
                     {"signature_dim", c.signature_dim},
                     {"speaker_dim", c.speaker_dim},
                     {"val_images", c.val_images},
                     {"test_images", c.test_images},
                     {"noise_sigma", c.noise_sigma},
                     {"gain_scale", c.gain_scale},
                     {"identity_scale", c.identity_scale},
                     {"activity_floor", c.activity_floor},
                     {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, DatagenConfig& c) {
  j.at("num_images").get_to(c.num_images);
  j.at("captions_per_image").get_to(c.captions_per_image);
  j.at("mixtures_per_caption").get_to(c.mixtures_per_caption);
  j.at("num_speakers").get_to(c.num_speakers);
  j.at("num_conditions").get_to(c.num_conditions);
  j.at("frames").get_to(c.frames);
  j.at("enroll_frames").get_to(c.enroll_frames);
  j.at("latent_dim").get_to(c.latent_dim);
  j.at("identity_channels").get_to(c.identity_channels);
  j.at("signature_dim").get_to(c.signature_dim);
  j.at("speaker_dim").get_to(c.speaker_dim);
  j.at("val_images").get_to(c.val_images);
  j.at("test_images").get_to(c.test_images);
  j.at("noise_sigma").get_to(c.noise_sigma);
  j.at("gain_scale").get_to(c.gain_scale);
  j.at("identity_scale").get_to(c.identity_scale);
  j.at("activity_floor").get_to(c.activity_floor);
  j.at("seed").get_to(c.seed);
}

struct SpeakerProfile {
  std::string speaker_id;
  std::vector<double> signature;
  Tensor enrollment_frames;  // [enroll_frames x input_dim]
};

struct CaptionLatent {
  std::string caption_id;
  std::string image_id;
  Tensor latent;  // [latent_dim]
};

struct MixtureSample {
  std::string sample_id;
  std::string image_id;  // image of the target caption
  std::vector<std::string> speaker_ids;
  std::vector<std::string> caption_ids;
  std::vector<double> gains;
  std::size_t target = 0;  // zero-based component index
  Tensor frames;           // [frames x input_dim]
  std::vector<Tensor> enrollments;  // per component, unit [speaker_dim]
};

struct CorpusSplit {
  std::string name;
  std::vector<MixtureSample> samples;
};

struct Corpus {
  DatagenConfig config;
  std::vector<SpeakerProfile> speakers;
  std::vector<CaptionLatent> captions;  // corpus order; split recorded below
  std::vector<std::string> caption_split;  // parallel to captions
  CorpusSplit train{"train", {}}, val{"val", {}}, test{"test", {}};

  const CorpusSplit& split(const std::string& name) const {
    if (name == "train") return train;
    if (name == "val") return val;
    if (name == "test") return test;
    throw ConfigError("Corpus: unknown split '" + name + "'");
  }
};

/// Root-mean-square over all entries.
inline double rms(const Tensor& t) {
  double s = 0.0;
  for (double v : t.value()) s += v * v;
  return std::sqrt(s / double(t.size()));
}

/// Frame-wise weighted sum. Shorter utterances are zero-padded at the tail
/// to the longest one. Plain sum: any loudness equalization lives in the
/// gains (see equal_loudness_gains).
inline Tensor mix(const std::vector<Tensor>& utterances,
                  const std::vector<double>& gains) {
  if (utterances.empty()) throw ConfigError("mix: empty utterance list");
  if (utterances.size() != gains.size())
    throw ConfigError("mix: " + std::to_string(utterances.size()) +
                      " utterances vs " + std::to_string(gains.size()) +
                      " gains");
  std::size_t T = 0, C = utterances[0].shape()[1];
  for (const auto& u : utterances) {
    if (u.rank() != 2 || u.shape()[1] != C)
      throw ShapeError("mix: utterances must share the channel count");
    T = std::max(T, u.shape()[0]);
  }
  Tensor out = Tensor::zeros({T, C});
  std::span<double> o = out.mutable_value();
  for (std::size_t q = 0; q < utterances.size(); ++q) {
    const Tensor& u = utterances[q];
    for (std::size_t t = 0; t < u.shape()[0]; ++t)
      for (std::size_t c = 0; c < C; ++c)
        o[t * C + c] += gains[q] * u.at(t, c);
  }
  return out;
}

/// Smooth burst envelope in [floor, 1]: a seeded sinusoid pushed through a
/// soft gate, one or two talk bursts over the sequence. Mixture components
/// get independent envelopes, so speakers rarely overlap at full strength
/// and a conditioned model can favor frames where its target dominates.
inline std::vector<double> activity_envelope(std::uint64_t seed,
                                             const std::string& stream,
                                             std::size_t rows, double floor) {
  Rng r(seed, stream);
  double phase = r.uniform(0.0, 1.0);
  double cycles = 1.0 + double(r.below(2));
  std::vector<double> env(rows);
  for (std::size_t t = 0; t < rows; ++t) {
    double raw = std::sin(2.0 * std::acos(-1.0) *
                          (cycles * double(t) / double(rows) + phase));
    env[t] = floor + (1.0 - floor) / (1.0 + std::exp(-4.0 * raw));
  }
  return env;
}

/// Scales every channel of frame t by env[t].
inline Tensor apply_activity(const Tensor& frames,
                             const std::vector<double>& env) {
  if (frames.rank() != 2 || frames.shape()[0] != env.size())
    throw ShapeError("apply_activity: envelope length must match frames");
  Tensor out = Tensor::from(frames.shape(),
                            {frames.value().begin(), frames.value().end()});
  std::span<double> o = out.mutable_value();
  std::size_t C = frames.shape()[1];
  for (std::size_t t = 0; t < env.size(); ++t)
    for (std::size_t c = 0; c < C; ++c) o[t * C + c] *= env[t];
  return out;
}

/// Gains that bring every component to unit RMS before summation.
inline std::vector<double> equal_loudness_gains(
    const std::vector<Tensor>& utterances) {
  std::vector<double> g;
  g.reserve(utterances.size());
  for (const auto& u : utterances) {
    double r = rms(u);
    if (r < 1e-12)
      throw NumericError("equal_loudness_gains: degenerate silent utterance");
    g.push_back(1.0 / r);
  }
  return g;
}

/// Frozen rendering machinery. Everything here is a pure function of
/// (config, config.seed): lexicon, coloring projections and the enrollment
/// projection never change between calls or processes.
class UtteranceRenderer {
 public:
  explicit UtteranceRenderer(const DatagenConfig& cfg)
      : cfg_(cfg), tmax_(std::max(cfg.frames, cfg.enroll_frames)) {
    cfg_.validate();
    std::size_t Z = cfg_.latent_dim, I = cfg_.identity_channels;
    std::size_t G = cfg_.signature_dim, U = cfg_.speaker_dim;
    base_ = draw("lexicon/base", tmax_ * Z, 1.0);
    lex_ = draw("lexicon/coords", Z * tmax_ * Z, 1.0 / std::sqrt(double(Z)));
    proj_mix_ = draw("color/mixing", G * Z * Z,
                     1.0 / std::sqrt(double(G * Z)));
    proj_ident_ = draw("color/identity", G * I, 1.0 / std::sqrt(double(G)));
    proj_enroll_ = draw("enroll/projection", U * cfg_.input_dim(),
                        1.0 / std::sqrt(double(cfg_.input_dim())));
  }

  const DatagenConfig& config() const { return cfg_; }

  /// Deterministic frame sequence for (latent, signature, noise stream).
  Tensor render(std::span<const double> latent,
                std::span<const double> signature,
                const std::string& noise_stream, std::size_t rows) const {
    std::size_t Z = cfg_.latent_dim, I = cfg_.identity_channels;
    std::size_t F = cfg_.input_dim();
    if (latent.size() != Z || signature.size() != cfg_.signature_dim)
      throw ShapeError("render: latent/signature dimensions disagree");
    if (rows > tmax_)
      throw ConfigError("render: frame count exceeds the lexicon length");
    // Per-speaker affine coloring of the content channels. The mixing
    // matrix is identity plus a signature-weighted sum of frozen random
    // matrices, so zero signature means no coloring at all, and inverting
    // the coloring requires circuitry specific to each speaker.
    std::vector<double> mix(Z * Z, 0.0), ident(I);
    for (std::size_t c = 0; c < Z; ++c) mix[c * Z + c] = 1.0;
    for (std::size_t g = 0; g < signature.size(); ++g) {
      double w = cfg_.gain_scale * signature[g];
      const double* b = proj_mix_.data() + g * Z * Z;
      for (std::size_t i = 0; i < Z * Z; ++i) mix[i] += w * b[i];
    }
    for (std::size_t k = 0; k < I; ++k) {
      double a = 0.0;
      for (std::size_t g = 0; g < signature.size(); ++g)
        a += proj_ident_[g * I + k] * signature[g];
      ident[k] = a;
    }
    // fixed per-channel RMS for every speaker: identity strength must not
    // depend on how the random projection happens to treat this signature
    double in = 0.0;
    for (double v : ident) in += v * v;
    in = std::sqrt(in);
    if (in > 1e-12)
      for (double& v : ident)
        v *= cfg_.identity_scale * std::sqrt(double(I)) / in;
    Tensor out = Tensor::zeros({rows, F});
    std::span<double> o = out.mutable_value();
    Rng noise(cfg_.seed, noise_stream);
    std::vector<double> content(Z);
    for (std::size_t t = 0; t < rows; ++t) {
      for (std::size_t c = 0; c < Z; ++c) {
        double v = base_[t * Z + c];
        for (std::size_t j = 0; j < Z; ++j)
          v += latent[j] * lex_[(j * tmax_ + t) * Z + c];
        content[c] = v;
      }
      for (std::size_t c = 0; c < Z; ++c) {
        double v = 0.0;
        for (std::size_t j = 0; j < Z; ++j) v += mix[c * Z + j] * content[j];
        o[t * F + c] = v;
      }
      for (std::size_t k = 0; k < I; ++k) o[t * F + Z + k] = ident[k];
    }
    if (cfg_.noise_sigma > 0.0)
      for (std::size_t i = 0; i < rows * F; ++i)
        o[i] += noise.normal(0.0, cfg_.noise_sigma);
    return out;
  }

  Tensor render_utterance(const CaptionLatent& caption,
                          const SpeakerProfile& speaker) const {
    return render(caption.latent.value(), speaker.signature,
                  "render/" + caption.caption_id + "/" + speaker.speaker_id,
                  cfg_.frames);
  }

  /// One enrollment recording of a speaker. Segments differ in both phrase
  /// latent and noise; none of them coincides with a corpus caption. The
  /// phrase latent is dampened so that, after time-averaging, the speaker
  /// identity carries most of the energy of the enrollment embedding.
  Tensor enrollment_segment(const SpeakerProfile& speaker,
                            std::size_t segment) const {
    Rng lr(cfg_.seed, "enroll/" + speaker.speaker_id + "/latent/" +
                          std::to_string(segment));
    std::vector<double> latent(cfg_.latent_dim);
    for (double& v : latent) v = lr.normal(0.0, 0.35);
    return render(latent, speaker.signature,
                  "enroll/" + speaker.speaker_id + "/noise/" +
                      std::to_string(segment),
                  cfg_.enroll_frames);
  }

  /// Unit-norm speaker embedding: frozen projection of time-averaged frames.
  Tensor embed_enrollment(const Tensor& frames) const {
    std::size_t F = cfg_.input_dim(), U = cfg_.speaker_dim;
    if (frames.rank() != 2 || frames.shape()[1] != F)
      throw ShapeError("embed_enrollment: frames must be [T x " +
                       std::to_string(F) + "]");
    std::size_t T = frames.shape()[0];
    std::vector<double> pooled(F, 0.0);
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t c = 0; c < F; ++c) pooled[c] += frames.at(t, c);
    for (double& v : pooled) v /= double(T);
    std::vector<double> u(U, 0.0);
    for (std::size_t r = 0; r < U; ++r)
      for (std::size_t c = 0; c < F; ++c)
        u[r] += proj_enroll_[r * F + c] * pooled[c];
    double n = 0.0;
    for (double v : u) n += v * v;
    n = std::sqrt(n);
    if (n < 1e-12)
      throw NumericError("embed_enrollment: zero-norm embedding");
    for (double& v : u) v /= n;
    return Tensor::from({U}, std::move(u));
  }

  Tensor enroll(const SpeakerProfile& speaker) const {
    return embed_enrollment(speaker.enrollment_frames);
  }

  SpeakerProfile make_speaker(std::size_t index) const {
    SpeakerProfile sp;
    char buf[16];
    std::snprintf(buf, sizeof(buf), "spk-%02zu", index);
    sp.speaker_id = buf;
    Rng sr(cfg_.seed, "speaker/" + sp.speaker_id + "/signature");
    sp.signature.resize(cfg_.signature_dim);
    for (double& v : sp.signature) v = sr.normal();
    sp.enrollment_frames = enrollment_segment(sp, 0);
    return sp;
  }

  CaptionLatent make_caption(std::size_t image_index,
                             std::size_t caption_index) const {
    CaptionLatent c;
    char buf[24];
    std::snprintf(buf, sizeof(buf), "img-%04zu", image_index);
    c.image_id = buf;
    std::snprintf(buf, sizeof(buf), "cap-%04zu-%zu", image_index,
                  caption_index);
    c.caption_id = buf;
    Rng cr(cfg_.seed, "caption/" + c.caption_id);
    std::vector<double> z(cfg_.latent_dim);
    for (double& v : z) v = cr.normal();
    c.latent = Tensor::from({cfg_.latent_dim}, std::move(z));
    return c;
  }

 private:
  std::vector<double> draw(const std::string& stream, std::size_t n,
                           double stddev) const {
    Rng r(cfg_.seed, "frozen/" + stream);
    std::vector<double> v(n);
    for (double& x : v) x = r.normal(0.0, stddev);
    return v;
  }

  DatagenConfig cfg_;
  std::size_t tmax_;
  std::vector<double> base_, lex_, proj_mix_, proj_ident_, proj_enroll_;
};

inline Tensor render_utterance(const DatagenConfig& cfg,
                               const CaptionLatent& caption,
                               const SpeakerProfile& speaker) {
  return UtteranceRenderer(cfg).render_utterance(caption, speaker);
}

/// Deterministic corpus: per pass, every caption is the target of exactly
/// one mixture; distractor captions come from the same split, so splits stay
/// image-disjoint; component speakers inside a mixture are distinct. Samples
/// built from one caption group share their frames and differ only in which
/// component is the target.
inline Corpus build_corpus(const DatagenConfig& cfg) {
  cfg.validate();
  UtteranceRenderer ren(cfg);
  Corpus corpus;
  corpus.config = cfg;
  for (std::size_t s = 0; s < cfg.num_speakers; ++s)
    corpus.speakers.push_back(ren.make_speaker(s));
  std::vector<Tensor> speaker_embed;
  for (const auto& sp : corpus.speakers)
    speaker_embed.push_back(ren.enroll(sp));

  for (std::size_t i = 0; i < cfg.num_images; ++i)
    for (std::size_t j = 0; j < cfg.captions_per_image; ++j) {
      corpus.captions.push_back(ren.make_caption(i, j));
      corpus.caption_split.push_back(
          i < cfg.train_images()         ? "train"
          : i < cfg.train_images() + cfg.val_images ? "val"
                                                    : "test");
    }

  // caption indices per split, in corpus order
  std::vector<std::size_t> members[3];
  const char* names[3] = {"train", "val", "test"};
  for (std::size_t c = 0; c < corpus.captions.size(); ++c)
    for (int s = 0; s < 3; ++s)
      if (corpus.caption_split[c] == names[s]) members[s].push_back(c);

  // Captions are grouped K at a time per pass; one rendering serves every
  // member of the group as its target sample. Identical frames under
  // different enrollments carry different gold images, so the enrollment is
  // the only way to resolve a mixture, in training as well as in evaluation.
  std::size_t K = cfg.num_conditions;
  for (int s = 0; s < 3; ++s) {
    CorpusSplit& split = s == 0 ? corpus.train : s == 1 ? corpus.val
                                                        : corpus.test;
    for (std::size_t m = 0; m < cfg.mixtures_per_caption; ++m) {
      std::vector<std::size_t> order = members[s];
      Rng shuf(cfg.seed, "grouping/" + std::string(names[s]) + "/" +
                             std::to_string(m));
      for (std::size_t i = 0; i + 1 < order.size(); ++i)
        std::swap(order[i], order[i + shuf.below(order.size() - i)]);

      for (std::size_t g0 = 0, gi = 0; g0 < order.size(); g0 += K, ++gi) {
        std::size_t r = std::min(K, order.size() - g0);
        std::vector<std::size_t> group(order.begin() + g0,
                                       order.begin() + g0 + r);
        // a trailing partial group borrows distractors from the front of
        // the shuffled order; they are targets of their own groups already
        for (std::size_t i = 0; group.size() < K; ++i)
          group.push_back(order[i]);

        std::string group_id = "mix-" + std::string(names[s]) + "-" +
                               std::to_string(m) + "-" + std::to_string(gi);
        Rng gr(cfg.seed, "mixture/" + group_id);
        std::vector<std::size_t> spk;
        while (spk.size() < K) {
          std::size_t cand = gr.below(cfg.num_speakers);
          if (std::find(spk.begin(), spk.end(), cand) == spk.end())
            spk.push_back(cand);
        }

        std::vector<Tensor> utts;
        std::vector<std::string> cap_ids, spk_ids;
        for (std::size_t q = 0; q < K; ++q) {
          const CaptionLatent& cap = corpus.captions[group[q]];
          const SpeakerProfile& sp = corpus.speakers[spk[q]];
          cap_ids.push_back(cap.caption_id);
          spk_ids.push_back(sp.speaker_id);
          Tensor utt = ren.render(
              cap.latent.value(), sp.signature,
              "mixture/" + group_id + "/component/" + std::to_string(q),
              cfg.frames);
          utts.push_back(apply_activity(
              utt, activity_envelope(
                       cfg.seed,
                       "activity/" + group_id + "/" + std::to_string(q),
                       cfg.frames, cfg.activity_floor)));
        }
        std::vector<double> gains = equal_loudness_gains(utts);
        Tensor frames = mix(utts, gains);

        for (std::size_t q = 0; q < r; ++q) {
          MixtureSample ms;
          ms.sample_id = group_id + "-t" + std::to_string(q);
          ms.image_id = corpus.captions[group[q]].image_id;
          ms.caption_ids = cap_ids;
          ms.speaker_ids = spk_ids;
          ms.gains = gains;
          ms.target = q;
          ms.frames = frames;
          for (std::size_t p = 0; p < K; ++p)
            ms.enrollments.push_back(speaker_embed[spk[p]]);
          split.samples.push_back(std::move(ms));
        }
      }
    }
  }
  return corpus;
}

inline void save_corpus(const Corpus& corpus, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json meta;
  meta["config"] = corpus.config;
  meta["captions"] = nlohmann::json::array();
  for (std::size_t c = 0; c < corpus.captions.size(); ++c)
    meta["captions"].push_back({{"caption_id", corpus.captions[c].caption_id},
                                {"image_id", corpus.captions[c].image_id},
                                {"split", corpus.caption_split[c]}});
  meta["speakers"] = nlohmann::json::array();
  for (const auto& sp : corpus.speakers) meta["speakers"].push_back(sp.speaker_id);

  std::vector<ContainerEntry> entries;
  std::uint64_t offset = 0;
  auto push = [&](const std::string& path, Shape shape,
                  std::vector<double> data) {
    std::uint64_t at = offset;
    offset += 8 * data.size();
    entries.push_back({path, std::move(shape), std::move(data)});
    return at;
  };
  auto tensor_data = [](const Tensor& t) {
    return std::vector<double>(t.value().begin(), t.value().end());
  };
  for (const auto& c : corpus.captions)
    push("latent/" + c.caption_id, c.latent.shape(), tensor_data(c.latent));
  for (const auto& sp : corpus.speakers) {
    push("signature/" + sp.speaker_id,
         {sp.signature.size()}, sp.signature);
    push("enroll_frames/" + sp.speaker_id, sp.enrollment_frames.shape(),
         tensor_data(sp.enrollment_frames));
  }

  std::string manifest;
  for (const CorpusSplit* split : {&corpus.train, &corpus.val, &corpus.test})
    for (const auto& ms : split->samples) {
      std::uint64_t frames_at = push("frames/" + ms.sample_id,
                                     ms.frames.shape(), tensor_data(ms.frames));
      for (std::size_t q = 0; q < ms.enrollments.size(); ++q)
        push("enroll/" + ms.sample_id + "/" + std::to_string(q),
             ms.enrollments[q].shape(), tensor_data(ms.enrollments[q]));
      nlohmann::json line{{"sample_id", ms.sample_id},
                          {"split", split->name},
                          {"image_id", ms.image_id},
                          {"speakers", ms.speaker_ids},
                          {"captions", ms.caption_ids},
                          {"gains", ms.gains},
                          {"target", ms.target},
                          {"frames_offset", frames_at}};
      manifest += line.dump();
      manifest += '\n';
    }

  write_container(dir / "frames.bin", meta, entries);
  std::ofstream mf(dir / "manifest.jsonl", std::ios::binary | std::ios::trunc);
  if (!mf)
    throw ConfigError("save_corpus: cannot open " +
                      (dir / "manifest.jsonl").string());
  mf.write(manifest.data(), std::streamsize(manifest.size()));
  if (!mf)
    throw ConfigError("save_corpus: write failed in " + dir.string());
}

inline Corpus load_corpus(const std::filesystem::path& dir) {
  Container store = Container::read(dir / "frames.bin");
  Corpus corpus;
  corpus.config = store.meta.at("config").get<DatagenConfig>();
  for (const auto& jc : store.meta.at("captions")) {
    CaptionLatent c;
    c.caption_id = jc.at("caption_id").get<std::string>();
    c.image_id = jc.at("image_id").get<std::string>();
    c.latent = store.tensor("latent/" + c.caption_id);
    corpus.captions.push_back(std::move(c));
    corpus.caption_split.push_back(jc.at("split").get<std::string>());
  }
  for (const auto& js : store.meta.at("speakers")) {
    SpeakerProfile sp;
    sp.speaker_id = js.get<std::string>();
    sp.signature = store.get("signature/" + sp.speaker_id).data;
    sp.enrollment_frames = store.tensor("enroll_frames/" + sp.speaker_id);
    corpus.speakers.push_back(std::move(sp));
  }
  std::ifstream mf(dir / "manifest.jsonl");
  if (!mf)
    throw ConfigError("load_corpus: cannot open " +
                      (dir / "manifest.jsonl").string());
  std::string line;
  while (std::getline(mf, line)) {
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line);
    MixtureSample ms;
    ms.sample_id = j.at("sample_id").get<std::string>();
    ms.image_id = j.at("image_id").get<std::string>();
    j.at("speakers").get_to(ms.speaker_ids);
    j.at("captions").get_to(ms.caption_ids);
    j.at("gains").get_to(ms.gains);
    ms.target = j.at("target").get<std::size_t>();
    ms.frames = store.tensor("frames/" + ms.sample_id);
    for (std::size_t q = 0; q < ms.speaker_ids.size(); ++q)
      ms.enrollments.push_back(
          store.tensor("enroll/" + ms.sample_id + "/" + std::to_string(q)));
    std::string split = j.at("split").get<std::string>();
    CorpusSplit& dst = split == "train" ? corpus.train
                       : split == "val" ? corpus.val
                                        : corpus.test;
    dst.samples.push_back(std::move(ms));
  }
  return corpus;
}

struct ProbeReport {
  double accuracy = 0.0;
  std::size_t train_count = 0;
  std::size_t eval_count = 0;
};

/// Corpus learnability check: ridge-regress flattened clean utterances onto
/// caption latents using train-split captions, then classify held-out
/// captions by nearest latent (cosine). The rendering is linear in the
/// latent, so a linear probe should solve this nearly perfectly.
inline ProbeReport linear_probe_accuracy(const Corpus& corpus) {
  const DatagenConfig& cfg = corpus.config;
  UtteranceRenderer ren(cfg);
  std::size_t d = cfg.frames * cfg.input_dim(), m = cfg.latent_dim;
  std::vector<std::size_t> train_idx, eval_idx;
  for (std::size_t c = 0; c < corpus.captions.size(); ++c)
    (corpus.caption_split[c] == "train" ? train_idx : eval_idx).push_back(c);

  auto probe_render = [&](std::size_t ci, const char* tag) {
    const CaptionLatent& cap = corpus.captions[ci];
    const SpeakerProfile& sp =
        corpus.speakers[(ci * 7 + (tag[0] == 'e' ? 3 : 0)) %
                        corpus.speakers.size()];
    return ren.render(cap.latent.value(), sp.signature,
                      std::string("probe/") + tag + "/" + cap.caption_id,
                      cfg.frames);
  };

  std::size_t n = train_idx.size();
  std::vector<double> xtx(d * d, 0.0), xty(d * m, 0.0);
  for (std::size_t s = 0; s < n; ++s) {
    Tensor fr = probe_render(train_idx[s], "train");
    std::span<const double> x = fr.value();
    std::span<const double> y = corpus.captions[train_idx[s]].latent.value();
    for (std::size_t a = 0; a < d; ++a) {
      for (std::size_t b = a; b < d; ++b) xtx[a * d + b] += x[a] * x[b];
      for (std::size_t c = 0; c < m; ++c) xty[a * m + c] += x[a] * y[c];
    }
  }
  double lambda = 1e-3 * double(n);
  for (std::size_t a = 0; a < d; ++a) {
    xtx[a * d + a] += lambda;
    for (std::size_t b = 0; b < a; ++b) xtx[a * d + b] = xtx[b * d + a];
  }
  // Cholesky factorization and solve for W = (X'X + lambda I)^-1 X'Y
  std::vector<double>& A = xtx;
  for (std::size_t c = 0; c < d; ++c) {
    double diag = A[c * d + c];
    for (std::size_t k = 0; k < c; ++k) diag -= A[c * d + k] * A[c * d + k];
    if (diag <= 0.0) throw NumericError("linear_probe: factorization failed");
    A[c * d + c] = std::sqrt(diag);
    for (std::size_t r = c + 1; r < d; ++r) {
      double v = A[r * d + c];
      for (std::size_t k = 0; k < c; ++k) v -= A[r * d + k] * A[c * d + k];
      A[r * d + c] = v / A[c * d + c];
    }
  }
  std::vector<double>& W = xty;  // solved in place, column block at a time
  for (std::size_t c = 0; c < m; ++c) {
    for (std::size_t r = 0; r < d; ++r) {
      double v = W[r * m + c];
      for (std::size_t k = 0; k < r; ++k) v -= A[r * d + k] * W[k * m + c];
      W[r * m + c] = v / A[r * d + r];
    }
    for (std::size_t ri = d; ri-- > 0;) {
      double v = W[ri * m + c];
      for (std::size_t k = ri + 1; k < d; ++k)
        v -= A[k * d + ri] * W[k * m + c];
      W[ri * m + c] = v / A[ri * d + ri];
    }
  }

  std::size_t correct = 0;
  for (std::size_t ci : eval_idx) {
    Tensor fr = probe_render(ci, "eval");
    std::span<const double> x = fr.value();
    std::vector<double> zhat(m, 0.0);
    for (std::size_t a = 0; a < d; ++a)
      for (std::size_t c = 0; c < m; ++c) zhat[c] += x[a] * W[a * m + c];
    double zn = 0.0;
    for (double v : zhat) zn += v * v;
    zn = std::sqrt(std::max(zn, 1e-30));
    double best = -2.0;
    std::size_t best_c = 0;
    for (std::size_t c = 0; c < corpus.captions.size(); ++c) {
      std::span<const double> z = corpus.captions[c].latent.value();
      double dot = 0.0, nz = 0.0;
      for (std::size_t k = 0; k < m; ++k) {
        dot += zhat[k] * z[k];
        nz += z[k] * z[k];
      }
      double cosv = dot / (zn * std::sqrt(std::max(nz, 1e-30)));
      if (cosv > best) {
        best = cosv;
        best_c = c;
      }
    }
    if (best_c == ci) ++correct;
  }
  ProbeReport rep;
  rep.train_count = n;
  rep.eval_count = eval_idx.size();
  rep.accuracy = eval_idx.empty() ? 0.0
                                  : double(correct) / double(eval_idx.size());
  return rep;
}

}  // namespace tsrelab

#endif  // TSRELAB_DATAGEN_HPP
