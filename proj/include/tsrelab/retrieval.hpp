// Copyright 2026 the tsrelab authors
// SPDX-License-Identifier: Apache-2.0
//
// Recall@K evaluation over a corpus split, in both retrieval directions.
//
// Protocols:
//   single          — each mixture is encoded without conditioning. With a
//                     K=1 corpus this is the plain baseline; with K>=2 it is
//                     the unconditioned-on-mixtures setting.
//   target-speaker  — each mixture is encoded conditioned on its target
//                     enrollment; the target's image is the gold candidate.
//
// Ranking ties are broken toward the smaller candidate index, so reports are
// deterministic functions of (checkpoint, corpus, split).

#ifndef TSRELAB_RETRIEVAL_HPP
#define TSRELAB_RETRIEVAL_HPP

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "tsrelab/container.hpp"
#include "tsrelab/datagen.hpp"
#include "tsrelab/encoder.hpp"
#include "tsrelab/objective.hpp"

namespace tsrelab {

struct EmbeddingIndex {
  std::vector<std::string> ids;
  Tensor vectors;  // [n x E], unit-norm rows

  void validate() const {
    if (vectors.rank() != 2 || vectors.shape()[0] != ids.size())
      throw ShapeError("EmbeddingIndex: ids/vectors size mismatch");
    for (std::size_t a = 0; a < ids.size(); ++a)
      for (std::size_t b = a + 1; b < ids.size(); ++b)
        if (ids[a] == ids[b])
          throw ConfigError("EmbeddingIndex: duplicate id '" + ids[a] + "'");
    detail::require_unit_rows(vectors, "EmbeddingIndex");
  }
};

struct RecallReport {
  std::string direction;  // "speech_to_image" or "image_to_speech"
  std::string protocol;   // "single" or "target-speaker"
  std::string config_digest;
  std::size_t n_queries = 0;
  std::vector<std::size_t> ks;   // after clamping to the candidate count
  std::vector<double> recall;    // parallel to ks
  std::vector<std::string> warnings;
};

enum class EvalProtocol { Single, TargetSpeaker };

inline std::string to_string(EvalProtocol p) {
  return p == EvalProtocol::Single ? "single" : "target-speaker";
}

/// Fraction of queries whose gold candidate ranks in the top k of its row.
/// A tied candidate with a smaller index outranks the gold one.
inline RecallReport recall_at_k(const Tensor& sims,
                                const std::vector<std::size_t>& gold,
                                std::vector<std::size_t> ks) {
  if (sims.rank() != 2)
    throw ShapeError("recall_at_k: sims must be rank-2, got " +
                     shape_str(sims.shape()));
  std::size_t Q = sims.shape()[0], C = sims.shape()[1];
  if (gold.size() != Q)
    throw ShapeError("recall_at_k: " + std::to_string(gold.size()) +
                     " gold entries for " + std::to_string(Q) + " queries");
  for (std::size_t g : gold)
    if (g >= C)
      throw ConfigError("recall_at_k: gold index " + std::to_string(g) +
                        " out of range");
  RecallReport rep;
  rep.n_queries = Q;
  std::vector<std::size_t> ranks(Q);
  for (std::size_t q = 0; q < Q; ++q) {
    double gs = sims.at(q, gold[q]);
    std::size_t ahead = 0;
    for (std::size_t c = 0; c < C; ++c) {
      if (c == gold[q]) continue;
      double s = sims.at(q, c);
      if (s > gs || (s == gs && c < gold[q])) ++ahead;
    }
    ranks[q] = ahead;  // zero-based rank of the gold candidate
  }
  std::sort(ks.begin(), ks.end());
  for (std::size_t k : ks) {
    std::size_t kk = k;
    if (kk > C) {
      rep.warnings.push_back("recall@" + std::to_string(k) +
                             " clamped to the candidate count " +
                             std::to_string(C));
      kk = C;
    }
    if (kk == 0) throw ConfigError("recall_at_k: k must be >= 1");
    std::size_t hits = 0;
    for (std::size_t r : ranks)
      if (r < kk) ++hits;
    rep.ks.push_back(k);
    rep.recall.push_back(double(hits) / double(Q));
  }
  return rep;
}

struct EvalResult {
  RecallReport speech_to_image;
  RecallReport image_to_speech;
};

namespace detail {

/// Value copy with no graph attached; frees the activation graph that
/// produced `t` as soon as the original handle goes out of scope.
inline Tensor detach(const Tensor& t) {
  return Tensor::from(t.shape(),
                      std::vector<double>(t.value().begin(), t.value().end()));
}

inline Tensor constant_rows(const std::vector<Tensor>& rows) {
  return detach(stack_rows(rows));
}

}  // namespace detail

/// Image index of a split: one entry per distinct image, in split caption
/// order; an image's vector comes from its first caption latent.
inline EmbeddingIndex image_index(const RetrievalModel& model,
                                  const Corpus& corpus,
                                  const std::string& split_name) {
  EmbeddingIndex idx;
  std::vector<Tensor> vecs;
  for (std::size_t c = 0; c < corpus.captions.size(); ++c) {
    if (corpus.caption_split[c] != split_name) continue;
    const CaptionLatent& cap = corpus.captions[c];
    if (std::find(idx.ids.begin(), idx.ids.end(), cap.image_id) !=
        idx.ids.end())
      continue;
    idx.ids.push_back(cap.image_id);
    vecs.push_back(model.encode_image(cap.latent));
  }
  if (idx.ids.empty())
    throw ConfigError("image_index: split '" + split_name + "' has no images");
  idx.vectors = detail::constant_rows(vecs);
  return idx;
}

/// Encodes every sample of the split under the protocol and scores both
/// retrieval directions against the split's image pool.
inline EvalResult evaluate(const RetrievalModel& model, const Corpus& corpus,
                           const std::string& split_name,
                           EvalProtocol protocol,
                           std::vector<std::size_t> ks = {1, 5, 10}) {
  const CorpusSplit& split = corpus.split(split_name);
  if (split.samples.empty())
    throw ConfigError("evaluate: split '" + split_name + "' is empty");
  if (protocol == EvalProtocol::TargetSpeaker && !model.has_tsre())
    throw ConfigError(
        "evaluate: target-speaker protocol requires an attached adapter");
  if (protocol == EvalProtocol::Single && model.has_tsre())
    throw ConfigError(
        "evaluate: single protocol cannot run with an attached adapter");

  EmbeddingIndex images = image_index(model, corpus, split_name);
  std::vector<Tensor> svecs;
  std::vector<std::size_t> gold_image;
  for (const auto& ms : split.samples) {
    Tensor e =
        protocol == EvalProtocol::TargetSpeaker
            ? model.encode_speech(ms.frames, &ms.enrollments[ms.target])
            : model.encode_speech(ms.frames);
    svecs.push_back(detail::detach(e));
    auto it = std::find(images.ids.begin(), images.ids.end(), ms.image_id);
    if (it == images.ids.end())
      throw ConfigError("evaluate: sample '" + ms.sample_id +
                        "' targets image '" + ms.image_id +
                        "' outside the split pool");
    gold_image.push_back(std::size_t(it - images.ids.begin()));
  }
  Tensor speech = detail::constant_rows(svecs);

  nlohmann::json digest_src{{"encoder", model.config()},
                            {"adapter", model.has_tsre()
                                            ? nlohmann::json(model.tsre()->config())
                                            : nlohmann::json()},
                            {"corpus_seed", corpus.config.seed},
                            {"split", split_name},
                            {"protocol", to_string(protocol)}};
  std::string digest = json_digest(digest_src);

  Tensor s2i = similarity_matrix(speech, images.vectors);
  EvalResult res;
  res.speech_to_image = recall_at_k(s2i, gold_image, ks);
  res.speech_to_image.direction = "speech_to_image";
  res.speech_to_image.protocol = to_string(protocol);
  res.speech_to_image.config_digest = digest;

  // image -> speech: gold is the sample that targets the image
  std::vector<std::size_t> gold_sample(images.ids.size());
  std::vector<bool> seen(images.ids.size(), false);
  for (std::size_t q = 0; q < gold_image.size(); ++q)
    if (!seen[gold_image[q]]) {
      seen[gold_image[q]] = true;
      gold_sample[gold_image[q]] = q;
    }
  Tensor i2s = similarity_matrix(images.vectors, speech);
  res.image_to_speech = recall_at_k(i2s, gold_sample, ks);
  res.image_to_speech.direction = "image_to_speech";
  res.image_to_speech.protocol = to_string(protocol);
  res.image_to_speech.config_digest = digest;
  return res;
}

inline nlohmann::json report_json(const RecallReport& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t i = 0; i < r.ks.size(); ++i)
    rows.push_back({{"k", r.ks[i]}, {"recall", r.recall[i]}});
  return nlohmann::json{{"direction", r.direction},
                        {"protocol", r.protocol},
                        {"config_digest", r.config_digest},
                        {"n_queries", r.n_queries},
                        {"recall_at", rows},
                        {"warnings", r.warnings}};
}

inline nlohmann::json report_json(const EvalResult& res) {
  return nlohmann::json{{"speech_to_image", report_json(res.speech_to_image)},
                        {"image_to_speech", report_json(res.image_to_speech)}};
}

/// One CSV row per (protocol, direction, k).
inline std::string report_csv(const EvalResult& res) {
  std::string out = "protocol,direction,k,recall,n_queries\n";
  for (const RecallReport* r : {&res.speech_to_image, &res.image_to_speech})
    for (std::size_t i = 0; i < r->ks.size(); ++i) {
      char buf[160];
      std::snprintf(buf, sizeof(buf), "%s,%s,%zu,%.6f,%zu\n",
                    r->protocol.c_str(), r->direction.c_str(), r->ks[i],
                    r->recall[i], r->n_queries);
      out += buf;
    }
  return out;
}

inline void write_reports(const EvalResult& res,
                          const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream j(dir / "report.json", std::ios::binary | std::ios::trunc);
  j << report_json(res).dump(2) << "\n";
  if (!j)
    throw ConfigError("write_reports: cannot write " +
                      (dir / "report.json").string());
  std::ofstream c(dir / "report.csv", std::ios::binary | std::ios::trunc);
  c << report_csv(res);
  if (!c)
    throw ConfigError("write_reports: cannot write " +
                      (dir / "report.csv").string());
}

}  // namespace tsrelab

#endif  // TSRELAB_RETRIEVAL_HPP
