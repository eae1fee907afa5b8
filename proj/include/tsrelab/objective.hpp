// Copyright 2026 the tsrelab authors
// SPDX-License-Identifier: Apache-2.0
//
// Bidirectional contrastive objectives over unit-norm embeddings, in the
// vanilla one-to-one form and the mixture form where each of the N samples
// carries K conditioned speech embeddings of which exactly one (the target
// condition) is the positive.
//
// Mixture semantics: image -> speech normalizes over all N*K conditioned
// embeddings; speech -> image uses only the N target-conditioned embeddings
// as anchors, each normalized over the N images. Non-target conditions act
// as extra negatives in the image -> speech direction only.
//
// The two loss functions are written over different primitive chains on
// purpose (per-row gathers + log-sum-exp versus fused log-softmax), so the
// K = 1 agreement test exercises two independent computations.

#ifndef TSRELAB_OBJECTIVE_HPP
#define TSRELAB_OBJECTIVE_HPP

#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "tsrelab/ops.hpp"

namespace tsrelab {

struct LossConfig {
  double temperature = 0.07;
  bool learnable_temperature = false;
  Tensor log_tau;  // scalar parameter ln(tau); used only when learnable

  void validate() const {
    if (!(temperature > 0.0))
      throw ConfigError("LossConfig: temperature must be > 0, got " +
                        std::to_string(temperature));
    if (learnable_temperature && !log_tau.defined())
      throw ConfigError(
          "LossConfig: learnable_temperature set but log_tau is undefined");
  }
};

/// Entry (a, b) is the dot product of row a and row b; for unit-norm rows
/// that is the cosine similarity.
inline Tensor similarity_matrix(const Tensor& e_a, const Tensor& e_b) {
  if (e_a.rank() != 2 || e_b.rank() != 2 || e_a.shape()[1] != e_b.shape()[1])
    throw ShapeError("similarity_matrix: need [A x E] and [B x E], got " +
                     shape_str(e_a.shape()) + " and " + shape_str(e_b.shape()));
  return matmul(e_a, transpose(e_b));
}

namespace detail {

inline void require_unit_rows(const Tensor& e, const char* what) {
  std::size_t R = e.shape()[0], E = e.shape()[1];
  for (std::size_t r = 0; r < R; ++r) {
    double n = 0.0;
    for (std::size_t c = 0; c < E; ++c) n += e.at(r, c) * e.at(r, c);
    if (std::abs(std::sqrt(n) - 1.0) > 1e-6)
      throw ConfigError(std::string(what) + ": row " + std::to_string(r) +
                        " is not unit-norm (|x| = " +
                        std::to_string(std::sqrt(n)) + ")");
  }
}

inline Tensor apply_temperature(const Tensor& sims, const LossConfig& cfg) {
  if (cfg.learnable_temperature)
    return scale_by(sims, exp(scale(cfg.log_tau, -1.0)));
  return scale(sims, 1.0 / cfg.temperature);
}

}  // namespace detail

/// One conditioned-mixture contrastive batch. Speech rows are stored
/// flattened: row n * K + q is sample n encoded under condition q. The
/// target condition index is zero-based.
struct ContrastiveBatch {
  Tensor images;               // [N x E]
  Tensor speech;               // [N*K x E]
  std::size_t num_conditions = 1;
  std::vector<std::size_t> target;  // N entries, each < num_conditions

  std::size_t batch_size() const { return target.size(); }

  void validate() const {
    std::size_t N = target.size();
    if (N == 0) throw ConfigError("ContrastiveBatch: empty batch");
    if (num_conditions == 0)
      throw ConfigError("ContrastiveBatch: num_conditions must be >= 1");
    if (images.rank() != 2 || images.shape()[0] != N)
      throw ShapeError("ContrastiveBatch: images must be [" +
                       std::to_string(N) + " x E], got " +
                       shape_str(images.shape()));
    std::size_t E = images.shape()[1];
    if (speech.rank() != 2 || speech.shape()[0] != N * num_conditions ||
        speech.shape()[1] != E)
      throw ShapeError("ContrastiveBatch: speech must be [" +
                       std::to_string(N * num_conditions) + " x " +
                       std::to_string(E) + "], got " +
                       shape_str(speech.shape()));
    for (std::size_t p : target)
      if (p >= num_conditions)
        throw ConfigError("ContrastiveBatch: target index " +
                          std::to_string(p) + " out of range for K = " +
                          std::to_string(num_conditions));
    detail::require_unit_rows(images, "ContrastiveBatch images");
    detail::require_unit_rows(speech, "ContrastiveBatch speech");
  }
};

/// (1/2N) sum_m [ -log softmax_row + -log softmax_col ] on the N x N
/// similarity matrix at temperature tau. Row/column m's positive is entry m.
inline Tensor vanilla_clip_loss(const Tensor& e_i, const Tensor& e_s,
                                const LossConfig& cfg) {
  cfg.validate();
  if (e_i.rank() != 2 || e_i.shape() != e_s.shape())
    throw ShapeError("vanilla_clip_loss: need matching [N x E] inputs, got " +
                     shape_str(e_i.shape()) + " and " + shape_str(e_s.shape()));
  std::size_t N = e_i.shape()[0];
  if (N == 0) throw ConfigError("vanilla_clip_loss: empty batch");
  detail::require_unit_rows(e_i, "vanilla_clip_loss images");
  detail::require_unit_rows(e_s, "vanilla_clip_loss speech");
  Tensor S = detail::apply_temperature(similarity_matrix(e_i, e_s), cfg);
  std::vector<std::size_t> all(N);
  std::iota(all.begin(), all.end(), std::size_t{0});
  Tensor total = Tensor::scalar(0.0);
  for (std::size_t m = 0; m < N; ++m) {
    Tensor row = pick(S, std::vector<std::size_t>(N, m), all);
    Tensor col = pick(S, all, std::vector<std::size_t>(N, m));
    total = add(total, sub(log_sum_exp(row), select(row, m)));
    total = add(total, sub(log_sum_exp(col), select(col, m)));
  }
  return scale(total, 1.0 / (2.0 * double(N)));
}

/// Mixture-aware bidirectional loss; reduces exactly to vanilla_clip_loss
/// when num_conditions == 1.
inline Tensor target_speaker_loss(const ContrastiveBatch& batch,
                                  const LossConfig& cfg) {
  cfg.validate();
  batch.validate();
  std::size_t N = batch.batch_size(), K = batch.num_conditions;
  Tensor S =
      detail::apply_temperature(similarity_matrix(batch.images, batch.speech),
                                cfg);  // [N x N*K]
  std::vector<std::size_t> img_idx(N), tgt_rows(N);
  for (std::size_t m = 0; m < N; ++m) {
    img_idx[m] = m;
    tgt_rows[m] = m * K + batch.target[m];
  }
  Tensor img_to_speech = pick(log_softmax(S), img_idx, tgt_rows);
  Tensor speech_to_img = pick(log_softmax(transpose(S)), tgt_rows, img_idx);
  return scale(add(sum_all(img_to_speech), sum_all(speech_to_img)),
               -1.0 / (2.0 * double(N)));
}

}  // namespace tsrelab

#endif  // TSRELAB_OBJECTIVE_HPP
