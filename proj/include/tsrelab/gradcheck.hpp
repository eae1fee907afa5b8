// Copyright 2026 the tsrelab authors
// SPDX-License-Identifier: Apache-2.0
//
// Central-difference gradient verification. The harness compares reverse-mode
// gradients of an arbitrary scalar-valued closure against (f(x+h) - f(x-h))/2h
// per coordinate, with a floored relative error so that near-zero gradients
// are judged on an absolute scale.
//
// The model-level checks run a miniature encoder (with or without an attached
// adapter) through the conditioned contrastive loss and verify every
// parameter coordinate. Parameters are first jittered away from their
// identity-preserving initialization; at init several adapter coordinates
// have exactly zero gradient (anything gated by a zero scale), which would
// make the comparison vacuous there.

#ifndef TSRELAB_GRADCHECK_HPP
#define TSRELAB_GRADCHECK_HPP

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "tsrelab/encoder.hpp"
#include "tsrelab/objective.hpp"
#include "tsrelab/params.hpp"
#include "tsrelab/tsre.hpp"

namespace tsrelab {

struct FdOptions {
  double h = 1e-5;
  double rel_floor = 1e-5;          // denominator floor for the relative error
  std::size_t max_coords_per_param = 0;  // 0 = every coordinate
  std::vector<std::string> include;      // path prefixes; empty = all
};

struct GradCheckEntry {
  std::string path;
  std::size_t coords_checked = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double max_rel_err = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_err = 0.0;

  bool passes(double tol) const { return max_rel_err < tol; }
};

/// Checks d(make_loss)/d(param) for every selected parameter in `params`.
/// `make_loss` must rebuild the graph from the current parameter values on
/// every call and return a scalar.
inline GradCheckReport finite_difference_check(
    ParamStore& params, const std::function<Tensor()>& make_loss,
    const FdOptions& opt = {}) {
  params.zero_grad();
  Tensor loss = make_loss();
  if (loss.rank() != 0)
    throw UsageError("finite_difference_check: loss must be a scalar");
  backward(loss);

  GradCheckReport report;
  for (auto& [path, t] : params) {
    if (!t.requires_grad()) continue;
    if (!opt.include.empty()) {
      bool keep = false;
      for (const auto& pre : opt.include)
        if (path.rfind(pre, 0) == 0) keep = true;
      if (!keep) continue;
    }
    std::vector<double> analytic(t.grad().begin(), t.grad().end());
    if (analytic.empty()) analytic.assign(t.size(), 0.0);

    GradCheckEntry e;
    e.path = path;
    std::size_t n = t.size();
    std::size_t m = opt.max_coords_per_param == 0
                        ? n
                        : std::min(n, opt.max_coords_per_param);
    std::span<double> v = t.mutable_value();
    for (std::size_t c = 0; c < m; ++c) {
      std::size_t i = m == n ? c : c * n / m;
      double orig = v[i];
      v[i] = orig + opt.h;
      double fp = make_loss().item();
      v[i] = orig - opt.h;
      double fm = make_loss().item();
      v[i] = orig;
      double numeric = (fp - fm) / (2.0 * opt.h);
      double denom = std::max({opt.rel_floor, std::fabs(analytic[i]),
                               std::fabs(numeric)});
      double rel = std::fabs(analytic[i] - numeric) / denom;
      if (rel >= e.max_rel_err) {
        e.max_rel_err = rel;
        e.worst_index = i;
        e.analytic = analytic[i];
        e.numeric = numeric;
      }
      ++e.coords_checked;
    }
    report.max_rel_err = std::max(report.max_rel_err, e.max_rel_err);
    report.entries.push_back(std::move(e));
  }
  params.zero_grad();
  return report;
}

/// Adds seeded noise to every trainable parameter, moving the model off the
/// measure-zero configurations (zero gates, exact-identity adapters) where
/// some gradients vanish structurally.
inline void jitter_params(ParamStore& params, std::uint64_t seed,
                          double stddev) {
  for (auto& [path, t] : params) {
    if (!t.requires_grad()) continue;
    Rng r(seed, "jitter/" + path);
    std::span<double> v = t.mutable_value();
    for (auto& x : v) x += r.normal(0.0, stddev);
  }
}

namespace detail {

inline EncoderConfig gradcheck_encoder() {
  EncoderConfig e;
  e.num_layers = 1;
  e.hidden_dim = 16;
  e.num_heads = 2;
  e.ff_dim = 24;
  e.embed_dim = 8;
  e.speaker_dim = 6;
  e.input_dim = 9;
  e.latent_dim = 7;
  return e;
}

}  // namespace detail

/// End-to-end check: miniature retrieval model, optional adapter, two-image
/// conditioned batch, contrastive loss. Verifies every parameter coordinate
/// unless opt.max_coords_per_param limits it.
inline GradCheckReport model_gradient_check(const TsreConfig* adapter,
                                            std::uint64_t seed,
                                            const FdOptions& opt = {}) {
  EncoderConfig enc = detail::gradcheck_encoder();
  RetrievalModel model(enc, seed);
  if (adapter) model.attach_tsre(*adapter);
  jitter_params(model.params(), seed + 1, 0.05);

  const std::size_t n_images = 2, frames = 5;
  const std::size_t k = adapter ? 2 : 1;
  Rng data(seed, "gradcheck/data");
  std::vector<Tensor> latents, frame_seqs, enrolls;
  for (std::size_t i = 0; i < n_images; ++i) {
    latents.push_back(Tensor::randn({enc.latent_dim}, data));
    frame_seqs.push_back(Tensor::randn({frames, enc.input_dim}, data));
  }
  for (std::size_t i = 0; i < n_images * k; ++i) {
    Tensor u = Tensor::randn({enc.speaker_dim}, data);
    enrolls.push_back(l2_normalize(u));
  }

  auto make_loss = [&]() -> Tensor {
    ContrastiveBatch batch;
    std::vector<Tensor> irow, srow;
    for (std::size_t i = 0; i < n_images; ++i) {
      irow.push_back(model.encode_image(latents[i]));
      for (std::size_t q = 0; q < k; ++q) {
        const Tensor* u = adapter ? &enrolls[i * k + q] : nullptr;
        srow.push_back(model.encode_speech(frame_seqs[i], u));
      }
      batch.target.push_back(0);
    }
    batch.images = stack_rows(irow);
    batch.speech = stack_rows(srow);
    batch.num_conditions = k;
    LossConfig lc;
    return target_speaker_loss(batch, lc);
  };

  return finite_difference_check(model.params(), make_loss, opt);
}

}  // namespace tsrelab

#endif  // TSRELAB_GRADCHECK_HPP
