// Copyright 2026 the tsrelab authors
// SPDX-License-Identifier: Apache-2.0
//
// Retrieval model and speaker adapters: identity at initialization, exact
// parameter accounting at both desk and large scale, contrastive loss
// behavior against independently scripted references, and end-to-end
// gradient verification.

#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "tsrelab/encoder.hpp"
#include "tsrelab/gradcheck.hpp"
#include "tsrelab/objective.hpp"
#include "tsrelab/tsre.hpp"

using namespace tsrelab;

namespace {

EncoderConfig tiny_encoder() {
  EncoderConfig e;
  e.num_layers = 2;
  e.hidden_dim = 16;
  e.num_heads = 2;
  e.ff_dim = 24;
  e.embed_dim = 8;
  e.speaker_dim = 6;
  e.input_dim = 10;
  e.latent_dim = 7;
  return e;
}

Tensor unit_speaker(std::uint64_t salt, std::size_t dim) {
  Rng r(salt, "spk");
  return l2_normalize(Tensor::randn({dim}, r));
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.shape() == b.shape());
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    d = std::max(d, std::abs(a.at(i) - b.at(i)));
  return d;
}

}  // namespace

TEST_CASE("weighted layer sum obeys softmax mixture properties") {
  Rng r(5, "wls");
  std::vector<Tensor> layers;
  for (int l = 0; l < 3; ++l) layers.push_back(Tensor::randn({4, 5}, r));

  // zero logits = plain average
  Tensor alpha = Tensor::zeros({3});
  Tensor avg = weighted_layer_sum(layers, alpha);
  for (std::size_t i = 0; i < avg.size(); ++i) {
    double want = (layers[0].at(i) + layers[1].at(i) + layers[2].at(i)) / 3.0;
    REQUIRE_THAT(avg.at(i), Catch::Matchers::WithinAbs(want, 1e-12));
  }

  // strongly peaked logits select a single layer
  Tensor peaked = Tensor::from({3}, {0.0, 40.0, 0.0});
  Tensor sel = weighted_layer_sum(layers, peaked);
  CHECK(max_abs_diff(sel, layers[1]) < 1e-12);

  // shifting every logit by a constant changes nothing
  Tensor shifted = Tensor::from({3}, {2.5, 42.5, 2.5});
  CHECK(max_abs_diff(weighted_layer_sum(layers, shifted), sel) < 1e-12);

  CHECK_THROWS_AS(weighted_layer_sum(layers, Tensor::zeros({2})), ShapeError);
}

TEST_CASE("speech and image embeddings are unit norm") {
  EncoderConfig enc = tiny_encoder();
  RetrievalModel model(enc, 11);
  Rng r(3, "in");
  Tensor e_i = model.encode_image(Tensor::randn({enc.latent_dim}, r));
  Tensor e_s = model.encode_speech(Tensor::randn({6, enc.input_dim}, r));
  double ni = 0.0, ns = 0.0;
  for (std::size_t i = 0; i < e_i.size(); ++i) ni += e_i.at(i) * e_i.at(i);
  for (std::size_t i = 0; i < e_s.size(); ++i) ns += e_s.at(i) * e_s.at(i);
  CHECK_THAT(std::sqrt(ni), Catch::Matchers::WithinAbs(1.0, 1e-9));
  CHECK_THAT(std::sqrt(ns), Catch::Matchers::WithinAbs(1.0, 1e-9));
  CHECK(e_i.shape() == Shape{enc.embed_dim});
  CHECK(e_s.shape() == Shape{enc.embed_dim});
}

TEST_CASE("speaker embedding is required exactly when an adapter is attached") {
  EncoderConfig enc = tiny_encoder();
  Rng r(4, "in");
  Tensor frames = Tensor::randn({5, enc.input_dim}, r);
  Tensor u = unit_speaker(1, enc.speaker_dim);

  RetrievalModel plain(enc, 11);
  CHECK_THROWS_AS(plain.encode_speech(frames, &u), ConfigError);

  RetrievalModel adapted(enc, 11);
  adapted.attach_tsre(TsreConfig{});
  CHECK_THROWS_AS(adapted.encode_speech(frames), ConfigError);
  CHECK_THROWS_AS(adapted.attach_tsre(TsreConfig{}), UsageError);
}

TEST_CASE("every adapter variant is an exact identity at initialization") {
  EncoderConfig enc = tiny_encoder();
  Rng r(9, "probe");
  for (TsreVariant v : {TsreVariant::SclOnly, TsreVariant::Scc,
                        TsreVariant::SccB5, TsreVariant::SccB3}) {
    RetrievalModel base(enc, 21);
    RetrievalModel adapted(enc, 21);
    TsreConfig tc;
    tc.variant = v;
    adapted.attach_tsre(tc);
    for (int probe = 0; probe < 25; ++probe) {
      Tensor frames = Tensor::randn({4, enc.input_dim}, r);
      Tensor u = unit_speaker(100 + probe, enc.speaker_dim);
      Tensor eb = base.encode_speech(frames);
      Tensor ea = adapted.encode_speech(frames, &u);
      REQUIRE(max_abs_diff(eb, ea) < 1e-12);
    }
  }
}

TEST_CASE("adapters with moved parameters change the embedding") {
  EncoderConfig enc = tiny_encoder();
  RetrievalModel model(enc, 21);
  TsreConfig tc;
  tc.variant = TsreVariant::SclOnly;
  model.attach_tsre(tc);
  Rng r(10, "probe");
  Tensor frames = Tensor::randn({4, enc.input_dim}, r);
  Tensor u = unit_speaker(7, enc.speaker_dim);
  Tensor before = model.encode_speech(frames, &u);
  jitter_params(model.params(), 3, 0.05);
  Tensor after = model.encode_speech(frames, &u);
  CHECK(max_abs_diff(before, after) > 1e-4);

  // and the conditioning now depends on who is enrolled
  Tensor u2 = unit_speaker(8, enc.speaker_dim);
  Tensor other = model.encode_speech(frames, &u2);
  CHECK(max_abs_diff(after, other) > 1e-6);
}

TEST_CASE("film conditioning composes scale and shift on the norm gain") {
  // gamma'(u) = gamma * (W_w u + b_w) + (W_b u + b_b); with W = 0, b_w = 1,
  // b_b = 0 this is exactly gamma, and perturbing b_b adds a constant.
  std::size_t udim = 3, D = 4;
  FilmSite f;
  f.w_w = Tensor::zeros({udim, D});
  f.b_w = Tensor::full({D}, 1.0);
  f.w_b = Tensor::zeros({udim, D});
  f.b_b = Tensor::zeros({D});
  Tensor gamma = Tensor::from({D}, {0.5, 1.0, 2.0, -1.0});
  Tensor u = Tensor::from({udim}, {0.3, -0.2, 0.9});
  Tensor g1 = film_gamma(f, u, gamma);
  CHECK(max_abs_diff(g1, gamma) < 1e-12);

  f.b_b = Tensor::full({D}, 0.25);
  Tensor g2 = film_gamma(f, u, gamma);
  for (std::size_t i = 0; i < D; ++i)
    REQUIRE_THAT(g2.at(i), Catch::Matchers::WithinAbs(gamma.at(i) + 0.25, 1e-12));

  // scale branch multiplies gamma elementwise
  f.b_b = Tensor::zeros({D});
  f.b_w = Tensor::from({D}, {2.0, 0.5, 1.0, -1.0});
  Tensor g3 = film_gamma(f, u, gamma);
  for (std::size_t i = 0; i < D; ++i)
    REQUIRE_THAT(g3.at(i),
                 Catch::Matchers::WithinAbs(gamma.at(i) * f.b_w.at(i), 1e-12));
}

TEST_CASE("published adapter parameter counts are reproduced exactly") {
  EncoderConfig enc;  // desk defaults; only paper_scale dims matter below
  TsreConfig scl{TsreVariant::SclOnly, 0, 0, {}};
  TsreConfig scc{TsreVariant::Scc, 0, 0, {}};
  TsreConfig b5{TsreVariant::SccB5, 0, 0, {}};
  TsreConfig b3{TsreVariant::SccB3, 0, 0, {}};

  CHECK(count_tsre_params(enc, scl, true) == 1048576u);
  CHECK(count_tsre_params(enc, b3, true) == 1446401u);
  CHECK(count_tsre_params(enc, b5, true) == 1710593u);
  CHECK(count_tsre_params(enc, scc, true) == 2641922u);

  // largest-to-smallest ordering mirrors the published comparison
  CHECK(count_tsre_params(enc, scl, true) < count_tsre_params(enc, b3, true));
  CHECK(count_tsre_params(enc, b3, true) < count_tsre_params(enc, b5, true));
  CHECK(count_tsre_params(enc, b5, true) < count_tsre_params(enc, scc, true));
}

TEST_CASE("desk-scale counts equal the registered adapter element count") {
  EncoderConfig enc;  // desk defaults
  const std::pair<TsreVariant, std::size_t> want[] = {
      {TsreVariant::SclOnly, 13056u},
      {TsreVariant::SccB3, 17763u},
      {TsreVariant::SccB5, 21219u},
      {TsreVariant::Scc, 34566u},
  };
  for (auto [v, n] : want) {
    TsreConfig tc;
    tc.variant = v;
    CHECK(count_tsre_params(enc, tc, false) == n);
    RetrievalModel model(enc, 1);
    model.attach_tsre(tc);
    CHECK(model.params().numel("tsre/") == n);
  }
}

namespace {

// Scripted reference for the mixture loss, written against the formula
// rather than the graph ops: softmax over rows/columns of the scaled
// similarity table, minus log of the target entry, averaged over 2N terms.
double reference_mixture_loss(const std::vector<std::vector<double>>& img,
                              const std::vector<std::vector<double>>& sph,
                              const std::vector<std::size_t>& target,
                              std::size_t K, double tau) {
  std::size_t N = img.size(), E = img[0].size();
  std::vector<std::vector<double>> S(N, std::vector<double>(N * K));
  for (std::size_t a = 0; a < N; ++a)
    for (std::size_t b = 0; b < N * K; ++b) {
      double dot = 0.0;
      for (std::size_t e = 0; e < E; ++e) dot += img[a][e] * sph[b][e];
      S[a][b] = dot / tau;
    }
  double total = 0.0;
  for (std::size_t m = 0; m < N; ++m) {
    std::size_t tgt = m * K + target[m];
    // image m over all N*K speech rows
    double mx = S[m][0];
    for (double v : S[m]) mx = std::max(mx, v);
    double z = 0.0;
    for (double v : S[m]) z += std::exp(v - mx);
    total += -(S[m][tgt] - mx - std::log(z));
    // target speech row over all N images
    double mxc = S[0][tgt];
    for (std::size_t a = 0; a < N; ++a) mxc = std::max(mxc, S[a][tgt]);
    double zc = 0.0;
    for (std::size_t a = 0; a < N; ++a) zc += std::exp(S[a][tgt] - mxc);
    total += -(S[m][tgt] - mxc - std::log(zc));
  }
  return total / (2.0 * double(N));
}

ContrastiveBatch random_batch(std::uint64_t salt, std::size_t N, std::size_t K,
                              std::size_t E) {
  Rng r(salt, "batch");
  std::vector<Tensor> irows, srows;
  ContrastiveBatch b;
  for (std::size_t n = 0; n < N; ++n) {
    irows.push_back(l2_normalize(Tensor::randn({E}, r)));
    for (std::size_t q = 0; q < K; ++q)
      srows.push_back(l2_normalize(Tensor::randn({E}, r)));
    b.target.push_back(r.below(K));
  }
  b.images = stack_rows(irows);
  b.speech = stack_rows(srows);
  b.num_conditions = K;
  return b;
}

}  // namespace

TEST_CASE("mixture loss matches a scripted reference") {
  for (std::uint64_t salt : {1u, 2u, 3u, 4u, 5u}) {
    std::size_t N = 3 + salt % 3, K = 1 + salt % 3, E = 6;
    ContrastiveBatch b = random_batch(salt, N, K, E);
    LossConfig lc;
    lc.temperature = 0.07 + 0.05 * double(salt);
    double got = target_speaker_loss(b, lc).item();

    std::vector<std::vector<double>> img(N, std::vector<double>(E));
    std::vector<std::vector<double>> sph(N * K, std::vector<double>(E));
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t e = 0; e < E; ++e) img[n][e] = b.images.at(n, e);
    for (std::size_t m = 0; m < N * K; ++m)
      for (std::size_t e = 0; e < E; ++e) sph[m][e] = b.speech.at(m, e);
    double want =
        reference_mixture_loss(img, sph, b.target, K, lc.temperature);
    REQUIRE_THAT(got, Catch::Matchers::WithinAbs(want, 1e-10));
  }
}

TEST_CASE("mixture loss reduces to the vanilla loss at K = 1") {
  for (std::uint64_t salt = 0; salt < 50; ++salt) {
    std::size_t N = 2 + salt % 5;
    ContrastiveBatch b = random_batch(1000 + salt, N, 1, 8);
    LossConfig lc;
    double mixture = target_speaker_loss(b, lc).item();
    double vanilla = vanilla_clip_loss(b.images, b.speech, lc).item();
    REQUIRE(std::abs(mixture - vanilla) < 1e-12);
  }
}

TEST_CASE("uniform similarities give the exact log-of-count loss") {
  // When every similarity is identical the softmax is uniform: the
  // image->speech term is ln(N*K) and speech->image is ln(N).
  std::size_t N = 4, K = 2, E = 5;
  ContrastiveBatch b;
  std::vector<Tensor> rows;
  Tensor one = l2_normalize(Tensor::from({E}, {1, 1, 1, 1, 1}));
  for (std::size_t n = 0; n < N; ++n) {
    rows.push_back(one);
    b.target.push_back(n % K);
  }
  b.images = stack_rows(rows);
  std::vector<Tensor> srows(N * K, one);
  b.speech = stack_rows(srows);
  b.num_conditions = K;
  LossConfig lc;
  double want = 0.5 * (std::log(double(N * K)) + std::log(double(N)));
  REQUIRE_THAT(target_speaker_loss(b, lc).item(),
               Catch::Matchers::WithinAbs(want, 1e-9));
}

TEST_CASE("loss rejects malformed batches") {
  ContrastiveBatch b = random_batch(77, 3, 2, 6);
  LossConfig lc;

  ContrastiveBatch bad = b;
  bad.target[0] = 5;
  CHECK_THROWS_AS(target_speaker_loss(bad, lc), ConfigError);

  ContrastiveBatch unnorm = b;
  unnorm.images = Tensor::full({3, 6}, 0.7);
  CHECK_THROWS_AS(target_speaker_loss(unnorm, lc), ConfigError);

  LossConfig bad_tau;
  bad_tau.temperature = -0.1;
  CHECK_THROWS_AS(target_speaker_loss(b, bad_tau), ConfigError);
}

TEST_CASE("learnable temperature matches the fixed one at equal tau") {
  ContrastiveBatch b = random_batch(88, 4, 2, 6);
  LossConfig fixed;
  fixed.temperature = 0.13;
  LossConfig learn;
  learn.learnable_temperature = true;
  learn.log_tau = Tensor::scalar(std::log(0.13));
  REQUIRE_THAT(target_speaker_loss(b, learn).item(),
               Catch::Matchers::WithinAbs(target_speaker_loss(b, fixed).item(),
                                          1e-12));
}

TEST_CASE("model gradients match central differences for every variant") {
  FdOptions opt;
  opt.max_coords_per_param = 4;  // full sweeps run in the acceptance gate
  GradCheckReport base = model_gradient_check(nullptr, 31, opt);
  INFO("base max rel err " << base.max_rel_err);
  CHECK(base.passes(1e-4));

  for (TsreVariant v : {TsreVariant::SclOnly, TsreVariant::Scc,
                        TsreVariant::SccB5, TsreVariant::SccB3}) {
    TsreConfig tc;
    tc.variant = v;
    GradCheckReport rep = model_gradient_check(&tc, 31, opt);
    INFO("variant " << to_string(v) << " max rel err " << rep.max_rel_err);
    CHECK(rep.passes(1e-4));
  }
}

TEST_CASE("position encoding is deterministic and bounded") {
  Tensor p1 = position_encoding(6, 8);
  Tensor p2 = position_encoding(6, 8);
  CHECK(max_abs_diff(p1, p2) == 0.0);
  for (std::size_t i = 0; i < p1.size(); ++i) {
    REQUIRE(p1.at(i) <= 1.0);
    REQUIRE(p1.at(i) >= -1.0);
  }
  // column 1 at t = 0 is cos(0) = 1
  CHECK(p1.at(0, 1) == 1.0);
}
