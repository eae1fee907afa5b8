// Copyright 2026 the tsrelab authors
// SPDX-License-Identifier: Apache-2.0
//
// Corpus synthesis, retrieval evaluation and the training loop: determinism
// down to bytes, structural invariants of generated mixtures, recall against
// an exhaustive reference, optimizer arithmetic against a hand trace, and
// checkpoint resume equivalence.

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "tsrelab/config.hpp"
#include "tsrelab/datagen.hpp"
#include "tsrelab/retrieval.hpp"
#include "tsrelab/trainer.hpp"

using namespace tsrelab;

namespace fs = std::filesystem;

namespace {

DatagenConfig tiny_data(std::size_t k) {
  DatagenConfig d;
  d.num_images = 18;
  d.num_speakers = 8;
  d.num_conditions = k;
  d.frames = 8;
  d.enroll_frames = 8;
  d.latent_dim = 10;
  d.identity_channels = 4;
  d.signature_dim = 4;
  d.speaker_dim = 6;
  d.val_images = 4;
  d.test_images = 4;
  d.seed = 77;
  return d;
}

EncoderConfig tiny_encoder_for(const DatagenConfig& d) {
  EncoderConfig e;
  e.num_layers = 1;
  e.hidden_dim = 16;
  e.num_heads = 2;
  e.ff_dim = 24;
  e.embed_dim = 8;
  e.speaker_dim = d.speaker_dim;
  e.input_dim = d.input_dim();
  e.latent_dim = d.latent_dim;
  return e;
}

std::string file_bytes(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  REQUIRE(f.good());
  return std::string((std::istreambuf_iterator<char>(f)), {});
}

fs::path fresh_dir(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / ("tsrelab_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("corpus construction is deterministic in config and seed") {
  Corpus a = build_corpus(tiny_data(2));
  Corpus b = build_corpus(tiny_data(2));
  REQUIRE(a.train.samples.size() == b.train.samples.size());
  for (std::size_t i = 0; i < a.train.samples.size(); ++i) {
    const auto& x = a.train.samples[i];
    const auto& y = b.train.samples[i];
    REQUIRE(x.sample_id == y.sample_id);
    REQUIRE(x.frames.value().size() == y.frames.value().size());
    for (std::size_t j = 0; j < x.frames.size(); ++j)
      REQUIRE(x.frames.at(j) == y.frames.at(j));
  }

  DatagenConfig other = tiny_data(2);
  other.seed = 78;
  Corpus c = build_corpus(other);
  bool any_diff = false;
  for (std::size_t j = 0; j < c.train.samples[0].frames.size(); ++j)
    if (c.train.samples[0].frames.at(j) != a.train.samples[0].frames.at(j))
      any_diff = true;
  CHECK(any_diff);
}

TEST_CASE("mixtures satisfy their structural invariants") {
  DatagenConfig cfg = tiny_data(3);
  cfg.mixtures_per_caption = 2;
  Corpus corpus = build_corpus(cfg);

  std::size_t K = cfg.num_conditions;
  for (const CorpusSplit* split : {&corpus.train, &corpus.val, &corpus.test}) {
    std::map<std::string, std::size_t> target_count;
    for (const auto& ms : split->samples) {
      REQUIRE(ms.speaker_ids.size() == K);
      REQUIRE(ms.caption_ids.size() == K);
      REQUIRE(ms.enrollments.size() == K);
      REQUIRE(ms.target < K);
      // distinct speakers and distinct captions inside one mixture
      for (std::size_t a = 0; a < K; ++a)
        for (std::size_t b = a + 1; b < K; ++b) {
          REQUIRE(ms.speaker_ids[a] != ms.speaker_ids[b]);
          REQUIRE(ms.caption_ids[a] != ms.caption_ids[b]);
        }
      target_count[ms.caption_ids[ms.target]]++;
      REQUIRE(ms.frames.shape() ==
              Shape{cfg.frames, cfg.input_dim()});
    }
    // every caption of the split is the target of exactly
    // mixtures_per_caption samples
    std::size_t expect = split == &corpus.train ? cfg.train_images()
                         : split == &corpus.val ? cfg.val_images
                                                : cfg.test_images;
    REQUIRE(target_count.size() == expect);
    for (const auto& [cap, n] : target_count)
      REQUIRE(n == cfg.mixtures_per_caption);
  }
}

TEST_CASE("splits are image-disjoint and distractors stay in-split") {
  Corpus corpus = build_corpus(tiny_data(2));
  std::map<std::string, std::string> home;  // caption -> split
  for (std::size_t c = 0; c < corpus.captions.size(); ++c)
    home[corpus.captions[c].caption_id] = corpus.caption_split[c];

  std::set<std::string> images[3];
  int si = 0;
  for (const CorpusSplit* split : {&corpus.train, &corpus.val, &corpus.test}) {
    for (const auto& ms : split->samples) {
      images[si].insert(ms.image_id);
      for (const auto& cid : ms.caption_ids)
        REQUIRE(home.at(cid) == split->name);
    }
    ++si;
  }
  for (const auto& img : images[0]) {
    REQUIRE(images[1].count(img) == 0);
    REQUIRE(images[2].count(img) == 0);
  }
  for (const auto& img : images[1]) REQUIRE(images[2].count(img) == 0);
}

TEST_CASE("components are mixed at equal loudness") {
  DatagenConfig cfg = tiny_data(2);
  Corpus corpus = build_corpus(cfg);
  UtteranceRenderer ren(cfg);
  // reconstruct the components of one sample and check the gains bring each
  // to unit RMS before summation
  const MixtureSample& ms = corpus.train.samples[0];
  // sample ids are "<group>-t<slot>"; render streams are named by the group
  std::string group_id = ms.sample_id.substr(0, ms.sample_id.rfind("-t"));
  std::vector<Tensor> utts;
  for (std::size_t q = 0; q < 2; ++q) {
    const CaptionLatent* cap = nullptr;
    for (const auto& c : corpus.captions)
      if (c.caption_id == ms.caption_ids[q]) cap = &c;
    const SpeakerProfile* sp = nullptr;
    for (const auto& s : corpus.speakers)
      if (s.speaker_id == ms.speaker_ids[q]) sp = &s;
    REQUIRE(cap != nullptr);
    REQUIRE(sp != nullptr);
    Tensor utt = ren.render(
        cap->latent.value(), sp->signature,
        "mixture/" + group_id + "/component/" + std::to_string(q),
        cfg.frames);
    utts.push_back(apply_activity(
        utt, activity_envelope(cfg.seed,
                               "activity/" + group_id + "/" +
                                   std::to_string(q),
                               cfg.frames, cfg.activity_floor)));
  }
  for (std::size_t q = 0; q < 2; ++q)
    REQUIRE_THAT(rms(utts[q]) * ms.gains[q],
                 Catch::Matchers::WithinAbs(1.0, 1e-9));
  // the mixture is the gain-weighted sum
  Tensor remix = mix(utts, ms.gains);
  for (std::size_t i = 0; i < remix.size(); ++i)
    REQUIRE_THAT(remix.at(i),
                 Catch::Matchers::WithinAbs(ms.frames.at(i), 1e-12));
}

TEST_CASE("activity envelopes stay inside their configured band") {
  for (double floor : {0.15, 0.4, 1.0}) {
    std::vector<double> env = activity_envelope(9, "env/test", 50, floor);
    REQUIRE(env.size() == 50);
    for (double v : env) {
      REQUIRE(v >= floor - 1e-12);
      REQUIRE(v <= 1.0 + 1e-12);
    }
  }
  // floor 1.0 disables shaping entirely
  for (double v : activity_envelope(9, "env/off", 20, 1.0))
    REQUIRE_THAT(v, Catch::Matchers::WithinAbs(1.0, 1e-12));
}

TEST_CASE("zero signature and zero noise erase speaker identity") {
  DatagenConfig cfg = tiny_data(1);
  cfg.noise_sigma = 0.0;
  UtteranceRenderer ren(cfg);
  CaptionLatent cap = ren.make_caption(0, 0);
  std::vector<double> zsig(cfg.signature_dim, 0.0);
  Tensor a = ren.render(cap.latent.value(), zsig, "who/a", cfg.frames);
  Tensor b = ren.render(cap.latent.value(), zsig, "who/b", cfg.frames);
  for (std::size_t i = 0; i < a.size(); ++i) REQUIRE(a.at(i) == b.at(i));
}

TEST_CASE("enrollment embeddings identify their speaker") {
  DatagenConfig cfg;  // desk defaults: 40 speakers
  cfg.seed = 42;
  UtteranceRenderer ren(cfg);
  std::vector<SpeakerProfile> spk;
  std::vector<Tensor> emb;
  for (std::size_t s = 0; s < cfg.num_speakers; ++s) {
    spk.push_back(ren.make_speaker(s));
    emb.push_back(ren.enroll(spk.back()));
  }
  std::size_t correct = 0, total = 0;
  double min_same = 1.0;
  for (std::size_t s = 0; s < spk.size(); ++s) {
    for (std::size_t seg = 1; seg <= 2; ++seg) {
      Tensor probe = ren.embed_enrollment(ren.enrollment_segment(spk[s], seg));
      double best = -2.0, self = 0.0;
      std::size_t who = 0;
      for (std::size_t r = 0; r < spk.size(); ++r) {
        double c = cosine_similarity(probe, emb[r]);
        if (c > best) {
          best = c;
          who = r;
        }
        if (r == s) self = c;
      }
      min_same = std::min(min_same, self);
      total++;
      if (who == s) correct++;
    }
  }
  CHECK(min_same > 0.9);
  CHECK(double(correct) / double(total) > 0.9);
}

TEST_CASE("clean utterances are linearly decodable to their caption") {
  DatagenConfig cfg = tiny_data(1);
  cfg.num_images = 40;
  cfg.val_images = 8;
  cfg.test_images = 8;
  Corpus corpus = build_corpus(cfg);
  ProbeReport rep = linear_probe_accuracy(corpus);
  INFO("probe " << rep.accuracy << " over " << rep.eval_count);
  CHECK(rep.accuracy > 0.9);
}

TEST_CASE("saved corpora are byte-identical across runs and reload exactly") {
  DatagenConfig cfg = tiny_data(2);
  Corpus corpus = build_corpus(cfg);
  fs::path d1 = fresh_dir("corpus_a"), d2 = fresh_dir("corpus_b");
  save_corpus(corpus, d1);
  save_corpus(build_corpus(cfg), d2);
  CHECK(file_bytes(d1 / "manifest.jsonl") == file_bytes(d2 / "manifest.jsonl"));
  CHECK(file_bytes(d1 / "frames.bin") == file_bytes(d2 / "frames.bin"));

  Corpus back = load_corpus(d1);
  REQUIRE(back.train.samples.size() == corpus.train.samples.size());
  REQUIRE(back.config.seed == cfg.seed);
  for (std::size_t i = 0; i < corpus.val.samples.size(); ++i) {
    const auto& x = corpus.val.samples[i];
    const auto& y = back.val.samples[i];
    REQUIRE(x.sample_id == y.sample_id);
    REQUIRE(x.target == y.target);
    REQUIRE(x.speaker_ids == y.speaker_ids);
    for (std::size_t j = 0; j < x.frames.size(); ++j)
      REQUIRE(x.frames.at(j) == y.frames.at(j));
    for (std::size_t q = 0; q < x.enrollments.size(); ++q)
      for (std::size_t j = 0; j < x.enrollments[q].size(); ++j)
        REQUIRE(x.enrollments[q].at(j) == y.enrollments[q].at(j));
  }
  fs::remove_all(d1);
  fs::remove_all(d2);
}

TEST_CASE("recall matches an exhaustive ranking reference") {
  Rng r(55, "recall");
  std::size_t Q = 12, G = 9;
  Tensor sims = Tensor::randn({Q, G}, r);
  std::vector<std::size_t> gold;
  for (std::size_t q = 0; q < Q; ++q) gold.push_back(r.below(G));
  RecallReport rep = recall_at_k(sims, gold, {1, 3, 5});

  for (std::size_t ki = 0; ki < rep.ks.size(); ++ki) {
    std::size_t k = rep.ks[ki];
    std::size_t hits = 0;
    for (std::size_t q = 0; q < Q; ++q) {
      // count gallery items strictly better than gold
      std::size_t better = 0;
      for (std::size_t g = 0; g < G; ++g)
        if (sims.at(q, g) > sims.at(q, gold[q])) ++better;
      if (better < k) ++hits;
    }
    REQUIRE_THAT(rep.recall[ki],
                 Catch::Matchers::WithinAbs(double(hits) / double(Q), 1e-12));
  }
}

TEST_CASE("recall clamps oversized cutoffs and validates gold indices") {
  Tensor sims = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  RecallReport rep = recall_at_k(sims, {0, 1}, {1, 10});
  CHECK(rep.recall[1] == 1.0);  // k = 10 > gallery: everything is recalled
  CHECK(!rep.warnings.empty());
  CHECK_THROWS_AS(recall_at_k(sims, {0, 7}, {1}), ConfigError);
  CHECK_THROWS_AS(recall_at_k(sims, {0}, {1}), ShapeError);
}

TEST_CASE("ties rank the smaller candidate index first") {
  Tensor sims = Tensor::from({1, 3}, {5, 5, 5});
  RecallReport rep = recall_at_k(sims, {1}, {1, 2});
  CHECK(rep.recall[0] == 0.0);  // candidate 0 ties and outranks gold
  CHECK(rep.recall[1] == 1.0);
}

TEST_CASE("evaluation guards protocol against adapter presence") {
  DatagenConfig dc = tiny_data(1);
  Corpus corpus = build_corpus(dc);
  EncoderConfig enc = tiny_encoder_for(dc);
  RetrievalModel plain(enc, 5);
  CHECK_THROWS_AS(
      evaluate(plain, corpus, "val", EvalProtocol::TargetSpeaker, {1}),
      ConfigError);

  RetrievalModel adapted(enc, 5);
  adapted.attach_tsre(TsreConfig{});
  CHECK_THROWS_AS(evaluate(adapted, corpus, "val", EvalProtocol::Single, {1}),
                  ConfigError);

  EvalResult res = evaluate(plain, corpus, "val", EvalProtocol::Single, {1, 5});
  CHECK(res.speech_to_image.n_queries == corpus.val.samples.size());
}

TEST_CASE("adam matches a two-step hand trace") {
  // one parameter, gradients 0.3 then -0.1, lr 0.01, wd 0.5
  AdamConfig cfg;
  cfg.learning_rate = 0.01;
  cfg.weight_decay = 0.5;
  Tensor p = Tensor::from({1}, {1.0});
  AdamMoments mo;

  double theta = 1.0, m = 0.0, v = 0.0;
  auto expect_step = [&](double g, std::size_t t) {
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    double mhat = m / (1.0 - std::pow(0.9, double(t)));
    double vhat = v / (1.0 - std::pow(0.999, double(t)));
    theta -= cfg.learning_rate * mhat / (std::sqrt(vhat) + 1e-8) +
             cfg.learning_rate * cfg.weight_decay * theta;
  };

  std::vector<double> g1{0.3};
  adam_step(p, g1, mo, cfg, 1);
  expect_step(0.3, 1);
  REQUIRE_THAT(p.at(0), Catch::Matchers::WithinAbs(theta, 1e-15));

  std::vector<double> g2{-0.1};
  adam_step(p, g2, mo, cfg, 2);
  expect_step(-0.1, 2);
  REQUIRE_THAT(p.at(0), Catch::Matchers::WithinAbs(theta, 1e-15));

  // shape guard
  std::vector<double> bad{1.0, 2.0};
  CHECK_THROWS_AS(adam_step(p, bad, mo, cfg, 3), ShapeError);
}

namespace {

RunConfig tiny_run(std::size_t k, const std::string& stage) {
  DatagenConfig dc = tiny_data(k);
  nlohmann::json j{
      {"seed", 13},
      {"encoder",
       {{"num_layers", 1},
        {"hidden_dim", 16},
        {"num_heads", 2},
        {"ff_dim", 24},
        {"embed_dim", 8},
        {"speaker_dim", dc.speaker_dim},
        {"input_dim", dc.input_dim()},
        {"latent_dim", dc.latent_dim}}},
      {"tsre", {{"variant", "scl"}}},
      {"data",
       {{"num_images", dc.num_images},
        {"num_speakers", dc.num_speakers},
        {"num_conditions", k},
        {"frames", dc.frames},
        {"enroll_frames", dc.enroll_frames},
        {"latent_dim", dc.latent_dim},
        {"identity_channels", dc.identity_channels},
        {"signature_dim", dc.signature_dim},
        {"speaker_dim", dc.speaker_dim},
        {"val_images", dc.val_images},
        {"test_images", dc.test_images}}},
      {"trainer",
       {{"stage", stage},
        {"max_steps", 4},
        {"eval_interval", 2},
        {"batch_size", 4}}}};
  return RunConfig::load(j);
}

}  // namespace

TEST_CASE("training runs are byte-deterministic") {
  RunConfig run = tiny_run(1, "base");
  Corpus corpus = build_corpus(run.data);

  fs::path d1 = fresh_dir("train_a"), d2 = fresh_dir("train_b");
  {
    RetrievalModel model(run.encoder, run.model_seed());
    Trainer tr(model, corpus, run.trainer);
    tr.run(d1);
  }
  {
    RetrievalModel model(run.encoder, run.model_seed());
    Trainer tr(model, corpus, run.trainer);
    tr.run(d2);
  }
  for (const char* f :
       {"checkpoint_best.bin", "checkpoint_last.bin", "train_log.jsonl"})
    CHECK(file_bytes(d1 / f) == file_bytes(d2 / f));
  fs::remove_all(d1);
  fs::remove_all(d2);
}

TEST_CASE("frozen parameters never move during finetuning") {
  RunConfig run = tiny_run(2, "tsre-finetune");
  Corpus corpus = build_corpus(run.data);
  RetrievalModel model(run.encoder, run.model_seed());
  model.attach_tsre(run.trainer.adapter);

  std::map<std::string, std::vector<double>> before;
  for (auto& [path, t] : model.params())
    before[path] = std::vector<double>(t.value().begin(), t.value().end());

  Trainer tr(model, corpus, run.trainer);
  fs::path d = fresh_dir("train_frozen");
  tr.run(d);

  bool adapters_moved = false;
  for (auto& [path, t] : model.params()) {
    const auto& was = before.at(path);
    bool moved = false;
    for (std::size_t i = 0; i < t.size(); ++i)
      if (t.at(i) != was[i]) moved = true;
    bool frozen = path.rfind("speech/input_proj", 0) == 0 ||
                  path.rfind("speech/block", 0) == 0 ||
                  path.rfind("speech/alpha", 0) == 0 ||
                  path.rfind("speech/out_proj", 0) == 0 ||
                  path.rfind("image/", 0) == 0;
    if (frozen) REQUIRE(!moved);
    if (path.rfind("tsre/", 0) == 0 && moved) adapters_moved = true;
  }
  CHECK(adapters_moved);
  fs::remove_all(d);
}

TEST_CASE("checkpoints round-trip bit-exactly and resume replays the run") {
  RunConfig run = tiny_run(1, "base");
  run.trainer.max_steps = 6;
  run.trainer.eval_interval = 3;
  Corpus corpus = build_corpus(run.data);

  // straight 6-step run
  fs::path d6 = fresh_dir("train_six");
  {
    RetrievalModel model(run.encoder, run.model_seed());
    Trainer tr(model, corpus, run.trainer);
    tr.run(d6);
  }

  // 3 steps, then resume from the saved state for 3 more
  fs::path d3 = fresh_dir("train_three"), dr = fresh_dir("train_resume");
  {
    RunConfig half = run;
    half.trainer.max_steps = 3;
    RetrievalModel model(half.encoder, half.model_seed());
    Trainer tr(model, corpus, half.trainer);
    tr.run(d3);
  }
  {
    LoadedCheckpoint ck = load_checkpoint(d3 / "checkpoint_last.bin");
    REQUIRE(ck.step == 3);
    Trainer tr(ck.model, corpus, run.trainer);
    tr.restore(ck.step, ck.moments);
    tr.run(dr);
  }
  CHECK(file_bytes(d6 / "checkpoint_last.bin") ==
        file_bytes(dr / "checkpoint_last.bin"));

  // load_checkpoint rejects foreign containers
  fs::path alien = fs::temp_directory_path() / "tsrelab_alien.bin";
  write_container(alien, nlohmann::json{{"format", "other"}}, {});
  CHECK_THROWS_AS(load_checkpoint(alien), ConfigError);
  fs::remove(alien);
  fs::remove_all(d6);
  fs::remove_all(d3);
  fs::remove_all(dr);
}

TEST_CASE("batch order is a deterministic function of step and seed") {
  RunConfig run = tiny_run(1, "base");
  Corpus corpus = build_corpus(run.data);
  RetrievalModel m1(run.encoder, run.model_seed());
  Trainer t1(m1, corpus, run.trainer);
  RetrievalModel m2(run.encoder, run.model_seed());
  Trainer t2(m2, corpus, run.trainer);
  for (std::size_t step : {0u, 1u, 5u}) {
    auto a = t1.batch_indices(step);
    auto b = t2.batch_indices(step);
    REQUIRE(a == b);
    // no sample repeats inside one batch
    std::set<std::size_t> uniq(a.begin(), a.end());
    REQUIRE(uniq.size() == a.size());
  }
  CHECK(t1.batch_indices(0) != t1.batch_indices(1));
}
