// Copyright 2026 the tsrelab authors
// SPDX-License-Identifier: Apache-2.0
//
// Operator CLI: corpus synthesis, training stages, evaluation, parameter
// accounting and gradient checking. Every command is deterministic in its
// inputs; rerunning with the same flags overwrites outputs with identical
// bytes.
//
// Exit codes: 0 success, 1 configuration or validation error, 2 numerical
// failure (non-finite loss, failed gradient check).

#include <cstdio>
#include <filesystem>
#include <optional>
#include <set>
#include <string>

#include <CLI11.hpp>

#include "tsrelab/config.hpp"
#include "tsrelab/gradcheck.hpp"
#include "tsrelab/retrieval.hpp"
#include "tsrelab/trainer.hpp"
#include "tsrelab/tsre.hpp"

namespace {

using namespace tsrelab;

std::optional<std::uint64_t> opt_seed(const CLI::Option* o, std::uint64_t v) {
  if (o->count() > 0) return v;
  return std::nullopt;
}

void print_split_stats(const Corpus& corpus, const CorpusSplit& split) {
  std::set<std::string> images;
  for (const auto& s : split.samples) images.insert(s.image_id);
  std::printf("  %-6s %8zu %12zu %14zu\n", split.name.c_str(), images.size(),
              split.samples.size(), corpus.config.num_conditions);
}

int run_synth_data(const std::string& config_path, const std::string& dir,
                   std::optional<std::uint64_t> k,
                   std::optional<std::uint64_t> seed) {
  RunConfig run = RunConfig::load_file(config_path, seed);
  if (k) {
    run.data.num_conditions = static_cast<std::size_t>(*k);
    run.validate();
  }
  Corpus corpus = build_corpus(run.data);
  save_corpus(corpus, dir);
  std::printf("corpus written to %s\n", dir.c_str());
  std::printf("  split    images   utterances   speakers/utt\n");
  print_split_stats(corpus, corpus.train);
  print_split_stats(corpus, corpus.val);
  print_split_stats(corpus, corpus.test);
  std::printf("  speakers: %zu, captions: %zu, frames/utt: %zu, seed: %llu\n",
              corpus.speakers.size(), corpus.captions.size(),
              corpus.config.frames,
              static_cast<unsigned long long>(corpus.config.seed));
  return 0;
}

int run_train(const std::string& config_path, std::optional<std::string> stage,
              const std::string& init, const std::string& resume,
              const std::string& out, std::optional<std::uint64_t> seed) {
  RunConfig run = RunConfig::load_file(config_path, seed);
  if (stage) run.trainer.stage = *stage;
  run.trainer.validate();
  bool finetune = run.trainer.stage == "tsre-finetune";

  // The base stage always trains on single-speaker utterances; the mixture
  // size in the config applies to the fine-tuning stage.
  DatagenConfig dcfg = run.data;
  if (!finetune) dcfg.num_conditions = 1;
  Corpus corpus = build_corpus(dcfg);

  RetrievalModel model(run.encoder, run.model_seed());
  std::size_t start_step = 0;
  std::map<std::string, AdamMoments> moments;
  if (!resume.empty()) {
    LoadedCheckpoint lc = load_checkpoint(resume);
    if (lc.train.stage != run.trainer.stage)
      throw ConfigError("train: --resume checkpoint is from stage '" +
                        lc.train.stage + "'");
    model = std::move(lc.model);
    start_step = lc.step;
    moments = std::move(lc.moments);
  } else if (!init.empty()) {
    LoadedCheckpoint lc = load_checkpoint(init);
    if (lc.model.has_tsre())
      throw ConfigError("train: --init checkpoint already carries an adapter");
    model = std::move(lc.model);
  }
  if (finetune && !model.has_tsre()) model.attach_tsre(run.tsre);

  Trainer trainer(model, corpus, run.trainer);
  if (start_step > 0) trainer.restore(start_step, std::move(moments));
  TrainOutcome oc = trainer.run(out);
  std::printf(
      "stage %s: %zu steps, final loss %.6f, best val R@1 %.4f at step %zu\n",
      run.trainer.stage.c_str(), oc.steps_run, oc.final_loss,
      oc.best_val_recall1, oc.best_step);
  std::printf("checkpoints and log in %s\n", out.c_str());
  return 0;
}

int run_eval(const std::string& checkpoint, const std::string& corpus_dir,
             const std::string& protocol, const std::string& split,
             const std::string& out) {
  LoadedCheckpoint lc = load_checkpoint(checkpoint);
  Corpus corpus = load_corpus(corpus_dir);
  EvalProtocol p;
  if (protocol == "single")
    p = EvalProtocol::Single;
  else if (protocol == "target")
    p = EvalProtocol::TargetSpeaker;
  else
    throw ConfigError("eval: protocol must be 'single' or 'target'");
  EvalResult res = evaluate(lc.model, corpus, split, p);
  write_reports(res, out);
  std::printf("%s protocol on %s split (%zu queries)\n", protocol.c_str(),
              split.c_str(), res.speech_to_image.n_queries);
  for (std::size_t i = 0; i < res.speech_to_image.ks.size(); ++i)
    std::printf("  speech->image R@%-3zu %.4f\n", res.speech_to_image.ks[i],
                res.speech_to_image.recall[i]);
  for (std::size_t i = 0; i < res.image_to_speech.ks.size(); ++i)
    std::printf("  image->speech R@%-3zu %.4f\n", res.image_to_speech.ks[i],
                res.image_to_speech.recall[i]);
  for (const auto& w : res.speech_to_image.warnings)
    std::printf("  warning: %s\n", w.c_str());
  std::printf("reports in %s\n", out.c_str());
  return 0;
}

int run_count_params(const std::string& variant, bool paper_scale) {
  EncoderConfig enc;  // desk defaults; scaled up inside when requested
  std::vector<TsreVariant> variants;
  if (variant.empty())
    variants = {TsreVariant::SclOnly, TsreVariant::SccB3, TsreVariant::SccB5,
                TsreVariant::Scc};
  else
    variants = {tsre_variant_from_string(variant)};
  std::printf("  %-8s %12s %10s\n", "variant", "params",
              paper_scale ? "millions" : "serialized");
  for (TsreVariant v : variants) {
    TsreConfig cfg;
    cfg.variant = v;
    std::size_t n = count_tsre_params(enc, cfg, paper_scale);
    if (paper_scale) {
      std::printf("  %-8s %12zu %10.2f\n", to_string(v).c_str(), n,
                  double(n) / 1e6);
    } else {
      // cross-check against the registered adapter parameters
      RetrievalModel model(enc, 1);
      model.attach_tsre(cfg);
      std::size_t serialized = model.params().numel("tsre/");
      std::printf("  %-8s %12zu %10zu%s\n", to_string(v).c_str(), n,
                  serialized, n == serialized ? "" : "  MISMATCH");
      if (n != serialized)
        throw NumericError("count-params: serialized parameter mismatch");
    }
  }
  return 0;
}

int run_gradcheck(const std::string& config_path,
                  std::optional<std::uint64_t> seed) {
  std::uint64_t s = 123;
  if (!config_path.empty()) {
    RunConfig run = RunConfig::load_file(config_path, seed);
    s = run.seed;
  } else if (seed) {
    s = *seed;
  } else if (auto env = env_seed()) {
    s = *env;
  }
  const double tol = 1e-4;
  bool ok = true;
  std::vector<std::pair<std::string, const TsreConfig*>> runs;
  TsreConfig scl, scc, b5, b3;
  scl.variant = TsreVariant::SclOnly;
  scc.variant = TsreVariant::Scc;
  b5.variant = TsreVariant::SccB5;
  b3.variant = TsreVariant::SccB3;
  runs = {{"encoder", nullptr},
          {"scl", &scl},
          {"scc", &scc},
          {"scc-b5", &b5},
          {"scc-b3", &b3}};
  for (const auto& [name, cfg] : runs) {
    GradCheckReport r = model_gradient_check(cfg, s);
    std::printf("%s: max relative error %.3e over %zu groups [%s]\n",
                name.c_str(), r.max_rel_err, r.entries.size(),
                r.passes(tol) ? "ok" : "FAIL");
    for (const auto& e : r.entries)
      std::printf("  %-32s %.3e\n", e.path.c_str(), e.max_rel_err);
    ok = ok && r.passes(tol);
  }
  if (!ok) throw NumericError("gradcheck: relative error above 1e-4");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"tsrelab: target-speaker speech-image retrieval lab"};
  app.require_subcommand(1);

  std::string config_path, corpus_dir, out_dir, checkpoint, init_ckpt,
      resume_ckpt, protocol = "single", split = "test", stage, variant;
  std::uint64_t k = 2, seed_flag = 0;
  bool paper_scale = false;

  auto* synth = app.add_subcommand("synth-data", "Generate a corpus");
  synth->add_option("--config", config_path, "Run config JSON")->required();
  synth->add_option("--corpus-dir", corpus_dir, "Output directory")->required();
  auto* synth_k =
      synth->add_option("--k", k, "Speakers per mixture")->check(CLI::Range(1, 3));
  auto* synth_seed = synth->add_option("--seed", seed_flag, "Global seed");

  auto* train = app.add_subcommand("train", "Train a stage");
  train->add_option("--config", config_path, "Run config JSON")->required();
  auto* stage_opt =
      train->add_option("--stage", stage, "base or tsre-finetune")
          ->check(CLI::IsMember({"base", "tsre-finetune"}));
  train->add_option("--init", init_ckpt, "Initialize parameters from checkpoint");
  train->add_option("--resume", resume_ckpt, "Resume an interrupted run");
  train->add_option("--out", out_dir, "Output directory")->required();
  auto* train_seed = train->add_option("--seed", seed_flag, "Global seed");

  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval_cmd->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  eval_cmd->add_option("--corpus-dir", corpus_dir, "Corpus directory")->required();
  eval_cmd->add_option("--protocol", protocol, "single or target")
      ->check(CLI::IsMember({"single", "target"}));
  eval_cmd->add_option("--split", split, "Corpus split")
      ->check(CLI::IsMember({"train", "val", "test"}));
  eval_cmd->add_option("--out", out_dir, "Report directory")->required();

  auto* count = app.add_subcommand("count-params", "Adapter parameter counts");
  count->add_option("--variant", variant, "scl, scc, scc-b5 or scc-b3")
      ->check(CLI::IsMember({"scl", "scc", "scc-b5", "scc-b3"}));
  count->add_flag("--paper-scale", paper_scale,
                  "Count at published scale (D=1024, u=256, Cb=512)");

  auto* grad = app.add_subcommand("gradcheck", "Finite-difference suite");
  grad->add_option("--config", config_path, "Run config JSON");
  auto* grad_seed = grad->add_option("--seed", seed_flag, "Global seed");

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth->parsed())
      return run_synth_data(config_path, corpus_dir, opt_seed(synth_k, k),
                            opt_seed(synth_seed, seed_flag));
    if (train->parsed())
      return run_train(config_path,
                       stage_opt->count() ? std::optional<std::string>(stage)
                                          : std::nullopt,
                       init_ckpt, resume_ckpt, out_dir,
                       opt_seed(train_seed, seed_flag));
    if (eval_cmd->parsed())
      return run_eval(checkpoint, corpus_dir, protocol, split, out_dir);
    if (count->parsed()) return run_count_params(variant, paper_scale);
    if (grad->parsed())
      return run_gradcheck(config_path, opt_seed(grad_seed, seed_flag));
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numerical failure: %s\n", e.what());
    return 2;
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
