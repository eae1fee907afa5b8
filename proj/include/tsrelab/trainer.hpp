// Copyright 2026 the tsrelab authors
// SPDX-License-Identifier: Apache-2.0
//
// Deterministic training loop. Two stages:
//   base          — contrastive training of the speech encoder on a
//                   single-speaker corpus, no conditioning.
//   tsre-finetune — adapter training on a mixture corpus, initialized from a
//                   base checkpoint; by default everything except the
//                   adapters and the head block is frozen.
//
// Determinism contract: (config, corpus, seed) fully determine every batch,
// every update and the bytes of every checkpoint. Batches come from per-step
// derived random streams, so resuming from a checkpoint replays the exact
// trajectory of an uninterrupted run.

#ifndef TSRELAB_TRAINER_HPP
#define TSRELAB_TRAINER_HPP

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "tsrelab/container.hpp"
#include "tsrelab/datagen.hpp"
#include "tsrelab/encoder.hpp"
#include "tsrelab/objective.hpp"
#include "tsrelab/retrieval.hpp"

namespace tsrelab {

struct TrainConfig {
  std::string stage = "base";  // "base" or "tsre-finetune"
  double learning_rate = 1e-3;
  std::size_t batch_size = 32;
  double weight_decay = 1e-8;
  std::size_t max_steps = 2000;
  std::size_t eval_interval = 100;
  std::uint64_t seed = 7;
  double temperature = 0.07;
  std::vector<std::string> freeze;  // path prefixes; empty = stage default
  TsreConfig adapter;               // consulted in the tsre-finetune stage

  void validate() const {
    if (stage != "base" && stage != "tsre-finetune")
      throw ConfigError("TrainConfig: unknown stage '" + stage + "'");
    if (!(learning_rate >= 0.0))
      throw ConfigError("TrainConfig: learning rate must be >= 0");
    if (batch_size < 2)
      throw ConfigError(
          "TrainConfig: contrastive training needs batch size >= 2");
    if (max_steps < 1) throw ConfigError("TrainConfig: max_steps must be >= 1");
    if (eval_interval < 1)
      throw ConfigError("TrainConfig: eval_interval must be >= 1");
    if (weight_decay < 0.0)
      throw ConfigError("TrainConfig: weight decay must be >= 0");
    if (!(temperature > 0.0))
      throw ConfigError("TrainConfig: temperature must be > 0");
  }

  /// Frozen path prefixes for this stage. The image tower is untrainable
  /// regardless (its parameters never carry gradients).
  std::vector<std::string> effective_freeze() const {
    if (!freeze.empty() || stage == "base") return freeze;
    return {"speech/input_proj", "speech/block", "speech/alpha",
            "speech/out_proj"};
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"stage", c.stage},
                     {"learning_rate", c.learning_rate},
                     {"batch_size", c.batch_size},
                     {"weight_decay", c.weight_decay},
                     {"max_steps", c.max_steps},
                     {"eval_interval", c.eval_interval},
                     {"seed", c.seed},
                     {"temperature", c.temperature},
                     {"freeze", c.freeze},
                     {"adapter", c.adapter}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  j.at("stage").get_to(c.stage);
  j.at("learning_rate").get_to(c.learning_rate);
  j.at("batch_size").get_to(c.batch_size);
  j.at("weight_decay").get_to(c.weight_decay);
  j.at("max_steps").get_to(c.max_steps);
  j.at("eval_interval").get_to(c.eval_interval);
  j.at("seed").get_to(c.seed);
  j.at("temperature").get_to(c.temperature);
  j.at("freeze").get_to(c.freeze);
  c.adapter = j.at("adapter").get<TsreConfig>();
}

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

struct AdamMoments {
  std::vector<double> m, v;
};

/// One bias-corrected Adam update with decoupled weight decay:
///   theta <- theta - lr * mhat / (sqrt(vhat) + eps) - lr * wd * theta
/// `t` is the 1-based update count. A missing gradient counts as zero.
inline void adam_step(Tensor& param, std::span<const double> grad,
                      AdamMoments& mo, const AdamConfig& cfg, std::size_t t) {
  std::size_t n = param.size();
  if (!grad.empty() && grad.size() != n)
    throw ShapeError("adam_step: gradient size mismatch");
  if (mo.m.empty()) {
    mo.m.assign(n, 0.0);
    mo.v.assign(n, 0.0);
  }
  if (mo.m.size() != n)
    throw ShapeError("adam_step: moment size mismatch");
  double c1 = 1.0 - std::pow(cfg.beta1, double(t));
  double c2 = 1.0 - std::pow(cfg.beta2, double(t));
  std::span<double> p = param.mutable_value();
  for (std::size_t i = 0; i < n; ++i) {
    double g = grad.empty() ? 0.0 : grad[i];
    mo.m[i] = cfg.beta1 * mo.m[i] + (1.0 - cfg.beta1) * g;
    mo.v[i] = cfg.beta2 * mo.v[i] + (1.0 - cfg.beta2) * g * g;
    double mhat = mo.m[i] / c1;
    double vhat = mo.v[i] / c2;
    p[i] -= cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.eps) +
            cfg.learning_rate * cfg.weight_decay * p[i];
  }
}

inline void save_checkpoint(const std::filesystem::path& file,
                            const RetrievalModel& model,
                            const TrainConfig& cfg, std::size_t step,
                            const std::map<std::string, AdamMoments>& moments,
                            std::uint64_t corpus_seed) {
  nlohmann::json meta;
  meta["format"] = "checkpoint";
  meta["step"] = step;
  meta["model_seed"] = model.seed();
  meta["corpus_seed"] = corpus_seed;
  meta["encoder"] = model.config();
  meta["adapter"] =
      model.has_tsre() ? nlohmann::json(model.tsre()->config()) : nlohmann::json();
  meta["train"] = cfg;
  meta["digest"] = json_digest(nlohmann::json{{"encoder", meta["encoder"]},
                                              {"adapter", meta["adapter"]},
                                              {"train", meta["train"]},
                                              {"model_seed", model.seed()}});
  std::vector<ContainerEntry> entries;
  for (const auto& [path, t] : model.params())
    entries.push_back({"param/" + path, t.shape(),
                       std::vector<double>(t.value().begin(), t.value().end())});
  for (const auto& [path, mo] : moments) {
    const Tensor& t = model.params().get(path);
    entries.push_back({"adam_m/" + path, t.shape(), mo.m});
    entries.push_back({"adam_v/" + path, t.shape(), mo.v});
  }
  write_container(file, meta, entries);
}

struct LoadedCheckpoint {
  RetrievalModel model;
  TrainConfig train;
  std::size_t step = 0;
  std::uint64_t corpus_seed = 0;
  std::map<std::string, AdamMoments> moments;
};

inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& file) {
  Container c = Container::read(file);
  if (c.meta.value("format", "") != "checkpoint")
    throw ConfigError("load_checkpoint: " + file.string() +
                      " is not a checkpoint container");
  EncoderConfig enc = c.meta.at("encoder").get<EncoderConfig>();
  std::uint64_t model_seed = c.meta.at("model_seed").get<std::uint64_t>();
  LoadedCheckpoint out{RetrievalModel(enc, model_seed),
                       c.meta.at("train").get<TrainConfig>(),
                       c.meta.at("step").get<std::size_t>(),
                       c.meta.at("corpus_seed").get<std::uint64_t>(),
                       {}};
  if (!c.meta.at("adapter").is_null())
    out.model.attach_tsre(c.meta.at("adapter").get<TsreConfig>());
  for (const auto& [path, t] : out.model.params()) {
    const ContainerEntry& e = c.get("param/" + path);
    if (e.shape != t.shape())
      throw ConfigError("load_checkpoint: shape mismatch at '" + path + "'");
    Tensor mut = t;
    std::copy(e.data.begin(), e.data.end(), mut.mutable_value().begin());
  }
  for (const auto& e : c.entries) {
    if (e.path.rfind("param/", 0) == 0) {
      if (!out.model.params().contains(e.path.substr(6)))
        throw ConfigError("load_checkpoint: unknown parameter '" + e.path +
                          "'");
    } else if (e.path.rfind("adam_m/", 0) == 0) {
      out.moments[e.path.substr(7)].m = e.data;
    } else if (e.path.rfind("adam_v/", 0) == 0) {
      out.moments[e.path.substr(7)].v = e.data;
    } else {
      throw ConfigError("load_checkpoint: unexpected entry '" + e.path + "'");
    }
  }
  return out;
}

struct TrainOutcome {
  std::size_t steps_run = 0;
  double final_loss = 0.0;
  std::size_t best_step = 0;
  double best_val_recall1 = -1.0;
};

class Trainer {
 public:
  Trainer(RetrievalModel& model, const Corpus& corpus, TrainConfig cfg)
      : model_(model), corpus_(corpus), cfg_(std::move(cfg)) {
    cfg_.validate();
    if (corpus_.train.samples.empty())
      throw ConfigError("Trainer: corpus has no training samples");
    if (cfg_.stage == "tsre-finetune" && !model_.has_tsre())
      throw ConfigError(
          "Trainer: tsre-finetune stage needs a model with an attached "
          "adapter");
    if (cfg_.stage == "base" && model_.has_tsre())
      throw ConfigError("Trainer: base stage cannot train an adapted model");
    caption_index_ = build_caption_index();
    std::vector<std::string> frozen = cfg_.effective_freeze();
    for (const auto& [path, t] : model_.params()) {
      if (!t.requires_grad()) continue;
      bool skip = false;
      for (const auto& pre : frozen)
        if (path.rfind(pre, 0) == 0) skip = true;
      if (!skip) trainable_.push_back(path);
    }
    if (trainable_.empty())
      throw ConfigError("Trainer: freeze set leaves nothing trainable");
  }

  /// Resume state from a checkpoint of the same stage.
  void restore(std::size_t step, std::map<std::string, AdamMoments> moments) {
    start_step_ = step;
    moments_ = std::move(moments);
  }

  const std::vector<std::string>& trainable_paths() const { return trainable_; }

  /// Deterministic sample indices for one step.
  std::vector<std::size_t> batch_indices(std::size_t step) const {
    std::size_t n = corpus_.train.samples.size();
    std::size_t b = std::min(cfg_.batch_size, n);
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    Rng r(cfg_.seed, "batch/" + std::to_string(step));
    for (std::size_t i = 0; i < b; ++i) {
      std::size_t j = i + r.below(n - i);
      std::swap(idx[i], idx[j]);
    }
    idx.resize(b);
    return idx;
  }

  /// Forward/backward/update on the given samples; returns the loss.
  double step_on(const std::vector<std::size_t>& samples, std::size_t t) {
    ContrastiveBatch batch = build_batch(samples);
    LossConfig lcfg;
    lcfg.temperature = cfg_.temperature;
    Tensor loss = target_speaker_loss(batch, lcfg);
    double lv = loss.item();
    if (!std::isfinite(lv))
      throw NumericError("training aborted: non-finite loss " +
                         std::to_string(lv) + " at update " +
                         std::to_string(t));
    model_.params().zero_grad();
    backward(loss);
    AdamConfig acfg;
    acfg.learning_rate = cfg_.learning_rate;
    acfg.weight_decay = cfg_.weight_decay;
    for (const auto& path : trainable_) {
      Tensor p = model_.params().get(path);
      adam_step(p, p.grad(), moments_[path], acfg, t);
    }
    model_.params().zero_grad();
    return lv;
  }

  /// Runs the remaining steps, logging one JSON line per step and writing
  /// best/last checkpoints under out_dir.
  TrainOutcome run(const std::filesystem::path& out_dir) {
    std::filesystem::create_directories(out_dir);
    std::ofstream log(out_dir / "train_log.jsonl",
                      std::ios::binary | std::ios::trunc);
    if (!log)
      throw ConfigError("Trainer: cannot write log in " + out_dir.string());
    TrainOutcome out;
    std::optional<Snapshot> best;
    for (std::size_t step = start_step_; step < cfg_.max_steps; ++step) {
      double lv = step_on(batch_indices(step), step + 1);
      out.final_loss = lv;
      ++out.steps_run;
      nlohmann::json line{{"step", step + 1},
                          {"loss", lv},
                          {"lr", cfg_.learning_rate}};
      bool eval_now = (step + 1) % cfg_.eval_interval == 0 ||
                      step + 1 == cfg_.max_steps;
      if (eval_now) {
        double r1 = validation_recall1();
        line["val_speech_to_image_r1"] = r1;
        if (r1 > out.best_val_recall1) {
          out.best_val_recall1 = r1;
          out.best_step = step + 1;
          best = snapshot(step + 1);
        }
        line["best_step"] = out.best_step;
      }
      log << line.dump() << "\n";
    }
    if (!log) throw ConfigError("Trainer: log write failed");
    save_checkpoint(out_dir / "checkpoint_last.bin", model_, cfg_,
                    cfg_.max_steps, moments_, corpus_.config.seed);
    if (best) {
      Snapshot last = snapshot(cfg_.max_steps);
      restore_snapshot(*best);
      save_checkpoint(out_dir / "checkpoint_best.bin", model_, cfg_,
                      best->step, best->moments, corpus_.config.seed);
      restore_snapshot(last);  // leave the model at the last step
    } else {
      save_checkpoint(out_dir / "checkpoint_best.bin", model_, cfg_,
                      cfg_.max_steps, moments_, corpus_.config.seed);
    }
    return out;
  }

  double validation_recall1() const {
    EvalResult res = evaluate(
        model_, corpus_, "val",
        cfg_.stage == "base" ? EvalProtocol::Single
                             : EvalProtocol::TargetSpeaker,
        {1});
    return res.speech_to_image.recall[0];
  }

 private:
  struct Snapshot {
    std::size_t step = 0;
    std::vector<std::vector<double>> values;  // params in store order
    std::map<std::string, AdamMoments> moments;
  };

  std::unordered_map<std::string, const CaptionLatent*> build_caption_index()
      const {
    std::unordered_map<std::string, const CaptionLatent*> m;
    for (const auto& c : corpus_.captions) m[c.caption_id] = &c;
    return m;
  }

  ContrastiveBatch build_batch(const std::vector<std::size_t>& samples) const {
    bool conditioned = cfg_.stage == "tsre-finetune";
    std::vector<Tensor> irow, srow;
    ContrastiveBatch batch;
    for (std::size_t si : samples) {
      const MixtureSample& ms = corpus_.train.samples[si];
      auto it = caption_index_.find(ms.caption_ids[ms.target]);
      if (it == caption_index_.end())
        throw ConfigError("Trainer: sample '" + ms.sample_id +
                          "' references unknown caption");
      irow.push_back(model_.encode_image(it->second->latent));
      if (conditioned) {
        for (std::size_t q = 0; q < ms.enrollments.size(); ++q)
          srow.push_back(model_.encode_speech(ms.frames, &ms.enrollments[q]));
        batch.target.push_back(ms.target);
      } else {
        srow.push_back(model_.encode_speech(ms.frames));
        batch.target.push_back(0);
      }
    }
    batch.num_conditions =
        conditioned ? corpus_.train.samples[samples[0]].enrollments.size() : 1;
    batch.images = stack_rows(irow);
    batch.speech = stack_rows(srow);
    return batch;
  }

  Snapshot snapshot(std::size_t step) const {
    Snapshot s;
    s.step = step;
    for (const auto& [path, t] : model_.params())
      s.values.emplace_back(t.value().begin(), t.value().end());
    s.moments = moments_;
    return s;
  }

  void restore_snapshot(const Snapshot& s) {
    std::size_t i = 0;
    for (const auto& [path, t] : model_.params()) {
      Tensor mut = t;
      std::copy(s.values[i].begin(), s.values[i].end(),
                mut.mutable_value().begin());
      ++i;
    }
  }

  RetrievalModel& model_;
  const Corpus& corpus_;
  TrainConfig cfg_;
  std::unordered_map<std::string, const CaptionLatent*> caption_index_;
  std::vector<std::string> trainable_;
  std::map<std::string, AdamMoments> moments_;
  std::size_t start_step_ = 0;
};

}  // namespace tsrelab

#endif  // TSRELAB_TRAINER_HPP
