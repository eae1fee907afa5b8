// Copyright 2026 the tsrelab authors
// SPDX-License-Identifier: Apache-2.0
//
// Unified run configuration. One JSON document with optional sections
// (encoder, tsre, loss, data, trainer) merged over built-in defaults; any
// key the schema does not know is an error, so typos fail loudly instead of
// silently keeping a default.
//
// Seed resolution, strongest first: --seed flag, "seed" in the file, the
// TSRELAB_SEED environment variable, then 1. The resolved global seed also
// fills in data.seed and trainer.seed unless the file pins them explicitly.

#ifndef TSRELAB_CONFIG_HPP
#define TSRELAB_CONFIG_HPP

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>

#include <json.hpp>

#include "tsrelab/datagen.hpp"
#include "tsrelab/model_config.hpp"
#include "tsrelab/trainer.hpp"

namespace tsrelab {

namespace detail {

inline void reject_unknown_keys(const nlohmann::json& j, const char* where,
                                std::initializer_list<const char*> allowed) {
  if (!j.is_object())
    throw ConfigError(std::string("config: ") + where +
                      " must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    bool known = false;
    for (const char* a : allowed)
      if (key == a) known = true;
    if (!known)
      throw ConfigError(std::string("config: unknown key '") + key + "' in " +
                        where);
  }
}

template <typename T>
void take(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) j.at(key).get_to(out);
}

inline void merge_encoder(const nlohmann::json& j, EncoderConfig& c) {
  reject_unknown_keys(j, "encoder",
                      {"num_layers", "hidden_dim", "num_heads", "ff_dim",
                       "embed_dim", "speaker_dim", "input_dim", "latent_dim"});
  take(j, "num_layers", c.num_layers);
  take(j, "hidden_dim", c.hidden_dim);
  take(j, "num_heads", c.num_heads);
  take(j, "ff_dim", c.ff_dim);
  take(j, "embed_dim", c.embed_dim);
  take(j, "speaker_dim", c.speaker_dim);
  take(j, "input_dim", c.input_dim);
  take(j, "latent_dim", c.latent_dim);
}

inline void merge_tsre(const nlohmann::json& j, TsreConfig& c) {
  reject_unknown_keys(
      j, "tsre", {"variant", "kernel_size", "bottleneck_dim", "insertion_sites"});
  if (j.contains("variant"))
    c.variant = tsre_variant_from_string(j.at("variant").get<std::string>());
  take(j, "kernel_size", c.kernel_size);
  take(j, "bottleneck_dim", c.bottleneck_dim);
  take(j, "insertion_sites", c.insertion_sites);
}

inline void merge_data(const nlohmann::json& j, DatagenConfig& c,
                       bool& seed_pinned) {
  reject_unknown_keys(
      j, "data",
      {"num_images", "captions_per_image", "mixtures_per_caption",
       "num_speakers", "num_conditions", "frames", "enroll_frames",
       "latent_dim", "identity_channels", "signature_dim", "speaker_dim",
       "val_images", "test_images", "noise_sigma", "gain_scale",
       "identity_scale", "activity_floor", "seed"});
  take(j, "num_images", c.num_images);
  take(j, "captions_per_image", c.captions_per_image);
  take(j, "mixtures_per_caption", c.mixtures_per_caption);
  take(j, "num_speakers", c.num_speakers);
  take(j, "num_conditions", c.num_conditions);
  take(j, "frames", c.frames);
  take(j, "enroll_frames", c.enroll_frames);
  take(j, "latent_dim", c.latent_dim);
  take(j, "identity_channels", c.identity_channels);
  take(j, "signature_dim", c.signature_dim);
  take(j, "speaker_dim", c.speaker_dim);
  take(j, "val_images", c.val_images);
  take(j, "test_images", c.test_images);
  take(j, "noise_sigma", c.noise_sigma);
  take(j, "gain_scale", c.gain_scale);
  take(j, "identity_scale", c.identity_scale);
  take(j, "activity_floor", c.activity_floor);
  if (j.contains("seed")) {
    j.at("seed").get_to(c.seed);
    seed_pinned = true;
  }
}

inline void merge_trainer(const nlohmann::json& j, TrainConfig& c,
                          bool& seed_pinned) {
  reject_unknown_keys(j, "trainer",
                      {"stage", "learning_rate", "batch_size", "weight_decay",
                       "max_steps", "eval_interval", "freeze", "seed"});
  take(j, "stage", c.stage);
  take(j, "learning_rate", c.learning_rate);
  take(j, "batch_size", c.batch_size);
  take(j, "weight_decay", c.weight_decay);
  take(j, "max_steps", c.max_steps);
  take(j, "eval_interval", c.eval_interval);
  take(j, "freeze", c.freeze);
  if (j.contains("seed")) {
    j.at("seed").get_to(c.seed);
    seed_pinned = true;
  }
}

}  // namespace detail

/// TSRELAB_SEED, if set and a valid unsigned integer.
inline std::optional<std::uint64_t> env_seed() {
  const char* s = std::getenv("TSRELAB_SEED");
  if (!s || !*s) return std::nullopt;
  char* end = nullptr;
  unsigned long long v = std::strtoull(s, &end, 10);
  if (end == s || *end != '\0')
    throw ConfigError("TSRELAB_SEED is not an unsigned integer: '" +
                      std::string(s) + "'");
  return v;
}

struct RunConfig {
  std::uint64_t seed = 1;
  EncoderConfig encoder;
  TsreConfig tsre;
  double temperature = 0.07;
  DatagenConfig data;
  TrainConfig trainer;

  /// Parses and validates a config document. `cli_seed` is the --seed flag.
  static RunConfig load(const nlohmann::json& j,
                        std::optional<std::uint64_t> cli_seed = std::nullopt) {
    detail::reject_unknown_keys(
        j, "config", {"seed", "encoder", "tsre", "loss", "data", "trainer"});
    RunConfig run;
    bool data_seed_pinned = false, trainer_seed_pinned = false;
    if (j.contains("encoder")) detail::merge_encoder(j.at("encoder"), run.encoder);
    if (j.contains("tsre")) detail::merge_tsre(j.at("tsre"), run.tsre);
    if (j.contains("loss")) {
      detail::reject_unknown_keys(j.at("loss"), "loss", {"temperature"});
      detail::take(j.at("loss"), "temperature", run.temperature);
    }
    if (j.contains("data"))
      detail::merge_data(j.at("data"), run.data, data_seed_pinned);
    if (j.contains("trainer"))
      detail::merge_trainer(j.at("trainer"), run.trainer, trainer_seed_pinned);

    if (cli_seed)
      run.seed = *cli_seed;
    else if (j.contains("seed"))
      j.at("seed").get_to(run.seed);
    else if (auto env = env_seed())
      run.seed = *env;
    if (!data_seed_pinned) run.data.seed = run.seed;
    if (!trainer_seed_pinned) run.trainer.seed = run.seed;
    run.trainer.adapter = run.tsre;
    run.trainer.temperature = run.temperature;
    run.validate();
    return run;
  }

  static RunConfig load_file(const std::filesystem::path& file,
                             std::optional<std::uint64_t> cli_seed = std::nullopt) {
    std::ifstream f(file);
    if (!f) throw ConfigError("config: cannot open " + file.string());
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(f);
    } catch (const nlohmann::json::parse_error& e) {
      throw ConfigError("config: " + file.string() + ": " + e.what());
    }
    return load(j, cli_seed);
  }

  void validate() const {
    encoder.validate();
    tsre.validate(encoder);
    data.validate();
    trainer.validate();
    if (!(temperature > 0.0))
      throw ConfigError("config: loss.temperature must be > 0");
    if (encoder.input_dim != data.input_dim())
      throw ConfigError(
          "config: encoder.input_dim must equal data latent_dim + "
          "identity_channels (" +
          std::to_string(data.input_dim()) + ")");
    if (encoder.latent_dim != data.latent_dim)
      throw ConfigError("config: encoder.latent_dim must equal data.latent_dim");
    if (encoder.speaker_dim != data.speaker_dim)
      throw ConfigError(
          "config: encoder.speaker_dim must equal data.speaker_dim");
  }

  /// Model parameters are seeded by the global seed.
  std::uint64_t model_seed() const { return seed; }
};

}  // namespace tsrelab

#endif  // TSRELAB_CONFIG_HPP
