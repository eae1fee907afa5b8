// Copyright 2026 the tsrelab authors
// SPDX-License-Identifier: Apache-2.0

#ifndef TSRELAB_MODEL_CONFIG_HPP
#define TSRELAB_MODEL_CONFIG_HPP

#include <cstddef>
#include <string>
#include <vector>

#include <json.hpp>

#include "tsrelab/errors.hpp"

namespace tsrelab {

/// Shape of the speech/image retrieval model. Desk defaults are small on
/// purpose; paper_scale() exists for parameter accounting only.
struct EncoderConfig {
  std::size_t num_layers = 2;   // transformer blocks below the weighted sum
  std::size_t hidden_dim = 64;  // D
  std::size_t num_heads = 4;
  std::size_t ff_dim = 128;
  std::size_t embed_dim = 32;   // E, shared retrieval space
  std::size_t speaker_dim = 16; // enrollment embedding u
  std::size_t input_dim = 32;   // frame feature size
  std::size_t latent_dim = 24;  // caption latent fed to the image encoder

  void validate() const {
    if (num_layers < 1 || hidden_dim < 1 || num_heads < 1 || ff_dim < 1 ||
        embed_dim < 1 || speaker_dim < 1 || input_dim < 1 || latent_dim < 1)
      throw ConfigError("EncoderConfig: all dimensions must be >= 1");
    if (hidden_dim % num_heads != 0)
      throw ConfigError("EncoderConfig: hidden_dim must be divisible by num_heads");
  }

  /// Large-model dimensions used to reproduce published adapter parameter
  /// counts. Only hidden_dim and speaker_dim matter for the accounting.
  EncoderConfig paper_scale() const {
    EncoderConfig c = *this;
    c.hidden_dim = 1024;
    c.speaker_dim = 256;
    return c;
  }
};

inline void to_json(nlohmann::json& j, const EncoderConfig& c) {
  j = nlohmann::json{{"num_layers", c.num_layers},
                     {"hidden_dim", c.hidden_dim},
                     {"num_heads", c.num_heads},
                     {"ff_dim", c.ff_dim},
                     {"embed_dim", c.embed_dim},
                     {"speaker_dim", c.speaker_dim},
                     {"input_dim", c.input_dim},
                     {"latent_dim", c.latent_dim}};
}

inline void from_json(const nlohmann::json& j, EncoderConfig& c) {
  j.at("num_layers").get_to(c.num_layers);
  j.at("hidden_dim").get_to(c.hidden_dim);
  j.at("num_heads").get_to(c.num_heads);
  j.at("ff_dim").get_to(c.ff_dim);
  j.at("embed_dim").get_to(c.embed_dim);
  j.at("speaker_dim").get_to(c.speaker_dim);
  j.at("input_dim").get_to(c.input_dim);
  j.at("latent_dim").get_to(c.latent_dim);
}

enum class TsreVariant { SclOnly, Scc, SccB5, SccB3 };

inline std::string to_string(TsreVariant v) {
  switch (v) {
    case TsreVariant::SclOnly: return "scl";
    case TsreVariant::Scc: return "scc";
    case TsreVariant::SccB5: return "scc-b5";
    case TsreVariant::SccB3: return "scc-b3";
  }
  return "?";
}

inline TsreVariant tsre_variant_from_string(const std::string& s) {
  if (s == "scl") return TsreVariant::SclOnly;
  if (s == "scc") return TsreVariant::Scc;
  if (s == "scc-b5") return TsreVariant::SccB5;
  if (s == "scc-b3") return TsreVariant::SccB3;
  throw ConfigError("unknown TSRE variant '" + s +
                    "' (expected scl|scc|scc-b5|scc-b3)");
}

/// Speaker-adapter configuration.
///
/// Insertion sites are block indices; 0..num_layers-1 are the stack blocks
/// and num_layers denotes the head block. Empty means "all blocks + head".
/// Per inserted block:
///   scl     — FiLM conditioning on both LayerNorms;
///   scc     — a conditioned depthwise convolution ahead of each LayerNorm;
///   scc-b*  — one conditioned bottleneck convolution ahead of the first
///             LayerNorm (the down/up projections make it heavier, so it is
///             placed once).
struct TsreConfig {
  TsreVariant variant = TsreVariant::SccB3;
  std::size_t kernel_size = 0;     // 0 = variant default (scc:5, b5:5, b3:3)
  std::size_t bottleneck_dim = 0;  // 0 = hidden_dim / 2
  std::vector<std::size_t> insertion_sites;  // empty = all

  std::size_t effective_kernel() const {
    if (kernel_size != 0) return kernel_size;
    switch (variant) {
      case TsreVariant::SccB3: return 3;
      case TsreVariant::SccB5: return 5;
      default: return 5;
    }
  }

  std::size_t effective_bottleneck(std::size_t hidden_dim) const {
    return bottleneck_dim != 0 ? bottleneck_dim : hidden_dim / 2;
  }

  std::vector<std::size_t> effective_sites(std::size_t num_layers) const {
    if (!insertion_sites.empty()) return insertion_sites;
    std::vector<std::size_t> all(num_layers + 1);
    for (std::size_t i = 0; i <= num_layers; ++i) all[i] = i;
    return all;
  }

  void validate(const EncoderConfig& enc) const {
    std::size_t k = effective_kernel();
    if (k % 2 == 0) throw ConfigError("TsreConfig: kernel size must be odd");
    if (variant == TsreVariant::SccB3 && k != 3)
      throw ConfigError("TsreConfig: scc-b3 requires kernel size 3");
    if (variant == TsreVariant::SccB5 && k != 5)
      throw ConfigError("TsreConfig: scc-b5 requires kernel size 5");
    if (variant == TsreVariant::SccB3 || variant == TsreVariant::SccB5) {
      std::size_t cb = effective_bottleneck(enc.hidden_dim);
      if (cb < 1 || cb > enc.hidden_dim)
        throw ConfigError("TsreConfig: bottleneck dim out of range");
    }
    for (std::size_t s : insertion_sites)
      if (s > enc.num_layers)
        throw ConfigError("TsreConfig: insertion site out of range");
  }
};

inline void to_json(nlohmann::json& j, const TsreConfig& c) {
  j = nlohmann::json{{"variant", to_string(c.variant)},
                     {"kernel_size", c.kernel_size},
                     {"bottleneck_dim", c.bottleneck_dim},
                     {"insertion_sites", c.insertion_sites}};
}

inline void from_json(const nlohmann::json& j, TsreConfig& c) {
  c.variant = tsre_variant_from_string(j.at("variant").get<std::string>());
  j.at("kernel_size").get_to(c.kernel_size);
  j.at("bottleneck_dim").get_to(c.bottleneck_dim);
  j.at("insertion_sites").get_to(c.insertion_sites);
}

}  // namespace tsrelab

#endif  // TSRELAB_MODEL_CONFIG_HPP
