// Copyright 2026 the tsrelab authors
// SPDX-License-Identifier: Apache-2.0
//
// Speaker-conditioning adapters for the speech encoder.
//
// Three mechanisms, selected by TsreVariant:
//   SCL    — FiLM on LayerNorm: gamma' = w(u) * gamma + b(u), with w(u) == 1
//            and b(u) == 0 at initialization.
//   SCC    — residual depthwise convolution whose kernel is w_c + FC(u),
//            scaled by a scalar s initialized to zero.
//   SCC-B  — the same convolution inside a pointwise down/up bottleneck; the
//            up projection is zero-initialized.
// Every variant is therefore an exact identity right after initialization:
// attaching it to a trained encoder does not change the encoder's outputs
// until the adapter itself is trained.

#ifndef TSRELAB_TSRE_HPP
#define TSRELAB_TSRE_HPP

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "tsrelab/model_config.hpp"
#include "tsrelab/ops.hpp"
#include "tsrelab/params.hpp"

namespace tsrelab {

struct FilmSite {
  Tensor w_w, b_w, w_b, b_b;  // u -> per-channel scale and shift of gamma
};

struct ConvSite {
  Tensor w_c;          // [C x k] base depthwise kernel
  Tensor mod_w, mod_b; // u -> kernel delta, reshaped to [C x k]
  Tensor s;            // scalar residual scale, zero at init
};

struct BottleneckSite {
  Tensor down_w, down_b;  // pointwise D -> C_b
  Tensor w_c, mod_w, mod_b, s;
  Tensor up_w, up_b;      // pointwise C_b -> D, zero at init
};

struct TsreBlockAdapters {
  std::optional<FilmSite> film1, film2;
  std::optional<ConvSite> conv1, conv2;
  std::optional<BottleneckSite> bconv;
};

/// gamma' = (u W_w + b_w) * gamma + (u W_b + b_b), elementwise over channels.
inline Tensor film_gamma(const FilmSite& f, const Tensor& u,
                         const Tensor& gamma) {
  Tensor w_u = add(vecmat(u, f.w_w), f.b_w);
  Tensor b_u = add(vecmat(u, f.w_b), f.b_b);
  return add(mul(w_u, gamma), b_u);
}

/// Speaker-conditional LayerNorm.
inline Tensor scl_forward(const Tensor& h, const Tensor& u, const FilmSite& f,
                          const Tensor& gamma, const Tensor& beta,
                          double eps) {
  return layer_norm(h, film_gamma(f, u, gamma), beta, eps);
}

namespace detail {

inline Tensor conditioned_kernel(const Tensor& w_c, const Tensor& mod_w,
                                 const Tensor& mod_b, const Tensor& u,
                                 std::size_t channels, std::size_t k) {
  Tensor delta = reshape(add(vecmat(u, mod_w), mod_b), {channels, k});
  return reshape(add(w_c, delta), {channels, 1, k});
}

}  // namespace detail

/// Speaker-conditional convolution: h + s * DepthwiseConv(h, w_c + FC(u)).
inline Tensor scc_forward(const Tensor& h, const Tensor& u, const ConvSite& c) {
  std::size_t channels = h.shape()[1];
  std::size_t k = c.w_c.shape()[1];
  Tensor kernel =
      detail::conditioned_kernel(c.w_c, c.mod_w, c.mod_b, u, channels, k);
  return add(h, scale_by(conv1d_grouped(h, kernel, channels), c.s));
}

/// Speaker-conditional bottleneck convolution:
///   hbar = DownConv(h); hmid = hbar + s * DepthwiseConv(hbar, w_c + FC(u));
///   out  = h + UpConv(hmid).
inline Tensor sccb_forward(const Tensor& h, const Tensor& u,
                           const BottleneckSite& b) {
  std::size_t cb = b.down_w.shape()[1];
  std::size_t k = b.w_c.shape()[1];
  Tensor hbar = add_rowvec(matmul(h, b.down_w), b.down_b);
  Tensor kernel =
      detail::conditioned_kernel(b.w_c, b.mod_w, b.mod_b, u, cb, k);
  Tensor hmid = add(hbar, scale_by(conv1d_grouped(hbar, kernel, cb), b.s));
  return add(h, add_rowvec(matmul(hmid, b.up_w), b.up_b));
}

/// Adapter parameters for the configured insertion blocks, registered into
/// the host model's ParamStore under "tsre/".
class TsreModule {
 public:
  TsreModule(const EncoderConfig& enc, TsreConfig cfg, std::uint64_t seed,
             ParamStore& store, bool init_values = true)
      : cfg_(std::move(cfg)) {
    enc.validate();
    cfg_.validate(enc);
    std::size_t D = enc.hidden_dim;
    std::size_t udim = enc.speaker_dim;
    std::size_t k = cfg_.effective_kernel();
    for (std::size_t site : cfg_.effective_sites(enc.num_layers)) {
      std::string tag = site == enc.num_layers
                            ? "tsre/head/"
                            : "tsre/block" + std::to_string(site) + "/";
      TsreBlockAdapters a;
      auto zeros = [&](const std::string& p, Shape s) {
        return store.add(p, param_zeros(std::move(s)));
      };
      auto ones = [&](const std::string& p, Shape s) {
        return store.add(p, param_full(std::move(s), 1.0));
      };
      auto randn = [&](const std::string& p, Shape s, double stddev) {
        return store.add(p, init_values ? param_randn(seed, p, std::move(s), stddev)
                                        : param_zeros(std::move(s)));
      };
      auto make_film = [&](const std::string& pre) {
        FilmSite f;
        f.w_w = zeros(pre + "w_w", {udim, D});
        f.b_w = ones(pre + "b_w", {D});
        f.w_b = zeros(pre + "w_b", {udim, D});
        f.b_b = zeros(pre + "b_b", {D});
        film_bias_numel_ += 2 * D;
        return f;
      };
      auto make_conv = [&](const std::string& pre, std::size_t channels) {
        ConvSite c;
        c.w_c = randn(pre + "w_c", {channels, k}, 1.0 / std::sqrt(double(k)));
        c.mod_w = randn(pre + "mod_w", {udim, channels * k},
                        0.1 / std::sqrt(double(udim)));
        c.mod_b = zeros(pre + "mod_b", {channels * k});
        c.s = zeros(pre + "s", Shape{});
        return c;
      };
      switch (cfg_.variant) {
        case TsreVariant::SclOnly:
          a.film1 = make_film(tag + "ln1/");
          a.film2 = make_film(tag + "ln2/");
          break;
        case TsreVariant::Scc:
          a.conv1 = make_conv(tag + "conv1/", D);
          a.conv2 = make_conv(tag + "conv2/", D);
          break;
        case TsreVariant::SccB3:
        case TsreVariant::SccB5: {
          std::size_t cb = cfg_.effective_bottleneck(D);
          BottleneckSite b;
          b.down_w = randn(tag + "bconv/down_w", {D, cb},
                           1.0 / std::sqrt(double(D)));
          b.down_b = zeros(tag + "bconv/down_b", {cb});
          ConvSite inner = make_conv(tag + "bconv/", cb);
          b.w_c = inner.w_c;
          b.mod_w = inner.mod_w;
          b.mod_b = inner.mod_b;
          b.s = inner.s;
          b.up_w = zeros(tag + "bconv/up_w", {cb, D});
          b.up_b = zeros(tag + "bconv/up_b", {D});
          a.bconv = b;
          break;
        }
      }
      blocks_[site] = std::move(a);
    }
  }

  const TsreConfig& config() const { return cfg_; }

  /// Adapters for a block, or nullptr when the block has none.
  const TsreBlockAdapters* adapters_for(std::size_t block_index) const {
    auto it = blocks_.find(block_index);
    return it == blocks_.end() ? nullptr : &it->second;
  }

  /// Element count of the FiLM bias vectors (excluded from the published
  /// large-model accounting).
  std::size_t film_bias_numel() const { return film_bias_numel_; }

 private:
  TsreConfig cfg_;
  std::map<std::size_t, TsreBlockAdapters> blocks_;
  std::size_t film_bias_numel_ = 0;
};

/// Trainable-parameter count of the adapter set alone (host encoder
/// excluded). With paper_scale the large-model dimensions are used
/// (hidden 1024, speaker 256, bottleneck 512), the adapter is counted in a
/// single insertion block, and FiLM bias vectors are left out.
inline std::size_t count_tsre_params(EncoderConfig enc, TsreConfig cfg,
                                     bool paper_scale) {
  if (paper_scale) {
    enc = enc.paper_scale();
    cfg.insertion_sites = {0};
    cfg.bottleneck_dim = 0;  // hidden/2 = 512
  }
  ParamStore scratch;
  TsreModule module(enc, cfg, 0, scratch, /*init_values=*/false);
  std::size_t n = scratch.numel("tsre/");
  if (paper_scale) n -= module.film_bias_numel();
  return n;
}

}  // namespace tsrelab

#endif  // TSRELAB_TSRE_HPP
