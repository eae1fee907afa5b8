// Copyright 2026 the tsrelab authors
// SPDX-License-Identifier: Apache-2.0
//
// Retrieval model: a small trainable transformer speech encoder and a frozen
// linear image encoder sharing one embedding space.
//
// Speech path: input projection + sinusoidal positions, a stack of pre-norm
// transformer blocks, a learnable softmax-weighted sum over the (num_layers+1)
// intermediate sequences, one more transformer block on the aggregate ("head"),
// temporal mean-pool, output projection, L2 normalization. Speaker adapters
// (tsre.hpp) may hook the LayerNorms and block inputs of any block including
// the head.

#ifndef TSRELAB_ENCODER_HPP
#define TSRELAB_ENCODER_HPP

#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "tsrelab/model_config.hpp"
#include "tsrelab/ops.hpp"
#include "tsrelab/params.hpp"
#include "tsrelab/tsre.hpp"

namespace tsrelab {

inline constexpr double kLayerNormEps = 1e-5;

/// Fixed sinusoidal position table, shape [T x D], not trainable.
inline Tensor position_encoding(std::size_t T, std::size_t D) {
  Tensor p = Tensor::zeros({T, D});
  std::span<double> v = p.mutable_value();
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t c = 0; c < D; ++c) {
      double omega = std::pow(10000.0, -double(c - c % 2) / double(D));
      v[t * D + c] = c % 2 == 0 ? std::sin(double(t) * omega)
                                : std::cos(double(t) * omega);
    }
  return p;
}

/// Sum_l softmax(alpha)_l * layers[l]; all layers share one shape and
/// alpha has one weight per layer.
inline Tensor weighted_layer_sum(const std::vector<Tensor>& layers,
                                 const Tensor& alpha) {
  if (layers.empty()) throw ShapeError("weighted_layer_sum: no layers");
  if (alpha.rank() != 1 || alpha.size() != layers.size())
    throw ShapeError("weighted_layer_sum: alpha length " +
                     std::to_string(alpha.size()) + " != " +
                     std::to_string(layers.size()) + " layers");
  for (const auto& l : layers)
    if (l.shape() != layers[0].shape())
      throw ShapeError("weighted_layer_sum: layer shapes disagree");
  Tensor w = softmax(alpha);
  Tensor out = scale_by(layers[0], select(w, 0));
  for (std::size_t l = 1; l < layers.size(); ++l)
    out = add(out, scale_by(layers[l], select(w, l)));
  return out;
}

namespace detail {

struct BlockParams {
  Tensor ln1_g, ln1_b, ln2_g, ln2_b;
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor ff_w1, ff_b1, ff_w2, ff_b2;
};

}  // namespace detail

class RetrievalModel {
 public:
  RetrievalModel(EncoderConfig cfg, std::uint64_t seed)
      : cfg_(std::move(cfg)), seed_(seed) {
    cfg_.validate();
    std::size_t D = cfg_.hidden_dim;
    in_w_ = randn("speech/input_proj/w", {cfg_.input_dim, D},
                  1.0 / std::sqrt(double(cfg_.input_dim)));
    in_b_ = store_.add("speech/input_proj/b", param_zeros({D}));
    for (std::size_t i = 0; i < cfg_.num_layers; ++i)
      blocks_.push_back(make_block("speech/block" + std::to_string(i) + "/"));
    alpha_ = store_.add("speech/alpha", param_zeros({cfg_.num_layers + 1}));
    head_ = make_block("speech/head/");
    out_w_ = randn("speech/out_proj/w", {D, cfg_.embed_dim},
                   1.0 / std::sqrt(double(D)));
    out_b_ = store_.add("speech/out_proj/b", param_zeros({cfg_.embed_dim}));
    img_proj_ = store_.add(
        "image/proj",
        param_randn(seed_, "image/proj", {cfg_.latent_dim, cfg_.embed_dim},
                    1.0 / std::sqrt(double(cfg_.latent_dim)))
            .set_requires_grad(false));
  }

  const EncoderConfig& config() const { return cfg_; }
  std::uint64_t seed() const { return seed_; }
  ParamStore& params() { return store_; }
  const ParamStore& params() const { return store_; }

  /// Registers speaker-adapter parameters. Call at most once.
  void attach_tsre(TsreConfig tcfg) {
    if (tsre_) throw UsageError("attach_tsre: adapter already attached");
    tsre_.emplace(cfg_, std::move(tcfg), seed_, store_);
  }

  bool has_tsre() const { return tsre_.has_value(); }
  const TsreModule* tsre() const { return tsre_ ? &*tsre_ : nullptr; }

  /// Frozen linear image tower: latent -> unit-norm embedding.
  Tensor encode_image(const Tensor& latent) const {
    if (latent.shape() != Shape{cfg_.latent_dim})
      throw ShapeError("encode_image: latent must be [" +
                       std::to_string(cfg_.latent_dim) + "], got " +
                       shape_str(latent.shape()));
    return l2_normalize(vecmat(latent, img_proj_));
  }

  /// Speech tower: frames [T x input_dim] -> unit-norm embedding.
  /// A speaker embedding is required exactly when an adapter is attached.
  Tensor encode_speech(const Tensor& frames,
                       const Tensor* speaker = nullptr) const {
    const Shape& s = frames.shape();
    if (s.size() != 2 || s[1] != cfg_.input_dim || s[0] < 1)
      throw ShapeError("encode_speech: frames must be [T x " +
                       std::to_string(cfg_.input_dim) + "] with T >= 1, got " +
                       shape_str(s));
    if (tsre_ && speaker == nullptr)
      throw ConfigError(
          "encode_speech: adapter attached but no speaker embedding given");
    if (!tsre_ && speaker != nullptr)
      throw ConfigError(
          "encode_speech: speaker embedding given but no adapter attached");
    if (speaker && speaker->shape() != Shape{cfg_.speaker_dim})
      throw ShapeError("encode_speech: speaker embedding must be [" +
                       std::to_string(cfg_.speaker_dim) + "], got " +
                       shape_str(speaker->shape()));
    Tensor h = add(add_rowvec(matmul(frames, in_w_), in_b_),
                   position_encoding(s[0], cfg_.hidden_dim));
    std::vector<Tensor> outs{h};
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      h = run_block(blocks_[i], adapters(i), speaker, h);
      outs.push_back(h);
    }
    Tensor agg = weighted_layer_sum(outs, alpha_);
    Tensor top = run_block(head_, adapters(cfg_.num_layers), speaker, agg);
    return l2_normalize(add(vecmat(mean_rows(top), out_w_), out_b_));
  }

 private:
  Tensor randn(const std::string& path, Shape shape, double stddev) {
    return store_.add(path, param_randn(seed_, path, std::move(shape), stddev));
  }

  detail::BlockParams make_block(const std::string& pre) {
    std::size_t D = cfg_.hidden_dim;
    double wsd = 1.0 / std::sqrt(double(D));
    detail::BlockParams p;
    p.ln1_g = store_.add(pre + "ln1/gamma", param_full({D}, 1.0));
    p.ln1_b = store_.add(pre + "ln1/beta", param_zeros({D}));
    p.wq = randn(pre + "attn/wq", {D, D}, wsd);
    p.bq = store_.add(pre + "attn/bq", param_zeros({D}));
    p.wk = randn(pre + "attn/wk", {D, D}, wsd);
    p.bk = store_.add(pre + "attn/bk", param_zeros({D}));
    p.wv = randn(pre + "attn/wv", {D, D}, wsd);
    p.bv = store_.add(pre + "attn/bv", param_zeros({D}));
    p.wo = randn(pre + "attn/wo", {D, D}, wsd);
    p.bo = store_.add(pre + "attn/bo", param_zeros({D}));
    p.ln2_g = store_.add(pre + "ln2/gamma", param_full({D}, 1.0));
    p.ln2_b = store_.add(pre + "ln2/beta", param_zeros({D}));
    p.ff_w1 = randn(pre + "ff/w1", {D, cfg_.ff_dim}, wsd);
    p.ff_b1 = store_.add(pre + "ff/b1", param_zeros({cfg_.ff_dim}));
    p.ff_w2 = randn(pre + "ff/w2", {cfg_.ff_dim, D},
                    1.0 / std::sqrt(double(cfg_.ff_dim)));
    p.ff_b2 = store_.add(pre + "ff/b2", param_zeros({D}));
    return p;
  }

  const TsreBlockAdapters* adapters(std::size_t site) const {
    return tsre_ ? tsre_->adapters_for(site) : nullptr;
  }

  Tensor attention(const detail::BlockParams& p, const Tensor& x) const {
    std::size_t D = cfg_.hidden_dim;
    std::size_t dh = D / cfg_.num_heads;
    Tensor q = add_rowvec(matmul(x, p.wq), p.bq);
    Tensor k = add_rowvec(matmul(x, p.wk), p.bk);
    Tensor v = add_rowvec(matmul(x, p.wv), p.bv);
    std::vector<Tensor> heads;
    heads.reserve(cfg_.num_heads);
    for (std::size_t hd = 0; hd < cfg_.num_heads; ++hd) {
      std::size_t c0 = hd * dh, c1 = c0 + dh;
      Tensor scores = scale(
          matmul(slice_cols(q, c0, c1), transpose(slice_cols(k, c0, c1))),
          1.0 / std::sqrt(double(dh)));
      heads.push_back(matmul(softmax(scores), slice_cols(v, c0, c1)));
    }
    return add_rowvec(matmul(concat_cols(heads), p.wo), p.bo);
  }

  Tensor run_block(const detail::BlockParams& p, const TsreBlockAdapters* ad,
                   const Tensor* u, Tensor h) const {
    if (ad && ad->conv1) h = scc_forward(h, *u, *ad->conv1);
    if (ad && ad->bconv) h = sccb_forward(h, *u, *ad->bconv);
    Tensor n1 = ad && ad->film1
                    ? scl_forward(h, *u, *ad->film1, p.ln1_g, p.ln1_b,
                                  kLayerNormEps)
                    : layer_norm(h, p.ln1_g, p.ln1_b, kLayerNormEps);
    Tensor mid = add(h, attention(p, n1));
    if (ad && ad->conv2) mid = scc_forward(mid, *u, *ad->conv2);
    Tensor n2 = ad && ad->film2
                    ? scl_forward(mid, *u, *ad->film2, p.ln2_g, p.ln2_b,
                                  kLayerNormEps)
                    : layer_norm(mid, p.ln2_g, p.ln2_b, kLayerNormEps);
    Tensor ff = add_rowvec(
        matmul(gelu(add_rowvec(matmul(n2, p.ff_w1), p.ff_b1)), p.ff_w2),
        p.ff_b2);
    return add(mid, ff);
  }

  EncoderConfig cfg_;
  std::uint64_t seed_;
  ParamStore store_;
  Tensor in_w_, in_b_, alpha_, out_w_, out_b_, img_proj_;
  std::vector<detail::BlockParams> blocks_;
  detail::BlockParams head_;
  std::optional<TsreModule> tsre_;
};

}  // namespace tsrelab

#endif  // TSRELAB_ENCODER_HPP
