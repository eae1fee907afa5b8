// Copyright 2026 the tsrelab authors
// SPDX-License-Identifier: Apache-2.0
//
// Named parameter registry. Paths are slash-separated ("speech/block0/attn/wq",
// "tsre/head/scc/s"); iteration order is insertion order and is part of the
// determinism contract (checkpoints, optimizer state and reductions all follow
// it). Initialization draws from a per-path random stream, so adding or
// removing one parameter never shifts another parameter's initial values.

#ifndef TSRELAB_PARAMS_HPP
#define TSRELAB_PARAMS_HPP

#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "tsrelab/ops.hpp"
#include "tsrelab/tensor.hpp"

namespace tsrelab {

inline Tensor param_randn(std::uint64_t seed, const std::string& path,
                          Shape shape, double stddev) {
  Rng rng(seed, "param/" + path);
  Tensor t = Tensor::randn(std::move(shape), rng, 0.0, stddev);
  t.set_requires_grad(true);
  return t;
}

inline Tensor param_full(Shape shape, double v) {
  Tensor t = Tensor::full(std::move(shape), v);
  t.set_requires_grad(true);
  return t;
}

inline Tensor param_zeros(Shape shape) { return param_full(std::move(shape), 0.0); }

class ParamStore {
 public:
  Tensor add(const std::string& path, Tensor t) {
    if (index_.count(path))
      throw UsageError("ParamStore: duplicate parameter path '" + path + "'");
    index_[path] = items_.size();
    items_.emplace_back(path, t);
    return t;
  }

  bool contains(const std::string& path) const { return index_.count(path) > 0; }

  Tensor& get(const std::string& path) {
    auto it = index_.find(path);
    if (it == index_.end())
      throw UsageError("ParamStore: unknown parameter path '" + path + "'");
    return items_[it->second].second;
  }

  const Tensor& get(const std::string& path) const {
    return const_cast<ParamStore*>(this)->get(path);
  }

  std::size_t size() const { return items_.size(); }

  auto begin() { return items_.begin(); }
  auto end() { return items_.end(); }
  auto begin() const { return items_.begin(); }
  auto end() const { return items_.end(); }

  void zero_grad() {
    for (auto& [path, t] : items_) t.zero_grad();
  }

  /// Total element count over paths starting with `prefix` ("" = all).
  std::size_t numel(const std::string& prefix = "") const {
    std::size_t n = 0;
    for (const auto& [path, t] : items_)
      if (path.rfind(prefix, 0) == 0) n += t.size();
    return n;
  }

  std::vector<std::string> paths() const {
    std::vector<std::string> out;
    out.reserve(items_.size());
    for (const auto& [path, t] : items_) out.push_back(path);
    return out;
  }

 private:
  std::vector<std::pair<std::string, Tensor>> items_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace tsrelab

#endif  // TSRELAB_PARAMS_HPP
