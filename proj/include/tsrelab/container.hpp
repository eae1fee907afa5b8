// Copyright 2026 the tsrelab authors
// SPDX-License-Identifier: Apache-2.0
//
// Binary array container used for checkpoints and the corpus frame store.
//
// Layout:
//   bytes 0..7    magic "TSRELAB1"
//   bytes 8..15   header length H, unsigned 64-bit little-endian
//   H bytes       UTF-8 JSON header:
//                   { "meta": <free-form document>,
//                     "entries": [ {"path": str,
//                                   "shape": [ints],
//                                   "offset": bytes-into-data-section}, ... ] }
//   rest          concatenated IEEE-754 binary64 arrays, little-endian,
//                 in entry order, at the stated offsets
//
// Writes are byte-deterministic: JSON keys are serialized in sorted order and
// entry order is the caller's order. Round-trips are bit-exact.

#ifndef TSRELAB_CONTAINER_HPP
#define TSRELAB_CONTAINER_HPP

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "tsrelab/errors.hpp"
#include "tsrelab/tensor.hpp"

namespace tsrelab {

inline constexpr char kContainerMagic[8] = {'T', 'S', 'R', 'E',
                                            'L', 'A', 'B', '1'};

struct ContainerEntry {
  std::string path;
  Shape shape;
  std::vector<double> data;
};

namespace detail {

inline void put_u64le(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i)
    out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline std::uint64_t get_u64le(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

inline void put_f64le(std::string& out, double d) {
  put_u64le(out, std::bit_cast<std::uint64_t>(d));
}

inline double get_f64le(const unsigned char* p) {
  return std::bit_cast<double>(get_u64le(p));
}

}  // namespace detail

inline void write_container(const std::filesystem::path& file,
                            const nlohmann::json& meta,
                            const std::vector<ContainerEntry>& entries) {
  nlohmann::json header;
  header["meta"] = meta;
  header["entries"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& e : entries) {
    nlohmann::json je;
    je["path"] = e.path;
    je["shape"] = e.shape;
    je["offset"] = offset;
    header["entries"].push_back(je);
    if (shape_numel(e.shape) != e.data.size())
      throw UsageError("write_container: entry '" + e.path +
                       "' shape/data size mismatch");
    offset += 8 * e.data.size();
  }
  std::string hdr = header.dump();
  std::string out;
  out.reserve(16 + hdr.size() + offset);
  out.append(kContainerMagic, 8);
  detail::put_u64le(out, hdr.size());
  out += hdr;
  for (const auto& e : entries)
    for (double d : e.data) detail::put_f64le(out, d);
  std::ofstream f(file, std::ios::binary | std::ios::trunc);
  if (!f) throw ConfigError("write_container: cannot open " + file.string());
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw ConfigError("write_container: write failed on " + file.string());
}

class Container {
 public:
  nlohmann::json meta;
  std::vector<ContainerEntry> entries;

  const ContainerEntry& get(const std::string& path) const {
    auto it = index_.find(path);
    if (it == index_.end())
      throw ConfigError("Container: no entry '" + path + "'");
    return entries[it->second];
  }

  bool contains(const std::string& path) const {
    return index_.count(path) > 0;
  }

  Tensor tensor(const std::string& path) const {
    const ContainerEntry& e = get(path);
    return Tensor::from(e.shape, e.data);
  }

  static Container read(const std::filesystem::path& file) {
    std::ifstream f(file, std::ios::binary);
    if (!f) throw ConfigError("Container: cannot open " + file.string());
    std::vector<unsigned char> bytes{std::istreambuf_iterator<char>(f), {}};
    if (bytes.size() < 16 ||
        std::string(reinterpret_cast<const char*>(bytes.data()), 8) !=
            std::string(kContainerMagic, 8))
      throw ConfigError("Container: bad magic in " + file.string());
    std::uint64_t hlen = detail::get_u64le(bytes.data() + 8);
    if (16 + hlen > bytes.size())
      throw ConfigError("Container: truncated header in " + file.string());
    nlohmann::json header = nlohmann::json::parse(
        bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(hlen));
    Container c;
    c.meta = header.value("meta", nlohmann::json());
    const unsigned char* data = bytes.data() + 16 + hlen;
    std::size_t data_len = bytes.size() - 16 - hlen;
    for (const auto& je : header.at("entries")) {
      ContainerEntry e;
      e.path = je.at("path").get<std::string>();
      e.shape = je.at("shape").get<Shape>();
      std::uint64_t off = je.at("offset").get<std::uint64_t>();
      std::size_t n = shape_numel(e.shape);
      if (off + 8 * n > data_len)
        throw ConfigError("Container: entry '" + e.path + "' out of bounds");
      e.data.resize(n);
      for (std::size_t i = 0; i < n; ++i)
        e.data[i] = detail::get_f64le(data + off + 8 * i);
      c.index_[e.path] = c.entries.size();
      c.entries.push_back(std::move(e));
    }
    return c;
  }

 private:
  std::unordered_map<std::string, std::size_t> index_;
};

/// FNV-1a-64 hex digest of a canonical (sorted-key) JSON serialization.
/// Used to stamp configs into checkpoints and reports.
inline std::string json_digest(const nlohmann::json& j) {
  std::string s = j.dump();
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(h));
  return std::string(buf);
}

}  // namespace tsrelab

#endif  // TSRELAB_CONTAINER_HPP
