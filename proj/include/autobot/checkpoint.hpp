#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "autobot/bottleneck.hpp"
#include "autobot/error.hpp"
#include "autobot/graph.hpp"

namespace autobot {

// Binary layout, all integers little-endian:
//   "ABOT"  u32 version
//   u64 json length, canonical graph JSON (UTF-8)
//   u64 tensor count, then per tensor in name order:
//     u32 name length, name, u32 ndim, u64 dims[ndim], f32 payload

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Model graph plus named extra tensors (bottleneck.psi.<i> for an
/// instrumented model).
struct Checkpoint {
  Graph graph;
  std::map<std::string, Tensor> extra;

  /// Restores bottleneck parameters for `groups` from the extra tensors.
  Bottlenecks bottlenecks(const std::vector<PruningGroup>& groups) const {
    Bottlenecks b;
    b.groups = groups;
    for (const auto& grp : groups) {
      auto it = extra.find(Bottlenecks::psi_name(grp.index));
      if (it == extra.end()) {
        throw FormatError("checkpoint: missing tensor '" + Bottlenecks::psi_name(grp.index) + "'");
      }
      if (it->second.shape() != Shape{grp.channels}) {
        throw FormatError("checkpoint: '" + it->first + "' has shape " + shape_str(it->second.shape()));
      }
      b.psi.push_back(it->second);
    }
    return b;
  }
};

namespace detail {

class ByteWriter {
 public:
  template <typename U>
  void put(U v) {
    static_assert(std::is_integral_v<U>);
    for (std::size_t i = 0; i < sizeof(U); ++i) bytes.push_back(char((std::uint64_t(v) >> (8 * i)) & 0xFF));
  }
  void put_f32(float f) { put(std::bit_cast<std::uint32_t>(f)); }
  void put_bytes(const std::string& s) { bytes.insert(bytes.end(), s.begin(), s.end()); }

  std::string bytes;
};

class ByteReader {
 public:
  explicit ByteReader(const std::string& b) : bytes_(b) {}

  template <typename U>
  U get(const char* what) {
    need(sizeof(U), what);
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      v |= std::uint64_t(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(U);
    return static_cast<U>(v);
  }
  float get_f32(const char* what) { return std::bit_cast<float>(get<std::uint32_t>(what)); }
  std::string get_bytes(std::uint64_t n, const char* what) {
    need(n, what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const noexcept { return pos_; }
  bool done() const noexcept { return pos_ == bytes_.size(); }

  [[noreturn]] void fail(const std::string& why, std::size_t at) const {
    throw FormatError("checkpoint: " + why + " at byte offset " + std::to_string(at));
  }

 private:
  void need(std::uint64_t n, const char* what) const {
    if (n > bytes_.size() - pos_) fail(std::string("truncated while reading ") + what, pos_);
  }

  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& c) {
  std::map<std::string, const Tensor*> tensors;
  for (const auto& n : c.graph.nodes()) {
    for (const auto& [name, t] : n.params) tensors[n.id + "." + name] = &t;
  }
  for (const auto& [name, t] : c.extra) {
    if (!tensors.emplace(name, &t).second) throw ValueError("checkpoint: duplicate tensor '" + name + "'");
  }
  detail::ByteWriter w;
  w.put_bytes("ABOT");
  w.put(kCheckpointVersion);
  const std::string js = c.graph.spec_json().dump();
  w.put(std::uint64_t(js.size()));
  w.put_bytes(js);
  w.put(std::uint64_t(tensors.size()));
  for (const auto& [name, t] : tensors) {
    w.put(std::uint32_t(name.size()));
    w.put_bytes(name);
    w.put(std::uint32_t(t->rank()));
    for (auto d : t->shape()) w.put(std::uint64_t(d));
    for (float v : t->data()) w.put_f32(v);
  }
  return std::move(w.bytes);
}

inline Checkpoint deserialize_checkpoint(const std::string& bytes) {
  detail::ByteReader r(bytes);
  if (r.get_bytes(4, "magic") != "ABOT") r.fail("bad magic (expected \"ABOT\")", 0);
  const std::size_t version_at = r.pos();
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointVersion) r.fail("unsupported version " + std::to_string(version), version_at);
  const auto json_len = r.get<std::uint64_t>("graph json length");
  const std::size_t json_at = r.pos();
  const std::string js = r.get_bytes(json_len, "graph json");
  nlohmann::json spec;
  try {
    spec = nlohmann::json::parse(js);
  } catch (const nlohmann::json::exception& e) {
    r.fail(std::string("invalid graph json (") + e.what() + ")", json_at);
  }
  const auto count = r.get<std::uint64_t>("tensor count");
  std::map<std::string, Tensor> tensors;
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::size_t at = r.pos();
    const auto name_len = r.get<std::uint32_t>("tensor name length");
    std::string name = r.get_bytes(name_len, "tensor name");
    const auto ndim = r.get<std::uint32_t>("tensor rank");
    if (ndim == 0 || ndim > 8) r.fail("tensor '" + name + "' has invalid rank " + std::to_string(ndim), at);
    Shape shape;
    std::uint64_t numel = 1;
    for (std::uint32_t d = 0; d < ndim; ++d) {
      const auto dim = r.get<std::uint64_t>("tensor dims");
      if (dim == 0 || dim > (std::uint64_t(1) << 32)) r.fail("tensor '" + name + "' has invalid dim", at);
      shape.push_back(dim);
      numel *= dim;
      if (numel > bytes.size()) r.fail("tensor '" + name + "' is larger than the file", at);
    }
    std::vector<float> data(numel);
    for (auto& v : data) v = r.get_f32("tensor payload");
    if (!tensors.emplace(name, Tensor(shape, std::move(data))).second) {
      r.fail("duplicate tensor '" + name + "'", at);
    }
  }
  if (!r.done()) r.fail("trailing bytes", r.pos());
  Checkpoint c;
  c.graph = Graph::from_spec_json(spec, tensors);
  c.graph.validate();
  c.extra = std::move(tensors);
  return c;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& c) {
  const std::string bytes = serialize_checkpoint(c);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("checkpoint: cannot open '" + path + "' for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw Error("checkpoint: write to '" + path + "' failed");
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("checkpoint: cannot open '" + path + "'");
  const std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

}  // namespace autobot
