#pragma once

// Binary checkpoint format (all integers little-endian):
//
//   "OVIS-TOY\0"            9 bytes
//   u32 version             currently 1
//   u32 entry count
//   entries:                u32 name length, name bytes, u32 ndim,
//                           u64 extents[ndim], u64 payload byte offset
//   u64 payload byte size
//   payload                 float32 values, entries in directory order
//   u64 checksum            FNV-1a 64 over the payload bytes

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "ovis/tensor.hpp"

namespace ovis {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr std::string_view kCheckpointMagic{"OVIS-TOY\0", 9};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

struct Checkpoint {
  std::vector<CheckpointEntry> entries;

  const CheckpointEntry* find(const std::string& name) const {
    for (const auto& e : entries)
      if (e.name == name) return &e;
    return nullptr;
  }
};

inline std::uint64_t fnv1a64(const unsigned char* data, std::size_t n) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= data[i];
    h *= 0x100000001B3ULL;
  }
  return h;
}

namespace detail {

template <class I>
void put(std::string& out, I v) {
  char buf[sizeof(I)];
  std::memcpy(buf, &v, sizeof(I));
  out.append(buf, sizeof(I));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  template <class I>
  I get() {
    need(sizeof(I));
    I v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(I));
    pos_ += sizeof(I);
    return v;
  }

  std::string take(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  const char* here() const { return bytes_.data() + pos_; }
  void skip(std::size_t n) {
    need(n);
    pos_ += n;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw Error("checkpoint truncated");
  }
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ckpt) {
  std::string out(kCheckpointMagic);
  detail::put<std::uint32_t>(out, kCheckpointVersion);
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.entries.size()));
  std::uint64_t offset = 0;
  for (const auto& e : ckpt.entries) {
    if (numel(e.shape) != e.values.size()) throw ShapeError("checkpoint entry " + e.name + " has inconsistent shape");
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(e.name.size()));
    out += e.name;
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(e.shape.size()));
    for (auto d : e.shape) detail::put<std::uint64_t>(out, d);
    detail::put<std::uint64_t>(out, offset);
    offset += e.values.size() * sizeof(float);
  }
  detail::put<std::uint64_t>(out, offset);
  const std::size_t payload_begin = out.size();
  for (const auto& e : ckpt.entries) {
    out.append(reinterpret_cast<const char*>(e.values.data()), e.values.size() * sizeof(float));
  }
  detail::put<std::uint64_t>(out, fnv1a64(reinterpret_cast<const unsigned char*>(out.data() + payload_begin),
                                          out.size() - payload_begin));
  return out;
}

inline Checkpoint parse_checkpoint(const std::string& bytes) {
  detail::Reader in(bytes);
  if (in.take(kCheckpointMagic.size()) != kCheckpointMagic) throw Error("not a checkpoint (bad magic)");
  const auto version = in.get<std::uint32_t>();
  if (version != kCheckpointVersion) throw Error("unsupported checkpoint version " + std::to_string(version));
  const auto count = in.get<std::uint32_t>();
  struct Dir {
    std::string name;
    Shape shape;
    std::uint64_t offset;
  };
  std::vector<Dir> dir;
  for (std::uint32_t i = 0; i < count; ++i) {
    Dir d;
    d.name = in.take(in.get<std::uint32_t>());
    const auto ndim = in.get<std::uint32_t>();
    for (std::uint32_t k = 0; k < ndim; ++k) d.shape.push_back(in.get<std::uint64_t>());
    d.offset = in.get<std::uint64_t>();
    dir.push_back(std::move(d));
  }
  const auto payload_size = in.get<std::uint64_t>();
  const char* payload = in.here();
  in.skip(payload_size);
  const auto stored = in.get<std::uint64_t>();
  if (!in.done()) throw Error("checkpoint has trailing bytes");
  if (fnv1a64(reinterpret_cast<const unsigned char*>(payload), payload_size) != stored) {
    throw Error("checkpoint checksum mismatch; refusing to load");
  }
  Checkpoint ckpt;
  for (auto& d : dir) {
    const std::size_t n = numel(d.shape);
    if (d.offset + n * sizeof(float) > payload_size) throw Error("checkpoint entry " + d.name + " out of bounds");
    CheckpointEntry e{std::move(d.name), std::move(d.shape), std::vector<float>(n)};
    std::memcpy(e.values.data(), payload + d.offset, n * sizeof(float));
    ckpt.entries.push_back(std::move(e));
  }
  return ckpt;
}

inline std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed for " + path.string());
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  write_file_bytes(path, serialize_checkpoint(ckpt));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return parse_checkpoint(read_file_bytes(path));
}

// Snapshot of every parameter of a model exposing visit().
template <class M>
Checkpoint checkpoint_from(M& model) {
  Checkpoint ckpt;
  model.visit("", [&](const std::string& name, auto& t) {
    auto v = t.data();
    ckpt.entries.push_back({name, t.shape(), std::vector<float>(v.begin(), v.end())});
  });
  return ckpt;
}

// Copies values into the model; names and shapes must match exactly.
template <class M>
void load_into(M& model, const Checkpoint& ckpt) {
  std::size_t seen = 0;
  model.visit("", [&](const std::string& name, auto& t) {
    const auto* e = ckpt.find(name);
    if (!e) throw Error("checkpoint is missing parameter " + name);
    if (e->shape != t.shape()) {
      throw ShapeError("checkpoint parameter " + name + " has shape " + shape_str(e->shape) +
                       ", model expects " + shape_str(t.shape()));
    }
    auto dst = t.mutable_data();
    using V = typename std::remove_cvref_t<decltype(t)>::value_type;
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<V>(e->values[i]);
    ++seen;
  });
  if (seen != ckpt.entries.size()) throw Error("checkpoint has parameters the model does not know");
}

}  // namespace ovis
