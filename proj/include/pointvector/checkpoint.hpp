#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "pointvector/params.hpp"

namespace pointvector {

// Binary layout (little-endian host order):
//   "PVCK" u32 version
//   u64 meta_len, meta bytes (free text, the CLI stores the model config JSON)
//   u64 count, then per entry:
//     u32 name_len, name, u8 trainable, u8 dtype_bytes (4|8), u32 ndim, u64 dims[ndim], raw data
inline constexpr char kCheckpointMagic[4] = {'P', 'V', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointEntry {
  std::string name;
  bool trainable = true;
  std::uint8_t dtype_bytes = 8;
  Shape shape;
  std::vector<unsigned char> raw;
};

struct Checkpoint {
  std::string meta;
  std::vector<CheckpointEntry> entries;
};

namespace detail {

template <class V>
void put(std::ostream& os, V v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <class V>
V get(std::istream& is, const std::string& path) {
  V v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(V))) throw CheckpointError(path + ": truncated checkpoint");
  return v;
}

inline std::string get_bytes(std::istream& is, std::uint64_t n, const std::string& path) {
  if (n > (1ull << 34)) throw CheckpointError(path + ": implausible field length");
  std::string s(n, '\0');
  if (n && !is.read(s.data(), static_cast<std::streamsize>(n))) throw CheckpointError(path + ": truncated checkpoint");
  return s;
}

}  // namespace detail

template <class T>
void save_checkpoint(const std::string& path, const ParamStore<T>& store, const std::string& meta = {}) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw CheckpointError("cannot open " + path + " for writing");
  os.write(kCheckpointMagic, 4);
  detail::put<std::uint32_t>(os, kCheckpointVersion);
  detail::put<std::uint64_t>(os, meta.size());
  os.write(meta.data(), static_cast<std::streamsize>(meta.size()));
  detail::put<std::uint64_t>(os, store.size());
  for (const auto& e : store) {
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(e.name.size()));
    os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    detail::put<std::uint8_t>(os, e.trainable ? 1 : 0);
    detail::put<std::uint8_t>(os, sizeof(T));
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(e.value.shape.size()));
    for (std::size_t d : e.value.shape) detail::put<std::uint64_t>(os, d);
    os.write(reinterpret_cast<const char*>(e.value.data.data()), static_cast<std::streamsize>(e.value.numel() * sizeof(T)));
  }
  if (!os) throw CheckpointError("write failed for " + path);
}

inline Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint " + path);
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kCheckpointMagic, 4) != 0)
    throw CheckpointError(path + ": not a checkpoint (bad magic)");
  const auto version = detail::get<std::uint32_t>(is, path);
  if (version != kCheckpointVersion)
    throw CheckpointError(path + ": unsupported checkpoint version " + std::to_string(version));
  Checkpoint ck;
  ck.meta = detail::get_bytes(is, detail::get<std::uint64_t>(is, path), path);
  const auto count = detail::get<std::uint64_t>(is, path);
  for (std::uint64_t i = 0; i < count; ++i) {
    CheckpointEntry e;
    e.name = detail::get_bytes(is, detail::get<std::uint32_t>(is, path), path);
    e.trainable = detail::get<std::uint8_t>(is, path) != 0;
    e.dtype_bytes = detail::get<std::uint8_t>(is, path);
    if (e.dtype_bytes != 4 && e.dtype_bytes != 8)
      throw CheckpointError(path + ": entry " + e.name + " has unknown dtype width " + std::to_string(e.dtype_bytes));
    const auto ndim = detail::get<std::uint32_t>(is, path);
    if (ndim > 16) throw CheckpointError(path + ": entry " + e.name + " has implausible rank");
    for (std::uint32_t d = 0; d < ndim; ++d) e.shape.push_back(detail::get<std::uint64_t>(is, path));
    const std::string raw = detail::get_bytes(is, numel(e.shape) * e.dtype_bytes, path);
    e.raw.assign(raw.begin(), raw.end());
    ck.entries.push_back(std::move(e));
  }
  if (is.peek() != std::char_traits<char>::eof()) throw CheckpointError(path + ": trailing bytes after last entry");
  return ck;
}

/// Copies checkpoint tensors into `store`. Names, flags and shapes must match
/// exactly; a different stored precision is converted.
template <class T>
void apply_checkpoint(const Checkpoint& ck, ParamStore<T>& store, const std::string& path = "checkpoint") {
  if (ck.entries.size() != store.size())
    throw CheckpointError(path + ": holds " + std::to_string(ck.entries.size()) + " tensors, model has " +
                          std::to_string(store.size()));
  for (const auto& e : ck.entries) {
    auto id = store.find(e.name);
    if (!id) throw CheckpointError(path + ": model has no tensor named " + e.name);
    auto& dst = store.entry(*id);
    if (dst.value.shape != e.shape)
      throw CheckpointError(path + ": shape mismatch for " + e.name + ": stored " + to_string(e.shape) + ", model " +
                            to_string(dst.value.shape));
    if (dst.trainable != e.trainable) throw CheckpointError(path + ": trainable flag mismatch for " + e.name);
    const std::size_t n = numel(e.shape);
    if (e.dtype_bytes == sizeof(T)) {
      std::memcpy(dst.value.data.data(), e.raw.data(), n * sizeof(T));
    } else if (e.dtype_bytes == 4) {
      std::vector<float> tmp(n);
      std::memcpy(tmp.data(), e.raw.data(), n * 4);
      for (std::size_t i = 0; i < n; ++i) dst.value.data[i] = static_cast<T>(tmp[i]);
    } else {
      std::vector<double> tmp(n);
      std::memcpy(tmp.data(), e.raw.data(), n * 8);
      for (std::size_t i = 0; i < n; ++i) dst.value.data[i] = static_cast<T>(tmp[i]);
    }
  }
}

template <class T>
std::string load_checkpoint(const std::string& path, ParamStore<T>& store) {
  Checkpoint ck = read_checkpoint(path);
  apply_checkpoint(ck, store, path);
  return ck.meta;
}

}  // namespace pointvector
