#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "incomes/core/error.hpp"
#include "incomes/core/tensor.hpp"
#include "incomes/model/config.hpp"

namespace incomes {

enum class EditKind { fact_triple, free_text, multi_hop_component };

inline const char* to_string(EditKind k) {
  switch (k) {
    case EditKind::fact_triple: return "fact_triple";
    case EditKind::free_text: return "free_text";
    case EditKind::multi_hop_component: return "multi_hop_component";
  }
  return "?";
}

struct EditRecord {
  std::int64_t edit_id = 0;
  std::vector<int> tokens;
  EditKind kind = EditKind::fact_triple;

  bool operator==(const EditRecord&) const = default;
};

/// Compressed form of one edit: for each cross layer, the key and value of
/// the gist position ([n_heads * head_dim] each, head-major).
template <class T>
struct GistEntry {
  std::int64_t edit_id = 0;
  std::size_t n_slots = 0;
  std::size_t width = 0;  // n_heads * head_dim
  std::vector<T> payload;  // [slot][key|value][width]

  GistEntry() = default;
  GistEntry(std::int64_t id, std::size_t slots, std::size_t w) : edit_id(id), n_slots(slots), width(w), payload(slots * 2 * w) {}

  std::span<T> key(std::size_t slot) { return {payload.data() + slot * 2 * width, width}; }
  std::span<T> value(std::size_t slot) { return {payload.data() + (slot * 2 + 1) * width, width}; }
  std::span<const T> key(std::size_t slot) const { return {payload.data() + slot * 2 * width, width}; }
  std::span<const T> value(std::size_t slot) const { return {payload.data() + (slot * 2 + 1) * width, width}; }

  std::size_t scalar_count() const { return payload.size(); }
  friend bool operator==(const GistEntry&, const GistEntry&) = default;
};

/// Ordered, id-unique collection of gist entries. The zero-gist is not
/// stored here; the model supplies it at attention time as entry 0.
template <class T>
class GistPool {
 public:
  GistPool() = default;

  static GistPool build(std::vector<GistEntry<T>> entries) {
    std::set<std::int64_t> ids;
    for (const auto& e : entries) {
      if (!ids.insert(e.edit_id).second) throw ContractError("build_pool: duplicate edit_id " + std::to_string(e.edit_id));
      if (!entries.empty() && (e.n_slots != entries[0].n_slots || e.width != entries[0].width))
        throw DimensionError("build_pool: entries disagree on layout");
    }
    GistPool p;
    p.entries_ = std::move(entries);
    return p;
  }

  const std::vector<GistEntry<T>>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  const GistEntry<T>& operator[](std::size_t i) const { return entries_[i]; }

  /// Pool of the given entries (by position), in the given order.
  GistPool subset(const std::vector<std::size_t>& idx) const {
    std::vector<GistEntry<T>> out;
    out.reserve(idx.size());
    for (auto i : idx) out.push_back(entries_.at(i));
    return build(std::move(out));
  }

  /// Stacked keys (or values) of one cross layer: [size, width].
  Tensor<T> stacked(std::size_t slot, bool values) const {
    const std::size_t w = entries_.empty() ? 0 : entries_[0].width;
    Tensor<T> t({entries_.size(), w});
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      auto src = values ? entries_[i].value(slot) : entries_[i].key(slot);
      std::copy(src.begin(), src.end(), t.data() + i * w);
    }
    return t;
  }

  /// Bytes of gist payload at single precision.
  std::size_t payload_bytes() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.scalar_count() * sizeof(float);
    return n;
  }

  friend bool operator==(const GistPool&, const GistPool&) = default;

 private:
  std::vector<GistEntry<T>> entries_;
};

/// Closed-form pool footprint: n * |cross_layers| * n_heads * 2 * head_dim * 4 bytes.
inline std::size_t pool_bytes_formula(std::size_t n_entries, const ModelConfig& cfg) {
  return n_entries * cfg.cross_layers.size() * cfg.n_heads * 2 * cfg.head_dim() * 4;
}

namespace io {

inline constexpr char kPoolMagic[4] = {'I', 'N', 'C', 'P'};
inline constexpr std::uint32_t kPoolVersion = 1;

template <class V>
void write_le(std::ostream& os, V v) {
  static_assert(std::endian::native == std::endian::little, "little-endian host required");
  os.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <class V>
V read_le(std::istream& is, const char* what) {
  V v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(V));
  if (!is) throw FormatError(std::string("truncated file while reading ") + what);
  return v;
}

}  // namespace io

/// Pool file: "INCP", u32 version, u64 config fingerprint, u64 entry count,
/// then per entry an i64 edit_id and the raw little-endian f32 payload.
template <class T>
void save_pool(const GistPool<T>& pool, const ModelConfig& cfg, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open pool file for writing: " + path.string());
  os.write(io::kPoolMagic, 4);
  io::write_le<std::uint32_t>(os, io::kPoolVersion);
  io::write_le<std::uint64_t>(os, cfg.fingerprint());
  io::write_le<std::uint64_t>(os, pool.size());
  const std::size_t expect = cfg.cross_layers.size() * 2 * cfg.d_model;
  for (const auto& e : pool.entries()) {
    if (e.payload.size() != expect) throw DimensionError("save_pool: entry payload does not match config");
    io::write_le<std::int64_t>(os, e.edit_id);
    for (T v : e.payload) io::write_le<float>(os, static_cast<float>(v));
  }
  if (!os) throw FormatError("write failed: " + path.string());
}

template <class T>
GistPool<T> load_pool(const std::filesystem::path& path, const ModelConfig& cfg) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open pool file: " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, io::kPoolMagic, 4) != 0) throw FormatError("not a pool file (bad magic): " + path.string());
  const auto version = io::read_le<std::uint32_t>(is, "version");
  if (version != io::kPoolVersion) throw FormatError("unsupported pool version " + std::to_string(version));
  const auto fp = io::read_le<std::uint64_t>(is, "fingerprint");
  if (fp != cfg.fingerprint()) throw ContractError("pool fingerprint does not match the model configuration");
  const auto count = io::read_le<std::uint64_t>(is, "entry count");
  const std::size_t slots = cfg.cross_layers.size(), w = cfg.d_model;
  std::vector<GistEntry<T>> entries;
  entries.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    GistEntry<T> e(io::read_le<std::int64_t>(is, "edit_id"), slots, w);
    for (auto& v : e.payload) v = static_cast<T>(io::read_le<float>(is, "payload"));
    entries.push_back(std::move(e));
  }
  return GistPool<T>::build(std::move(entries));
}

}  // namespace incomes
