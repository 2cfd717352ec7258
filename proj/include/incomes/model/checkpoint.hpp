#pragma once

#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>

#include <json.hpp>

#include "incomes/gist/pool.hpp"
#include "incomes/model/state.hpp"

namespace incomes {

inline constexpr char kCheckpointMagic[4] = {'I', 'N', 'C', 'S'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Checkpoint: "INCS", u32 version, u32 length + UTF-8 JSON config document,
/// then records {u32 name length, name, u32 rank, u32 dims..., f32 data}
/// until end of file. All integers and floats little-endian.
template <class T>
void save_checkpoint(const ModelState<T>& state, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open checkpoint for writing: " + path.string());
  nlohmann::json doc{{"model", state.config.to_json()}, {"extended", state.extended()}};
  const std::string text = doc.dump();
  os.write(kCheckpointMagic, 4);
  io::write_le<std::uint32_t>(os, kCheckpointVersion);
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(text.size()));
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (auto& [name, p] : const_cast<ModelState<T>&>(state).named_parameters()) {
    io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(p->value.rank()));
    for (auto d : p->value.shape()) io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(d));
    for (T v : p->value.vec()) io::write_le<float>(os, static_cast<float>(v));
  }
  if (!os) throw FormatError("write failed: " + path.string());
}

template <class T>
ModelState<T> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open checkpoint: " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kCheckpointMagic, 4) != 0) throw FormatError("not a checkpoint (bad magic): " + path.string());
  const auto version = io::read_le<std::uint32_t>(is, "version");
  if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
  const auto len = io::read_le<std::uint32_t>(is, "config length");
  std::string text(len, '\0');
  is.read(text.data(), len);
  if (!is) throw FormatError("truncated checkpoint config");
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint config is not valid JSON: ") + e.what());
  }
  const ModelConfig cfg = ModelConfig::from_json(doc.at("model"));

  std::map<std::string, Tensor<T>> records;
  while (is.peek() != std::char_traits<char>::eof()) {
    const auto nlen = io::read_le<std::uint32_t>(is, "record name length");
    std::string name(nlen, '\0');
    is.read(name.data(), nlen);
    const auto rank = io::read_le<std::uint32_t>(is, "record rank");
    Shape shape;
    for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(io::read_le<std::uint32_t>(is, "record dim"));
    Tensor<T> t(shape);
    for (auto& v : t.vec()) v = static_cast<T>(io::read_le<float>(is, "record data"));
    records.emplace(std::move(name), std::move(t));
  }

  Rng dummy(0);
  ModelState<T> s = ModelState<T>::init(cfg, dummy);
  if (doc.value("extended", false)) s = extend_model(s, dummy);
  for (auto& [name, p] : s.named_parameters()) {
    auto it = records.find(name);
    if (it == records.end()) throw FormatError("checkpoint is missing tensor " + name);
    if (it->second.shape() != p->value.shape())
      throw FormatError("checkpoint tensor " + name + " has shape " + shape_str(it->second.shape()) + ", expected " +
                        shape_str(p->value.shape()));
    p->value = std::move(it->second);
    p->zero_grad();
    records.erase(it);
  }
  if (!records.empty()) throw FormatError("checkpoint has unexpected tensor " + records.begin()->first);
  return s;
}

}  // namespace incomes
