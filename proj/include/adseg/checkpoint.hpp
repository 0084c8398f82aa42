#pragma once

// Binary checkpoint layout (all integers little-endian u32):
//
//   "ADSEG" | version | flags | descriptor_len | descriptor JSON
//   | count | count x tensor record
//   [ count | count x tensor record ]        -- importance block, flags bit 0
//
// tensor record: name_len | UTF-8 name | rank | rank x extent | f32 data (LE)

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "adseg/named_tensors.hpp"
#include "adseg/segnet.hpp"

namespace adseg {

inline constexpr char kCheckpointMagic[5] = {'A', 'D', 'S', 'E', 'G'};
inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::uint32_t kFlagHasImportance = 1u;

struct Checkpoint {
  ParamSet params;
  std::optional<NamedTensors> importance;
};

inline nlohmann::json to_json(const ArchDescriptor& d) {
  return {{"in_channels", d.in_channels}, {"widths", d.widths}, {"height", d.height}, {"width", d.width}};
}

inline ArchDescriptor arch_from_json(const nlohmann::json& j) {
  ArchDescriptor d;
  try {
    d.in_channels = j.at("in_channels").get<std::size_t>();
    d.widths = j.at("widths").get<std::vector<std::size_t>>();
    d.height = j.at("height").get<std::size_t>();
    d.width = j.at("width").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad architecture descriptor: ") + e.what());
  }
  validate(d);
  return d;
}

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw IoError("checkpoint truncated");
  return static_cast<std::uint32_t>(b[0]) | static_cast<std::uint32_t>(b[1]) << 8 |
         static_cast<std::uint32_t>(b[2]) << 16 | static_cast<std::uint32_t>(b[3]) << 24;
}

inline void put_string(std::ostream& os, const std::string& s) {
  put_u32(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_string(std::istream& is, std::uint32_t limit = 1u << 24) {
  const std::uint32_t n = get_u32(is);
  if (n > limit) throw IoError("checkpoint string length out of range");
  std::string s(n, '\0');
  if (n && !is.read(s.data(), n)) throw IoError("checkpoint truncated");
  return s;
}

inline void put_block(std::ostream& os, const NamedTensors& block) {
  put_u32(os, static_cast<std::uint32_t>(block.size()));
  for (const auto& [name, t] : block) {
    put_string(os, name);
    put_u32(os, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t e : t.shape()) put_u32(os, static_cast<std::uint32_t>(e));
    for (Real v : t.data()) put_u32(os, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  }
}

inline NamedTensors get_block(std::istream& is) {
  NamedTensors block;
  const std::uint32_t count = get_u32(is);
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = get_string(is, 4096);
    const std::uint32_t rank = get_u32(is);
    if (rank > 8) throw IoError("checkpoint tensor rank out of range");
    Shape shape(rank);
    for (auto& e : shape) e = get_u32(is);
    Tensor t(shape);
    for (auto& v : t.data()) v = static_cast<Real>(std::bit_cast<float>(get_u32(is)));
    block.add(std::move(name), std::move(t));
  }
  return block;
}

}  // namespace detail

/// Values are stored as 32-bit floats, so a save/load cycle rounds once;
/// repeating it is then bit-exact.
inline void write_checkpoint(std::ostream& os, const Checkpoint& ckpt) {
  os.write(kCheckpointMagic, sizeof kCheckpointMagic);
  detail::put_u32(os, kCheckpointVersion);
  detail::put_u32(os, ckpt.importance ? kFlagHasImportance : 0u);
  detail::put_string(os, to_json(ckpt.params.arch).dump());
  detail::put_block(os, ckpt.params.values);
  if (ckpt.importance) {
    require_same_layout(ckpt.params.values, *ckpt.importance, "write_checkpoint");
    detail::put_block(os, *ckpt.importance);
  }
  if (!os) throw IoError("failed writing checkpoint");
}

inline Checkpoint read_checkpoint(std::istream& is) {
  char magic[5];
  if (!is.read(magic, 5) || std::memcmp(magic, kCheckpointMagic, 5) != 0) throw IoError("not an ADSEG checkpoint");
  const std::uint32_t version = detail::get_u32(is);
  if (version != kCheckpointVersion) throw IoError("unsupported checkpoint version " + std::to_string(version));
  const std::uint32_t flags = detail::get_u32(is);
  Checkpoint ckpt;
  try {
    ckpt.params.arch = arch_from_json(nlohmann::json::parse(detail::get_string(is)));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("bad descriptor JSON: ") + e.what());
  }
  ckpt.params.values = detail::get_block(is);
  const ParamSet reference = build_model(ckpt.params.arch, 0);
  require_same_layout(reference.values, ckpt.params.values, "read_checkpoint");
  if (flags & kFlagHasImportance) {
    ckpt.importance = detail::get_block(is);
    require_same_layout(ckpt.params.values, *ckpt.importance, "read_checkpoint importance");
  }
  return ckpt;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path + " for writing");
  write_checkpoint(os, ckpt);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint " + path);
  return read_checkpoint(is);
}

/// Rounds every value to what the checkpoint stores.
inline Checkpoint round_trip(const Checkpoint& ckpt) {
  std::stringstream ss;
  write_checkpoint(ss, ckpt);
  return read_checkpoint(ss);
}

}  // namespace adseg
