#pragma once

// Versioned binary container of named parameter tensors. Layout:
//   magic "TPTCKPT\0" | u32 version | u32 header_len | header JSON (config)
//   per tensor: u32 name_len | name | u32 rank | u32 dims[rank] | f32 data (LE)
// Tensors appear in registration order and payloads are always fp32, so a
// rerun with the same parameters produces byte-identical files.

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "tempotrack/config_io.hpp"
#include "tempotrack/model.hpp"

namespace tempotrack {

namespace detail {

static_assert(std::endian::native == std::endian::little,
              "checkpoint i/o assumes a little-endian host");

inline void write_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), 4);
}

inline std::uint32_t read_u32(std::istream& is, const std::string& what) {
  std::uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 4);
  if (!is) throw FormatError("checkpoint: truncated while reading " + what);
  return v;
}

}  // namespace detail

inline constexpr char kCheckpointMagic[8] = {'T', 'P', 'T', 'C', 'K', 'P', 'T', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
void save_checkpoint(const Model<T>& model, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for write: " + path.string());
  os.write(kCheckpointMagic, 8);
  detail::write_u32(os, kCheckpointVersion);
  const std::string header = nlohmann::json{{"config", config_to_json(model.cfg)},
                                            {"tensor_count", model.params.size()}}
                                 .dump();
  detail::write_u32(os, static_cast<std::uint32_t>(header.size()));
  os.write(header.data(), static_cast<std::streamsize>(header.size()));
  for (const auto& p : model.params) {
    detail::write_u32(os, static_cast<std::uint32_t>(p.name.size()));
    os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    detail::write_u32(os, static_cast<std::uint32_t>(p.tensor.rank()));
    for (std::size_t d : p.tensor.shape())
      detail::write_u32(os, static_cast<std::uint32_t>(d));
    for (const auto v : p.tensor.data()) {
      const float f = static_cast<float>(v);
      os.write(reinterpret_cast<const char*>(&f), 4);
    }
  }
  if (!os) throw IoError("write failed: " + path.string());
}

template <typename T>
Model<T> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path.string());
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw FormatError("checkpoint: bad magic in " + path.string());
  const std::uint32_t version = detail::read_u32(is, "version");
  if (version != kCheckpointVersion)
    throw FormatError("checkpoint: unsupported version " + std::to_string(version) +
                      " (expected " + std::to_string(kCheckpointVersion) + ")");
  const std::uint32_t header_len = detail::read_u32(is, "header length");
  std::string header(header_len, '\0');
  is.read(header.data(), header_len);
  if (!is) throw FormatError("checkpoint: truncated header in " + path.string());
  nlohmann::json j = nlohmann::json::parse(header, nullptr, false);
  if (j.is_discarded() || !j.contains("config"))
    throw FormatError("checkpoint: malformed header JSON in " + path.string());

  Model<T> model = Model<T>::random_init(config_from_json(j.at("config")));
  for (auto& p : model.params) {
    const std::uint32_t name_len = detail::read_u32(is, "tensor name length");
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    if (!is || name != p.name)
      throw FormatError("checkpoint: expected tensor '" + p.name + "', found '" + name + "'");
    const std::uint32_t rank = detail::read_u32(is, "tensor rank");
    Shape shape(rank);
    for (auto& d : shape) d = detail::read_u32(is, "tensor dim");
    if (shape != p.tensor.shape())
      throw FormatError("checkpoint: tensor '" + name + "' has shape " + shape_str(shape) +
                        ", model expects " + shape_str(p.tensor.shape()));
    auto dst = p.tensor.data();
    for (auto& v : dst) {
      float f;
      is.read(reinterpret_cast<char*>(&f), 4);
      if (!is) throw FormatError("checkpoint: truncated payload for '" + name + "'");
      v = static_cast<T>(f);
    }
  }
  return model;
}

}  // namespace tempotrack
