#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "splos/errors.hpp"
#include "splos/networks.hpp"

// Binary checkpoint, all integers and reals little-endian:
//   magic "SPLOSCKP" | u32 version | u32 |C^S| | u32 m | u32 input_dim |
//   u32 layer count L | u32 width x L | f64 parameters in declaration order
// Declaration order is F (W, b per layer), G^C, G^aux, G^{M_1..m}.
namespace splos {

inline constexpr std::array<char, 8> kCheckpointMagic{'S', 'P', 'L', 'O', 'S', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b, 4);
}

inline void put_f64(std::ostream& os, double d) {
  auto v = std::bit_cast<std::uint64_t>(d);
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b, 8);
}

inline std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw ParseError("checkpoint truncated", 0);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

inline double get_f64(std::istream& is) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) throw ParseError("checkpoint truncated", 0);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return std::bit_cast<double>(v);
}

}  // namespace detail

inline void write_checkpoint(std::ostream& os, const ModelBundle& b) {
  os.write(kCheckpointMagic.data(), kCheckpointMagic.size());
  detail::put_u32(os, kCheckpointVersion);
  detail::put_u32(os, static_cast<std::uint32_t>(b.num_classes()));
  detail::put_u32(os, static_cast<std::uint32_t>(b.num_gm()));
  detail::put_u32(os, static_cast<std::uint32_t>(b.config.input_dim));
  auto widths = b.f.widths();
  detail::put_u32(os, static_cast<std::uint32_t>(widths.size()));
  for (auto w : widths) detail::put_u32(os, static_cast<std::uint32_t>(w));
  for (const auto& p : b.parameters())
    for (double v : p.data()) detail::put_f64(os, v);
}

inline ModelBundle read_checkpoint(std::istream& is) {
  std::array<char, 8> magic{};
  if (!is.read(magic.data(), magic.size()) || magic != kCheckpointMagic)
    throw ParseError("not a checkpoint file (bad magic)", 0);
  auto version = detail::get_u32(is);
  if (version != kCheckpointVersion)
    throw ParseError("unsupported checkpoint version " + std::to_string(version), 0);
  ModelConfig cfg;
  cfg.num_classes = detail::get_u32(is);
  cfg.num_gm = detail::get_u32(is);
  cfg.input_dim = detail::get_u32(is);
  auto layers = detail::get_u32(is);
  if (layers == 0 || layers > 64) throw ParseError("implausible layer count in checkpoint", 0);
  cfg.widths.clear();
  for (std::uint32_t i = 0; i < layers; ++i) cfg.widths.push_back(detail::get_u32(is));
  if (cfg.num_classes < 2 || cfg.num_gm < 2 || cfg.input_dim == 0)
    throw ParseError("implausible checkpoint header", 0);

  ModelBundle b = make_bundle(cfg, 0);
  for (auto& p : b.parameters())
    for (double& v : p.mutable_data()) v = detail::get_f64(is);
  if (is.peek() != std::char_traits<char>::eof())
    throw ParseError("trailing bytes after checkpoint parameters", 0);
  return b;
}

inline void save_checkpoint(const std::string& path, const ModelBundle& b) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open '" + path + "' for writing");
  write_checkpoint(os, b);
  if (!os) throw std::runtime_error("write failed for '" + path + "'");
}

inline ModelBundle load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint '" + path + "'");
  return read_checkpoint(is);
}

}  // namespace splos
