#pragma once

// Raw little-endian binary64 side files used by probe and basis storage.

#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <vector>

#include "simlab/error.hpp"

namespace simlab::detail {

inline void write_f64_block(const std::filesystem::path& path, const std::vector<double>& values) {
  std::vector<char> bytes;
  bytes.reserve(values.size() * 8);
  for (double v : values) {
    const auto u = std::bit_cast<std::uint64_t>(v);
    for (int b = 0; b < 8; ++b) bytes.push_back(static_cast<char>((u >> (8 * b)) & 0xff));
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed: " + path.string());
}

inline std::vector<double> read_f64_block(const std::filesystem::path& path, std::size_t expected) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  const std::vector<unsigned char> bytes{std::istreambuf_iterator<char>(in),
                                         std::istreambuf_iterator<char>()};
  if (bytes.size() != expected * 8) {
    throw FormatError(path.string() + ": expected " + std::to_string(expected * 8) + " bytes, found " +
                      std::to_string(bytes.size()));
  }
  std::vector<double> out(expected);
  for (std::size_t i = 0; i < expected; ++i) {
    std::uint64_t u = 0;
    for (int b = 0; b < 8; ++b) u |= static_cast<std::uint64_t>(bytes[i * 8 + b]) << (8 * b);
    out[i] = std::bit_cast<double>(u);
    if (!std::isfinite(out[i])) throw FormatError(path.string() + ": non-finite value");
  }
  return out;
}

}  // namespace simlab::detail
