#pragma once

// Checkpoint container:
//
//   offset  size  field
//   0       4     magic "SDN1"
//   4       4     format version, u32 little-endian (currently 1)
//   8       4     JSON length L, u32 little-endian
//   12      L     model spec, UTF-8 JSON
//   12+L    4*P   for each Linear in spec order: W (row-major) then b,
//                 IEEE-754 binary32 little-endian
//   end-4   4     CRC-32 (zlib polynomial) of bytes [8, end-4), u32 LE
//
// Parameters are stored in single precision and widened to double on load.

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>

#include <zlib.h>

#include "sdrop/errors.hpp"
#include "sdrop/network.hpp"

namespace sdrop {

inline constexpr std::string_view kCheckpointMagic = "SDN1";
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

inline std::uint32_t get_u32(std::string_view bytes, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i)
    v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[at + i])) << (8 * i);
  return v;
}

inline std::uint32_t crc32_of(std::string_view bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; checkpoints stay far below 4 GiB.
  crc = ::crc32(crc, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size()));
  return static_cast<std::uint32_t>(crc);
}

inline std::size_t stored_floats(const ModelSpec& spec) {
  std::size_t n = 0;
  for (const auto& layer : spec.layers)
    if (const auto* l = std::get_if<LinearSpec>(&layer)) n += l->in * l->out + (l->bias ? l->out : 0);
  return n;
}

}  // namespace detail

inline std::string encode_checkpoint(const Network& net) {
  net.validate();
  const std::string json = to_json(net.spec).dump();
  std::string out(kCheckpointMagic);
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(json.size()));
  out += json;
  out.reserve(out.size() + 4 * (detail::stored_floats(net.spec) + 1));
  auto put_tensor = [&](const Tensor& t) {
    for (double v : t.values()) detail::put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  };
  for (const auto& p : net.params) {
    put_tensor(p.weight);
    if (p.has_bias()) put_tensor(p.bias);
  }
  detail::put_u32(out, detail::crc32_of(std::string_view(out).substr(8)));
  return out;
}

inline Network decode_checkpoint(std::string_view bytes) {
  if (bytes.size() < 12 || bytes.substr(0, 4) != kCheckpointMagic) {
    throw FormatError("checkpoint: bad magic (expected \"SDN1\")");
  }
  const std::uint32_t version = detail::get_u32(bytes, 4);
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint: unsupported format version " + std::to_string(version));
  }
  const std::size_t json_len = detail::get_u32(bytes, 8);
  if (bytes.size() < 12 + json_len + 4) throw FormatError("checkpoint: truncated model spec");

  const auto checksum_ok = [&] {
    return detail::crc32_of(bytes.substr(8, bytes.size() - 12)) ==
           detail::get_u32(bytes, bytes.size() - 4);
  };

  ModelSpec spec;
  try {
    spec = spec_from_json(nlohmann::json::parse(bytes.substr(12, json_len)));
  } catch (const nlohmann::json::exception& e) {
    if (!checksum_ok()) throw ChecksumError("checkpoint: checksum mismatch");
    throw FormatError(std::string("checkpoint: unreadable model spec: ") + e.what());
  } catch (const ConfigError&) {
    if (!checksum_ok()) throw ChecksumError("checkpoint: checksum mismatch");
    throw;
  }

  const std::size_t floats = detail::stored_floats(spec);
  const std::size_t expected = 12 + json_len + 4 * floats + 4;
  if (bytes.size() != expected) {
    throw FormatError("checkpoint: length " + std::to_string(bytes.size()) + " bytes, expected " +
                      std::to_string(expected) + " (truncated or trailing data)");
  }
  if (!checksum_ok()) throw ChecksumError("checkpoint: checksum mismatch");

  Network net{spec, {}};
  std::size_t at = 12 + json_len;
  auto read_tensor = [&](std::size_t rows, std::size_t cols) {
    Tensor t(rows, cols);
    for (double& v : t.values()) {
      v = static_cast<double>(std::bit_cast<float>(detail::get_u32(bytes, at)));
      at += 4;
    }
    return t;
  };
  for (const auto& layer : spec.layers) {
    const auto* l = std::get_if<LinearSpec>(&layer);
    if (!l) continue;
    LinearParams p;
    p.weight = read_tensor(l->out, l->in);
    if (l->bias) p.bias = read_tensor(l->out, 1);
    if (!all_finite(p.weight) || !all_finite(p.bias)) throw FormatError("checkpoint: non-finite parameter");
    net.params.push_back(std::move(p));
  }
  return net;
}

inline void save(const Network& net, const std::filesystem::path& path) {
  const std::string bytes = encode_checkpoint(net);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

inline Network load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint '" + path.string() + "'");
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace sdrop
