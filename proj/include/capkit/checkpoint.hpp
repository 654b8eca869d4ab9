#pragma once

// Binary parameter checkpoints: "CAPM", u32 version, then until EOF one blob
// per parameter (u32 name length, name bytes, u32 rank, u32 dims, f64 data).
// All integers and floats little-endian.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "capkit/data.hpp"
#include "capkit/optim.hpp"

namespace capkit {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct ParameterBlob {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

inline void save_checkpoint(const std::filesystem::path& path, const ParameterStore& store) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  out.write("CAPM", 4);
  detail::write_u32(out, kCheckpointVersion);
  for (const auto& p : store.items()) {
    detail::write_u32(out, static_cast<std::uint32_t>(p.name.size()));
    out.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    detail::write_u32(out, static_cast<std::uint32_t>(p.tensor.rank()));
    for (std::size_t d : p.tensor.shape()) detail::write_u32(out, static_cast<std::uint32_t>(d));
    const auto data = p.tensor.data();
    out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(double)));
  }
  if (!out) throw std::runtime_error("failed writing checkpoint " + path.string());
}

inline std::vector<ParameterBlob> read_checkpoint(const std::filesystem::path& path) {
  const std::string bytes = detail::read_all(path);
  std::istringstream in(bytes);
  const std::string where = path.string() + ": ";
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, "CAPM", 4) != 0) throw FormatError(where + "bad checkpoint magic");
  const auto version = detail::read_u32(in, where + "version");
  if (version != kCheckpointVersion) {
    throw FormatError(where + "unsupported checkpoint version " + std::to_string(version));
  }
  std::vector<ParameterBlob> out;
  while (in.peek() != std::char_traits<char>::eof()) {
    ParameterBlob b;
    const auto len = detail::read_u32(in, where + "name length");
    b.name.resize(len);
    if (!in.read(b.name.data(), len)) throw FormatError(where + "truncated parameter name");
    const auto rank = detail::read_u32(in, where + b.name + " rank");
    std::size_t n = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      b.shape.push_back(detail::read_u32(in, where + b.name + " dims"));
      n *= b.shape.back();
    }
    b.values.resize(n);
    if (!in.read(reinterpret_cast<char*>(b.values.data()), static_cast<std::streamsize>(n * sizeof(double)))) {
      throw FormatError(where + "truncated payload for " + b.name);
    }
    out.push_back(std::move(b));
  }
  return out;
}

/// Copies checkpoint values into an already-built store. Names and shapes
/// must match one to one.
inline void load_checkpoint(const std::filesystem::path& path, ParameterStore& store) {
  auto blobs = read_checkpoint(path);
  if (blobs.size() != store.size()) {
    throw FormatError(path.string() + ": checkpoint has " + std::to_string(blobs.size()) + " parameters, model has " +
                      std::to_string(store.size()));
  }
  for (const auto& b : blobs) {
    Tensor t = store.get(b.name);
    if (t.shape() != b.shape) {
      throw FormatError(path.string() + ": shape of " + b.name + " is " + shape_str(b.shape) + ", model expects " +
                        shape_str(t.shape()));
    }
    std::copy(b.values.begin(), b.values.end(), t.mutable_data().begin());
  }
}

}  // namespace capkit
