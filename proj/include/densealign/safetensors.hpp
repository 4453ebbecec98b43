#pragma once

// Flat named-tensor container in the safetensors layout:
//   u64 little-endian header length N | N bytes of JSON header | raw data
// The header maps each name to {"dtype", "shape", "data_offsets": [b, e]}
// with offsets relative to the start of the data section. An optional
// "__metadata__" entry holds string pairs.
//
// Tensors are widened to float on load (F32, F16, BF16, F64 accepted).

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "densealign/error.hpp"

namespace densealign {

struct Tensor {
  std::vector<std::int64_t> shape;
  std::vector<float> data;

  Tensor() = default;
  Tensor(std::vector<std::int64_t> s, std::vector<float> d) : shape(std::move(s)), data(std::move(d)) {}
  explicit Tensor(std::vector<std::int64_t> s) : shape(std::move(s)), data(element_count(shape), 0.0f) {}

  static std::size_t element_count(const std::vector<std::int64_t>& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1},
                           [](std::size_t a, std::int64_t b) { return a * static_cast<std::size_t>(b); });
  }
  std::size_t size() const { return data.size(); }
};

using TensorMap = std::map<std::string, Tensor>;

inline std::string shape_string(const std::vector<std::int64_t>& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

namespace detail {

static_assert(std::endian::native == std::endian::little, "container I/O assumes a little-endian host");

inline float half_to_float(std::uint16_t h) {
  const std::uint32_t sign = (h & 0x8000u) << 16;
  const std::uint32_t exp = (h >> 10) & 0x1F;
  const std::uint32_t mant = h & 0x3FF;
  if (exp == 0) {
    const float v = std::ldexp(static_cast<float>(mant), -24);
    return sign ? -v : v;
  }
  std::uint32_t bits = 0;
  if (exp == 31) {
    bits = sign | 0x7F800000u | (mant << 13);
  } else {
    bits = sign | ((exp + 112) << 23) | (mant << 13);
  }
  return std::bit_cast<float>(bits);
}

inline float bf16_to_float(std::uint16_t h) { return std::bit_cast<float>(static_cast<std::uint32_t>(h) << 16); }

}  // namespace detail

inline TensorMap read_safetensors(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open tensor container " + path.string());
  in.seekg(0, std::ios::end);
  const auto file_size = static_cast<std::uint64_t>(in.tellg());
  in.seekg(0);
  if (file_size < 8) throw LoadError(path.string() + ": file too small for a tensor container");
  std::uint64_t header_len = 0;
  in.read(reinterpret_cast<char*>(&header_len), 8);
  if (header_len > file_size - 8) throw LoadError(path.string() + ": header length exceeds file size");
  std::string header(header_len, '\0');
  in.read(header.data(), static_cast<std::streamsize>(header_len));
  const std::uint64_t data_start = 8 + header_len;
  const std::uint64_t data_size = file_size - data_start;
  std::vector<char> data(data_size);
  in.read(data.data(), static_cast<std::streamsize>(data_size));
  if (!in) throw LoadError(path.string() + ": truncated tensor container");

  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(header);
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(path.string() + ": malformed header: " + e.what());
  }
  if (!meta.is_object()) throw LoadError(path.string() + ": header is not a JSON object");

  TensorMap out;
  for (const auto& [name, entry] : meta.items()) {
    if (name == "__metadata__") continue;
    try {
      const std::string dtype = entry.at("dtype").get<std::string>();
      const auto shape = entry.at("shape").get<std::vector<std::int64_t>>();
      const auto offsets = entry.at("data_offsets").get<std::vector<std::uint64_t>>();
      if (offsets.size() != 2 || offsets[0] > offsets[1] || offsets[1] > data_size) {
        throw LoadError("bad data_offsets");
      }
      const std::size_t count = Tensor::element_count(shape);
      const char* src = data.data() + offsets[0];
      const std::uint64_t bytes = offsets[1] - offsets[0];
      std::vector<float> values(count);
      auto expect_bytes = [&](std::size_t width) {
        if (bytes != count * width) {
          throw LoadError("byte size " + std::to_string(bytes) + " does not match shape " + shape_string(shape));
        }
      };
      if (dtype == "F32") {
        expect_bytes(4);
        std::memcpy(values.data(), src, bytes);
      } else if (dtype == "F64") {
        expect_bytes(8);
        for (std::size_t i = 0; i < count; ++i) {
          double d = 0;
          std::memcpy(&d, src + 8 * i, 8);
          values[i] = static_cast<float>(d);
        }
      } else if (dtype == "F16" || dtype == "BF16") {
        expect_bytes(2);
        for (std::size_t i = 0; i < count; ++i) {
          std::uint16_t h = 0;
          std::memcpy(&h, src + 2 * i, 2);
          values[i] = dtype == "F16" ? detail::half_to_float(h) : detail::bf16_to_float(h);
        }
      } else {
        throw LoadError("unsupported dtype " + dtype);
      }
      out.emplace(name, Tensor(shape, std::move(values)));
    } catch (const nlohmann::json::exception& e) {
      throw LoadError(path.string() + ": tensor '" + name + "': " + e.what());
    } catch (const LoadError& e) {
      throw LoadError(path.string() + ": tensor '" + name + "': " + e.what());
    }
  }
  return out;
}

/// Writes F32 tensors. Names are emitted in sorted order so identical maps
/// produce identical files.
inline void write_safetensors(const std::filesystem::path& path, const TensorMap& tensors,
                              const std::map<std::string, std::string>& metadata = {}) {
  nlohmann::json header = nlohmann::json::object();
  if (!metadata.empty()) header["__metadata__"] = metadata;
  std::uint64_t offset = 0;
  for (const auto& [name, t] : tensors) {
    if (Tensor::element_count(t.shape) != t.data.size()) {
      throw InputError("tensor '" + name + "' data does not match shape " + shape_string(t.shape));
    }
    const std::uint64_t bytes = t.data.size() * sizeof(float);
    header[name] = {{"dtype", "F32"}, {"shape", t.shape}, {"data_offsets", {offset, offset + bytes}}};
    offset += bytes;
  }
  std::string text = header.dump();
  while (text.size() % 8 != 0) text.push_back(' ');
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write tensor container " + path.string());
  const std::uint64_t len = text.size();
  out.write(reinterpret_cast<const char*>(&len), 8);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [name, t] : tensors) {
    out.write(reinterpret_cast<const char*>(t.data.data()), static_cast<std::streamsize>(t.data.size() * sizeof(float)));
  }
  if (!out) throw InputError("failed writing tensor container " + path.string());
}

}  // namespace densealign
