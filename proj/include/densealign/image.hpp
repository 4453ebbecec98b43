#pragma once

// Image decoding and CLIP-style preprocessing: bicubic resize of the shorter
// side, center crop, per-channel normalization.

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "densealign/config.hpp"
#include "densealign/error.hpp"
#include "densealign/model.hpp"
#include "densealign/safetensors.hpp"

namespace densealign {

/// Decoded RGB pixels in [0, 1], interleaved HWC. `eight_bit` marks values
/// that are exact multiples of 1/255 (decoded 8-bit files); those are resized
/// with the 8-bit fixed-point resampler, everything else in floating point.
struct RawImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<float> rgb;
  bool eight_bit = false;

  float at(std::size_t y, std::size_t x, std::size_t c) const { return rgb[(y * width + x) * 3 + c]; }
};

namespace detail {

inline double bicubic_kernel(double x) {
  constexpr double a = -0.5;
  x = std::fabs(x);
  if (x < 1.0) return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0;
  if (x < 2.0) return (((x - 5.0) * x + 8.0) * x - 4.0) * a;
  return 0.0;
}

struct ResampleTaps {
  std::size_t first = 0;
  std::vector<double> weights;
};

// Antialiased separable taps matching the PIL resampling convention: when
// downscaling the kernel is stretched by the scale factor.
inline std::vector<ResampleTaps> resample_taps(std::size_t in, std::size_t out) {
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  const double filter_scale = std::max(scale, 1.0);
  const double support = 2.0 * filter_scale;
  std::vector<ResampleTaps> taps(out);
  for (std::size_t x = 0; x < out; ++x) {
    const double center = (static_cast<double>(x) + 0.5) * scale;
    const auto lo = static_cast<long>(std::max(0.0, std::floor(center - support + 0.5)));
    const auto hi = static_cast<long>(std::min(static_cast<double>(in), std::floor(center + support + 0.5)));
    double total = 0.0;
    auto& t = taps[x];
    t.first = static_cast<std::size_t>(lo);
    for (long k = lo; k < hi; ++k) {
      const double wgt = bicubic_kernel((static_cast<double>(k) - center + 0.5) / filter_scale);
      t.weights.push_back(wgt);
      total += wgt;
    }
    if (total != 0.0) {
      for (auto& wgt : t.weights) wgt /= total;
    }
  }
  return taps;
}

inline RawImage resize_bicubic(const RawImage& src, std::size_t out_w, std::size_t out_h) {
  const auto tx = resample_taps(src.width, out_w);
  const auto ty = resample_taps(src.height, out_h);
  RawImage horiz{out_w, src.height, std::vector<float>(out_w * src.height * 3)};
  for (std::size_t y = 0; y < src.height; ++y)
    for (std::size_t x = 0; x < out_w; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        double acc = 0.0;
        for (std::size_t k = 0; k < tx[x].weights.size(); ++k) acc += tx[x].weights[k] * src.at(y, tx[x].first + k, c);
        horiz.rgb[(y * out_w + x) * 3 + c] = static_cast<float>(std::clamp(acc, 0.0, 1.0));
      }
  RawImage out{out_w, out_h, std::vector<float>(out_w * out_h * 3)};
  for (std::size_t y = 0; y < out_h; ++y)
    for (std::size_t x = 0; x < out_w; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        double acc = 0.0;
        for (std::size_t k = 0; k < ty[y].weights.size(); ++k) acc += ty[y].weights[k] * horiz.at(ty[y].first + k, x, c);
        out.rgb[(y * out_w + x) * 3 + c] = static_cast<float>(std::clamp(acc, 0.0, 1.0));
      }
  return out;
}

// 8-bit path: taps quantized to 22 fractional bits, rounding accumulator,
// each pass clamped back to a byte (PIL's 8bpc resampler).
inline constexpr int kPrecisionBits = 32 - 8 - 2;

inline std::vector<std::vector<int>> fixed_point(const std::vector<ResampleTaps>& taps) {
  std::vector<std::vector<int>> out(taps.size());
  for (std::size_t x = 0; x < taps.size(); ++x)
    for (double w : taps[x].weights) {
      const double v = w * static_cast<double>(1 << kPrecisionBits);
      out[x].push_back(static_cast<int>(v < 0 ? -0.5 + v : 0.5 + v));
    }
  return out;
}

inline std::uint8_t clip8(long long acc) {
  return static_cast<std::uint8_t>(std::clamp<long long>(acc >> kPrecisionBits, 0, 255));
}

inline std::vector<std::uint8_t> resize_bicubic_8bit(const std::vector<std::uint8_t>& src, std::size_t in_w,
                                                     std::size_t in_h, std::size_t out_w, std::size_t out_h) {
  std::vector<std::uint8_t> cur = src;
  std::size_t w = in_w;
  if (out_w != in_w) {
    const auto taps = resample_taps(in_w, out_w);
    const auto k = fixed_point(taps);
    std::vector<std::uint8_t> next(out_w * in_h * 3);
    for (std::size_t y = 0; y < in_h; ++y)
      for (std::size_t x = 0; x < out_w; ++x)
        for (std::size_t c = 0; c < 3; ++c) {
          long long acc = 1LL << (kPrecisionBits - 1);
          for (std::size_t t = 0; t < k[x].size(); ++t) acc += static_cast<long long>(cur[(y * w + taps[x].first + t) * 3 + c]) * k[x][t];
          next[(y * out_w + x) * 3 + c] = clip8(acc);
        }
    cur.swap(next);
    w = out_w;
  }
  if (out_h != in_h) {
    const auto taps = resample_taps(in_h, out_h);
    const auto k = fixed_point(taps);
    std::vector<std::uint8_t> next(w * out_h * 3);
    for (std::size_t y = 0; y < out_h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        for (std::size_t c = 0; c < 3; ++c) {
          long long acc = 1LL << (kPrecisionBits - 1);
          for (std::size_t t = 0; t < k[y].size(); ++t) acc += static_cast<long long>(cur[((taps[y].first + t) * w + x) * 3 + c]) * k[y][t];
          next[(y * w + x) * 3 + c] = clip8(acc);
        }
    cur.swap(next);
  }
  return cur;
}

inline RawImage resize(const RawImage& src, std::size_t out_w, std::size_t out_h) {
  if (!src.eight_bit) return resize_bicubic(src, out_w, out_h);
  std::vector<std::uint8_t> bytes(src.rgb.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    bytes[i] = static_cast<std::uint8_t>(std::lround(std::clamp(src.rgb[i], 0.0f, 1.0f) * 255.0f));
  }
  const auto out = resize_bicubic_8bit(bytes, src.width, src.height, out_w, out_h);
  RawImage r{out_w, out_h, std::vector<float>(out.size()), true};
  for (std::size_t i = 0; i < out.size(); ++i) r.rgb[i] = static_cast<float>(out[i]) / 255.0f;
  return r;
}

}  // namespace detail

inline ImageInput preprocess_image(const RawImage& raw, const ModelConfig& config) {
  if (raw.width == 0 || raw.height == 0) throw InputError("image has a zero dimension");
  if (raw.rgb.size() != raw.width * raw.height * 3) throw InputError("image pixel buffer does not match its size");
  const std::size_t res = config.image_resolution;
  const RawImage* img = &raw;
  RawImage resized;
  const std::size_t shorter = std::min(raw.width, raw.height);
  if (shorter != res) {
    std::size_t w = res, h = res;
    if (raw.width < raw.height) {
      h = static_cast<std::size_t>(static_cast<double>(res) * raw.height / raw.width);
    } else {
      w = static_cast<std::size_t>(static_cast<double>(res) * raw.width / raw.height);
    }
    resized = detail::resize(raw, std::max(w, res), std::max(h, res));
    img = &resized;
  }
  const auto top = static_cast<std::size_t>(std::nearbyint(static_cast<double>(img->height - res) / 2.0));
  const auto left = static_cast<std::size_t>(std::nearbyint(static_cast<double>(img->width - res) / 2.0));
  ImageInput out;
  out.resolution = res;
  out.chw.resize(3 * res * res);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < res; ++y)
      for (std::size_t x = 0; x < res; ++x) {
        out.chw[(c * res + y) * res + x] =
            (img->at(top + y, left + x, c) - config.image_mean[c]) / config.image_std[c];
      }
  return out;
}

inline RawImage read_png(const std::filesystem::path& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.string().c_str())) {
    throw InputError("cannot read PNG " + path.string() + ": " + image.message);
  }
  image.format = PNG_FORMAT_RGB;
  std::vector<unsigned char> buf(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&image);
    throw InputError("cannot decode PNG " + path.string() + ": " + image.message);
  }
  RawImage out{image.width, image.height, std::vector<float>(buf.size()), true};
  for (std::size_t i = 0; i < buf.size(); ++i) out.rgb[i] = static_cast<float>(buf[i]) / 255.0f;
  return out;
}

inline void write_png(const std::filesystem::path& path, const RawImage& img) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.width);
  image.height = static_cast<png_uint_32>(img.height);
  image.format = PNG_FORMAT_RGB;
  std::vector<unsigned char> buf(img.rgb.size());
  for (std::size_t i = 0; i < buf.size(); ++i) {
    buf[i] = static_cast<unsigned char>(std::lround(std::clamp(img.rgb[i], 0.0f, 1.0f) * 255.0f));
  }
  if (!png_image_write_to_file(&image, path.string().c_str(), 0, buf.data(), 0, nullptr)) {
    throw InputError("cannot write PNG " + path.string() + ": " + image.message);
  }
}

/// Raw sidecar: a tensor container holding one preprocessed [3, R, R] (or
/// [1, 3, R, R]) tensor.
inline ImageInput read_image_tensor(const std::filesystem::path& path, const ModelConfig& config) {
  const auto tensors = read_safetensors(path);
  if (tensors.size() != 1) throw InputError(path.string() + ": image container must hold exactly one tensor");
  const Tensor& t = tensors.begin()->second;
  auto shape = t.shape;
  if (shape.size() == 4 && shape[0] == 1) shape.erase(shape.begin());
  const auto res = static_cast<std::int64_t>(config.image_resolution);
  if (shape != std::vector<std::int64_t>{3, res, res}) {
    throw InputError(path.string() + ": image tensor has shape " + shape_string(t.shape) + ", expected [3, " +
                     std::to_string(res) + ", " + std::to_string(res) + "]");
  }
  return ImageInput{config.image_resolution, t.data};
}

inline void write_image_tensor(const std::filesystem::path& path, const ImageInput& image) {
  const auto r = static_cast<std::int64_t>(image.resolution);
  write_safetensors(path, {{"pixel_values", Tensor({3, r, r}, image.chw)}});
}

/// Loads a PNG (preprocessed here) or a `.safetensors` raw tensor sidecar.
inline ImageInput load_image(const std::filesystem::path& path, const ModelConfig& config) {
  if (!std::filesystem::exists(path)) throw InputError("image not found: " + path.string());
  if (path.extension() == ".safetensors") return read_image_tensor(path, config);
  return preprocess_image(read_png(path), config);
}

}  // namespace densealign
