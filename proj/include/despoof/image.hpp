#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "despoof/params.hpp"
#include "despoof/tensor.hpp"

namespace despoof {

/// Images are rank-3 tensors [H, W, C] with values in [0, 1].
using Image = Tensor<double>;

inline std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

inline Image quantize8(const Image& img) {
  Image out(img.shape());
  for (std::size_t i = 0; i < img.size(); ++i) out[i] = to_byte(img[i]) / 255.0;
  return out;
}

// ---------------------------------------------------------------------------
// Netpbm (binary, maxval 255)

namespace detail {

inline std::string netpbm_header(const char* magic, std::size_t h, std::size_t w) {
  return std::string(magic) + "\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
}

inline std::size_t parse_netpbm_header(const std::string& bytes, const std::string& magic,
                                       std::size_t& h, std::size_t& w, const std::filesystem::path& path) {
  std::size_t pos = 0;
  auto token = [&]() -> std::string {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
    const std::size_t start = pos;
    while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    return bytes.substr(start, pos - start);
  };
  if (token() != magic) throw DataError(path.string() + ": not a binary " + magic + " file");
  try {
    w = std::stoul(token());
    h = std::stoul(token());
    if (std::stoul(token()) != 255) throw DataError(path.string() + ": maxval must be 255");
  } catch (const std::logic_error&) {
    throw DataError(path.string() + ": malformed header");
  }
  return pos + 1;  // single whitespace byte before the raster
}

}  // namespace detail

inline void write_ppm(const std::filesystem::path& path, const Image& rgb) {
  if (rgb.rank() != 3 || rgb.dim(2) != 3) throw ShapeError("write_ppm: expected [H,W,3], got " + to_string(rgb.shape()));
  std::string bytes = detail::netpbm_header("P6", rgb.dim(0), rgb.dim(1));
  for (double v : rgb.data()) bytes.push_back(static_cast<char>(to_byte(v)));
  write_file_atomic(path, bytes);
}

inline void write_pgm(const std::filesystem::path& path, const Image& gray) {
  if (gray.rank() != 3 || gray.dim(2) != 1) throw ShapeError("write_pgm: expected [H,W,1], got " + to_string(gray.shape()));
  std::string bytes = detail::netpbm_header("P5", gray.dim(0), gray.dim(1));
  for (double v : gray.data()) bytes.push_back(static_cast<char>(to_byte(v)));
  write_file_atomic(path, bytes);
}

inline Image read_netpbm(const std::filesystem::path& path, const std::string& magic, std::size_t channels) {
  const std::string bytes = read_file(path);
  std::size_t h = 0, w = 0;
  const std::size_t off = detail::parse_netpbm_header(bytes, magic, h, w, path);
  if (bytes.size() < off + h * w * channels) throw DataError(path.string() + ": truncated raster");
  Image img({h, w, channels});
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = static_cast<unsigned char>(bytes[off + i]) / 255.0;
  return img;
}

inline Image read_ppm(const std::filesystem::path& path) { return read_netpbm(path, "P6", 3); }
inline Image read_pgm(const std::filesystem::path& path) { return read_netpbm(path, "P5", 1); }

// ---------------------------------------------------------------------------
// Float planes: 16-byte header (4-byte magic, u32 H, u32 W, u32 C), then C
// planes of H*W little-endian float32.

inline void write_planes(const std::filesystem::path& path, const char (&magic)[5], const Image& img) {
  if (img.rank() != 3) throw ShapeError("write_planes: expected [H,W,C], got " + to_string(img.shape()));
  const std::uint32_t h = img.dim(0), w = img.dim(1), c = img.dim(2);
  std::string bytes(magic, 4);
  for (std::uint32_t v : {h, w, c}) bytes.append(reinterpret_cast<const char*>(&v), 4);
  for (std::uint32_t ch = 0; ch < c; ++ch)
    for (std::uint32_t p = 0; p < h * w; ++p) {
      const float f = static_cast<float>(img[p * c + ch]);
      bytes.append(reinterpret_cast<const char*>(&f), 4);
    }
  write_file_atomic(path, bytes);
}

inline Image read_planes(const std::filesystem::path& path, const char (&magic)[5]) {
  const std::string bytes = read_file(path);
  if (bytes.size() < 16 || bytes.compare(0, 4, magic, 4) != 0)
    throw DataError(path.string() + ": missing " + std::string(magic, 4) + " header");
  std::uint32_t dims[3];
  std::memcpy(dims, bytes.data() + 4, 12);
  const std::size_t h = dims[0], w = dims[1], c = dims[2];
  if (bytes.size() != 16 + 4 * h * w * c) throw DataError(path.string() + ": payload size does not match header");
  Image img({h, w, c});
  const char* p = bytes.data() + 16;
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < h * w; ++i, p += 4) {
      float f;
      std::memcpy(&f, p, 4);
      img[i * c + ch] = f;
    }
  return img;
}

inline constexpr char kNoiseMagic[5] = "DSPN";
inline constexpr char kDepthMagic[5] = "DSPD";

// ---------------------------------------------------------------------------
// Color

/// HSV with hue scaled to [0, 1); hue is 0 for grays.
inline std::array<double, 3> rgb_to_hsv(double r, double g, double b) {
  const double mx = std::max({r, g, b}), mn = std::min({r, g, b});
  const double d = mx - mn;
  double h = 0;
  if (d > 0) {
    if (mx == r)
      h = std::fmod((g - b) / d, 6.0);
    else if (mx == g)
      h = (b - r) / d + 2.0;
    else
      h = (r - g) / d + 4.0;
    h /= 6.0;
    if (h < 0) h += 1.0;
  }
  return {h, mx > 0 ? d / mx : 0.0, mx};
}

inline Image rgb_to_hsv(const Image& rgb) {
  if (rgb.rank() != 3 || rgb.dim(2) != 3) throw ShapeError("rgb_to_hsv: expected [H,W,3], got " + to_string(rgb.shape()));
  Image out(rgb.shape());
  for (std::size_t p = 0; p < rgb.size() / 3; ++p) {
    const auto hsv = rgb_to_hsv(rgb[3 * p], rgb[3 * p + 1], rgb[3 * p + 2]);
    std::copy(hsv.begin(), hsv.end(), out.raw() + 3 * p);
  }
  return out;
}

/// Network input: RGB followed by HSV, [H,W,6].
inline Image six_channel(const Image& rgb) {
  const Image hsv = rgb_to_hsv(rgb);
  Image out({rgb.dim(0), rgb.dim(1), 6});
  for (std::size_t p = 0; p < rgb.size() / 3; ++p) {
    std::copy_n(rgb.raw() + 3 * p, 3, out.raw() + 6 * p);
    std::copy_n(hsv.raw() + 3 * p, 3, out.raw() + 6 * p + 3);
  }
  return out;
}

}  // namespace despoof
