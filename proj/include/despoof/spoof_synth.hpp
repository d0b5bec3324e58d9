#pragma once

#include <Eigen/Dense>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "despoof/config.hpp"
#include "despoof/image.hpp"

namespace despoof {

inline const std::array<std::string, 4> kMediumNames = {"print1", "print2", "display1", "display2"};

/// Parameters of one simulated presentation medium.
struct MediumProfile {
  std::string name = "identity";
  std::array<double, 9> gamut{1, 0, 0, 0, 1, 0, 0, 0, 1};  // row-major 3x3
  std::array<double, 3> offset{0, 0, 0};
  double display_scale = 1.0;  // integer resampling factor
  double blur_sigma = 0.0;
  double reflection_amplitude = 0.0;
  double reflection_angle = 0.0;  // degrees
  // Lattice frequencies as fractions of the image size (cycles per image / S).
  double lattice_fx = 0.0;
  double lattice_fy = 0.0;
  double lattice_amplitude = 0.0;

  double gamut_spectral_norm() const {
    Eigen::Matrix3d a;
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) a(r, c) = gamut[3 * r + c];
    return Eigen::JacobiSVD<Eigen::Matrix3d>(a).singularValues()(0);
  }

  /// Lattice frequencies in cycles per image at size `s`.
  std::pair<std::size_t, std::size_t> lattice_cycles(std::size_t s) const {
    return {static_cast<std::size_t>(std::lround(lattice_fx * double(s))),
            static_cast<std::size_t>(std::lround(lattice_fy * double(s)))};
  }

  /// Checks the properties every shipped spoof profile must have at size `s`.
  void validate(std::size_t s) const {
    const std::string who = "medium profile '" + name + "': ";
    if (!(gamut_spectral_norm() < 1.0)) throw ConfigError(who + "gamut matrix is not a contraction");
    for (int r = 0; r < 3; ++r) {
      double lo = offset[r], hi = offset[r];
      for (int c = 0; c < 3; ++c) (gamut[3 * r + c] < 0 ? lo : hi) += gamut[3 * r + c];
      if (lo < 0.0 || hi > 1.0) throw ConfigError(who + "gamut does not map the unit cube into itself");
    }
    if (display_scale < 1.0) throw ConfigError(who + "display scale must be >= 1");
    if (blur_sigma < 0.0 || reflection_amplitude < 0.0 || lattice_amplitude < 0.0)
      throw ConfigError(who + "amplitudes and sigma must be nonnegative");
    const auto [fx, fy] = lattice_cycles(s);
    if (lattice_amplitude > 0.0 && (std::min(fx, fy) * 8 <= s || std::max(fx, fy) * 2 >= s))
      throw ConfigError(who + "lattice frequencies must lie above S/8 and below the Nyquist limit");
  }
};

inline MediumProfile identity_profile() { return {}; }

/// Reads `[name]` sections of a medium profile file. Every section must
/// define every field.
inline std::vector<MediumProfile> parse_profiles(const KeyValueConfig& cfg) {
  if (cfg.get_int("version") != 1) throw ConfigError(cfg.source() + ": unsupported profile version");
  std::vector<MediumProfile> out;
  std::set<std::string> known{"version"};
  for (const auto& name : kMediumNames) {
    MediumProfile p;
    p.name = name;
    auto key = [&](const char* field) {
      known.insert(name + "." + field);
      return name + "." + field;
    };
    const auto gamut = cfg.get_doubles(key("gamut"));
    const auto offset = cfg.get_doubles(key("offset"));
    if (gamut.size() != 9) throw ConfigError(cfg.source() + ": " + name + ".gamut needs 9 values");
    if (offset.size() != 3) throw ConfigError(cfg.source() + ": " + name + ".offset needs 3 values");
    std::copy(gamut.begin(), gamut.end(), p.gamut.begin());
    std::copy(offset.begin(), offset.end(), p.offset.begin());
    p.display_scale = cfg.get_double(key("display_scale"));
    p.blur_sigma = cfg.get_double(key("blur_sigma"));
    p.reflection_amplitude = cfg.get_double(key("reflection_amplitude"));
    p.reflection_angle = cfg.get_double(key("reflection_angle"));
    const auto lattice = cfg.get_doubles(key("lattice"));
    if (lattice.size() != 2) throw ConfigError(cfg.source() + ": " + name + ".lattice needs 2 values");
    p.lattice_fx = lattice[0];
    p.lattice_fy = lattice[1];
    p.lattice_amplitude = cfg.get_double(key("lattice_amplitude"));
    out.push_back(p);
  }
  cfg.require_known(known);
  return out;
}

inline std::vector<MediumProfile> load_profiles(const std::filesystem::path& path) {
  return parse_profiles(KeyValueConfig::load(path));
}

inline const MediumProfile& find_profile(const std::vector<MediumProfile>& profiles, const std::string& name) {
  for (const auto& p : profiles)
    if (p.name == name) return p;
  throw ConfigError("unknown medium '" + name + "'");
}

// ---------------------------------------------------------------------------

namespace detail {

inline std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Keeps values on a 2^-24 grid so that sums and differences of images in
/// [0, 1] are exact in double precision.
inline double snap(double v) { return std::ldexp(std::nearbyint(std::ldexp(v, 24)), -24); }

inline void clamp_unit(Image& img) {
  for (auto& v : img.data()) v = std::clamp(v, 0.0, 1.0);
}

}  // namespace detail

/// Independent stream for (seed, a, b).
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
  return detail::splitmix(detail::splitmix(detail::splitmix(seed) ^ a) ^ (b * 0xd1b54a32d192ed03ULL));
}

struct LiveSample {
  Image rgb;    // [S,S,3]
  Image depth;  // [S/8,S/8,1], 0 on background, max 1
  std::uint64_t subject_id = 0;
};

struct SpoofSample {
  Image rgb;       // [S,S,3]
  Image gt_noise;  // rgb - source.rgb
  std::string medium;
  Image depth_label;  // all zero, [S/8,S/8,1]
  LiveSample source;
};

/// Procedural face of subject `seed`. Different `capture` values re-image the
/// same face with a fresh sensor-noise realization.
inline LiveSample gen_live_face(std::uint64_t seed, std::size_t size, std::uint64_t capture = 0) {
  if (!is_power_of_two(size) || size < 32)
    throw ShapeError("gen_live_face: size must be a power of two >= 32, got " + std::to_string(size));
  std::mt19937_64 rng(derive_seed(seed, 0x11fe));
  auto u = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  const double s = double(size);

  const double cx = u(0.44, 0.56) * s, cy = u(0.46, 0.56) * s;
  const double ax = u(0.25, 0.31) * s, ay = u(0.33, 0.40) * s;
  const double skin_r = u(0.55, 0.85);
  const std::array<double, 3> skin{skin_r, skin_r * u(0.68, 0.82), skin_r * u(0.52, 0.68)};
  std::array<double, 3> bg;
  for (auto& c : bg) c = u(0.2, 0.7);
  const double bg_kx = double(rng() % 4), bg_ky = double(rng() % 4), bg_phase = u(0, 2 * std::numbers::pi);
  const double light = u(0, 2 * std::numbers::pi);
  const double lx = 0.5 * std::cos(light), ly = 0.5 * std::sin(light);

  // Coarse value noise for skin texture, bilinearly interpolated.
  const std::size_t grid = 9;
  std::vector<double> tex(grid * grid);
  for (auto& t : tex) t = u(-1, 1);
  auto texture = [&](double x, double y) {
    const double gx = x / s * double(grid - 1), gy = y / s * double(grid - 1);
    const std::size_t x0 = std::min<std::size_t>(std::size_t(gx), grid - 2), y0 = std::min<std::size_t>(std::size_t(gy), grid - 2);
    const double fx = gx - double(x0), fy = gy - double(y0);
    const double top = tex[y0 * grid + x0] * (1 - fx) + tex[y0 * grid + x0 + 1] * fx;
    const double bot = tex[(y0 + 1) * grid + x0] * (1 - fx) + tex[(y0 + 1) * grid + x0 + 1] * fx;
    return top * (1 - fy) + bot * fy;
  };
  const double eye_dx = 0.36 * ax, eye_y = cy - 0.18 * ay, eye_sigma = 0.09 * ax;
  const double mouth_y = cy + 0.45 * ay;

  LiveSample out;
  out.subject_id = seed;
  out.rgb = Image({size, size, 3});
  std::mt19937_64 sensor(derive_seed(seed, 0x5e75, capture));
  std::normal_distribution<double> noise(0.0, 0.006);
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      const double px = double(x) + 0.5, py = double(y) + 0.5;
      const double nx = (px - cx) / ax, ny = (py - cy) / ay;
      const double r2 = nx * nx + ny * ny;
      // Soft face mask over about one pixel at the silhouette.
      const double edge = (1.0 - std::sqrt(r2)) * std::min(ax, ay);
      const double face = std::clamp(edge + 0.5, 0.0, 1.0);
      const double z = std::sqrt(std::max(0.0, 1.0 - r2));
      const double shade = 0.62 + 0.38 * std::clamp(z + lx * nx + ly * ny, 0.0, 1.0);
      double eyes = 0;
      for (double sx : {-1.0, 1.0}) {
        const double dx = px - (cx + sx * eye_dx), dy = py - eye_y;
        eyes += std::exp(-(dx * dx + dy * dy) / (2 * eye_sigma * eye_sigma));
      }
      const double mdx = (px - cx) / (0.28 * ax), mdy = (py - mouth_y) / (0.05 * ay);
      const double mouth = std::exp(-0.5 * (mdx * mdx + mdy * mdy));
      const double t = texture(px, py);
      const double wave = std::sin(2 * std::numbers::pi * (bg_kx * px + bg_ky * py) / s + bg_phase);
      for (std::size_t c = 0; c < 3; ++c) {
        double skin_v = skin[c] * shade * (1.0 - 0.55 * std::min(1.0, eyes)) * (1.0 - 0.3 * mouth) + 0.025 * t;
        const double bg_v = bg[c] * (0.85 + 0.15 * py / s) + 0.06 * wave;
        const double v = face * skin_v + (1.0 - face) * bg_v + noise(sensor);
        out.rgb[(y * size + x) * 3 + c] = detail::snap(std::clamp(v, 0.0, 1.0));
      }
    }

  const std::size_t d = size / 8;
  out.depth = Image({d, d, 1});
  double peak = 0;
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      const double px = (double(j) + 0.5) * 8.0, py = (double(i) + 0.5) * 8.0;
      const double nx = (px - cx) / ax, ny = (py - cy) / ay;
      const double z = std::sqrt(std::max(0.0, 1.0 - nx * nx - ny * ny));
      out.depth[i * d + j] = z;
      peak = std::max(peak, z);
    }
  for (auto& v : out.depth.data()) v /= peak;
  return out;
}

// ---------------------------------------------------------------------------
// Degradation steps. Each takes and returns an [H,W,3] image in [0,1].

inline Image apply_color_distortion(const Image& img, const MediumProfile& p) {
  Image out(img.shape());
  for (std::size_t i = 0; i < img.size() / 3; ++i) {
    const double* in = img.raw() + 3 * i;
    for (std::size_t r = 0; r < 3; ++r)
      out[3 * i + r] = std::clamp(
          p.gamut[3 * r] * in[0] + p.gamut[3 * r + 1] * in[1] + p.gamut[3 * r + 2] * in[2] + p.offset[r], 0.0, 1.0);
  }
  return out;
}

/// Separable Gaussian blur with clamp-to-edge borders, truncated at `radius`.
inline Image gaussian_blur(const Image& img, double sigma, std::size_t radius) {
  if (sigma <= 0.0 || radius == 0) return img;
  std::vector<double> w(2 * radius + 1);
  double total = 0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double d = double(i) - double(radius);
    total += w[i] = std::exp(-d * d / (2 * sigma * sigma));
  }
  for (auto& v : w) v /= total;
  const std::size_t h = img.dim(0), wd = img.dim(1), c = img.dim(2);
  auto pass = [&](const Image& src, bool horizontal) {
    Image dst(src.shape());
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < wd; ++x)
        for (std::size_t ch = 0; ch < c; ++ch) {
          const double center = src[(y * wd + x) * c + ch];
          // Weighted deviations from the center keep constants exact.
          double acc = 0;
          for (std::size_t k = 0; k < w.size(); ++k) {
            const long off = long(k) - long(radius);
            const long yy = horizontal ? long(y) : std::clamp(long(y) + off, 0L, long(h) - 1);
            const long xx = horizontal ? std::clamp(long(x) + off, 0L, long(wd) - 1) : long(x);
            acc += w[k] * (src[(std::size_t(yy) * wd + std::size_t(xx)) * c + ch] - center);
          }
          dst[(y * wd + x) * c + ch] = center + acc;
        }
    return dst;
  };
  return pass(pass(img, true), false);
}

inline Image gaussian_blur(const Image& img, double sigma) {
  return gaussian_blur(img, sigma, static_cast<std::size_t>(std::ceil(3.0 * sigma)));
}

/// Capture blur with an n x n Gaussian kernel (n odd; 1 is the identity).
/// Sigma follows the common 0.3((n-1)/2 - 1) + 0.8 rule.
inline Image capture_blur(const Image& img, std::size_t kernel) {
  if (kernel % 2 == 0) throw ConfigError("blur kernel size must be odd, got " + std::to_string(kernel));
  if (kernel == 1) return img;
  const double sigma = 0.3 * ((double(kernel) - 1.0) * 0.5 - 1.0) + 0.8;
  return gaussian_blur(img, sigma, (kernel - 1) / 2);
}

/// Area-average downsampling by the display scale, corner-aligned bilinear
/// upsampling back, then the medium blur.
inline Image apply_display_artifacts(const Image& img, const MediumProfile& p) {
  if (p.display_scale < 1.0) throw ConfigError("display scale must be >= 1, got " + std::to_string(p.display_scale));
  const std::size_t f = static_cast<std::size_t>(std::lround(p.display_scale));
  const std::size_t h = img.dim(0), w = img.dim(1), c = img.dim(2);
  if (double(f) != p.display_scale || h % f || w % f)
    throw ConfigError("display scale " + std::to_string(p.display_scale) + " must be an integer dividing the image size");
  Image out = img;
  if (f > 1) {
    const std::size_t sh = h / f, sw = w / f;
    Image small({sh, sw, c});
    for (std::size_t y = 0; y < sh; ++y)
      for (std::size_t x = 0; x < sw; ++x)
        for (std::size_t ch = 0; ch < c; ++ch) {
          const double first = img[((y * f) * w + x * f) * c + ch];
          double acc = 0;
          for (std::size_t dy = 0; dy < f; ++dy)
            for (std::size_t dx = 0; dx < f; ++dx) acc += img[((y * f + dy) * w + x * f + dx) * c + ch] - first;
          small[(y * sw + x) * c + ch] = first + acc / double(f * f);
        }
    auto coord = [](std::size_t i, std::size_t out_n, std::size_t in_n) {
      return double(i) * double(in_n - 1) / double(out_n - 1);
    };
    for (std::size_t y = 0; y < h; ++y) {
      const double fy = coord(y, h, sh);
      const std::size_t y0 = std::min(std::size_t(fy), sh - 1), y1 = std::min(y0 + 1, sh - 1);
      const double ty = fy - double(y0);
      for (std::size_t x = 0; x < w; ++x) {
        const double fx = coord(x, w, sw);
        const std::size_t x0 = std::min(std::size_t(fx), sw - 1), x1 = std::min(x0 + 1, sw - 1);
        const double tx = fx - double(x0);
        for (std::size_t ch = 0; ch < c; ++ch) {
          auto at = [&](std::size_t yy, std::size_t xx) { return small[(yy * sw + xx) * c + ch]; };
          const double top = at(y0, x0) + tx * (at(y0, x1) - at(y0, x0));
          const double bot = at(y1, x0) + tx * (at(y1, x1) - at(y1, x0));
          out[(y * w + x) * c + ch] = top + ty * (bot - top);
        }
      }
    }
  }
  return gaussian_blur(out, p.blur_sigma);
}

/// Smooth additive reflection field: an oriented ramp rising from 0 to the
/// amplitude plus a broad Gaussian highlight of the same amplitude.
inline Image presenting_field(std::size_t h, std::size_t w, const MediumProfile& p, std::uint64_t seed) {
  Image field({h, w, 1});
  if (p.reflection_amplitude == 0.0) return field;
  std::mt19937_64 rng(derive_seed(seed, 0x9e71));
  std::uniform_real_distribution<double> u(0.3, 0.7);
  const double hx = u(rng) * double(w), hy = u(rng) * double(h);
  const double sigma = double(std::min(h, w)) / 4.0;
  const double th = p.reflection_angle * std::numbers::pi / 180.0;
  const double cs = std::cos(th), sn = std::sin(th);
  double lo = 1e300, hi = -1e300;
  for (double y : {0.0, double(h - 1)})
    for (double x : {0.0, double(w - 1)}) {
      lo = std::min(lo, x * cs + y * sn);
      hi = std::max(hi, x * cs + y * sn);
    }
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const double ramp = (double(x) * cs + double(y) * sn - lo) / (hi - lo);
      const double dx = double(x) - hx, dy = double(y) - hy;
      const double glow = std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
      field[y * w + x] = p.reflection_amplitude * (ramp + glow);
    }
  return field;
}

inline Image apply_presenting_artifacts(const Image& img, const MediumProfile& p, std::uint64_t seed) {
  if (p.reflection_amplitude == 0.0) return img;
  const Image field = presenting_field(img.dim(0), img.dim(1), p, seed);
  Image out(img.shape());
  const std::size_t c = img.dim(2);
  for (std::size_t i = 0; i < img.size(); ++i) out[i] = std::clamp(img[i] + field[i / c], 0.0, 1.0);
  return out;
}

/// Moire-like lattice amplitude * cos(fx) * cos(fy) under a slowly varying
/// envelope, with phases drawn from `seed`.
inline Image imaging_field(std::size_t h, std::size_t w, const MediumProfile& p, std::uint64_t seed) {
  Image field({h, w, 1});
  if (p.lattice_amplitude == 0.0) return field;
  std::mt19937_64 rng(derive_seed(seed, 0x1a77));
  std::uniform_real_distribution<double> phase(0.0, 2 * std::numbers::pi);
  const double px = phase(rng), py = phase(rng), pe = phase(rng);
  const auto [fx, fy] = p.lattice_cycles(std::min(h, w));
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const double envelope =
          0.9 + 0.1 * std::cos(2 * std::numbers::pi * (double(x) / double(w) + double(y) / double(h)) + pe);
      field[y * w + x] = p.lattice_amplitude * envelope *
                         std::cos(2 * std::numbers::pi * double(fx) * double(x) / double(w) + px) *
                         std::cos(2 * std::numbers::pi * double(fy) * double(y) / double(h) + py);
    }
  return field;
}

inline Image apply_imaging_artifacts(const Image& img, const MediumProfile& p, std::uint64_t seed) {
  if (p.lattice_amplitude == 0.0) return img;
  const Image field = imaging_field(img.dim(0), img.dim(1), p, seed);
  Image out(img.shape());
  const std::size_t c = img.dim(2);
  for (std::size_t i = 0; i < img.size(); ++i) out[i] = std::clamp(img[i] + field[i / c], 0.0, 1.0);
  return out;
}

/// Re-images `live` through medium `p`: color, display, presenting and
/// imaging steps in that order. gt_noise is the exact post-clamp residual.
inline SpoofSample make_spoof(const LiveSample& live, const MediumProfile& p, std::uint64_t seed) {
  Image rgb = apply_color_distortion(live.rgb, p);
  rgb = apply_display_artifacts(rgb, p);
  rgb = apply_presenting_artifacts(rgb, p, seed);
  rgb = apply_imaging_artifacts(rgb, p, seed);
  detail::clamp_unit(rgb);
  SpoofSample out;
  out.medium = p.name;
  out.gt_noise = Image(rgb.shape());
  for (std::size_t i = 0; i < rgb.size(); ++i) {
    rgb[i] = detail::snap(rgb[i]);
    out.gt_noise[i] = rgb[i] - live.rgb[i];
  }
  out.rgb = std::move(rgb);
  out.depth_label = Image(live.depth.shape());
  out.source = live;
  return out;
}

}  // namespace despoof
