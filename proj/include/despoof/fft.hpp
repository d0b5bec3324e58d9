#pragma once

#include <complex>
#include <numbers>
#include <span>
#include <vector>

#include "despoof/tape.hpp"
#include "despoof/tensor.hpp"

namespace despoof {

/// In-place iterative radix-2 Cooley-Tukey transform (forward: e^{-i...}).
template <typename T>
void fft_inplace(std::span<std::complex<T>> a, bool inverse = false) {
  const std::size_t n = a.size();
  if (!is_power_of_two(n)) throw ShapeError("fft: length " + std::to_string(n) + " is not a power of two");
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const std::size_t half = len / 2;
    const double sign = inverse ? 1.0 : -1.0;
    for (std::size_t k = 0; k < half; ++k) {
      const double ang = sign * 2.0 * std::numbers::pi * double(k) / double(len);
      const std::complex<T> w(T(std::cos(ang)), T(std::sin(ang)));
      for (std::size_t i = 0; i < n; i += len) {
        const std::complex<T> u = a[i + k];
        const std::complex<T> v = a[i + k + half] * w;
        a[i + k] = u + v;
        a[i + k + half] = u - v;
      }
    }
  }
  if (inverse)
    for (auto& z : a) z /= T(n);
}

/// 2-D transform of an h x w row-major complex plane.
template <typename T>
void fft2d_inplace(std::span<std::complex<T>> plane, std::size_t h, std::size_t w,
                   bool inverse = false) {
  if (!is_power_of_two(h) || !is_power_of_two(w))
    throw ShapeError("fft2d: size " + std::to_string(h) + "x" + std::to_string(w) +
                     " is not a power of two");
  for (std::size_t y = 0; y < h; ++y) fft_inplace(plane.subspan(y * w, w), inverse);
  std::vector<std::complex<T>> column(h);
  for (std::size_t x = 0; x < w; ++x) {
    for (std::size_t y = 0; y < h; ++y) column[y] = plane[y * w + x];
    fft_inplace(std::span<std::complex<T>>(column), inverse);
    for (std::size_t y = 0; y < h; ++y) plane[y * w + x] = column[y];
  }
}

/// Forward DFT of a real h x w plane.
template <typename T>
std::vector<std::complex<T>> fft2d_real(std::span<const T> plane, std::size_t h, std::size_t w) {
  std::vector<std::complex<T>> z(plane.begin(), plane.end());
  fft2d_inplace(std::span<std::complex<T>>(z), h, w);
  return z;
}

/// Index of the element that fftshift moves to position (y, x): DC lands at
/// (h/2, w/2).
inline std::size_t fftshift_source(std::size_t y, std::size_t x, std::size_t h, std::size_t w) {
  return ((y + h - h / 2) % h) * w + (x + w - w / 2) % w;
}

/// True inside the centered k x k low-frequency block of a shifted spectrum.
inline bool in_center_mask(std::size_t y, std::size_t x, std::size_t h, std::size_t w, std::size_t k) {
  const std::size_t y0 = h / 2 - k / 2, x0 = w / 2 - k / 2;
  return y >= y0 && y < y0 + k && x >= x0 && x < x0 + k;
}

/// Shifted magnitude spectrum |F(plane)| of a real plane, DC at the center.
template <typename T>
std::vector<T> shifted_magnitude(std::span<const T> plane, std::size_t h, std::size_t w) {
  auto z = fft2d_real(plane, h, w);
  std::vector<T> out(h * w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) out[y * w + x] = std::abs(z[fftshift_source(y, x, h, w)]);
  return out;
}

// ---------------------------------------------------------------------------
// Differentiable spectral ops. Complex values are stored as a trailing axis
// of length 2 (real, imaginary).

/// [B, H, W, C] -> [B, C, H, W]
template <typename T>
Var to_planes(Tape<T>& tape, Var x) {
  const auto& v = tape.value(x);
  if (v.rank() != 4) throw ShapeError("to_planes: expected NHWC, got " + to_string(v.shape()));
  const std::size_t b = v.dim(0), h = v.dim(1), w = v.dim(2), c = v.dim(3);
  Tensor<T> out({b, c, h, w});
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t xx = 0; xx < w; ++xx)
        for (std::size_t ch = 0; ch < c; ++ch)
          out[((n * c + ch) * h + y) * w + xx] = v(n, y, xx, ch);
  return tape.record("to_planes", std::move(out), {x}, [=](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T>* gx = t.accumulator(x);
    for (std::size_t n = 0; n < b; ++n)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t xx = 0; xx < w; ++xx)
          for (std::size_t ch = 0; ch < c; ++ch)
            (*gx)(n, y, xx, ch) += g[((n * c + ch) * h + y) * w + xx];
  });
}

/// Real [..., H, W] -> complex [..., H, W, 2], transforming the last two axes.
template <typename T>
Var fft2d(Tape<T>& tape, Var x) {
  const auto& v = tape.value(x);
  if (v.rank() < 2) throw ShapeError("fft2d: rank must be >= 2, got " + to_string(v.shape()));
  const std::size_t h = v.dim(v.rank() - 2), w = v.dim(v.rank() - 1);
  if (!is_power_of_two(h) || !is_power_of_two(w))
    throw ShapeError("fft2d: size " + to_string(v.shape()) + " is not a power of two");
  const std::size_t planes = v.size() / (h * w), n = h * w;
  Shape s = v.shape();
  s.push_back(2);
  Tensor<T> out(s);
  for (std::size_t p = 0; p < planes; ++p) {
    auto z = fft2d_real(std::span<const T>(v.raw() + p * n, n), h, w);
    for (std::size_t i = 0; i < n; ++i) {
      out[(p * n + i) * 2] = z[i].real();
      out[(p * n + i) * 2 + 1] = z[i].imag();
    }
  }
  return tape.record("fft2d", std::move(out), {x}, [=](Tape<T>& t, const Tensor<T>& g) {
    // d/dx of a real-input DFT: Re(DFT(conj(G))).
    Tensor<T>* gx = t.accumulator(x);
    std::vector<std::complex<T>> z(n);
    for (std::size_t p = 0; p < planes; ++p) {
      for (std::size_t i = 0; i < n; ++i)
        z[i] = std::complex<T>(g[(p * n + i) * 2], -g[(p * n + i) * 2 + 1]);
      fft2d_inplace(std::span<std::complex<T>>(z), h, w);
      for (std::size_t i = 0; i < n; ++i) (*gx)[p * n + i] += z[i].real();
    }
  });
}

/// Complex [..., 2] -> magnitude [...]. The subgradient at |z| = 0 is 0.
template <typename T>
Var magnitude(Tape<T>& tape, Var z) {
  const auto& v = tape.value(z);
  if (v.rank() < 1 || v.shape().back() != 2)
    throw ShapeError("magnitude: expected trailing complex axis, got " + to_string(v.shape()));
  Shape s(v.shape().begin(), v.shape().end() - 1);
  Tensor<T> out(s);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::hypot(v[2 * i], v[2 * i + 1]);
  return tape.record("magnitude", std::move(out), {z}, [=](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T>* gz = t.accumulator(z);
    const auto& in = t.value(z);
    const std::size_t n = in.size() / 2;
    for (std::size_t i = 0; i < n; ++i) {
      const T m = std::hypot(in[2 * i], in[2 * i + 1]);
      if (m == T(0)) continue;
      (*gz)[2 * i] += g[i] * in[2 * i] / m;
      (*gz)[2 * i + 1] += g[i] * in[2 * i + 1] / m;
    }
  });
}

/// Circular shift of the last two axes so that index (0,0) moves to (H/2, W/2).
template <typename T>
Var fftshift(Tape<T>& tape, Var x) {
  const auto& v = tape.value(x);
  if (v.rank() < 2) throw ShapeError("fftshift: rank must be >= 2");
  const std::size_t h = v.dim(v.rank() - 2), w = v.dim(v.rank() - 1), n = h * w;
  const std::size_t planes = v.size() / n;
  Tensor<T> out(v.shape());
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t xx = 0; xx < w; ++xx)
        out[p * n + y * w + xx] = v[p * n + fftshift_source(y, xx, h, w)];
  return tape.record("fftshift", std::move(out), {x}, [=](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T>* gx = t.accumulator(x);
    for (std::size_t p = 0; p < planes; ++p)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t xx = 0; xx < w; ++xx)
          (*gx)[p * n + fftshift_source(y, xx, h, w)] += g[p * n + y * w + xx];
  });
}

/// Zeroes the centered k x k block of the last two axes (the low-frequency
/// band of a shifted spectrum).
template <typename T>
Var zero_center(Tape<T>& tape, Var x, std::size_t k) {
  const auto& v = tape.value(x);
  if (v.rank() < 2) throw ShapeError("zero_center: rank must be >= 2");
  const std::size_t h = v.dim(v.rank() - 2), w = v.dim(v.rank() - 1), n = h * w;
  if (k % 2 || k >= h || k >= w)
    throw ShapeError("zero_center: mask size " + std::to_string(k) + " must be even and below " +
                     to_string(v.shape()));
  Tensor<T> out = v;
  const std::size_t planes = v.size() / n;
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t xx = 0; xx < w; ++xx)
        if (in_center_mask(y, xx, h, w, k)) out[p * n + y * w + xx] = T(0);
  return tape.record("zero_center", std::move(out), {x}, [=](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T>* gx = t.accumulator(x);
    for (std::size_t p = 0; p < planes; ++p)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t xx = 0; xx < w; ++xx)
          if (!in_center_mask(y, xx, h, w, k)) (*gx)[p * n + y * w + xx] += g[p * n + y * w + xx];
  });
}

/// Maximum over every axis but the first: [B, ...] -> [B]. The gradient goes
/// to the lowest flat index among tied maxima.
template <typename T>
Var max_per_sample(Tape<T>& tape, Var x) {
  const auto& v = tape.value(x);
  const std::size_t b = v.dim(0), stride = v.size() / b;
  Tensor<T> out({b});
  auto arg = std::make_shared<std::vector<std::size_t>>(b);
  for (std::size_t n = 0; n < b; ++n) {
    std::size_t best = n * stride;
    for (std::size_t i = 1; i < stride; ++i)
      if (v[n * stride + i] > v[best]) best = n * stride + i;
    (*arg)[n] = best;
    out[n] = v[best];
  }
  return tape.record("max_per_sample", std::move(out), {x}, [=](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T>* gx = t.accumulator(x);
    for (std::size_t n = 0; n < b; ++n) (*gx)[(*arg)[n]] += g[n];
  });
}

}  // namespace despoof
