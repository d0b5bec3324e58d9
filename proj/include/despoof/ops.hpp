#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "despoof/tape.hpp"
#include "despoof/tensor.hpp"

namespace despoof {

/// How a network behaves during a forward pass.
///  - train:  batch statistics, running statistics updated, dropout active.
///  - frozen: batch statistics, running statistics untouched, dropout off.
///            Used for a network held fixed while another one is updated.
///  - eval:   running statistics, dropout off.
enum class Mode { train, frozen, eval };

inline constexpr double kBatchNormEpsilon = 1e-5;
inline constexpr double kBatchNormMomentum = 0.99;

namespace detail {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMatrix = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMapMatrix = Eigen::Map<const RowMatrix<T>>;

inline void require_rank(const Shape& s, std::size_t rank, const char* op) {
  if (s.size() != rank)
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) +
                     ", got " + to_string(s));
}

// Gathers 3x3 "same"-padded patches of one image into rows of `col`
// (out_h*out_w rows, 9*cin columns, kernel-major then channel).
template <typename T>
void im2col(const T* img, std::size_t h, std::size_t w, std::size_t cin,
            std::size_t stride, std::size_t out_h, std::size_t out_w, T* col) {
  const std::size_t k = 9 * cin;
  for (std::size_t oy = 0; oy < out_h; ++oy) {
    for (std::size_t ox = 0; ox < out_w; ++ox) {
      T* row = col + (oy * out_w + ox) * k;
      for (int ky = 0; ky < 3; ++ky) {
        const long iy = static_cast<long>(oy * stride) + ky - 1;
        for (int kx = 0; kx < 3; ++kx) {
          const long ix = static_cast<long>(ox * stride) + kx - 1;
          T* dst = row + (ky * 3 + kx) * cin;
          if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(w)) {
            std::fill(dst, dst + cin, T(0));
          } else {
            const T* src = img + (static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix)) * cin;
            std::copy(src, src + cin, dst);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* col, std::size_t h, std::size_t w, std::size_t cin,
            std::size_t stride, std::size_t out_h, std::size_t out_w, T* img) {
  const std::size_t k = 9 * cin;
  for (std::size_t oy = 0; oy < out_h; ++oy) {
    for (std::size_t ox = 0; ox < out_w; ++ox) {
      const T* row = col + (oy * out_w + ox) * k;
      for (int ky = 0; ky < 3; ++ky) {
        const long iy = static_cast<long>(oy * stride) + ky - 1;
        if (iy < 0 || iy >= static_cast<long>(h)) continue;
        for (int kx = 0; kx < 3; ++kx) {
          const long ix = static_cast<long>(ox * stride) + kx - 1;
          if (ix < 0 || ix >= static_cast<long>(w)) continue;
          const T* src = row + (ky * 3 + kx) * cin;
          T* dst = img + (static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix)) * cin;
          for (std::size_t c = 0; c < cin; ++c) dst[c] += src[c];
        }
      }
    }
  }
}

}  // namespace detail

/// 3x3 convolution with zero padding of one pixel and the given stride.
template <typename T>
Var conv2d(Tape<T>& tape, Var input, Var weight, Var bias, std::size_t stride = 1) {
  const Shape& xs = tape.shape(input);
  const Shape& ws = tape.shape(weight);
  detail::require_rank(xs, 4, "conv2d input");
  detail::require_rank(ws, 4, "conv2d weight");
  if (ws[0] != 3 || ws[1] != 3 || ws[2] != xs[3])
    throw ShapeError("conv2d: input " + to_string(xs) + " is incompatible with weight " +
                     to_string(ws));
  if (tape.shape(bias) != Shape{ws[3]})
    throw ShapeError("conv2d: bias " + to_string(tape.shape(bias)) + " does not match weight " +
                     to_string(ws));
  if (stride == 0 || xs[1] % stride || xs[2] % stride)
    throw ShapeError("conv2d: spatial size " + to_string(xs) + " not divisible by stride " +
                     std::to_string(stride));

  const std::size_t batch = xs[0], h = xs[1], w = xs[2], cin = xs[3], cout = ws[3];
  const std::size_t oh = h / stride, ow = w / stride, rows = oh * ow, k = 9 * cin;

  Tensor<T> out({batch, oh, ow, cout});
  std::vector<T> col(rows * k);
  const auto& x = tape.value(input);
  detail::ConstMapMatrix<T> W(tape.value(weight).raw(), k, cout);
  Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> bvec(tape.value(bias).raw(), cout);
  for (std::size_t b = 0; b < batch; ++b) {
    detail::im2col(x.raw() + b * h * w * cin, h, w, cin, stride, oh, ow, col.data());
    detail::ConstMapMatrix<T> C(col.data(), rows, k);
    detail::MapMatrix<T> Y(out.raw() + b * rows * cout, rows, cout);
    Y.noalias() = C * W;
    Y.rowwise() += bvec;
  }

  return tape.record(
      "conv2d", std::move(out), {input, weight, bias},
      [=](Tape<T>& t, const Tensor<T>& g) {
        Tensor<T>* gx = t.accumulator(input);
        Tensor<T>* gw = t.accumulator(weight);
        Tensor<T>* gb = t.accumulator(bias);
        const auto& xv = t.value(input);
        detail::ConstMapMatrix<T> Wm(t.value(weight).raw(), k, cout);
        std::vector<T> colb(rows * k);
        detail::RowMatrix<T> dW;
        if (gw) dW = detail::RowMatrix<T>::Zero(k, cout);
        for (std::size_t b = 0; b < batch; ++b) {
          detail::ConstMapMatrix<T> G(g.raw() + b * rows * cout, rows, cout);
          if (gw) {
            detail::im2col(xv.raw() + b * h * w * cin, h, w, cin, stride, oh, ow, colb.data());
            detail::ConstMapMatrix<T> C(colb.data(), rows, k);
            dW.noalias() += C.transpose() * G;
          }
          if (gb) {
            T* db = gb->raw();
            for (std::size_t r = 0; r < rows; ++r)
              for (std::size_t c = 0; c < cout; ++c) db[c] += G(r, c);
          }
          if (gx) {
            detail::MapMatrix<T> D(colb.data(), rows, k);
            D.noalias() = G * Wm.transpose();
            detail::col2im(colb.data(), h, w, cin, stride, oh, ow, gx->raw() + b * h * w * cin);
          }
        }
        if (gw) {
          detail::MapMatrix<T> GW(gw->raw(), k, cout);
          GW += dW;
        }
      });
}

/// Exponential linear unit with alpha = 1; the derivative at 0 is 1.
template <typename T>
Var elu(Tape<T>& tape, Var x) {
  const auto& xv = tape.value(x);
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i)
    out[i] = xv[i] > T(0) ? xv[i] : std::expm1(xv[i]);
  return tape.record("elu", std::move(out), {x}, [=](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T>* gx = t.accumulator(x);
    const auto& in = t.value(x);
    for (std::size_t i = 0; i < in.size(); ++i)
      (*gx)[i] += g[i] * (in[i] > T(0) ? T(1) : std::exp(in[i]));
  });
}

/// Per-channel (last axis) batch normalization.
///
/// `running_mean` / `running_var` are updated with momentum 0.99 in train mode
/// and read in eval mode. Batch statistics need at least two batch items.
template <typename T>
Var batch_norm(Tape<T>& tape, Var x, Var gamma, Var beta, Parameter<T>& running_mean,
               Parameter<T>& running_var, Mode mode) {
  const auto& xv = tape.value(x);
  const Shape& xs = xv.shape();
  const std::size_t channels = xs.back();
  const std::size_t m = xv.size() / channels;
  if (tape.shape(gamma) != Shape{channels} || tape.shape(beta) != Shape{channels} ||
      running_mean.value.shape() != Shape{channels} || running_var.value.shape() != Shape{channels})
    throw ShapeError("batch_norm: parameter shapes do not match input " + to_string(xs));

  const T eps = T(kBatchNormEpsilon);
  const bool batch_stats = mode != Mode::eval;
  if (batch_stats && xs[0] < 2)
    throw ShapeError("batch_norm: batch statistics need batch size >= 2, got " + to_string(xs));

  std::vector<T> mean(channels, T(0)), inv_std(channels);
  if (batch_stats) {
    std::vector<T> var(channels, T(0));
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t c = 0; c < channels; ++c) mean[c] += xv[i * channels + c];
    for (auto& v : mean) v /= T(m);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t c = 0; c < channels; ++c) {
        const T d = xv[i * channels + c] - mean[c];
        var[c] += d * d;
      }
    for (std::size_t c = 0; c < channels; ++c) {
      var[c] /= T(m);
      inv_std[c] = T(1) / std::sqrt(var[c] + eps);
    }
    if (mode == Mode::train) {
      const T mom = T(kBatchNormMomentum);
      const T unbias = m > 1 ? T(m) / T(m - 1) : T(1);
      for (std::size_t c = 0; c < channels; ++c) {
        running_mean.value[c] = mom * running_mean.value[c] + (T(1) - mom) * mean[c];
        running_var.value[c] = mom * running_var.value[c] + (T(1) - mom) * var[c] * unbias;
      }
    }
  } else {
    for (std::size_t c = 0; c < channels; ++c) {
      mean[c] = running_mean.value[c];
      inv_std[c] = T(1) / std::sqrt(running_var.value[c] + eps);
    }
  }

  const auto& gv = tape.value(gamma);
  const auto& bv = tape.value(beta);
  auto xhat = std::make_shared<std::vector<T>>(xv.size());
  Tensor<T> out(xs);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t c = 0; c < channels; ++c) {
      const std::size_t j = i * channels + c;
      (*xhat)[j] = (xv[j] - mean[c]) * inv_std[c];
      out[j] = gv[c] * (*xhat)[j] + bv[c];
    }

  return tape.record(
      "batch_norm", std::move(out), {x, gamma, beta},
      [=, inv_std = std::move(inv_std)](Tape<T>& t, const Tensor<T>& g) {
        Tensor<T>* gx = t.accumulator(x);
        Tensor<T>* gg = t.accumulator(gamma);
        Tensor<T>* gb = t.accumulator(beta);
        const auto& gam = t.value(gamma);
        std::vector<T> sum_g(channels, T(0)), sum_gx(channels, T(0));
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t c = 0; c < channels; ++c) {
            const std::size_t j = i * channels + c;
            sum_g[c] += g[j];
            sum_gx[c] += g[j] * (*xhat)[j];
          }
        if (gg)
          for (std::size_t c = 0; c < channels; ++c) (*gg)[c] += sum_gx[c];
        if (gb)
          for (std::size_t c = 0; c < channels; ++c) (*gb)[c] += sum_g[c];
        if (!gx) return;
        if (batch_stats) {
          const T inv_m = T(1) / T(m);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t c = 0; c < channels; ++c) {
              const std::size_t j = i * channels + c;
              (*gx)[j] += gam[c] * inv_std[c] *
                          (g[j] - sum_g[c] * inv_m - (*xhat)[j] * sum_gx[c] * inv_m);
            }
        } else {
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t c = 0; c < channels; ++c) {
              const std::size_t j = i * channels + c;
              (*gx)[j] += gam[c] * inv_std[c] * g[j];
            }
        }
      });
}

/// 2x2 max pooling with stride 2. Ties go to the first element in row-major
/// window order.
template <typename T>
Var max_pool2(Tape<T>& tape, Var x) {
  const auto& xv = tape.value(x);
  const Shape& xs = xv.shape();
  detail::require_rank(xs, 4, "max_pool2");
  if (xs[1] % 2 || xs[2] % 2)
    throw ShapeError("max_pool2: odd spatial size " + to_string(xs));
  const std::size_t batch = xs[0], h = xs[1], w = xs[2], c = xs[3];
  const std::size_t oh = h / 2, ow = w / 2;
  Tensor<T> out({batch, oh, ow, c});
  auto argmax = std::make_shared<std::vector<std::uint32_t>>(out.size());
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox)
        for (std::size_t ch = 0; ch < c; ++ch) {
          std::size_t best = ((b * h + 2 * oy) * w + 2 * ox) * c + ch;
          for (std::size_t dy = 0; dy < 2; ++dy)
            for (std::size_t dx = 0; dx < 2; ++dx) {
              const std::size_t j = ((b * h + 2 * oy + dy) * w + 2 * ox + dx) * c + ch;
              if (xv[j] > xv[best]) best = j;
            }
          const std::size_t o = ((b * oh + oy) * ow + ox) * c + ch;
          out[o] = xv[best];
          (*argmax)[o] = static_cast<std::uint32_t>(best);
        }
  return tape.record("max_pool2", std::move(out), {x}, [=](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T>* gx = t.accumulator(x);
    for (std::size_t o = 0; o < g.size(); ++o) (*gx)[(*argmax)[o]] += g[o];
  });
}

/// Average pooling over non-overlapping factor x factor windows.
template <typename T>
Var avg_pool(Tape<T>& tape, Var x, std::size_t factor) {
  const auto& xv = tape.value(x);
  const Shape& xs = xv.shape();
  detail::require_rank(xs, 4, "avg_pool");
  if (factor == 0 || xs[1] % factor || xs[2] % factor)
    throw ShapeError("avg_pool: size " + to_string(xs) + " not divisible by " +
                     std::to_string(factor));
  if (factor == 1) return x;
  const std::size_t batch = xs[0], h = xs[1], w = xs[2], c = xs[3];
  const std::size_t oh = h / factor, ow = w / factor;
  const T scale = T(1) / T(factor * factor);
  Tensor<T> out({batch, oh, ow, c});
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t xx = 0; xx < w; ++xx)
        for (std::size_t ch = 0; ch < c; ++ch)
          out(b, y / factor, xx / factor, ch) += xv(b, y, xx, ch) * scale;
  return tape.record("avg_pool", std::move(out), {x}, [=](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T>* gx = t.accumulator(x);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t xx = 0; xx < w; ++xx)
          for (std::size_t ch = 0; ch < c; ++ch)
            (*gx)(b, y, xx, ch) += g(b, y / factor, xx / factor, ch) * scale;
  });
}

namespace detail {

// Corner-aligned source coordinates for upsampling `in` samples to `out`.
struct LerpTap {
  std::size_t lo, hi;
  double frac;
};

inline std::vector<LerpTap> lerp_taps(std::size_t in, std::size_t out) {
  std::vector<LerpTap> taps(out);
  for (std::size_t i = 0; i < out; ++i) {
    const double src = out > 1 ? double(i) * double(in - 1) / double(out - 1) : 0.0;
    std::size_t lo = static_cast<std::size_t>(std::floor(src));
    if (lo >= in - 1) lo = in - 1;
    const std::size_t hi = std::min(lo + 1, in - 1);
    taps[i] = {lo, hi, src - double(lo)};
  }
  return taps;
}

}  // namespace detail

/// Bilinear upsampling with corner alignment.
template <typename T>
Var resize_bilinear(Tape<T>& tape, Var x, std::size_t out_h, std::size_t out_w) {
  const auto& xv = tape.value(x);
  const Shape& xs = xv.shape();
  detail::require_rank(xs, 4, "resize_bilinear");
  if (out_h < xs[1] || out_w < xs[2])
    throw ShapeError("resize_bilinear: target " + std::to_string(out_h) + "x" +
                     std::to_string(out_w) + " is smaller than source " + to_string(xs));
  const std::size_t batch = xs[0], h = xs[1], w = xs[2], c = xs[3];
  auto ty = std::make_shared<std::vector<detail::LerpTap>>(detail::lerp_taps(h, out_h));
  auto tx = std::make_shared<std::vector<detail::LerpTap>>(detail::lerp_taps(w, out_w));
  Tensor<T> out({batch, out_h, out_w, c});
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t y = 0; y < out_h; ++y) {
      const auto& a = (*ty)[y];
      const T fy = T(a.frac);
      for (std::size_t xx = 0; xx < out_w; ++xx) {
        const auto& e = (*tx)[xx];
        const T fx = T(e.frac);
        for (std::size_t ch = 0; ch < c; ++ch) {
          const T top = xv(b, a.lo, e.lo, ch) * (T(1) - fx) + xv(b, a.lo, e.hi, ch) * fx;
          const T bot = xv(b, a.hi, e.lo, ch) * (T(1) - fx) + xv(b, a.hi, e.hi, ch) * fx;
          out(b, y, xx, ch) = top * (T(1) - fy) + bot * fy;
        }
      }
    }
  return tape.record("resize_bilinear", std::move(out), {x}, [=](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T>* gx = t.accumulator(x);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t y = 0; y < out_h; ++y) {
        const auto& a = (*ty)[y];
        const T fy = T(a.frac);
        for (std::size_t xx = 0; xx < out_w; ++xx) {
          const auto& e = (*tx)[xx];
          const T fx = T(e.frac);
          for (std::size_t ch = 0; ch < c; ++ch) {
            const T gv = g(b, y, xx, ch);
            (*gx)(b, a.lo, e.lo, ch) += gv * (T(1) - fy) * (T(1) - fx);
            (*gx)(b, a.lo, e.hi, ch) += gv * (T(1) - fy) * fx;
            (*gx)(b, a.hi, e.lo, ch) += gv * fy * (T(1) - fx);
            (*gx)(b, a.hi, e.hi, ch) += gv * fy * fx;
          }
        }
      }
  });
}

/// Concatenation along the channel (last) axis, in argument order.
template <typename T>
Var concat_channels(Tape<T>& tape, const std::vector<Var>& xs) {
  if (xs.empty()) throw ShapeError("concat_channels: no inputs");
  if (xs.size() == 1) return xs.front();
  const Shape& first = tape.shape(xs[0]);
  detail::require_rank(first, 4, "concat_channels");
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (Var v : xs) {
    const Shape& s = tape.shape(v);
    if (s.size() != 4 || s[0] != first[0] || s[1] != first[1] || s[2] != first[2])
      throw ShapeError("concat_channels: " + to_string(s) + " does not match " + to_string(first));
    widths.push_back(s[3]);
    total += s[3];
  }
  const std::size_t pixels = first[0] * first[1] * first[2];
  Tensor<T> out({first[0], first[1], first[2], total});
  std::size_t offset = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const auto& v = tape.value(xs[i]);
    for (std::size_t p = 0; p < pixels; ++p)
      std::copy_n(v.raw() + p * widths[i], widths[i], out.raw() + p * total + offset);
    offset += widths[i];
  }
  return tape.record("concat_channels", std::move(out), xs,
                     [=](Tape<T>& t, const Tensor<T>& g) {
                       std::size_t off = 0;
                       for (std::size_t i = 0; i < xs.size(); ++i) {
                         if (Tensor<T>* gx = t.accumulator(xs[i]))
                           for (std::size_t p = 0; p < pixels; ++p)
                             for (std::size_t c = 0; c < widths[i]; ++c)
                               gx->raw()[p * widths[i] + c] += g.raw()[p * total + off + c];
                         off += widths[i];
                       }
                     });
}

/// Collapses every axis after the first: [B, ...] -> [B, D].
template <typename T>
Var flatten(Tape<T>& tape, Var x) {
  const auto& v = tape.value(x);
  const std::size_t batch = v.dim(0);
  Tensor<T> out = v.reshaped({batch, v.size() / batch});
  return tape.record("flatten", std::move(out), {x}, [=](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T>* gx = t.accumulator(x);
    for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i];
  });
}

/// Affine map x W + b for x: [B, D], W: [D, K], b: [K].
template <typename T>
Var fully_connected(Tape<T>& tape, Var x, Var weight, Var bias) {
  const Shape& xs = tape.shape(x);
  const Shape& ws = tape.shape(weight);
  detail::require_rank(xs, 2, "fully_connected input");
  detail::require_rank(ws, 2, "fully_connected weight");
  if (xs[1] != ws[0] || tape.shape(bias) != Shape{ws[1]})
    throw ShapeError("fully_connected: input " + to_string(xs) + " is incompatible with weight " +
                     to_string(ws) + " and bias " + to_string(tape.shape(bias)));
  const std::size_t batch = xs[0], d = xs[1], k = ws[1];
  Tensor<T> out({batch, k});
  detail::ConstMapMatrix<T> X(tape.value(x).raw(), batch, d);
  detail::ConstMapMatrix<T> W(tape.value(weight).raw(), d, k);
  detail::MapMatrix<T> Y(out.raw(), batch, k);
  Y.noalias() = X * W;
  Y.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(tape.value(bias).raw(), k);
  return tape.record("fully_connected", std::move(out), {x, weight, bias},
                     [=](Tape<T>& t, const Tensor<T>& g) {
                       detail::ConstMapMatrix<T> G(g.raw(), batch, k);
                       if (Tensor<T>* gx = t.accumulator(x)) {
                         detail::MapMatrix<T> GX(gx->raw(), batch, d);
                         GX.noalias() += G * detail::ConstMapMatrix<T>(t.value(weight).raw(), d, k).transpose();
                       }
                       if (Tensor<T>* gw = t.accumulator(weight)) {
                         detail::MapMatrix<T> GW(gw->raw(), d, k);
                         GW.noalias() += detail::ConstMapMatrix<T>(t.value(x).raw(), batch, d).transpose() * G;
                       }
                       if (Tensor<T>* gb = t.accumulator(bias))
                         for (std::size_t r = 0; r < batch; ++r)
                           for (std::size_t c = 0; c < k; ++c) (*gb)[c] += G(r, c);
                     });
}

/// Inverted dropout: in train mode each element is zeroed with probability p
/// and survivors are scaled by 1/(1-p). Identity in other modes or for p = 0.
template <typename T>
Var dropout(Tape<T>& tape, Var x, double p, Mode mode, std::mt19937_64& rng) {
  if (!(p >= 0.0 && p < 1.0)) throw ConfigError("dropout: p must lie in [0,1), got " + std::to_string(p));
  if (mode != Mode::train || p == 0.0) return x;
  const auto& xv = tape.value(x);
  auto mask = std::make_shared<std::vector<T>>(xv.size());
  const T keep_scale = T(1.0 / (1.0 - p));
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const double u = double(rng() >> 11) * 0x1.0p-53;
    (*mask)[i] = u < p ? T(0) : keep_scale;
    out[i] = xv[i] * (*mask)[i];
  }
  return tape.record("dropout", std::move(out), {x}, [=](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T>* gx = t.accumulator(x);
    for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i] * (*mask)[i];
  });
}

/// Mean over the batch of -log softmax(logits)[label], via log-sum-exp.
template <typename T>
Var softmax_ce(Tape<T>& tape, Var logits, const std::vector<int>& labels) {
  const Shape& s = tape.shape(logits);
  detail::require_rank(s, 2, "softmax_ce");
  const std::size_t batch = s[0], k = s[1];
  if (labels.size() != batch)
    throw ShapeError("softmax_ce: " + std::to_string(labels.size()) + " labels for logits " + to_string(s));
  if (batch == 0) throw ShapeError("softmax_ce: empty batch");
  const auto& z = tape.value(logits);
  auto probs = std::make_shared<std::vector<T>>(z.size());
  T loss = T(0);
  for (std::size_t b = 0; b < batch; ++b) {
    if (labels[b] < 0 || static_cast<std::size_t>(labels[b]) >= k)
      throw ShapeError("softmax_ce: label out of range");
    const T* row = z.raw() + b * k;
    const std::size_t top = std::max_element(row, row + k) - row;
    const T mx = row[top];
    // log-sum-exp relative to the maximum, as log1p of the remaining terms
    T rest = T(0);
    for (std::size_t c = 0; c < k; ++c)
      if (c != top) rest += std::exp(row[c] - mx);
    const T lse = std::log1p(rest);
    for (std::size_t c = 0; c < k; ++c) (*probs)[b * k + c] = std::exp(row[c] - mx - lse);
    loss += lse - (row[labels[b]] - mx);
  }
  loss /= T(batch);
  return tape.record("softmax_ce", Tensor<T>({1}, {loss}), {logits},
                     [=](Tape<T>& t, const Tensor<T>& g) {
                       Tensor<T>* gz = t.accumulator(logits);
                       const T scale = g[0] / T(batch);
                       for (std::size_t b = 0; b < batch; ++b)
                         for (std::size_t c = 0; c < k; ++c) {
                           const T onehot = static_cast<std::size_t>(labels[b]) == c ? T(1) : T(0);
                           (*gz)[b * k + c] += scale * ((*probs)[b * k + c] - onehot);
                         }
                     });
}

template <typename T>
Var add(Tape<T>& tape, Var a, Var b) {
  const auto& av = tape.value(a);
  const auto& bv = tape.value(b);
  if (av.shape() != bv.shape())
    throw ShapeError("add: " + to_string(av.shape()) + " vs " + to_string(bv.shape()));
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return tape.record("add", std::move(out), {a, b}, [=](Tape<T>& t, const Tensor<T>& g) {
    for (Var v : {a, b})
      if (Tensor<T>* gv = t.accumulator(v))
        for (std::size_t i = 0; i < g.size(); ++i) (*gv)[i] += g[i];
  });
}

template <typename T>
Var sub(Tape<T>& tape, Var a, Var b) {
  const auto& av = tape.value(a);
  const auto& bv = tape.value(b);
  if (av.shape() != bv.shape())
    throw ShapeError("sub: " + to_string(av.shape()) + " vs " + to_string(bv.shape()));
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return tape.record("sub", std::move(out), {a, b}, [=](Tape<T>& t, const Tensor<T>& g) {
    if (Tensor<T>* ga = t.accumulator(a))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
    if (Tensor<T>* gb = t.accumulator(b))
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] -= g[i];
  });
}

template <typename T>
Var scale(Tape<T>& tape, Var a, double factor) {
  const auto& av = tape.value(a);
  const T f = T(factor);
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * f;
  return tape.record("scale", std::move(out), {a}, [=](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T>* ga = t.accumulator(a);
    for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * f;
  });
}

/// sum_i w_i * x_i over scalar inputs.
template <typename T>
Var weighted_sum(Tape<T>& tape, const std::vector<Var>& xs, const std::vector<double>& weights) {
  if (xs.size() != weights.size()) throw ShapeError("weighted_sum: length mismatch");
  T total = T(0);
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (tape.value(xs[i]).size() != 1) throw ShapeError("weighted_sum: inputs must be scalars");
    total += T(weights[i]) * tape.value(xs[i])[0];
  }
  return tape.record("weighted_sum", Tensor<T>({1}, {total}), xs,
                     [=](Tape<T>& t, const Tensor<T>& g) {
                       for (std::size_t i = 0; i < xs.size(); ++i)
                         if (Tensor<T>* gi = t.accumulator(xs[i])) (*gi)[0] += g[0] * T(weights[i]);
                     });
}

/// Mean absolute value: sum |x| / element count. The subgradient at 0 is 0.
template <typename T>
Var l1_norm(Tape<T>& tape, Var x) {
  const auto& v = tape.value(x);
  if (v.empty()) throw ShapeError("l1_norm: empty tensor");
  T sum = T(0);
  for (std::size_t i = 0; i < v.size(); ++i) sum += std::abs(v[i]);
  const std::size_t n = v.size();
  return tape.record("l1_norm", Tensor<T>({1}, {sum / T(n)}), {x},
                     [=](Tape<T>& t, const Tensor<T>& g) {
                       Tensor<T>* gx = t.accumulator(x);
                       const auto& in = t.value(x);
                       const T s = g[0] / T(n);
                       for (std::size_t i = 0; i < n; ++i)
                         (*gx)[i] += in[i] > T(0) ? s : (in[i] < T(0) ? -s : T(0));
                     });
}

/// Selects batch items (first axis) in the given order.
template <typename T>
Var gather_batch(Tape<T>& tape, Var x, const std::vector<std::size_t>& indices) {
  const auto& v = tape.value(x);
  Shape s = v.shape();
  const std::size_t stride = v.size() / s[0];
  for (std::size_t i : indices)
    if (i >= s[0]) throw ShapeError("gather_batch: index out of range for " + to_string(s));
  s[0] = indices.size();
  Tensor<T> out(s);
  for (std::size_t i = 0; i < indices.size(); ++i)
    std::copy_n(v.raw() + indices[i] * stride, stride, out.raw() + i * stride);
  return tape.record("gather_batch", std::move(out), {x}, [=](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T>* gx = t.accumulator(x);
    for (std::size_t i = 0; i < indices.size(); ++i)
      for (std::size_t j = 0; j < stride; ++j) gx->raw()[indices[i] * stride + j] += g.raw()[i * stride + j];
  });
}

/// Keeps the first `count` channels of an NHWC tensor.
template <typename T>
Var slice_channels(Tape<T>& tape, Var x, std::size_t first, std::size_t count) {
  const auto& v = tape.value(x);
  detail::require_rank(v.shape(), 4, "slice_channels");
  const std::size_t c = v.dim(3);
  if (first + count > c) throw ShapeError("slice_channels: range exceeds " + to_string(v.shape()));
  const std::size_t pixels = v.size() / c;
  Tensor<T> out({v.dim(0), v.dim(1), v.dim(2), count});
  for (std::size_t p = 0; p < pixels; ++p)
    std::copy_n(v.raw() + p * c + first, count, out.raw() + p * count);
  return tape.record("slice_channels", std::move(out), {x}, [=](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T>* gx = t.accumulator(x);
    for (std::size_t p = 0; p < pixels; ++p)
      for (std::size_t j = 0; j < count; ++j) gx->raw()[p * c + first + j] += g.raw()[p * count + j];
  });
}

/// Sum of all elements.
template <typename T>
Var sum(Tape<T>& tape, Var x) {
  const auto& v = tape.value(x);
  T s = T(0);
  for (std::size_t i = 0; i < v.size(); ++i) s += v[i];
  const std::size_t n = v.size();
  return tape.record("sum", Tensor<T>({1}, {s}), {x}, [=](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T>* gx = t.accumulator(x);
    for (std::size_t i = 0; i < n; ++i) (*gx)[i] += g[0];
  });
}

/// Dot product with constant weights: sum_i w_i x_i.
template <typename T>
Var dot_constant(Tape<T>& tape, Var x, std::vector<T> weights) {
  const auto& v = tape.value(x);
  if (v.size() != weights.size()) throw ShapeError("dot_constant: length mismatch");
  T s = T(0);
  for (std::size_t i = 0; i < v.size(); ++i) s += v[i] * weights[i];
  return tape.record("dot_constant", Tensor<T>({1}, {s}), {x},
                     [=, w = std::move(weights)](Tape<T>& t, const Tensor<T>& g) {
                       Tensor<T>* gx = t.accumulator(x);
                       for (std::size_t i = 0; i < w.size(); ++i) (*gx)[i] += g[0] * w[i];
                     });
}

/// Concatenation along the batch (first) axis.
template <typename T>
Var concat_batch(Tape<T>& tape, const std::vector<Var>& xs) {
  if (xs.empty()) throw ShapeError("concat_batch: no inputs");
  Shape s = tape.shape(xs[0]);
  std::size_t total = 0;
  std::vector<std::size_t> sizes;
  for (Var v : xs) {
    Shape vs = tape.shape(v);
    if (vs.size() != s.size() || !std::equal(vs.begin() + 1, vs.end(), s.begin() + 1))
      throw ShapeError("concat_batch: " + to_string(vs) + " does not match " + to_string(s));
    total += vs[0];
    sizes.push_back(tape.value(v).size());
  }
  s[0] = total;
  Tensor<T> out(s);
  std::size_t off = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    std::copy_n(tape.value(xs[i]).raw(), sizes[i], out.raw() + off);
    off += sizes[i];
  }
  return tape.record("concat_batch", std::move(out), xs, [=](Tape<T>& t, const Tensor<T>& g) {
    std::size_t o = 0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
      if (Tensor<T>* gx = t.accumulator(xs[i]))
        for (std::size_t j = 0; j < sizes[i]; ++j) (*gx)[j] += g[o + j];
      o += sizes[i];
    }
  });
}

}  // namespace despoof
