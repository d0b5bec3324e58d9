#pragma once

#include <random>
#include <vector>

#include "despoof/despoof_net.hpp"
#include "despoof/fft.hpp"
#include "despoof/ops.hpp"
#include "despoof/quality_nets.hpp"

namespace despoof {

struct LossWeights {
  double lambda1 = 3.0;    // magnitude
  double lambda2 = 0.005;  // repetitive
  double lambda3 = 0.1;    // DQ
  double lambda4 = 0.016;  // VQ (generator side)
  /// Low-frequency mask size; 0 selects S/4.
  std::size_t k = 0;
  /// Apply the magnitude loss to spoof samples too (ablation switch).
  bool magnitude_on_all = false;

  std::size_t mask_size(std::size_t image_size) const { return k ? k : image_size / 4; }
};

/// Per-batch supervision. map_target is all-zero for live, all-one for spoof;
/// face_depth is the depth of the underlying live face for every sample.
template <typename T>
struct BatchLabels {
  std::vector<bool> spoof;
  Tensor<T> map_target;  // [B,S/8,S/8,1]
  Tensor<T> face_depth;  // [B,S/8,S/8,1]

  std::vector<std::size_t> indices(bool want_spoof) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < spoof.size(); ++i)
      if (spoof[i] == want_spoof) out.push_back(i);
    return out;
  }
};

template <typename T>
BatchLabels<T> make_batch_labels(std::vector<bool> spoof, Tensor<T> face_depth) {
  const Shape s = face_depth.shape();
  if (s.size() != 4 || s[0] != spoof.size() || s[3] != 1)
    throw ShapeError("batch labels: depth " + to_string(s) + " does not match " +
                     std::to_string(spoof.size()) + " samples");
  BatchLabels<T> labels{std::move(spoof), Tensor<T>(s), std::move(face_depth)};
  const std::size_t per = labels.map_target.size() / s[0];
  for (std::size_t b = 0; b < s[0]; ++b)
    std::fill_n(labels.map_target.raw() + b * per, per, labels.spoof[b] ? T(1) : T(0));
  return labels;
}

/// Pseudo-depth targets for DQ pretraining: live -> face depth, spoof -> 0.
template <typename T>
Tensor<T> pseudo_depth_targets(const std::vector<bool>& spoof, const Tensor<T>& face_depth) {
  Tensor<T> out = face_depth;
  const std::size_t per = out.size() / out.dim(0);
  for (std::size_t b = 0; b < spoof.size(); ++b)
    if (spoof[b]) std::fill_n(out.raw() + b * per, per, T(0));
  return out;
}

/// Sets a parameter set non-trainable for the guard's lifetime.
template <typename T>
class FreezeGuard {
 public:
  explicit FreezeGuard(ParamSet<T>& params) : params_(params) {
    for (std::size_t i = 0; i < params_.size(); ++i) saved_.push_back(params_[i].trainable);
    params_.set_trainable(false);
  }
  ~FreezeGuard() {
    for (std::size_t i = 0; i < params_.size(); ++i) params_[i].trainable = saved_[i];
  }
  FreezeGuard(const FreezeGuard&) = delete;
  FreezeGuard& operator=(const FreezeGuard&) = delete;

 private:
  ParamSet<T>& params_;
  std::vector<bool> saved_;
};

/// ||N||_1 over the live samples (or all samples when `on_all`); 0 without any.
template <typename T>
Var magnitude_loss(Tape<T>& tape, Var noise, const std::vector<bool>& spoof, bool on_all = false) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < spoof.size(); ++i)
    if (on_all || !spoof[i]) idx.push_back(i);
  if (idx.empty()) return tape.constant(Tensor<T>({1}));
  if (idx.size() == spoof.size()) return l1_norm(tape, noise);
  return l1_norm(tape, gather_batch(tape, noise, idx));
}

/// ||map01 - M||_1.
template <typename T>
Var zero_one_map_loss(Tape<T>& tape, Var map01, const Tensor<T>& target) {
  if (tape.shape(map01) != target.shape())
    throw ShapeError("zero_one_map_loss: prediction " + to_string(tape.shape(map01)) + " vs target " +
                     to_string(target.shape()));
  return l1_norm(tape, sub(tape, map01, tape.constant(target)));
}

/// Peak of the masked, shifted magnitude spectrum per sample (max over all
/// channels): [B,S,S,C] -> [B].
template <typename T>
Var high_frequency_peak(Tape<T>& tape, Var noise, std::size_t k) {
  const Shape& s = tape.shape(noise);
  if (s.size() != 4) throw ShapeError("repetitive_loss: expected NHWC noise, got " + to_string(s));
  if (k == 0 || k % 2 || k >= s[1] || k >= s[2])
    throw ConfigError("repetitive_loss: mask size k=" + std::to_string(k) + " must be even, positive and below " +
                      std::to_string(std::min(s[1], s[2])));
  Var spec = magnitude(tape, fft2d(tape, to_planes(tape, noise)));
  return max_per_sample(tape, zero_center(tape, fftshift(tape, spec), k));
}

/// Batch mean of -peak for spoof samples and +peak for live samples. The
/// peak is taken on the spectrum divided by H*W, the same per-pixel scale as
/// the mean-absolute losses, so the weight does not depend on image size.
template <typename T>
Var repetitive_loss(Tape<T>& tape, Var noise, const std::vector<bool>& spoof, std::size_t k) {
  Var peaks = high_frequency_peak(tape, noise, k);
  if (tape.value(peaks).size() != spoof.size()) throw ShapeError("repetitive_loss: label count mismatch");
  const Shape& s = tape.shape(noise);
  const T scale = T(1) / (T(spoof.size()) * T(s[1] * s[2]));
  std::vector<T> w(spoof.size());
  for (std::size_t i = 0; i < spoof.size(); ++i) w[i] = spoof[i] ? -scale : scale;
  return dot_constant(tape, peaks, std::move(w));
}

/// ||DQ(live_hat) - D||_1 through a frozen DQ Net.
template <typename T>
Var dq_loss(Tape<T>& tape, DepthNet<T>& dq, Var live_hat, const Tensor<T>& face_depth) {
  if (!dq.frozen()) throw ConfigError("dq_loss: DQ Net must be frozen");
  Var depth = dq.forward(tape, live_hat, Mode::eval);
  if (tape.shape(depth) != face_depth.shape())
    throw ShapeError("dq_loss: depth " + to_string(tape.shape(depth)) + " vs target " + to_string(face_depth.shape()));
  return l1_norm(tape, sub(tape, depth, tape.constant(face_depth)));
}

/// -E_real log p_real(I) - E_synth log(1 - p_real(I_hat)), with both sets
/// passed through the discriminator as one batch.
template <typename T>
Var vq_discriminator_loss(Tape<T>& tape, VisualQualityNet<T>& vq, Var real, Var synth, std::mt19937_64& rng,
                          Mode mode = Mode::train) {
  const std::size_t nr = tape.shape(real).at(0), ns = tape.shape(synth).at(0);
  if (nr == 0 || ns == 0) throw ShapeError("vq_discriminator_loss: empty batch");
  Var logits = vq.forward(tape, concat_batch(tape, {real, synth}), mode, rng);
  std::vector<std::size_t> ri(nr), si(ns);
  for (std::size_t i = 0; i < nr; ++i) ri[i] = i;
  for (std::size_t i = 0; i < ns; ++i) si[i] = nr + i;
  Var lr = softmax_ce(tape, gather_batch(tape, logits, ri), std::vector<int>(nr, 0));
  Var ls = softmax_ce(tape, gather_batch(tape, logits, si), std::vector<int>(ns, 1));
  return add(tape, lr, ls);
}

/// Reconstructions of `spoof_images` by a DS Net held fixed (frozen mode, no
/// tape shared with the caller), ready to be fed to the discriminator.
template <typename T>
Tensor<T> synthesize_live(DespoofNet<T>& ds, const Tensor<T>& images, const std::vector<std::size_t>& pick) {
  FreezeGuard<T> guard(ds.params());
  Tape<T> scratch;
  DsOutput out = ds.forward(scratch, scratch.constant(images), Mode::frozen);
  Var sel = gather_batch(scratch, out.live_hat, pick);
  return scratch.value(sel);
}

/// -E_synth log p_real(I_hat) with the discriminator held fixed.
template <typename T>
Var vq_generator_loss(Tape<T>& tape, VisualQualityNet<T>& vq, Var synth, Mode vq_mode = Mode::eval) {
  const std::size_t ns = tape.shape(synth).at(0);
  if (ns == 0) throw ShapeError("vq_generator_loss: empty batch");
  FreezeGuard<T> guard(vq.params());
  std::mt19937_64 unused(0);
  Var logits = vq.forward(tape, synth, vq_mode, unused);
  return softmax_ce(tape, logits, std::vector<int>(ns, 0));
}

struct LossValues {
  double zero_one = 0, magnitude = 0, repetitive = 0, dq = 0, vq = 0, total = 0;
};

inline double weighted_total(const LossValues& c, const LossWeights& w) {
  return c.zero_one + w.lambda1 * c.magnitude + w.lambda2 * c.repetitive + w.lambda3 * c.dq + w.lambda4 * c.vq;
}

struct TotalLoss {
  Var total, zero_one, magnitude, repetitive, dq, vq;
  DsOutput ds;
};

/// J_T = J_z + l1 J_m + l2 J_r + l3 J_DQ + l4 J_VQ on one batch.
template <typename T>
TotalLoss total_loss(Tape<T>& tape, DespoofNet<T>& ds, DepthNet<T>& dq, VisualQualityNet<T>& vq, Var input,
                     const BatchLabels<T>& labels, const LossWeights& weights, Mode ds_mode = Mode::train,
                     Mode vq_mode = Mode::eval) {
  TotalLoss out;
  out.ds = ds.forward(tape, input, ds_mode);
  const std::size_t size = tape.shape(input)[1];
  out.zero_one = zero_one_map_loss(tape, out.ds.map01, labels.map_target);
  out.magnitude = magnitude_loss(tape, out.ds.noise, labels.spoof, weights.magnitude_on_all);
  out.repetitive = repetitive_loss(tape, out.ds.noise, labels.spoof, weights.mask_size(size));
  out.dq = dq_loss(tape, dq, out.ds.live_hat, labels.face_depth);
  out.vq = vq_generator_loss(tape, vq, gather_batch(tape, out.ds.live_hat, labels.indices(true)), vq_mode);
  out.total = weighted_sum(tape, {out.zero_one, out.magnitude, out.repetitive, out.dq, out.vq},
                           {1.0, weights.lambda1, weights.lambda2, weights.lambda3, weights.lambda4});
  return out;
}

template <typename T>
LossValues loss_values(const Tape<T>& tape, const TotalLoss& l) {
  auto v = [&](Var x) { return double(tape.value(x)[0]); };
  return {v(l.zero_one), v(l.magnitude), v(l.repetitive), v(l.dq), v(l.vq), v(l.total)};
}

}  // namespace despoof
