#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "despoof/despoof_net.hpp"
#include "despoof/layers.hpp"

namespace despoof {

struct DqConfig {
  /// Multiplier on the reference channel widths (1 = full width).
  double channel_scale = 0.25;
};

/// DQ Net: fully convolutional pseudo-depth estimator used as a fixed judge
/// once pretrained.
template <typename T>
class DepthNet {
 public:
  // conv3-0 .. conv3-12 at full width; conv3-12 is the 1-channel depth head.
  static constexpr std::array<std::size_t, 13> kReference = {64,  128, 196, 128, 128, 196, 128,
                                                             128, 196, 128, 128, 64,  1};

  explicit DepthNet(const DqConfig& config = {}, std::uint64_t seed = 2) : config_(config) {
    std::mt19937_64 rng(seed);
    const auto widths = channel_widths(config_);
    std::size_t cin = kImageChannels;
    for (std::size_t i = 0; i < widths.size(); ++i) {
      if (i == 10) cin = widths[3] + widths[6] + widths[9];
      layers_.push_back(make_conv(params_, "dq/conv3-" + std::to_string(i), cin, widths[i], i != 12, rng));
      cin = widths[i];
    }
  }

  static std::array<std::size_t, 13> channel_widths(const DqConfig& c) {
    std::array<std::size_t, 13> w{};
    for (std::size_t i = 0; i < w.size(); ++i)
      w[i] = i == 12 ? 1 : std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(kReference[i] * c.channel_scale)));
    return w;
  }

  /// [B,S,S,6] -> depth [B,S/8,S/8,1].
  Var forward(Tape<T>& tape, Var input, Mode mode) {
    const Shape& s = tape.shape(input);
    if (s.size() != 4 || s[3] != kImageChannels)
      throw ShapeError("dq_forward: expected [B,S,S,6] input, got " + to_string(s));
    Var x = input;
    std::vector<Var> pools;
    for (std::size_t block = 0; block < 3; ++block) {
      const std::size_t first = block == 0 ? 0 : 1 + 3 * block;
      for (std::size_t i = first; i <= 3 + 3 * block; ++i) x = layers_[i](tape, x, mode);
      x = max_pool2(tape, x);
      pools.push_back(x);
    }
    x = concat_channels(tape, {avg_pool(tape, pools[0], 4), avg_pool(tape, pools[1], 2), pools[2]});
    for (std::size_t i = 10; i < 13; ++i) x = layers_[i](tape, x, mode);
    return x;
  }

  /// After freezing no parameter of this net takes part in differentiation.
  void freeze() {
    params_.set_trainable(false);
    frozen_ = true;
  }
  bool frozen() const { return frozen_; }

  ParamSet<T>& params() { return params_; }
  const ParamSet<T>& params() const { return params_; }

 private:
  DqConfig config_;
  ParamSet<T> params_;
  std::vector<ConvUnit<T>> layers_;
  bool frozen_ = false;
};

struct VqConfig {
  std::size_t scale = 64;
  double dropout = 0.2;
};

/// VQ Net: real-vs-synthetic discriminator. Logit 0 = real, 1 = synthetic.
template <typename T>
class VisualQualityNet {
 public:
  static constexpr std::array<std::size_t, 6> kConv = {24, 20, 20, 16, 12, 6};  // conv4-1 .. conv4-6
  static constexpr std::size_t kHidden = 100;

  explicit VisualQualityNet(const VqConfig& config = {}, std::uint64_t seed = 3) : config_(config) {
    if (config_.scale % 8 || config_.scale == 0)
      throw ConfigError("vq: scale must be a positive multiple of 8");
    std::mt19937_64 rng(seed);
    std::size_t cin = kImageChannels;
    for (std::size_t i = 0; i < kConv.size(); ++i) {
      convs_.push_back(make_conv(params_, "vq/conv4-" + std::to_string(i + 1), cin, kConv[i], true, rng));
      cin = kConv[i];
    }
    const std::size_t side = config_.scale / 8;
    fc1_ = make_dense(params_, "vq/fc4-1", side * side * kConv.back(), kHidden, rng);
    fc2_ = make_dense(params_, "vq/fc4-2", kHidden, 2, rng, 1.0);
  }

  /// [B,S,S,6] -> logits [B,2]; dropout uses `rng` in train mode only.
  Var forward(Tape<T>& tape, Var input, Mode mode, std::mt19937_64& rng) {
    const Shape& s = tape.shape(input);
    if (s.size() != 4 || s[3] != kImageChannels || s[1] != config_.scale || s[2] != config_.scale)
      throw ShapeError("vq_forward: expected [B," + std::to_string(config_.scale) + "," +
                       std::to_string(config_.scale) + ",6], got " + to_string(s));
    Var x = input;
    for (std::size_t i = 0; i < convs_.size(); ++i) {
      x = convs_[i](tape, x, mode);
      if (i % 2 == 1) x = max_pool2(tape, x);
    }
    x = flatten(tape, x);
    x = elu(tape, fc1_(tape, x));
    x = dropout(tape, x, config_.dropout, mode, rng);
    return fc2_(tape, x);
  }

  ParamSet<T>& params() { return params_; }
  const ParamSet<T>& params() const { return params_; }

 private:
  VqConfig config_;
  ParamSet<T> params_;
  std::vector<ConvUnit<T>> convs_;
  DenseUnit<T> fc1_, fc2_;
};

}  // namespace despoof
