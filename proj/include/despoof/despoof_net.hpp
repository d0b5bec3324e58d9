#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "despoof/layers.hpp"

namespace despoof {

inline constexpr std::size_t kImageChannels = 6;  // RGB + HSV

/// Which tensor the decoder upsamples. `features` is the encoder output F
/// (conv1-10 and conv1-11 responses); `shortcut` is the concatenated pooled
/// maps that feed conv1-10.
enum class DecoderInput { features, shortcut };

struct DsConfig {
  DecoderInput decoder_input = DecoderInput::features;
  /// Init gain of the linear noise layer (1 = variance-preserving for a
  /// layer without activation).
  double noise_init_gain = 1.0;
};

/// Outputs of one de-spoofing pass. live_hat is input - noise.
struct DsOutput {
  Var noise;     // [B,S,S,6]
  Var map01;     // [B,S/8,S/8,1]
  Var live_hat;  // [B,S,S,6]
  Var features;  // [B,S/8,S/8,44]
};

/// Encoder-decoder that estimates the spoof noise of a 6-channel face image.
template <typename T>
class DespoofNet {
 public:
  // conv1-0 .. conv1-12
  static constexpr std::array<std::size_t, 13> kEncoder = {24, 20, 25, 20, 20, 25, 20,
                                                           20, 25, 20, 28, 16, 1};
  // conv2-1 .. conv2-8
  static constexpr std::array<std::size_t, 8> kDecoder = {28, 24, 20, 20, 20, 16, 16, 6};
  static constexpr std::size_t kShortcutChannels = 20 + 20 + 20;
  static constexpr std::size_t kFeatureChannels = 28 + 16;

  explicit DespoofNet(const DsConfig& config = {}, std::uint64_t seed = 1) : config_(config) {
    std::mt19937_64 rng(seed);
    std::size_t cin = kImageChannels;
    for (std::size_t i = 0; i < kEncoder.size(); ++i) {
      const bool linear = i == 12;
      // conv1-12 reads conv1-11; conv1-10 reads the 60-channel shortcut.
      if (i == 10) cin = kShortcutChannels;
      encoder_.push_back(make_conv(params_, "ds/conv1-" + std::to_string(i), cin, kEncoder[i],
                                   !linear, rng));
      cin = kEncoder[i];
    }
    cin = decoder_in_channels(config_);
    for (std::size_t i = 0; i < kDecoder.size(); ++i) {
      const bool linear = i + 1 == kDecoder.size();
      decoder_.push_back(make_conv(params_, "ds/conv2-" + std::to_string(i + 1), cin, kDecoder[i],
                                   !linear, rng, 1, linear ? config_.noise_init_gain : std::sqrt(2.0)));
      cin = kDecoder[i];
    }
  }

  DsOutput forward(Tape<T>& tape, Var input, Mode mode) {
    const Shape& s = tape.shape(input);
    if (s.size() != 4 || s[3] != kImageChannels)
      throw ShapeError("ds_forward: expected [B,S,S,6] input, got " + to_string(s));
    if (s[1] != s[2] || !is_power_of_two(s[1]) || s[1] < 8)
      throw ShapeError("ds_forward: spatial size must be a square power of two >= 8, got " + to_string(s));
    const std::size_t size = s[1];

    Var x = input;
    std::vector<Var> pools;
    for (std::size_t block = 0; block < 3; ++block) {
      const std::size_t first = block == 0 ? 0 : 1 + 3 * block;
      const std::size_t last = 3 + 3 * block;
      for (std::size_t i = first; i <= last; ++i) x = encoder_[i](tape, x, mode);
      x = max_pool2(tape, x);
      pools.push_back(x);
    }
    // Harmonize pool1-1 (S/2) and pool1-2 (S/4) down to pool1-3's S/8.
    Var shortcut = concat_channels(tape, {avg_pool(tape, pools[0], 4), avg_pool(tape, pools[1], 2), pools[2]});
    Var c10 = encoder_[10](tape, shortcut, mode);
    Var c11 = encoder_[11](tape, c10, mode);
    DsOutput out;
    out.features = concat_channels(tape, {c10, c11});
    out.map01 = encoder_[12](tape, c11, mode);

    Var d = resize_bilinear(tape, config_.decoder_input == DecoderInput::features ? out.features : shortcut,
                            size, size);
    for (auto& unit : decoder_) d = unit(tape, d, mode);
    out.noise = d;
    out.live_hat = sub(tape, input, out.noise);
    return out;
  }

  ParamSet<T>& params() { return params_; }
  const ParamSet<T>& params() const { return params_; }
  const DsConfig& config() const { return config_; }

  static std::size_t decoder_in_channels(const DsConfig& c) {
    return c.decoder_input == DecoderInput::features ? kFeatureChannels : kShortcutChannels;
  }

  /// Trainable scalar count; independent of the input size.
  static std::size_t param_count(const DsConfig& c = {}) {
    std::size_t n = 0, cin = kImageChannels;
    for (std::size_t i = 0; i < kEncoder.size(); ++i) {
      if (i == 10) cin = kShortcutChannels;
      n += conv_param_count(cin, kEncoder[i], i != 12);
      cin = kEncoder[i];
    }
    cin = decoder_in_channels(c);
    for (std::size_t i = 0; i < kDecoder.size(); ++i) {
      n += conv_param_count(cin, kDecoder[i], i + 1 != kDecoder.size());
      cin = kDecoder[i];
    }
    return n;
  }

 private:
  DsConfig config_;
  ParamSet<T> params_;
  std::vector<ConvUnit<T>> encoder_;
  std::vector<ConvUnit<T>> decoder_;
};

}  // namespace despoof
