#pragma once

#include <random>
#include <string>

#include "despoof/ops.hpp"
#include "despoof/params.hpp"

namespace despoof {

/// 3x3 convolution, optionally followed by ELU and batch normalization.
template <typename T>
struct ConvUnit {
  Parameter<T>* weight = nullptr;
  Parameter<T>* bias = nullptr;
  Parameter<T>* gamma = nullptr;
  Parameter<T>* beta = nullptr;
  Parameter<T>* running_mean = nullptr;
  Parameter<T>* running_var = nullptr;
  std::size_t stride = 1;

  bool normalized() const { return gamma != nullptr; }

  Var operator()(Tape<T>& tape, Var x, Mode mode) const {
    Var y = conv2d(tape, x, tape.param(*weight), tape.param(*bias), stride);
    if (!normalized()) return y;
    y = elu(tape, y);
    return batch_norm(tape, y, tape.param(*gamma), tape.param(*beta), *running_mean, *running_var, mode);
  }
};

/// Registers `<prefix>/<w|b|gamma|beta|rmean|rvar>`. He-uniform weights (gain
/// `gain`), zero bias, gamma = 1, beta = 0, running mean 0 / variance 1.
template <typename T>
ConvUnit<T> make_conv(ParamSet<T>& params, const std::string& prefix, std::size_t cin,
                      std::size_t cout, bool normalized, std::mt19937_64& rng,
                      std::size_t stride = 1, double gain = std::sqrt(2.0)) {
  ConvUnit<T> u;
  u.stride = stride;
  u.weight = &params.add(prefix + "/w", he_uniform<T>({3, 3, cin, cout}, 9 * cin, rng, gain));
  u.bias = &params.add(prefix + "/b", Tensor<T>({cout}));
  if (normalized) {
    u.gamma = &params.add(prefix + "/gamma", Tensor<T>({cout}, T(1)));
    u.beta = &params.add(prefix + "/beta", Tensor<T>({cout}));
    u.running_mean = &params.add(prefix + "/rmean", Tensor<T>({cout}), false);
    u.running_var = &params.add(prefix + "/rvar", Tensor<T>({cout}, T(1)), false);
  }
  return u;
}

/// Trainable scalars of one conv unit.
constexpr std::size_t conv_param_count(std::size_t cin, std::size_t cout, bool normalized) {
  return 9 * cin * cout + cout + (normalized ? 2 * cout : 0);
}

template <typename T>
struct DenseUnit {
  Parameter<T>* weight = nullptr;
  Parameter<T>* bias = nullptr;

  Var operator()(Tape<T>& tape, Var x) const {
    return fully_connected(tape, x, tape.param(*weight), tape.param(*bias));
  }
};

template <typename T>
DenseUnit<T> make_dense(ParamSet<T>& params, const std::string& prefix, std::size_t in,
                        std::size_t out, std::mt19937_64& rng, double gain = std::sqrt(2.0)) {
  DenseUnit<T> u;
  u.weight = &params.add(prefix + "/w", he_uniform<T>({in, out}, in, rng, gain));
  u.bias = &params.add(prefix + "/b", Tensor<T>({out}));
  return u;
}

}  // namespace despoof
