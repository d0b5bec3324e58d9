#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "despoof/params.hpp"

namespace despoof {

enum class OptimizerKind { adam, sgd };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adam;
  double learning_rate = 3e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Adam (or plain SGD) over the trainable parameters of one ParamSet.
/// Moment estimates are keyed by parameter name so they can be checkpointed.
template <typename T>
class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig config = {}) : config_(config) {}

  /// Applies one update from the gradients currently stored on `params`,
  /// then clears them. Parameters without a gradient are left untouched.
  void step(ParamSet<T>& params) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto& p = params[i];
      if (!p.trainable || !p.has_grad()) continue;
      if (!p.grad.all_finite()) throw NumericError("non-finite gradient for parameter " + p.name);
    }
    ++steps_;
    const double lr = config_.learning_rate;
    const double bc1 = 1.0 - std::pow(config_.beta1, double(steps_));
    const double bc2 = 1.0 - std::pow(config_.beta2, double(steps_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& p = params[i];
      if (!p.trainable || !p.has_grad()) continue;
      if (config_.kind == OptimizerKind::sgd) {
        for (std::size_t j = 0; j < p.value.size(); ++j) p.value[j] -= T(lr) * p.grad[j];
      } else {
        auto& st = state_[p.name];
        if (st.m.empty()) {
          st.m = Tensor<T>(p.value.shape());
          st.v = Tensor<T>(p.value.shape());
        }
        const T b1 = T(config_.beta1), b2 = T(config_.beta2);
        for (std::size_t j = 0; j < p.value.size(); ++j) {
          const T g = p.grad[j];
          st.m[j] = b1 * st.m[j] + (T(1) - b1) * g;
          st.v[j] = b2 * st.v[j] + (T(1) - b2) * g * g;
          const T mhat = st.m[j] / T(bc1);
          const T vhat = st.v[j] / T(bc2);
          p.value[j] -= T(lr) * mhat / (std::sqrt(vhat) + T(config_.epsilon));
        }
      }
      p.clear_grad();
    }
  }

  std::uint64_t steps() const { return steps_; }
  const OptimizerConfig& config() const { return config_; }

  /// Moments as container entries named `<prefix><param>/m` and `/v`.
  void export_state(const std::string& prefix, std::vector<NamedTensor>& out) const {
    for (const auto& [name, st] : state_) {
      out.push_back({prefix + name + "/m", st.m.template cast<float>()});
      out.push_back({prefix + name + "/v", st.v.template cast<float>()});
    }
  }

  void import_state(const std::string& prefix, const std::vector<NamedTensor>& entries, std::uint64_t steps) {
    state_.clear();
    steps_ = steps;
    for (const auto& e : entries) {
      if (e.name.rfind(prefix, 0) != 0) continue;
      const std::string rest = e.name.substr(prefix.size());
      const std::string param = rest.substr(0, rest.size() - 2);
      if (rest.ends_with("/m"))
        state_[param].m = e.value.template cast<T>();
      else if (rest.ends_with("/v"))
        state_[param].v = e.value.template cast<T>();
    }
  }

 private:
  struct Moments {
    Tensor<T> m, v;
  };
  OptimizerConfig config_;
  std::map<std::string, Moments> state_;
  std::uint64_t steps_ = 0;
};

}  // namespace despoof
