#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "despoof/tape.hpp"

namespace despoof {

struct GradCheckOptions {
  double step = 1e-5;
  /// Elements checked per parameter tensor, always including the one with
  /// the largest analytic gradient. 0 checks every element.
  std::size_t samples_per_tensor = 0;
  std::uint64_t seed = 1;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t evaluations = 0;
};

/// Builds a scalar loss on the given tape. Called once for the analytic pass
/// and twice per checked element.
template <typename T>
using LossBuilder = std::function<Var(Tape<T>&)>;

/// Analytic gradients of `build` with respect to `params` (one tensor each;
/// a parameter the loss does not reach gets an all-zero tensor).
template <typename T>
std::vector<Tensor<T>> analytic_gradients(const LossBuilder<T>& build,
                                          const std::vector<Parameter<T>*>& params) {
  for (auto* p : params) p->clear_grad();
  Tape<T> tape;
  Var loss = build(tape);
  if (tape.value(loss).size() != 1)
    throw ShapeError("grad_check: loss must be scalar, got " + to_string(tape.shape(loss)));
  tape.backward(loss);
  std::vector<Tensor<T>> grads;
  for (auto* p : params) grads.push_back(p->has_grad() ? p->grad : Tensor<T>(p->value.shape()));
  return grads;
}

/// Compares `analytic` against central differences.
///
/// The error of one tensor is max |analytic_i - numeric_i| over the checked
/// elements, divided by the largest gradient magnitude of that tensor; the
/// report holds the worst tensor.
template <typename T>
GradCheckReport compare_gradients(const LossBuilder<T>& build,
                                  const std::vector<Parameter<T>*>& params,
                                  const std::vector<Tensor<T>>& analytic,
                                  const GradCheckOptions& options = {}) {
  if (analytic.size() != params.size()) throw ShapeError("grad_check: gradient count mismatch");
  auto evaluate = [&] {
    Tape<T> tape;
    Var loss = build(tape);
    if (tape.value(loss).size() != 1) throw ShapeError("grad_check: loss must be scalar");
    return double(tape.value(loss)[0]);
  };
  std::mt19937_64 rng(options.seed);
  GradCheckReport report;
  for (std::size_t p = 0; p < params.size(); ++p) {
    Parameter<T>& param = *params[p];
    const Tensor<T>& a = analytic[p];
    const std::size_t n = param.value.size();
    std::vector<std::size_t> idx;
    if (options.samples_per_tensor == 0 || options.samples_per_tensor >= n) {
      idx.resize(n);
      for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    } else {
      std::size_t top = 0;
      for (std::size_t i = 1; i < n; ++i)
        if (std::abs(a[i]) > std::abs(a[top])) top = i;
      idx.push_back(top);
      std::uniform_int_distribution<std::size_t> pick(0, n - 1);
      while (idx.size() < options.samples_per_tensor) idx.push_back(pick(rng));
    }
    double scale = 0.0, worst = 0.0;
    for (std::size_t i = 0; i < n; ++i) scale = std::max(scale, double(std::abs(a[i])));
    for (std::size_t i : idx) {
      const T saved = param.value[i];
      param.value[i] = T(double(saved) + options.step);
      const double up = evaluate();
      param.value[i] = T(double(saved) - options.step);
      const double down = evaluate();
      param.value[i] = saved;
      report.evaluations += 2;
      const double numeric = (up - down) / (2.0 * options.step);
      scale = std::max(scale, std::abs(numeric));
      worst = std::max(worst, std::abs(numeric - double(a[i])));
    }
    const double rel = scale > 0.0 ? worst / scale : 0.0;
    if (report.worst_param.empty() || rel > report.max_rel_error) {
      report.max_rel_error = rel;
      report.worst_param = param.name;
    }
  }
  return report;
}

/// Central-difference check of tape gradients; returns the worst relative
/// error over all parameters.
template <typename T>
GradCheckReport grad_check(const LossBuilder<T>& build, const std::vector<Parameter<T>*>& params,
                           const GradCheckOptions& options = {}) {
  auto analytic = analytic_gradients(build, params);
  return compare_gradients(build, params, analytic, options);
}

}  // namespace despoof
