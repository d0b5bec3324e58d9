#include <gtest/gtest.h>

#include <cmath>
#include <complex>
#include <numbers>
#include <random>

#include "despoof/grad_check.hpp"
#include "despoof/losses.hpp"
#include "test_util.hpp"

using namespace despoof;
using despoof::testing::make_param;
using despoof::testing::random_tensor;

namespace {

// Peak magnitude outside the centered k x k block of one plane, by direct
// summation of the DFT definition.
double naive_high_frequency_peak(const std::vector<double>& plane, std::size_t s, std::size_t k) {
  double peak = 0;
  for (std::size_t u = 0; u < s; ++u)
    for (std::size_t v = 0; v < s; ++v) {
      // Shifted position of frequency (u, v).
      const std::size_t y = (u + s / 2) % s, x = (v + s / 2) % s;
      if (y >= s / 2 - k / 2 && y < s / 2 + k / 2 && x >= s / 2 - k / 2 && x < s / 2 + k / 2) continue;
      std::complex<double> acc = 0;
      for (std::size_t a = 0; a < s; ++a)
        for (std::size_t b = 0; b < s; ++b) {
          const double ang = -2.0 * std::numbers::pi * double(u * a + v * b) / double(s);
          acc += plane[a * s + b] * std::complex<double>(std::cos(ang), std::sin(ang));
        }
      peak = std::max(peak, std::abs(acc));
    }
  return peak;
}

Tensor<double> sinusoid_noise(std::size_t s, std::size_t channel, double amplitude, double freq) {
  Tensor<double> n({1, s, s, 6});
  for (std::size_t y = 0; y < s; ++y)
    for (std::size_t x = 0; x < s; ++x)
      n(0, y, x, channel) = amplitude * std::cos(2.0 * std::numbers::pi * freq * double(x) / double(s));
  return n;
}

struct Nets {
  DespoofNet<double> ds;
  DepthNet<double> dq;
  VisualQualityNet<double> vq;
  explicit Nets(std::size_t s) : ds({}, 41), dq({}, 42), vq({s, 0.2}, 43) { dq.freeze(); }
};

}  // namespace

TEST(MagnitudeLoss, HandValues) {
  Tape<double> tape;
  EXPECT_EQ(tape.value(magnitude_loss(tape, tape.constant(Tensor<double>({2, 2, 2, 6})), {false, true}))[0], 0.0);
  Tensor<double> n({2, 2, 2, 6});
  for (std::size_t i = 0; i < n.size(); ++i) n[i] = i % 2 ? 0.2 : -0.2;
  EXPECT_NEAR(tape.value(magnitude_loss(tape, tape.constant(n), {false, false}))[0], 0.2, 1e-15);
  // Spoof samples carry no magnitude penalty.
  Tensor<double> m({2, 1, 1, 6});
  for (std::size_t i = 6; i < 12; ++i) m[i] = 5.0;
  EXPECT_EQ(tape.value(magnitude_loss(tape, tape.constant(m), {false, true}))[0], 0.0);
  EXPECT_EQ(tape.value(magnitude_loss(tape, tape.constant(m), {true, true}))[0], 0.0);
  EXPECT_EQ(tape.value(magnitude_loss(tape, tape.constant(m), {false, true}, true))[0], 2.5);
}

TEST(MagnitudeLoss, GradientIsSignOverLiveCount) {
  std::mt19937_64 rng(1);
  Parameter<double> n = make_param("n", random_tensor({3, 2, 2, 6}, rng));
  const std::vector<bool> spoof{false, true, false};
  Tape<double> tape;
  tape.backward(magnitude_loss(tape, tape.param(n), spoof));
  const std::size_t per = 24, count = 2 * per;
  for (std::size_t i = 0; i < n.value.size(); ++i) {
    const bool live = !spoof[i / per];
    const double expect = live ? (n.value[i] > 0 ? 1.0 : -1.0) / double(count) : 0.0;
    EXPECT_DOUBLE_EQ(n.grad[i], expect);
  }
  LossBuilder<double> f = [&](Tape<double>& t) { return magnitude_loss(t, t.param(n), spoof); };
  EXPECT_LT(grad_check(f, {&n}).max_rel_error, 1e-4);
}

TEST(ZeroOneMapLoss, HandValuesAndShapeCheck) {
  const auto labels = make_batch_labels<double>({false, true}, Tensor<double>({2, 2, 2, 1}));
  EXPECT_EQ(labels.map_target, Tensor<double>({2, 2, 2, 1}, {0, 0, 0, 0, 1, 1, 1, 1}));
  Tape<double> tape;
  EXPECT_EQ(tape.value(zero_one_map_loss(tape, tape.constant(labels.map_target), labels.map_target))[0], 0.0);
  EXPECT_EQ(tape.value(zero_one_map_loss(tape, tape.constant(Tensor<double>({2, 2, 2, 1}, 0.5)), labels.map_target))[0], 0.5);
  EXPECT_THROW(zero_one_map_loss(tape, tape.constant(Tensor<double>({2, 4, 4, 1})), labels.map_target), ShapeError);

  std::mt19937_64 rng(2);
  Parameter<double> m = make_param("m", random_tensor({2, 2, 2, 1}, rng, -0.4, 1.4));
  LossBuilder<double> f = [&](Tape<double>& t) { return zero_one_map_loss(t, t.param(m), labels.map_target); };
  EXPECT_LT(grad_check(f, {&m}).max_rel_error, 1e-4);
}

TEST(RepetitiveLoss, ZeroNoiseIsZero) {
  Tape<double> tape;
  Var n = tape.constant(Tensor<double>({2, 16, 16, 6}));
  EXPECT_EQ(tape.value(repetitive_loss(tape, n, {false, true}, 4))[0], 0.0);
}

TEST(RepetitiveLoss, SinusoidPeakMatchesNaiveDft) {
  const std::size_t s = 16, k = 4;
  const double a = 0.3, f = 5.0;  // f > k/2
  const Tensor<double> n = sinusoid_noise(s, 2, a, f);
  std::vector<double> plane(s * s);
  for (std::size_t y = 0; y < s; ++y)
    for (std::size_t x = 0; x < s; ++x) plane[y * s + x] = n(0, y, x, 2);
  const double oracle = naive_high_frequency_peak(plane, s, k);
  EXPECT_NEAR(oracle, double(s * s) * a / 2.0, 1e-9);

  // The loss reads the peak per pixel: a/2 for a sinusoid of amplitude a.
  Tape<double> tape;
  Var nv = tape.constant(n);
  EXPECT_NEAR(tape.value(high_frequency_peak(tape, nv, k))[0], oracle, 1e-9);
  EXPECT_NEAR(tape.value(repetitive_loss(tape, nv, {false}, k))[0], oracle / double(s * s), 1e-12);
  EXPECT_NEAR(tape.value(repetitive_loss(tape, nv, {true}, k))[0], -oracle / double(s * s), 1e-12);

  // Same sinusoid at twice the resolution: same loss.
  const Tensor<double> n2 = sinusoid_noise(2 * s, 2, a, 2 * f);
  Tape<double> t2;
  EXPECT_NEAR(t2.value(repetitive_loss(t2, t2.constant(n2), {false}, 2 * k))[0], a / 2.0, 1e-12);
}

TEST(RepetitiveLoss, MaskedLowFrequenciesDoNotMatter) {
  const std::size_t s = 16, k = 8;
  Tensor<double> n = sinusoid_noise(s, 0, 0.5, 6.0);
  Tensor<double> shifted = n;
  // Frequency 2 < k/2 lies inside the masked block.
  for (std::size_t y = 0; y < s; ++y)
    for (std::size_t x = 0; x < s; ++x)
      shifted(0, y, x, 0) += 0.2 * std::cos(2.0 * std::numbers::pi * 2.0 * double(y) / double(s));
  Tape<double> tape;
  EXPECT_NEAR(tape.value(repetitive_loss(tape, tape.constant(n), {true}, k))[0],
              tape.value(repetitive_loss(tape, tape.constant(shifted), {true}, k))[0], 1e-9);

  Parameter<double> p = make_param("n", n);
  Tape<double> t2;
  t2.backward(repetitive_loss(t2, t2.param(p), {true}, k));
  // The gradient of a masked, low-frequency perturbation direction is zero.
  double dot = 0;
  for (std::size_t i = 0; i < n.size(); ++i) dot += p.grad[i] * (shifted[i] - n[i]);
  EXPECT_NEAR(dot, 0.0, 1e-9);
}

TEST(RepetitiveLoss, InvalidMaskThrows) {
  Tape<double> tape;
  Var n = tape.constant(Tensor<double>({1, 16, 16, 6}));
  EXPECT_THROW(repetitive_loss(tape, n, {true}, 3), ConfigError);
  EXPECT_THROW(repetitive_loss(tape, n, {true}, 16), ConfigError);
  EXPECT_THROW(repetitive_loss(tape, n, {true}, 0), ConfigError);
}

TEST(RepetitiveLoss, Gradient) {
  std::mt19937_64 rng(3);
  Parameter<double> n = make_param("n", random_tensor({2, 8, 8, 6}, rng));
  LossBuilder<double> f = [&](Tape<double>& t) { return repetitive_loss(t, t.param(n), {false, true}, 2); };
  EXPECT_LT(grad_check(f, {&n}).max_rel_error, 1e-4);
}

TEST(DqLoss, ExactDepthGivesZeroAndStaysOffTape) {
  DepthNet<double> dq({}, 5);
  std::mt19937_64 rng(6);
  const Tensor<double> img = random_tensor({2, 16, 16, 6}, rng, 0, 1);
  Tape<double> probe;
  EXPECT_THROW(dq_loss(probe, dq, probe.constant(img), Tensor<double>({2, 2, 2, 1})), ConfigError);
  dq.freeze();
  const Tensor<double> depth = probe.value(dq.forward(probe, probe.constant(img), Mode::eval));

  Tape<double> tape;
  Var x = tape.input(img);
  Var loss = dq_loss(tape, dq, x, depth);
  EXPECT_EQ(tape.value(loss)[0], 0.0);
  tape.backward(scale(tape, loss, 1.0));
  for (std::size_t i = 0; i < dq.params().size(); ++i) EXPECT_FALSE(dq.params()[i].has_grad());
}

TEST(DqLoss, GradientReachesDespoofNet) {
  Nets nets(16);
  std::mt19937_64 rng(7);
  const Tensor<double> img = random_tensor({2, 16, 16, 6}, rng, 0, 1);
  const Tensor<double> depth = random_tensor({2, 2, 2, 1}, rng, 0, 1);
  LossBuilder<double> f = [&](Tape<double>& t) {
    return dq_loss(t, nets.dq, nets.ds.forward(t, t.constant(img), Mode::train).live_hat, depth);
  };
  GradCheckOptions opts;
  opts.samples_per_tensor = 2;
  const auto report = grad_check(f, nets.ds.params().trainable(), opts);
  EXPECT_LT(report.max_rel_error, 1e-4) << report.worst_param;
  for (std::size_t i = 0; i < nets.dq.params().size(); ++i) EXPECT_FALSE(nets.dq.params()[i].has_grad());
}

TEST(VqLoss, UniformDiscriminator) {
  VisualQualityNet<double> vq({16, 0.2}, 8);
  auto& w = vq.params().at("vq/fc4-2/w").value;
  w.fill(0.0);
  std::mt19937_64 rng(9);
  Tape<double> tape;
  Var real = tape.constant(random_tensor({3, 16, 16, 6}, rng, 0, 1));
  Var synth = tape.constant(random_tensor({3, 16, 16, 6}, rng, 0, 1));
  EXPECT_NEAR(tape.value(vq_discriminator_loss(tape, vq, real, synth, rng))[0], 2.0 * std::numbers::ln2, 1e-12);
  EXPECT_NEAR(tape.value(vq_generator_loss(tape, vq, synth))[0], std::numbers::ln2, 1e-12);

  auto& b = vq.params().at("vq/fc4-2/b").value;
  b[0] = 40.0;
  b[1] = -40.0;
  Tape<double> confident;
  EXPECT_LT(confident.value(vq_generator_loss(confident, vq, confident.constant(tape.value(synth))))[0], 1e-30);
  Var empty = tape.constant(Tensor<double>({0, 16, 16, 6}));
  EXPECT_THROW(vq_generator_loss(tape, vq, empty), ShapeError);
  EXPECT_THROW(vq_discriminator_loss(tape, vq, real, empty, rng), ShapeError);
}

TEST(VqLoss, ConfidentCorrectLogitsApproachZero) {
  Tape<double> tape;
  double previous = 1.0;
  for (double margin : {2.0, 5.0, 10.0, 20.0}) {
    Var real = tape.constant(Tensor<double>({2, 2}, {margin, -margin, margin, -margin}));
    Var synth = tape.constant(Tensor<double>({2, 2}, {-margin, margin, -margin, margin}));
    const double loss = tape.value(add(tape, softmax_ce(tape, real, {0, 0}), softmax_ce(tape, synth, {1, 1})))[0];
    EXPECT_GT(loss, 0.0);
    EXPECT_LT(loss, previous);
    previous = loss;
  }
  EXPECT_LT(previous, 1e-16);
}

TEST(VqLoss, DiscriminatorGradientOverVq) {
  VisualQualityNet<double> vq({16, 0.2}, 10);
  std::mt19937_64 data(11);
  const Tensor<double> real = random_tensor({3, 16, 16, 6}, data, 0, 1);
  const Tensor<double> synth = random_tensor({3, 16, 16, 6}, data, 0, 1);
  LossBuilder<double> f = [&](Tape<double>& t) {
    std::mt19937_64 rng(12);
    return vq_discriminator_loss(t, vq, t.constant(real), t.constant(synth), rng);
  };
  GradCheckOptions opts;
  opts.samples_per_tensor = 3;
  const auto report = grad_check(f, vq.params().trainable(), opts);
  EXPECT_LT(report.max_rel_error, 1e-4) << report.worst_param;
}

TEST(VqLoss, GeneratorGradientReachesOnlyDespoofNet) {
  Nets nets(16);
  std::mt19937_64 rng(13);
  const Tensor<double> img = random_tensor({2, 16, 16, 6}, rng, 0, 1);
  LossBuilder<double> f = [&](Tape<double>& t) {
    return vq_generator_loss(t, nets.vq, nets.ds.forward(t, t.constant(img), Mode::train).live_hat);
  };
  GradCheckOptions opts;
  opts.samples_per_tensor = 2;
  const auto report = grad_check(f, nets.ds.params().trainable(), opts);
  EXPECT_LT(report.max_rel_error, 1e-4) << report.worst_param;
  for (std::size_t i = 0; i < nets.vq.params().size(); ++i) {
    EXPECT_FALSE(nets.vq.params()[i].has_grad());
  }
  // The guard restores trainability afterwards.
  EXPECT_TRUE(nets.vq.params().at("vq/fc4-1/w").trainable);
}

TEST(TotalLoss, WeightedSumOfComponents) {
  const LossWeights w;
  EXPECT_NEAR(weighted_total({1, 1, 1, 1, 1, 0}, w), 4.121, 1e-12);
  EXPECT_EQ(weighted_total({}, w), 0.0);
  EXPECT_EQ(w.mask_size(256), 64u);
  EXPECT_EQ(w.mask_size(64), 16u);
}

TEST(TotalLoss, GradientIsWeightedSumOfComponentGradients) {
  const std::size_t s = 16;
  Nets nets(s);
  std::mt19937_64 rng(14);
  const Tensor<double> img = random_tensor({2, s, s, 6}, rng, 0, 1);
  const auto labels = make_batch_labels<double>({false, true}, random_tensor({2, s / 8, s / 8, 1}, rng, 0, 1));
  const LossWeights w;

  Tape<double> tape;
  TotalLoss l = total_loss(tape, nets.ds, nets.dq, nets.vq, tape.constant(img), labels, w);
  const LossValues v = loss_values(tape, l);
  EXPECT_NEAR(v.total, weighted_total(v, w), 1e-12);
  tape.backward(l.total);
  auto& probe = nets.ds.params().at("ds/conv1-0/w");
  const Tensor<double> total_grad = probe.grad;

  const std::vector<std::pair<Var TotalLoss::*, double>> parts{
      {&TotalLoss::zero_one, 1.0}, {&TotalLoss::magnitude, w.lambda1}, {&TotalLoss::repetitive, w.lambda2},
      {&TotalLoss::dq, w.lambda3}, {&TotalLoss::vq, w.lambda4}};
  Tensor<double> combined(total_grad.shape());
  for (const auto& [member, lambda] : parts) {
    nets.ds.params().clear_grads();
    Tape<double> t;
    TotalLoss part = total_loss(t, nets.ds, nets.dq, nets.vq, t.constant(img), labels, w);
    t.backward(part.*member);
    if (!probe.has_grad()) continue;
    for (std::size_t i = 0; i < combined.size(); ++i) combined[i] += lambda * probe.grad[i];
  }
  double scale = 0, err = 0;
  for (std::size_t i = 0; i < combined.size(); ++i) {
    scale = std::max(scale, std::abs(total_grad[i]));
    err = std::max(err, std::abs(total_grad[i] - combined[i]));
  }
  EXPECT_LT(err / scale, 1e-10);
}

TEST(TotalLoss, FullGraphGradient) {
  const std::size_t s = 16;
  Nets nets(s);
  std::mt19937_64 rng(15);
  const Tensor<double> img = random_tensor({2, s, s, 6}, rng, 0, 1);
  const auto labels = make_batch_labels<double>({false, true}, random_tensor({2, s / 8, s / 8, 1}, rng, 0, 1));
  LossBuilder<double> f = [&](Tape<double>& t) {
    return total_loss(t, nets.ds, nets.dq, nets.vq, t.constant(img), labels, LossWeights{}).total;
  };
  GradCheckOptions opts;
  opts.samples_per_tensor = 2;
  const auto report = grad_check(f, nets.ds.params().trainable(), opts);
  EXPECT_LT(report.max_rel_error, 1e-4) << report.worst_param;
}

TEST(BatchLabels, PseudoDepthTargets) {
  Tensor<double> depth({2, 1, 2, 1}, {0.5, 0.7, 0.2, 0.9});
  EXPECT_EQ(pseudo_depth_targets<double>({false, true}, depth), Tensor<double>({2, 1, 2, 1}, {0.5, 0.7, 0, 0}));
  EXPECT_THROW(make_batch_labels<double>({false}, depth), ShapeError);
}
