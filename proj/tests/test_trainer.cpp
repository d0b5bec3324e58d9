#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "despoof/trainer.hpp"
#include "test_util.hpp"

namespace {

using despoof::testing::TempDir;
namespace fs = std::filesystem;
using Real = float;

// ---------------------------------------------------------------------------
// Optimizer

TEST(Optimizer, ZeroGradientLeavesParametersUnchanged) {
  for (auto kind : {despoof::OptimizerKind::adam, despoof::OptimizerKind::sgd}) {
    despoof::ParamSet<double> set;
    std::mt19937_64 rng(1);
    auto& p = set.add("w", despoof::testing::random_tensor({3, 4}, rng));
    const auto before = p.value;
    despoof::OptimizerConfig cfg;
    cfg.kind = kind;
    cfg.learning_rate = 0.1;
    despoof::Optimizer<double> opt(cfg);
    for (int i = 0; i < 5; ++i) {
      p.grad = despoof::Tensor<double>(p.value.shape());
      opt.step(set);
    }
    EXPECT_TRUE(std::equal(before.data().begin(), before.data().end(), p.value.data().begin()));
  }
}

TEST(Optimizer, AdamMinimizesQuadratic) {
  despoof::ParamSet<double> set;
  auto& w = set.add("w", despoof::Tensor<double>({1}, 1.0));
  despoof::OptimizerConfig cfg;
  cfg.learning_rate = 0.05;
  despoof::Optimizer<double> opt(cfg);
  for (int i = 0; i < 200; ++i) {
    w.grad = despoof::Tensor<double>({1}, 2.0 * w.value[0]);
    opt.step(set);
  }
  EXPECT_LT(std::abs(w.value[0]), 0.05);
  EXPECT_EQ(opt.steps(), 200u);
}

TEST(Optimizer, SgdStepIsExact) {
  despoof::ParamSet<double> set;
  std::mt19937_64 rng(2);
  auto& p = set.add("w", despoof::testing::random_tensor({5}, rng));
  const auto g = despoof::testing::random_tensor({5}, rng);
  const auto before = p.value;
  despoof::OptimizerConfig cfg;
  cfg.kind = despoof::OptimizerKind::sgd;
  cfg.learning_rate = 0.125;
  despoof::Optimizer<double> opt(cfg);
  p.grad = g;
  opt.step(set);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(p.value[i], before[i] - 0.125 * g[i]);
  EXPECT_FALSE(p.has_grad());
}

TEST(Optimizer, NonFiniteGradientNamesParameter) {
  despoof::ParamSet<double> set;
  set.add("ok", despoof::Tensor<double>({2}, 1.0)).grad = despoof::Tensor<double>({2}, 0.5);
  auto& bad = set.add("ds/conv3-7/w", despoof::Tensor<double>({2}, 1.0));
  bad.grad = despoof::Tensor<double>({2});
  bad.grad[1] = std::nan("");
  despoof::Optimizer<double> opt;
  try {
    opt.step(set);
    FAIL();
  } catch (const despoof::NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("ds/conv3-7/w"), std::string::npos);
  }
  EXPECT_EQ(set.at("ok").value[0], 1.0);
}

TEST(Optimizer, StateRoundTrip) {
  despoof::ParamSet<float> a, b;
  a.add("w", despoof::Tensor<float>({3}, 1.0f));
  b.add("w", despoof::Tensor<float>({3}, 1.0f));
  despoof::Optimizer<float> oa, ob;
  for (int i = 0; i < 3; ++i) {
    a.at("w").grad = despoof::Tensor<float>({3}, 0.3f * float(i + 1));
    oa.step(a);
  }
  std::vector<despoof::NamedTensor> state;
  oa.export_state("opt/", state);
  ob.import_state("opt/", state, oa.steps());
  b.at("w").value = a.at("w").value;
  a.at("w").grad = despoof::Tensor<float>({3}, -0.7f);
  b.at("w").grad = despoof::Tensor<float>({3}, -0.7f);
  oa.step(a);
  ob.step(b);
  EXPECT_EQ(a.checksum(), b.checksum());
}

// ---------------------------------------------------------------------------
// Config

TEST(TrainConfig, Defaults) {
  const despoof::TrainConfig c;
  EXPECT_EQ(c.batch_size, 6u);
  EXPECT_EQ(c.learning_rate, 3e-5);
  EXPECT_EQ(c.weights.lambda1, 3.0);
  EXPECT_EQ(c.weights.lambda2, 0.005);
  EXPECT_EQ(c.weights.lambda3, 0.1);
  EXPECT_EQ(c.weights.lambda4, 0.016);
  EXPECT_EQ(c.weights.mask_size(64), 16u);
  EXPECT_EQ(c.dq_pretrain_epochs, 10u);
  EXPECT_EQ(c.optimizer, despoof::OptimizerKind::adam);
}

TEST(TrainConfig, CanonicalTextRoundTrips) {
  const auto c = despoof::parse_train_config(despoof::KeyValueConfig::parse(
      "steps = 7\nlearning_rate = 0.001\noptimizer = sgd\ndecoder_input = shortcut\nscale = 32\nlambda2 = 0.25\n", "t"));
  EXPECT_EQ(c.steps, 7u);
  EXPECT_EQ(c.optimizer, despoof::OptimizerKind::sgd);
  const auto again = despoof::parse_train_config(despoof::KeyValueConfig::parse(c.canonical(), "canonical"));
  EXPECT_EQ(again.canonical(), c.canonical());
  EXPECT_EQ(again.hash(), c.hash());
  EXPECT_NE(again.hash(), despoof::TrainConfig{}.hash());
}

TEST(TrainConfig, Errors) {
  auto parse = [](const std::string& text) {
    return despoof::parse_train_config(despoof::KeyValueConfig::parse(text, "t"));
  };
  EXPECT_THROW(parse("batch_size = 1\n"), despoof::ConfigError);
  EXPECT_THROW(parse("optimizer = rmsprop\n"), despoof::ConfigError);
  EXPECT_THROW(parse("scale = 48\n"), despoof::ConfigError);
  EXPECT_THROW(parse("mask_k = 3\n"), despoof::ConfigError);
  EXPECT_THROW(parse("learning_rat = 1\n"), despoof::ConfigError);
}

// ---------------------------------------------------------------------------
// Sampling

TEST(BalancedSampler, BalancedDeterministicAndCovering) {
  const despoof::BalancedSampler s(10, 12, 6, 42);
  std::multiset<std::size_t> live_seen, spoof_seen;
  for (std::uint64_t d = 0; d < 3; ++d) {
    const auto [l, sp] = s.draw(d);
    EXPECT_EQ(l.size(), 3u);
    EXPECT_EQ(sp.size(), 3u);
    EXPECT_EQ(s.draw(d), std::make_pair(l, sp));
    live_seen.insert(l.begin(), l.end());
    spoof_seen.insert(sp.begin(), sp.end());
  }
  // Three draws stay within one pass of each pool: no repeats.
  EXPECT_EQ(std::set<std::size_t>(live_seen.begin(), live_seen.end()).size(), 9u);
  EXPECT_EQ(std::set<std::size_t>(spoof_seen.begin(), spoof_seen.end()).size(), 9u);
  EXPECT_NE(despoof::BalancedSampler(10, 12, 6, 43).draw(0), s.draw(0));
}

TEST(BalancedSampler, TooSmallCorpus) {
  EXPECT_THROW(despoof::BalancedSampler(2, 10, 6, 1), despoof::DataError);
  EXPECT_THROW(despoof::BalancedSampler(10, 0, 2, 1), despoof::DataError);
}

// ---------------------------------------------------------------------------
// Training on a 16-sample corpus at S=32

class SmallCorpus : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new TempDir("train_corpus");
    const auto g = despoof::parse_gen_config(despoof::KeyValueConfig::parse(
        "size = 32\nseed = 3\ntrain.live = 8\ntrain.print1 = 2\ntrain.print2 = 2\ntrain.display1 = 2\n"
        "train.display2 = 2\ntest.live = 2\ntest.display1 = 2\n",
        "gen"));
    despoof::gen_corpus(g, despoof::load_profiles(fs::path(DESPOOF_CONFIG_DIR) / "media_v1.cfg"), dir_->path());
    corpus_ = new despoof::Corpus(despoof::load_corpus(dir_->path()));
  }
  static void TearDownTestSuite() {
    delete corpus_;
    delete dir_;
  }

  static despoof::TrainConfig config(std::size_t steps = 5) {
    despoof::TrainConfig c;
    c.scale = 32;
    c.steps = steps;
    c.seed = 11;
    c.dq_pretrain_epochs = 1;
    c.checkpoint_interval = 2;
    return c;
  }

  static TempDir* dir_;
  static despoof::Corpus* corpus_;
};

TempDir* SmallCorpus::dir_ = nullptr;
despoof::Corpus* SmallCorpus::corpus_ = nullptr;

TEST_F(SmallCorpus, StepRequiresFrozenDq) {
  despoof::Trainer<Real> t(config(), *corpus_);
  EXPECT_THROW(t.train_step(1), despoof::ConfigError);
}

TEST_F(SmallCorpus, ScaleMismatchRejected) {
  auto c = config();
  c.scale = 64;
  EXPECT_THROW(despoof::Trainer<Real>(c, *corpus_), despoof::DataError);
}

TEST_F(SmallCorpus, BatchesCarryBothLabelsAndPseudoDepth) {
  despoof::Trainer<Real> t(config(), *corpus_);
  for (std::uint64_t d = 0; d < 10; ++d) {
    const auto b = t.batch(d);
    ASSERT_EQ(b.spoof.size(), 6u);
    EXPECT_EQ(std::count(b.spoof.begin(), b.spoof.end(), true), 3);
    const auto target = despoof::pseudo_depth_targets(b.spoof, b.face_depth);
    EXPECT_TRUE(std::equal(target.data().begin(), target.data().end(), b.depth_label.data().begin()));
  }
}

TEST_F(SmallCorpus, PretrainingReducesDepthLossAndFreezes) {
  auto c = config();
  c.dq_pretrain_epochs = 8;
  despoof::Trainer<Real> t(c, *corpus_);
  std::vector<double> losses;
  t.pretrain_dq([&](const despoof::LossRow& r) {
    EXPECT_LT(r.step, 0);
    losses.push_back(r.values.dq);
  });
  ASSERT_EQ(losses.size(), t.pretrain_iterations());
  EXPECT_TRUE(t.model().dq.frozen());
  const double first = (losses[0] + losses[1] + losses[2]) / 3, last = (losses.end()[-1] + losses.end()[-2] + losses.end()[-3]) / 3;
  EXPECT_LT(last, first);
}

TEST_F(SmallCorpus, OneStepChangesDsAndVqButNotDq) {
  despoof::Trainer<Real> t(config(), *corpus_);
  t.pretrain_dq();
  auto& m = t.model();
  const auto ds0 = m.ds.params().checksum(), dq0 = m.dq.params().checksum(), vq0 = m.vq.params().checksum();
  const auto row = t.train_step(1);
  EXPECT_EQ(m.dq.params().checksum(), dq0);
  EXPECT_NE(m.ds.params().checksum(), ds0);
  EXPECT_NE(m.vq.params().checksum(), vq0);
  EXPECT_EQ(row.step, 1);
}

TEST_F(SmallCorpus, PhasesAreIsolated) {
  despoof::Trainer<Real> t(config(), *corpus_);
  t.pretrain_dq();
  auto& m = t.model();
  const auto ds0 = m.ds.params().checksum(), vq0 = m.vq.params().checksum();
  t.update_vq(t.batch(2), 1);
  EXPECT_EQ(m.ds.params().checksum(), ds0);
  const auto vq1 = m.vq.params().checksum();
  EXPECT_NE(vq1, vq0);
  t.update_ds(t.batch(3));
  EXPECT_EQ(m.vq.params().checksum(), vq1);
  EXPECT_NE(m.ds.params().checksum(), ds0);
}

TEST_F(SmallCorpus, ZeroLearningRateKeepsWeights) {
  auto c = config();
  c.learning_rate = 0.0;
  despoof::Trainer<Real> t(c, *corpus_);
  t.pretrain_dq();
  auto& m = t.model();
  const auto ds0 = m.ds.params().checksum(false), dq0 = m.dq.params().checksum(false),
             vq0 = m.vq.params().checksum(false);
  for (int s = 1; s <= 2; ++s) t.train_step(s);
  EXPECT_EQ(m.ds.params().checksum(false), ds0);
  EXPECT_EQ(m.dq.params().checksum(false), dq0);
  EXPECT_EQ(m.vq.params().checksum(false), vq0);
}

TEST_F(SmallCorpus, SmokeRunLogsFiniteRows) {
  TempDir out("smoke");
  despoof::TrainOptions opts;
  opts.out_dir = out.path();
  std::size_t rows = 0;
  opts.on_row = [&](const despoof::LossRow& r) {
    ++rows;
    const auto& v = r.values;
    for (double x : {v.zero_one, v.magnitude, v.repetitive, v.dq, v.vq, v.total}) EXPECT_TRUE(std::isfinite(x));
    if (r.step > 0) {
      EXPECT_NEAR(v.total, despoof::weighted_total(v, despoof::LossWeights{}), 1e-5 * (1 + v.total));
    }
  };
  const auto result = despoof::train<Real>(*corpus_, config(5), opts);
  despoof::Trainer<Real> probe(config(5), *corpus_);
  EXPECT_EQ(rows, 5 + probe.pretrain_iterations());
  EXPECT_EQ(result.last_step, 5);
  const std::string csv = despoof::read_file(out.path() / "loss.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), std::ptrdiff_t(rows + 1));
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "step,J_z,J_m,J_r,J_DQ,J_VQ,J_T");
  EXPECT_TRUE(fs::exists(out.path() / "model.dspf"));
  EXPECT_TRUE(fs::exists(out.path() / "model.json"));
  EXPECT_TRUE(fs::exists(out.path() / "checkpoints" / "step_000004.dspf"));
  const auto model = despoof::load_model<Real>(out.path() / "model.dspf");
  EXPECT_EQ(model.config.canonical(), config(5).canonical());
  EXPECT_TRUE(model.dq.frozen());
}

TEST_F(SmallCorpus, SeededRunsAreIdentical) {
  TempDir a("det_a"), b("det_b");
  despoof::TrainOptions oa, ob;
  oa.out_dir = a.path();
  ob.out_dir = b.path();
  const auto ra = despoof::train<Real>(*corpus_, config(3), oa);
  const auto rb = despoof::train<Real>(*corpus_, config(3), ob);
  EXPECT_EQ(ra.hash, rb.hash);
  EXPECT_EQ(despoof::read_file(a.path() / "loss.csv"), despoof::read_file(b.path() / "loss.csv"));
  auto other = config(3);
  other.seed = 12;
  TempDir c("det_c");
  despoof::TrainOptions oc;
  oc.out_dir = c.path();
  EXPECT_NE(despoof::train<Real>(*corpus_, other, oc).hash, ra.hash);
}

TEST_F(SmallCorpus, ResumeMatchesUninterruptedRun) {
  TempDir whole("whole"), split("split");
  despoof::TrainOptions ow, os;
  ow.out_dir = whole.path();
  os.out_dir = split.path();
  const auto full = despoof::train<Real>(*corpus_, config(6), ow);
  os.stop_after = 3;
  const auto first = despoof::train<Real>(*corpus_, config(6), os);
  EXPECT_EQ(first.last_step, 3);
  // A stray row from the interrupted process must not survive the resume.
  {
    std::string csv = despoof::read_file(split.path() / "loss.csv");
    despoof::write_file_atomic(split.path() / "loss.csv", csv + "4,1,1,1,1,1,1\n");
  }
  os.stop_after = -1;
  os.resume = first.checkpoint;
  const auto second = despoof::train<Real>(*corpus_, config(6), os);
  EXPECT_EQ(second.hash, full.hash);
  EXPECT_EQ(despoof::read_file(split.path() / "loss.csv"), despoof::read_file(whole.path() / "loss.csv"));
  EXPECT_EQ(despoof::read_file(split.path() / "model.dspf"), despoof::read_file(whole.path() / "model.dspf"));
}

TEST_F(SmallCorpus, ResumeRejectsOtherConfig) {
  TempDir out("reject");
  despoof::TrainOptions o;
  o.out_dir = out.path();
  const auto r = despoof::train<Real>(*corpus_, config(2), o);
  auto other = config(2);
  other.learning_rate = 1e-3;
  o.resume = r.checkpoint;
  EXPECT_THROW(despoof::train<Real>(*corpus_, other, o), despoof::ConfigError);
}

}  // namespace
