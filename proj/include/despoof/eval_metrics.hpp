#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "despoof/fft.hpp"
#include "despoof/trainer.hpp"
#include "json.hpp"

namespace despoof {

enum class FuseStrategy { noise, depth, map, avg, max, avg_all, max_all };

inline const std::vector<std::pair<std::string, FuseStrategy>>& strategy_names() {
  static const std::vector<std::pair<std::string, FuseStrategy>> names = {
      {"noise", FuseStrategy::noise}, {"depth", FuseStrategy::depth},     {"map", FuseStrategy::map},
      {"avg", FuseStrategy::avg},     {"max", FuseStrategy::max},         {"avg_all", FuseStrategy::avg_all},
      {"max_all", FuseStrategy::max_all}};
  return names;
}

inline FuseStrategy parse_strategy(const std::string& name) {
  for (const auto& [n, s] : strategy_names())
    if (n == name) return s;
  throw ConfigError("unknown fusion strategy '" + name + "' (expected noise, depth, map, avg, max, avg_all or max_all)");
}

inline std::string strategy_name(FuseStrategy s) {
  for (const auto& [n, v] : strategy_names())
    if (v == s) return n;
  return "?";
}

/// Per-image scores; higher means more spoof-like.
struct ScoreRecord {
  std::string id;
  bool spoof = false;
  std::string medium;
  double s_noise = 0;  // mean |N|
  double s_depth = 0;  // mean max(0, 1 - D), D the DQ depth of the input
  double s_map = 0;    // mean |map01|
  double fused = 0;
};

inline double fuse(const ScoreRecord& r, FuseStrategy s) {
  switch (s) {
    case FuseStrategy::noise: return r.s_noise;
    case FuseStrategy::depth: return r.s_depth;
    case FuseStrategy::map: return r.s_map;
    case FuseStrategy::avg: return (r.s_noise + r.s_depth) / 2.0;
    case FuseStrategy::max: return std::max(r.s_noise, r.s_depth);
    case FuseStrategy::avg_all: return (r.s_noise + r.s_depth + r.s_map) / 3.0;
    case FuseStrategy::max_all: return std::max({r.s_noise, r.s_depth, r.s_map});
  }
  throw ConfigError("unknown fusion strategy");
}

inline void apply_fusion(std::vector<ScoreRecord>& records, FuseStrategy s) {
  for (auto& r : records) r.fused = fuse(r, s);
}

// ---------------------------------------------------------------------------
// Error rates, in percent.

struct MetricsReport {
  double threshold = 0;
  double apcer = 0, bpcer = 0, acer = 0, hter = 0;
  std::map<std::string, double> apcer_per_medium;
};

namespace detail {

inline void require_both_labels(const std::vector<ScoreRecord>& scores, const char* who) {
  const bool live = std::any_of(scores.begin(), scores.end(), [](const auto& r) { return !r.spoof; });
  const bool spoof = std::any_of(scores.begin(), scores.end(), [](const auto& r) { return r.spoof; });
  if (!live || !spoof) throw DataError(std::string(who) + ": scores need both live and spoof samples");
}

}  // namespace detail

/// APCER is the worst per-medium rate of spoofs scored below the threshold;
/// BPCER the rate of live samples at or above it.
inline MetricsReport compute_acer(const std::vector<ScoreRecord>& scores, double threshold) {
  detail::require_both_labels(scores, "compute_acer");
  std::map<std::string, std::pair<std::size_t, std::size_t>> per;  // accepted, total
  std::size_t live = 0, rejected = 0;
  for (const auto& r : scores) {
    if (r.spoof) {
      auto& [acc, tot] = per[r.medium];
      acc += r.fused < threshold;
      ++tot;
    } else {
      ++live;
      rejected += r.fused >= threshold;
    }
  }
  MetricsReport m;
  m.threshold = threshold;
  for (const auto& [medium, c] : per) {
    const double rate = 100.0 * double(c.first) / double(c.second);
    m.apcer_per_medium[medium] = rate;
    m.apcer = std::max(m.apcer, rate);
  }
  m.bpcer = 100.0 * double(rejected) / double(live);
  m.acer = (m.apcer + m.bpcer) / 2.0;
  return m;
}

/// (FAR + FRR) / 2 with FAR over all spoofs pooled.
inline double compute_hter(const std::vector<ScoreRecord>& scores, double threshold) {
  detail::require_both_labels(scores, "compute_hter");
  std::size_t spoof = 0, accepted = 0, live = 0, rejected = 0;
  for (const auto& r : scores) {
    if (r.spoof) {
      ++spoof;
      accepted += r.fused < threshold;
    } else {
      ++live;
      rejected += r.fused >= threshold;
    }
  }
  return (100.0 * double(accepted) / double(spoof) + 100.0 * double(rejected) / double(live)) / 2.0;
}

/// Threshold with the lowest ACER among midpoints of the sorted unique
/// scores and one point beyond each end; ties go to the lower BPCER, then
/// the lower threshold.
inline double select_threshold(const std::vector<ScoreRecord>& dev) {
  detail::require_both_labels(dev, "select_threshold");
  std::vector<double> v;
  for (const auto& r : dev) v.push_back(r.fused);
  std::sort(v.begin(), v.end());
  v.erase(std::unique(v.begin(), v.end()), v.end());
  std::vector<double> candidates{v.front() - 1.0};
  for (std::size_t i = 0; i + 1 < v.size(); ++i) candidates.push_back(v[i] + (v[i + 1] - v[i]) / 2.0);
  candidates.push_back(v.back() + 1.0);
  double best = candidates.front();
  MetricsReport best_m = compute_acer(dev, best);
  for (std::size_t i = 1; i < candidates.size(); ++i) {
    const MetricsReport m = compute_acer(dev, candidates[i]);
    if (m.acer < best_m.acer || (m.acer == best_m.acer && m.bpcer < best_m.bpcer)) {
      best = candidates[i];
      best_m = m;
    }
  }
  return best;
}

// ---------------------------------------------------------------------------
// Medium classification from noise spectra

inline constexpr std::size_t kFeatureSide = 16;

/// Channel-averaged shifted FFT magnitude of the first three channels of
/// `noise` [S,S,C], central k x k zeroed, average-pooled to 16 x 16 and
/// L2-normalized. All-zero spectra give the zero vector.
inline std::vector<double> spectral_feature(const Image& noise, std::size_t k) {
  const std::size_t s = noise.dim(0), c = noise.dim(2);
  if (noise.dim(1) != s || s % kFeatureSide) throw ShapeError("spectral_feature: expected square [S,S,C] noise");
  std::vector<double> avg(s * s);
  for (std::size_t ch = 0; ch < std::min<std::size_t>(c, 3); ++ch) {
    std::vector<double> plane(s * s);
    for (std::size_t i = 0; i < plane.size(); ++i) plane[i] = noise[i * c + ch];
    const auto mag = shifted_magnitude<double>(plane, s, s);
    for (std::size_t i = 0; i < mag.size(); ++i) avg[i] += mag[i] / double(std::min<std::size_t>(c, 3));
  }
  const std::size_t cell = s / kFeatureSide;
  std::vector<double> f(kFeatureSide * kFeatureSide);
  for (std::size_t y = 0; y < s; ++y)
    for (std::size_t x = 0; x < s; ++x)
      if (!in_center_mask(y, x, s, s, k)) f[(y / cell) * kFeatureSide + x / cell] += avg[y * s + x];
  double norm = 0;
  for (double v : f) norm += v * v;
  if (norm > 0)
    for (double& v : f) v /= std::sqrt(norm);
  return f;
}

struct Confusion {
  std::array<std::array<double, 5>, 5> rates{};  // rows actual, columns predicted
  std::array<std::size_t, 5> support{};
  double accuracy = 0;
};

/// Nearest class centroid; equal distances resolve to the earlier class in
/// live, print1, print2, display1, display2 order.
inline Confusion medium_classify(const std::vector<std::vector<double>>& train, const std::vector<std::size_t>& train_cls,
                                 const std::vector<std::vector<double>>& test, const std::vector<std::size_t>& test_cls) {
  if (train.size() != train_cls.size() || test.size() != test_cls.size())
    throw ShapeError("medium_classify: features and labels differ in length");
  if (train.empty() || test.empty()) throw DataError("medium_classify: empty train or test set");
  const std::size_t dim = train[0].size();
  std::array<std::vector<double>, 5> centroid;
  std::array<std::size_t, 5> count{};
  for (std::size_t i = 0; i < train.size(); ++i) {
    auto& c = centroid.at(train_cls[i]);
    if (c.empty()) c.assign(dim, 0.0);
    for (std::size_t j = 0; j < dim; ++j) c[j] += train[i][j];
    ++count[train_cls[i]];
  }
  std::size_t classes = 0;
  for (std::size_t k = 0; k < 5; ++k)
    if (count[k]) {
      ++classes;
      for (double& v : centroid[k]) v /= double(count[k]);
    }
  if (classes < 2) throw DataError("medium_classify: need at least two classes in training");
  Confusion out;
  std::array<std::array<std::size_t, 5>, 5> counts{};
  std::size_t correct = 0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    if (!count.at(test_cls[i]))
      throw DataError("medium_classify: class " + kClassNames[test_cls[i]] + " has no training samples");
    std::size_t best = 5;
    double best_d = 0;
    for (std::size_t k = 0; k < 5; ++k) {
      if (!count[k]) continue;
      double d = 0;
      for (std::size_t j = 0; j < dim; ++j) d += (test[i][j] - centroid[k][j]) * (test[i][j] - centroid[k][j]);
      if (best == 5 || d < best_d) {
        best = k;
        best_d = d;
      }
    }
    ++counts[test_cls[i]][best];
    correct += best == test_cls[i];
  }
  for (std::size_t r = 0; r < 5; ++r) {
    for (std::size_t c = 0; c < 5; ++c) out.support[r] += counts[r][c];
    for (std::size_t c = 0; c < 5; ++c)
      out.rates[r][c] = out.support[r] ? double(counts[r][c]) / double(out.support[r]) : 0.0;
  }
  out.accuracy = double(correct) / double(test.size());
  return out;
}

inline std::string confusion_csv(const Confusion& c) {
  std::ostringstream out;
  out << "actual";
  for (const auto& n : kClassNames) out << ',' << n;
  out << '\n';
  char buf[32];
  for (std::size_t r = 0; r < 5; ++r) {
    out << kClassNames[r];
    for (std::size_t k = 0; k < 5; ++k) {
      std::snprintf(buf, sizeof buf, ",%.6f", c.rates[r][k]);
      out << buf;
    }
    out << '\n';
  }
  return out.str();
}

/// Two leading principal components of row-vector features.
struct Pca {
  Eigen::VectorXd mean;
  Eigen::MatrixXd basis;       // dim x 2, orthonormal
  Eigen::MatrixXd projection;  // n x 2
};

inline Pca pca2(const std::vector<std::vector<double>>& features) {
  if (features.size() < 2) throw DataError("pca: need at least two samples");
  const Eigen::Index n = Eigen::Index(features.size()), d = Eigen::Index(features[0].size());
  Eigen::MatrixXd x(n, d);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < d; ++j) x(i, j) = features[std::size_t(i)][std::size_t(j)];
  Pca p;
  p.mean = x.colwise().mean();
  x.rowwise() -= p.mean.transpose();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(x.transpose() * x);
  p.basis = Eigen::MatrixXd(d, 2);
  for (int c = 0; c < 2; ++c) {
    Eigen::VectorXd v = eig.eigenvectors().col(d - 1 - c);
    Eigen::Index arg;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    p.basis.col(c) = v;
  }
  p.projection = x * p.basis;
  return p;
}

/// CSV of id, medium, the feature vector and optionally two PCA columns.
inline std::string export_features(const std::vector<std::string>& ids, const std::vector<std::string>& mediums,
                                   const std::vector<std::vector<double>>& features, bool with_pca) {
  if (ids.size() != features.size() || mediums.size() != features.size())
    throw ShapeError("export_features: ids, mediums and features differ in length");
  std::ostringstream out;
  out << "id,medium";
  const std::size_t d = features.empty() ? 0 : features[0].size();
  for (std::size_t j = 0; j < d; ++j) out << ",f" << j;
  if (with_pca) out << ",pc1,pc2";
  out << '\n';
  Pca p;
  if (with_pca) p = pca2(features);
  char buf[64];
  for (std::size_t i = 0; i < features.size(); ++i) {
    out << ids[i] << ',' << mediums[i];
    for (double v : features[i]) {
      std::snprintf(buf, sizeof buf, ",%.9g", v);
      out << buf;
    }
    if (with_pca) {
      std::snprintf(buf, sizeof buf, ",%.9g,%.9g", p.projection(Eigen::Index(i), 0), p.projection(Eigen::Index(i), 1));
      out << buf;
    }
    out << '\n';
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// Scoring a trained model

/// Inference outputs for one image, as [S,S,C] images.
struct Despoofed {
  Image noise;     // [S,S,6]
  Image live_hat;  // [S,S,6]
  Image map01;     // [S/8,S/8,1]
  Image depth;     // [S/8,S/8,1], DQ depth of the input
};

/// Eval-mode DS and DQ passes over a batch of RGB images.
template <typename T>
std::vector<Despoofed> despoof_batch(Model<T>& model, const std::vector<const Image*>& images) {
  const std::size_t b = images.size(), s = images.at(0)->dim(0);
  if (s != model.config.scale)
    throw DataError("image size " + std::to_string(s) + " does not match the model scale " +
                    std::to_string(model.config.scale) + "; expected " + std::to_string(model.config.scale) + "x" +
                    std::to_string(model.config.scale));
  Tensor<T> input({b, s, s, kImageChannels});
  const std::size_t per = s * s * kImageChannels;
  for (std::size_t i = 0; i < b; ++i) {
    if (images[i]->shape() != Shape{s, s, 3}) throw DataError("despoof: image shape " + to_string(images[i]->shape()) +
                                                              " does not match " + to_string(Shape{s, s, 3}));
    const Tensor<T> six = network_input<T>(*images[i]);
    std::copy(six.data().begin(), six.data().end(), input.raw() + i * per);
  }
  Tape<T> tape;
  Var x = tape.constant(input);
  const DsOutput out = model.ds.forward(tape, x, Mode::eval);
  Var depth = model.dq.forward(tape, x, Mode::eval);
  auto slice = [&](Var v, std::size_t i) {
    const Tensor<T>& t = tape.value(v);
    Shape shape(t.shape().begin() + 1, t.shape().end());
    Image img(shape);
    const std::size_t n = img.size();
    for (std::size_t k = 0; k < n; ++k) img[k] = double(t[i * n + k]);
    return img;
  };
  std::vector<Despoofed> result;
  for (std::size_t i = 0; i < b; ++i)
    result.push_back({slice(out.noise, i), slice(out.live_hat, i), slice(out.map01, i), slice(depth, i)});
  return result;
}

inline double mean_abs(const Image& img) {
  double s = 0;
  for (double v : img.data()) s += std::abs(v);
  return s / double(img.size());
}

/// Peak magnitude outside the central k x k block over all channels.
inline double high_frequency_peak(const Image& noise, std::size_t k) {
  const std::size_t s = noise.dim(0), c = noise.dim(2);
  double peak = 0;
  for (std::size_t ch = 0; ch < c; ++ch) {
    std::vector<double> plane(s * s);
    for (std::size_t i = 0; i < plane.size(); ++i) plane[i] = noise[i * c + ch];
    const auto mag = shifted_magnitude<double>(plane, s, s);
    for (std::size_t y = 0; y < s; ++y)
      for (std::size_t x = 0; x < s; ++x)
        if (!in_center_mask(y, x, s, s, k)) peak = std::max(peak, mag[y * s + x]);
  }
  return peak;
}

/// Per-sample evaluation products kept after the network outputs are dropped.
struct SampleEval {
  ScoreRecord score;
  std::size_t cls = 0;
  std::vector<double> feature;
  double noise_gt_l1 = 0;  // mean |N_rgb - gt_noise|
  double hf_peak = 0;
};

template <typename T>
std::vector<SampleEval> evaluate_samples(Model<T>& model, const std::vector<const Sample*>& samples,
                                         std::size_t batch = 16) {
  std::vector<SampleEval> out(samples.size());
  const std::size_t k = model.config.weights.mask_size(model.config.scale);
  for (std::size_t start = 0; start < samples.size(); start += batch) {
    const std::size_t end = std::min(samples.size(), start + batch);
    std::vector<const Image*> images;
    for (std::size_t i = start; i < end; ++i) images.push_back(&samples[i]->rgb);
    const auto results = despoof_batch(model, images);
    for (std::size_t i = start; i < end; ++i) {
      const Sample& s = *samples[i];
      const Despoofed& d = results[i - start];
      SampleEval& e = out[i];
      e.score.id = s.row.path;
      e.score.spoof = s.row.spoof;
      e.score.medium = s.row.medium;
      e.score.s_noise = mean_abs(d.noise);
      e.score.s_map = mean_abs(d.map01);
      double depth = 0;
      for (double v : d.depth.data()) depth += std::max(0.0, 1.0 - v);
      e.score.s_depth = depth / double(d.depth.size());
      e.cls = class_index(s.row.medium);
      e.feature = spectral_feature(d.noise, k);
      double l1 = 0;
      for (std::size_t p = 0; p < s.noise.size() / 3; ++p)
        for (std::size_t c = 0; c < 3; ++c) l1 += std::abs(d.noise[p * kImageChannels + c] - s.noise[p * 3 + c]);
      e.noise_gt_l1 = l1 / double(s.noise.size());
      e.hf_peak = high_frequency_peak(d.noise, k);
    }
  }
  return out;
}

struct EvalSummary {
  FuseStrategy strategy = FuseStrategy::avg;
  MetricsReport report;
  Confusion confusion;
  std::vector<ScoreRecord> test_scores;
  std::map<std::string, MetricsReport> by_strategy;  // every strategy, dev-selected thresholds
  double noise_gt_l1_spoof = 0;  // mean over spoof test samples
  double mean_noise_live = 0, mean_noise_spoof = 0;
  double hf_peak_live = 0, hf_peak_spoof = 0;
};

/// Threshold from the train split, metrics on the test split.
inline EvalSummary summarize(std::vector<SampleEval> dev, std::vector<SampleEval> test, FuseStrategy strategy) {
  EvalSummary sum;
  sum.strategy = strategy;
  auto records = [](std::vector<SampleEval>& v, FuseStrategy s) {
    std::vector<ScoreRecord> r;
    for (auto& e : v) {
      e.score.fused = fuse(e.score, s);
      r.push_back(e.score);
    }
    return r;
  };
  for (const auto& [name, s] : strategy_names()) {
    const auto d = records(dev, s);
    const auto t = records(test, s);
    MetricsReport m = compute_acer(t, select_threshold(d));
    m.hter = compute_hter(t, m.threshold);
    sum.by_strategy[name] = m;
  }
  const auto d = records(dev, strategy);
  sum.test_scores = records(test, strategy);
  sum.report = compute_acer(sum.test_scores, select_threshold(d));
  sum.report.hter = compute_hter(sum.test_scores, sum.report.threshold);

  std::vector<std::vector<double>> ftr, fte;
  std::vector<std::size_t> ctr, cte;
  for (const auto& e : dev) {
    ftr.push_back(e.feature);
    ctr.push_back(e.cls);
  }
  for (const auto& e : test) {
    fte.push_back(e.feature);
    cte.push_back(e.cls);
  }
  sum.confusion = medium_classify(ftr, ctr, fte, cte);

  std::size_t nl = 0, ns = 0;
  for (const auto& e : test) {
    if (e.score.spoof) {
      ++ns;
      sum.noise_gt_l1_spoof += e.noise_gt_l1;
      sum.mean_noise_spoof += e.score.s_noise;
      sum.hf_peak_spoof += e.hf_peak;
    } else {
      ++nl;
      sum.mean_noise_live += e.score.s_noise;
      sum.hf_peak_live += e.hf_peak;
    }
  }
  sum.noise_gt_l1_spoof /= double(std::max<std::size_t>(ns, 1));
  sum.mean_noise_spoof /= double(std::max<std::size_t>(ns, 1));
  sum.hf_peak_spoof /= double(std::max<std::size_t>(ns, 1));
  sum.mean_noise_live /= double(std::max<std::size_t>(nl, 1));
  sum.hf_peak_live /= double(std::max<std::size_t>(nl, 1));
  return sum;
}

inline std::string scores_csv(const std::vector<ScoreRecord>& scores) {
  std::ostringstream out;
  out << "id,label,medium,s_noise,s_depth,s_map,fused\n";
  char buf[160];
  for (const auto& r : scores) {
    std::snprintf(buf, sizeof buf, ",%.9g,%.9g,%.9g,%.9g\n", r.s_noise, r.s_depth, r.s_map, r.fused);
    out << r.id << ',' << (r.spoof ? "spoof" : "live") << ',' << r.medium << buf;
  }
  return out.str();
}

inline nlohmann::json report_json(const MetricsReport& m) {
  return {{"threshold", m.threshold}, {"apcer", m.apcer},   {"bpcer", m.bpcer},
          {"acer", m.acer},           {"hter", m.hter},     {"apcer_per_medium", m.apcer_per_medium}};
}

inline nlohmann::json summary_json(const EvalSummary& s) {
  nlohmann::json j = report_json(s.report);
  j["strategy"] = strategy_name(s.strategy);
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : s.confusion.rates) rows.push_back(r);
  j["confusion"] = {{"classes", kClassNames}, {"rates", rows}, {"support", s.confusion.support},
                    {"accuracy", s.confusion.accuracy}};
  for (const auto& [name, m] : s.by_strategy) j["strategies"][name] = report_json(m);
  j["noise"] = {{"l1_to_ground_truth_spoof", s.noise_gt_l1_spoof},
                {"mean_abs_live", s.mean_noise_live},
                {"mean_abs_spoof", s.mean_noise_spoof},
                {"high_frequency_peak_live", s.hf_peak_live},
                {"high_frequency_peak_spoof", s.hf_peak_spoof}};
  return j;
}

}  // namespace despoof
