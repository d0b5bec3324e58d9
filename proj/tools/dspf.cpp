// dspf: corpus generation, training, de-spoofing and evaluation.

#include <chrono>
#include <cstdio>
#include <iostream>

#include "CLI11.hpp"
#include "despoof/eval_metrics.hpp"
#include "json.hpp"

#ifndef DESPOOF_VERSION
#define DESPOOF_VERSION "dev"
#endif

namespace fs = std::filesystem;
using json = nlohmann::json;
using Real = float;

namespace {

enum Exit { kOk = 0, kUsage = 2, kData = 3, kNumeric = 4 };

struct RunManifest {
  std::string command;
  std::uint64_t config_hash = 0;
  std::uint64_t seed = 0;
  json inputs = json::object();
  json outputs = json::object();
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();

  void write(const fs::path& dir) const {
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const json j = {{"command", command},  {"config_hash", despoof::hex64(config_hash)},
                    {"seed", seed},        {"inputs", inputs},
                    {"outputs", outputs},  {"tool_version", DESPOOF_VERSION},
                    {"wall_time_seconds", wall}};
    despoof::write_file_atomic(dir / ("run_" + command + ".json"), j.dump(2) + "\n");
  }
};

void make_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw despoof::DataError("cannot create directory " + dir.string() + ": " + ec.message());
}

// ---------------------------------------------------------------------------

struct GenArgs {
  std::string config, out;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> scale;
};

void cmd_gen(const GenArgs& a) {
  RunManifest run{"gen"};
  const auto kv = despoof::KeyValueConfig::load(a.config);
  auto g = despoof::parse_gen_config(kv);
  if (a.seed) g.seed = *a.seed;
  if (a.scale) g.size = *a.scale;
  if (!despoof::is_power_of_two(g.size) || g.size < 32)
    throw despoof::ConfigError("image size must be a power of two >= 32, got " + std::to_string(g.size));
  if (g.media.empty()) throw despoof::ConfigError(a.config + ": missing key 'media' (medium profile file)");
  const auto profiles = despoof::load_profiles(g.media);
  make_dir(a.out);
  const auto rows = despoof::gen_corpus(g, profiles, a.out);
  std::size_t train = 0;
  for (const auto& r : rows) train += r.split == "train";
  std::cerr << "wrote " << rows.size() << " samples (" << train << " train, " << rows.size() - train << " test) to "
            << a.out << "\n";
  run.config_hash = kv.hash();
  run.seed = g.seed;
  run.inputs = {{"config", a.config}, {"media", g.media.string()}};
  run.outputs = {{"manifest", (fs::path(a.out) / "manifest.csv").string()}, {"samples", rows.size()}};
  run.write(a.out);
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string corpus, config, out, resume;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> scale;
  std::int64_t stop_after = -1;
};

void cmd_train(const TrainArgs& a) {
  RunManifest run{"train"};
  despoof::TrainConfig cfg =
      a.config.empty() ? despoof::TrainConfig{} : despoof::parse_train_config(despoof::KeyValueConfig::load(a.config));
  if (a.seed) cfg.seed = *a.seed;
  if (a.scale) cfg.scale = *a.scale;
  cfg.validate();
  const auto corpus = despoof::load_corpus(a.corpus, "train");
  despoof::TrainOptions opts;
  opts.out_dir = a.out;
  opts.resume = a.resume;
  opts.stop_after = a.stop_after;
  opts.on_row = [](const despoof::LossRow& r) {
    if (r.step % 50 == 0 || r.step == -1) {
      const auto& v = r.values;
      std::fprintf(stderr, "step %6lld  J_z %.4f  J_m %.4f  J_r %.3f  J_DQ %.4f  J_VQ %.4f  J_T %.4f\n",
                   static_cast<long long>(r.step), v.zero_one, v.magnitude, v.repetitive, v.dq, v.vq, v.total);
    }
  };
  const auto result = despoof::train<Real>(corpus, cfg, opts);
  std::cerr << "checkpoint " << result.checkpoint.string() << " hash " << result.hash << "\n";
  run.config_hash = cfg.hash();
  run.seed = cfg.seed;
  run.inputs = {{"corpus", a.corpus}, {"config", a.config}, {"resume", a.resume}};
  run.outputs = {{"checkpoint", result.checkpoint.string()},
                 {"hash", result.hash},
                 {"step", result.last_step},
                 {"loss_csv", (fs::path(a.out) / "loss.csv").string()}};
  run.write(a.out);
}

// ---------------------------------------------------------------------------

/// Log-magnitude shifted spectrum of the channel mean of the first three
/// channels, scaled to [0, 1]; `raw` receives the unscaled magnitudes.
despoof::Image log_spectrum(const despoof::Image& img, std::vector<double>& raw) {
  const std::size_t s = img.dim(0), c = img.dim(2), used = std::min<std::size_t>(c, 3);
  std::vector<double> plane(s * s);
  for (std::size_t i = 0; i < plane.size(); ++i) {
    for (std::size_t k = 0; k < used; ++k) plane[i] += img[i * c + k];
    plane[i] /= double(used);
  }
  raw = despoof::shifted_magnitude<double>(plane, s, s);
  despoof::Image out({s, s, 1});
  double peak = 0;
  for (std::size_t i = 0; i < raw.size(); ++i) peak = std::max(peak, out[i] = std::log1p(raw[i]));
  if (peak > 0)
    for (auto& v : out.data()) v /= peak;
  return out;
}

json spectrum_peak(const std::vector<double>& raw, std::size_t s, std::size_t k) {
  const std::size_t arg = std::max_element(raw.begin(), raw.end()) - raw.begin();
  return {{"y", arg / s}, {"x", arg % s}, {"outside_low_frequency_mask", !despoof::in_center_mask(arg / s, arg % s, s, s, k)}};
}

struct DespoofArgs {
  std::string checkpoint, image, out;
};

void cmd_despoof(const DespoofArgs& a) {
  RunManifest run{"despoof"};
  auto model = despoof::load_model<Real>(a.checkpoint);
  const despoof::Image rgb = despoof::read_ppm(a.image);
  const std::size_t s = model.config.scale;
  if (rgb.dim(0) != s || rgb.dim(1) != s)
    throw despoof::DataError(a.image + ": image is " + std::to_string(rgb.dim(1)) + "x" + std::to_string(rgb.dim(0)) +
                             ", the checkpoint expects " + std::to_string(s) + "x" + std::to_string(s));
  const auto d = despoof::despoof_batch(model, {&rgb}).at(0);
  make_dir(a.out);
  despoof::Image live({s, s, 3}), noise({s, s, 3}), vis({s, s, 3});
  for (std::size_t i = 0; i < s * s; ++i)
    for (std::size_t c = 0; c < 3; ++c) {
      live[i * 3 + c] = d.live_hat[i * despoof::kImageChannels + c];
      noise[i * 3 + c] = d.noise[i * despoof::kImageChannels + c];
      // Noise magnified five times around mid-gray.
      vis[i * 3 + c] = std::clamp(std::round(5.0 * noise[i * 3 + c] * 255.0 + 128.0), 0.0, 255.0) / 255.0;
    }
  std::vector<double> raw;
  const despoof::Image spectrum = log_spectrum(noise, raw);
  const fs::path out(a.out);
  despoof::write_ppm(out / "live.ppm", live);
  despoof::write_ppm(out / "noise.ppm", vis);
  despoof::write_planes(out / "noise.dspn", despoof::kNoiseMagic, noise);
  despoof::write_pgm(out / "spectrum.pgm", spectrum);
  run.config_hash = model.config.hash();
  run.seed = model.config.seed;
  run.inputs = {{"checkpoint", a.checkpoint}, {"image", a.image}};
  run.outputs = {{"live", (out / "live.ppm").string()},
                 {"noise", (out / "noise.ppm").string()},
                 {"noise_raw", (out / "noise.dspn").string()},
                 {"spectrum", (out / "spectrum.pgm").string()},
                 {"spectrum_peak", spectrum_peak(raw, s, model.config.weights.mask_size(s))},
                 {"mean_abs_noise", despoof::mean_abs(d.noise)}};
  run.write(a.out);
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint, corpus, out, strategy = "avg";
};

void cmd_eval(const EvalArgs& a) {
  RunManifest run{"eval"};
  const auto strategy = despoof::parse_strategy(a.strategy);
  auto model = despoof::load_model<Real>(a.checkpoint);
  const auto corpus = despoof::load_corpus(a.corpus);
  const auto dev_samples = corpus.select("train"), test_samples = corpus.select("test");
  if (dev_samples.empty() || test_samples.empty())
    throw despoof::DataError(a.corpus + ": evaluation needs both train and test splits");
  auto dev = despoof::evaluate_samples(model, dev_samples);
  auto test = despoof::evaluate_samples(model, test_samples);
  const auto summary = despoof::summarize(dev, test, strategy);
  make_dir(a.out);
  const fs::path out(a.out);
  despoof::write_file_atomic(out / "scores.csv", despoof::scores_csv(summary.test_scores));
  despoof::write_file_atomic(out / "report.json", despoof::summary_json(summary).dump(2) + "\n");
  despoof::write_file_atomic(out / "confusion.csv", despoof::confusion_csv(summary.confusion));
  std::vector<std::string> ids, mediums;
  std::vector<std::vector<double>> features;
  for (const auto& e : test) {
    ids.push_back(e.score.id);
    mediums.push_back(e.score.medium);
    features.push_back(e.feature);
  }
  despoof::write_file_atomic(out / "features.csv", despoof::export_features(ids, mediums, features, true));
  std::fprintf(stderr, "%s: threshold %.6g  APCER %.2f  BPCER %.2f  ACER %.2f  HTER %.2f  medium accuracy %.3f\n",
               a.strategy.c_str(), summary.report.threshold, summary.report.apcer, summary.report.bpcer,
               summary.report.acer, summary.report.hter, summary.confusion.accuracy);
  run.config_hash = model.config.hash();
  run.seed = model.config.seed;
  run.inputs = {{"checkpoint", a.checkpoint}, {"corpus", a.corpus}, {"strategy", a.strategy}};
  run.outputs = {{"scores", (out / "scores.csv").string()},
                 {"report", (out / "report.json").string()},
                 {"confusion", (out / "confusion.csv").string()},
                 {"features", (out / "features.csv").string()}};
  run.write(a.out);
}

// ---------------------------------------------------------------------------

struct SpectrumArgs {
  std::string input, out;
  std::size_t k = 0;
};

void cmd_spectrum(const SpectrumArgs& a) {
  RunManifest run{"spectrum"};
  const fs::path in(a.input);
  const despoof::Image img =
      in.extension() == ".dspn" ? despoof::read_planes(in, despoof::kNoiseMagic) : despoof::read_ppm(in);
  const std::size_t s = img.dim(0);
  if (img.dim(1) != s || !despoof::is_power_of_two(s))
    throw despoof::DataError(a.input + ": spectrum needs a square power-of-two image");
  std::vector<double> raw;
  const auto spectrum = log_spectrum(img, raw);
  make_dir(a.out);
  const fs::path out = fs::path(a.out) / (in.stem().string() + "_spectrum.pgm");
  despoof::write_pgm(out, spectrum);
  run.inputs = {{"image", a.input}};
  run.outputs = {{"spectrum", out.string()}, {"spectrum_peak", spectrum_peak(raw, s, a.k ? a.k : s / 4)}};
  run.write(a.out);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Synthetic face de-spoofing: corpus generation, training and evaluation"};
  app.set_version_flag("--version", DESPOOF_VERSION);
  app.require_subcommand(1);

  GenArgs gen;
  auto* g = app.add_subcommand("gen", "Generate a synthetic live/spoof corpus");
  g->add_option("--config", gen.config, "Corpus config file")->required();
  g->add_option("--out", gen.out, "Output directory")->required();
  g->add_option("--seed", gen.seed, "Override the config seed");
  g->add_option("--scale", gen.scale, "Override the image size");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Pretrain DQ, then train DS and VQ");
  t->add_option("--corpus", tr.corpus, "Corpus directory")->required();
  t->add_option("--config", tr.config, "Training config file (defaults when omitted)");
  t->add_option("--out", tr.out, "Output directory")->required();
  t->add_option("--seed", tr.seed, "Override the config seed");
  t->add_option("--scale", tr.scale, "Override the image size");
  t->add_option("--resume", tr.resume, "Checkpoint to continue from");
  t->add_option("--stop-after", tr.stop_after, "Stop with a checkpoint after this step");

  DespoofArgs ds;
  auto* d = app.add_subcommand("despoof", "Split one image into live estimate and spoof noise");
  d->add_option("--checkpoint", ds.checkpoint, "Model checkpoint (.dspf)")->required();
  d->add_option("--image", ds.image, "Input PPM image")->required();
  d->add_option("--out", ds.out, "Output directory")->required();

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Score a corpus and report error rates");
  e->add_option("--checkpoint", ev.checkpoint, "Model checkpoint (.dspf)")->required();
  e->add_option("--corpus", ev.corpus, "Corpus directory")->required();
  e->add_option("--out", ev.out, "Output directory")->required();
  e->add_option("--strategy", ev.strategy, "Fusion: noise, depth, map, avg, max, avg_all, max_all")
      ->capture_default_str();

  SpectrumArgs sp;
  auto* s = app.add_subcommand("spectrum", "Write the log-magnitude spectrum of an image or noise file");
  s->add_option("--image", sp.input, "PPM image or .dspn noise file")->required();
  s->add_option("--out", sp.out, "Output directory")->required();
  s->add_option("--mask", sp.k, "Low-frequency mask size (default S/4)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*g) cmd_gen(gen);
    if (*t) cmd_train(tr);
    if (*d) cmd_despoof(ds);
    if (*e) cmd_eval(ev);
    if (*s) cmd_spectrum(sp);
  } catch (const despoof::ConfigError& err) {
    std::cerr << "config error: " << err.what() << "\n";
    return kUsage;
  } catch (const despoof::NumericError& err) {
    std::cerr << "numeric error: " << err.what() << "\n";
    return kNumeric;
  } catch (const despoof::ShapeError& err) {
    std::cerr << "data error: " << err.what() << "\n";
    return kData;
  } catch (const despoof::DataError& err) {
    std::cerr << "data error: " << err.what() << "\n";
    return kData;
  }
  return kOk;
}
