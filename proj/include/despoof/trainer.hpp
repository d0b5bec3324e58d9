#pragma once

#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "despoof/config.hpp"
#include "despoof/corpus.hpp"
#include "despoof/losses.hpp"
#include "despoof/optimizer.hpp"
#include "json.hpp"

namespace despoof {

struct TrainConfig {
  std::size_t batch_size = 6;
  double learning_rate = 3e-5;
  std::size_t steps = 2000;
  std::uint64_t seed = 0;
  std::size_t scale = 64;
  LossWeights weights;
  OptimizerKind optimizer = OptimizerKind::adam;
  std::size_t checkpoint_interval = 500;
  std::size_t dq_pretrain_epochs = 10;
  double dq_learning_rate = 1e-3;
  double dq_channel_scale = 0.25;
  DecoderInput decoder_input = DecoderInput::features;
  double noise_init_gain = 1.0;
  double vq_dropout = 0.2;

  DsConfig ds_config() const { return {decoder_input, noise_init_gain}; }
  DqConfig dq_config() const { return {dq_channel_scale}; }
  VqConfig vq_config() const { return {scale, vq_dropout}; }
  OptimizerConfig optimizer_config(double lr) const {
    OptimizerConfig o;
    o.kind = optimizer;
    o.learning_rate = lr;
    return o;
  }

  void validate() const {
    if (batch_size < 2) throw ConfigError("batch_size must be >= 2 for batch normalization");
    if (!is_power_of_two(scale) || scale < 32) throw ConfigError("scale must be a power of two >= 32");
    if (learning_rate < 0 || dq_learning_rate < 0) throw ConfigError("learning rates must be nonnegative");
    if (checkpoint_interval == 0) throw ConfigError("checkpoint_interval must be >= 1");
    const std::size_t k = weights.mask_size(scale);
    if (k == 0 || k % 2 || k >= scale) throw ConfigError("mask_k must be even and below the scale");
  }

  /// Sorted key=value lines; parse_train_config reads them back unchanged.
  std::string canonical() const {
    auto num = [](double v) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.17g", v);
      return std::string(buf);
    };
    std::map<std::string, std::string> kv{
        {"batch_size", std::to_string(batch_size)},
        {"learning_rate", num(learning_rate)},
        {"steps", std::to_string(steps)},
        {"seed", std::to_string(seed)},
        {"scale", std::to_string(scale)},
        {"lambda1", num(weights.lambda1)},
        {"lambda2", num(weights.lambda2)},
        {"lambda3", num(weights.lambda3)},
        {"lambda4", num(weights.lambda4)},
        {"mask_k", std::to_string(weights.k)},
        {"magnitude_on_all", weights.magnitude_on_all ? "true" : "false"},
        {"optimizer", optimizer == OptimizerKind::adam ? "adam" : "sgd"},
        {"checkpoint_interval", std::to_string(checkpoint_interval)},
        {"dq_pretrain_epochs", std::to_string(dq_pretrain_epochs)},
        {"dq_learning_rate", num(dq_learning_rate)},
        {"dq_channel_scale", num(dq_channel_scale)},
        {"decoder_input", decoder_input == DecoderInput::features ? "features" : "shortcut"},
        {"noise_init_gain", num(noise_init_gain)},
        {"vq_dropout", num(vq_dropout)},
    };
    std::string out;
    for (const auto& [k, v] : kv) out += k + " = " + v + "\n";
    return out;
  }

  std::uint64_t hash() const { return fnv1a(canonical()); }
};

inline TrainConfig parse_train_config(const KeyValueConfig& cfg) {
  TrainConfig t;
  t.batch_size = cfg.get_size("batch_size", t.batch_size);
  t.learning_rate = cfg.get_double("learning_rate", t.learning_rate);
  t.steps = cfg.get_size("steps", t.steps);
  t.seed = cfg.get_size("seed", t.seed);
  t.scale = cfg.get_size("scale", t.scale);
  t.weights.lambda1 = cfg.get_double("lambda1", t.weights.lambda1);
  t.weights.lambda2 = cfg.get_double("lambda2", t.weights.lambda2);
  t.weights.lambda3 = cfg.get_double("lambda3", t.weights.lambda3);
  t.weights.lambda4 = cfg.get_double("lambda4", t.weights.lambda4);
  t.weights.k = cfg.get_size("mask_k", t.weights.k);
  t.weights.magnitude_on_all = cfg.get_bool("magnitude_on_all", t.weights.magnitude_on_all);
  const std::string opt = cfg.get_string("optimizer", "adam");
  if (opt != "adam" && opt != "sgd") throw ConfigError(cfg.source() + ": optimizer must be adam or sgd, got '" + opt + "'");
  t.optimizer = opt == "adam" ? OptimizerKind::adam : OptimizerKind::sgd;
  t.checkpoint_interval = cfg.get_size("checkpoint_interval", t.checkpoint_interval);
  t.dq_pretrain_epochs = cfg.get_size("dq_pretrain_epochs", t.dq_pretrain_epochs);
  t.dq_learning_rate = cfg.get_double("dq_learning_rate", t.dq_learning_rate);
  t.dq_channel_scale = cfg.get_double("dq_channel_scale", t.dq_channel_scale);
  const std::string dec = cfg.get_string("decoder_input", "features");
  if (dec != "features" && dec != "shortcut")
    throw ConfigError(cfg.source() + ": decoder_input must be features or shortcut, got '" + dec + "'");
  t.decoder_input = dec == "features" ? DecoderInput::features : DecoderInput::shortcut;
  t.noise_init_gain = cfg.get_double("noise_init_gain", t.noise_init_gain);
  t.vq_dropout = cfg.get_double("vq_dropout", t.vq_dropout);
  cfg.require_known({"batch_size", "learning_rate", "steps", "seed", "scale", "lambda1", "lambda2", "lambda3", "lambda4",
                     "mask_k", "magnitude_on_all", "optimizer", "checkpoint_interval", "dq_pretrain_epochs",
                     "dq_learning_rate", "dq_channel_scale", "decoder_input", "noise_init_gain", "vq_dropout"});
  t.validate();
  return t;
}

// ---------------------------------------------------------------------------

template <typename T>
struct Model {
  explicit Model(const TrainConfig& c)
      : config(c),
        ds(c.ds_config(), derive_seed(c.seed, 0xd5)),
        dq(c.dq_config(), derive_seed(c.seed, 0xd9)),
        vq(c.vq_config(), derive_seed(c.seed, 0x79)) {}

  TrainConfig config;
  DespoofNet<T> ds;
  DepthNet<T> dq;
  VisualQualityNet<T> vq;
};

/// One training batch in network layout.
template <typename T>
struct Batch {
  Tensor<T> input;        // [B,S,S,6]
  Tensor<T> depth_label;  // [B,S/8,S/8,1]
  Tensor<T> face_depth;   // [B,S/8,S/8,1]
  std::vector<bool> spoof;
};

/// Six-channel input of one sample.
template <typename T>
Tensor<T> network_input(const Image& rgb) {
  return six_channel(rgb).template cast<T>();
}

template <typename T>
Batch<T> make_batch(const std::vector<const Sample*>& samples) {
  if (samples.empty()) throw DataError("make_batch: empty batch");
  const std::size_t b = samples.size(), s = samples[0]->rgb.dim(0), d = s / 8;
  Batch<T> out{Tensor<T>({b, s, s, kImageChannels}), Tensor<T>({b, d, d, 1}), Tensor<T>({b, d, d, 1}), {}};
  const std::size_t per_in = s * s * kImageChannels, per_d = d * d;
  for (std::size_t i = 0; i < b; ++i) {
    const Tensor<T> six = network_input<T>(samples[i]->rgb);
    std::copy(six.data().begin(), six.data().end(), out.input.raw() + i * per_in);
    for (std::size_t k = 0; k < per_d; ++k) {
      out.depth_label[i * per_d + k] = T(samples[i]->depth_label[k]);
      out.face_depth[i * per_d + k] = T(samples[i]->face_depth[k]);
    }
    out.spoof.push_back(samples[i]->row.spoof);
  }
  return out;
}

/// Draw `d` yields batch_size/2 live and the rest spoof indices. Each pool is
/// walked through a fresh seed-derived permutation per pass.
class BalancedSampler {
 public:
  BalancedSampler(std::size_t n_live, std::size_t n_spoof, std::size_t batch_size, std::uint64_t seed)
      : n_live_(n_live), n_spoof_(n_spoof), live_per_(batch_size / 2), spoof_per_(batch_size - batch_size / 2),
        seed_(seed) {
    if (n_live < live_per_ || n_spoof < spoof_per_)
      throw DataError("corpus too small for a balanced batch: need " + std::to_string(live_per_) + " live and " +
                      std::to_string(spoof_per_) + " spoof training samples, have " + std::to_string(n_live) +
                      " and " + std::to_string(n_spoof));
  }

  std::pair<std::vector<std::size_t>, std::vector<std::size_t>> draw(std::uint64_t d) const {
    return {take(n_live_, live_per_, d, 1), take(n_spoof_, spoof_per_, d, 2)};
  }

 private:
  std::vector<std::size_t> take(std::size_t n, std::size_t per, std::uint64_t d, std::uint64_t pool) const {
    std::vector<std::size_t> out;
    const std::uint64_t per_pass = n / per;  // draws per pass over the pool
    const std::uint64_t pass = d / per_pass, slot = d % per_pass;
    std::vector<std::size_t> perm(n);
    for (std::size_t i = 0; i < n; ++i) perm[i] = i;
    std::mt19937_64 rng(derive_seed(seed_, pass, pool));
    for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[rng() % i]);
    for (std::size_t k = 0; k < per; ++k) out.push_back(perm[slot * per + k]);
    return out;
  }

  std::size_t n_live_, n_spoof_, live_per_, spoof_per_;
  std::uint64_t seed_;
};

struct LossRow {
  std::int64_t step = 0;  // negative during DQ pretraining
  LossValues values;
};

inline constexpr const char* kLossHeader = "step,J_z,J_m,J_r,J_DQ,J_VQ,J_T";

inline std::string format_loss_row(const LossRow& r) {
  char buf[256];
  const auto& v = r.values;
  std::snprintf(buf, sizeof buf, "%" PRId64 ",%.9g,%.9g,%.9g,%.9g,%.9g,%.9g", r.step, v.zero_one, v.magnitude,
                v.repetitive, v.dq, v.vq, v.total);
  return buf;
}

/// Holds the three networks, their optimizers and the training data.
template <typename T>
class Trainer {
 public:
  Trainer(const TrainConfig& config, const Corpus& corpus)
      : config_(config),
        model_(config),
        ds_opt_(config.optimizer_config(config.learning_rate)),
        vq_opt_(config.optimizer_config(config.learning_rate)) {
    config_.validate();
    if (corpus.size != config.scale)
      throw DataError("corpus image size " + std::to_string(corpus.size) + " does not match scale " +
                      std::to_string(config.scale));
    live_ = corpus.select("train", 0);
    spoof_ = corpus.select("train", 1);
    sampler_.emplace(live_.size(), spoof_.size(), config.batch_size, config.seed);
  }

  Model<T>& model() { return model_; }
  const TrainConfig& config() const { return config_; }
  std::int64_t step() const { return step_; }

  /// Iterations of one DQ pretraining epoch.
  std::size_t pretrain_iterations() const {
    const std::size_t n = live_.size() + spoof_.size();
    return config_.dq_pretrain_epochs * ((n + config_.batch_size - 1) / config_.batch_size);
  }

  /// The balanced batch for draw `d`.
  Batch<T> batch(std::uint64_t d) const {
    const auto [li, si] = sampler_->draw(d);
    std::vector<const Sample*> picked;
    for (auto i : li) picked.push_back(live_[i]);
    for (auto i : si) picked.push_back(spoof_[i]);
    return make_batch<T>(picked);
  }

  /// Supervised pseudo-depth pretraining of DQ, then freezing it.
  void pretrain_dq(const std::function<void(const LossRow&)>& log = {}) {
    Optimizer<T> opt(config_.optimizer_config(config_.dq_learning_rate));
    const std::size_t iters = pretrain_iterations();
    for (std::size_t i = 0; i < iters; ++i) {
      const Batch<T> b = batch(derive_seed(config_.seed, 0xd0, i));
      const Tensor<T> target = pseudo_depth_targets(b.spoof, b.face_depth);
      if (!std::equal(target.data().begin(), target.data().end(), b.depth_label.data().begin()))
        throw DataError("depth labels differ from the pseudo-depth contract (live -> face depth, spoof -> 0)");
      Tape<T> tape;
      Var depth = model_.dq.forward(tape, tape.constant(b.input), Mode::train);
      Var loss = l1_norm(tape, sub(tape, depth, tape.constant(target)));
      tape.backward(loss);
      opt.step(model_.dq.params());
      LossRow row;
      row.step = -std::int64_t(iters - i);
      row.values.dq = row.values.total = double(tape.value(loss)[0]);
      if (log) log(row);
    }
    model_.dq.freeze();
  }

  /// Phase A: one discriminator update on `batch` with DS held fixed. Real
  /// images are the live samples, synthetic ones the reconstructions of the
  /// spoof samples. Returns the discriminator loss.
  double update_vq(const Batch<T>& batch, std::int64_t step) {
    require_frozen_dq();
    std::vector<std::size_t> live_idx, spoof_idx;
    for (std::size_t i = 0; i < batch.spoof.size(); ++i) (batch.spoof[i] ? spoof_idx : live_idx).push_back(i);
    const Tensor<T> synth = synthesize_live(model_.ds, batch.input, spoof_idx);
    FreezeGuard<T> hold(model_.ds.params());
    Tape<T> tape;
    Var real = gather_batch(tape, tape.constant(batch.input), live_idx);
    std::mt19937_64 rng(derive_seed(config_.seed, std::uint64_t(step), 3));
    Var loss = vq_discriminator_loss(tape, model_.vq, real, tape.constant(synth), rng, Mode::train);
    tape.backward(loss);
    vq_opt_.step(model_.vq.params());
    return double(tape.value(loss)[0]);
  }

  /// Phase B: one DS update on J_T with VQ and DQ held fixed.
  LossValues update_ds(const Batch<T>& batch) {
    require_frozen_dq();
    Tape<T> tape;
    const auto labels = make_batch_labels(batch.spoof, batch.face_depth);
    const auto loss = total_loss(tape, model_.ds, model_.dq, model_.vq, tape.constant(batch.input), labels,
                                 config_.weights, Mode::train, Mode::eval);
    tape.backward(loss.total);
    ds_opt_.step(model_.ds.params());
    return loss_values(tape, loss);
  }

  /// Phase A on `first`, then phase B on `second`.
  LossRow train_step(const Batch<T>& first, const Batch<T>& second, std::int64_t step) {
    update_vq(first, step);
    LossRow row{step, update_ds(second)};
    step_ = step;
    return row;
  }

  /// Iteration `step` (1-based) on its two seed-derived batches.
  LossRow train_step(std::int64_t step) {
    return train_step(batch(2 * std::uint64_t(step)), batch(2 * std::uint64_t(step) + 1), step);
  }

  // -------------------------------------------------------------------------
  // Checkpoints: a parameter container plus a JSON sidecar.

  std::string encode() const {
    std::vector<NamedTensor> entries;
    append_entries(model_.ds.params(), entries);
    append_entries(model_.dq.params(), entries);
    append_entries(model_.vq.params(), entries);
    ds_opt_.export_state("opt/", entries);
    vq_opt_.export_state("opt/", entries);
    return encode_container(entries);
  }

  nlohmann::json sidecar(const std::string& container) const {
    return {{"format", 1},
            {"step", step_},
            {"seed", config_.seed},
            {"config_hash", hex64(config_.hash())},
            {"hash", hex64(fnv1a(container))},
            {"ds_optimizer_steps", ds_opt_.steps()},
            {"vq_optimizer_steps", vq_opt_.steps()},
            {"dq_frozen", model_.dq.frozen()},
            {"rng", "batches and dropout derive from (seed, step)"},
            {"config", config_.canonical()}};
  }

  /// Writes `<path>` and its `.json` sidecar atomically; returns the hash.
  std::string save(const std::filesystem::path& path) const {
    const std::string container = encode();
    const auto meta = sidecar(container);
    write_file_atomic(path, container);
    write_file_atomic(sidecar_path(path), meta.dump(2) + "\n");
    return meta["hash"];
  }

  void restore(const std::filesystem::path& path) {
    const auto meta = read_sidecar(path);
    if (meta.at("config_hash") != hex64(config_.hash()))
      throw ConfigError("checkpoint " + path.string() + " was written with a different training config");
    const std::string container = read_file(path);
    if (meta.at("hash") != hex64(fnv1a(container))) throw DataError("checkpoint " + path.string() + " fails its hash");
    const auto entries = decode_container(container);
    assign_entries(model_.ds.params(), entries);
    assign_entries(model_.dq.params(), entries);
    assign_entries(model_.vq.params(), entries);
    if (meta.at("dq_frozen").template get<bool>()) model_.dq.freeze();
    std::vector<NamedTensor> ds_state, vq_state;
    for (const auto& e : entries) {
      if (e.name.starts_with("opt/ds/")) ds_state.push_back(e);
      if (e.name.starts_with("opt/vq/")) vq_state.push_back(e);
    }
    ds_opt_.import_state("opt/", ds_state, meta.at("ds_optimizer_steps"));
    vq_opt_.import_state("opt/", vq_state, meta.at("vq_optimizer_steps"));
    step_ = meta.at("step");
  }

  static std::filesystem::path sidecar_path(std::filesystem::path path) { return path.replace_extension(".json"); }

  static nlohmann::json read_sidecar(const std::filesystem::path& path) {
    try {
      return nlohmann::json::parse(read_file(sidecar_path(path)));
    } catch (const nlohmann::json::exception& e) {
      throw DataError("cannot parse checkpoint sidecar " + sidecar_path(path).string() + ": " + e.what());
    }
  }

 private:
  void require_frozen_dq() const {
    if (!model_.dq.frozen()) throw ConfigError("train_step: DQ Net must be pretrained and frozen");
  }

  TrainConfig config_;
  Model<T> model_;
  Optimizer<T> ds_opt_, vq_opt_;
  std::vector<const Sample*> live_, spoof_;
  std::optional<BalancedSampler> sampler_;
  std::int64_t step_ = 0;
};

/// Rebuilds a trained model from a checkpoint for inference.
template <typename T>
Model<T> load_model(const std::filesystem::path& path) {
  const auto meta = Trainer<T>::read_sidecar(path);
  const TrainConfig cfg = parse_train_config(KeyValueConfig::parse(meta.at("config").template get<std::string>(), path.string() + " config"));
  const std::string container = read_file(path);
  if (meta.at("hash") != hex64(fnv1a(container))) throw DataError("checkpoint " + path.string() + " fails its hash");
  Model<T> model(cfg);
  const auto entries = decode_container(container);
  assign_entries(model.ds.params(), entries);
  assign_entries(model.dq.params(), entries);
  assign_entries(model.vq.params(), entries);
  model.dq.freeze();
  return model;
}

// ---------------------------------------------------------------------------

struct TrainOptions {
  std::filesystem::path out_dir;
  std::filesystem::path resume;  // checkpoint to continue from
  std::int64_t stop_after = -1;  // stop (with a checkpoint) after this step
  std::function<void(const LossRow&)> on_row;
};

struct TrainResult {
  std::int64_t last_step = 0;
  std::filesystem::path checkpoint;
  std::string hash;
  std::vector<std::string> loss_lines;  // CSV rows without header
};

inline std::filesystem::path checkpoint_name(const std::filesystem::path& dir, std::int64_t step) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "step_%06" PRId64 ".dspf", step);
  return dir / "checkpoints" / buf;
}

/// DQ pretraining, then config.steps alternating iterations. Writes
/// out_dir/loss.csv, periodic checkpoints and out_dir/model.dspf.
template <typename T>
TrainResult train(const Corpus& corpus, const TrainConfig& config, const TrainOptions& opts) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(opts.out_dir / "checkpoints", ec);
  if (ec) throw DataError("cannot create " + (opts.out_dir / "checkpoints").string() + ": " + ec.message());
  Trainer<T> trainer(config, corpus);
  TrainResult result;
  const fs::path loss_path = opts.out_dir / "loss.csv";
  auto flush = [&] {
    std::string text = std::string(kLossHeader) + "\n";
    for (const auto& l : result.loss_lines) text += l + "\n";
    write_file_atomic(loss_path, text);
  };
  auto record = [&](const LossRow& row) {
    result.loss_lines.push_back(format_loss_row(row));
    if (opts.on_row) opts.on_row(row);
  };
  auto checkpoint = [&](std::int64_t step) {
    flush();
    result.checkpoint = checkpoint_name(opts.out_dir, step);
    result.hash = trainer.save(result.checkpoint);
    result.last_step = step;
  };

  if (!opts.resume.empty()) {
    trainer.restore(opts.resume);
    // Keep the log rows up to the checkpoint; later rows belong to the
    // interrupted run and are regenerated.
    std::istringstream in(read_file(loss_path));
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line))
      if (!line.empty() && std::stoll(line.substr(0, line.find(','))) <= trainer.step())
        result.loss_lines.push_back(line);
  } else {
    trainer.pretrain_dq(record);
    checkpoint(0);
  }
  for (std::int64_t step = trainer.step() + 1; step <= std::int64_t(config.steps); ++step) {
    record(trainer.train_step(step));
    const bool last = step == std::int64_t(config.steps) || step == opts.stop_after;
    if (last || step % std::int64_t(config.checkpoint_interval) == 0) checkpoint(step);
    if (step == opts.stop_after) return result;
  }
  if (result.last_step != trainer.step()) checkpoint(trainer.step());
  flush();
  fs::copy_file(result.checkpoint, opts.out_dir / "model.dspf", fs::copy_options::overwrite_existing, ec);
  if (!ec)
    fs::copy_file(Trainer<T>::sidecar_path(result.checkpoint), opts.out_dir / "model.json",
                  fs::copy_options::overwrite_existing, ec);
  if (ec) throw DataError("cannot write " + (opts.out_dir / "model.dspf").string() + ": " + ec.message());
  return result;
}

}  // namespace despoof
