#pragma once

#include <atomic>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "despoof/config.hpp"
#include "despoof/image.hpp"
#include "despoof/spoof_synth.hpp"

namespace despoof {

/// Class order used by labels, confusion matrices and reports.
inline const std::array<std::string, 5> kClassNames = {"live", "print1", "print2", "display1", "display2"};

inline std::size_t class_index(const std::string& name) {
  for (std::size_t i = 0; i < kClassNames.size(); ++i)
    if (kClassNames[i] == name) return i;
  throw ConfigError("unknown class '" + name + "'");
}

/// Worker count from DSPF_THREADS, else the hardware concurrency.
inline std::size_t worker_count() {
  if (const char* env = std::getenv("DSPF_THREADS")) {
    const long n = std::strtol(env, nullptr, 10);
    if (n >= 1) return std::size_t(n);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

/// Runs fn(i) for i in [0, n) on worker_count() threads. The first exception
/// thrown by any task is rethrown after all workers stop.
template <typename F>
void parallel_for(std::size_t n, F&& fn) {
  const std::size_t workers = std::min(worker_count(), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (std::size_t i; !failed && (i = next++) < n;) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
          failed = true;
        }
      }
    });
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

// ---------------------------------------------------------------------------
// Generation config

struct ClassCount {
  std::string split;  // "train" or "test"
  std::string cls;    // live or a medium name
  std::size_t count = 0;
};

struct GenConfig {
  std::size_t size = 64;
  std::uint64_t seed = 0;
  std::size_t blur = 1;  // capture blur kernel size
  std::filesystem::path media;
  std::vector<ClassCount> counts;

  std::size_t total() const {
    std::size_t n = 0;
    for (const auto& c : counts) n += c.count;
    return n;
  }
};

/// Counts are given either per split (`train.live = 200`) or per class
/// (`live = 250`) with `test_fraction` of them held out.
inline GenConfig parse_gen_config(const KeyValueConfig& cfg) {
  GenConfig g;
  std::set<std::string> known{"size", "seed", "blur", "media", "test_fraction"};
  g.size = cfg.get_size("size", g.size);
  g.seed = cfg.get_size("seed", 0);
  g.blur = cfg.get_size("blur", g.blur);
  if (g.blur % 2 == 0 || g.blur > 9) throw ConfigError(cfg.source() + ": blur must be one of 1, 3, 5, 7, 9");
  if (!is_power_of_two(g.size) || g.size < 32)
    throw ConfigError(cfg.source() + ": size must be a power of two >= 32");
  g.media = cfg.has("media") ? cfg.base_dir() / cfg.get_string("media") : std::filesystem::path();
  const double test_fraction = cfg.get_double("test_fraction", 0.2);
  if (test_fraction < 0.0 || test_fraction > 1.0) throw ConfigError(cfg.source() + ": test_fraction must lie in [0, 1]");
  for (const std::string split : {"train", "test"})
    for (const auto& cls : kClassNames) {
      const std::string key = split + "." + cls;
      known.insert(key);
      if (!cfg.has(key)) continue;
      const std::size_t n = cfg.get_size(key);
      if (n == 0) throw ConfigError(cfg.source() + ": count '" + key + "' must be >= 1");
      g.counts.push_back({split, cls, n});
    }
  for (const auto& cls : kClassNames) {
    known.insert(cls);
    if (!cfg.has(cls)) continue;
    const std::size_t n = cfg.get_size(cls);
    if (n == 0) throw ConfigError(cfg.source() + ": count '" + cls + "' must be >= 1");
    const auto held_out = static_cast<std::size_t>(std::lround(double(n) * test_fraction));
    if (n > held_out) g.counts.push_back({"train", cls, n - held_out});
    if (held_out > 0) g.counts.push_back({"test", cls, held_out});
  }
  cfg.require_known(known);
  if (g.counts.empty()) throw ConfigError(cfg.source() + ": no sample counts given");
  return g;
}

// ---------------------------------------------------------------------------
// Manifest

struct ManifestRow {
  std::string path;
  bool spoof = false;
  std::string medium;  // "live" for live rows
  std::uint64_t subject_id = 0;
  std::string split;
  std::string noise_path;
  std::string depth_path;
};

inline constexpr const char* kManifestHeader = "path,label,medium,subject_id,split,noise_path,depth_path";

inline std::string format_manifest(const std::vector<ManifestRow>& rows) {
  std::ostringstream out;
  out << kManifestHeader << '\n';
  for (const auto& r : rows)
    out << r.path << ',' << (r.spoof ? "spoof" : "live") << ',' << r.medium << ',' << r.subject_id << ',' << r.split
        << ',' << r.noise_path << ',' << r.depth_path << '\n';
  return out.str();
}

inline std::vector<ManifestRow> parse_manifest(const std::string& text, const std::string& source) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kManifestHeader)
    throw DataError(source + ": missing or unexpected manifest header");
  std::vector<ManifestRow> rows;
  for (std::size_t lineno = 2; std::getline(in, line); ++lineno) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
    const std::string where = source + ":" + std::to_string(lineno);
    if (f.size() != 7) throw DataError(where + ": expected 7 fields, got " + std::to_string(f.size()));
    ManifestRow r;
    r.path = f[0];
    if (f[1] != "live" && f[1] != "spoof") throw DataError(where + ": label must be live or spoof");
    r.spoof = f[1] == "spoof";
    r.medium = f[2];
    try {
      if (class_index(r.medium) == 0 ? r.spoof : !r.spoof) throw DataError(where + ": label does not match medium");
      r.subject_id = std::stoull(f[3]);
    } catch (const ConfigError& e) {
      throw DataError(where + ": " + e.what());
    } catch (const std::logic_error&) {
      throw DataError(where + ": bad subject id '" + f[3] + "'");
    }
    r.split = f[4];
    r.noise_path = f[5];
    r.depth_path = f[6];
    rows.push_back(std::move(r));
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Generation

struct GeneratedSample {
  ManifestRow row;
  Image rgb;    // quantized to 8 bits, [S,S,3]
  Image noise;  // spoof minus the quantized source, [S,S,3]
  Image depth;  // [S/8,S/8,2]: pseudo-depth label, then source face depth
};

/// Sample `index` of the corpus described by `g`, a pure function of
/// (seed, index). Capture blur applies to live and spoof images alike and the
/// noise is recomputed from the quantized pair.
inline GeneratedSample generate_sample(const GenConfig& g, const std::vector<MediumProfile>& profiles,
                                       std::size_t index, const ClassCount& cc, std::size_t ordinal) {
  GeneratedSample out;
  LiveSample live = gen_live_face(derive_seed(g.seed, index, 1), g.size);
  live.subject_id = index;
  const Image live_rgb = quantize8(capture_blur(live.rgb, g.blur));
  const bool spoof = cc.cls != "live";
  char name[64];
  std::snprintf(name, sizeof name, "%s/%s_%05zu", cc.split.c_str(), cc.cls.c_str(), ordinal);
  out.row = {std::string(name) + ".ppm", spoof, cc.cls, index, cc.split, std::string(name) + ".dspn",
             std::string(name) + ".dspd"};
  out.noise = Image(live.rgb.shape());
  if (spoof) {
    const auto s = make_spoof(live, find_profile(profiles, cc.cls), derive_seed(g.seed, index, 2));
    out.rgb = quantize8(capture_blur(s.rgb, g.blur));
    for (std::size_t i = 0; i < out.rgb.size(); ++i) out.noise[i] = out.rgb[i] - live_rgb[i];
  } else {
    out.rgb = live_rgb;
  }
  const std::size_t d = live.depth.dim(0);
  out.depth = Image({d, d, 2});
  for (std::size_t i = 0; i < d * d; ++i) {
    out.depth[2 * i] = spoof ? 0.0 : live.depth[i];
    out.depth[2 * i + 1] = live.depth[i];
  }
  return out;
}

/// Writes images, noise and depth files plus manifest.csv under `dir`.
inline std::vector<ManifestRow> gen_corpus(const GenConfig& g, const std::vector<MediumProfile>& profiles,
                                           const std::filesystem::path& dir) {
  for (const auto& p : profiles) p.validate(g.size);
  std::vector<std::pair<const ClassCount*, std::size_t>> plan;
  for (const auto& cc : g.counts) {
    if (cc.cls != "live") find_profile(profiles, cc.cls);
    for (std::size_t k = 0; k < cc.count; ++k) plan.emplace_back(&cc, k);
  }
  std::error_code ec;
  for (const std::string split : {"train", "test"}) {
    std::filesystem::create_directories(dir / split, ec);
    if (ec) throw DataError("cannot create directory " + (dir / split).string() + ": " + ec.message());
  }
  std::vector<ManifestRow> rows(plan.size());
  parallel_for(plan.size(), [&](std::size_t i) {
    const auto s = generate_sample(g, profiles, i, *plan[i].first, plan[i].second);
    write_ppm(dir / s.row.path, s.rgb);
    write_planes(dir / s.row.noise_path, kNoiseMagic, s.noise);
    write_planes(dir / s.row.depth_path, kDepthMagic, s.depth);
    rows[i] = s.row;
  });
  write_file_atomic(dir / "manifest.csv", format_manifest(rows));
  return rows;
}

// ---------------------------------------------------------------------------
// Loading

struct Sample {
  ManifestRow row;
  Image rgb;          // [S,S,3]
  Image noise;        // [S,S,3]
  Image depth_label;  // [S/8,S/8,1]
  Image face_depth;   // [S/8,S/8,1]
};

struct Corpus {
  std::filesystem::path root;
  std::size_t size = 0;
  std::vector<Sample> samples;

  std::vector<const Sample*> select(const std::string& split, int spoof = -1) const {
    std::vector<const Sample*> out;
    for (const auto& s : samples)
      if (s.row.split == split && (spoof < 0 || s.row.spoof == bool(spoof))) out.push_back(&s);
    return out;
  }
};

/// Loads every row of `dir/manifest.csv`, or only rows of `split` if given.
inline Corpus load_corpus(const std::filesystem::path& dir, const std::string& split = "") {
  const auto manifest = dir / "manifest.csv";
  std::string text;
  try {
    text = read_file(manifest);
  } catch (const Error& e) {
    throw DataError(std::string("cannot read corpus manifest: ") + e.what());
  }
  Corpus c;
  c.root = dir;
  for (auto& row : parse_manifest(text, manifest.string()))
    if (split.empty() || row.split == split) c.samples.push_back({std::move(row), {}, {}, {}, {}});
  if (c.samples.empty()) throw DataError(manifest.string() + ": no samples" + (split.empty() ? "" : " in split " + split));
  parallel_for(c.samples.size(), [&](std::size_t i) {
    Sample& s = c.samples[i];
    s.rgb = read_ppm(dir / s.row.path);
    s.noise = read_planes(dir / s.row.noise_path, kNoiseMagic);
    const Image depth = read_planes(dir / s.row.depth_path, kDepthMagic);
    const std::size_t n = s.rgb.dim(0);
    if (s.rgb.dim(1) != n || s.noise.shape() != s.rgb.shape() || depth.shape() != Shape{n / 8, n / 8, 2})
      throw DataError(s.row.path + ": inconsistent image, noise or depth shapes");
    s.depth_label = Image({n / 8, n / 8, 1});
    s.face_depth = Image({n / 8, n / 8, 1});
    for (std::size_t k = 0; k < n * n / 64; ++k) {
      s.depth_label[k] = depth[2 * k];
      s.face_depth[k] = depth[2 * k + 1];
    }
  });
  c.size = c.samples.front().rgb.dim(0);
  for (const auto& s : c.samples)
    if (s.rgb.dim(0) != c.size) throw DataError(s.row.path + ": image size differs from the rest of the corpus");
  return c;
}

}  // namespace despoof
