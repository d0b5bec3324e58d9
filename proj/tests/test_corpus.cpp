#include <gtest/gtest.h>

#include <cstdlib>
#include <set>

#include "despoof/corpus.hpp"
#include "despoof/fft.hpp"
#include "test_util.hpp"

namespace {

using despoof::testing::TempDir;
namespace fs = std::filesystem;

std::vector<despoof::MediumProfile> profiles() {
  return despoof::load_profiles(fs::path(DESPOOF_CONFIG_DIR) / "media_v1.cfg");
}

despoof::GenConfig parse(const std::string& text) {
  return despoof::parse_gen_config(despoof::KeyValueConfig::parse(text, "gen.cfg"));
}

std::size_t count_files(const fs::path& dir, const std::string& ext) {
  std::size_t n = 0;
  for (const auto& e : fs::recursive_directory_iterator(dir)) n += e.path().extension() == ext;
  return n;
}

TEST(GenConfig, PerSplitAndHeldOutCounts) {
  const auto g = parse("size = 32\nseed = 5\ntrain.live = 3\ntest.display1 = 2\nprint1 = 10\ntest_fraction = 0.3\n");
  EXPECT_EQ(g.size, 32u);
  EXPECT_EQ(g.seed, 5u);
  EXPECT_EQ(g.total(), 15u);
  std::map<std::string, std::size_t> by;
  for (const auto& c : g.counts) by[c.split + "." + c.cls] += c.count;
  EXPECT_EQ(by["train.live"], 3u);
  EXPECT_EQ(by["test.display1"], 2u);
  EXPECT_EQ(by["train.print1"], 7u);
  EXPECT_EQ(by["test.print1"], 3u);
}

TEST(GenConfig, Errors) {
  EXPECT_THROW(parse("live = 0\n"), despoof::ConfigError);
  EXPECT_THROW(parse("live = 2\nprint3 = 2\n"), despoof::ConfigError);
  EXPECT_THROW(parse("live = 2\nblur = 4\n"), despoof::ConfigError);
  EXPECT_THROW(parse("live = 2\nsize = 48\n"), despoof::ConfigError);
  EXPECT_THROW(parse("seed = 1\n"), despoof::ConfigError);
  try {
    parse("live = 2\ncolour = red\n");
    FAIL();
  } catch (const despoof::ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("colour"), std::string::npos);
  }
}

TEST(GenCorpus, EightFilesAndEightRows) {
  TempDir dir("corpus8");
  const auto g = parse("size = 32\nseed = 1\ntrain.live = 4\ntrain.display1 = 4\n");
  const auto rows = despoof::gen_corpus(g, profiles(), dir.path());
  EXPECT_EQ(rows.size(), 8u);
  EXPECT_EQ(count_files(dir.path(), ".ppm"), 8u);
  const auto reread = despoof::parse_manifest(despoof::read_file(dir.path() / "manifest.csv"), "manifest");
  EXPECT_EQ(reread.size(), 8u);
  std::size_t spoof = 0;
  for (const auto& r : reread) spoof += r.spoof;
  EXPECT_EQ(spoof, 4u);
}

TEST(GenCorpus, SplitsHaveDisjointSubjects) {
  TempDir dir("disjoint");
  const auto rows = despoof::gen_corpus(parse("size = 32\nlive = 6\nprint2 = 5\ntest_fraction = 0.4\n"), profiles(),
                                        dir.path());
  std::set<std::uint64_t> train, test;
  for (const auto& r : rows) (r.split == "train" ? train : test).insert(r.subject_id);
  ASSERT_FALSE(train.empty());
  ASSERT_FALSE(test.empty());
  for (auto id : train) EXPECT_EQ(test.count(id), 0u);
  EXPECT_EQ(train.size() + test.size(), rows.size());
}

TEST(GenCorpus, PureFunctionOfConfigAndSeed) {
  TempDir a("det_a"), b("det_b");
  const auto g = parse("size = 32\nseed = 9\nlive = 3\ndisplay2 = 3\nprint1 = 2\n");
  setenv("DSPF_THREADS", "1", 1);
  despoof::gen_corpus(g, profiles(), a.path());
  setenv("DSPF_THREADS", "3", 1);
  despoof::gen_corpus(g, profiles(), b.path());
  unsetenv("DSPF_THREADS");
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(a.path())) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), a.path());
    EXPECT_EQ(despoof::read_file(e.path()), despoof::read_file(b.path() / rel)) << rel;
    ++files;
  }
  EXPECT_EQ(files, 8u * 3 + 1);
}

TEST(GenCorpus, LoadedSamplesAreConsistent) {
  TempDir dir("load");
  despoof::gen_corpus(parse("size = 32\nseed = 2\ntrain.live = 2\ntrain.print1 = 2\ntest.display1 = 2\n"), profiles(),
                      dir.path());
  const auto all = despoof::load_corpus(dir.path());
  EXPECT_EQ(all.samples.size(), 6u);
  EXPECT_EQ(all.size, 32u);
  EXPECT_EQ(all.select("train").size(), 4u);
  EXPECT_EQ(all.select("train", 1).size(), 2u);
  EXPECT_EQ(despoof::load_corpus(dir.path(), "test").samples.size(), 2u);
  for (const auto& s : all.samples) {
    EXPECT_EQ(s.depth_label.shape(), (despoof::Shape{4, 4, 1}));
    double noise = 0, label = 0, face = 0;
    for (double v : s.noise.data()) noise += std::abs(v);
    for (double v : s.depth_label.data()) label += v;
    for (double v : s.face_depth.data()) face += v;
    EXPECT_GT(face, 0.0);
    if (s.row.spoof) {
      EXPECT_GT(noise / double(s.noise.size()), 0.005);
      EXPECT_EQ(label, 0.0);
    } else {
      EXPECT_EQ(noise, 0.0);
      EXPECT_EQ(label, face);
    }
    for (double v : s.rgb.data()) ASSERT_EQ(std::lround(v * 255.0) / 255.0, v);
  }
}

TEST(GenCorpus, SpoofMinusSourceMatchesStoredNoise) {
  const auto g = parse("size = 32\nseed = 4\ntrain.display2 = 1\n");
  const auto p = profiles();
  const auto s = despoof::generate_sample(g, p, 0, g.counts[0], 0);
  auto live = despoof::gen_live_face(despoof::derive_seed(4, 0, 1), 32);
  const auto live_q = despoof::quantize8(live.rgb);
  for (std::size_t i = 0; i < s.rgb.size(); ++i) ASSERT_EQ(s.rgb[i] - live_q[i], s.noise[i]);
}

double mean_high_frequency_energy(const despoof::Corpus& c) {
  const std::size_t n = c.size, k = n / 4;
  double total = 0;
  std::size_t count = 0;
  for (const auto& s : c.samples) {
    if (!s.row.spoof) continue;
    for (std::size_t ch = 0; ch < 3; ++ch) {
      std::vector<double> plane(n * n);
      for (std::size_t i = 0; i < plane.size(); ++i) plane[i] = s.noise[3 * i + ch];
      const auto mag = despoof::shifted_magnitude<double>(plane, n, n);
      for (std::size_t y = 0; y < n; ++y)
        for (std::size_t x = 0; x < n; ++x)
          if (!despoof::in_center_mask(y, x, n, n, k)) total += mag[y * n + x] * mag[y * n + x];
    }
    ++count;
  }
  return total / double(count);
}

TEST(GenCorpus, HeavyBlurWeakensHighFrequencyNoise) {
  TempDir sharp("blur1"), blurry("blur9");
  const std::string counts = "size = 64\nseed = 3\ntrain.print1 = 3\ntrain.print2 = 3\ntrain.display1 = 3\ntrain.display2 = 3\n";
  despoof::gen_corpus(parse(counts + "blur = 1\n"), profiles(), sharp.path());
  despoof::gen_corpus(parse(counts + "blur = 9\n"), profiles(), blurry.path());
  EXPECT_LT(mean_high_frequency_energy(despoof::load_corpus(blurry.path())),
            mean_high_frequency_energy(despoof::load_corpus(sharp.path())));
}

TEST(Manifest, RejectsMalformedInput) {
  const std::string header = std::string(despoof::kManifestHeader) + "\n";
  EXPECT_THROW(despoof::parse_manifest("path,label\n", "m"), despoof::DataError);
  EXPECT_THROW(despoof::parse_manifest(header + "a.ppm,live,live,1,train,a.dspn\n", "m"), despoof::DataError);
  EXPECT_THROW(despoof::parse_manifest(header + "a.ppm,spoof,live,1,train,a.dspn,a.dspd\n", "m"), despoof::DataError);
  EXPECT_THROW(despoof::parse_manifest(header + "a.ppm,spoof,print7,1,train,a.dspn,a.dspd\n", "m"), despoof::DataError);
  EXPECT_THROW(despoof::parse_manifest(header + "a.ppm,live,live,x,train,a.dspn,a.dspd\n", "m"), despoof::DataError);
  const auto rows = despoof::parse_manifest(header + "a.ppm,spoof,print1,12,test,a.dspn,a.dspd\n", "m");
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_EQ(despoof::format_manifest(rows), header + "a.ppm,spoof,print1,12,test,a.dspn,a.dspd\n");
}

TEST(LoadCorpus, MissingFilesNamePath) {
  TempDir dir("missing");
  EXPECT_THROW(despoof::load_corpus(dir.path()), despoof::DataError);
  despoof::gen_corpus(parse("size = 32\ntrain.live = 1\ntrain.print1 = 1\n"), profiles(), dir.path());
  fs::remove(dir.path() / "train" / "print1_00000.dspn");
  try {
    despoof::load_corpus(dir.path());
    FAIL();
  } catch (const despoof::Error& e) {
    EXPECT_NE(std::string(e.what()).find("print1_00000.dspn"), std::string::npos) << e.what();
  }
}

TEST(ParallelFor, CoversEveryIndexAndPropagatesErrors) {
  setenv("DSPF_THREADS", "4", 1);
  std::vector<int> hit(1000, 0);
  despoof::parallel_for(hit.size(), [&](std::size_t i) { hit[i] += 1; });
  for (int h : hit) EXPECT_EQ(h, 1);
  EXPECT_THROW(despoof::parallel_for(100,
                                     [](std::size_t i) {
                                       if (i == 37) throw despoof::DataError("boom");
                                     }),
               despoof::DataError);
  unsetenv("DSPF_THREADS");
}

}  // namespace
