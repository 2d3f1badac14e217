#include <cstdlib>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>

#include <gtest/gtest.h>
#include <sys/wait.h>

#include "aquafuse/blur_bench.hpp"
#include "aquafuse/config.hpp"
#include "aquafuse/errors.hpp"
#include "aquafuse/image_io.hpp"
#include "aquafuse/water_msr.hpp"
#include "test_util.hpp"

namespace aquafuse {
namespace {

namespace fs = std::filesystem;

struct RunResult {
  int code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

RunResult run_cli(const std::string& args, const testing::TempDir& dir) {
  const fs::path out = dir / "stdout.txt", err = dir / "stderr.txt";
  const std::string cmd =
      std::string("\"") + AQUAFUSE_CLI_PATH + "\" " + args + " >\"" + out.string() + "\" 2>\"" + err.string() + "\"";
  const int status = std::system(cmd.c_str());
  RunResult r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(out);
  r.err = slurp(err);
  return r;
}

// ---- key=value settings ---------------------------------------------------------------

TEST(Config, ParsesCommentsAndWhitespace) {
  std::istringstream in("# settings\n\n sigmas = 20, 80 \nwindow=4\n  # trailing\nshared_weights = yes\n");
  const KeyValues kv = parse_key_values(in);
  EXPECT_EQ(kv.size(), 3u);
  RunSettings s;
  apply_settings(kv, s);
  EXPECT_EQ(s.msr.sigmas, (std::vector<double>{20.0, 80.0}));
  EXPECT_EQ(s.msr.weights, (std::vector<double>{0.5, 0.5}));
  EXPECT_NO_THROW(s.msr.validate());
  EXPECT_EQ(s.backbone.window, 4u);
  EXPECT_TRUE(s.backbone.shared_weights);
}

TEST(Config, RejectsUnknownKeysAndBadValues) {
  RunSettings s;
  EXPECT_THROW(apply_settings({{"sigma", "3"}}, s), ConfigError);
  EXPECT_THROW(apply_settings({{"window", "-3"}}, s), ConfigError);
  EXPECT_THROW(apply_settings({{"epsilon", "1x"}}, s), ConfigError);
  EXPECT_THROW(apply_settings({{"stretch_percentiles", "1"}}, s), ConfigError);
  EXPECT_THROW(apply_settings({{"shared_weights", "maybe"}}, s), ConfigError);
  std::istringstream no_eq("window 7\n");
  EXPECT_THROW(parse_key_values(no_eq), ConfigError);
  EXPECT_THROW(load_key_values("/nonexistent/settings.cfg"), IoError);
  for (const auto& key : known_setting_keys()) EXPECT_FALSE(key.empty());
}

// ---- command line ----------------------------------------------------------------------

TEST(Cli, EnhanceEmptyListSucceeds) {
  testing::TempDir dir;
  const RunResult r = run_cli("enhance --out-dir \"" + (dir / "out").string() + "\"", dir);
  EXPECT_EQ(r.code, 0) << r.err;
}

TEST(Cli, EnhanceContinuesPastUnreadableInputs) {
  testing::TempDir dir;
  save_image(random_image(20, 30, 1), dir / "a.png");
  save_image(random_image(16, 16, 2), dir / "b.ppm");
  std::ofstream(dir / "broken.png") << "definitely not a png";
  const fs::path out = dir / "out";
  const RunResult r = run_cli("enhance \"" + (dir / "a.png").string() + "\" \"" + (dir / "broken.png").string() +
                                  "\" \"" + (dir / "b.ppm").string() + "\" --out-dir \"" + out.string() + "\"",
                              dir);
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("broken.png"), std::string::npos) << r.err;
  EXPECT_TRUE(fs::exists(out / "a_enhanced.png"));
  EXPECT_TRUE(fs::exists(out / "b_enhanced.png"));
  EXPECT_FALSE(fs::exists(out / "broken_enhanced.png"));
  const RgbImage enhanced = load_image(out / "a_enhanced.png");
  EXPECT_EQ(enhanced.height, 20u);
  EXPECT_EQ(enhanced.width, 30u);
}

TEST(Cli, EnhanceMatchesLibraryAndHonoursFlags) {
  testing::TempDir dir;
  const RgbImage img = random_image(24, 24, 3);
  save_image(img, dir / "in.png");
  const RunResult r = run_cli("enhance \"" + (dir / "in.png").string() + "\" --sigmas 4,12 --out-dir \"" +
                                  dir.path().string() + "\"",
                              dir);
  ASSERT_EQ(r.code, 0) << r.err;
  MsrConfig cfg;
  cfg.sigmas = {4.0, 12.0};
  cfg.weights = {0.5, 0.5};
  const RgbImage expected = water_msr(load_image(dir / "in.png"), cfg);
  save_image(expected, dir / "reference.png");
  EXPECT_EQ(slurp(dir / "in_enhanced.png"), slurp(dir / "reference.png"));
}

TEST(Cli, BenchPrintsCsv) {
  testing::TempDir dir;
  const RunResult r = run_cli("bench --size 64x48 --sigmas 5,20 --repeats 1 --warmup 0", dir);
  ASSERT_EQ(r.code, 0) << r.err;
  std::istringstream lines(r.out);
  std::string header, row1, row2, extra;
  std::getline(lines, header);
  std::getline(lines, row1);
  std::getline(lines, row2);
  EXPECT_EQ(header, "sigma,direct_ms,pyramid_ms,speedup,rms_rel");
  EXPECT_EQ(row1.rfind("5,", 0), 0u) << row1;
  EXPECT_EQ(row2.rfind("20,", 0), 0u) << row2;
  EXPECT_FALSE(std::getline(lines, extra) && !extra.empty());
  EXPECT_NE(run_cli("bench --size 64by48", dir).code, 0);
}

TEST(Cli, FeaturesRejectsUnsupportedSize) {
  testing::TempDir dir;
  save_image(random_image(225, 224, 1), dir / "raw.png");
  const RunResult r = run_cli("features \"" + (dir / "raw.png").string() + "\" --auto-enhance --out-dir \"" +
                                  (dir / "f").string() + "\"",
                              dir);
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("224"), std::string::npos) << r.err;
}

TEST(Cli, FeaturesDumpsAreDeterministicAcrossThreadCounts) {
  testing::TempDir dir;
  save_image(random_image(64, 64, 7), dir / "raw.png");
  const std::string common = "features \"" + (dir / "raw.png").string() + "\" --auto-enhance --window 2 --dim 8 ";
  const RunResult a = run_cli("--threads 1 " + common + "--out-dir \"" + (dir / "a").string() + "\"", dir);
  ASSERT_EQ(a.code, 0) << a.err;
  EXPECT_NE(a.out.find("stage4 [2x2x64]"), std::string::npos) << a.out;
  const RunResult b = run_cli("--threads 4 " + common + "--out-dir \"" + (dir / "b").string() + "\"", dir);
  ASSERT_EQ(b.code, 0) << b.err;
  const RunResult c = run_cli("--threads 1 " + common + "--out-dir \"" + (dir / "c").string() + "\"", dir);
  ASSERT_EQ(c.code, 0) << c.err;
  for (int s = 1; s <= 4; ++s) {
    const std::string name = "stage" + std::to_string(s) + ".tns";
    const std::string ref = slurp(dir / "a" / name);
    EXPECT_FALSE(ref.empty());
    EXPECT_EQ(ref, slurp(dir / "b" / name)) << name;
    EXPECT_EQ(ref, slurp(dir / "c" / name)) << name;
  }
}

TEST(Cli, FeaturesReadsConfigFileAndFlagsWin) {
  testing::TempDir dir;
  save_image(random_image(64, 64, 8), dir / "raw.png");
  save_image(random_image(64, 64, 9), dir / "enh.png");
  std::ofstream(dir / "net.cfg") << "dim = 4\nwindow = 2\ndepths = 1,1,1,1\n";
  const RunResult r = run_cli("--config \"" + (dir / "net.cfg").string() + "\" features \"" +
                                  (dir / "raw.png").string() + "\" \"" + (dir / "enh.png").string() +
                                  "\" --dim 8 --out-dir \"" + dir.path().string() + "\"",
                              dir);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("stage1 [16x16x8]"), std::string::npos) << r.out;
  std::ofstream(dir / "bad.cfg") << "colour = blue\n";
  const RunResult bad = run_cli("--config \"" + (dir / "bad.cfg").string() + "\" gradcheck --scope gff_fusion", dir);
  EXPECT_EQ(bad.code, 1);
  EXPECT_NE(bad.err.find("colour"), std::string::npos) << bad.err;
}

TEST(Cli, GradcheckScopeAndPerturbation) {
  testing::TempDir dir;
  const RunResult ok = run_cli("gradcheck --scope gff_fusion", dir);
  EXPECT_EQ(ok.code, 0) << ok.err;
  EXPECT_NE(ok.out.find("gff_fuse"), std::string::npos);
  EXPECT_EQ(ok.out.find("matmul"), std::string::npos);
  EXPECT_NE(ok.out.find("PASS"), std::string::npos);

  const RunResult bad = run_cli("gradcheck --scope gff_fusion --perturb gff_fuse", dir);
  EXPECT_EQ(bad.code, 1);
  EXPECT_NE(bad.err.find("gff_fuse"), std::string::npos) << bad.err;
  EXPECT_NE(bad.out.find("FAIL"), std::string::npos);

  EXPECT_EQ(run_cli("gradcheck --scope nowhere", dir).code, 1);
}

}  // namespace
}  // namespace aquafuse
