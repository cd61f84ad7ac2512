#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "cli.hpp"
#include "nlvt/data.hpp"
#include "nlvt/profiler.hpp"

using namespace nlvt;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

std::size_t count_lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

// A micro model with a 32-image synthetic training set.
class CliRun : public ::testing::Test {
 protected:
  void SetUp() override {
    dir = fs::temp_directory_path() / ("nlvt_cli_" + std::to_string(::getpid()) + "_" +
                                       ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::create_directories(dir);
    manifest = write_synth_dataset((dir / "data").string(), 32, 4, 8, 0);
    config = (dir / "micro.cfg").string();
    std::ofstream(config) << micro_config().to_text() << "epochs = 1\ntrain_batch = 8\neval_batch = 16\n"
                          << "train_manifest = " << manifest << "\n";
  }
  void TearDown() override { fs::remove_all(dir); }
  std::string path(const std::string& name) const { return (dir / name).string(); }

  fs::path dir;
  std::string manifest, config;
};

}  // namespace

TEST(Cli, ProfileMatchesLibraryTotals) {
  const std::string cfg = std::string(NLVT_SOURCE_DIR) + "/configs/desk.cfg";
  const Result r = cli({"profile", "--config", cfg});
  ASSERT_EQ(r.code, 0) << r.err;
  const CostReport rep = profile_model(desk_config());
  EXPECT_NE(r.out.find(rep.table()), std::string::npos);
  EXPECT_NE(r.out.find(rep.csv()), std::string::npos);
  EXPECT_EQ(cli({"profile", "--config", std::string(NLVT_SOURCE_DIR) + "/configs/next-lvt-paper.cfg"}).code, 0);
}

TEST(Cli, GradcheckExitCodes) {
  const Result ok = cli({"gradcheck", "--op", "sdpa", "--bits", "64"});
  EXPECT_EQ(ok.code, 0) << ok.err;
  EXPECT_NE(ok.out.find("sdpa max_rel_error"), std::string::npos);
  EXPECT_NE(ok.out.find("PASS"), std::string::npos);
  EXPECT_EQ(cli({"gradcheck", "--op", "nope"}).code, kExitConfig);
  EXPECT_EQ(cli({"gradcheck", "--bits", "16"}).code, kExitConfig);
}

TEST_F(CliRun, TrainWritesMetricsAndCheckpointThenEvaluates) {
  const Result r = cli({"train", "--config", config, "--out", path("run")});
  ASSERT_EQ(r.code, 0) << r.err;
  const std::string metrics = slurp(path("run/metrics.csv"));
  EXPECT_EQ(count_lines(metrics), 1u);
  EXPECT_EQ(metrics.substr(0, 2), "0,");
  ASSERT_TRUE(fs::exists(path("run/best.ckpt")));
  const Result e = cli({"eval", "--checkpoint", path("run/best.ckpt"), "--manifest", manifest});
  ASSERT_EQ(e.code, 0) << e.err;
  EXPECT_NE(e.out.find("accuracy "), std::string::npos);
  EXPECT_NE(e.out.find("(32 samples)"), std::string::npos);
}

TEST_F(CliRun, SameSeedGivesIdenticalOutputs) {
  ASSERT_EQ(cli({"train", "--config", config, "--seed", "3", "--out", path("a")}).code, 0);
  ASSERT_EQ(cli({"train", "--config", config, "--seed", "3", "--out", path("b")}).code, 0);
  EXPECT_EQ(slurp(path("a/metrics.csv")), slurp(path("b/metrics.csv")));
  EXPECT_EQ(slurp(path("a/best.ckpt")), slurp(path("b/best.ckpt")));
}

TEST_F(CliRun, ErrorsMapToExitCodes) {
  const auto expect = [](const Result& r, int code) {
    EXPECT_EQ(r.code, code) << r.err;
    EXPECT_EQ(count_lines(r.err), 1u) << r.err;
    EXPECT_EQ(r.err.rfind("nlvt: ", 0), 0u) << r.err;
  };
  expect(cli({"train", "--config", config, "--set", "widths=7", "--out", path("x")}), kExitConfig);
  expect(cli({"train", "--config", config, "--set", "colour=blue"}), kExitConfig);
  expect(cli({"train", "--config", path("missing.cfg")}), kExitMissing);
  expect(cli({"eval", "--checkpoint", path("missing.ckpt"), "--manifest", manifest}), kExitMissing);
  expect(cli({"bogus"}), kExitConfig);

  std::ofstream(path("bad.csv")) << "path;label\n" << manifest << ";99\n";
  expect(cli({"train", "--config", config, "--set", "train_manifest=" + path("bad.csv"), "--out", path("x")}),
         kExitBadData);
  std::ofstream(path("bad.ppm")) << "P6\n4 4\n255\nxx";
  std::ofstream(path("img.csv")) << "path;label\nbad.ppm;1\n";
  expect(cli({"train", "--config", config, "--set", "train_manifest=" + path("img.csv"), "--out", path("x")}),
         kExitBadData);
  std::ofstream(path("bad.ckpt")) << "NLVT garbage";
  expect(cli({"eval", "--checkpoint", path("bad.ckpt"), "--manifest", manifest}), kExitBadData);
}

TEST_F(CliRun, AugmixPreviewWritesImages) {
  const Result r = cli({"augmix-preview", "--config", config, "--count", "3", "--seed", "4", "--out", path("aug")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(count_lines(r.out), 3u);
  for (const char* f : {"original.ppm", "augmix_0.ppm", "augmix_2.ppm"}) {
    const Image img = load_ppm(path(std::string("aug/") + f));
    EXPECT_EQ(img.shape(), (Shape{3, 8, 8}));
  }
  ASSERT_EQ(cli({"augmix-preview", "--config", config, "--count", "1", "--seed", "4", "--out", path("aug2")}).code, 0);
  EXPECT_EQ(slurp(path("aug/augmix_0.ppm")), slurp(path("aug2/augmix_0.ppm")));
}

TEST(Cli, ThreadCapValidation) {
  ::setenv("NLVT_THREADS", "zero", 1);
  const Result bad = cli({"gradcheck", "--op", "add"});
  ::setenv("NLVT_THREADS", "2", 1);
  const Result good = cli({"gradcheck", "--op", "add"});
  ::unsetenv("NLVT_THREADS");
  EXPECT_EQ(bad.code, kExitConfig);
  EXPECT_NE(bad.err.find("NLVT_THREADS"), std::string::npos);
  EXPECT_EQ(good.code, 0) << good.err;
}
