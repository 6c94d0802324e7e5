#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>

#include "esup/commands.hpp"
#include "helpers.hpp"

using namespace esup;
namespace fs = std::filesystem;

namespace {

// Runs the CLI with stdout/stderr captured to `log`; returns its exit code.
int run_cli(const std::string& args, const std::string& log) {
  const std::string cmd = std::string(ESUP_CLI) + " " + args + " > " + log + " 2>&1";
  const int st = std::system(cmd.c_str());
  return WIFEXITED(st) ? WEXITSTATUS(st) : -1;
}

std::string copy_image(const esup::test::TempDir& dir, const std::string& rel) {
  const auto dst = dir / fs::path(rel).filename().string();
  fs::copy_file(esup::test::data_path(rel), dst, fs::copy_options::overwrite_existing);
  return dst;
}

const char* kTinyFit = " --resize 24 --hidden 16 --hidden-layers 1 --total-iters 20 --eval-interval 10";

}  // namespace

TEST(RunConfig, DefaultsFollowTheMethod) {
  const RunConfig c;
  EXPECT_EQ(c.xi_a, 0.25);
  EXPECT_EQ(c.xi_s, 0.25);
  EXPECT_EQ(c.beta, 1.0);
  EXPECT_EQ(c.mu, 15.0);
  EXPECT_EQ(c.total_iters, 5000u);
  EXPECT_EQ(RunConfig::for_command("fit-nerf").total_iters, 20000u);
}

TEST(RunConfig, TextRoundTrip) {
  RunConfig c = RunConfig::for_command("fit-nerf");
  c.beta = 0.3;
  c.xi_a = 0.1 + 0.2;
  c.learning_rate = 1.0 / 3.0;
  c.run_id = "x y";
  c.no_cache = true;
  EXPECT_EQ(RunConfig::from_text(c.to_text()), c);
  esup::test::TempDir dir;
  save_config(dir / "c.txt", c);
  EXPECT_EQ(load_config(dir / "c.txt"), c);
}

TEST(RunConfig, BadInputIsArgumentError) {
  RunConfig c;
  EXPECT_THROW(c.set("nope", "1"), ArgumentError);
  EXPECT_THROW(c.set("beta", "abc"), ArgumentError);
  EXPECT_THROW(c.set("total_iters", "-3"), ArgumentError);
  EXPECT_THROW(c.merge_text("no equals sign"), ArgumentError);
  c.set("beta", "1.5");
  EXPECT_THROW(c.validate(), ArgumentError);
  c = RunConfig{};
  c.strategy = "bogus";
  EXPECT_THROW(c.validate(), ArgumentError);
}

TEST(RunConfig, CommentsAndBlankLinesIgnored) {
  const auto c = RunConfig::from_text("# header\n\n  beta = 0.5\nmu=10\r\n");
  EXPECT_EQ(c.beta, 0.5);
  EXPECT_EQ(c.mu, 10.0);
}

TEST(Cli, ExtractAnchorEchoesStats) {
  esup::test::TempDir dir;
  const auto img = copy_image(dir, "images/camera.png");
  ASSERT_EQ(run_cli("extract-anchor " + img + " --out-dir " + (dir / "out"), dir / "log"), 0);
  const auto log = read_text(dir / "log");
  EXPECT_NE(log.find("mu=15"), std::string::npos) << log;
  const auto mask = load_mask_pgm(dir / "out/masks/anchor.pgm");
  const double ratio = static_cast<double>(mask.count()) / static_cast<double>(mask.size());
  EXPECT_GE(ratio, 0.20);
  EXPECT_LE(ratio, 0.30);
}

TEST(Cli, ConstantImageExitsWithConvergenceCode) {
  esup::test::TempDir dir;
  save_png(dir / "flat.png", ImageBuffer(32, 32, 3, 0.5));
  EXPECT_EQ(run_cli("extract-anchor " + (dir / "flat.png") + " --out-dir " + (dir / "out"), dir / "log"), 3);
  EXPECT_TRUE(fs::exists(dir / "out/masks/anchor.pgm"));
}

TEST(Cli, ArgumentAndIoErrors) {
  esup::test::TempDir dir;
  const auto img = copy_image(dir, "images_small/brick.png");
  EXPECT_EQ(run_cli("fit-image " + img + " --beta 2 --out-dir " + (dir / "o"), dir / "log"), 2);
  EXPECT_EQ(run_cli("fit-image " + img + " --strategy nope --out-dir " + (dir / "o"), dir / "log"), 2);
  EXPECT_EQ(run_cli("fit-image " + img + " --no-such-flag", dir / "log"), 2);
  EXPECT_EQ(run_cli("", dir / "log"), 2);
  EXPECT_EQ(run_cli("fit-image " + (dir / "missing.png") + " --out-dir " + (dir / "o"), dir / "log"), 1);
}

TEST(Cli, FitImageWritesRunDirectory) {
  esup::test::TempDir dir;
  const auto img = copy_image(dir, "images_small/chelsea.png");
  const auto out = dir / "run";
  ASSERT_EQ(run_cli("fit-image " + img + kTinyFit + " --out-dir " + out, dir / "log"), 0) << read_text(dir / "log");
  const auto rows = parse_csv(read_text(out + "/report.csv"));
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].iter, 10u);
  EXPECT_EQ(rows[1].iter, 20u);
  for (const char* f : {"config.txt", "resources.txt", "checkpoints/final.ckpt", "renders/final.png", "masks/anchor.pgm"})
    EXPECT_TRUE(fs::exists(out + "/" + f)) << f;
  EXPECT_EQ(load_config(out + "/config.txt").total_iters, 20u);
  EXPECT_EQ(run_cli("report " + out, dir / "report.log"), 0);
  EXPECT_NE(read_text(dir / "report.log").find("not comparable"), std::string::npos);
}

TEST(Cli, RenderedRaysRatioStandardVsExpansive) {
  esup::test::TempDir dir;
  const auto img = copy_image(dir, "images_small/brick.png");
  ASSERT_EQ(run_cli("fit-image " + img + kTinyFit + " --strategy standard --out-dir " + (dir / "s"), dir / "log"), 0);
  ASSERT_EQ(run_cli("fit-image " + img + kTinyFit + " --out-dir " + (dir / "e"), dir / "log"), 0);
  const double s = static_cast<double>(parse_csv(read_text(dir / "s/report.csv")).back().rendered_rays_cum);
  const double e = static_cast<double>(parse_csv(read_text(dir / "e/report.csv")).back().rendered_rays_cum);
  EXPECT_GE(e / s, 0.8 * 0.25 + 0.25);
  EXPECT_LE(e / s, 1.2 * 0.25 + 0.25);
}

TEST(Cli, BetaHalfRecordsQuarterSupervision) {
  esup::test::TempDir dir;
  const auto img = copy_image(dir, "images_small/brick.png");
  ASSERT_EQ(run_cli("fit-image " + img + kTinyFit + " --beta 0.5 --out-dir " + (dir / "o"), dir / "log"), 0);
  const double f = std::stod(read_key_values(dir / "o/resources.txt").at("supervised_fraction"));
  EXPECT_GE(f, 0.8 * 0.125 + 0.125);
  EXPECT_LE(f, 1.2 * 0.125 + 0.125);
}

TEST(Cli, ConfigFileThenFlags) {
  esup::test::TempDir dir;
  const auto img = copy_image(dir, "images_small/brick.png");
  write_text(dir / "c.txt", "total_iters=8\neval_interval=4\nhidden=8\nhidden_layers=1\nresize=16\nseed=5\n");
  ASSERT_EQ(run_cli("fit-image " + img + " --config " + (dir / "c.txt") + " --eval-interval 8 --out-dir " +
                        (dir / "o"),
                    dir / "log"),
            0);
  const auto cfg = load_config(dir / "o/config.txt");
  EXPECT_EQ(cfg.total_iters, 8u);
  EXPECT_EQ(cfg.eval_interval, 8u);
  EXPECT_EQ(cfg.seed, 5u);
  EXPECT_EQ(parse_csv(read_text(dir / "o/report.csv")).size(), 1u);
}

TEST(Cli, BenchIsReproducible) {
  esup::test::TempDir dir;
  const auto img = copy_image(dir, "images_small/coins.png");
  const std::string args = "bench " + img + kTinyFit + " --betas 0.5,1";
  ASSERT_EQ(run_cli(args + " --out-dir " + (dir / "a"), dir / "log"), 0) << read_text(dir / "log");
  ASSERT_EQ(run_cli(args + " --out-dir " + (dir / "b"), dir / "log"), 0);
  const auto a = read_text(dir / "a/report.csv");
  EXPECT_EQ(a, read_text(dir / "b/report.csv"));
  for (const char* s : {",standard,", ",expansive,", ",edge-resample,"}) EXPECT_NE(a.find(s), std::string::npos) << s;
  EXPECT_TRUE(fs::exists(dir / "a/savings.csv"));
  EXPECT_TRUE(fs::exists(dir / "a/linearity.txt"));
}

TEST(Cli, FitNerfSmallRun) {
  esup::test::TempDir dir;
  const auto out = dir / "n";
  ASSERT_EQ(run_cli("fit-nerf " + esup::test::data_path("scenes/two_spheres.txt") +
                        " --strategy standard --views 2 --view-size 16 --grid-res 8 --train-samples 8"
                        " --eval-samples 8 --total-iters 4 --eval-interval 2 --batch-budget 64 --out-dir " + out,
                    dir / "log"),
            0)
      << read_text(dir / "log");
  EXPECT_EQ(parse_csv(read_text(out + "/report.csv")).size(), 2u);
  EXPECT_TRUE(fs::exists(out + "/renders/heldout.png"));
  EXPECT_TRUE(fs::exists(out + "/checkpoints/final.ckpt"));
  EXPECT_TRUE(load_checkpoint(out + "/checkpoints/final.ckpt").is_grid());
}

TEST(Cli, ExpansiveNerfOnSilhouetteSceneFailsToFindAnchors) {
  esup::test::TempDir dir;
  EXPECT_EQ(run_cli("fit-nerf " + esup::test::data_path("scenes/two_spheres.txt") +
                        " --views 2 --view-size 16 --grid-res 8 --total-iters 2 --out-dir " + (dir / "n"),
                    dir / "log"),
            3);
}
