#include <gtest/gtest.h>

#include <sys/wait.h>

#include <algorithm>
#include <cstdio>
#include <fstream>

#include "support.hpp"

namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code = -1;
  std::string out;
};

Outcome cli(const std::string& args) {
  const std::string cmd = std::string(XSITE_CLI) + " " + args + " 2>/dev/null";
  Outcome r;
  FILE* p = ::popen(cmd.c_str(), "r");
  if (!p) return r;
  char buf[4096];
  std::size_t n;
  while ((n = std::fread(buf, 1, sizeof buf, p)) > 0) r.out.append(buf, n);
  const int status = ::pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

void write(const fs::path& path, const std::string& text) { std::ofstream(path, std::ios::binary) << text; }

std::size_t lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

const char* kTinyExperiment =
    "data.n_per_class = 6\n"
    "site_a.image_size = 16\nsite_b.image_size = 16\n"
    "model.input_h = 16\nmodel.input_w = 16\n"
    "model.stem_channels = 4\nmodel.upper_channels = 4,4,6,6\nmodel.lower_blocks = 1\n"
    "model.layers_per_block = 1\nmodel.growth = 4\nmodel.transition_channels = 4\nmodel.head_dims = 8,4\n"
    "model.norm = per_site_dsbn\n"
    "train.epochs = 1\ntrain.batch_size = 4\ntrain.lr = 1e-3\ntrain.folds = 2\ntrain.seeds = 1\n"
    "train.eval_every = 0\n";

}  // namespace

TEST(Cli, GenDataIsDeterministicAndValidated) {
  const auto dir = oracle::scratch_dir("cli_gen");
  write(dir / "spec.cfg", "n_per_class = 3\nimage_size = 16\nlesion_radius_max = 3\n");
  const Outcome r = cli("gen-data --spec " + (dir / "spec.cfg").string() + " --out " + (dir / "a").string());
  ASSERT_EQ(r.code, 0) << r.out;
  const std::string manifest = oracle::slurp(dir / "a" / "manifest.csv");
  EXPECT_EQ(lines(manifest), 7u);  // header + 6 images
  EXPECT_TRUE(fs::exists(dir / "a" / "artifacts.txt"));
  ASSERT_EQ(cli("gen-data --spec " + (dir / "spec.cfg").string() + " --out " + (dir / "b").string()).code, 0);
  EXPECT_EQ(oracle::slurp(dir / "b" / "manifest.csv"), manifest);
  for (const auto& e : fs::directory_iterator(dir / "a" / "images")) {
    EXPECT_EQ(oracle::slurp(e.path()), oracle::slurp(dir / "b" / "images" / e.path().filename()));
  }

  write(dir / "bad.cfg", "n_per_class = 3\nsharpness = 2\n");
  EXPECT_EQ(cli("gen-data --spec " + (dir / "bad.cfg").string() + " --out " + (dir / "c").string()).code, 2);
  EXPECT_EQ(cli("gen-data --spec " + (dir / "missing.cfg").string() + " --out " + (dir / "c").string()).code, 3);
  EXPECT_EQ(cli("gen-data --out " + (dir / "c").string()).code, 2);
  EXPECT_EQ(cli("frobnicate").code, 2);
  fs::remove_all(dir);
}

TEST(Cli, TrainWritesOneCheckpointAndRecord) {
  const auto dir = oracle::scratch_dir("cli_train");
  write(dir / "exp.cfg", kTinyExperiment);
  const std::string base = "train --config " + (dir / "exp.cfg").string() + " --mode contrastive --seed 3 --out ";
  const Outcome r = cli(base + (dir / "r1").string());
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("final contrastive"), std::string::npos) << r.out;
  std::vector<std::string> files;
  for (const auto& e : fs::directory_iterator(dir / "r1")) files.push_back(e.path().filename().string());
  std::sort(files.begin(), files.end());
  EXPECT_EQ(files, (std::vector<std::string>{"artifacts.txt", "checkpoint.json", "run_record.csv"}));
  // the checkpoint embeds the run directory, so the rerun writes to the same place
  fs::rename(dir / "r1", dir / "first");
  ASSERT_EQ(cli(base + (dir / "r1").string()).code, 0);
  EXPECT_TRUE(oracle::slurp(dir / "first" / "checkpoint.json") == oracle::slurp(dir / "r1" / "checkpoint.json"));
  EXPECT_EQ(oracle::slurp(dir / "first" / "run_record.csv"), oracle::slurp(dir / "r1" / "run_record.csv"));

  write(dir / "typo.cfg", std::string(kTinyExperiment) + "model.norm_override = x\n");
  EXPECT_EQ(cli("train --config " + (dir / "typo.cfg").string()).code, 2);
  // contrastive needs per-site normalization
  std::string shared = kTinyExperiment;
  shared.replace(shared.find("per_site_dsbn"), 13, "shared_bn");
  write(dir / "shared.cfg", shared);
  EXPECT_EQ(cli("train --config " + (dir / "shared.cfg").string() + " --mode contrastive --out " +
                  (dir / "r3").string())
                .code,
            2);
  EXPECT_FALSE(fs::exists(dir / "r3"));
  EXPECT_EQ(cli("train --config " + (dir / "exp.cfg").string() + " --mode solo").code, 2);
  fs::remove_all(dir);
}

TEST(Cli, CamWritesOneOverlayPerRow) {
  const auto dir = oracle::scratch_dir("cli_cam");
  write(dir / "exp.cfg", kTinyExperiment);
  ASSERT_EQ(cli("train --config " + (dir / "exp.cfg").string() + " --mode sepnorm --out " + (dir / "run").string())
                .code,
            0);
  write(dir / "spec.cfg", "n_per_class = 2\nimage_size = 16\nlesion_radius_max = 3\n");
  ASSERT_EQ(cli("gen-data --spec " + (dir / "spec.cfg").string() + " --out " + (dir / "imgs").string()).code, 0);
  const std::string ck = (dir / "run" / "checkpoint.json").string();
  const Outcome r = cli("cam --checkpoint " + ck + " --images " + (dir / "imgs" / "manifest.csv").string() +
                      " --out " + (dir / "cam").string());
  ASSERT_EQ(r.code, 0) << r.out;
  std::size_t overlays = 0;
  for (const auto& e : fs::directory_iterator(dir / "cam")) overlays += e.path().extension() == ".ppm";
  EXPECT_EQ(overlays, 4u);
  EXPECT_EQ(lines(oracle::slurp(dir / "cam" / "cam_summary.csv")), 5u);
  EXPECT_NE(r.out.find("lesion mass"), std::string::npos) << r.out;

  // without masks there is nothing to summarize
  fs::create_directories(dir / "nomask");
  std::ifstream in(dir / "imgs" / "manifest.csv");
  std::string line, kept;
  std::getline(in, line);
  kept = line + "\n";
  while (std::getline(in, line)) {
    const std::string path = line.substr(0, line.find(','));
    fs::copy_file(dir / "imgs" / path, dir / "nomask" / fs::path(path).filename());
    kept += fs::path(path).filename().string() + line.substr(line.find(',')) + "\n";
  }
  write(dir / "nomask" / "manifest.csv", kept);
  const Outcome bare = cli("cam --checkpoint " + ck + " --images " + (dir / "nomask" / "manifest.csv").string() +
                         " --out " + (dir / "cam2").string());
  ASSERT_EQ(bare.code, 0) << bare.out;
  EXPECT_EQ(bare.out.find("lesion mass"), std::string::npos) << bare.out;
  EXPECT_EQ(cli("cam --checkpoint " + (dir / "nope.json").string() + " --images " +
                  (dir / "imgs" / "manifest.csv").string() + " --out " + (dir / "cam3").string())
                .code,
            3);
  fs::remove_all(dir);
}

TEST(Cli, CompareProducesFourRowTable) {
  const auto dir = oracle::scratch_dir("cli_compare");
  write(dir / "exp.cfg", kTinyExperiment);
  const Outcome r = cli("compare --config " + (dir / "exp.cfg").string() + " --out " + (dir / "cmp").string());
  ASSERT_TRUE(r.code == 0 || r.code == 4) << r.out;
  const std::string table = oracle::slurp(dir / "cmp" / "table.csv");
  EXPECT_EQ(lines(table), 5u);
  for (const char* m : {"Single", "Joint", "SepNorm", "Contrastive"}) EXPECT_NE(table.find(m), std::string::npos) << m;
  EXPECT_TRUE(fs::exists(dir / "cmp" / "ttest.csv"));
  EXPECT_NE(r.out.find("paired t-test"), std::string::npos);
  fs::remove_all(dir);
}
