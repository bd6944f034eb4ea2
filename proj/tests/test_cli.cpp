#include <gtest/gtest.h>

#include <fstream>

#include "pointvector/cli.hpp"
#include "test_support.hpp"

using namespace pointvector;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result invoke(std::vector<std::string> args) {
  args.insert(args.begin(), "pointvector");
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

fs::path write_config(const fs::path& dir, const std::string& extra_train = "", const std::string& extra = "",
                      int epochs = 2) {
  const auto path = dir / "cfg.json";
  std::ofstream(path) << R"({"name": "tiny", "train": {"batch_size": 2, "epochs": )" << epochs << extra_train
                      << R"(}, "data": {"train_scenes": 4, "val_scenes": 2, "num_points": 64})" << extra << "}";
  return path;
}

std::vector<std::string> lines(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream in(s);
  for (std::string l; std::getline(in, l);)
    if (!l.empty()) out.push_back(l);
  return out;
}

}  // namespace

TEST(Cli, TrainWritesRunDirectoryAndRefusesToClobber) {
  auto dir = pvtest::temp_dir("cli_train");
  const auto cfg = write_config(dir);
  const std::string runs = (dir / "runs").string();
  auto r = invoke({"--runs", runs, "train", cfg.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto run = dir / "runs" / "tiny";
  for (const char* f : {"config.json", "metrics.csv", "log.txt", "best.ckpt"}) EXPECT_TRUE(fs::exists(run / f)) << f;
  auto csv = lines(slurp(run / "metrics.csv"));
  ASSERT_EQ(csv.size(), 1u + 2 * 2);
  EXPECT_EQ(csv[0], csv_header());

  EXPECT_EQ(invoke({"--runs", runs, "train", cfg.string()}).code, 2);
  const std::string first = slurp(run / "metrics.csv");
  EXPECT_EQ(invoke({"--runs", runs, "--overwrite", "train", cfg.string()}).code, 0);
  EXPECT_EQ(slurp(run / "metrics.csv"), first);
}

TEST(Cli, ConfigErrorsExitTwo) {
  auto dir = pvtest::temp_dir("cli_cfg");
  auto r = invoke({"--runs", (dir / "runs").string(), "train", (dir / "missing.json").string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("missing.json"), std::string::npos) << r.err;

  const auto bad = write_config(dir, R"(, "lr0": -1)");
  EXPECT_EQ(invoke({"--runs", (dir / "runs").string(), "train", bad.string()}).code, 2);
  EXPECT_EQ(invoke({"frobnicate"}).code, 2);
  EXPECT_EQ(invoke({"--precision", "half", "bench"}).code, 2);
  EXPECT_EQ(invoke({"--help"}).code, 0);
}

TEST(Cli, EvalReproducesValidationMetricAndRejectsCorruptCheckpoint) {
  auto dir = pvtest::temp_dir("cli_eval");
  const auto cfg = write_config(dir);
  const std::string runs = (dir / "runs").string();
  ASSERT_EQ(invoke({"--runs", runs, "train", cfg.string()}).code, 0);
  const auto run = dir / "runs" / "tiny";

  auto r = invoke({"eval", (run / "best.ckpt").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  auto rows = lines(r.out);
  ASSERT_GE(rows.size(), 5u);
  std::vector<std::string> header;
  {
    std::istringstream h(rows[0]);
    for (std::string c; std::getline(h, c, ',');) header.push_back(c);
  }
  ASSERT_EQ(header.size(), 10u);  // "metric" plus nine perturbations
  EXPECT_EQ(header[1], "none");

  // the clean mIoU equals the best validation mIoU recorded during training
  std::string miou_row;
  for (const auto& l : rows)
    if (l.starts_with("miou,")) miou_row = l;
  ASSERT_FALSE(miou_row.empty());
  const double clean = std::stod(miou_row.substr(5, miou_row.find(',', 5) - 5));
  double best = -1;
  for (const auto& l : lines(slurp(run / "metrics.csv")))
    if (l.find(",val,") != std::string::npos) best = std::max(best, std::stod(l.substr(l.rfind(',', l.rfind(',') - 1) + 1)));
  EXPECT_NEAR(clean, best, 1e-8);

  std::ofstream(dir / "junk.ckpt") << "not a checkpoint";
  EXPECT_EQ(invoke({"eval", (dir / "junk.ckpt").string()}).code, 5);
}

TEST(Cli, AblateWritesOneRowPerCellInOrder) {
  auto dir = pvtest::temp_dir("cli_ablate");
  const auto cfg = write_config(dir, "", R"(, "ablate": {"vector_dim": [1, 3]})", 1);
  const std::string runs = (dir / "runs").string();
  auto r = invoke({"--runs", runs, "--jobs", "2", "ablate", cfg.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  auto rows = lines(slurp(dir / "runs" / "tiny" / "ablation.csv"));
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0], cli::ablation_header());
  auto field = [](const std::string& row, std::size_t i) {
    std::istringstream in(row);
    std::string c;
    for (std::size_t k = 0; k <= i; ++k) std::getline(in, c, ',');
    return c;
  };
  EXPECT_EQ(field(rows[1], 2), "1");
  EXPECT_EQ(field(rows[2], 2), "3");
  EXPECT_LT(std::stoull(field(rows[1], 4)), std::stoull(field(rows[2], 4)));
}

TEST(Cli, GradcheckExitCodes) {
  EXPECT_EQ(invoke({"gradcheck", "--filter", "relu", "--instances", "2"}).code, 0);
  auto r = invoke({"gradcheck", "--filter", "relu", "--instances", "2", "--inject-fault", "relu"});
  EXPECT_EQ(r.code, 4);
  EXPECT_NE((r.out + r.err).find("relu"), std::string::npos);
  EXPECT_EQ(invoke({"gradcheck", "--inject-fault", "no_such_op"}).code, 2);
}

TEST(Cli, GenDataWritesManifestThatTrains) {
  auto dir = pvtest::temp_dir("cli_gen");
  const auto cfg = write_config(dir);
  ASSERT_EQ(invoke({"gen-data", (dir / "data").string(), "--config", cfg.string()}).code, 0);
  auto entries = read_manifest((dir / "data" / "manifest.txt").string());
  EXPECT_EQ(entries.size(), 6u);
  EXPECT_EQ(invoke({"gen-data", (dir / "data").string(), "--config", cfg.string()}).code, 2);
}
