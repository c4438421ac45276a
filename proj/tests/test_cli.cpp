#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <string>

#include "edue/io/container.hpp"

namespace fs = std::filesystem;
namespace io = edue::io;

namespace {

struct Run {
  int code;
  std::string out, err;
};

fs::path work_dir() {
  static const fs::path dir = [] {
    fs::path d = fs::temp_directory_path() / "edue_cli_tests";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

Run run_edue(const std::string& args) {
  const char* bin = std::getenv("EDUE_CLI");
  if (bin == nullptr) throw std::runtime_error("EDUE_CLI is not set");
  const auto out = work_dir() / "stdout.txt", err = work_dir() / "stderr.txt";
  const std::string cmd = "cd '" + work_dir().string() + "' && '" + bin + "' " + args + " >'" + out.string() +
                          "' 2>'" + err.string() + "'";
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, io::read_text(out), io::read_text(err)};
}

const char* kTinyConfig = R"({
  "model": {"input_size": [16, 16], "n_e": 3, "n_d": 2, "base_channels": 4},
  "scene": {"image_size": [16, 16], "delta_high": 2.0},
  "schedule": {"epochs": 1, "batch_size": 4}
})";

void write_tiny_config() { io::write_text_atomic(work_dir() / "tiny.json", kTinyConfig); }

// gen-data, train, eval, qc and ood into `tag`/.
void pipeline(const std::string& tag, const std::string& method = "edue") {
  write_tiny_config();
  ASSERT_EQ(run_edue("gen-data --config tiny.json --seed 4 --n 8 --n-test 6 --out " + tag + "/data").code, 0);
  const auto tr = run_edue("train --data " + tag + "/data --out " + tag + "/model --method " + method);
  ASSERT_EQ(tr.code, 0) << tr.err;
  for (const char* sub : {"eval", "qc", "ood"}) {
    const auto r = run_edue(std::string(sub) + " --model " + tag + "/model --data " + tag + "/data");
    ASSERT_EQ(r.code, 0) << sub << ": " << r.err;
  }
}

}  // namespace

TEST(Cli, UsageErrorsExitOne) {
  EXPECT_EQ(run_edue("").code, 1);
  EXPECT_EQ(run_edue("frobnicate").code, 1);
  EXPECT_EQ(run_edue("gen-data").code, 1);
  const auto r = run_edue("gen-data --out x --n seven");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("usage error"), std::string::npos);
  EXPECT_EQ(run_edue("gen-data --out x --preset desk --config tiny.json").code, 1);
}

TEST(Cli, HelpExitsZero) {
  const auto r = run_edue("--help");
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("gen-data"), std::string::npos);
}

TEST(Cli, DataErrorsExitTwo) {
  EXPECT_EQ(run_edue("inspect missing.edt").code, 2);
  EXPECT_EQ(run_edue("eval --model nowhere --data nowhere").code, 2);
  io::write_text_atomic(work_dir() / "bad.json", R"({"schedule": {"epoch": 3}})");
  const auto r = run_edue("gen-data --config bad.json --out bad");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("schedule.epoch"), std::string::npos);
}

TEST(Cli, InspectPrintsTableAndRejectsCorruptFiles) {
  io::save_container(work_dir() / "ok.edt", {{"w", edue::Tensor<float>(edue::Shape{1, 1, 2, 3}, 0.5f)}});
  const auto ok = run_edue("inspect ok.edt");
  ASSERT_EQ(ok.code, 0) << ok.err;
  EXPECT_NE(ok.out.find("(1,1,2,3)"), std::string::npos) << ok.out;
  EXPECT_NE(ok.out.find("1 entries"), std::string::npos);

  auto bytes = io::read_bytes(work_dir() / "ok.edt");
  bytes.resize(bytes.size() - 5);
  io::write_atomic(work_dir() / "cut.edt", bytes.data(), bytes.size());
  const auto cut = run_edue("inspect cut.edt");
  EXPECT_EQ(cut.code, 2);
  EXPECT_NE(cut.err.find("CRC"), std::string::npos) << cut.err;
}

TEST(Cli, TrainRejectsConfigThatDisagreesWithDataset) {
  write_tiny_config();
  ASSERT_EQ(run_edue("gen-data --config tiny.json --n 4 --out mismatch/data").code, 0);
  const auto r = run_edue("train --data mismatch/data --out mismatch/model --preset desk");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("does not match"), std::string::npos);
}

TEST(Cli, PipelineIsByteReproducible) {
  pipeline("run_a");
  pipeline("run_b");
  const auto a = work_dir() / "run_a", b = work_dir() / "run_b";
  for (const char* f : {"data/manifest.json", "data/img_00000.edt", "data/img_00013.edt", "model/member_0.edt",
                        "model/config.json", "model/loss.csv", "model/eval.json", "model/eval.csv",
                        "model/qc.json", "model/qc.csv", "model/ood.json", "model/ood.csv"}) {
    ASSERT_TRUE(fs::exists(a / f)) << f;
    EXPECT_EQ(io::read_bytes(a / f), io::read_bytes(b / f)) << f;
  }
  const auto eval = io::read_text(a / "model/eval.csv");
  EXPECT_EQ(std::count(eval.begin(), eval.end(), '\n'), 1 + 6 + 1);  // header, test images, dataset row
}

TEST(Cli, EnsembleCheckpointHoldsEveryMember) {
  pipeline("run_de", "de");
  EXPECT_TRUE(fs::exists(work_dir() / "run_de/model/member_2.edt"));
  EXPECT_FALSE(fs::exists(work_dir() / "run_de/model/member_3.edt"));
}

TEST(Cli, CompareWritesRowsAndSummaryPerBeta) {
  write_tiny_config();
  ASSERT_EQ(run_edue("gen-data --config tiny.json --n 8 --n-test 6 --out cmp/data").code, 0);
  const auto r = run_edue("compare --data cmp/data --out cmp/out --seeds 1,2 --methods edue,single_rater --betas 0,5");
  ASSERT_EQ(r.code, 0) << r.err;
  for (const char* stem : {"compare_beta_0", "compare_beta_5"}) {
    const auto rows = io::read_text(work_dir() / "cmp/out" / (std::string(stem) + "_rows.csv"));
    EXPECT_EQ(std::count(rows.begin(), rows.end(), '\n'), 1 + 4) << stem;
    EXPECT_TRUE(fs::exists(work_dir() / "cmp/out" / (std::string(stem) + "_summary.csv")));
    EXPECT_TRUE(fs::exists(work_dir() / "cmp/out" / (std::string(stem) + ".json")));
  }
}
