#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <string>

#include "tiny.hpp"

namespace {

namespace fs = std::filesystem;

struct CliResult {
  int code = -1;
  std::string out;
};

CliResult cli(const std::string& args) {
  const std::string cmd = std::string(COCOMIX_BIN) + " " + args + " 2>&1";
  FILE* p = popen(cmd.c_str(), "r");
  CliResult r;
  char buf[4096];
  std::size_t n = 0;
  while ((n = std::fread(buf, 1, sizeof buf, p)) > 0) r.out.append(buf, n);
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new fs::path(cocomix::testing::scratch_dir("cli"));
    cocomix::testing::write_bytes(*dir_ / "tiny.json", cocomix::testing::kTinyExperimentJson);
  }
  static void TearDownTestSuite() { delete dir_; }
  static std::string base() {
    return "--config " + (*dir_ / "tiny.json").string() + " --out-dir " + (*dir_ / "out").string();
  }
  static fs::path* dir_;
};
fs::path* Cli::dir_ = nullptr;

TEST_F(Cli, HelpListsEverySubcommandAndFlag) {
  const CliResult r = cli("--help");
  EXPECT_EQ(r.code, 0);
  for (const char* s :
       {"gen-corpus", "train-teacher", "dump-acts", "train-sae", "make-labels", "pretrain", "eval",
        "steer", "analyze-compression", "compare", "sweep", "reproduce", "show-config", "params",
        "--config", "--set", "--out-dir", "--force", "--mode", "--method", "--seed", "--steps",
        "--lambda", "--k-mix", "--run", "--concept-index", "--multiplier", "--topic", "--no-teacher",
        "--after-topk", "--baseline", "--candidate", "--target-ppl", "--methods", "--seeds", "--jobs",
        "--manifest"}) {
    EXPECT_NE(r.out.find(s), std::string::npos) << s;
  }
}

TEST_F(Cli, BadInvocationsExitWithConfigErrorCode) {
  EXPECT_EQ(cli("pretrain --method ntp --no-such-flag").code, 2);
  EXPECT_EQ(cli("").code, 2);
  EXPECT_EQ(cli("pretrain --method bogus").code, 2);
  const CliResult bad_set = cli(base() + " --set train.lamda=1 show-config");
  EXPECT_EQ(bad_set.code, 2);
  EXPECT_NE(bad_set.out.find("error[config_error]"), std::string::npos) << bad_set.out;
}

TEST_F(Cli, MissingPrerequisiteExitsThreeAndNamesTheFile) {
  const fs::path empty = cocomix::testing::scratch_dir("cli_empty");
  const CliResult r = cli("--config " + (*dir_ / "tiny.json").string() + " --out-dir " + empty.string() +
                    " train-sae");
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.out.find("corpus/corpus.crps"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("run gen-corpus first"), std::string::npos) << r.out;
}

TEST_F(Cli, EndToEndTinyExperiment) {
  for (const char* s : {"gen-corpus", "train-teacher", "dump-acts", "train-sae"}) {
    const CliResult r = cli(base() + " " + s);
    ASSERT_EQ(r.code, 0) << s << ": " << r.out;
  }
  const CliResult attr = cli(base() + " make-labels --mode attribution");
  const CliResult act = cli(base() + " make-labels --mode activation");
  ASSERT_EQ(attr.code, 0) << attr.out;
  ASSERT_EQ(act.code, 0) << act.out;
  const fs::path labels = *dir_ / "out" / "labels";
  EXPECT_NE(cocomix::testing::read_bytes(labels / "attribution.clbl"),
            cocomix::testing::read_bytes(labels / "activation.clbl"));

  ASSERT_EQ(cli(base() + " pretrain --method ntp").code, 0);
  const CliResult co = cli(base() + " pretrain --method cocomix");
  ASSERT_EQ(co.code, 0) << co.out;
  const CliResult cached = cli(base() + " pretrain --method cocomix");
  EXPECT_NE(cached.out.find("(cached)"), std::string::npos) << cached.out;

  const CliResult cmp = cli(base() + " compare --baseline ntp_s7 --candidate cocomix_s7");
  ASSERT_EQ(cmp.code, 0) << cmp.out;
  EXPECT_TRUE(fs::exists(*dir_ / "out" / "compare" / "ntp_s7__cocomix_s7.json"));

  const CliResult steer = cli(base() + " steer --run cocomix_s7 --concept-index 12 --multiplier 10 --no-teacher");
  ASSERT_EQ(steer.code, 0) << steer.out;
  const fs::path csv = *dir_ / "out" / "runs" / "cocomix_s7" / "steer-t0-c12.student.csv";
  ASSERT_TRUE(fs::exists(csv)) << steer.out;
  const std::string text = cocomix::testing::read_bytes(csv);
  EXPECT_EQ(text.rfind("multiplier,topic_k_frequency,ppl_of_sample\n10,", 0), 0u) << text;

  const CliResult range = cli(base() + " steer --run cocomix_s7 --concept-index 16 --multiplier 2");
  EXPECT_EQ(range.code, 1);
  EXPECT_NE(range.out.find("error[range_error]"), std::string::npos) << range.out;

  const CliResult repro = cli("reproduce --manifest " +
                        (*dir_ / "out" / "runs" / "cocomix_s7" / "pretrain.manifest.json").string());
  EXPECT_EQ(repro.code, 0) << repro.out;
  EXPECT_NE(repro.out.find("byte-identical"), std::string::npos) << repro.out;

  const CliResult show = cli(base() + " --set train.lambda=0.5 show-config");
  EXPECT_EQ(show.code, 0);
  EXPECT_NE(show.out.find("\"lambda\": 0.5"), std::string::npos) << show.out;
}

}  // namespace
