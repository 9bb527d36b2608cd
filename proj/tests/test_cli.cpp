#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>
#include <sys/wait.h>

#include <nlohmann/json.hpp>

#include "test_util.hpp"

namespace {

struct Run {
  int code = -1;
  std::string out;
};

Run run(const maskclip::testing::TempDir& dir, const std::string& args) {
  const auto out = dir / "stdout.txt";
  const std::string cmd = std::string(MASKCLIP_CLI_PATH) + " " + args + " > " + out.string() + " 2> " +
                          (dir / "stderr.txt").string();
  const int status = std::system(cmd.c_str());
  Run r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream f(out);
  r.out.assign(std::istreambuf_iterator<char>(f), {});
  return r;
}

std::map<std::string, double> metrics(const std::string& csv) {
  std::map<std::string, double> m;
  std::istringstream in(csv);
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    const auto comma = line.find(',');
    m[line.substr(0, comma)] = std::stod(line.substr(comma + 1));
  }
  return m;
}

std::vector<std::string> lines(const std::filesystem::path& p) {
  std::ifstream f(p);
  std::vector<std::string> out;
  for (std::string l; std::getline(f, l);) out.push_back(l);
  return out;
}

void write(const std::filesystem::path& p, const std::string& text) { std::ofstream(p) << text; }

const char* kSmallEncoder =
    R"("psm_dim": 16, "eval_every": 2, "encoder": {"layers": 3, "extractor_layers": 1, "width": 16, "embed_dim": 8,
        "heads": 2, "grid": [8, 8], "patch_dim": 48})";

std::string config(int steps, const std::string& extra = "") {
  return "{\"total_steps\": " + std::to_string(steps) + ", " + extra + kSmallEncoder + "}";
}

// One dataset shared by the cases below.
struct Fixture {
  maskclip::testing::TempDir dir{"cli"};
  Fixture() {
    write(dir / "spec.json", R"({"n_train": 6, "n_val": 4, "image_size": 32, "seed": 5})");
    REQUIRE(run(dir, "gen-data --spec " + (dir / "spec.json").string() + " --out " + (dir / "ds").string()).code == 0);
  }
  std::string ds() const { return (dir / "ds").string(); }
};

}  // namespace

TEST_CASE("gen-data") {
  maskclip::testing::TempDir dir("cli");
  write(dir / "spec.json", R"({"n_train": 2, "n_val": 1, "image_size": 32, "shapes": ["disk"], "colors": ["red"]})");
  SUBCASE("dry run writes nothing") {
    const auto r = run(dir, "gen-data --dry-run --spec " + (dir / "spec.json").string() + " --out " + (dir / "d").string());
    CHECK(r.code == 0);
    CHECK(r.out.find("red disk") != std::string::npos);
    CHECK_FALSE(std::filesystem::exists(dir / "d"));
  }
  SUBCASE("valid spec") {
    const auto r = run(dir, "gen-data --spec " + (dir / "spec.json").string() + " --out " + (dir / "d").string());
    CHECK(r.code == 0);
    CHECK(std::filesystem::is_directory(dir / "d" / "images"));
    CHECK(std::filesystem::is_directory(dir / "d" / "masks"));
    CHECK(lines(dir / "d" / "vocab.txt") == std::vector<std::string>{"red disk"});
  }
  SUBCASE("missing spec is a usage error") {
    CHECK(run(dir, "gen-data --spec " + (dir / "none.json").string() + " --out " + (dir / "d").string()).code == 2);
  }
  SUBCASE("bad spec is a runtime error") {
    write(dir / "bad.json", R"({"shapes": []})");
    CHECK(run(dir, "gen-data --spec " + (dir / "bad.json").string() + " --out " + (dir / "d").string()).code == 1);
  }
  CHECK(run(dir, "no-such-command").code == 2);
  CHECK(run(dir, "").code == 2);
}

TEST_CASE_FIXTURE(Fixture, "train, resume and evaluate") {
  write(dir / "cfg3.json", config(3));
  write(dir / "cfg6.json", config(6));
  const std::string ck = (dir / "ck").string();
  auto r = run(dir, "train --config " + (dir / "cfg3.json").string() + " --data " + ds() + " --out " + ck);
  REQUIRE(r.code == 0);
  auto rows = lines(dir / "ck" / "metrics.csv");
  CHECK(rows.size() == 1 + 3);
  CHECK(rows[0] == "step,lr,loss,val_maskAcc");

  // a changed config is refused on resume unless overridden
  CHECK(run(dir, "train --resume --config " + (dir / "cfg6.json").string() + " --data " + ds() + " --out " + ck).code == 1);
  r = run(dir, "train --resume --allow-config-mismatch --config " + (dir / "cfg6.json").string() + " --data " + ds() +
                   " --out " + ck);
  REQUIRE(r.code == 0);
  rows = lines(dir / "ck" / "metrics.csv");
  REQUIRE(rows.size() == 1 + 6);
  CHECK(rows[4].rfind("4,", 0) == 0);
  CHECK(rows[6].rfind("6,", 0) == 0);

  const auto on = metrics(run(dir, "eval --ckpt " + ck + " --data " + ds() + " --mode maskacc --use-psm on").out);
  const auto off = metrics(run(dir, "eval --ckpt " + ck + " --data " + ds() + " --mode maskacc --use-psm off").out);
  REQUIRE(on.count("maskAcc"));
  CHECK(on.at("maskAcc") == off.at("maskAcc"));

  // perfect proposals at gamma 0 match classification of the ground-truth masks
  REQUIRE(run(dir, "make-proposals --data " + ds() + " --out " + (dir / "p").string()).code == 0);
  const auto g0 = metrics(run(dir, "eval --ckpt " + ck + " --data " + ds() + " --mode miou --gamma 0 --proposals " +
                                      (dir / "p").string()).out);
  const auto gt = metrics(run(dir, "eval --ckpt " + ck + " --data " + ds() + " --mode miou --gt-masks").out);
  CHECK(g0.at("mIoU") == gt.at("mIoU"));
  CHECK(run(dir, "eval --ckpt " + ck + " --data " + ds() + " --mode miou").code == 2);
  CHECK(run(dir, "eval --ckpt " + ck + " --data " + ds() + " --gamma 2").code == 2);
}

TEST_CASE_FIXTURE(Fixture, "psm variant flag") {
  write(dir / "cfg.json", config(1));
  const std::string ck = (dir / "left").string();
  REQUIRE(run(dir, "train --psm embed_left --config " + (dir / "cfg.json").string() + " --data " + ds() + " --out " + ck)
              .code == 0);
  std::ifstream f(dir / "left" / "manifest.json");
  const auto m = nlohmann::json::parse(f);
  CHECK(m.at("config").at("psm") == "embed_left");
  CHECK(std::filesystem::exists(dir / "left" / "tensors" / "psm.theta.mcpp"));
  CHECK(run(dir, "train --psm other --config " + (dir / "cfg.json").string() + " --data " + ds() + " --out " + ck).code == 2);
}

TEST_CASE_FIXTURE(Fixture, "oracle analysis") {
  const std::string p = (dir / "p").string();
  REQUIRE(run(dir, "make-proposals --data " + ds() + " --out " + p).code == 0);
  auto m = metrics(run(dir, "oracle --proposals " + p + " --data " + ds()).out);
  CHECK(m.at("oracle_mIoU") == 1.0);
  CHECK(m.at("generator_mIoU") == 1.0);

  REQUIRE(run(dir, "make-proposals --corrupt 1 --seed 2 --data " + ds() + " --out " + (dir / "bad").string()).code == 0);
  m = metrics(run(dir, "oracle --proposals " + (dir / "bad").string() + " --data " + ds()).out);
  CHECK(m.at("oracle_mIoU") == 1.0);
  CHECK(m.at("generator_mIoU") < 0.5);

  REQUIRE(run(dir, "make-proposals --erode 2 --data " + ds() + " --out " + (dir / "thin").string()).code == 0);
  m = metrics(run(dir, "oracle --proposals " + (dir / "thin").string() + " --data " + ds()).out);
  CHECK(m.at("oracle_mIoU") < 1.0);
  CHECK(m.at("gap") >= 0.0);

  // a sidecar without the vocabulary map is rejected
  const auto sidecar = dir / "p" / "0006.json";
  REQUIRE(std::filesystem::exists(sidecar));
  nlohmann::json j;
  {
    std::ifstream f(sidecar);
    j = nlohmann::json::parse(f);
  }
  j.erase("in_vocab_map");
  std::ofstream(sidecar, std::ios::trunc) << j.dump();
  const auto r = run(dir, "oracle --proposals " + p + " --data " + ds());
  CHECK(r.code == 1);
}

TEST_CASE("demo-inconsistency") {
  maskclip::testing::TempDir dir("cli");
  REQUIRE(run(dir, "demo-inconsistency --out " + (dir / "demo.csv").string()).code == 0);
  auto rows = lines(dir / "demo.csv");
  REQUIRE(rows.size() == 3);
  CHECK(rows[0] == "step,s1,s2,r1,r2,s_rank_correct,r_rank_correct");
  CHECK(rows[2].substr(rows[2].size() - 10) == "false,true");

  REQUIRE(run(dir, "demo-inconsistency --theta identity --out " + (dir / "id.csv").string()).code == 0);
  const auto id_rows = lines(dir / "id.csv");
  REQUIRE(id_rows.size() == 3);
  for (std::size_t i = 1; i < id_rows.size(); ++i) {
    const auto& row = id_rows[i];
    std::vector<std::string> f;
    std::stringstream ss(row);
    for (std::string c; std::getline(ss, c, ',');) f.push_back(c);
    CHECK(f[1] == f[3]);
    CHECK(f[2] == f[4]);
  }

  REQUIRE(run(dir, "demo-inconsistency --lr 0 --out " + (dir / "zero.csv").string()).code == 0);
  rows = lines(dir / "zero.csv");
  CHECK(rows[1].substr(2) == rows[2].substr(2));
}
