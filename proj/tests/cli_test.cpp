#include <doctest.h>

#include <json.hpp>

#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string output;  ///< stdout and stderr interleaved
};

Run fsh_cli(const std::string& args) {
  const std::string cmd = std::string(FSH_CLI_PATH) + " " + args + " 2>&1";
  Run r;
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe);
  char buf[4096];
  while (std::size_t n = std::fread(buf, 1, sizeof buf, pipe)) r.output.append(buf, n);
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// A scratch directory holding a small toy dataset and a 16x16 config.
struct Workspace {
  fs::path root = fs::temp_directory_path() / "fsh_cli_test";
  fs::path data = root / "data";
  fs::path config = root / "tiny.ini";

  Workspace() {
    fs::remove_all(root);
    fs::create_directories(root);
    std::ofstream(config) << "[network]\nresolution = 16\nmin_channels = 4\nmax_channels = 8\nembedding_dim = 8\n"
                             "down_blocks = 2\nbottleneck_blocks = 1\nup_blocks = 2\nattention_down = 8\n"
                             "attention_up = 8\n[train]\nK = 2\nbatch_size = 2\nckpt_every = 0\n"
                             "[finetune]\nepochs = 1\n";
    const auto r = fsh_cli("make-toy --out " + data.string() + " --identities 3 --frames 6 --resolution 16");
    REQUIRE(r.code == 0);
  }
  std::string cfg() const { return " --config " + config.string(); }
};

Workspace& workspace() {
  static Workspace w;
  return w;
}

}  // namespace

TEST_SUITE("cli") {
  TEST_CASE("usage errors exit 2") {
    CHECK(fsh_cli("").code == 2);
    CHECK(fsh_cli("no-such-command").code == 2);
    CHECK(fsh_cli("ingest --root /tmp").code == 2);
    CHECK(fsh_cli("--help").code == 0);
  }

  TEST_CASE("ingest: missing root names the path") {
    const auto r = fsh_cli("ingest --root /nonexistent/fsh_root --out /tmp/fsh_index.json");
    CHECK(r.code == 2);
    CHECK(r.output.find("/nonexistent/fsh_root") != std::string::npos);
  }

  TEST_CASE("ingest is idempotent") {
    auto& w = workspace();
    const auto a = w.root / "index_a.json", b = w.root / "index_b.json";
    REQUIRE(fsh_cli("ingest --root " + w.data.string() + " --out " + a.string()).code == 0);
    REQUIRE(fsh_cli("ingest --root " + w.data.string() + " --out " + b.string()).code == 0);
    CHECK(slurp(a) == slurp(b));
    CHECK(nlohmann::json::parse(slurp(a)).dump().find("sequences") != std::string::npos);
  }

  TEST_CASE("ingest of an empty root is a runtime failure") {
    const auto empty = workspace().root / "empty";
    fs::create_directories(empty);
    CHECK(fsh_cli("ingest --root " + empty.string() + " --out " + (empty / "i.json").string()).code == 1);
  }

  TEST_CASE("every command prints the config hash; --print-config stops there") {
    auto& w = workspace();
    const auto a = fsh_cli("meta-train --print-config --seed 3" + w.cfg());
    CHECK(a.code == 0);
    CHECK(a.output.starts_with("config-hash: "));
    CHECK(a.output.find("[network]\nresolution = 16") != std::string::npos);
    CHECK(a.output.find("seed = 3") != std::string::npos);
    const auto b = fsh_cli("meta-train --print-config --seed 3" + w.cfg());
    CHECK(a.output == b.output);
    const auto c = fsh_cli("meta-train --print-config --seed 4" + w.cfg());
    CHECK(a.output.substr(0, 30) != c.output.substr(0, 30));
  }

  TEST_CASE("meta-train: invalid config key exits 2 naming the key") {
    auto& w = workspace();
    const auto bad = w.root / "bad.ini";
    std::ofstream(bad) << "[train]\nlearnin_rate = 1\n";
    const auto r = fsh_cli("meta-train --config " + bad.string() + " --data " + w.data.string());
    CHECK(r.code == 2);
    CHECK(r.output.find("train.learnin_rate") != std::string::npos);
    CHECK(fsh_cli("meta-train --variant xx --data " + w.data.string() + w.cfg()).code == 2);
  }

  TEST_CASE("pipeline: meta-train, personalize, synthesize, puppeteer, evaluate, bench-time") {
    auto& w = workspace();
    const auto run = w.root / "run";
    const auto init = fsh_cli("meta-train --max-steps 0 --quiet --data " + w.data.string() + " --output " +
                              run.string() + w.cfg());
    REQUIRE(init.code == 0);
    CHECK(fs::exists(run / "latest.ckpt"));
    CHECK(fs::exists(run / "config.ini"));

    const auto ff_run = w.root / "run_ff";
    REQUIRE(fsh_cli("meta-train --max-steps 2 --quiet --variant ff --data " + w.data.string() + " --output " +
                    ff_run.string() + w.cfg())
                .code == 0);
    std::istringstream metrics(slurp(ff_run / "metrics.csv"));
    std::string line;
    std::getline(metrics, line);
    CHECK(line.starts_with("step,l_cnt,l_adv,l_fm,l_mch"));
    int rows = 0;
    while (std::getline(metrics, line)) {
      ++rows;
      std::stringstream fields(line);
      std::string field;
      for (int k = 0; k < 5; ++k) std::getline(fields, field, ',');
      CHECK(std::stod(field) == 0.0);
    }
    CHECK(rows == 2);

    const auto seq = *fs::directory_iterator(w.data);
    const auto model = w.root / "person.fshm";
    const auto pz = fsh_cli("personalize --checkpoint " + (run / "latest.ckpt").string() + " --frames " +
                            seq.path().string() + " --T 2 --epochs 0 --out " + model.string() + w.cfg());
    REQUIRE(pz.code == 0);
    CHECK(pz.output.find("(0 fine-tune steps)") != std::string::npos);
    CHECK(fsh_cli("personalize --checkpoint " + (run / "latest.ckpt").string() + " --frames " +
                  seq.path().string() + " --T 99 --out " + model.string() + w.cfg())
              .code == 2);

    const auto frames = w.root / "synth";
    REQUIRE(fsh_cli("synthesize --model " + model.string() + " --track " + seq.path().string() + " --out " +
                    frames.string() + w.cfg())
                .code == 0);
    CHECK(fs::exists(frames / "000000.png"));
    CHECK(fs::exists(frames / "000005.png"));
    CHECK_FALSE(fs::exists(frames / "000006.png"));
    CHECK(fs::exists(frames / "contact_sheet.png"));

    const auto rank = w.root / "rank";
    REQUIRE(fsh_cli("puppeteer --rank --checkpoint " + (run / "latest.ckpt").string() + " --still " +
                    seq.path().string() + " --candidates " + w.data.string() + " --out " + rank.string() + w.cfg())
                .code == 0);
    const auto ranking = nlohmann::json::parse(slurp(rank / "ranking.json"));
    REQUIRE(ranking.size() == 3);
    for (std::size_t k = 1; k < ranking.size(); ++k)
      CHECK(ranking[k - 1]["csim"].get<double>() >= ranking[k]["csim"].get<double>());

    const auto eval = w.root / "eval";
    const auto ev = fsh_cli("evaluate --protocol self-reenactment --T 2 --holdout 2 --epochs 0 --checkpoint " +
                            (run / "latest.ckpt").string() + " --data " + w.data.string() + " --out " +
                            eval.string() + w.cfg());
    REQUIRE(ev.code == 0);
    CHECK(slurp(eval / "report.csv").starts_with("method,T,fid,ssim,csim"));
    CHECK(nlohmann::json::parse(slurp(eval / "report.json"))["rows"][0]["n_videos"] == 3);

    const auto bench = fsh_cli("bench-time --T 1,2 --reps 20 --epochs 0 --checkpoint " + (run / "latest.ckpt").string() +
                               w.cfg());
    REQUIRE(bench.code == 0);
    CHECK(bench.output.find("inference_ms_per_frame") != std::string::npos);
  }

  TEST_CASE("runtime failures exit 1") {
    auto& w = workspace();
    const auto junk = w.root / "junk.ckpt";
    std::ofstream(junk) << "not a checkpoint";
    const auto seq = *fs::directory_iterator(w.data);
    const auto r = fsh_cli("personalize --checkpoint " + junk.string() + " --frames " + seq.path().string() +
                           " --T 1 --out " + (w.root / "x.fshm").string() + w.cfg());
    CHECK(r.code == 1);
  }
}
