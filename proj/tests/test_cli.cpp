#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <json.hpp>
#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "facecap/corpus.hpp"
#include "test_util.hpp"

namespace t = testutil;
using nlohmann::json;

namespace {

std::string cli_path() {
  const char* p = std::getenv("FACECAP_CLI");
  REQUIRE(p != nullptr);
  return p;
}

// Runs the CLI, returns the exit code; stdout goes to `stdout_file`.
int run_cli(const std::string& args, const std::string& stdout_file = "/tmp/cli_out.txt") {
  std::string cmd = cli_path() + " " + args + " > " + stdout_file + " 2> /tmp/cli_err.txt";
  int rc = std::system(cmd.c_str());
  REQUIRE(rc != -1);
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::string slurp(const std::string& path) {
  std::ifstream f(path);
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

std::vector<json> read_jsonl(const std::string& path) {
  std::ifstream f(path);
  REQUIRE(f.good());
  std::vector<json> out;
  std::string line;
  while (std::getline(f, line))
    if (!line.empty()) out.push_back(json::parse(line));
  return out;
}

// Keep the model tiny so train/generate finish in seconds.
const char* kTinySets =
    " --set vocab=200 --set d_hidden=12 --set ffn_dim=24 --set enc_layers=1"
    " --set dec_layers=1 --set pa_layers=1 --set l_I=3 --set name_feature_len=4"
    " --set max_faces=2 --set article_max_tokens=48 --set caption_max_tokens=12"
    " --set retrieval_k=2 --set retrieval_text_hash=16 --set retrieval_emb_dim=6"
    " --set retrieval_ref_dim=8 --set batch_size=25 --set epochs=1 --set lr=0.001";

}  // namespace

TEST_CASE("stats: table and json formats agree with the fixture bookkeeping") {
  int rc = run_cli("stats --dataset " + t::fixture_path() + " --format json",
                   "/tmp/cli_stats.json");
  REQUIRE(rc == 0);
  json j = json::parse(slurp("/tmp/cli_stats.json"));
  CHECK(j["total"] == 50);

  std::ifstream bf(t::source_dir() + "/data/fixture_50_cells.json");
  json book = json::parse(bf);
  for (const auto& cell : {"F+N+", "F-N-", "F+N-", "F-N+"}) {
    CHECK(j["counts"][cell] == book["counts"][cell]);
    CHECK(std::abs(j["fractions"][cell].get<double>() -
                   book["fractions"][cell].get<double>()) < 1e-9);
  }

  rc = run_cli("stats --dataset " + t::fixture_path(), "/tmp/cli_stats.txt");
  REQUIRE(rc == 0);
  std::string table = slurp("/tmp/cli_stats.txt");
  // the table carries the same numbers
  for (const auto& cell : {"F+N+", "F-N-", "F+N-", "F-N+"}) {
    std::size_t pos = table.find(cell);
    REQUIRE(pos != std::string::npos);
    std::istringstream row(table.substr(pos + 6));
    std::size_t count;
    double fraction;
    row >> count >> fraction;
    CHECK(count == book["counts"][cell].get<std::size_t>());
    CHECK(std::abs(fraction - j["fractions"][cell].get<double>()) < 1e-6);
  }
}

TEST_CASE("stats: empty dataset exits 2") {
  std::ofstream("/tmp/cli_empty.jsonl");
  CHECK(run_cli("stats --dataset /tmp/cli_empty.jsonl") == 2);
  CHECK(run_cli("stats --dataset /tmp/does_not_exist.jsonl") == 2);
}

TEST_CASE("argument errors exit 2") {
  CHECK(run_cli("stats --no-such-flag") == 2);
  CHECK(run_cli("") == 2);  // missing subcommand
  CHECK(run_cli("stats --dataset " + t::fixture_path() + " --format yaml") == 2);
  CHECK(run_cli("train --dataset " + t::fixture_path() +
                " --out /tmp/cli_bad --set no_such_key=1") == 2);
  CHECK(run_cli("train --dataset " + t::fixture_path() + " --out /tmp/cli_bad --set epochs") ==
        2);
  CHECK(run_cli("train --dataset " + t::fixture_path() +
                " --out /tmp/cli_bad --set epochs=0") == 2);
}

TEST_CASE("retrieve writes one record per sample") {
  int rc = run_cli("retrieve --dataset " + t::fixture_path() +
                   " --k 2 --out /tmp/cli_retr.jsonl" + kTinySets);
  REQUIRE(rc == 0);
  auto lines = read_jsonl("/tmp/cli_retr.jsonl");
  auto samples = facecap::load_dataset(t::fixture_path());
  REQUIRE(lines.size() == samples.size());
  for (size_t i = 0; i < lines.size(); ++i) {
    CHECK(lines[i]["id"] == samples[i].id);
    auto idx = lines[i]["sentence_indices"].get<std::vector<int>>();
    CHECK(!idx.empty());
    for (int ix : idx) {
      CHECK(ix >= 0);
      CHECK(ix < static_cast<int>(samples[i].sentences.size()));
    }
  }
}

TEST_CASE("train / generate / evaluate pipeline") {
  std::string ckpt = "/tmp/cli_ckpt";
  std::string train_cmd = "train --dataset " + t::fixture_path() + " --out " + ckpt + kTinySets;
  REQUIRE(run_cli(train_cmd) == 0);
  for (const auto& f : {"model.ckpt", "config.json", "lexicon.json", "train_log.jsonl",
                        "manifest.json"})
    CHECK(std::ifstream(ckpt + "/" + f).good());

  json manifest = json::parse(slurp(ckpt + "/manifest.json"));
  CHECK(manifest["command"] == "train");
  CHECK(manifest["dataset_sha256"].get<std::string>().size() == 64);
  CHECK(manifest["schema_version"] == "1");
  CHECK(manifest["config"]["epochs"] == 1);

  auto log = read_jsonl(ckpt + "/train_log.jsonl");
  CHECK(log.size() == 2);  // 50 samples, batch 25, 1 epoch
  for (const auto& step : log) {
    CHECK(step["l_cap"].get<double>() > 0.0);
    CHECK(step["lr"].get<double>() >= 0.0);
  }

  // training is reproducible through the CLI
  REQUIRE(run_cli("train --dataset " + t::fixture_path() + " --out /tmp/cli_ckpt2" +
                  kTinySets) == 0);
  CHECK(slurp(ckpt + "/model.ckpt") == slurp("/tmp/cli_ckpt2/model.ckpt"));

  REQUIRE(run_cli("generate --checkpoint " + ckpt + " --dataset " + t::fixture_path() +
                  " --beam 2 --out /tmp/cli_gen.jsonl") == 0);
  auto gens = read_jsonl("/tmp/cli_gen.jsonl");
  REQUIRE(gens.size() == 50);
  for (const auto& g : gens) {
    CHECK(g.contains("id"));
    CHECK(g.contains("caption"));
    CHECK(g["logprob"].get<double>() <= 0.0);
  }

  REQUIRE(run_cli("evaluate --candidates /tmp/cli_gen.jsonl --dataset " + t::fixture_path() +
                  " --subsets --by-type --out /tmp/cli_report.json") == 0);
  json report = json::parse(slurp("/tmp/cli_report.json"));
  CHECK(report["overall"]["sample_count"] == 50);
  for (const auto& m : {"bleu4", "meteor", "rougeL", "cider"}) {
    double v = report["overall"]["captions"][m].get<double>();
    CHECK(v >= 0.0);
    CHECK(v <= 1000.0);
  }
  // fixture has no F+N- samples: empty subset reported with null metrics
  CHECK(report["subsets"]["F+N-"]["sample_count"] == 0);
  CHECK(report["subsets"]["F+N-"]["captions"].is_null());
  CHECK(report["subsets"]["F+N+"]["sample_count"] == 28);
  CHECK(report["subsets"]["F+N+"]["entities_by_type"].contains("PERSON"));

  // generate with a missing checkpoint exits 2
  CHECK(run_cli("generate --checkpoint /tmp/no_ckpt --dataset " + t::fixture_path() +
                " --beam 2 --out /tmp/cli_gen2.jsonl") == 2);
}

TEST_CASE("evaluating the gold captions scores a perfect BLEU") {
  auto samples = facecap::load_dataset(t::fixture_path());
  std::ofstream f("/tmp/cli_gold.jsonl");
  for (const auto& s : samples) {
    json j;
    j["id"] = s.id;
    j["caption"] = s.caption;
    f << j.dump() << "\n";
  }
  f.close();
  REQUIRE(run_cli("evaluate --candidates /tmp/cli_gold.jsonl --dataset " + t::fixture_path() +
                  " --out /tmp/cli_gold_report.json") == 0);
  json report = json::parse(slurp("/tmp/cli_gold_report.json"));
  CHECK(report["overall"]["captions"]["bleu4"].get<double>() ==
        doctest::Approx(100.0).epsilon(1e-6));
  CHECK(report["overall"]["captions"]["rougeL"].get<double>() ==
        doctest::Approx(100.0).epsilon(1e-6));
  CHECK(report["overall"]["entities"]["precision"].get<double>() == doctest::Approx(1.0));
  CHECK(report["overall"]["entities"]["recall"].get<double>() == doctest::Approx(1.0));
}

TEST_CASE("config file values are overridden by --set") {
  std::ofstream f("/tmp/cli_cfg.txt");
  f << "epochs = 2\nbatch_size = 25\n";
  f.close();
  std::string cmd = "train --dataset " + t::fixture_path() +
                    " --out /tmp/cli_prec --config /tmp/cli_cfg.txt --set epochs=1" + kTinySets;
  // kTinySets also sets epochs=1 and batch_size=25; the explicit --set wins
  REQUIRE(run_cli(cmd) == 0);
  auto log = read_jsonl("/tmp/cli_prec/train_log.jsonl");
  CHECK(log.size() == 2);  // 1 epoch, not the config file's 2
  json manifest = json::parse(slurp("/tmp/cli_prec/manifest.json"));
  CHECK(manifest["config"]["epochs"] == 1);
  CHECK(run_cli("train --dataset " + t::fixture_path() +
                " --out /tmp/cli_badcfg --config /tmp/missing.cfg") == 2);
}
