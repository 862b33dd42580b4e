#include "metakkl/cli.hpp"

#include <doctest.h>

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result cli(std::vector<std::string> args) {
  args.insert(args.begin(), "metakkl");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = metakkl::cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

struct Workspace {
  fs::path dir;
  fs::path config;

  explicit Workspace(const std::string& name, const nlohmann::json& cfg = {
                                                  {"training", {{"epochs", 2}, {"hidden", {8, 8}}}},
                                                  {"dataset", {{"n_steps", 150}}},
                                                  {"meta", {{"iterations", 3}, {"n_query", 16}, {"n_adapt_points", 8}}},
                                                  {"evaluation", {{"n_val", 3}, {"horizon", 30}}},
                                                  {"adaptation",
                                                   {{"window_length", 5}, {"n_batch", 8},
                                                    {"n_adapt", 2}}}}) {
    dir = fs::temp_directory_path() / ("metakkl_cli_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    config = dir / "config.json";
    std::ofstream(config) << cfg.dump();
  }
  ~Workspace() { fs::remove_all(dir); }

  std::string path(const std::string& rel) const { return (dir / rel).string(); }
};

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("usage errors exit with 2") {
  CHECK(cli({}).code == 2);
  CHECK(cli({"frobnicate"}).code == 2);
  Workspace ws("usage");
  CHECK(cli({"train", "--config", ws.config.string(), "--out", ws.path("t")}).code == 2);
  CHECK(cli({"eval", "--config", ws.config.string(), "--out", ws.path("e")}).code == 2);
  CHECK(cli({"generate", "--config", ws.path("missing.json"), "--out", ws.path("g")}).code == 2);
}

TEST_CASE("invalid config names the field and exits with 2") {
  Workspace ws("badcfg", {{"dataset", {{"lambda_range", {2.0, 2.0}}}}});
  const Result r = cli({"generate", "--config", ws.config.string(), "--out", ws.path("g")});
  CHECK(r.code == 2);
  CHECK(r.err.find("dataset.lambda_range") != std::string::npos);
}

TEST_CASE("generate writes five tasks and is byte-identical on rerun") {
  Workspace ws("gen");
  REQUIRE(cli({"generate", "--config", ws.config.string(), "--out", ws.path("a")}).code == 0);
  REQUIRE(cli({"generate", "--config", ws.config.string(), "--out", ws.path("b")}).code == 0);
  int tasks = 0;
  for (const auto& e : fs::directory_iterator(ws.dir / "a")) {
    const auto name = e.path().filename().string();
    if (name.rfind("task_", 0) == 0) ++tasks;
    CHECK(slurp(e.path()) == slurp(ws.dir / "b" / name));
  }
  CHECK(tasks == 5);
  const auto manifest = nlohmann::json::parse(slurp(ws.dir / "a" / "manifest.json"));
  CHECK(manifest["tasks"].size() == 5);
  CHECK(manifest["dz"] == 5);
}

TEST_CASE("train determinism, pinn weight zero and checkpoints") {
  Workspace ws("train");
  const std::string cfg = ws.config.string();
  REQUIRE(cli({"generate", "--config", cfg, "--out", ws.path("data")}).code == 0);
  auto train = [&](const std::string& out, std::vector<std::string> extra) {
    std::vector<std::string> a{"train", "--config", cfg, "--data", ws.path("data"), "--out",
                               ws.path(out), "--seed", "7"};
    a.insert(a.end(), extra.begin(), extra.end());
    return cli(a).code;
  };
  REQUIRE(train("seq", {"--method", "sequential"}) == 0);
  REQUIRE(train("pinn0", {"--method", "pinn", "--pinn-weight", "0"}) == 0);
  REQUIRE(train("seq2", {"--method", "sequential"}) == 0);
  for (const char* f : {"theta.ckpt.json", "eta.ckpt.json"}) {
    const auto a = nlohmann::json::parse(slurp(ws.dir / "seq" / f));
    const auto b = nlohmann::json::parse(slurp(ws.dir / "pinn0" / f));
    CHECK(a["weights"] == b["weights"]);
    CHECK(a["biases"] == b["biases"]);
    CHECK(slurp(ws.dir / "seq" / f) == slurp(ws.dir / "seq2" / f));
  }
  CHECK(fs::exists(ws.dir / "seq" / "history.csv"));

  REQUIRE(train("meta", {"--method", "meta", "--pretrain"}) == 0);
  const auto meta = nlohmann::json::parse(slurp(ws.dir / "meta" / "meta.ckpt.json"));
  CHECK(meta["alpha"].get<double>() > 0);

  CHECK(train("x", {"--method", "maml"}) == 2);
  CHECK(cli({"train", "--config", cfg, "--data", ws.path("nowhere"), "--out", ws.path("y")}).code ==
        2);
}

TEST_CASE("eval and adapt with checkpoints") {
  Workspace ws("eval");
  const std::string cfg = ws.config.string();
  REQUIRE(cli({"generate", "--config", cfg, "--out", ws.path("data")}).code == 0);
  REQUIRE(cli({"train", "--config", cfg, "--data", ws.path("data"), "--out", ws.path("par"),
               "--method", "parallel"})
              .code == 0);
  const Result no_meta = cli({"eval", "--config", cfg, "--experiment", "sampling",
                              "--checkpoints", ws.path("par"), "--out", ws.path("s")});
  CHECK(no_meta.code == 2);
  CHECK(no_meta.err.find("meta") != std::string::npos);

  REQUIRE(cli({"train", "--config", cfg, "--data", ws.path("data"), "--out", ws.path("meta"),
               "--method", "meta"})
              .code == 0);
  for (const char* strategy : {"minimum", "window-delayed"}) {
    const Result r = cli({"adapt", "--config", cfg, "--checkpoints", ws.path("meta"), "--out",
                          ws.path(std::string("ad_") + strategy), "--strategy", strategy,
                          "--task-lambda", "2.5", "--task-x0", "0.5,0.5"});
    CHECK(r.code == 0);
    CHECK(fs::exists(ws.dir / (std::string("ad_") + strategy) / "adapted.ckpt.json"));
  }
  const Result e1 = cli({"eval", "--config", cfg, "--experiment", "lambda", "--checkpoints",
                         ws.path("meta"), "--out", ws.path("e1"), "--method", "meta"});
  INFO(e1.err);
  REQUIRE(e1.code == 0);
  const Result e2 = cli({"eval", "--config", cfg, "--experiment", "lambda", "--checkpoints",
                         ws.path("meta"), "--out", ws.path("e2"), "--method", "meta"});
  REQUIRE(e2.code == 0);
  CHECK(slurp(ws.dir / "e1" / "results.csv") == slurp(ws.dir / "e2" / "results.csv"));

  // Checkpoints trained under a different configuration.
  Workspace other("eval_other", {{"training", {{"epochs", 3}, {"hidden", {8, 8}}}}});
  const Result mismatch = cli({"eval", "--config", other.config.string(), "--experiment",
                               "lambda", "--checkpoints", ws.path("meta"), "--out",
                               ws.path("e3"), "--method", "meta"});
  CHECK(mismatch.code == 2);
}

TEST_CASE("adapt reports insufficient data with exit 2") {
  Workspace ws("short", {{"training", {{"epochs", 1}, {"hidden", {4}}}},
                         {"dataset", {{"n_steps", 50}}},
                         {"meta", {{"iterations", 1}, {"n_query", 8}, {"n_adapt", 2}, {"n_adapt_points", 4}}},
                         {"evaluation", {{"horizon", 2}}}});
  const std::string cfg = ws.config.string();
  REQUIRE(cli({"generate", "--config", cfg, "--out", ws.path("data")}).code == 0);
  REQUIRE(cli({"train", "--config", cfg, "--data", ws.path("data"), "--out", ws.path("meta"),
               "--method", "meta"})
              .code == 0);
  const Result r = cli({"adapt", "--config", cfg, "--checkpoints", ws.path("meta"), "--out",
                        ws.path("ad"), "--strategy", "minimum-delayed", "--task-lambda", "2"});
  INFO(r.err);
  CHECK(r.code == 2);
  CHECK(r.err.find("requires") != std::string::npos);
}

}  // TEST_SUITE
