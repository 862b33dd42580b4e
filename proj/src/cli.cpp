#include "metakkl/cli.hpp"

#include "metakkl/checkpoint.hpp"
#include "metakkl/config.hpp"
#include "metakkl/util.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <sstream>

namespace metakkl::cli {

namespace fs = std::filesystem;
using nlohmann::json;
using nn::MapParams;

namespace {

struct Options {
  std::string config;
  std::string out;
  std::string data;
  std::string checkpoints;
  std::string method;
  std::string experiment;
  std::string strategy;
  std::optional<std::uint64_t> seed;
  std::optional<int> jobs;
  bool pretrain = false;
  std::optional<double> pinn_weight;
  bool first_order = false;
  bool force = false;
  std::optional<double> task_lambda;
  std::string task_x0;
};

class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

config::RunConfig load_config(const Options& o) {
  config::RunConfig rc =
      o.config.empty() ? config::from_json(json::object()) : config::load(o.config);
  if (!o.method.empty()) {
    train::parse_method(o.method);
    rc.doc["training"]["method"] = o.method;
  }
  if (o.pretrain) rc.doc["meta"]["pretrain"] = true;
  if (o.first_order) rc.doc["meta"]["first_order"] = true;
  if (o.pinn_weight) rc.doc["training"]["pinn_weight"] = *o.pinn_weight;
  if (!o.strategy.empty()) {
    adapt::parse_kind(o.strategy);
    rc.doc["adaptation"]["strategy"] = o.strategy;
  }
  const std::uint64_t seed = config::resolve_seed(o.seed, "METAKKL_SEED", rc.seed);
  config::apply_overrides(rc, seed, o.jobs ? *o.jobs : rc.jobs);
  return rc;
}

void write_json(const fs::path& p, const json& j) {
  std::ofstream os(p);
  if (!os) throw std::runtime_error("cannot write " + p.string());
  os << j.dump(2) << '\n';
}

fs::path require_dir(const std::string& dir, const char* flag) {
  if (dir.empty()) throw UsageError(std::string(flag) + " is required");
  fs::create_directories(dir);
  return dir;
}

json task_json(const data::Task& t) {
  return {{"task_id", t.task_id},
          {"lambda", t.lambda},
          {"x0", std::vector<double>(t.x0.data(), t.x0.data() + t.x0.size())}};
}

// -- generate ------------------------------------------------------------------

int cmd_generate(const Options& o, std::ostream& out) {
  const config::RunConfig rc = load_config(o);
  const fs::path dir = require_dir(o.out, "--out");
  const eval::ExperimentConfig& e = rc.experiment;
  const auto tasks = eval::training_tasks(e, rc.seed);
  const auto sets = parallel_map(static_cast<int>(tasks.size()), rc.jobs, [&](int i) {
    const auto& t = tasks[static_cast<size_t>(i)];
    return data::generate_task_dataset(t, data::task_model(t), e.design, e.gen);
  });
  json manifest = {{"config_hash", rc.hash},
                   {"seed", rc.seed},
                   {"dx", 2},
                   {"dz", e.design.dz},
                   {"dy", 1},
                   {"tasks", json::array()}};
  for (const auto& ds : sets) {
    const std::string file = "task_" + std::to_string(ds.task.task_id) + ".csv";
    data::write_task_csv(ds, dir / file);
    json entry = task_json(ds.task);
    entry["file"] = file;
    manifest["tasks"].push_back(entry);
  }
  write_json(dir / "manifest.json", manifest);
  out << "wrote " << sets.size() << " task files to " << dir.string() << '\n';
  return kOk;
}

// -- train ---------------------------------------------------------------------

data::MixedDataset read_dataset(const fs::path& dir) {
  const fs::path mpath = dir / "manifest.json";
  std::ifstream is(mpath);
  if (!is) throw UsageError("missing dataset manifest " + mpath.string());
  const json m = json::parse(is);
  std::vector<data::TaskDataset> sets;
  for (const auto& t : m.at("tasks")) {
    const fs::path f = dir / t.at("file").get<std::string>();
    if (!fs::exists(f)) throw UsageError("missing dataset file " + f.string());
    data::TaskDataset ds =
        data::read_task_csv(f, m.at("dx").get<int>(), m.at("dz").get<int>(), m.at("dy").get<int>());
    ds.task.task_id = t.at("task_id").get<int>();
    ds.task.lambda = t.at("lambda").get<double>();
    const auto x0 = t.at("x0").get<std::vector<double>>();
    ds.task.x0 = Eigen::Map<const Vector>(x0.data(), static_cast<Eigen::Index>(x0.size()));
    sets.push_back(std::move(ds));
  }
  if (sets.empty()) throw UsageError("dataset " + dir.string() + " has no tasks");
  return data::MixedDataset::from(std::move(sets));
}

checkpoint::Checkpoint make_ckpt(const std::string& role, train::Method m,
                                 const MapParams& p, const config::RunConfig& rc,
                                 std::optional<double> alpha = {}) {
  return {role, train::method_name(m), p, alpha, rc.training_hash, rc.seed};
}

int cmd_train(const Options& o, std::ostream& out, std::ostream& err) {
  const config::RunConfig rc = load_config(o);
  if (o.data.empty()) throw UsageError("--data is required");
  const data::MixedDataset ds = read_dataset(o.data);
  const fs::path dir = require_dir(o.out, "--out");
  const eval::ExperimentConfig& e = rc.experiment;
  train::TrainConfig tcfg = e.train;

  std::vector<train::LossRecord> history;
  switch (rc.method) {
    case train::Method::parallel: {
      auto r = train::train_parallel_mixed(ds, tcfg);
      checkpoint::save(make_ckpt("theta", rc.method, r.theta, rc), dir / "theta.ckpt.json");
      checkpoint::save(make_ckpt("eta", rc.method, r.eta, rc), dir / "eta.ckpt.json");
      history = r.history;
      break;
    }
    case train::Method::sequential:
    case train::Method::pinn: {
      auto r = train::train_sequential_mixed(ds, tcfg, e.design);
      checkpoint::save(make_ckpt("theta", rc.method, r.theta, rc), dir / "theta.ckpt.json");
      checkpoint::save(make_ckpt("eta", rc.method, r.eta, rc), dir / "eta.ckpt.json");
      history = r.history;
      break;
    }
    case train::Method::meta: {
      tcfg.method = train::Method::parallel;
      auto base = train::train_parallel_mixed(ds, tcfg);
      std::optional<MapParams> init;
      if (e.meta.pretrain) init = base.eta;
      auto st = train::train_meta(ds, tcfg, e.meta, train::duffing_output_map(), init);
      for (const auto& w : st.warnings) err << "warning: " << w << '\n';
      checkpoint::save(make_ckpt("theta", rc.method, base.theta, rc), dir / "theta.ckpt.json");
      checkpoint::save(make_ckpt("eta", rc.method, st.eta, rc), dir / "eta.ckpt.json");
      checkpoint::save(make_ckpt("meta", rc.method, st.eta, rc, st.alpha),
                       dir / "meta.ckpt.json");
      history = st.history;
      break;
    }
  }
  train::write_history_csv(history, (dir / "history.csv").string());
  out << "trained " << train::method_name(rc.method) << " -> " << dir.string() << '\n';
  return kOk;
}

// -- eval / adapt ----------------------------------------------------------------

checkpoint::Checkpoint load_checked(const fs::path& p, const config::RunConfig& rc,
                                    bool force) {
  if (!fs::exists(p)) throw UsageError("missing checkpoint " + p.string());
  checkpoint::Checkpoint c = checkpoint::load(p);
  if (c.config_hash != rc.training_hash && !force)
    throw UsageError("checkpoint " + p.string() + " was produced with config hash " +
                     c.config_hash + ", current config hashes to " + rc.training_hash +
                     " (use --force to override)");
  return c;
}

/// Loads <dir>/<method>/ or, failing that, <dir>/ itself.
eval::TrainedMethod load_method(const fs::path& root, train::Method m,
                                const config::RunConfig& rc, bool force,
                                std::uint64_t* seed) {
  fs::path dir = root / train::method_name(m);
  if (!fs::exists(dir / "theta.ckpt.json")) dir = root;
  eval::TrainedMethod tm;
  tm.method = m;
  const auto theta = load_checked(dir / "theta.ckpt.json", rc, force);
  const auto eta = load_checked(dir / "eta.ckpt.json", rc, force);
  if (theta.method != train::method_name(m) || eta.method != train::method_name(m))
    throw UsageError("checkpoints in " + dir.string() + " are not for method " +
                     train::method_name(m));
  tm.theta = theta.params;
  tm.eta = eta.params;
  *seed = theta.seed;
  if (m == train::Method::meta) {
    const fs::path mp = dir / "meta.ckpt.json";
    if (!fs::exists(mp)) throw UsageError("meta method requires " + mp.string());
    const auto meta = load_checked(mp, rc, force);
    if (!meta.alpha) throw UsageError(mp.string() + " carries no adaptation rate");
    train::MetaState st;
    st.eta = meta.params;
    st.alpha = *meta.alpha;
    tm.eta = st.eta;
    tm.meta = st;
  }
  return tm;
}

int cmd_eval(const Options& o, std::ostream& out) {
  const config::RunConfig rc = load_config(o);
  const fs::path dir = require_dir(o.out, "--out");
  const std::string& x = o.experiment;
  if (x != "lambda" && x != "x0" && x != "grid" && x != "sampling")
    throw UsageError("--experiment must be one of lambda, x0, grid, sampling");
  eval::ExperimentConfig e = rc.experiment;

  if (!o.method.empty() && (x == "lambda" || x == "x0")) e.methods = {rc.method};
  std::vector<train::Method> needed = e.methods;
  if (x == "sampling") needed = {train::Method::meta};
  if (x == "grid") needed = {rc.method};

  const bool from_ckpt = !o.checkpoints.empty();
  std::vector<std::pair<std::uint64_t, eval::TrainedMethod>> loaded;
  if (from_ckpt) {
    std::optional<std::uint64_t> seed;
    for (train::Method m : needed) {
      std::uint64_t s = 0;
      loaded.emplace_back(0, load_method(o.checkpoints, m, rc, o.force, &s));
      loaded.back().first = s;
      if (seed && *seed != s && !o.force)
        throw UsageError("checkpoints were trained with different seeds");
      seed = s;
    }
    e.seeds = {*seed};
  }
  eval::Trainer trainer(e, !from_ckpt);
  for (auto& [s, tm] : loaded) trainer.put(s, tm);

  if (x == "grid") {
    const std::uint64_t seed = e.seeds.front();
    eval::error_profile_grid(trainer.get(rc.method, seed), e.grid_resolution, e, seed)
        .write(dir);
    out << "wrote grid.csv to " << dir.string() << '\n';
    return kOk;
  }
  if (x == "sampling" && !from_ckpt)
    throw UsageError("--experiment sampling requires --checkpoints with a meta checkpoint");
  eval::ExperimentReport report = x == "lambda"   ? eval::run_experiment_lambda(e, trainer)
                                  : x == "x0"     ? eval::run_experiment_x0(e, trainer)
                                                  : eval::run_experiment_sampling(e, trainer);
  report.write(dir);
  out << "wrote " << x << " report to " << dir.string() << '\n';
  return kOk;
}

Vector parse_x0(const std::string& s) {
  std::vector<double> v;
  std::stringstream ss(s);
  std::string cell;
  while (std::getline(ss, cell, ',')) {
    try {
      v.push_back(std::stod(cell));
    } catch (const std::exception&) {
      throw UsageError("--task-x0: expected two comma-separated numbers");
    }
  }
  if (v.size() != 2) throw UsageError("--task-x0: expected two comma-separated numbers");
  return Eigen::Map<const Vector>(v.data(), 2);
}

int cmd_adapt(const Options& o, std::ostream& out) {
  const config::RunConfig rc = load_config(o);
  if (o.checkpoints.empty()) throw UsageError("--checkpoints is required");
  const fs::path dir = require_dir(o.out, "--out");
  const eval::ExperimentConfig& e = rc.experiment;
  std::uint64_t ckpt_seed = 0;
  const eval::TrainedMethod meta =
      load_method(o.checkpoints, train::Method::meta, rc, o.force, &ckpt_seed);

  data::Task task{0, o.task_lambda ? *o.task_lambda : e.dist.fixed_lambda,
                  o.task_x0.empty() ? e.dist.fixed_x0 : parse_x0(o.task_x0)};
  if (!(task.lambda > 0)) throw UsageError("--task-lambda must be positive");
  eval::TaskOptions opts;
  opts.seed = derive_seed(rc.seed, 7);
  opts.strategy = rc.strategy;
  eval::TrainedMethod frozen = meta;
  frozen.meta.reset();
  const eval::TaskEvaluation post = eval::evaluate_task(meta, task, e.design, e.eval, opts);
  const eval::TaskEvaluation pre = eval::evaluate_task(frozen, task, e.design, e.eval, opts);

  const MapParams adapted = post.eta_adapted ? *post.eta_adapted : meta.eta;
  checkpoint::save({"eta", "meta", adapted, meta.meta->alpha, rc.training_hash, rc.seed},
                   dir / "adapted.ckpt.json");
  json report = {{"task", task_json(task)},
                 {"strategy", adapt::kind_name(rc.strategy)},
                 {"n_adapt", e.eval.n_adapt},
                 {"tau", post.tau},
                 {"e_bar_t_pre", pre.e_bar_t},
                 {"e_bar_t_post", post.e_bar_t},
                 {"ly_pre", e.eval.n_adapt > 0 ? json(post.ly_pre) : json(nullptr)},
                 {"ly_post", e.eval.n_adapt > 0 ? json(post.ly_post) : json(nullptr)},
                 {"config_hash", rc.hash},
                 {"seed", rc.seed}};
  write_json(dir / "adapt_report.json", report);
  out << "e_bar_t pre " << data::format_double(pre.e_bar_t) << " post "
      << data::format_double(post.e_bar_t) << '\n';
  return kOk;
}

void add_common(CLI::App* cmd, Options& o) {
  cmd->add_option("--config", o.config, "JSON run configuration");
  cmd->add_option("--out", o.out, "Output directory");
  cmd->add_option("--seed", o.seed, "Seed (overrides METAKKL_SEED and the config)");
  cmd->add_option("--jobs", o.jobs, "Worker threads");
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Meta-learned KKL observers for the Duffing oscillator", "metakkl"};
  app.require_subcommand(1);
  Options o;

  auto* gen = app.add_subcommand("generate", "Generate training task datasets");
  add_common(gen, o);

  auto* tr = app.add_subcommand("train", "Train transformation maps");
  add_common(tr, o);
  tr->add_option("--data", o.data, "Dataset directory written by generate");
  tr->add_option("--method", o.method, "parallel|sequential|pinn|meta");
  tr->add_flag("--pretrain", o.pretrain, "Pretrain eta with the parallel method (meta)");
  tr->add_option("--pinn-weight", o.pinn_weight, "Weight of the PDE residual (pinn)");
  tr->add_flag("--first-order", o.first_order, "First-order meta-gradients");

  auto* ev = app.add_subcommand("eval", "Run an evaluation experiment");
  add_common(ev, o);
  ev->add_option("--experiment", o.experiment, "lambda|x0|grid|sampling")->required();
  ev->add_option("--checkpoints", o.checkpoints,
                 "Directory with per-method checkpoint subdirectories; trains in-process "
                 "when omitted");
  ev->add_option("--method", o.method, "Single method to evaluate (required for grid)");
  ev->add_option("--strategy", o.strategy, "Adaptation sampling strategy");
  ev->add_flag("--force", o.force, "Ignore config hash mismatches");

  auto* ad = app.add_subcommand("adapt", "Adapt a meta checkpoint online on one task");
  add_common(ad, o);
  ad->add_option("--checkpoints", o.checkpoints, "Directory with meta checkpoints");
  ad->add_option("--strategy", o.strategy,
                 "minimum|minimum-delayed|window-random|window-random-delayed");
  ad->add_option("--task-lambda", o.task_lambda, "Plant parameter of the task");
  ad->add_option("--task-x0", o.task_x0, "Initial state as 'x1,x2'");
  ad->add_flag("--force", o.force, "Ignore config hash mismatches");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (gen->parsed()) return cmd_generate(o, out);
    if (tr->parsed()) return cmd_train(o, out, err);
    if (ev->parsed()) return cmd_eval(o, out);
    return cmd_adapt(o, out);
  } catch (const train::TrainingError& e) {
    err << "error: " << e.what() << '\n';
    return kNumerical;
  } catch (const ad::NumericalError& e) {
    err << "error: " << e.what() << '\n';
    return kNumerical;
  } catch (const SimulationError& e) {
    err << "error: " << e.what() << '\n';
    return kNumerical;
  } catch (const checkpoint::CheckpointError& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const json::exception& e) {
    err << "error: malformed input: " << e.what() << '\n';
    return kUsage;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kFailure;
  }
}

}  // namespace metakkl::cli
