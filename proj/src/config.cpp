#include "metakkl/config.hpp"
#include "metakkl/util.hpp"

#include <cstdio>
#include <cstdlib>
#include <fstream>

namespace metakkl::config {

using nlohmann::json;

json default_document() {
  return {
      {"seed", 0},
      {"jobs", 0},
      {"system", {{"name", "duffing"}}},
      {"observer", {{"epsilon", 1e-6}, {"z_norm_bound", 0.0}, {"safety_factor", 2.0}}},
      {"dataset",
       {{"distribution", "lambda"},
        {"lambda_range", {1.0, 5.0}},
        {"x0_box", {-1.0, 1.0}},
        {"x0_outer_box", {-2.0, 2.0}},
        {"fixed_lambda", 1.0},
        {"fixed_x0", {0.5, 0.5}},
        {"n_train_tasks", 5},
        {"dt", 0.02},
        {"n_steps", 1000},
        {"noise_var_x", 0.0},
        {"noise_var_y", 0.0},
        {"noisy_labels", false}}},
      {"training",
       {{"method", "parallel"},
        {"epochs", 60},
        {"batch_size", 64},
        {"lr", 1e-3},
        {"lr_final_factor", 0.1},
        {"adam", {0.9, 0.999, 1e-8}},
        {"pinn_weight", 1.0},
        {"hidden", {50, 50, 50, 50, 50}}}},
      {"meta",
       {{"n_batch_meta", 4},
        {"n_adapt", 5},
        {"n_adapt_points", 32},
        {"n_query", 128},
        {"iterations", 1000},
        {"alpha_init", 1e-2},
        {"first_order", false},
        {"pretrain", true}}},
      {"adaptation",
       {{"strategy", "window-random-delayed"}, {"window_length", 50.0}, {"n_batch", 32}, {"n_adapt", 5}}},
      {"evaluation",
       {{"horizon", 80.0},
        {"dt", 0.02},
        {"n_val", 50},
        {"n_val_out", 0},
        {"transient", nullptr},
        {"time_mean", "literal"},
        {"noise_var", 0.1},
        {"noisy_pass", true},
        {"grid_resolution", 11},
        {"init_from_theta", true},
        {"methods", {"parallel", "sequential", "meta"}},
        {"seeds", json::array()}}},
  };
}

namespace {

void merge(json& base, const json& user, const std::string& path) {
  if (!user.is_object())
    throw ConfigError((path.empty() ? std::string("config") : path) + ": expected an object");
  for (auto it = user.begin(); it != user.end(); ++it) {
    const std::string key = path.empty() ? it.key() : path + "." + it.key();
    if (!base.contains(it.key())) throw ConfigError("unknown config key '" + key + "'");
    json& slot = base[it.key()];
    if (slot.is_object())
      merge(slot, it.value(), key);
    else
      slot = it.value();
  }
}

template <typename T>
T get(const json& doc, const std::string& section, const std::string& key) {
  try {
    return doc.at(section).at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(section + "." + key + ": invalid value");
  }
}

void require(bool ok, const std::string& field, const std::string& what) {
  if (!ok) throw ConfigError(field + ": " + what);
}

data::Box box_from(const json& doc, const std::string& key) {
  const auto v = get<std::vector<double>>(doc, "dataset", key);
  require(v.size() == 2 && v[0] < v[1], "dataset." + key, "expected [lo, hi] with lo < hi");
  return data::square_box(v[0], v[1]);
}

void build(RunConfig& rc) {
  const json& d = rc.doc;
  try {
    rc.seed = d.at("seed").get<std::uint64_t>();
  } catch (const json::exception&) {
    throw ConfigError("seed: expected a nonnegative integer");
  }
  try {
    rc.jobs = d.at("jobs").get<int>();
  } catch (const json::exception&) {
    throw ConfigError("jobs: expected an integer");
  }
  require(rc.jobs >= 0, "jobs", "must be >= 0 (0 uses every processor)");
  if (rc.jobs == 0) rc.jobs = default_jobs();
  require(get<std::string>(d, "system", "name") == "duffing", "system.name",
          "only 'duffing' is supported");

  eval::ExperimentConfig& e = rc.experiment;
  e = eval::ExperimentConfig{};

  BackwardSamplingConfig bs;
  bs.epsilon = get<double>(d, "observer", "epsilon");
  bs.z_norm_bound = get<double>(d, "observer", "z_norm_bound");
  bs.safety_factor = get<double>(d, "observer", "safety_factor");
  require(bs.epsilon > 0, "observer.epsilon", "must be positive");
  require(bs.safety_factor > 0, "observer.safety_factor", "must be positive");

  const auto dist = get<std::string>(d, "dataset", "distribution");
  require(dist == "lambda" || dist == "x0", "dataset.distribution",
          "expected 'lambda' or 'x0'");
  e.dist.kind = dist == "lambda" ? data::DistributionKind::lambda_variation
                                 : data::DistributionKind::x0_variation;
  const auto lr = get<std::vector<double>>(d, "dataset", "lambda_range");
  require(lr.size() == 2 && lr[0] < lr[1], "dataset.lambda_range",
          "empty range (expected [lo, hi] with lo < hi)");
  require(lr[0] > 0, "dataset.lambda_range", "values must be positive");
  e.dist.lambda_lo = lr[0];
  e.dist.lambda_hi = lr[1];
  e.dist.x0_box = box_from(d, "x0_box");
  e.dist.x0_outer_box = box_from(d, "x0_outer_box");
  require(e.dist.x0_outer_box.lo(0) < e.dist.x0_box.lo(0) &&
              e.dist.x0_outer_box.hi(0) > e.dist.x0_box.hi(0),
          "dataset.x0_outer_box", "must strictly contain x0_box");
  e.dist.fixed_lambda = get<double>(d, "dataset", "fixed_lambda");
  const auto fx = get<std::vector<double>>(d, "dataset", "fixed_x0");
  require(fx.size() == 2, "dataset.fixed_x0", "expected two entries");
  e.dist.fixed_x0 = Eigen::Map<const Vector>(fx.data(), 2);
  e.n_train_tasks = get<int>(d, "dataset", "n_train_tasks");
  require(e.n_train_tasks >= 1, "dataset.n_train_tasks", "must be >= 1");
  e.gen.sampling = bs;
  e.gen.dt = get<double>(d, "dataset", "dt");
  e.gen.n_steps = get<long>(d, "dataset", "n_steps");
  require(e.gen.dt > 0, "dataset.dt", "must be positive");
  require(e.gen.n_steps >= 1, "dataset.n_steps", "must be >= 1");
  e.gen.noise.var_x = get<double>(d, "dataset", "noise_var_x");
  e.gen.noise.var_y = get<double>(d, "dataset", "noise_var_y");
  require(e.gen.noise.var_x >= 0 && e.gen.noise.var_y >= 0, "dataset.noise_var_*",
          "must be nonnegative");
  e.gen.noise.seed = rc.seed;
  e.gen.noisy_labels = get<bool>(d, "dataset", "noisy_labels");

  train::TrainConfig& t = e.train;
  try {
    rc.method = train::parse_method(get<std::string>(d, "training", "method"));
  } catch (const ConfigError&) {
    throw ConfigError("training.method: expected parallel, sequential, pinn or meta");
  }
  t.method = rc.method;
  t.epochs = get<int>(d, "training", "epochs");
  t.batch_size = get<int>(d, "training", "batch_size");
  t.lr = get<double>(d, "training", "lr");
  t.lr_final_factor = get<double>(d, "training", "lr_final_factor");
  const auto adam = get<std::vector<double>>(d, "training", "adam");
  require(adam.size() == 3, "training.adam", "expected [beta1, beta2, eps]");
  t.adam = {adam[0], adam[1], adam[2]};
  t.pinn_weight = get<double>(d, "training", "pinn_weight");
  t.hidden = get<std::vector<int>>(d, "training", "hidden");
  require(t.lr > 0, "training.lr", "must be positive");
  require(t.batch_size >= 1, "training.batch_size", "must be >= 1");
  require(t.epochs >= 0, "training.epochs", "must be >= 0");
  require(t.lr_final_factor > 0, "training.lr_final_factor", "must be positive");
  for (int h : t.hidden) require(h >= 1, "training.hidden", "layer widths must be >= 1");
  t.seed = rc.seed;
  t.jobs = rc.jobs;

  train::MetaConfig& m = e.meta;
  m.n_batch_meta = get<int>(d, "meta", "n_batch_meta");
  m.n_adapt = get<int>(d, "meta", "n_adapt");
  m.n_adapt_points = get<int>(d, "meta", "n_adapt_points");
  m.n_query = get<int>(d, "meta", "n_query");
  m.iterations = get<int>(d, "meta", "iterations");
  m.alpha_init = get<double>(d, "meta", "alpha_init");
  m.first_order = get<bool>(d, "meta", "first_order");
  m.pretrain = get<bool>(d, "meta", "pretrain");
  require(m.n_batch_meta >= 1, "meta.n_batch_meta", "must be >= 1");
  require(m.n_adapt >= 0, "meta.n_adapt", "must be >= 0");
  require(m.n_adapt_points >= 1, "meta.n_adapt_points", "must be >= 1");
  require(m.iterations >= 0, "meta.iterations", "must be >= 0");
  require(m.alpha_init > 0, "meta.alpha_init", "must be positive");

  eval::EvalConfig& v = e.eval;
  try {
    rc.strategy = adapt::parse_kind(get<std::string>(d, "adaptation", "strategy"));
  } catch (const ConfigError&) {
    throw ConfigError("adaptation.strategy: unknown strategy");
  }
  v.strategy = rc.strategy;
  v.window_length = get<double>(d, "adaptation", "window_length");
  v.n_batch = get<int>(d, "adaptation", "n_batch");
  v.n_adapt = get<int>(d, "adaptation", "n_adapt");
  require(v.n_batch >= 1, "adaptation.n_batch", "must be >= 1");
  require(v.n_adapt >= 0, "adaptation.n_adapt", "must be >= 0");
  require(v.window_length > 0, "adaptation.window_length", "must be positive");
  v.horizon = get<double>(d, "evaluation", "horizon");
  v.dt = get<double>(d, "evaluation", "dt");
  require(v.horizon > 0, "evaluation.horizon", "must be positive");
  require(v.dt > 0, "evaluation.dt", "must be positive");
  v.sampling = bs;
  if (!d.at("evaluation").at("transient").is_null())
    v.transient = get<double>(d, "evaluation", "transient");
  const auto tm = get<std::string>(d, "evaluation", "time_mean");
  require(tm == "literal" || tm == "average", "evaluation.time_mean",
          "expected 'literal' or 'average'");
  v.time_mean = tm == "literal" ? eval::TimeMean::literal : eval::TimeMean::average;
  v.init_from_theta = get<bool>(d, "evaluation", "init_from_theta");
  v.jobs = rc.jobs;
  e.n_val = get<int>(d, "evaluation", "n_val");
  e.n_val_out = get<int>(d, "evaluation", "n_val_out");
  require(e.n_val >= 1, "evaluation.n_val", "must be >= 1");
  require(e.n_val_out >= 0, "evaluation.n_val_out", "must be >= 0");
  e.noise_var = get<double>(d, "evaluation", "noise_var");
  e.noisy_pass = get<bool>(d, "evaluation", "noisy_pass");
  e.grid_resolution = get<int>(d, "evaluation", "grid_resolution");
  require(e.grid_resolution >= 1, "evaluation.grid_resolution", "must be >= 1");
  e.methods.clear();
  for (const auto& name : get<std::vector<std::string>>(d, "evaluation", "methods")) {
    try {
      e.methods.push_back(train::parse_method(name));
    } catch (const ConfigError&) {
      throw ConfigError("evaluation.methods: unknown method '" + name + "'");
    }
  }
  e.seeds = get<std::vector<std::uint64_t>>(d, "evaluation", "seeds");
  if (e.seeds.empty()) e.seeds = {rc.seed};
  e.design = default_design(2);

  json hashed = d;
  hashed.erase("jobs");
  rc.hash = content_hash(hashed);
  e.config_hash = rc.hash;
  json trained = {{"seed", d.at("seed")},         {"system", d.at("system")},
                  {"observer", d.at("observer")}, {"dataset", d.at("dataset")},
                  {"training", d.at("training")}, {"meta", d.at("meta")}};
  trained["training"].erase("method");
  rc.training_hash = content_hash(trained);
}

}  // namespace

RunConfig from_json(const json& user) {
  RunConfig rc;
  rc.doc = default_document();
  merge(rc.doc, user, "");
  build(rc);
  return rc;
}

RunConfig load(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config " + path.string());
  json user;
  try {
    user = json::parse(is);
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  return from_json(user);
}

std::string content_hash(const json& doc) {
  const std::string s = doc.dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::uint64_t resolve_seed(const std::optional<std::uint64_t>& flag,
                           const char* env_name, std::uint64_t from_config) {
  if (flag) return *flag;
  if (const char* env = std::getenv(env_name); env && *env) {
    char* end = nullptr;
    const unsigned long long v = std::strtoull(env, &end, 10);
    if (*end != '\0' || env[0] == '-')
      throw ConfigError(std::string(env_name) + ": expected an unsigned integer");
    return v;
  }
  return from_config;
}

void apply_overrides(RunConfig& cfg, std::uint64_t seed, int jobs) {
  if (jobs < 0) throw ConfigError("--jobs must be >= 0");
  cfg.doc["seed"] = seed;
  cfg.doc["jobs"] = jobs;
  build(cfg);
}

}  // namespace metakkl::config
