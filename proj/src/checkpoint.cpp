#include "metakkl/checkpoint.hpp"

#include <fstream>

namespace metakkl::checkpoint {

using nlohmann::json;

namespace {

json rows_of(const nn::Matrix& m) {
  json out = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    json row = json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    out.push_back(std::move(row));
  }
  return out;
}

nn::Matrix matrix_of(const json& rows, Eigen::Index n_rows, Eigen::Index n_cols,
                     const std::string& what) {
  if (!rows.is_array() || static_cast<Eigen::Index>(rows.size()) != n_rows)
    throw CheckpointError(what + ": expected " + std::to_string(n_rows) + " rows");
  nn::Matrix m(n_rows, n_cols);
  for (Eigen::Index i = 0; i < n_rows; ++i) {
    const json& row = rows[static_cast<size_t>(i)];
    if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != n_cols)
      throw CheckpointError(what + ": expected " + std::to_string(n_cols) + " columns");
    for (Eigen::Index j = 0; j < n_cols; ++j) m(i, j) = row[static_cast<size_t>(j)].get<double>();
  }
  return m;
}

json vec(const nn::RowVector& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

nn::RowVector row_of(const json& j, Eigen::Index n, const std::string& what) {
  const auto v = j.get<std::vector<double>>();
  if (static_cast<Eigen::Index>(v.size()) != n)
    throw CheckpointError(what + ": expected " + std::to_string(n) + " entries");
  return Eigen::Map<const nn::RowVector>(v.data(), n);
}

json norm_json(const nn::Normalization& n) { return {{"mean", vec(n.mean)}, {"std", vec(n.std)}}; }

nn::Normalization norm_of(const json& j, int dim, const std::string& what) {
  return {row_of(j.at("mean"), dim, what + ".mean"), row_of(j.at("std"), dim, what + ".std")};
}

}  // namespace

json to_json(const Checkpoint& c) {
  const nn::MapParams& p = c.params;
  json weights = json::array(), biases = json::array();
  for (size_t l = 0; l < p.weights.size(); ++l) {
    weights.push_back(rows_of(p.weights[l]));
    biases.push_back(vec(p.biases[l]));
  }
  json doc = {
      {"version", kFormatVersion},
      {"role", c.role},
      {"method", c.method},
      {"spec",
       {{"in_dim", p.spec.in_dim},
        {"out_dim", p.spec.out_dim},
        {"hidden", p.spec.hidden},
        {"activation", "relu"}}},
      {"weights", weights},
      {"biases", biases},
      {"norm_in", norm_json(p.norm_in)},
      {"norm_out", norm_json(p.norm_out)},
      {"alpha", c.alpha ? json(*c.alpha) : json(nullptr)},
      {"config_hash", c.config_hash},
      {"seed", c.seed},
  };
  return doc;
}

Checkpoint from_json(const json& doc) {
  try {
    const int version = doc.at("version").get<int>();
    if (version > kFormatVersion)
      throw CheckpointError("checkpoint version " + std::to_string(version) +
                            " is newer than supported version " +
                            std::to_string(kFormatVersion));
    if (version < 1) throw CheckpointError("invalid checkpoint version");
    Checkpoint c;
    c.role = doc.at("role").get<std::string>();
    c.method = doc.at("method").get<std::string>();
    nn::MlpSpec spec;
    spec.in_dim = doc.at("spec").at("in_dim").get<int>();
    spec.out_dim = doc.at("spec").at("out_dim").get<int>();
    spec.hidden = doc.at("spec").at("hidden").get<std::vector<int>>();
    if (doc.at("spec").at("activation").get<std::string>() != "relu")
      throw CheckpointError("unsupported activation");
    c.params.spec = spec;
    const json& w = doc.at("weights");
    const json& b = doc.at("biases");
    const auto layers = static_cast<size_t>(spec.layer_count());
    if (w.size() != layers || b.size() != layers)
      throw CheckpointError("layer count does not match spec");
    int fan_in = spec.in_dim;
    for (size_t l = 0; l < layers; ++l) {
      const int out = l + 1 < layers ? spec.hidden[l] : spec.out_dim;
      const std::string tag = "layer " + std::to_string(l);
      c.params.weights.push_back(matrix_of(w[l], out, fan_in, tag + " weights"));
      c.params.biases.push_back(row_of(b[l], out, tag + " biases"));
      fan_in = out;
    }
    c.params.norm_in = norm_of(doc.at("norm_in"), spec.in_dim, "norm_in");
    c.params.norm_out = norm_of(doc.at("norm_out"), spec.out_dim, "norm_out");
    if (!doc.at("alpha").is_null()) c.alpha = doc.at("alpha").get<double>();
    c.config_hash = doc.at("config_hash").get<std::string>();
    c.seed = doc.at("seed").get<std::uint64_t>();
    return c;
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("malformed checkpoint: ") + e.what());
  }
}

void save(const Checkpoint& ckpt, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw CheckpointError("cannot write " + path.string());
  os << to_json(ckpt).dump(1) << '\n';
  if (!os) throw CheckpointError("failed writing " + path.string());
}

Checkpoint load(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw CheckpointError("cannot read " + path.string());
  try {
    return from_json(json::parse(is));
  } catch (const json::parse_error& e) {
    throw CheckpointError(path.string() + ": " + e.what());
  }
}

}  // namespace metakkl::checkpoint
