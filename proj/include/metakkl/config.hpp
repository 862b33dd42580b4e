#pragma once

#include "metakkl/eval.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

namespace metakkl::config {

/// Parsed run configuration. `doc` is the full document with defaults filled
/// in; `hash` covers its canonical form without the `jobs` entry.
struct RunConfig {
  nlohmann::json doc;
  eval::ExperimentConfig experiment;
  std::uint64_t seed = 0;
  int jobs = 1;  // resolved; 0 in the document selects every processor
  train::Method method = train::Method::parallel;
  adapt::SamplingKind strategy = adapt::SamplingKind::window_random_delayed;
  std::string hash;
  /// Hash of the sections that determine trained artifacts (seed, system,
  /// observer, dataset, training without the method, meta). Checkpoints carry
  /// this one so that evaluation-only changes keep them compatible.
  std::string training_hash;
};

/// Every recognised key with its default value.
nlohmann::json default_document();

/// Merges `user` over the defaults. Unknown keys and invalid values throw
/// ConfigError naming the offending field.
RunConfig from_json(const nlohmann::json& user);
RunConfig load(const std::filesystem::path& path);

/// FNV-1a 64 of the canonical dump, as 16 hex digits.
std::string content_hash(const nlohmann::json& doc);

/// flag > environment variable > config value.
std::uint64_t resolve_seed(const std::optional<std::uint64_t>& flag,
                           const char* env_name, std::uint64_t from_config);

/// Re-derives the typed views after `seed` or `jobs` changed.
void apply_overrides(RunConfig& cfg, std::uint64_t seed, int jobs);

}  // namespace metakkl::config
