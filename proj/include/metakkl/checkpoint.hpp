#pragma once

#include "metakkl/nn.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>

namespace metakkl::checkpoint {

inline constexpr int kFormatVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Checkpoint {
  std::string role;    // "theta", "eta" or "meta"
  std::string method;
  nn::MapParams params;
  std::optional<double> alpha;
  std::string config_hash;
  std::uint64_t seed = 0;
};

nlohmann::json to_json(const Checkpoint& ckpt);
/// Rejects documents whose version is newer than kFormatVersion.
Checkpoint from_json(const nlohmann::json& doc);

void save(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load(const std::filesystem::path& path);

}  // namespace metakkl::checkpoint
