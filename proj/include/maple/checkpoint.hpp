// Versioned parameter container: a JSON header (config, config hash, tensor
// table) followed by raw little-endian float32 payloads.
#pragma once

#include "maple/autodiff.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace maple::checkpoint {

inline constexpr std::uint32_t kFormatVersion = 1;

/// FNV-1a 64 of the compact JSON dump, as 16 hex digits. nlohmann::json
/// objects keep their keys sorted, so the dump is canonical.
std::string config_hash(const nlohmann::json& config);

/// FNV-1a 64 of a file's bytes, as 16 hex digits.
std::string file_hash(const std::filesystem::path& path);

struct Checkpoint {
  nlohmann::json config;
  std::string config_hash;
  nlohmann::json metadata;
  std::map<std::string, ParamStore> stores;  // e.g. "backbone", "maple"

  const ParamStore& store(const std::string& name) const;
  bool has_store(const std::string& name) const { return stores.count(name) != 0; }
};

using NamedStore = std::pair<std::string, const ParamStore*>;

void save_checkpoint(const std::filesystem::path& path, const nlohmann::json& config,
                     const std::vector<NamedStore>& stores, const nlohmann::json& metadata = nlohmann::json::object());

/// Throws std::runtime_error on a malformed file, when the stored hash does
/// not match the stored config, or when `expected_config` is given and its
/// hash differs from the stored one.
Checkpoint load_checkpoint(const std::filesystem::path& path,
                           const std::optional<nlohmann::json>& expected_config = std::nullopt);

/// Copies every tensor of `from` into the same-named, same-shaped entry of `to`.
void restore(const ParamStore& from, ParamStore& to);

}  // namespace maple::checkpoint
