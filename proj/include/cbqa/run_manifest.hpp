#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

namespace cbqa {

inline constexpr std::string_view kToolVersion = "0.1.0";

// Record of one CLI invocation. Holds no timestamps so identical runs write
// identical manifests.
struct RunManifest {
  std::string subcommand;
  nlohmann::ordered_json config = nlohmann::ordered_json::object();
  std::uint64_t seed = 0;
  std::vector<std::pair<std::string, std::filesystem::path>> inputs;
  std::vector<std::pair<std::string, std::filesystem::path>> artifacts;

  // Input entries carry the SHA-256 of each file (of each regular file,
  // sorted by name, for a directory).
  nlohmann::ordered_json to_json() const;
  // Writes the JSON and returns the SHA-256 of the bytes written.
  std::string write(const std::filesystem::path& path) const;
};

// Sidecar path "<artifact>.manifest.json".
std::filesystem::path manifest_path_for(const std::filesystem::path& artifact);

}  // namespace cbqa
