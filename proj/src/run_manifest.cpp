#include "cbqa/run_manifest.hpp"

#include <algorithm>
#include <fstream>

#include "cbqa/digest.hpp"
#include "cbqa/error.hpp"

namespace cbqa {
namespace {

std::string digest_of(const std::filesystem::path& path) {
  if (!std::filesystem::is_directory(path)) return sha256_file(path);
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::recursive_directory_iterator(path))
    if (entry.is_regular_file()) files.push_back(entry.path());
  std::sort(files.begin(), files.end());
  std::string listing;
  for (const auto& f : files)
    listing += std::filesystem::relative(f, path).generic_string() + " " + sha256_file(f) + "\n";
  return sha256_hex(listing);
}

}  // namespace

nlohmann::ordered_json RunManifest::to_json() const {
  nlohmann::ordered_json j;
  j["tool"] = "cbqa";
  j["version"] = kToolVersion;
  j["subcommand"] = subcommand;
  j["seed"] = seed;
  j["config"] = config;
  j["inputs"] = nlohmann::ordered_json::array();
  for (const auto& [role, path] : inputs)
    j["inputs"].push_back({{"role", role}, {"path", path.generic_string()}, {"sha256", digest_of(path)}});
  j["artifacts"] = nlohmann::ordered_json::array();
  for (const auto& [role, path] : artifacts) j["artifacts"].push_back({{"role", role}, {"path", path.generic_string()}});
  return j;
}

std::string RunManifest::write(const std::filesystem::path& path) const {
  const std::string text = to_json().dump(2) + "\n";
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write manifest " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
  return sha256_hex(text);
}

std::filesystem::path manifest_path_for(const std::filesystem::path& artifact) {
  std::filesystem::path p = artifact;
  if (p.filename().empty()) p = p.parent_path();
  return p.string() + ".manifest.json";
}

}  // namespace cbqa
