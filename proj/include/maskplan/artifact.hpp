#pragma once

// Shared plumbing for artifact files: tool version, config hashing, atomic
// writes. Every JSON artifact embeds {version, config_hash}.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>

#include "json.hpp"

namespace maskplan {

inline constexpr const char* kToolVersion = "0.1.0";

// FNV-1a over a canonical string; stable across builds and platforms.
inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::string config_hash(const nlohmann::json& config) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(fnv1a(config.dump())));
  return std::string(buf);
}

inline void stamp_meta(nlohmann::json& j, const nlohmann::json& config) {
  j["version"] = kToolVersion;
  j["config_hash"] = config_hash(config);
}

// Write-temp-then-rename so a failed write never clobbers a good file.
inline void atomic_write(const std::filesystem::path& path,
                         const std::string& contents) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open for write: " + tmp);
    out.write(contents.data(),
              static_cast<std::streamsize>(contents.size()));
    if (!out) throw std::runtime_error("write failed: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

inline nlohmann::json load_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open: " + path.string());
  nlohmann::json j;
  in >> j;
  return j;
}

}  // namespace maskplan
