#pragma once

// Versioned binary checkpoint container: a fixed magic string, a uint64
// little-endian header length, a JSON header (config + parameter manifest),
// then raw little-endian float64 blocks in manifest order. Writes go through
// a temp file and rename so failures never corrupt an existing checkpoint.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "maskplan/adam.hpp"
#include "maskplan/artifact.hpp"

namespace maskplan {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

inline constexpr const char* kDiffusionMagic = "MASKPLAN.DIFF.v1";
inline constexpr const char* kClassifierMagic = "MASKPLAN.CLSF.v1";

inline void save_checkpoint(const std::filesystem::path& path,
                            const std::string& magic,
                            const nlohmann::json& config,
                            const std::vector<NamedParam>& params) {
  nlohmann::json header;
  header["config"] = config;
  stamp_meta(header, config);
  nlohmann::json manifest = nlohmann::json::array();
  for (const auto& p : params) {
    manifest.push_back({{"name", p.name}, {"shape", p.tensor.shape()}});
  }
  header["manifest"] = manifest;
  const std::string header_str = header.dump();

  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("checkpoint: cannot open " + tmp);
    out.write(magic.data(), static_cast<std::streamsize>(magic.size()));
    const std::uint64_t len = header_str.size();
    out.write(reinterpret_cast<const char*>(&len), sizeof len);
    out.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
    for (const auto& p : params) {
      const auto data = p.tensor.data();
      out.write(reinterpret_cast<const char*>(data.data()),
                static_cast<std::streamsize>(data.size() * sizeof(double)));
    }
    if (!out) throw std::runtime_error("checkpoint: write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

struct CheckpointData {
  nlohmann::json header;
  std::vector<std::vector<double>> blocks;  // manifest order
};

inline CheckpointData load_checkpoint(const std::filesystem::path& path,
                                      const std::string& expected_magic) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open " + path.string());
  std::string magic(expected_magic.size(), '\0');
  in.read(magic.data(), static_cast<std::streamsize>(magic.size()));
  if (!in || magic != expected_magic) {
    throw std::runtime_error("checkpoint: bad magic in " + path.string() +
                             " (got '" + magic + "')");
  }
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  std::string header_str(len, '\0');
  in.read(header_str.data(), static_cast<std::streamsize>(len));
  if (!in) throw std::runtime_error("checkpoint: truncated header");
  CheckpointData ck;
  ck.header = nlohmann::json::parse(header_str);
  for (const auto& entry : ck.header.at("manifest")) {
    std::int64_t numel = 1;
    for (auto d : entry.at("shape").get<std::vector<std::int64_t>>()) numel *= d;
    std::vector<double> block(static_cast<std::size_t>(numel));
    in.read(reinterpret_cast<char*>(block.data()),
            static_cast<std::streamsize>(block.size() * sizeof(double)));
    if (!in) {
      throw std::runtime_error("checkpoint: truncated block " +
                               entry.at("name").get<std::string>());
    }
    ck.blocks.push_back(std::move(block));
  }
  return ck;
}

// Copies loaded blocks into live parameters, validating names and shapes.
inline void restore_params(const CheckpointData& ck,
                           std::vector<NamedParam>& params) {
  const auto& manifest = ck.header.at("manifest");
  if (manifest.size() != params.size()) {
    throw std::runtime_error("checkpoint: manifest size mismatch");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (manifest[i].at("name").get<std::string>() != params[i].name) {
      throw std::runtime_error("checkpoint: parameter order mismatch at " +
                               params[i].name);
    }
    auto data = params[i].tensor.mutable_data();
    if (ck.blocks[i].size() != data.size()) {
      throw std::runtime_error("checkpoint: shape mismatch at " + params[i].name);
    }
    std::copy(ck.blocks[i].begin(), ck.blocks[i].end(), data.begin());
  }
}

}  // namespace maskplan
