#pragma once

// Named-tensor archive with a JSON manifest.
//
// Layout (little endian):
//   "FSHCKPT\0" | u32 version | u64 manifest bytes | manifest JSON
//   | u32 tensor count | { u32 name bytes | name | u32 rows | u32 cols | f32 data (column major) }*

#include "fsh/autograd.hpp"
#include "fsh/networks.hpp"

#include <json.hpp>

#include <Eigen/Dense>

#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace fsh {

inline constexpr std::uint32_t kArchiveVersion = 1;

class Archive {
 public:
  nlohmann::json manifest = nlohmann::json::object();

  void put(const std::string& name, Eigen::MatrixXf tensor);
  bool has(const std::string& name) const;
  /// Throws DataError when absent.
  const Eigen::MatrixXf& get(const std::string& name) const;
  const std::vector<std::pair<std::string, Eigen::MatrixXf>>& tensors() const { return tensors_; }

  /// Writes to a temporary sibling and renames over `path`.
  void save(const std::filesystem::path& path) const;
  static Archive load(const std::filesystem::path& path);

 private:
  std::vector<std::pair<std::string, Eigen::MatrixXf>> tensors_;
};

/// Stores values (and spectral-norm vectors) under "<prefix>/<name>".
void store_parameters(Archive& archive, const std::string& prefix, const ParameterSet<float>& params);
/// Restores every parameter of `params` from the archive; shapes must match.
void load_parameters(const Archive& archive, const std::string& prefix, ParameterSet<float>& params);

nlohmann::json to_json(const NetworkConfig& config);
NetworkConfig network_config_from_json(const nlohmann::json& j);
nlohmann::json adaptive_layout_json(const std::vector<AdaptiveSlice>& layout);

std::string sha256_hex(std::string_view bytes);
std::string file_sha256(const std::filesystem::path& path);

}  // namespace fsh
