#pragma once

// Run configuration: INI sections [network], [train], [loss], [finetune],
// [data] and [run]. Unknown sections or keys are rejected.

#include "fsh/finetune.hpp"
#include "fsh/losses.hpp"
#include "fsh/meta_trainer.hpp"
#include "fsh/networks.hpp"

#include <filesystem>
#include <string>

namespace fsh {

struct RunConfig {
  NetworkConfig network;  ///< num_videos 0 means "take M from the dataset"
  MetaTrainConfig train;
  FinetuneConfig finetune;
  std::filesystem::path data_root;
  std::filesystem::path output_dir = "runs/default";
  std::uint64_t seed = 1;
  int line_width = 1;

  RunConfig();
  /// Throws ConfigError; num_videos may still be 0 here.
  void validate() const;
  /// Copies seed and loss weights into the training and fine-tuning blocks.
  void propagate();
  /// Fully resolved INI text; parse(to_ini()) reproduces the config.
  std::string to_ini() const;
  /// First 16 hex digits of SHA-256 over to_ini().
  std::string hash() const;

  static RunConfig parse(const std::string& ini_text);
  static RunConfig load(const std::filesystem::path& path);
};

/// "pyramid_a:0,1,2,3,4:0.15;pyramid_b:0,1,2,3,4:0.025"
PerceptualExtractorSpec parse_perceptual_spec(const std::string& text);
std::string format_perceptual_spec(const PerceptualExtractorSpec& spec);

}  // namespace fsh
