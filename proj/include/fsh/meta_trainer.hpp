#pragma once

#include "fsh/checkpoint.hpp"
#include "fsh/data.hpp"
#include "fsh/losses.hpp"
#include "fsh/networks.hpp"
#include "fsh/optim.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace fsh {

enum class Variant { FF, FT };

std::string to_string(Variant v);
/// Accepts "ff"/"ft" in any case; throws ConfigError otherwise.
Variant parse_variant(const std::string& text);

struct MetaTrainConfig {
  int K = 8;
  double lr_eg = 5e-5;
  double lr_d = 2e-4;
  int d_steps_per_g = 2;
  int batch_size = 2;
  long max_steps = 2000;
  Variant variant = Variant::FT;
  bool disable_mch = false;
  long ckpt_every = 500;  ///< 0 keeps only the initial and final checkpoints
  std::uint64_t seed = 1;
  LossWeights weights;

  void validate() const;
  /// False for the FF variant and when disable_mch is set.
  bool uses_match_loss() const { return variant == Variant::FT && !disable_mch; }
};

struct MetricsRecord {
  long step = 0;
  double l_cnt = 0, l_adv = 0, l_fm = 0, l_mch = 0, l_dsc = 0;
  double d_real = 0, d_fake = 0;
  double wallclock_s = 0;
};

std::string metrics_csv_header();
std::string metrics_csv_row(const MetricsRecord& m);

/// Every trained tensor plus optimizer moments, counters and the sampler state.
struct MetaTrainState {
  MetaTrainState(const NetworkConfig& config, std::uint64_t seed);

  NetworkConfig config;
  Embedder<float> embedder;
  Generator<float> generator;
  Discriminator<float> discriminator;
  Adam<float> opt_embedder;
  Adam<float> opt_generator;
  Adam<float> opt_discriminator;
  long step = 0;
  std::mt19937_64 rng;
  Variant variant = Variant::FT;
  double wallclock_s = 0;
};

/// One generator step followed by cfg.d_steps_per_g discriminator steps.
/// Throws TrainingDiverged (with an empty checkpoint reference) on a
/// non-finite loss, before the offending update is applied.
MetricsRecord meta_train_step(MetaTrainState& state, const std::vector<Episode>& episodes, const Dataset& dataset,
                              const MetaTrainConfig& cfg, const ExtractorRegistry<float>& registry);

void save_meta_checkpoint(const MetaTrainState& state, const std::filesystem::path& path);
MetaTrainState load_meta_checkpoint(const std::filesystem::path& path);

struct MetaTrainOutput {
  std::filesystem::path directory;  ///< checkpoints and metrics.csv
  std::optional<std::filesystem::path> resume_from;
  bool quiet = true;
};

/// Initializes (or resumes) and trains until state.step == cfg.max_steps.
/// Writes `step_<n>.ckpt` every cfg.ckpt_every steps, `latest.ckpt` and an
/// append-only `metrics.csv` in the output directory.
MetaTrainState run_meta_training(const NetworkConfig& config, const MetaTrainConfig& cfg, const Dataset& dataset,
                                 const MetaTrainOutput& output, const ExtractorRegistry<float>& registry);

/// Mean |G(E(support), y_t) - x_t| over the given episodes, without updating anything.
double reconstruction_l1(MetaTrainState& state, const std::vector<Episode>& episodes, const Dataset& dataset);

}  // namespace fsh
