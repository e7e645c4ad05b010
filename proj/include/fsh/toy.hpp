#pragma once

#include "fsh/data.hpp"

#include <cstdint>

namespace fsh {

/// Procedural "talking heads": each identity has its own palette and face
/// proportions; frames vary head position, scale, roll, mouth opening and
/// blinking along smooth trajectories. Landmarks follow the iBUG layout.
struct ToyDatasetOptions {
  int identities = 4;
  int videos_per_identity = 1;
  int frames = 32;
  int resolution = 64;
  std::uint64_t seed = 1;
  int first_identity = 0;  ///< offsets identity seeds, for disjoint held-out sets
};

Dataset make_toy_dataset(const ToyDatasetOptions& options,
                         const ConnectivitySpec& connectivity = ConnectivitySpec::ibug68());

}  // namespace fsh
