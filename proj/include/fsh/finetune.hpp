#pragma once

#include "fsh/data.hpp"
#include "fsh/losses.hpp"
#include "fsh/meta_trainer.hpp"
#include "fsh/networks.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace fsh {

/// T frames of one unseen person.
struct FinetuneSet {
  std::vector<FrameRecord> frames;
  int size() const { return static_cast<int>(frames.size()); }
  /// Throws ContractError when empty or when frames disagree with `resolution`.
  void validate(int resolution) const;
};

struct FinetuneConfig {
  int epochs = 40;
  bool disable_adv = false;  ///< content loss only; the discriminator is never updated
  bool freeze_psi = false;   ///< keep the person-generic generator weights fixed
  double lr_g = 5e-5;
  double lr_d = 2e-4;
  int d_steps_per_g = 2;
  int max_batch = 8;
  std::uint64_t seed = 1;
  LossWeights weights;
  void validate() const;
};

struct PersonalizedModel {
  PersonalizedModel(const Generator<float>& g, const FinetuneDiscriminator<float>& d) : generator(g), discriminator(d) {}

  Generator<float> generator;  ///< psi; the projection P is kept but frozen
  ParameterSet<float> adaptive;  ///< single entry kPsiPrime, L_adapt x 1
  FinetuneDiscriminator<float> discriminator;
  VectorX<float> e_new;
  std::string source;  ///< SHA-256 of the meta checkpoint (empty when built in memory)
  long finetune_steps = 0;

  static constexpr const char* kPsiPrime = "psi_prime";
  const MatrixX<float>& psi_prime() const { return adaptive.get(kPsiPrime).value; }
};

/// Mean of embed_frame over the set.
VectorX<float> estimate_embedding(Embedder<float>& embedder, const FinetuneSet& set);

/// psi' = P e_new, w' = w0 + e_new; psi, theta and b are copied.
/// Models from the FF variant are accepted with a warning on std::clog.
PersonalizedModel init_personalized(const MetaTrainState& meta, const VectorX<float>& e_new,
                                    const std::string& source = {});

/// Alternating generator and discriminator updates over shuffled batches of
/// min(T, max_batch) frames. Returns a new model; `model` is never modified,
/// so a TrainingDiverged leaves the caller holding the pre-finetune state.
PersonalizedModel run_finetune(const PersonalizedModel& model, const FinetuneSet& set, const FinetuneConfig& cfg,
                               const ExtractorRegistry<float>& registry);

/// One generator pass per landmark image.
std::vector<Image> synthesize(PersonalizedModel& model, const std::vector<Image>& landmark_track);

/// The meta generator driven by P e, for comparison with the personalized path.
std::vector<Image> synthesize_feed_forward(Generator<float>& generator, const VectorX<float>& embedding,
                                           const std::vector<Image>& landmark_track);

void save_personalized(const PersonalizedModel& model, const std::filesystem::path& path);
PersonalizedModel load_personalized(const std::filesystem::path& path);

}  // namespace fsh
