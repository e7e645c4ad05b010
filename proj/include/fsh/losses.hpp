#pragma once

#include "fsh/autograd.hpp"
#include "fsh/image.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

namespace fsh {

/// One perceptual term: L1 between the listed activations of an extractor.
struct PerceptualEntry {
  std::string extractor;
  std::vector<int> layers;
  double weight = 0.0;
  bool operator==(const PerceptualEntry&) const = default;
};

struct PerceptualExtractorSpec {
  std::vector<PerceptualEntry> entries;

  /// Throws ConfigError on negative/non-finite weights or an empty spec.
  void validate() const;
  /// Two frozen random conv pyramids standing in for classification and
  /// face-recognition perceptual networks, at their usual relative weights.
  static PerceptualExtractorSpec desk_default();
  bool operator==(const PerceptualExtractorSpec&) const = default;
};

struct LossWeights {
  double fm = 10.0;   ///< feature matching
  double mch = 10.0;  ///< embedding match
  PerceptualExtractorSpec content = PerceptualExtractorSpec::desk_default();
  void validate() const;
};

/// Maps an image batch (3 x B*H*W) to a list of activation tensors.
template <typename Scalar>
class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;
  virtual std::vector<Var<Scalar>> activations(const Var<Scalar>& images) = 0;
  virtual int num_layers() const = 0;
};

/// The raw image as its only layer.
template <typename Scalar>
class IdentityExtractor final : public FeatureExtractor<Scalar> {
 public:
  std::vector<Var<Scalar>> activations(const Var<Scalar>& images) override { return {images}; }
  int num_layers() const override { return 1; }
};

/// Frozen conv3x3+ReLU pyramid with fixed-seed He initialization; layer k
/// is the activation after the k-th convolution, with 2x average pooling
/// between layers.
template <typename Scalar>
class RandomPyramidExtractor final : public FeatureExtractor<Scalar> {
 public:
  RandomPyramidExtractor(std::uint64_t seed, int layers = 5, int base_channels = 16, int max_channels = 64);

  /// Loads weights from `<cache_dir>/<id>.bin` if present, otherwise builds
  /// them from `seed` and writes the file. An empty cache_dir skips caching.
  static std::shared_ptr<RandomPyramidExtractor> load_or_create(const std::string& id, std::uint64_t seed,
                                                                const std::filesystem::path& cache_dir);

  std::vector<Var<Scalar>> activations(const Var<Scalar>& images) override;
  int num_layers() const override { return static_cast<int>(weights_.size()); }

 private:
  RandomPyramidExtractor() = default;
  std::vector<MatrixX<Scalar>> weights_;
};

template <typename Scalar>
class ExtractorRegistry {
 public:
  void add(const std::string& id, std::shared_ptr<FeatureExtractor<Scalar>> extractor);
  /// Throws ConfigError naming `id` when it is not registered.
  FeatureExtractor<Scalar>& get(const std::string& id) const;
  bool contains(const std::string& id) const { return extractors_.count(id) != 0; }

  /// "pixels", "pyramid_a" and "pyramid_b"; pyramid weights are cached under
  /// $FSH_CACHE when that variable is set.
  static ExtractorRegistry standard();
  /// Ids provided by standard(), available without building the extractors.
  static const std::vector<std::string>& standard_ids();

 private:
  std::map<std::string, std::shared_ptr<FeatureExtractor<Scalar>>> extractors_;
};

// ---------------------------------------------------------------------------
// Differentiable objectives. Scores are 1 x B; batch terms are averaged.

/// Sum over entries of weight * sum over layers of mean |phi(real) - phi(fake)|.
template <typename Scalar>
Var<Scalar> content_loss(const Var<Scalar>& real, const Var<Scalar>& fake, const PerceptualExtractorSpec& spec,
                         const ExtractorRegistry<Scalar>& registry);

/// w_fm * sum over blocks of mean |real - fake|.
template <typename Scalar>
Var<Scalar> feature_matching(const std::vector<Var<Scalar>>& real_features,
                             const std::vector<Var<Scalar>>& fake_features, Scalar w_fm);

/// -mean(score_fake) + fm_term.
template <typename Scalar>
Var<Scalar> adversarial_loss_generator(const Var<Scalar>& score_fake, const Var<Scalar>& fm_term);

/// w_mch * mean over support frames of mean |E(x(s_k), y(s_k)) - W_i|;
/// both arguments are N x K with matching columns.
template <typename Scalar>
Var<Scalar> match_loss(const Var<Scalar>& support_embeddings, const Var<Scalar>& target_columns, Scalar w_mch);

/// mean max(0, 1 + fake) + mean max(0, 1 - real).
template <typename Scalar>
Var<Scalar> hinge_loss_discriminator(const Var<Scalar>& score_real, const Var<Scalar>& score_fake);

template <typename Scalar>
Var<Scalar> total_meta_objective(const Var<Scalar>& content, const Var<Scalar>& adversarial,
                                 const Var<Scalar>& match);

// ---------------------------------------------------------------------------
// Plain-value forms.

inline double adversarial_loss_generator(double score_fake, double fm_term) { return -score_fake + fm_term; }
double hinge_loss_discriminator(double score_real, double score_fake);
inline double total_meta_objective(double content, double adversarial, double match) {
  return content + adversarial + match;
}
double feature_matching(const std::vector<Eigen::MatrixXd>& real_features,
                        const std::vector<Eigen::MatrixXd>& fake_features, double w_fm);
double match_loss(const std::vector<Eigen::VectorXd>& support_embeddings, const Eigen::VectorXd& w_i, double w_mch);
double content_loss(const Image& real, const Image& fake, const PerceptualExtractorSpec& spec,
                    const ExtractorRegistry<double>& registry);

}  // namespace fsh
