#include "fsh/losses.hpp"

#include "fsh/errors.hpp"
#include "fsh/networks.hpp"

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <random>

namespace fsh {

void PerceptualExtractorSpec::validate() const {
  if (entries.empty()) throw ConfigError("perceptual spec needs at least one extractor entry");
  for (const auto& e : entries) {
    if (!std::isfinite(e.weight) || e.weight < 0)
      throw ConfigError("perceptual weight for '" + e.extractor + "' must be finite and >= 0");
    if (e.layers.empty()) throw ConfigError("perceptual entry '" + e.extractor + "' lists no layers");
  }
}

PerceptualExtractorSpec PerceptualExtractorSpec::desk_default() {
  return {{{"pyramid_a", {0, 1, 2, 3, 4}, 1.5e-1}, {"pyramid_b", {0, 1, 2, 3, 4}, 2.5e-2}}};
}

void LossWeights::validate() const {
  if (!std::isfinite(fm) || fm < 0) throw ConfigError("fm_weight must be finite and >= 0");
  if (!std::isfinite(mch) || mch < 0) throw ConfigError("mch_weight must be finite and >= 0");
  content.validate();
}

// ---------------------------------------------------------------------------
// Extractors

template <typename Scalar>
RandomPyramidExtractor<Scalar>::RandomPyramidExtractor(std::uint64_t seed, int layers, int base_channels,
                                                       int max_channels) {
  std::mt19937_64 rng(seed);
  int in = 3;
  for (int k = 0; k < layers; ++k) {
    const int out = std::min(base_channels << k, max_channels);
    MatrixX<Scalar> w(out, 9 * in);
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / (9.0 * in)));
    for (Eigen::Index j = 0; j < w.cols(); ++j)
      for (Eigen::Index i = 0; i < w.rows(); ++i) w(i, j) = static_cast<Scalar>(dist(rng));
    weights_.push_back(std::move(w));
    in = out;
  }
}

template <typename Scalar>
std::shared_ptr<RandomPyramidExtractor<Scalar>> RandomPyramidExtractor<Scalar>::load_or_create(
    const std::string& id, std::uint64_t seed, const std::filesystem::path& cache_dir) {
  if (!cache_dir.empty()) {
    const auto file = cache_dir / (id + ".bin");
    std::ifstream in(file, std::ios::binary);
    if (in) {
      std::shared_ptr<RandomPyramidExtractor> ext(new RandomPyramidExtractor());
      std::uint32_t count = 0;
      in.read(reinterpret_cast<char*>(&count), sizeof count);
      for (std::uint32_t k = 0; in && k < count; ++k) {
        std::uint32_t rows = 0, cols = 0;
        in.read(reinterpret_cast<char*>(&rows), sizeof rows);
        in.read(reinterpret_cast<char*>(&cols), sizeof cols);
        Eigen::MatrixXd w(rows, cols);
        in.read(reinterpret_cast<char*>(w.data()), static_cast<std::streamsize>(sizeof(double) * w.size()));
        ext->weights_.push_back(w.cast<Scalar>());
      }
      if (in && count > 0) return ext;
    }
  }
  auto ext = std::make_shared<RandomPyramidExtractor>(seed);
  if (!cache_dir.empty()) {
    std::error_code ec;
    std::filesystem::create_directories(cache_dir, ec);
    std::ofstream out(cache_dir / (id + ".bin"), std::ios::binary);
    const auto count = static_cast<std::uint32_t>(ext->weights_.size());
    out.write(reinterpret_cast<const char*>(&count), sizeof count);
    for (const auto& w : ext->weights_) {
      const auto rows = static_cast<std::uint32_t>(w.rows()), cols = static_cast<std::uint32_t>(w.cols());
      out.write(reinterpret_cast<const char*>(&rows), sizeof rows);
      out.write(reinterpret_cast<const char*>(&cols), sizeof cols);
      Eigen::MatrixXd wd = w.template cast<double>();
      out.write(reinterpret_cast<const char*>(wd.data()), static_cast<std::streamsize>(sizeof(double) * wd.size()));
    }
  }
  return ext;
}

template <typename Scalar>
std::vector<Var<Scalar>> RandomPyramidExtractor<Scalar>::activations(const Var<Scalar>& images) {
  auto& tape = *images.tape();
  std::vector<Var<Scalar>> out;
  Var<Scalar> h = images;
  for (std::size_t k = 0; k < weights_.size(); ++k) {
    if (k > 0 && h.shape().height % 2 == 0 && h.shape().height > 1) h = avg_pool2(h);
    auto w = tape.constant(weights_[k], Shape{static_cast<int>(weights_[k].cols()), 1, 1});
    h = relu(conv2d(h, w, Var<Scalar>{}, 3));
    out.push_back(h);
  }
  return out;
}

template <typename Scalar>
void ExtractorRegistry<Scalar>::add(const std::string& id, std::shared_ptr<FeatureExtractor<Scalar>> extractor) {
  extractors_[id] = std::move(extractor);
}

template <typename Scalar>
FeatureExtractor<Scalar>& ExtractorRegistry<Scalar>::get(const std::string& id) const {
  auto it = extractors_.find(id);
  if (it == extractors_.end()) throw ConfigError("perceptual extractor unavailable: " + id);
  return *it->second;
}

template <typename Scalar>
const std::vector<std::string>& ExtractorRegistry<Scalar>::standard_ids() {
  static const std::vector<std::string> ids = {"pixels", "pyramid_a", "pyramid_b"};
  return ids;
}

template <typename Scalar>
ExtractorRegistry<Scalar> ExtractorRegistry<Scalar>::standard() {
  std::filesystem::path cache;
  if (const char* env = std::getenv("FSH_CACHE"); env && *env) cache = env;
  ExtractorRegistry r;
  r.add("pixels", std::make_shared<IdentityExtractor<Scalar>>());
  r.add("pyramid_a", RandomPyramidExtractor<Scalar>::load_or_create("pyramid_a", 0xA11CE, cache));
  r.add("pyramid_b", RandomPyramidExtractor<Scalar>::load_or_create("pyramid_b", 0xB0B, cache));
  return r;
}

// ---------------------------------------------------------------------------
// Objectives

template <typename Scalar>
Var<Scalar> content_loss(const Var<Scalar>& real, const Var<Scalar>& fake, const PerceptualExtractorSpec& spec,
                         const ExtractorRegistry<Scalar>& registry) {
  spec.validate();
  if (real.value().rows() != fake.value().rows() || !(real.shape() == fake.shape()))
    throw ContractError("content_loss: real and fake shapes differ");
  Var<Scalar> total;
  for (const auto& entry : spec.entries) {
    auto& ext = registry.get(entry.extractor);
    for (int layer : entry.layers)
      if (layer < 0 || layer >= ext.num_layers())
        throw ConfigError("extractor '" + entry.extractor + "' has no layer " + std::to_string(layer));
    const auto real_feats = ext.activations(real);
    const auto fake_feats = ext.activations(fake);
    Var<Scalar> sum;
    for (int layer : entry.layers) {
      auto term = mean_abs_diff(real_feats[layer], fake_feats[layer]);
      sum = sum.valid() ? add(sum, term) : term;
    }
    auto weighted = scale(sum, static_cast<Scalar>(entry.weight));
    total = total.valid() ? add(total, weighted) : weighted;
  }
  return total;
}

template <typename Scalar>
Var<Scalar> feature_matching(const std::vector<Var<Scalar>>& real_features,
                             const std::vector<Var<Scalar>>& fake_features, Scalar w_fm) {
  if (real_features.size() != fake_features.size() || real_features.empty())
    throw ContractError("feature_matching: feature lists are not aligned by block");
  Var<Scalar> sum;
  for (std::size_t k = 0; k < real_features.size(); ++k) {
    auto term = mean_abs_diff(real_features[k], fake_features[k]);
    sum = sum.valid() ? add(sum, term) : term;
  }
  return scale(sum, w_fm);
}

template <typename Scalar>
Var<Scalar> adversarial_loss_generator(const Var<Scalar>& score_fake, const Var<Scalar>& fm_term) {
  return add(scale(mean(score_fake), Scalar(-1)), fm_term);
}

template <typename Scalar>
Var<Scalar> match_loss(const Var<Scalar>& support_embeddings, const Var<Scalar>& target_columns, Scalar w_mch) {
  if (support_embeddings.value().cols() == 0) throw ContractError("match_loss: empty support set");
  return scale(mean_abs_diff(support_embeddings, target_columns), w_mch);
}

template <typename Scalar>
Var<Scalar> hinge_loss_discriminator(const Var<Scalar>& score_real, const Var<Scalar>& score_fake) {
  auto fake_term = mean(relu(add_constant(score_fake, Scalar(1))));
  auto real_term = mean(relu(add_constant(scale(score_real, Scalar(-1)), Scalar(1))));
  return add(fake_term, real_term);
}

template <typename Scalar>
Var<Scalar> total_meta_objective(const Var<Scalar>& content, const Var<Scalar>& adversarial,
                                 const Var<Scalar>& match) {
  return add(add(content, adversarial), match);
}

double hinge_loss_discriminator(double score_real, double score_fake) {
  return std::max(0.0, 1.0 + score_fake) + std::max(0.0, 1.0 - score_real);
}

double feature_matching(const std::vector<Eigen::MatrixXd>& real_features,
                        const std::vector<Eigen::MatrixXd>& fake_features, double w_fm) {
  if (real_features.size() != fake_features.size())
    throw ContractError("feature_matching: feature lists are not aligned by block");
  double sum = 0.0;
  for (std::size_t k = 0; k < real_features.size(); ++k) {
    if (real_features[k].rows() != fake_features[k].rows() || real_features[k].cols() != fake_features[k].cols())
      throw ContractError("feature_matching: block " + std::to_string(k) + " shapes differ");
    sum += (real_features[k] - fake_features[k]).cwiseAbs().mean();
  }
  return w_fm * sum;
}

double match_loss(const std::vector<Eigen::VectorXd>& support_embeddings, const Eigen::VectorXd& w_i, double w_mch) {
  if (support_embeddings.empty()) throw ContractError("match_loss: empty support set");
  double sum = 0.0;
  for (const auto& e : support_embeddings) {
    if (e.size() != w_i.size()) throw ContractError("match_loss: embedding length differs from W_i");
    sum += (e - w_i).cwiseAbs().mean();
  }
  return w_mch * sum / static_cast<double>(support_embeddings.size());
}

double content_loss(const Image& real, const Image& fake, const PerceptualExtractorSpec& spec,
                    const ExtractorRegistry<double>& registry) {
  if (!real.same_shape(fake)) throw ContractError("content_loss: image shapes differ");
  Tape<double> tape;
  Shape s{1, real.height, real.width};
  auto r = tape.constant(real.pixels.cast<double>(), s);
  auto f = tape.constant(fake.pixels.cast<double>(), s);
  return content_loss(r, f, spec, registry).item();
}

#define FSH_INSTANTIATE(S)                                                                              \
  template class RandomPyramidExtractor<S>;                                                             \
  template class ExtractorRegistry<S>;                                                                  \
  template Var<S> content_loss(const Var<S>&, const Var<S>&, const PerceptualExtractorSpec&,            \
                               const ExtractorRegistry<S>&);                                            \
  template Var<S> feature_matching(const std::vector<Var<S>>&, const std::vector<Var<S>>&, S);          \
  template Var<S> adversarial_loss_generator(const Var<S>&, const Var<S>&);                             \
  template Var<S> match_loss(const Var<S>&, const Var<S>&, S);                                          \
  template Var<S> hinge_loss_discriminator(const Var<S>&, const Var<S>&);                               \
  template Var<S> total_meta_objective(const Var<S>&, const Var<S>&, const Var<S>&);

FSH_INSTANTIATE(float)
FSH_INSTANTIATE(double)

#undef FSH_INSTANTIATE

}  // namespace fsh
