#include "fsh/finetune.hpp"

#include "fsh/checkpoint.hpp"
#include "fsh/errors.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>
#include <random>

namespace fsh {

void FinetuneSet::validate(int resolution) const {
  if (frames.empty()) throw ContractError("fine-tune set is empty");
  for (const auto& f : frames) {
    if (f.image.height != resolution || f.image.width != resolution || !f.image.same_shape(f.landmark_image))
      throw ContractError("fine-tune frame resolution does not match the model (" + std::to_string(resolution) + ")");
  }
}

void FinetuneConfig::validate() const {
  if (epochs < 0) throw ConfigError("epochs must be >= 0");
  if (!std::isfinite(lr_g) || lr_g < 0 || !std::isfinite(lr_d) || lr_d < 0)
    throw ConfigError("fine-tune learning rates must be finite and >= 0");
  if (d_steps_per_g < 1) throw ConfigError("d_steps_per_g must be >= 1");
  if (max_batch < 1) throw ConfigError("fine-tune batch size must be >= 1");
  weights.validate();
}

VectorX<float> estimate_embedding(Embedder<float>& embedder, const FinetuneSet& set) {
  if (set.frames.empty()) throw ContractError("estimate_embedding: empty fine-tune set");
  std::vector<VectorX<float>> all;
  all.reserve(set.frames.size());
  for (const auto& f : set.frames) all.push_back(embed_frame(embedder, f.image, f.landmark_image));
  return average_embeddings(all);
}

namespace {

VectorX<float> project(Generator<float>& g, const VectorX<float>& e) {
  Tape<float> tape;
  Pass<float> frozen{tape};
  return g.project(frozen, tape.constant(e, Shape{1, 1, 1})).value().col(0);
}

}  // namespace

PersonalizedModel init_personalized(const MetaTrainState& meta, const VectorX<float>& e_new, const std::string& source) {
  const int n = meta.config.embedding_dim;
  if (e_new.size() != n)
    throw ContractError("init_personalized: embedding length " + std::to_string(e_new.size()) + " != N = " +
                        std::to_string(n));
  if (meta.variant == Variant::FF)
    std::clog << "warning: personalizing an FF checkpoint; w' = w0 + e_new was not trained with the match loss\n";
  const VectorX<float> w0 = meta.discriminator.params().get(Discriminator<float>::kW0).value.col(0);
  PersonalizedModel model(meta.generator, FinetuneDiscriminator<float>(meta.discriminator, w0 + e_new));
  model.generator.params().get(Generator<float>::kProjection).trainable = false;
  model.adaptive.add(PersonalizedModel::kPsiPrime, model.generator.adaptive_size(), 1).value =
      project(model.generator, e_new);
  model.e_new = e_new;
  model.source = source;
  return model;
}

PersonalizedModel run_finetune(const PersonalizedModel& initial, const FinetuneSet& set, const FinetuneConfig& cfg,
                               const ExtractorRegistry<float>& registry) {
  cfg.validate();
  const int res = initial.generator.config().resolution;
  set.validate(res);
  PersonalizedModel model = initial;
  if (cfg.epochs == 0) return model;

  auto& G = model.generator;
  auto& D = model.discriminator;
  for (std::size_t i = 0; i < G.params().size(); ++i)
    if (G.params()[i].name != Generator<float>::kProjection) G.params()[i].trainable = !cfg.freeze_psi;

  Adam<float> opt_g({cfg.lr_g}), opt_psi({cfg.lr_g}), opt_d({cfg.lr_d});
  std::mt19937_64 rng(cfg.seed);
  const int T = set.size();
  const int B = std::min(T, cfg.max_batch);
  std::vector<int> order(static_cast<std::size_t>(T));
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (int start = 0; start < T; start += B) {
      const int n = std::min(B, T - start);
      std::vector<const Image*> xs, ys;
      for (int k = 0; k < n; ++k) {
        xs.push_back(&set.frames[static_cast<std::size_t>(order[static_cast<std::size_t>(start + k)])].image);
        ys.push_back(&set.frames[static_cast<std::size_t>(order[static_cast<std::size_t>(start + k)])].landmark_image);
      }
      const MatrixX<float> xv = stack_images<float>(xs), yv = stack_images<float>(ys);
      const Shape shape{n, res, res};

      G.params().zero_grad();
      model.adaptive.zero_grad();
      {
        Tape<float> tape;
        Pass<float> gp{tape, true, !cfg.freeze_psi};
        Pass<float> frozen{tape, false, false};
        auto x = tape.constant(xv, shape);
        auto y = tape.constant(yv, shape);
        auto psi = tape.parameter(model.adaptive.get(PersonalizedModel::kPsiPrime), true);
        auto fake = G.forward(gp, y, psi);
        Var<float> total = content_loss(x, fake, cfg.weights.content, registry);
        if (!cfg.disable_adv) {
          auto d_fake = D.forward(frozen, fake, y);
          auto d_real = D.forward(frozen, x, y);
          auto fm = feature_matching(d_real.features, d_fake.features, static_cast<float>(cfg.weights.fm));
          total = add(total, adversarial_loss_generator(d_fake.score, fm));
        }
        if (!std::isfinite(total.item())) throw TrainingDiverged("non-finite fine-tune objective", initial.source);
        tape.backward(total);
      }
      opt_g.step(G.params());
      opt_psi.step(model.adaptive);
      ++model.finetune_steps;
      if (cfg.disable_adv) continue;

      MatrixX<float> fakes;
      {
        Tape<float> tape;
        Pass<float> frozen{tape};
        auto psi = tape.constant(model.psi_prime(), Shape{1, 1, 1});
        fakes = G.forward(frozen, tape.constant(yv, shape), psi).value();
      }
      MatrixX<float> frames(3, 2 * xv.cols()), landmarks(3, 2 * xv.cols());
      frames << xv, fakes;
      landmarks << yv, yv;
      const Shape both{2 * n, res, res};
      for (int s = 0; s < cfg.d_steps_per_g; ++s) {
        D.params().zero_grad();
        Tape<float> tape;
        Pass<float> dp{tape, true, true};
        auto out = D.forward(dp, tape.constant(frames, both), tape.constant(landmarks, both));
        auto loss = hinge_loss_discriminator(slice_batch(out.score, 0, n), slice_batch(out.score, n, n));
        if (!std::isfinite(loss.item())) throw TrainingDiverged("non-finite fine-tune hinge loss", initial.source);
        tape.backward(loss);
        opt_d.step(D.params());
      }
    }
  }
  return model;
}

namespace {

std::vector<Image> run_generator(Generator<float>& g, const MatrixX<float>& psi, const std::vector<Image>& track) {
  if (track.empty()) throw ContractError("synthesize: empty landmark track");
  const int res = g.config().resolution;
  std::vector<Image> out;
  out.reserve(track.size());
  for (const auto& y : track) {
    if (y.height != res || y.width != res)
      throw ContractError("synthesize: landmark image is " + std::to_string(y.height) + "x" + std::to_string(y.width) +
                          ", model expects " + std::to_string(res));
    Tape<float> tape;
    Pass<float> frozen{tape};
    auto img = g.forward(frozen, tape.constant(y.pixels, Shape{1, res, res}), tape.constant(psi, Shape{1, 1, 1}));
    out.push_back(to_image<float>(img.value(), res, res));
  }
  return out;
}

}  // namespace

std::vector<Image> synthesize(PersonalizedModel& model, const std::vector<Image>& landmark_track) {
  return run_generator(model.generator, model.psi_prime(), landmark_track);
}

std::vector<Image> synthesize_feed_forward(Generator<float>& generator, const VectorX<float>& embedding,
                                           const std::vector<Image>& landmark_track) {
  return run_generator(generator, project(generator, embedding), landmark_track);
}

void save_personalized(const PersonalizedModel& model, const std::filesystem::path& path) {
  Archive a;
  a.manifest = {{"format_version", kArchiveVersion},
                {"kind", "personalized"},
                {"variant", "personalized"},
                {"step", model.finetune_steps},
                {"network", to_json(model.generator.config())},
                {"adaptive_layout", adaptive_layout_json(model.generator.adaptive_layout())},
                {"adaptive_size", model.generator.adaptive_size()},
                {"source_sha256", model.source},
                {"e_new", std::vector<float>(model.e_new.data(), model.e_new.data() + model.e_new.size())}};
  store_parameters(a, "G", model.generator.params());
  store_parameters(a, "D", model.discriminator.params());
  store_parameters(a, "A", model.adaptive);
  a.save(path);
}

PersonalizedModel load_personalized(const std::filesystem::path& path) {
  const Archive a = Archive::load(path);
  const auto& mf = a.manifest;
  if (mf.value("kind", "") != "personalized") throw DataError(path.string() + " is not a personalized model");
  const NetworkConfig cfg = network_config_from_json(mf.at("network"));
  Discriminator<float> meta_d(cfg, 0);
  PersonalizedModel model(Generator<float>(cfg, 0),
                          FinetuneDiscriminator<float>(meta_d, VectorX<float>::Zero(cfg.embedding_dim)));
  model.generator.params().get(Generator<float>::kProjection).trainable = false;
  model.adaptive.add(PersonalizedModel::kPsiPrime, model.generator.adaptive_size(), 1);
  load_parameters(a, "G", model.generator.params());
  load_parameters(a, "D", model.discriminator.params());
  load_parameters(a, "A", model.adaptive);
  const auto e = mf.at("e_new").get<std::vector<float>>();
  model.e_new = Eigen::Map<const VectorX<float>>(e.data(), static_cast<Eigen::Index>(e.size()));
  model.source = mf.value("source_sha256", "");
  model.finetune_steps = mf.value("step", 0L);
  return model;
}

}  // namespace fsh
