#include "fsh/checkpoint.hpp"
#include "fsh/errors.hpp"
#include "fsh/finetune.hpp"
#include "fsh/toy.hpp"

#include <doctest.h>

#include <filesystem>
#include <iostream>
#include <random>
#include <sstream>

using namespace fsh;
namespace fs = std::filesystem;

namespace {

NetworkConfig tiny() {
  NetworkConfig c;
  c.resolution = 16;
  c.min_channels = 4;
  c.max_channels = 8;
  c.embedding_dim = 8;
  c.num_videos = 3;
  c.down_blocks = 2;
  c.bottleneck_blocks = 1;
  c.up_blocks = 2;
  c.attention_down = {8};
  c.attention_up = {8};
  return c;
}

const Dataset& toy() {
  static const Dataset ds = make_toy_dataset({.identities = 3, .frames = 6, .resolution = 16});
  return ds;
}

const Dataset& held_out() {
  static const Dataset ds = make_toy_dataset({.identities = 1, .frames = 12, .resolution = 16, .first_identity = 50});
  return ds;
}

const ExtractorRegistry<float>& registry() {
  static const auto r = ExtractorRegistry<float>::standard();
  return r;
}

// A briefly meta-trained state so that attention gates and W are non-trivial.
const MetaTrainState& meta() {
  static const MetaTrainState s = [] {
    MetaTrainState st(tiny(), 3);
    MetaTrainConfig cfg;
    cfg.K = 2;
    cfg.lr_eg = 1e-3;
    cfg.lr_d = 1e-3;
    for (int i = 0; i < 5; ++i) {
      std::vector<Episode> eps = {sample_episode(toy(), 2, st.rng), sample_episode(toy(), 2, st.rng)};
      meta_train_step(st, eps, toy(), cfg, registry());
    }
    return st;
  }();
  return s;
}

FinetuneSet first_frames(int t) {
  FinetuneSet set;
  for (int i = 0; i < t; ++i) set.frames.push_back(held_out()[0].frames[static_cast<std::size_t>(i)]);
  return set;
}

std::vector<Image> random_landmark_images(int n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.1f, 0.9f);
  std::vector<Image> out;
  for (int k = 0; k < n; ++k) {
    LandmarkSet lm;
    for (int i = 0; i < static_cast<int>(lm.points.rows()); ++i) {
      lm.points(i, 0) = u(rng);
      lm.points(i, 1) = u(rng);
    }
    out.push_back(rasterize_landmarks(lm, ConnectivitySpec::ibug68(), 16, 16));
  }
  return out;
}

FinetuneConfig short_run(int epochs = 2) {
  FinetuneConfig cfg;
  cfg.epochs = epochs;
  cfg.lr_g = 1e-3;
  cfg.lr_d = 1e-3;
  return cfg;
}

bool same_params(const ParameterSet<float>& a, const ParameterSet<float>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i].value != b[i].value) return false;
  return true;
}

bool same_model(const PersonalizedModel& a, const PersonalizedModel& b) {
  return same_params(a.generator.params(), b.generator.params()) && same_params(a.adaptive, b.adaptive) &&
         same_params(a.discriminator.params(), b.discriminator.params()) && a.e_new == b.e_new;
}

}  // namespace

TEST_SUITE("finetune") {
  TEST_CASE("embedding estimate is the mean of per-frame embeddings") {
    auto m = meta();
    const auto one = first_frames(1);
    const auto& f = one.frames[0];
    CHECK(estimate_embedding(m.embedder, one) == embed_frame(m.embedder, f.image, f.landmark_image));
    FinetuneSet dup;
    for (int i = 0; i < 4; ++i) dup.frames.push_back(f);
    CHECK((estimate_embedding(m.embedder, dup) - estimate_embedding(m.embedder, one)).cwiseAbs().maxCoeff() <= 1e-6f);
    const auto two = first_frames(2);
    const VectorX<float> expected = 0.5f * (embed_frame(m.embedder, two.frames[0].image, two.frames[0].landmark_image) +
                                            embed_frame(m.embedder, two.frames[1].image, two.frames[1].landmark_image));
    CHECK((estimate_embedding(m.embedder, two) - expected).cwiseAbs().maxCoeff() <= 1e-6f);
    CHECK_THROWS_AS(estimate_embedding(m.embedder, FinetuneSet{}), ContractError);
  }

  TEST_CASE("generator initialization identity over random landmark images") {
    auto m = meta();
    const auto e = estimate_embedding(m.embedder, first_frames(4));
    auto model = init_personalized(m, e);
    const auto track = random_landmark_images(10, 3);
    const auto personalized = synthesize(model, track);
    const auto feed_forward = synthesize_feed_forward(m.generator, e, track);
    REQUIRE(personalized.size() == 10);
    for (std::size_t k = 0; k < track.size(); ++k)
      CHECK((personalized[k].pixels - feed_forward[k].pixels).cwiseAbs().maxCoeff() <= 1e-6f);
  }

  TEST_CASE("discriminator initialization identity for training identities") {
    auto m = meta();
    auto& w = m.discriminator.params().get(Discriminator<float>::kW).value;
    for (int i = 0; i < 3; ++i) {
      auto model = init_personalized(m, w.col(i));
      for (const auto& f : toy()[i].frames) {
        const float meta_score = discriminate(m.discriminator, f.image, f.landmark_image, i).first;
        CHECK(discriminate_finetune(model.discriminator, f.image, f.landmark_image).first == meta_score);
      }
    }
  }

  TEST_CASE("zero embedding initializes psi' = 0 and w' = w0") {
    const auto& m = meta();
    auto model = init_personalized(m, VectorX<float>::Zero(8));
    CHECK(model.psi_prime().isZero());
    CHECK(model.discriminator.params().get(FinetuneDiscriminator<float>::kWPrime).value ==
          m.discriminator.params().get(Discriminator<float>::kW0).value);
    CHECK_FALSE(model.generator.params().get(Generator<float>::kProjection).trainable);
    CHECK_THROWS_AS(init_personalized(m, VectorX<float>::Zero(5)), ContractError);
  }

  TEST_CASE("FF checkpoints are accepted with a warning") {
    MetaTrainState ff = meta();
    ff.variant = Variant::FF;
    std::ostringstream captured;
    auto* old = std::clog.rdbuf(captured.rdbuf());
    CHECK_NOTHROW(init_personalized(ff, VectorX<float>::Zero(8)));
    std::clog.rdbuf(old);
    CHECK(captured.str().find("warning") != std::string::npos);
  }

  TEST_CASE("zero epochs leave the model bitwise unchanged") {
    auto m = meta();
    const auto model = init_personalized(m, estimate_embedding(m.embedder, first_frames(4)));
    const auto out = run_finetune(model, first_frames(4), short_run(0), registry());
    CHECK(same_model(model, out));
    CHECK(out.finetune_steps == 0);
  }

  TEST_CASE("fine-tuning updates psi, psi' and the discriminator without touching the input") {
    auto m = meta();
    const auto model = init_personalized(m, estimate_embedding(m.embedder, first_frames(4)));
    const PersonalizedModel copy = model;
    const auto out = run_finetune(model, first_frames(4), short_run(2), registry());
    CHECK(same_model(model, copy));
    CHECK_FALSE(same_params(out.generator.params(), model.generator.params()));
    CHECK(out.psi_prime() != model.psi_prime());
    CHECK_FALSE(same_params(out.discriminator.params(), model.discriminator.params()));
    CHECK(out.generator.params().get(Generator<float>::kProjection).value ==
          model.generator.params().get(Generator<float>::kProjection).value);
    CHECK(out.finetune_steps == 2);
  }

  TEST_CASE("disable_adv leaves the discriminator untouched") {
    auto m = meta();
    const auto model = init_personalized(m, estimate_embedding(m.embedder, first_frames(4)));
    auto cfg = short_run(3);
    cfg.disable_adv = true;
    const auto out = run_finetune(model, first_frames(4), cfg, registry());
    CHECK(same_params(out.discriminator.params(), model.discriminator.params()));
    CHECK_FALSE(same_params(out.generator.params(), model.generator.params()));
  }

  TEST_CASE("freeze_psi updates only psi'") {
    auto m = meta();
    const auto model = init_personalized(m, estimate_embedding(m.embedder, first_frames(4)));
    auto cfg = short_run(2);
    cfg.freeze_psi = true;
    const auto out = run_finetune(model, first_frames(4), cfg, registry());
    CHECK(same_params(out.generator.params(), model.generator.params()));
    CHECK(out.psi_prime() != model.psi_prime());
  }

  TEST_CASE("T need not equal K") {
    auto m = meta();
    for (int t : {1, 3, 11}) {
      const auto set = first_frames(t);
      const auto model = init_personalized(m, estimate_embedding(m.embedder, set));
      const auto out = run_finetune(model, set, short_run(1), registry());
      // min(T, 8) frames per batch: one step per epoch below 9 frames, two at 11.
      CHECK(out.finetune_steps == (t > 8 ? 2 : 1));
    }
  }

  TEST_CASE("fine-tuning is deterministic and lowers the fit error") {
    auto m = meta();
    const auto set = first_frames(4);
    const auto model = init_personalized(m, estimate_embedding(m.embedder, set));
    auto cfg = short_run(30);
    cfg.disable_adv = true;
    auto a = run_finetune(model, set, cfg, registry());
    auto b = run_finetune(model, set, cfg, registry());
    CHECK(same_model(a, b));
    std::vector<Image> track;
    for (const auto& f : set.frames) track.push_back(f.landmark_image);
    auto fit = [&](PersonalizedModel& p) {
      const auto out = synthesize(p, track);
      double s = 0;
      for (std::size_t k = 0; k < out.size(); ++k) s += (out[k].pixels - set.frames[k].image.pixels).cwiseAbs().mean();
      return s;
    };
    auto before = model;
    CHECK(fit(a) < fit(before));
  }

  TEST_CASE("non-finite objective aborts with the caller's model intact") {
    auto m = meta();
    auto model = init_personalized(m, estimate_embedding(m.embedder, first_frames(2)), "abc");
    model.adaptive.get(PersonalizedModel::kPsiPrime).value(0, 0) = std::numeric_limits<float>::infinity();
    const PersonalizedModel copy = model;
    try {
      run_finetune(model, first_frames(2), short_run(1), registry());
      FAIL("expected divergence");
    } catch (const TrainingDiverged& e) {
      CHECK(e.last_good_checkpoint == "abc");
    }
    CHECK(same_params(model.generator.params(), copy.generator.params()));
  }

  TEST_CASE("synthesize contracts") {
    auto m = meta();
    auto model = init_personalized(m, estimate_embedding(m.embedder, first_frames(2)));
    const auto y = held_out()[0].frames[0].landmark_image;
    const auto one = synthesize(model, {y});
    REQUIRE(one.size() == 1);
    CHECK(one[0].height == 16);
    CHECK(one[0].pixels.cwiseAbs().maxCoeff() <= 1.0f);
    const auto rep = synthesize(model, {y, y, y});
    CHECK(rep[0] == rep[2]);
    CHECK(rep[0] == one[0]);
    CHECK_THROWS_AS(synthesize(model, {}), ContractError);
    CHECK_THROWS_AS(synthesize(model, {Image(32, 32)}), ContractError);
    FinetuneSet wrong;
    wrong.frames.push_back(make_toy_dataset({.identities = 1, .frames = 1, .resolution = 32})[0].frames[0]);
    CHECK_THROWS_AS(run_finetune(model, wrong, short_run(1), registry()), ContractError);
  }

  TEST_CASE("personalized models round trip and the meta file is never modified") {
    const fs::path dir = fs::temp_directory_path() / "fsh_finetune_test";
    fs::remove_all(dir);
    fs::create_directories(dir);
    save_meta_checkpoint(meta(), dir / "meta.ckpt");
    const auto hash = file_sha256(dir / "meta.ckpt");
    auto loaded = load_meta_checkpoint(dir / "meta.ckpt");
    const auto set = first_frames(3);
    auto model = init_personalized(loaded, estimate_embedding(loaded.embedder, set), hash);
    auto tuned = run_finetune(model, set, short_run(2), registry());
    save_personalized(tuned, dir / "p.ckpt");
    CHECK(file_sha256(dir / "meta.ckpt") == hash);
    auto back = load_personalized(dir / "p.ckpt");
    CHECK(same_model(back, tuned));
    CHECK(back.source == hash);
    CHECK(back.finetune_steps == tuned.finetune_steps);
    const auto track = random_landmark_images(2, 9);
    CHECK(synthesize(back, track)[1] == synthesize(tuned, track)[1]);
    CHECK_THROWS_AS(load_personalized(dir / "meta.ckpt"), DataError);
  }
}
