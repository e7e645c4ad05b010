#include "fsh/meta_trainer.hpp"

#include "fsh/errors.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;

namespace fsh {

std::string to_string(Variant v) { return v == Variant::FF ? "FF" : "FT"; }

Variant parse_variant(const std::string& text) {
  std::string t = text;
  std::transform(t.begin(), t.end(), t.begin(), [](unsigned char c) { return std::tolower(c); });
  if (t == "ff") return Variant::FF;
  if (t == "ft") return Variant::FT;
  throw ConfigError("variant must be ff or ft, got '" + text + "'");
}

void MetaTrainConfig::validate() const {
  if (K < 1) throw ConfigError("K must be >= 1");
  if (!std::isfinite(lr_eg) || lr_eg < 0) throw ConfigError("lr_eg must be finite and >= 0");
  if (!std::isfinite(lr_d) || lr_d < 0) throw ConfigError("lr_d must be finite and >= 0");
  if (d_steps_per_g < 1) throw ConfigError("d_steps_per_g must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (max_steps < 0) throw ConfigError("max_steps must be >= 0");
  if (ckpt_every < 0) throw ConfigError("ckpt_every must be >= 0");
  weights.validate();
}

std::string metrics_csv_header() { return "step,l_cnt,l_adv,l_fm,l_mch,l_dsc,d_real,d_fake,wallclock_s"; }

std::string metrics_csv_row(const MetricsRecord& m) {
  char buf[512];
  std::snprintf(buf, sizeof buf, "%ld,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.3f", m.step, m.l_cnt, m.l_adv, m.l_fm,
                m.l_mch, m.l_dsc, m.d_real, m.d_fake, m.wallclock_s);
  return buf;
}

MetaTrainState::MetaTrainState(const NetworkConfig& cfg, std::uint64_t seed)
    : config(cfg),
      embedder(cfg, seed * 4 + 1),
      generator(cfg, seed * 4 + 2),
      discriminator(cfg, seed * 4 + 3),
      rng(seed * 4 + 4) {}

namespace {

struct EpisodeBatch {
  MatrixX<float> support_frames, support_landmarks;
  MatrixX<float> target_frames, target_landmarks;
  std::vector<int> support_videos, target_videos;
  int batch = 0, shots = 0;
};

EpisodeBatch gather(const std::vector<Episode>& episodes, const Dataset& dataset, int resolution) {
  if (episodes.empty()) throw ContractError("meta_train_step: empty episode batch");
  EpisodeBatch b;
  b.batch = static_cast<int>(episodes.size());
  b.shots = episodes.front().shots();
  std::vector<const Image*> sf, sl, tf, tl;
  for (const auto& ep : episodes) {
    if (ep.shots() != b.shots) throw ContractError("meta_train_step: episodes must share K");
    const auto& seq = dataset[ep.video];
    for (int s : ep.support) {
      sf.push_back(&seq.frames.at(s).image);
      sl.push_back(&seq.frames.at(s).landmark_image);
      b.support_videos.push_back(ep.video);
    }
    tf.push_back(&seq.frames.at(ep.target).image);
    tl.push_back(&seq.frames.at(ep.target).landmark_image);
    b.target_videos.push_back(ep.video);
  }
  if (tf.front()->height != resolution || tf.front()->width != resolution)
    throw ContractError("meta_train_step: dataset resolution does not match the network config");
  b.support_frames = stack_images<float>(sf);
  b.support_landmarks = stack_images<float>(sl);
  b.target_frames = stack_images<float>(tf);
  b.target_landmarks = stack_images<float>(tl);
  return b;
}

void check_finite(double v, const char* what) {
  if (!std::isfinite(v)) throw TrainingDiverged(std::string("non-finite ") + what, "");
}

}  // namespace

MetricsRecord meta_train_step(MetaTrainState& state, const std::vector<Episode>& episodes, const Dataset& dataset,
                              const MetaTrainConfig& cfg, const ExtractorRegistry<float>& registry) {
  const int res = state.config.resolution;
  const auto batch = gather(episodes, dataset, res);
  const int B = batch.batch, K = batch.shots;
  const Shape support_shape{B * K, res, res}, target_shape{B, res, res};
  auto& E = state.embedder;
  auto& G = state.generator;
  auto& D = state.discriminator;
  const bool use_mch = cfg.uses_match_loss();

  MetricsRecord m;
  m.step = state.step + 1;

  // Embedder + generator update.
  E.params().zero_grad();
  G.params().zero_grad();
  D.params().zero_grad();
  {
    Tape<float> tape;
    Pass<float> eg{tape, true, true};
    Pass<float> frozen{tape, false, false};
    auto emb = E.forward(eg, tape.constant(batch.support_frames, support_shape),
                         tape.constant(batch.support_landmarks, support_shape));
    auto e_hat = group_mean_columns(emb, K);
    auto psi = G.project(eg, e_hat);
    auto y = tape.constant(batch.target_landmarks, target_shape);
    auto x = tape.constant(batch.target_frames, target_shape);
    auto fake = G.forward(eg, y, psi);

    auto l_cnt = content_loss(x, fake, cfg.weights.content, registry);
    auto d_fake = D.forward(frozen, fake, y, batch.target_videos);
    auto d_real = D.forward(frozen, x, y, batch.target_videos);
    auto l_fm = feature_matching(d_real.features, d_fake.features, static_cast<float>(cfg.weights.fm));
    auto l_adv = adversarial_loss_generator(d_fake.score, l_fm);
    Var<float> total = add(l_cnt, l_adv);
    if (use_mch) {
      auto w = tape.parameter(D.params().get(Discriminator<float>::kW), true);
      auto l_mch = match_loss(emb, gather_columns(w, batch.support_videos), static_cast<float>(cfg.weights.mch));
      m.l_mch = l_mch.item();
      total = add(total, l_mch);
    }
    m.l_cnt = l_cnt.item();
    m.l_fm = l_fm.item();
    m.l_adv = l_adv.item();
    check_finite(total.item(), "generator objective");
    tape.backward(total);
  }
  state.opt_embedder.set_lr(cfg.lr_eg);
  state.opt_generator.set_lr(cfg.lr_eg);
  state.opt_embedder.step(E.params());
  state.opt_generator.step(G.params());

  // Fresh fakes from the updated embedder and generator; they stay fixed
  // across the discriminator steps below since E and G do not change there.
  MatrixX<float> fakes;
  {
    Tape<float> tape;
    Pass<float> frozen{tape, false, false};
    auto emb = E.forward(frozen, tape.constant(batch.support_frames, support_shape),
                         tape.constant(batch.support_landmarks, support_shape));
    auto psi = G.project(frozen, group_mean_columns(emb, K));
    fakes = G.forward(frozen, tape.constant(batch.target_landmarks, target_shape), psi).value();
  }

  // Discriminator updates on [real; fake] in one batch.
  MatrixX<float> frames(3, 2 * batch.target_frames.cols()), landmarks(3, 2 * batch.target_frames.cols());
  frames << batch.target_frames, fakes;
  landmarks << batch.target_landmarks, batch.target_landmarks;
  std::vector<int> videos = batch.target_videos;
  videos.insert(videos.end(), batch.target_videos.begin(), batch.target_videos.end());
  const Shape both{2 * B, res, res};
  state.opt_discriminator.set_lr(cfg.lr_d);
  for (int s = 0; s < cfg.d_steps_per_g; ++s) {
    // The first step also carries the match-loss gradient left in W.
    if (s > 0) D.params().zero_grad();
    Tape<float> tape;
    Pass<float> dp{tape, true, true};
    auto out = D.forward(dp, tape.constant(frames, both), tape.constant(landmarks, both), videos);
    auto real_score = slice_batch(out.score, 0, B);
    auto fake_score = slice_batch(out.score, B, B);
    auto l_dsc = hinge_loss_discriminator(real_score, fake_score);
    check_finite(l_dsc.item(), "discriminator hinge loss");
    tape.backward(l_dsc);
    state.opt_discriminator.step(D.params());
    m.l_dsc += l_dsc.item() / cfg.d_steps_per_g;
    m.d_real += real_score.value().mean() / cfg.d_steps_per_g;
    m.d_fake += fake_score.value().mean() / cfg.d_steps_per_g;
  }
  ++state.step;
  return m;
}

double reconstruction_l1(MetaTrainState& state, const std::vector<Episode>& episodes, const Dataset& dataset) {
  const int res = state.config.resolution;
  const auto batch = gather(episodes, dataset, res);
  Tape<float> tape;
  Pass<float> frozen{tape, false, false};
  const Shape support_shape{batch.batch * batch.shots, res, res}, target_shape{batch.batch, res, res};
  auto emb = state.embedder.forward(frozen, tape.constant(batch.support_frames, support_shape),
                                    tape.constant(batch.support_landmarks, support_shape));
  auto psi = state.generator.project(frozen, group_mean_columns(emb, batch.shots));
  auto fake = state.generator.forward(frozen, tape.constant(batch.target_landmarks, target_shape), psi);
  return static_cast<double>((fake.value() - batch.target_frames).cwiseAbs().mean());
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

void store_moments(Archive& a, const std::string& prefix, const Adam<float>& opt) {
  for (const auto& [name, mo] : opt.moments()) {
    a.put(prefix + "/" + name + "#m1", mo.first);
    a.put(prefix + "/" + name + "#m2", mo.second);
  }
}

void load_moments(const Archive& a, const std::string& prefix, const ParameterSet<float>& params, long steps,
                  Adam<float>& opt) {
  std::map<std::string, Adam<float>::Moments> moments;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& name = params[i].name;
    const std::string key = prefix + "/" + name + "#m1";
    if (!a.has(key)) continue;
    moments[name] = {a.get(key), a.get(prefix + "/" + name + "#m2")};
  }
  opt.restore(steps, std::move(moments));
}

}  // namespace

void save_meta_checkpoint(const MetaTrainState& state, const fs::path& path) {
  Archive a;
  std::ostringstream rng;
  rng << state.rng;
  a.manifest = {{"format_version", kArchiveVersion},
                {"kind", "meta"},
                {"variant", to_string(state.variant)},
                {"step", state.step},
                {"network", to_json(state.config)},
                {"adaptive_layout", adaptive_layout_json(state.generator.adaptive_layout())},
                {"adaptive_size", state.generator.adaptive_size()},
                {"rng", rng.str()},
                {"wallclock_s", state.wallclock_s},
                {"optimizer_steps",
                 {{"embedder", state.opt_embedder.steps()},
                  {"generator", state.opt_generator.steps()},
                  {"discriminator", state.opt_discriminator.steps()}}}};
  store_parameters(a, "E", state.embedder.params());
  store_parameters(a, "G", state.generator.params());
  store_parameters(a, "D", state.discriminator.params());
  store_moments(a, "adam.E", state.opt_embedder);
  store_moments(a, "adam.G", state.opt_generator);
  store_moments(a, "adam.D", state.opt_discriminator);
  a.save(path);
}

MetaTrainState load_meta_checkpoint(const fs::path& path) {
  const Archive a = Archive::load(path);
  const auto& mf = a.manifest;
  if (mf.value("kind", "") != "meta") throw DataError(path.string() + " is not a meta-training checkpoint");
  MetaTrainState s(network_config_from_json(mf.at("network")), 0);
  load_parameters(a, "E", s.embedder.params());
  load_parameters(a, "G", s.generator.params());
  load_parameters(a, "D", s.discriminator.params());
  const auto& steps = mf.at("optimizer_steps");
  load_moments(a, "adam.E", s.embedder.params(), steps.at("embedder"), s.opt_embedder);
  load_moments(a, "adam.G", s.generator.params(), steps.at("generator"), s.opt_generator);
  load_moments(a, "adam.D", s.discriminator.params(), steps.at("discriminator"), s.opt_discriminator);
  s.step = mf.at("step");
  s.variant = parse_variant(mf.at("variant"));
  s.wallclock_s = mf.value("wallclock_s", 0.0);
  std::istringstream rng(mf.at("rng").get<std::string>());
  rng >> s.rng;
  if (!rng) throw DataError("corrupt sampler state in " + path.string());
  return s;
}

// ---------------------------------------------------------------------------
// Loop

namespace {

std::string step_name(long step) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "step_%08ld.ckpt", step);
  return buf;
}

/// Keeps header + rows with step <= `step`, so a resumed log continues cleanly.
void truncate_metrics(const fs::path& csv, long step) {
  std::ifstream in(csv);
  if (!in) return;
  std::vector<std::string> keep;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (keep.empty()) {
      keep.push_back(line);
      continue;
    }
    if (std::stol(line.substr(0, line.find(','))) <= step) keep.push_back(line);
  }
  in.close();
  std::ofstream out(csv, std::ios::trunc);
  for (const auto& l : keep) out << l << '\n';
}

}  // namespace

MetaTrainState run_meta_training(const NetworkConfig& config, const MetaTrainConfig& cfg, const Dataset& dataset,
                                 const MetaTrainOutput& output, const ExtractorRegistry<float>& registry) {
  cfg.validate();
  config.validate();
  if (dataset.empty()) throw ConfigError("meta-training needs at least one sequence");
  if (config.num_videos != dataset.size())
    throw ConfigError("num_videos (" + std::to_string(config.num_videos) + ") != dataset size (" +
                      std::to_string(dataset.size()) + ")");
  for (const auto& seq : dataset.sequences)
    if (seq.frames.size() < 2) throw ConfigError("sequence '" + seq.name + "' has fewer than 2 frames");

  fs::create_directories(output.directory);
  const fs::path csv = output.directory / "metrics.csv";

  MetaTrainState state = output.resume_from ? load_meta_checkpoint(*output.resume_from)
                                            : MetaTrainState(config, cfg.seed);
  if (output.resume_from) {
    if (!(state.config == config)) throw ConfigError("resume checkpoint was trained with a different network config");
    if (state.variant != cfg.variant) throw ConfigError("resume checkpoint was trained with a different variant");
    truncate_metrics(csv, state.step);
  } else {
    state.variant = cfg.variant;
    std::ofstream(csv, std::ios::trunc) << metrics_csv_header() << '\n';
  }

  auto checkpoint = [&](bool numbered) {
    try {
      if (numbered) save_meta_checkpoint(state, output.directory / step_name(state.step));
      save_meta_checkpoint(state, output.directory / "latest.ckpt");
    } catch (const std::exception& e) {
      throw DataError(std::string("checkpoint write failed: ") + e.what());
    }
  };
  if (!output.resume_from) checkpoint(true);
  fs::path last_good = output.directory / "latest.ckpt";

  const double base_wallclock = state.wallclock_s;
  const auto start = std::chrono::steady_clock::now();
  std::ofstream log(csv, std::ios::app);
  while (state.step < cfg.max_steps) {
    std::vector<Episode> episodes;
    for (int b = 0; b < cfg.batch_size; ++b) episodes.push_back(sample_episode(dataset, cfg.K, state.rng));
    MetricsRecord m;
    try {
      m = meta_train_step(state, episodes, dataset, cfg, registry);
    } catch (const TrainingDiverged& e) {
      throw TrainingDiverged(std::string(e.what()) + " at step " + std::to_string(state.step + 1),
                             last_good.string());
    }
    state.wallclock_s =
        base_wallclock + std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    m.wallclock_s = state.wallclock_s;
    log << metrics_csv_row(m) << '\n';
    log.flush();
    if (!output.quiet && (state.step % 50 == 0 || state.step == cfg.max_steps))
      std::cerr << metrics_csv_row(m) << '\n';
    const bool numbered = cfg.ckpt_every > 0 && state.step % cfg.ckpt_every == 0;
    if (numbered || state.step == cfg.max_steps) {
      checkpoint(numbered);
      last_good = output.directory / "latest.ckpt";
    }
  }
  return state;
}

}  // namespace fsh
