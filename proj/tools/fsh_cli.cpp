// fsh: ingest data, meta-train, personalize, synthesize, puppeteer, evaluate, time.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

#include "fsh/checkpoint.hpp"
#include "fsh/config.hpp"
#include "fsh/data.hpp"
#include "fsh/errors.hpp"
#include "fsh/evaluation.hpp"
#include "fsh/finetune.hpp"
#include "fsh/meta_trainer.hpp"
#include "fsh/toy.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

namespace fs = std::filesystem;
using namespace fsh;

namespace {

constexpr int kOk = 0;
constexpr int kFailure = 1;
constexpr int kUsage = 2;

/// Thrown for bad arguments detected after CLI11 parsing.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  bool print_config = false;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "INI run configuration");
  cmd->add_option("--seed", c.seed, "Overrides [run] seed");
  cmd->add_flag("--print-config", c.print_config, "Print the resolved configuration and exit");
}

void require_path(const fs::path& p, const char* what) {
  if (!fs::exists(p)) throw UsageError(std::string(what) + " does not exist: " + p.string());
}

/// Loads the config, applies `overrides`, prints the hash. Returns nullopt
/// when --print-config asked to stop.
std::optional<RunConfig> resolve(const Common& c, const std::function<void(RunConfig&)>& overrides = {}) {
  RunConfig cfg;
  if (!c.config.empty()) {
    require_path(c.config, "config file");
    cfg = RunConfig::load(c.config);
  }
  if (c.seed) cfg.seed = *c.seed;
  if (overrides) overrides(cfg);
  cfg.propagate();
  cfg.validate();
  std::cout << "config-hash: " << cfg.hash() << "\n";
  if (c.print_config) {
    std::cout << cfg.to_ini();
    return std::nullopt;
  }
  return cfg;
}

DatasetLayout layout_for(const RunConfig& cfg) {
  DatasetLayout layout;
  layout.connectivity.line_width = cfg.line_width;
  return layout;
}

Dataset load_dataset(const fs::path& root, const RunConfig& cfg) {
  require_path(root, "dataset root");
  IngestReport report;
  Dataset ds = ingest_dataset(root, layout_for(cfg), &report);
  for (const auto& r : report.rejected) std::cerr << "rejected " << r << "\n";
  if (report.skipped_frames) std::cerr << "warning: skipped " << report.skipped_frames << " unreadable frames\n";
  return ds;
}

VideoSequence load_one(const fs::path& dir, const RunConfig& cfg) {
  require_path(dir, "sequence directory");
  IngestReport report;
  auto seq = load_sequence(dir, layout_for(cfg), report);
  if (!seq) throw DataError(report.rejected.empty() ? "cannot load " + dir.string() : report.rejected.front());
  return *seq;
}

std::vector<Image> landmark_track(const fs::path& dir, const RunConfig& cfg, int resolution) {
  const fs::path file = fs::is_directory(dir) ? dir / "landmarks.txt" : dir;
  require_path(file, "landmark track");
  std::vector<Image> out;
  const auto layout = layout_for(cfg);
  for (const auto& lm : read_landmark_track(file))
    out.push_back(rasterize_landmarks(lm, layout.connectivity, resolution, resolution));
  if (out.empty()) throw DataError("landmark track " + file.string() + " is empty");
  return out;
}

void write_frames(const fs::path& dir, const std::vector<Image>& frames) {
  fs::create_directories(dir);
  for (std::size_t k = 0; k < frames.size(); ++k) {
    char name[32];
    std::snprintf(name, sizeof name, "%06zu.png", k);
    write_png(dir / name, frames[k]);
  }
  write_png(dir / "contact_sheet.png", tile_images(frames, std::min<int>(8, static_cast<int>(frames.size()))));
}

FinetuneSet first_frames(const VideoSequence& seq, int T) {
  if (T < 1) throw UsageError("--T must be >= 1");
  if (T > static_cast<int>(seq.frames.size()))
    throw UsageError("--T " + std::to_string(T) + " exceeds the " + std::to_string(seq.frames.size()) +
                     " frames of " + seq.name);
  FinetuneSet set;
  set.frames.assign(seq.frames.begin(), seq.frames.begin() + T);
  return set;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Few-shot adversarial talking-head synthesis"};
  app.require_subcommand(1);

  // make-toy
  Common toy_common;
  ToyDatasetOptions toy;
  std::string toy_out;
  auto* make_toy = app.add_subcommand("make-toy", "Write a procedural toy dataset");
  add_common(make_toy, toy_common);
  make_toy->add_option("--out", toy_out, "Output dataset root")->required();
  make_toy->add_option("--identities", toy.identities);
  make_toy->add_option("--videos-per-identity", toy.videos_per_identity);
  make_toy->add_option("--frames", toy.frames);
  make_toy->add_option("--resolution", toy.resolution);
  make_toy->add_option("--first-identity", toy.first_identity);

  // ingest
  Common ingest_common;
  std::string ingest_root, ingest_out;
  auto* ingest = app.add_subcommand("ingest", "Index a frame+landmark dataset");
  add_common(ingest, ingest_common);
  ingest->add_option("--root", ingest_root, "Dataset root")->required();
  ingest->add_option("--out", ingest_out, "Index JSON path")->required();

  // meta-train
  Common mt_common;
  std::string mt_data, mt_variant, mt_output, mt_resume;
  std::optional<long> mt_steps;
  bool mt_disable_mch = false, mt_quiet = false;
  auto* meta = app.add_subcommand("meta-train", "Episodic adversarial meta-learning");
  add_common(meta, mt_common);
  meta->add_option("--data", mt_data, "Dataset root (overrides [data] root)");
  meta->add_option("--variant", mt_variant, "ff or ft");
  meta->add_option("--max-steps", mt_steps);
  meta->add_option("--output", mt_output, "Output directory (overrides [run] output_dir)");
  meta->add_option("--resume", mt_resume, "Checkpoint to resume from");
  meta->add_flag("--disable-mch", mt_disable_mch, "Drop the embedding match loss");
  meta->add_flag("--quiet", mt_quiet);

  // personalize
  Common pz_common;
  std::string pz_ckpt, pz_frames, pz_out;
  int pz_T = 8;
  std::optional<int> pz_epochs;
  bool pz_no_adv = false, pz_freeze = false;
  auto* personalize = app.add_subcommand("personalize", "Personalize a meta-trained model to a new person");
  add_common(personalize, pz_common);
  personalize->add_option("--checkpoint", pz_ckpt, "Meta-training checkpoint")->required();
  personalize->add_option("--frames", pz_frames, "Sequence directory (frames/ + landmarks.txt)")->required();
  personalize->add_option("--T", pz_T, "Number of frames to use");
  personalize->add_option("--epochs", pz_epochs, "Fine-tuning epochs (0 = feed-forward)");
  personalize->add_flag("--no-adv", pz_no_adv, "Fine-tune without the adversarial term");
  personalize->add_flag("--freeze-psi", pz_freeze, "Keep person-generic generator weights fixed");
  personalize->add_option("--out", pz_out, "Personalized model path")->required();

  // synthesize
  Common sy_common;
  std::string sy_model, sy_track, sy_out;
  auto* synth = app.add_subcommand("synthesize", "Render a landmark track with a personalized model");
  add_common(synth, sy_common);
  synth->add_option("--model", sy_model)->required();
  synth->add_option("--track", sy_track, "Sequence directory or landmarks file")->required();
  synth->add_option("--out", sy_out)->required();

  // puppeteer
  Common pp_common;
  std::string pp_model, pp_track, pp_out, pp_ckpt, pp_still, pp_candidates;
  int pp_still_frame = 0;
  bool pp_rank = false;
  auto* puppet = app.add_subcommand("puppeteer", "Drive a person with another video's landmarks");
  add_common(puppet, pp_common);
  puppet->add_option("--model", pp_model, "Personalized model (drive mode)");
  puppet->add_option("--track", pp_track, "Driving sequence or landmarks file (drive mode)");
  puppet->add_flag("--rank", pp_rank, "Rank candidate driving videos by CSIM");
  puppet->add_option("--checkpoint", pp_ckpt, "Meta checkpoint (rank mode)");
  puppet->add_option("--still", pp_still, "Sequence directory holding the still (rank mode)");
  puppet->add_option("--still-frame", pp_still_frame);
  puppet->add_option("--candidates", pp_candidates, "Dataset root of candidate videos (rank mode)");
  puppet->add_option("--out", pp_out)->required();

  // evaluate
  Common ev_common;
  std::string ev_ckpt, ev_data, ev_protocol = "self-reenactment", ev_out;
  int ev_T = 8, ev_holdout = 32, ev_videos = 50, ev_triplets = 100;
  std::optional<int> ev_epochs;
  auto* evaluate = app.add_subcommand("evaluate", "Self-reenactment metrics or user-study triplets");
  add_common(evaluate, ev_common);
  evaluate->add_option("--checkpoint", ev_ckpt)->required();
  evaluate->add_option("--data", ev_data)->required();
  evaluate->add_option("--protocol", ev_protocol)->check(CLI::IsMember({"self-reenactment", "triplets"}));
  evaluate->add_option("--T", ev_T);
  evaluate->add_option("--holdout", ev_holdout);
  evaluate->add_option("--videos", ev_videos);
  evaluate->add_option("--epochs", ev_epochs);
  evaluate->add_option("--triplets", ev_triplets);
  evaluate->add_option("--out", ev_out)->required();

  // bench-time
  Common bt_common;
  std::string bt_ckpt, bt_out;
  std::vector<int> bt_T = {1, 8, 32};
  int bt_reps = 20;
  std::optional<int> bt_epochs;
  auto* bench = app.add_subcommand("bench-time", "Time few-shot learning and per-frame inference");
  add_common(bench, bt_common);
  bench->add_option("--checkpoint", bt_ckpt)->required();
  bench->add_option("--T", bt_T)->delimiter(',');
  bench->add_option("--reps", bt_reps);
  bench->add_option("--epochs", bt_epochs, "Fine-tuning epochs for the FT rows");
  bench->add_option("--out", bt_out, "Timing JSON path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*make_toy) {
      auto cfg = resolve(toy_common);
      if (!cfg) return kOk;
      toy.seed = cfg->seed;
      const Dataset ds = make_toy_dataset(toy, layout_for(*cfg).connectivity);
      write_dataset(ds, toy_out, layout_for(*cfg));
      std::cout << "wrote " << ds.size() << " sequences to " << toy_out << "\n";
      return kOk;
    }

    if (*ingest) {
      auto cfg = resolve(ingest_common);
      if (!cfg) return kOk;
      const Dataset ds = load_dataset(ingest_root, *cfg);
      write_text(ingest_out, dataset_index_json(ds));
      std::cout << "indexed " << ds.size() << " sequences\n";
      if (ds.empty()) {
        std::cerr << "warning: no usable sequences under " << ingest_root << "\n";
        return kFailure;
      }
      return kOk;
    }

    if (*meta) {
      auto cfg = resolve(mt_common, [&](RunConfig& c) {
        if (!mt_data.empty()) c.data_root = mt_data;
        if (!mt_variant.empty()) c.train.variant = parse_variant(mt_variant);
        if (mt_steps) c.train.max_steps = *mt_steps;
        if (!mt_output.empty()) c.output_dir = mt_output;
        if (mt_disable_mch) c.train.disable_mch = true;
      });
      if (!cfg) return kOk;
      if (cfg->data_root.empty()) throw UsageError("no dataset: pass --data or set [data] root");
      const Dataset ds = load_dataset(cfg->data_root, *cfg);
      if (ds.empty()) throw DataError("no usable sequences under " + cfg->data_root.string());
      NetworkConfig net = cfg->network;
      if (net.num_videos == 0) net.num_videos = ds.size();
      const auto registry = ExtractorRegistry<float>::standard();
      MetaTrainOutput out{cfg->output_dir, {}, mt_quiet};
      if (!mt_resume.empty()) {
        require_path(mt_resume, "resume checkpoint");
        out.resume_from = fs::path(mt_resume);
      }
      write_text(cfg->output_dir / "config.ini", cfg->to_ini());
      const auto state = run_meta_training(net, cfg->train, ds, out, registry);
      std::cout << "trained to step " << state.step << "; checkpoint " << (cfg->output_dir / "latest.ckpt").string()
                << "\n";
      return kOk;
    }

    if (*personalize) {
      auto cfg = resolve(pz_common, [&](RunConfig& c) {
        if (pz_epochs) c.finetune.epochs = *pz_epochs;
        if (pz_no_adv) c.finetune.disable_adv = true;
        if (pz_freeze) c.finetune.freeze_psi = true;
      });
      if (!cfg) return kOk;
      require_path(pz_ckpt, "checkpoint");
      const std::string source = file_sha256(pz_ckpt);
      MetaTrainState meta = load_meta_checkpoint(pz_ckpt);
      const auto set = first_frames(load_one(pz_frames, *cfg), pz_T);
      set.validate(meta.config.resolution);
      auto model = init_personalized(meta, estimate_embedding(meta.embedder, set), source);
      if (cfg->finetune.epochs > 0) {
        const auto registry = ExtractorRegistry<float>::standard();
        model = run_finetune(model, set, cfg->finetune, registry);
      }
      save_personalized(model, pz_out);
      std::cout << "personalized model " << pz_out << " (" << model.finetune_steps << " fine-tune steps)\n";
      return kOk;
    }

    if (*synth) {
      auto cfg = resolve(sy_common);
      if (!cfg) return kOk;
      require_path(sy_model, "model");
      auto model = load_personalized(sy_model);
      const auto frames = synthesize(model, landmark_track(sy_track, *cfg, model.generator.config().resolution));
      write_frames(sy_out, frames);
      std::cout << "wrote " << frames.size() << " frames to " << sy_out << "\n";
      return kOk;
    }

    if (*puppet) {
      auto cfg = resolve(pp_common);
      if (!cfg) return kOk;
      if (!pp_rank) {
        if (pp_model.empty() || pp_track.empty()) throw UsageError("drive mode needs --model and --track");
        require_path(pp_model, "model");
        auto model = load_personalized(pp_model);
        const auto frames = synthesize(model, landmark_track(pp_track, *cfg, model.generator.config().resolution));
        write_frames(pp_out, frames);
        std::cout << "wrote " << frames.size() << " frames to " << pp_out << "\n";
        return kOk;
      }
      if (pp_ckpt.empty() || pp_still.empty() || pp_candidates.empty())
        throw UsageError("--rank needs --checkpoint, --still and --candidates");
      require_path(pp_ckpt, "checkpoint");
      MetaTrainState meta = load_meta_checkpoint(pp_ckpt);
      const auto still_seq = load_one(pp_still, *cfg);
      if (pp_still_frame < 0 || pp_still_frame >= static_cast<int>(still_seq.frames.size()))
        throw UsageError("--still-frame out of range");
      const Dataset candidates = load_dataset(pp_candidates, *cfg);
      const auto registry = ExtractorRegistry<float>::standard();
      const auto ranking =
          rank_puppeteering_sources(still_seq.frames[static_cast<std::size_t>(pp_still_frame)], candidates.sequences,
                                    make_personalizer(meta, cfg->finetune, registry),
                                    pooled_feature_embedder(registry, "pyramid_b"));
      nlohmann::json j = nlohmann::json::array();
      for (const auto& r : ranking) {
        j.push_back({{"index", r.index}, {"name", r.name}, {"csim", r.score}});
        std::cout << r.name << "\t" << r.score << "\n";
      }
      write_text(fs::path(pp_out) / "ranking.json", j.dump(2) + "\n");
      return kOk;
    }

    if (*evaluate) {
      auto cfg = resolve(ev_common, [&](RunConfig& c) {
        if (ev_epochs) c.finetune.epochs = *ev_epochs;
      });
      if (!cfg) return kOk;
      require_path(ev_ckpt, "checkpoint");
      MetaTrainState meta = load_meta_checkpoint(ev_ckpt);
      const Dataset ds = load_dataset(ev_data, *cfg);
      const auto registry = ExtractorRegistry<float>::standard();
      const auto personalizer = make_personalizer(meta, cfg->finetune, registry);
      const fs::path out = ev_out;
      if (ev_protocol == "self-reenactment") {
        ReenactmentOptions opt;
        opt.method = cfg->finetune.epochs > 0 ? "FT" : "FF";
        opt.T = ev_T;
        opt.holdout = ev_holdout;
        opt.max_videos = ev_videos;
        opt.seed = cfg->seed;
        const auto report = self_reenactment_eval(personalizer, ds, opt, pooled_feature_embedder(registry, "pyramid_a"),
                                                  pooled_feature_embedder(registry, "pyramid_b"),
                                                  "pyramid_a (fid), pyramid_b (csim)");
        for (const auto& s : report.skipped) std::cerr << "skipped " << s << "\n";
        write_text(out / "report.csv", report.to_csv());
        write_text(out / "report.json", report.to_json().dump(2) + "\n");
        std::cout << report.to_csv();
        return kOk;
      }
      std::vector<GeneratedFrame> generated;
      std::mt19937_64 rng(cfg->seed);
      std::vector<std::string> skipped;
      for (const auto& split : make_reenactment_splits(ds, ev_T, ev_holdout, ev_videos, rng, &skipped)) {
        const auto& seq = ds[split.video];
        FinetuneSet set;
        for (int t : split.finetune) set.frames.push_back(seq.frames[static_cast<std::size_t>(t)]);
        std::vector<Image> track;
        for (int t : split.holdout) track.push_back(seq.frames[static_cast<std::size_t>(t)].landmark_image);
        for (auto& img : personalizer(set, track)) generated.push_back({seq.identity, std::move(img)});
      }
      for (const auto& s : skipped) std::cerr << "skipped " << s << "\n";
      const auto manifest = build_user_study_triplets(ds, generated, ev_triplets, rng, out);
      for (const auto& e : manifest.excluded) std::cerr << "excluded " << e << "\n";
      std::cout << "wrote " << manifest.triplets.size() << " triplets to " << out.string() << "\n";
      return kOk;
    }

    if (*bench) {
      auto cfg = resolve(bt_common, [&](RunConfig& c) {
        if (bt_epochs) c.finetune.epochs = *bt_epochs;
      });
      if (!cfg) return kOk;
      require_path(bt_ckpt, "checkpoint");
      MetaTrainState meta = load_meta_checkpoint(bt_ckpt);
      const auto registry = ExtractorRegistry<float>::standard();
      int max_T = 1;
      for (int T : bt_T) max_T = std::max(max_T, T);
      ToyDatasetOptions topt;
      topt.identities = 1;
      topt.frames = max_T;
      topt.resolution = meta.config.resolution;
      topt.first_identity = 1000;
      const Dataset probe = make_toy_dataset(topt, layout_for(*cfg).connectivity);
      auto model = init_personalized(meta, VectorX<float>::Zero(meta.config.embedding_dim));
      std::vector<Image> track;
      for (const auto& f : probe[0].frames) track.push_back(f.landmark_image);
      auto infer = [&](int n) {
        std::vector<Image> t(track.begin(), track.begin() + std::min<std::size_t>(track.size(), std::size_t(n)));
        while (static_cast<int>(t.size()) < n) t.push_back(track.front());
        synthesize(model, t);
      };
      auto few_shot = [&](int epochs) {
        return [&, epochs](int T) {
          const auto set = first_frames(probe[0], T);
          auto m = init_personalized(meta, estimate_embedding(meta.embedder, set));
          if (epochs > 0) {
            FinetuneConfig fc = cfg->finetune;
            fc.epochs = epochs;
            m = run_finetune(m, set, fc, registry);
          }
        };
      };
      TimingTable table = measure_times(few_shot(0), infer, bt_T, bt_reps);
      for (auto& r : table.rows) r.method = "FF";
      if (cfg->finetune.epochs > 0) {
        TimingTable ft = measure_times(few_shot(cfg->finetune.epochs), infer, bt_T, bt_reps);
        for (auto& r : ft.rows) {
          r.method = "FT";
          table.rows.push_back(r);
        }
      }
      const std::string text = table.to_json().dump(2) + "\n";
      if (!bt_out.empty()) write_text(bt_out, text);
      std::cout << text;
      return kOk;
    }
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kUsage;
  } catch (const TrainingDiverged& e) {
    std::cerr << "training diverged: " << e.what() << "; last good checkpoint: "
              << (e.last_good_checkpoint.empty() ? "(none)" : e.last_good_checkpoint) << "\n";
    return kFailure;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
  return kUsage;
}
