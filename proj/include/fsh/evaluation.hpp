#pragma once

#include "fsh/data.hpp"
#include "fsh/finetune.hpp"
#include "fsh/image.hpp"
#include "fsh/losses.hpp"
#include "fsh/meta_trainer.hpp"

#include <json.hpp>

#include <Eigen/Dense>

#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

namespace fsh {

// ---------------------------------------------------------------------------
// Metrics

/// Frechet distance between Gaussians fitted to the rows of `a` and `b`
/// (samples x dim). Covariances get eps * I before the matrix square root.
double compute_fid(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, double eps = 1e-6);

/// Windowed SSIM on Rec.601 luma of [0,1]-rescaled images: 11x11 Gaussian
/// window (sigma 1.5, shrunk for smaller images), K1 = 0.01, K2 = 0.03.
double compute_ssim(const Image& a, const Image& b);

/// Maps an image to a fixed-length identity vector.
using FaceEmbedder = std::function<Eigen::VectorXd(const Image&)>;

/// Cosine similarity; 0 (with a warning on std::clog) when either norm is zero.
double cosine_similarity(const Eigen::VectorXd& a, const Eigen::VectorXd& b);
double compute_csim(const Image& a, const Image& b, const FaceEmbedder& embedder);

/// Spatially averaged activations of the last layer of a registered extractor.
/// The registry must outlive the returned function.
FaceEmbedder pooled_feature_embedder(const ExtractorRegistry<float>& registry, const std::string& extractor);

// ---------------------------------------------------------------------------
// Reports

struct MetricRow {
  std::string method;
  int T = 0;
  double fid = 0, ssim = 0, csim = 0;  ///< means over all evaluated frames
  double ssim_per_video = 0, csim_per_video = 0;  ///< means of per-video means
  int n_items = 0;
  int n_videos = 0;
};

struct MetricReport {
  std::vector<MetricRow> rows;
  int videos_used = 0;
  int holdout = 0;
  std::string feature_extractor;
  std::vector<std::string> skipped;  ///< "<video>: reason"

  std::string to_csv() const;
  nlohmann::json to_json() const;
};

// ---------------------------------------------------------------------------
// Self-reenactment

struct ReenactmentSplit {
  int video = 0;
  std::vector<int> finetune;  ///< first T frames
  std::vector<int> holdout;   ///< last `holdout` frames
};

/// Up to `max_videos` sequences drawn uniformly without replacement (all of
/// them in index order when fewer exist). Sequences shorter than T + holdout
/// are skipped and listed in `skipped`.
std::vector<ReenactmentSplit> make_reenactment_splits(const Dataset& dataset, int T, int holdout, int max_videos,
                                                      std::mt19937_64& rng, std::vector<std::string>* skipped);

/// Builds a personalized synthesizer from T frames and renders the given landmark images.
using Personalizer = std::function<std::vector<Image>(const FinetuneSet& frames, const std::vector<Image>& track)>;

/// Personalizer backed by a meta-trained state: embedding estimate, projection
/// and `cfg.epochs` of fine-tuning (0 is the feed-forward variant).
Personalizer make_personalizer(MetaTrainState& meta, const FinetuneConfig& cfg,
                               const ExtractorRegistry<float>& registry);

struct ReenactmentOptions {
  std::string method = "model";
  int T = 8;
  int holdout = 32;
  int max_videos = 50;
  std::uint64_t seed = 1;
};

MetricReport self_reenactment_eval(const Personalizer& personalize, const Dataset& dataset,
                                   const ReenactmentOptions& options, const FaceEmbedder& fid_features,
                                   const FaceEmbedder& face_embedder, const std::string& extractor_name = "");

// ---------------------------------------------------------------------------
// User-study triplets

struct GeneratedFrame {
  std::string identity;
  Image image;
};

struct Triplet {
  int id = 0;
  std::string identity;
  int fake_position = 0;  ///< 0..2
  /// Provenance of the three tiles: "real:<sequence>:<frame>" or "fake:<n>".
  std::array<std::string, 3> sources;
  std::string grid;  ///< file name of the 1x3 grid, empty when not written
};

struct TripletManifest {
  std::vector<Triplet> triplets;
  std::vector<std::string> excluded;  ///< identities without two real videos or a generated frame
};

/// Each triplet shows two real frames of one identity from distinct videos
/// and one generated frame of the same identity, the fake at a uniformly
/// random position. With a non-empty `out_dir`, writes `manifest.json`
/// (no answers), `answers.json` and one PNG grid per triplet.
TripletManifest build_user_study_triplets(const Dataset& dataset, const std::vector<GeneratedFrame>& generated,
                                          int n_triplets, std::mt19937_64& rng,
                                          const std::filesystem::path& out_dir = {});

// ---------------------------------------------------------------------------
// Puppeteering

struct RankedSource {
  int index = 0;
  std::string name;
  double score = 0;
};

/// One-shot personalizes on `still`, drives with each candidate's landmark
/// track and ranks by mean CSIM against the still, descending; ties keep
/// candidate order.
std::vector<RankedSource> rank_puppeteering_sources(const FrameRecord& still,
                                                    const std::vector<VideoSequence>& candidates,
                                                    const Personalizer& personalize,
                                                    const FaceEmbedder& face_embedder);

// ---------------------------------------------------------------------------
// Timing

struct TimingRow {
  std::string method;
  int T = 0;
  double few_shot_ms = 0;            ///< mean over repetitions
  double inference_ms_per_frame = 0;
  int repetitions = 0;
};

struct TimingTable {
  std::vector<TimingRow> rows;
  std::string hardware;
  nlohmann::json to_json() const;
};

/// `personalize(T)` runs one few-shot learning; `infer(frames)` renders that
/// many frames. Both are timed over `repetitions` (at least 20) after one warm-up call.
TimingTable measure_times(const std::function<void(int)>& personalize, const std::function<void(int)>& infer,
                          const std::vector<int>& t_values, int repetitions = 20, int frames_per_inference = 8);

std::string hardware_descriptor();

}  // namespace fsh
