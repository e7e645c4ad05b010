#include "fsh/evaluation.hpp"

#include "fsh/errors.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

namespace fs = std::filesystem;

namespace fsh {

// ---------------------------------------------------------------------------
// FID

namespace {

Eigen::MatrixXd sqrt_psd(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
  const Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

void check_features(const Eigen::MatrixXd& x, const char* name) {
  if (x.rows() < 2) throw ContractError(std::string("compute_fid: ") + name + " needs at least 2 samples");
  if (!x.allFinite()) throw DataError(std::string("compute_fid: non-finite features in ") + name);
}

}  // namespace

double compute_fid(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, double eps) {
  check_features(a, "first set");
  check_features(b, "second set");
  if (a.cols() != b.cols()) throw ContractError("compute_fid: feature dimensions differ");
  const Eigen::RowVectorXd mu_a = a.colwise().mean(), mu_b = b.colwise().mean();
  const Eigen::MatrixXd ca = a.rowwise() - mu_a, cb = b.rowwise() - mu_b;
  const auto eye = Eigen::MatrixXd::Identity(a.cols(), a.cols());
  const Eigen::MatrixXd sa = ca.transpose() * ca / double(a.rows() - 1) + eps * eye;
  const Eigen::MatrixXd sb = cb.transpose() * cb / double(b.rows() - 1) + eps * eye;
  const Eigen::MatrixXd ra = sqrt_psd(sa);
  const Eigen::MatrixXd inner = ra * sb * ra;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (inner + inner.transpose()), Eigen::EigenvaluesOnly);
  const double tr_sqrt = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  const double fid = (mu_a - mu_b).squaredNorm() + sa.trace() + sb.trace() - 2.0 * tr_sqrt;
  return std::max(0.0, fid);
}

// ---------------------------------------------------------------------------
// SSIM

namespace {

Eigen::MatrixXd luma(const Image& img) {
  Eigen::MatrixXd y(img.height, img.width);
  for (int r = 0; r < img.height; ++r)
    for (int c = 0; c < img.width; ++c) {
      const auto p = img.at(r, c).cast<double>();
      y(r, c) = 0.299 * (p(0) + 1.0) / 2.0 + 0.587 * (p(1) + 1.0) / 2.0 + 0.114 * (p(2) + 1.0) / 2.0;
    }
  return y;
}

Eigen::MatrixXd filter_valid(const Eigen::MatrixXd& x, const Eigen::MatrixXd& w) {
  const Eigen::Index oh = x.rows() - w.rows() + 1, ow = x.cols() - w.cols() + 1;
  Eigen::MatrixXd out(oh, ow);
  for (Eigen::Index r = 0; r < oh; ++r)
    for (Eigen::Index c = 0; c < ow; ++c) out(r, c) = (x.block(r, c, w.rows(), w.cols()).array() * w.array()).sum();
  return out;
}

}  // namespace

double compute_ssim(const Image& a, const Image& b) {
  if (!a.same_shape(b)) throw ContractError("compute_ssim: image shapes differ");
  if (a.height < 1 || a.width < 1) throw ContractError("compute_ssim: empty image");
  const int size = std::min({11, a.height, a.width});
  Eigen::VectorXd g(size);
  for (int i = 0; i < size; ++i) {
    const double d = i - (size - 1) / 2.0;
    g(i) = std::exp(-d * d / (2.0 * 1.5 * 1.5));
  }
  g /= g.sum();
  const Eigen::MatrixXd w = g * g.transpose();
  const Eigen::MatrixXd x = luma(a), y = luma(b);
  const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  const Eigen::ArrayXXd mx = filter_valid(x, w).array(), my = filter_valid(y, w).array();
  const Eigen::ArrayXXd sxx = filter_valid(x.cwiseProduct(x), w).array() - mx * mx;
  const Eigen::ArrayXXd syy = filter_valid(y.cwiseProduct(y), w).array() - my * my;
  const Eigen::ArrayXXd sxy = filter_valid(x.cwiseProduct(y), w).array() - mx * my;
  const Eigen::ArrayXXd map =
      ((2.0 * mx * my + c1) * (2.0 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2));
  return map.mean();
}

// ---------------------------------------------------------------------------
// CSIM

double cosine_similarity(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  if (a.size() != b.size()) throw ContractError("cosine_similarity: lengths differ");
  const double na = a.norm(), nb = b.norm();
  if (na == 0.0 || nb == 0.0) {
    std::clog << "warning: zero-norm face embedding, CSIM set to 0\n";
    return 0.0;
  }
  return std::clamp(a.dot(b) / (na * nb), -1.0, 1.0);
}

double compute_csim(const Image& a, const Image& b, const FaceEmbedder& embedder) {
  return cosine_similarity(embedder(a), embedder(b));
}

FaceEmbedder pooled_feature_embedder(const ExtractorRegistry<float>& registry, const std::string& extractor) {
  FeatureExtractor<float>* ext = &registry.get(extractor);
  return [ext](const Image& img) {
    Tape<float> tape;
    auto acts = ext->activations(tape.constant(img.pixels, Shape{1, img.height, img.width}));
    return Eigen::VectorXd(acts.back().value().rowwise().mean().cast<double>());
  };
}

// ---------------------------------------------------------------------------
// Reports

std::string MetricReport::to_csv() const {
  std::ostringstream out;
  out << "method,T,fid,ssim,csim,ssim_per_video,csim_per_video,n_items,n_videos\n";
  out.precision(9);
  for (const auto& r : rows)
    out << r.method << ',' << r.T << ',' << r.fid << ',' << r.ssim << ',' << r.csim << ',' << r.ssim_per_video << ','
        << r.csim_per_video << ',' << r.n_items << ',' << r.n_videos << '\n';
  return out.str();
}

nlohmann::json MetricReport::to_json() const {
  nlohmann::json rj = nlohmann::json::array();
  for (const auto& r : rows)
    rj.push_back({{"method", r.method},
                  {"T", r.T},
                  {"fid", r.fid},
                  {"ssim", r.ssim},
                  {"csim", r.csim},
                  {"ssim_per_video", r.ssim_per_video},
                  {"csim_per_video", r.csim_per_video},
                  {"n_items", r.n_items},
                  {"n_videos", r.n_videos}});
  return {{"rows", rj},
          {"protocol", {{"videos_used", videos_used}, {"holdout", holdout}, {"feature_extractor", feature_extractor}}},
          {"skipped", skipped}};
}

// ---------------------------------------------------------------------------
// Self-reenactment

std::vector<ReenactmentSplit> make_reenactment_splits(const Dataset& dataset, int T, int holdout, int max_videos,
                                                      std::mt19937_64& rng, std::vector<std::string>* skipped) {
  if (T < 1 || holdout < 1) throw ConfigError("self-reenactment needs T >= 1 and holdout >= 1");
  std::vector<int> candidates;
  for (int i = 0; i < dataset.size(); ++i) {
    const int n = static_cast<int>(dataset[i].frames.size());
    if (n < T + holdout) {
      if (skipped)
        skipped->push_back(dataset[i].name + ": " + std::to_string(n) + " frames < T + holdout = " +
                           std::to_string(T + holdout));
      continue;
    }
    candidates.push_back(i);
  }
  if (max_videos >= 0 && static_cast<int>(candidates.size()) > max_videos) {
    std::shuffle(candidates.begin(), candidates.end(), rng);
    candidates.resize(static_cast<std::size_t>(max_videos));
    std::sort(candidates.begin(), candidates.end());
  }
  std::vector<ReenactmentSplit> out;
  for (int v : candidates) {
    const int n = static_cast<int>(dataset[v].frames.size());
    ReenactmentSplit s;
    s.video = v;
    for (int t = 0; t < T; ++t) s.finetune.push_back(t);
    for (int t = n - holdout; t < n; ++t) s.holdout.push_back(t);
    out.push_back(std::move(s));
  }
  return out;
}

Personalizer make_personalizer(MetaTrainState& meta, const FinetuneConfig& cfg,
                               const ExtractorRegistry<float>& registry) {
  return [&meta, cfg, &registry](const FinetuneSet& frames, const std::vector<Image>& track) {
    auto model = init_personalized(meta, estimate_embedding(meta.embedder, frames));
    if (cfg.epochs > 0) model = run_finetune(model, frames, cfg, registry);
    return synthesize(model, track);
  };
}

MetricReport self_reenactment_eval(const Personalizer& personalize, const Dataset& dataset,
                                   const ReenactmentOptions& options, const FaceEmbedder& fid_features,
                                   const FaceEmbedder& face_embedder, const std::string& extractor_name) {
  MetricReport report;
  report.holdout = options.holdout;
  report.feature_extractor = extractor_name;
  std::mt19937_64 rng(options.seed);
  const auto splits =
      make_reenactment_splits(dataset, options.T, options.holdout, options.max_videos, rng, &report.skipped);

  MetricRow row;
  row.method = options.method;
  row.T = options.T;
  std::vector<Eigen::VectorXd> real_feats, fake_feats;
  for (const auto& split : splits) {
    const auto& seq = dataset[split.video];
    FinetuneSet set;
    for (int t : split.finetune) set.frames.push_back(seq.frames[static_cast<std::size_t>(t)]);
    std::vector<Image> track;
    for (int t : split.holdout) track.push_back(seq.frames[static_cast<std::size_t>(t)].landmark_image);
    const auto generated = personalize(set, track);
    if (generated.size() != track.size()) throw ContractError("personalizer returned the wrong number of frames");
    double vs = 0, vc = 0;
    for (std::size_t k = 0; k < track.size(); ++k) {
      const Image& real = seq.frames[static_cast<std::size_t>(split.holdout[k])].image;
      const double s = compute_ssim(real, generated[k]);
      const double c = compute_csim(real, generated[k], face_embedder);
      vs += s;
      vc += c;
      row.ssim += s;
      row.csim += c;
      real_feats.push_back(fid_features(real));
      fake_feats.push_back(fid_features(generated[k]));
      ++row.n_items;
    }
    row.ssim_per_video += vs / double(track.size());
    row.csim_per_video += vc / double(track.size());
    ++row.n_videos;
  }
  if (row.n_items > 0) {
    row.ssim /= row.n_items;
    row.csim /= row.n_items;
    row.ssim_per_video /= row.n_videos;
    row.csim_per_video /= row.n_videos;
  }
  if (row.n_items >= 2) {
    Eigen::MatrixXd ra(row.n_items, real_feats.front().size()), fa(row.n_items, real_feats.front().size());
    for (int i = 0; i < row.n_items; ++i) {
      ra.row(i) = real_feats[static_cast<std::size_t>(i)].transpose();
      fa.row(i) = fake_feats[static_cast<std::size_t>(i)].transpose();
    }
    row.fid = compute_fid(ra, fa);
  }
  report.videos_used = row.n_videos;
  report.rows.push_back(row);
  return report;
}

// ---------------------------------------------------------------------------
// Triplets

TripletManifest build_user_study_triplets(const Dataset& dataset, const std::vector<GeneratedFrame>& generated,
                                          int n_triplets, std::mt19937_64& rng, const fs::path& out_dir) {
  if (n_triplets < 0) throw ConfigError("n_triplets must be >= 0");
  std::map<std::string, std::vector<int>> videos, fakes;
  for (int i = 0; i < dataset.size(); ++i) {
    const auto& s = dataset[i];
    if (!s.frames.empty()) videos[s.identity.empty() ? s.name : s.identity].push_back(i);
  }
  for (std::size_t k = 0; k < generated.size(); ++k) fakes[generated[k].identity].push_back(static_cast<int>(k));

  TripletManifest manifest;
  std::vector<std::string> eligible;
  std::set<std::string> seen;
  for (const auto& [id, vids] : videos) {
    seen.insert(id);
    if (vids.size() < 2)
      manifest.excluded.push_back(id + ": fewer than 2 real videos");
    else if (!fakes.count(id))
      manifest.excluded.push_back(id + ": no generated frame");
    else
      eligible.push_back(id);
  }
  for (const auto& [id, ks] : fakes)
    if (!seen.count(id)) manifest.excluded.push_back(id + ": no real videos");

  if (!out_dir.empty()) fs::create_directories(out_dir);
  auto pick = [&rng](std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng); };
  for (int t = 0; t < n_triplets && !eligible.empty(); ++t) {
    Triplet tr;
    tr.id = t;
    tr.identity = eligible[pick(eligible.size())];
    auto vids = videos[tr.identity];
    const std::size_t a = pick(vids.size());
    std::size_t b = pick(vids.size() - 1);
    if (b >= a) ++b;
    const auto& sa = dataset[vids[a]];
    const auto& sb = dataset[vids[b]];
    const std::size_t fa = pick(sa.frames.size()), fb = pick(sb.frames.size());
    const auto& fk = fakes[tr.identity];
    const int fake_index = fk[pick(fk.size())];
    tr.fake_position = static_cast<int>(pick(3));

    std::array<const Image*, 3> tiles{};
    std::array<std::string, 2> real_src = {"real:" + sa.name + ":" + std::to_string(fa),
                                           "real:" + sb.name + ":" + std::to_string(fb)};
    std::array<const Image*, 2> real_img = {&sa.frames[fa].image, &sb.frames[fb].image};
    for (int pos = 0, r = 0; pos < 3; ++pos) {
      if (pos == tr.fake_position) {
        tr.sources[static_cast<std::size_t>(pos)] = "fake:" + std::to_string(fake_index);
        tiles[static_cast<std::size_t>(pos)] = &generated[static_cast<std::size_t>(fake_index)].image;
      } else {
        tr.sources[static_cast<std::size_t>(pos)] = real_src[static_cast<std::size_t>(r)];
        tiles[static_cast<std::size_t>(pos)] = real_img[static_cast<std::size_t>(r)];
        ++r;
      }
    }
    if (!out_dir.empty()) {
      char name[32];
      std::snprintf(name, sizeof name, "triplet_%05d.png", t);
      tr.grid = name;
      write_png(out_dir / name, tile_images({*tiles[0], *tiles[1], *tiles[2]}, 3));
    }
    manifest.triplets.push_back(std::move(tr));
  }

  if (!out_dir.empty()) {
    nlohmann::json items = nlohmann::json::array(), answers = nlohmann::json::object();
    for (const auto& tr : manifest.triplets) {
      items.push_back({{"id", tr.id}, {"identity", tr.identity}, {"grid", tr.grid}});
      answers[std::to_string(tr.id)] = {{"fake_position", tr.fake_position}, {"sources", tr.sources}};
    }
    std::ofstream(out_dir / "manifest.json") << nlohmann::json{{"triplets", items}, {"excluded", manifest.excluded}}.dump(2)
                                             << '\n';
    std::ofstream(out_dir / "answers.json") << answers.dump(2) << '\n';
  }
  return manifest;
}

// ---------------------------------------------------------------------------
// Puppeteering

std::vector<RankedSource> rank_puppeteering_sources(const FrameRecord& still,
                                                    const std::vector<VideoSequence>& candidates,
                                                    const Personalizer& personalize,
                                                    const FaceEmbedder& face_embedder) {
  std::vector<RankedSource> out;
  if (candidates.empty()) return out;
  FinetuneSet one;
  one.frames.push_back(still);
  const Eigen::VectorXd ref = face_embedder(still.image);
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    std::vector<Image> track;
    for (const auto& f : candidates[i].frames) track.push_back(f.landmark_image);
    RankedSource r;
    r.index = static_cast<int>(i);
    r.name = candidates[i].name;
    if (!track.empty()) {
      const auto generated = personalize(one, track);
      for (const auto& g : generated) r.score += cosine_similarity(ref, face_embedder(g));
      r.score /= double(generated.size());
    }
    out.push_back(r);
  }
  std::stable_sort(out.begin(), out.end(), [](const RankedSource& a, const RankedSource& b) { return a.score > b.score; });
  return out;
}

// ---------------------------------------------------------------------------
// Timing

nlohmann::json TimingTable::to_json() const {
  nlohmann::json rj = nlohmann::json::array();
  for (const auto& r : rows)
    rj.push_back({{"method", r.method},
                  {"T", r.T},
                  {"few_shot_ms", r.few_shot_ms},
                  {"inference_ms_per_frame", r.inference_ms_per_frame},
                  {"repetitions", r.repetitions}});
  return {{"rows", rj}, {"hardware", hardware}};
}

std::string hardware_descriptor() {
  std::string model = "unknown cpu";
  std::ifstream cpu("/proc/cpuinfo");
  for (std::string line; std::getline(cpu, line);) {
    if (line.rfind("model name", 0) == 0) {
      model = line.substr(line.find(':') + 2);
      break;
    }
  }
  return model + ", " + std::to_string(std::max(1u, std::thread::hardware_concurrency())) + " hardware threads";
}

TimingTable measure_times(const std::function<void(int)>& personalize, const std::function<void(int)>& infer,
                          const std::vector<int>& t_values, int repetitions, int frames_per_inference) {
  using clock = std::chrono::steady_clock;
  if (frames_per_inference < 1) throw ConfigError("frames_per_inference must be >= 1");
  repetitions = std::max(repetitions, 20);
  TimingTable table;
  table.hardware = hardware_descriptor();
  auto time_ms = [&](const std::function<void()>& f) {
    f();
    const auto start = clock::now();
    for (int r = 0; r < repetitions; ++r) f();
    return std::chrono::duration<double, std::milli>(clock::now() - start).count() / repetitions;
  };
  const double infer_ms = time_ms([&] { infer(frames_per_inference); }) / frames_per_inference;
  for (int T : t_values) {
    TimingRow row;
    row.T = T;
    row.repetitions = repetitions;
    row.few_shot_ms = time_ms([&] { personalize(T); });
    row.inference_ms_per_frame = infer_ms;
    table.rows.push_back(row);
  }
  return table;
}

}  // namespace fsh
