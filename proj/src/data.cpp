#include "fsh/data.hpp"

#include "fsh/errors.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <optional>
#include <set>
#include <sstream>

namespace fs = std::filesystem;

namespace fsh {

LandmarkSet LandmarkSet::from_values(std::span<const float> xy) {
  if (xy.size() != 2 * kNumLandmarks)
    throw DataError("landmark record has " + std::to_string(xy.size()) + " values, expected 136");
  LandmarkSet set;
  for (int i = 0; i < kNumLandmarks; ++i) {
    for (int d = 0; d < 2; ++d) {
      const float v = xy[2 * i + d];
      if (!std::isfinite(v)) throw DataError("non-finite landmark coordinate at point " + std::to_string(i));
      set.points(i, d) = std::clamp(v, 0.0f, 1.0f);
    }
  }
  return set;
}

namespace {

std::vector<int> range(int first, int last) {
  std::vector<int> out;
  for (int i = first; i <= last; ++i) out.push_back(i);
  return out;
}

}  // namespace

ConnectivitySpec ConnectivitySpec::ibug68() {
  ConnectivitySpec spec;
  spec.groups = {
      {"jaw", range(0, 16), false, {255, 255, 255}},
      {"right_brow", range(17, 21), false, {255, 128, 0}},
      {"left_brow", range(22, 26), false, {255, 255, 0}},
      {"nose", range(27, 35), false, {0, 0, 255}},
      {"right_eye", range(36, 41), true, {0, 255, 0}},
      {"left_eye", range(42, 47), true, {0, 255, 255}},
      {"outer_lip", range(48, 59), true, {255, 0, 0}},
      {"inner_lip", range(60, 67), true, {255, 0, 255}},
  };
  return spec;
}

void ConnectivitySpec::validate() const {
  std::set<std::array<int, 3>> colors;
  for (const auto& g : groups) {
    for (int idx : g.indices)
      if (idx < 0 || idx >= kNumLandmarks)
        throw ConfigError("landmark group '" + g.name + "' references index " + std::to_string(idx));
    if (!colors.insert({g.color.r, g.color.g, g.color.b}).second)
      throw ConfigError("landmark group '" + g.name + "' reuses another group's color");
  }
  if (line_width < 1 || reference_resolution < 1) throw ConfigError("line width must be positive");
}

int ConnectivitySpec::scaled_line_width(int height, int width) const {
  const double scaled = double(line_width) * std::min(height, width) / reference_resolution;
  return std::max(1, static_cast<int>(std::lround(scaled)));
}

namespace {

struct Canvas {
  Image& img;
  int brush;
  Eigen::Vector3f color;

  void stamp(int row, int col) {
    const int lo = -(brush - 1) / 2, hi = brush / 2;
    for (int dy = lo; dy <= hi; ++dy)
      for (int dx = lo; dx <= hi; ++dx) {
        const int r = row + dy, c = col + dx;
        if (r >= 0 && r < img.height && c >= 0 && c < img.width) img.at(r, c) = color;
      }
  }

  // Integer Bresenham between pixel centers.
  void line(int r0, int c0, int r1, int c1) {
    const int dc = std::abs(c1 - c0), dr = -std::abs(r1 - r0);
    const int sc = c0 < c1 ? 1 : -1, sr = r0 < r1 ? 1 : -1;
    int err = dc + dr;
    while (true) {
      stamp(r0, c0);
      if (r0 == r1 && c0 == c1) break;
      const int e2 = 2 * err;
      if (e2 >= dr) {
        err += dr;
        c0 += sc;
      }
      if (e2 <= dc) {
        err += dc;
        r0 += sr;
      }
    }
  }
};

int to_pixel(float v, int extent) {
  return std::clamp(static_cast<int>(std::floor(v * static_cast<float>(extent))), 0, extent - 1);
}

}  // namespace

Image rasterize_landmarks(const LandmarkSet& landmarks, const ConnectivitySpec& spec, int height, int width) {
  if (height < 8 || width < 8) throw ContractError("rasterize_landmarks: canvas must be at least 8x8");
  spec.validate();
  if (!landmarks.points.allFinite()) throw DataError("rasterize_landmarks: non-finite landmark coordinates");

  Image img(height, width, -1.0f);
  Canvas canvas{img, spec.scaled_line_width(height, width), {}};
  for (const auto& g : spec.groups) {
    canvas.color = {from_byte(g.color.r), from_byte(g.color.g), from_byte(g.color.b)};
    const auto n = g.indices.size();
    if (n == 0) continue;
    auto px = [&](int idx) {
      return std::pair{to_pixel(landmarks.points(idx, 1), height), to_pixel(landmarks.points(idx, 0), width)};
    };
    if (n == 1) {
      auto [r, c] = px(g.indices[0]);
      canvas.stamp(r, c);
      continue;
    }
    const std::size_t segments = g.closed ? n : n - 1;
    for (std::size_t k = 0; k < segments; ++k) {
      auto [r0, c0] = px(g.indices[k]);
      auto [r1, c1] = px(g.indices[(k + 1) % n]);
      canvas.line(r0, c0, r1, c1);
    }
  }
  return img;
}

void Dataset::renumber() {
  for (std::size_t i = 0; i < sequences.size(); ++i) sequences[i].id = static_cast<int>(i);
}

namespace {

std::vector<std::vector<float>> read_landmark_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read " + path.string());
  std::vector<std::vector<float>> records;
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream ss(line);
    std::vector<float> values;
    std::string tok;
    while (ss >> tok) {
      try {
        values.push_back(std::stof(tok));
      } catch (const std::exception&) {
        throw DataError("unparseable landmark value '" + tok + "' in " + path.string());
      }
    }
    records.push_back(std::move(values));
  }
  return records;
}

}  // namespace

std::optional<VideoSequence> load_sequence(const fs::path& dir, const DatasetLayout& layout, IngestReport& rep) {
  const std::string name = dir.filename().string();
  const fs::path lm_path = dir / layout.landmark_file;
  const fs::path frames_path = dir / layout.frames_dir;
  if (!fs::exists(lm_path)) {
    rep.rejected.push_back(name + ": missing " + layout.landmark_file);
    return std::nullopt;
  }
  if (!fs::is_directory(frames_path)) {
    rep.rejected.push_back(name + ": missing " + layout.frames_dir + "/");
    return std::nullopt;
  }
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(frames_path))
    if (entry.is_regular_file() && entry.path().extension() == ".png") files.push_back(entry.path());
  std::sort(files.begin(), files.end());

  std::vector<std::vector<float>> records;
  try {
    records = read_landmark_file(lm_path);
  } catch (const DataError& e) {
    rep.rejected.push_back(name + ": " + e.what());
    return std::nullopt;
  }
  if (records.size() != files.size()) {
    rep.rejected.push_back(name + ": " + std::to_string(files.size()) + " frames but " +
                           std::to_string(records.size()) + " landmark records");
    return std::nullopt;
  }

  VideoSequence seq;
  seq.name = name;
  seq.identity = name;
  for (std::size_t k = 0; k < files.size(); ++k) {
    FrameRecord frame;
    try {
      frame.landmarks = LandmarkSet::from_values(records[k]);
    } catch (const DataError& e) {
      rep.rejected.push_back(name + ": frame " + std::to_string(k) + ": " + e.what());
      return std::nullopt;
    }
    try {
      frame.image = read_png(files[k]);
    } catch (const DataError&) {
      ++rep.skipped_frames;
      continue;
    }
    if (!seq.frames.empty() && !frame.image.same_shape(seq.frames.front().image)) {
      rep.rejected.push_back(name + ": inconsistent frame sizes");
      return std::nullopt;
    }
    frame.landmark_image =
        rasterize_landmarks(frame.landmarks, layout.connectivity, frame.image.height, frame.image.width);
    seq.frames.push_back(std::move(frame));
  }
  if (seq.frames.empty()) {
    rep.rejected.push_back(name + ": no readable frames");
    return std::nullopt;
  }
  std::ifstream id_file(dir / "identity.txt");
  std::string identity;
  if (id_file && std::getline(id_file, identity) && !identity.empty()) seq.identity = identity;
  return seq;
}

std::vector<LandmarkSet> read_landmark_track(const fs::path& path) {
  std::vector<LandmarkSet> out;
  for (const auto& r : read_landmark_file(path)) out.push_back(LandmarkSet::from_values(r));
  return out;
}

Dataset ingest_dataset(const fs::path& root, const DatasetLayout& layout, IngestReport* report) {
  if (!fs::is_directory(root)) throw DataError("dataset root does not exist: " + root.string());
  layout.connectivity.validate();
  IngestReport local;
  IngestReport& rep = report ? *report : local;

  std::vector<fs::path> dirs;
  for (const auto& entry : fs::directory_iterator(root))
    if (entry.is_directory()) dirs.push_back(entry.path());
  std::sort(dirs.begin(), dirs.end());

  Dataset dataset;
  for (const auto& dir : dirs)
    if (auto seq = load_sequence(dir, layout, rep)) dataset.sequences.push_back(std::move(*seq));
  dataset.renumber();
  return dataset;
}

void write_dataset(const Dataset& dataset, const fs::path& root, const DatasetLayout& layout) {
  for (const auto& seq : dataset.sequences) {
    const fs::path dir = root / (seq.name.empty() ? std::to_string(seq.id) : seq.name);
    fs::create_directories(dir / layout.frames_dir);
    std::ofstream lm(dir / layout.landmark_file);
    lm << std::setprecision(9);
    for (std::size_t k = 0; k < seq.frames.size(); ++k) {
      std::ostringstream fname;
      fname << std::setw(6) << std::setfill('0') << k << ".png";
      write_png(dir / layout.frames_dir / fname.str(), seq.frames[k].image);
      const auto& pts = seq.frames[k].landmarks.points;
      for (int i = 0; i < kNumLandmarks; ++i) lm << (i ? " " : "") << pts(i, 0) << ' ' << pts(i, 1);
      lm << '\n';
    }
    if (!lm) throw DataError("failed writing " + (dir / layout.landmark_file).string());
    if (!seq.identity.empty() && seq.identity != seq.name) std::ofstream(dir / "identity.txt") << seq.identity << '\n';
  }
}

std::string dataset_index_json(const Dataset& dataset) {
  nlohmann::json j;
  j["sequences"] = nlohmann::json::array();
  for (const auto& seq : dataset.sequences) {
    nlohmann::json s;
    s["id"] = seq.id;
    s["name"] = seq.name;
    s["identity"] = seq.identity;
    s["frames"] = seq.frames.size();
    if (!seq.frames.empty()) {
      s["height"] = seq.frames.front().image.height;
      s["width"] = seq.frames.front().image.width;
    }
    j["sequences"].push_back(std::move(s));
  }
  return j.dump(2) + "\n";
}

Episode sample_episode(const Dataset& dataset, int shots, std::mt19937_64& rng) {
  if (shots < 1) throw ConfigError("episode shot count K must be at least 1");
  if (dataset.empty()) throw ContractError("sample_episode: empty dataset");
  Episode ep;
  ep.video = std::uniform_int_distribution<int>(0, dataset.size() - 1)(rng);
  const int n = static_cast<int>(dataset[ep.video].frames.size());
  if (n < 2) throw ContractError("sample_episode: sequence " + std::to_string(ep.video) + " has fewer than 2 frames");
  ep.target = std::uniform_int_distribution<int>(0, n - 1)(rng);

  std::vector<int> others;
  others.reserve(n - 1);
  for (int i = 0; i < n; ++i)
    if (i != ep.target) others.push_back(i);
  const int m = static_cast<int>(others.size());
  if (m >= shots) {
    // Partial Fisher-Yates over the frames other than the target.
    for (int k = 0; k < shots; ++k) {
      const int j = std::uniform_int_distribution<int>(k, m - 1)(rng);
      std::swap(others[k], others[j]);
      ep.support.push_back(others[k]);
    }
  } else {
    for (int k = 0; k < shots; ++k) ep.support.push_back(others[std::uniform_int_distribution<int>(0, m - 1)(rng)]);
  }
  return ep;
}

}  // namespace fsh
