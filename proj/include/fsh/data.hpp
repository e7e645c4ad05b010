#pragma once

#include "fsh/image.hpp"

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace fsh {

inline constexpr int kNumLandmarks = 68;

/// 68 points in the iBUG layout, (x, y) normalized to [0,1] relative to the frame.
struct LandmarkSet {
  Eigen::Matrix<float, kNumLandmarks, 2> points = Eigen::Matrix<float, kNumLandmarks, 2>::Constant(0.5f);

  /// Builds from 136 interleaved x,y values. Throws DataError on a wrong
  /// count or non-finite values; in-range values are clamped to [0,1].
  static LandmarkSet from_values(std::span<const float> xy);
  bool operator==(const LandmarkSet&) const = default;
};

struct Rgb {
  std::uint8_t r = 0, g = 0, b = 0;
  bool operator==(const Rgb&) const = default;
};

struct LandmarkGroup {
  std::string name;
  std::vector<int> indices;
  bool closed = false;
  Rgb color;
};

/// How landmarks are connected and colored when rasterized.
struct ConnectivitySpec {
  std::vector<LandmarkGroup> groups;
  int line_width = 1;             ///< pixels at the reference resolution
  int reference_resolution = 64;  ///< line width scales with min(height, width) / this

  /// Jaw, brows, nose, eyes, outer and inner lip; one color per group.
  static ConnectivitySpec ibug68();
  /// Throws ConfigError on out-of-range indices or repeated colors.
  void validate() const;
  int scaled_line_width(int height, int width) const;
};

/// Draws the connectivity polylines on a -1 background with hard (aliased) lines.
Image rasterize_landmarks(const LandmarkSet& landmarks, const ConnectivitySpec& spec, int height, int width);

struct FrameRecord {
  Image image;
  LandmarkSet landmarks;
  Image landmark_image;
};

struct VideoSequence {
  int id = 0;
  std::string name;
  std::string identity;  ///< person label; several sequences may share one
  std::vector<FrameRecord> frames;
};

struct Dataset {
  std::vector<VideoSequence> sequences;

  bool empty() const { return sequences.empty(); }
  int size() const { return static_cast<int>(sequences.size()); }
  const VideoSequence& operator[](int i) const { return sequences.at(static_cast<std::size_t>(i)); }
  /// Reassigns ids 0..M-1 in storage order.
  void renumber();
};

struct DatasetLayout {
  std::string frames_dir = "frames";
  std::string landmark_file = "landmarks.txt";
  ConnectivitySpec connectivity = ConnectivitySpec::ibug68();
};

struct IngestReport {
  std::vector<std::string> rejected;  ///< "<sequence>: reason"
  int skipped_frames = 0;             ///< corrupt or unreadable images
};

/// Loads `<root>/<seq>/frames/*.png` with `<root>/<seq>/landmarks.txt`
/// (one line of 136 floats per frame, frames in filename order).
/// Sequences missing a landmark file are rejected and reported.
Dataset ingest_dataset(const std::filesystem::path& root, const DatasetLayout& layout, IngestReport* report = nullptr);

/// Parses a landmark file (one line of 136 floats per frame). Throws DataError.
std::vector<LandmarkSet> read_landmark_track(const std::filesystem::path& path);

/// Loads a single sequence directory; returns nullopt (and records why in
/// `report`) when it must be rejected.
std::optional<VideoSequence> load_sequence(const std::filesystem::path& dir, const DatasetLayout& layout,
                                           IngestReport& report);

/// Writes a dataset back into the on-disk layout read by ingest_dataset.
void write_dataset(const Dataset& dataset, const std::filesystem::path& root, const DatasetLayout& layout = {});

/// JSON index of sequences (id, name, identity, frame count).
std::string dataset_index_json(const Dataset& dataset);

struct Episode {
  int video = 0;
  int target = 0;
  std::vector<int> support;
  int shots() const { return static_cast<int>(support.size()); }
  bool operator==(const Episode&) const = default;
};

/// Uniform sequence and target frame; K support frames drawn without
/// replacement from the other frames, or with replacement when the sequence
/// has no more than K frames.
Episode sample_episode(const Dataset& dataset, int shots, std::mt19937_64& rng);

}  // namespace fsh
