#include "fsh/data.hpp"
#include "fsh/errors.hpp"
#include "fsh/toy.hpp"

#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <vector>

using namespace fsh;
namespace fs = std::filesystem;

namespace {

ConnectivitySpec single_group(std::vector<int> indices, Rgb color, bool closed = false) {
  ConnectivitySpec spec;
  spec.groups = {{"g", std::move(indices), closed, color}};
  return spec;
}

LandmarkSet with_points(std::initializer_list<std::pair<float, float>> pts) {
  LandmarkSet lm;
  int i = 0;
  for (auto [x, y] : pts) {
    lm.points(i, 0) = x;
    lm.points(i, 1) = y;
    ++i;
  }
  return lm;
}

Eigen::Vector3f rgb(Rgb c) { return {from_byte(c.r), from_byte(c.g), from_byte(c.b)}; }

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("fsh_data_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST_SUITE("data") {
  TEST_CASE("empty spec draws nothing") {
    ConnectivitySpec spec;
    const Image img = rasterize_landmarks(LandmarkSet{}, spec, 16, 16);
    CHECK((img.pixels.array() == -1.0f).all());
  }

  TEST_CASE("horizontal red segment on row 32") {
    const Rgb red{255, 0, 0};
    const auto img = rasterize_landmarks(with_points({{0.25f, 0.5f}, {0.75f, 0.5f}}), single_group({0, 1}, red), 64, 64);
    CHECK(img.at(32, 32) == rgb(red));
    int drawn = 0;
    for (int r = 0; r < 64; ++r)
      for (int c = 0; c < 64; ++c) {
        const bool on = img.at(r, c) != Eigen::Vector3f::Constant(-1.0f);
        drawn += on;
        if (on) {
          CHECK(r == 32);
          CHECK(c >= 16);
          CHECK(c <= 48);
        }
      }
    CHECK(drawn == 33);
  }

  TEST_CASE("steep segment matches the major-axis stepping oracle") {
    // Oracle pixel list from tests/oracles/derive.py.
    const std::vector<std::pair<int, int>> expected = {
        {6, 19},  {7, 19},  {8, 19},  {9, 19},  {10, 20}, {11, 20}, {12, 20}, {13, 20}, {14, 20}, {15, 20},
        {16, 20}, {17, 20}, {18, 21}, {19, 21}, {20, 21}, {21, 21}, {22, 21}, {23, 21}, {24, 21}, {25, 22},
        {26, 22}, {27, 22}, {28, 22}, {29, 22}, {30, 22}, {31, 22}, {32, 22}, {33, 23}, {34, 23}, {35, 23},
        {36, 23}, {37, 23}, {38, 23}, {39, 23}, {40, 24}, {41, 24}, {42, 24}, {43, 24}, {44, 24}, {45, 24},
        {46, 24}, {47, 24}, {48, 25}, {49, 25}, {50, 25}, {51, 25}};
    const auto img =
        rasterize_landmarks(with_points({{0.30f, 0.10f}, {0.40f, 0.80f}}), single_group({0, 1}, {0, 255, 0}), 64, 64);
    std::set<std::pair<int, int>> got;
    for (int r = 0; r < 64; ++r)
      for (int c = 0; c < 64; ++c)
        if (img.at(r, c) != Eigen::Vector3f::Constant(-1.0f)) got.insert({r, c});
    CHECK(got == std::set<std::pair<int, int>>(expected.begin(), expected.end()));
  }

  TEST_CASE("line width scales with resolution") {
    auto spec = single_group({0, 1}, {255, 0, 0});
    CHECK(spec.scaled_line_width(64, 64) == 1);
    CHECK(spec.scaled_line_width(128, 128) == 2);
    CHECK(spec.scaled_line_width(256, 256) == 4);
    const auto img = rasterize_landmarks(with_points({{0.25f, 0.5f}, {0.75f, 0.5f}}), spec, 128, 128);
    CHECK(img.at(64, 64) == rgb({255, 0, 0}));
    CHECK(img.at(65, 64) == rgb({255, 0, 0}));
    CHECK(img.at(63, 64) == Eigen::Vector3f::Constant(-1.0f));
  }

  TEST_CASE("rasterization is deterministic and uses only spec colors") {
    const auto toy = make_toy_dataset({.identities = 1, .frames = 3});
    const auto spec = ConnectivitySpec::ibug68();
    std::set<std::array<float, 3>> allowed = {{-1.0f, -1.0f, -1.0f}};
    for (const auto& g : spec.groups) {
      const auto c = rgb(g.color);
      allowed.insert({c(0), c(1), c(2)});
    }
    for (const auto& f : toy[0].frames) {
      const auto a = rasterize_landmarks(f.landmarks, spec, 64, 64);
      const auto b = rasterize_landmarks(f.landmarks, spec, 64, 64);
      CHECK(a == b);
      CHECK(a == f.landmark_image);
      for (int k = 0; k < a.pixels.cols(); ++k)
        CHECK(allowed.count({a.pixels(0, k), a.pixels(1, k), a.pixels(2, k)}) == 1);
    }
  }

  TEST_CASE("rasterization errors") {
    LandmarkSet lm;
    CHECK_THROWS_AS(rasterize_landmarks(lm, ConnectivitySpec::ibug68(), 4, 64), ContractError);
    CHECK_THROWS_AS(rasterize_landmarks(lm, single_group({0, 70}, {1, 2, 3}), 16, 16), ConfigError);
    auto dup = ConnectivitySpec::ibug68();
    dup.groups[1].color = dup.groups[0].color;
    CHECK_THROWS_AS(dup.validate(), ConfigError);
    lm.points(3, 0) = std::numeric_limits<float>::quiet_NaN();
    CHECK_THROWS_AS(rasterize_landmarks(lm, ConnectivitySpec::ibug68(), 16, 16), DataError);
  }

  TEST_CASE("landmark parsing clamps and validates") {
    std::vector<float> xy(136, 0.5f);
    xy[0] = 1.5f;
    xy[1] = -0.2f;
    const auto lm = LandmarkSet::from_values(xy);
    CHECK(lm.points(0, 0) == 1.0f);
    CHECK(lm.points(0, 1) == 0.0f);
    xy.pop_back();
    CHECK_THROWS_AS(LandmarkSet::from_values(xy), DataError);
    xy.push_back(std::numeric_limits<float>::infinity());
    CHECK_THROWS_AS(LandmarkSet::from_values(xy), DataError);
  }

  TEST_CASE("ingest: three sequences of ten frames") {
    const auto root = scratch("three");
    write_dataset(make_toy_dataset({.identities = 3, .frames = 10, .resolution = 16}), root);
    IngestReport report;
    const auto ds = ingest_dataset(root, {}, &report);
    REQUIRE(ds.size() == 3);
    for (int i = 0; i < 3; ++i) {
      CHECK(ds[i].id == i);
      CHECK(ds[i].frames.size() == 10);
    }
    CHECK(report.rejected.empty());
    CHECK(dataset_index_json(ds) == dataset_index_json(ingest_dataset(root, {})));
  }

  TEST_CASE("ingest round-trips frames and landmarks") {
    const auto root = scratch("roundtrip");
    const auto toy = make_toy_dataset({.identities = 1, .frames = 4, .resolution = 16});
    write_dataset(toy, root);
    const auto ds = ingest_dataset(root, {});
    REQUIRE(ds.size() == 1);
    for (std::size_t k = 0; k < 4; ++k) {
      CHECK(ds[0].frames[k].landmarks == toy[0].frames[k].landmarks);
      CHECK(ds[0].frames[k].landmark_image == toy[0].frames[k].landmark_image);
      CHECK((ds[0].frames[k].image.pixels - toy[0].frames[k].image.pixels).cwiseAbs().maxCoeff() <= 1.0f / 127.5f);
    }
  }

  TEST_CASE("ingest rejects a sequence without landmarks and skips corrupt frames") {
    const auto root = scratch("reject");
    write_dataset(make_toy_dataset({.identities = 2, .frames = 5, .resolution = 16}), root);
    fs::remove(root / "id0_v0" / "landmarks.txt");
    std::ofstream(root / "id1_v0" / "frames" / "000002.png") << "not a png";
    IngestReport report;
    const auto ds = ingest_dataset(root, {}, &report);
    REQUIRE(ds.size() == 1);
    CHECK(ds[0].name == "id1_v0");
    CHECK(ds[0].frames.size() == 4);
    CHECK(report.skipped_frames == 1);
    REQUIRE(report.rejected.size() == 1);
    CHECK(report.rejected[0].find("id0_v0") != std::string::npos);
  }

  TEST_CASE("ingest of an empty root gives an empty index; a missing root throws") {
    const auto root = scratch("empty");
    CHECK(ingest_dataset(root, {}).empty());
    CHECK_THROWS_AS(ingest_dataset(root / "nope", {}), DataError);
  }

  TEST_CASE("identity.txt groups sequences") {
    const auto root = scratch("identity");
    write_dataset(make_toy_dataset({.identities = 1, .videos_per_identity = 2, .frames = 2, .resolution = 16}), root);
    const auto ds = ingest_dataset(root, {});
    REQUIRE(ds.size() == 2);
    CHECK(ds[0].identity == "id0");
    CHECK(ds[1].identity == "id0");
  }

  TEST_CASE("episodes: K=8 on nine frames takes every other frame") {
    Dataset ds = make_toy_dataset({.identities = 1, .frames = 9, .resolution = 16});
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 20; ++trial) {
      const auto ep = sample_episode(ds, 8, rng);
      std::set<int> s(ep.support.begin(), ep.support.end());
      CHECK(s.size() == 8);
      CHECK(s.count(ep.target) == 0);
    }
  }

  TEST_CASE("episodes: distinct support excluding target when long enough") {
    Dataset ds = make_toy_dataset({.identities = 2, .frames = 20, .resolution = 16});
    std::mt19937_64 rng(4);
    for (int trial = 0; trial < 200; ++trial) {
      const auto ep = sample_episode(ds, 8, rng);
      std::set<int> s(ep.support.begin(), ep.support.end());
      CHECK(s.size() == 8);
      CHECK(s.count(ep.target) == 0);
    }
  }

  TEST_CASE("episodes: short sequences fall back to replacement without the target") {
    Dataset ds = make_toy_dataset({.identities = 1, .frames = 3, .resolution = 16});
    std::mt19937_64 rng(5);
    const auto ep = sample_episode(ds, 8, rng);
    CHECK(ep.shots() == 8);
    for (int s : ep.support) CHECK(s != ep.target);
  }

  TEST_CASE("episodes are reproducible and uniform over sequences") {
    Dataset ds = make_toy_dataset({.identities = 10, .frames = 4, .resolution = 16});
    std::mt19937_64 a(11), b(11);
    CHECK(sample_episode(ds, 2, a) == sample_episode(ds, 2, b));
    std::mt19937_64 rng(12);
    std::map<int, int> counts;
    for (int i = 0; i < 10000; ++i) ++counts[sample_episode(ds, 2, rng).video];
    for (int v = 0; v < 10; ++v) CHECK(std::abs(counts[v] / 10000.0 - 0.1) <= 0.05);
  }

  TEST_CASE("episode errors") {
    Dataset ds = make_toy_dataset({.identities = 1, .frames = 4, .resolution = 16});
    std::mt19937_64 rng(1);
    CHECK_THROWS_AS(sample_episode(ds, 0, rng), ConfigError);
    Dataset empty;
    CHECK_THROWS(sample_episode(empty, 2, rng));
  }
}
