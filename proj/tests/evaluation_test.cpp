#include "fsh/errors.hpp"
#include "fsh/evaluation.hpp"
#include "fsh/toy.hpp"

#include <doctest.h>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <set>
#include <sstream>
#include <thread>

using namespace fsh;
namespace fs = std::filesystem;

namespace {

Eigen::MatrixXd gaussian_samples(int n, int dim, std::uint64_t seed, const Eigen::VectorXd& mean) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  Eigen::MatrixXd mix(dim, dim);
  mix << 1.0, 0.0, 0.0, 0.3, 0.8, 0.0, -0.2, 0.1, 0.5;
  Eigen::MatrixXd out(n, dim);
  for (int i = 0; i < n; ++i) {
    Eigen::VectorXd z(dim);
    for (int k = 0; k < dim; ++k) z(k) = g(rng);
    out.row(i) = (mix * z).transpose();
  }
  // Pin the sample mean to the population mean; covariances stay sampled.
  out.rowwise() -= out.colwise().mean();
  out.rowwise() += mean.transpose();
  return out;
}

Image constant_luma(double p, int size = 16) {
  Image img(size, size);
  img.pixels.setConstant(static_cast<float>(2 * p - 1));
  return img;
}

Image random_image(int size, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(-1, 1);
  Image img(size, size);
  for (Eigen::Index k = 0; k < img.pixels.size(); ++k) img.pixels.data()[k] = u(rng);
  return img;
}

Eigen::VectorXd mean_pixels(const Image& img) { return img.pixels.rowwise().mean().cast<double>(); }

}  // namespace

TEST_SUITE("evaluation") {
  TEST_CASE("FID of a set with itself is zero") {
    const auto x = gaussian_samples(500, 3, 1, Eigen::Vector3d::Zero());
    CHECK(compute_fid(x, x) < 1e-6);
  }

  TEST_CASE("FID between shifted Gaussians matches the squared mean offset") {
    const Eigen::Vector3d d(0.5, -0.25, 1.0);
    const auto a = gaussian_samples(10000, 3, 2, Eigen::Vector3d::Zero());
    const auto b = gaussian_samples(10000, 3, 3, d);
    const double fid = compute_fid(a, b);
    CHECK(std::abs(fid - 1.3125) <= 0.02 * 1.3125);
  }

  TEST_CASE("FID is symmetric and order invariant") {
    const auto a = gaussian_samples(300, 3, 4, Eigen::Vector3d::Zero());
    const auto b = gaussian_samples(300, 3, 5, Eigen::Vector3d(1, 0, 0));
    CHECK(std::abs(compute_fid(a, b) - compute_fid(b, a)) <= 1e-6);
    Eigen::PermutationMatrix<Eigen::Dynamic> perm(300);
    perm.setIdentity();
    std::mt19937_64 rng(6);
    std::shuffle(perm.indices().data(), perm.indices().data() + 300, rng);
    CHECK(std::abs(compute_fid(perm * a, b) - compute_fid(a, b)) <= 1e-6);
  }

  TEST_CASE("FID regularizes rank-deficient covariances and rejects bad input") {
    const auto a = gaussian_samples(3, 3, 7, Eigen::Vector3d::Zero());
    const auto b = gaussian_samples(3, 3, 8, Eigen::Vector3d::Ones());
    const double fid = compute_fid(a, b);
    CHECK(std::isfinite(fid));
    CHECK(fid >= 0.0);
    Eigen::MatrixXd bad = a;
    bad(0, 0) = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(compute_fid(bad, b), DataError);
    CHECK_THROWS_AS(compute_fid(a, Eigen::MatrixXd::Zero(3, 2)), ContractError);
  }

  TEST_CASE("SSIM identities and the constant-image reduction") {
    const Image a = random_image(24, 1), b = random_image(24, 2);
    CHECK(compute_ssim(a, a) == 1.0);
    CHECK(compute_ssim(a, b) == doctest::Approx(compute_ssim(b, a)).epsilon(1e-12));
    CHECK(compute_ssim(a, b) < 1.0);
    CHECK(compute_ssim(a, b) >= -1.0);
    CHECK(std::abs(compute_ssim(constant_luma(0.5), constant_luma(0.75)) - 0.9230863893674625) <= 1e-6);
    CHECK(std::abs(compute_ssim(constant_luma(0.25), constant_luma(0.75)) - 0.6000639897616381) <= 1e-6);
    CHECK(std::abs(compute_ssim(constant_luma(0.0), constant_luma(1.0)) - 9.999000099990002e-05) <= 1e-6);
    CHECK(std::abs(compute_ssim(constant_luma(0.25, 5), constant_luma(0.75, 5)) - 0.6000639897616381) <= 1e-6);
    CHECK_THROWS_AS(compute_ssim(a, random_image(16, 3)), ContractError);
  }

  TEST_CASE("CSIM properties") {
    const Eigen::Vector3d v(1, 2, -0.5);
    CHECK(cosine_similarity(v, v) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(cosine_similarity(v, -v) == doctest::Approx(-1.0).epsilon(1e-15));
    CHECK(cosine_similarity(Eigen::Vector2d(1, 0), Eigen::Vector2d(0, 3)) == 0.0);
    CHECK(cosine_similarity(v, 7.5 * Eigen::Vector3d(0.3, 1, 1)) ==
          doctest::Approx(cosine_similarity(v, Eigen::Vector3d(0.3, 1, 1))).epsilon(1e-15));
    std::ostringstream captured;
    auto* old = std::clog.rdbuf(captured.rdbuf());
    const double zero = cosine_similarity(v, Eigen::Vector3d::Zero());
    std::clog.rdbuf(old);
    CHECK(zero == 0.0);
    CHECK_FALSE(captured.str().empty());
    CHECK_THROWS_AS(cosine_similarity(v, Eigen::Vector2d(1, 1)), ContractError);
    const Image img = random_image(16, 4);
    CHECK(compute_csim(img, img, mean_pixels) == doctest::Approx(1.0).epsilon(1e-12));
  }

  TEST_CASE("pooled feature embedder") {
    const auto reg = ExtractorRegistry<float>::standard();
    const auto embed = pooled_feature_embedder(reg, "pyramid_b");
    const Image a = random_image(16, 5);
    const auto e = embed(a);
    CHECK(e.size() > 0);
    CHECK(embed(a) == e);
    CHECK_THROWS_AS(pooled_feature_embedder(reg, "nope"), ConfigError);
  }

  TEST_CASE("self-reenactment splits are disjoint") {
    const Dataset ds = make_toy_dataset({.identities = 20, .frames = 40, .resolution = 16});
    std::mt19937_64 rng(1);
    std::vector<std::string> skipped;
    const auto splits = make_reenactment_splits(ds, 8, 32, 50, rng, &skipped);
    CHECK(splits.size() == 20);
    CHECK(skipped.empty());
    for (const auto& s : splits) {
      CHECK(s.finetune.size() == 8);
      CHECK(s.holdout.size() == 32);
      std::set<int> f(s.finetune.begin(), s.finetune.end());
      for (int h : s.holdout) CHECK(f.count(h) == 0);
    }
  }

  TEST_CASE("videos too short for a disjoint split are skipped") {
    Dataset ds = make_toy_dataset({.identities = 2, .frames = 48, .resolution = 16});
    ds.sequences[1].frames.resize(30);
    std::mt19937_64 rng(1);
    std::vector<std::string> skipped;
    const auto splits = make_reenactment_splits(ds, 16, 32, 50, rng, &skipped);
    REQUIRE(splits.size() == 1);
    CHECK(splits[0].video == 0);
    REQUIRE(skipped.size() == 1);
    CHECK(skipped[0].find(ds[1].name) != std::string::npos);
  }

  TEST_CASE("at most max_videos are sampled, deterministically") {
    const Dataset ds = make_toy_dataset({.identities = 10, .frames = 6, .resolution = 16});
    std::mt19937_64 r1(3), r2(3);
    const auto a = make_reenactment_splits(ds, 2, 2, 4, r1, nullptr);
    const auto b = make_reenactment_splits(ds, 2, 2, 4, r2, nullptr);
    REQUIRE(a.size() == 4);
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].video == b[i].video);
    CHECK(std::is_sorted(a.begin(), a.end(), [](const auto& x, const auto& y) { return x.video < y.video; }));
  }

  TEST_CASE("an oracle model scores perfectly") {
    const Dataset ds = make_toy_dataset({.identities = 3, .frames = 12, .resolution = 16});
    // Looks up the real frame behind each landmark image.
    const Personalizer oracle = [&ds](const FinetuneSet&, const std::vector<Image>& track) {
      std::vector<Image> out;
      for (const auto& y : track) {
        const Image* match = nullptr;
        for (const auto& seq : ds.sequences)
          for (const auto& f : seq.frames)
            if (!match && f.landmark_image == y) match = &f.image;
        REQUIRE(match);
        out.push_back(*match);
      }
      return out;
    };
    ReenactmentOptions opt;
    opt.T = 4;
    opt.holdout = 6;
    const auto report = self_reenactment_eval(oracle, ds, opt, mean_pixels, mean_pixels, "mean");
    REQUIRE(report.rows.size() == 1);
    const auto& row = report.rows[0];
    CHECK(row.n_items == 18);
    CHECK(row.n_videos == 3);
    CHECK(row.ssim == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(row.csim == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(row.fid <= 1e-6);
    CHECK(report.videos_used == 3);
    CHECK(report.to_json()["protocol"]["holdout"] == 6);
    CHECK(report.to_csv().starts_with("method,T,fid,ssim,csim"));
  }

  TEST_CASE("reenactment defaults") {
    ReenactmentOptions opt;
    CHECK(opt.max_videos == 50);
    CHECK(opt.holdout == 32);
  }

  TEST_CASE("triplets: empty request, exclusions and determinism") {
    Dataset ds = make_toy_dataset({.identities = 3, .videos_per_identity = 2, .frames = 3, .resolution = 16});
    auto lonely = make_toy_dataset({.identities = 1, .frames = 3, .resolution = 16, .first_identity = 9});
    ds.sequences.push_back(lonely.sequences[0]);
    ds.renumber();
    std::vector<GeneratedFrame> fakes;
    for (const auto& seq : ds.sequences) fakes.push_back({seq.identity, seq.frames[0].image});
    std::mt19937_64 r0(1);
    CHECK(build_user_study_triplets(ds, fakes, 0, r0).triplets.empty());
    std::mt19937_64 r1(5), r2(5);
    const auto a = build_user_study_triplets(ds, fakes, 50, r1);
    const auto b = build_user_study_triplets(ds, fakes, 50, r2);
    REQUIRE(a.triplets.size() == 50);
    REQUIRE(a.excluded.size() == 1);
    CHECK(a.excluded[0].find(lonely[0].identity) != std::string::npos);
    for (std::size_t i = 0; i < 50; ++i) {
      CHECK(a.triplets[i].sources == b.triplets[i].sources);
      CHECK(a.triplets[i].fake_position == b.triplets[i].fake_position);
      // Two reals from distinct sequences plus the fake at its position.
      std::set<std::string> seqs;
      for (int p = 0; p < 3; ++p) {
        const auto& src = a.triplets[i].sources[static_cast<std::size_t>(p)];
        CHECK(src.starts_with(p == a.triplets[i].fake_position ? "fake:" : "real:"));
        if (src.starts_with("real:")) seqs.insert(src.substr(5, src.rfind(':') - 5));
      }
      CHECK(seqs.size() == 2);
    }
  }

  TEST_CASE("triplets: fake position is uniform") {
    const Dataset ds = make_toy_dataset({.identities = 2, .videos_per_identity = 2, .frames = 2, .resolution = 16});
    std::vector<GeneratedFrame> fakes;
    for (const auto& seq : ds.sequences) fakes.push_back({seq.identity, seq.frames[0].image});
    std::mt19937_64 rng(11);
    const auto m = build_user_study_triplets(ds, fakes, 3000, rng);
    std::array<int, 3> counts{};
    for (const auto& t : m.triplets) ++counts[static_cast<std::size_t>(t.fake_position)];
    for (int c : counts) CHECK(std::abs(c / 3000.0 - 1.0 / 3.0) <= 0.03);
  }

  TEST_CASE("triplets: files keep the answer key out of the manifest") {
    const fs::path dir = fs::temp_directory_path() / "fsh_triplets_test";
    fs::remove_all(dir);
    const Dataset ds = make_toy_dataset({.identities = 1, .videos_per_identity = 2, .frames = 2, .resolution = 16});
    std::vector<GeneratedFrame> fakes = {{ds[0].identity, ds[0].frames[0].image}};
    std::mt19937_64 rng(2);
    const auto m = build_user_study_triplets(ds, fakes, 4, rng, dir);
    CHECK(fs::exists(dir / "triplet_00000.png"));
    CHECK(fs::exists(dir / "triplet_00003.png"));
    std::ifstream in(dir / "manifest.json");
    const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    CHECK(text.find("fake_position") == std::string::npos);
    CHECK(text.find("fake:") == std::string::npos);
    CHECK(text.find("real:") == std::string::npos);
    const auto answers = nlohmann::json::parse(std::ifstream(dir / "answers.json"));
    CHECK(answers["2"]["fake_position"] == m.triplets[2].fake_position);
  }

  TEST_CASE("puppeteering ranking follows a stub embedder") {
    const auto toy = make_toy_dataset({.identities = 3, .frames = 2, .resolution = 16});
    FrameRecord still = toy[0].frames[0];
    still.image.pixels.setConstant(0.9f);
    // Candidate k's landmark images carry a tag the stub embedder reads back.
    auto tagged = [&](int k, float tag) {
      VideoSequence s = toy[k];
      for (auto& f : s.frames) f.landmark_image.pixels.setConstant(tag);
      return s;
    };
    const Personalizer echo = [](const FinetuneSet& set, const std::vector<Image>& track) {
      CHECK(set.size() == 1);
      return track;
    };
    const FaceEmbedder stub = [](const Image& img) -> Eigen::VectorXd {
      const float tag = img.pixels(0, 0);
      if (tag == 0.9f) return Eigen::Vector2d(1, 0);
      if (tag == 0.1f) return Eigen::Vector2d(0.8, 0.6);
      if (tag == 0.2f) return Eigen::Vector2d(0.3, std::sqrt(1 - 0.09));
      return Eigen::Vector2d(1, 0);
    };
    auto r = rank_puppeteering_sources(still, {tagged(1, 0.1f), tagged(2, 0.2f)}, echo, stub);
    REQUIRE(r.size() == 2);
    CHECK(r[0].index == 0);
    CHECK(r[0].score == doctest::Approx(0.8));
    CHECK(r[1].index == 1);
    CHECK(r[1].score == doctest::Approx(0.3));
    r = rank_puppeteering_sources(still, {tagged(1, 0.2f), tagged(2, 0.1f)}, echo, stub);
    CHECK(r[0].index == 1);
    // Perfect reproduction of the still ranks first; ties keep candidate order.
    r = rank_puppeteering_sources(still, {tagged(1, 0.1f), tagged(2, 0.9f), tagged(0, 0.9f)}, echo, stub);
    CHECK(r[0].index == 1);
    CHECK(r[0].score == doctest::Approx(1.0));
    CHECK(r[1].index == 2);
    CHECK(rank_puppeteering_sources(still, {tagged(1, 0.1f)}, echo, stub).size() == 1);
    CHECK(rank_puppeteering_sources(still, {}, echo, stub).empty());
  }

  TEST_CASE("timing harness") {
    int calls = 0;
    const auto noop = measure_times([&](int) { ++calls; }, [](int) {}, {1, 8}, 5);
    REQUIRE(noop.rows.size() == 2);
    CHECK(noop.rows[0].repetitions == 20);
    CHECK(calls == 2 * 21);
    CHECK(noop.rows[0].few_shot_ms < 0.5);
    CHECK(noop.rows[1].inference_ms_per_frame < 0.5);
    CHECK_FALSE(noop.hardware.empty());

    std::vector<int> seen;
    const auto slow = measure_times([](int) {}, [&](int frames) {
      seen.push_back(frames);
      std::this_thread::sleep_for(std::chrono::milliseconds(2 * frames));
    }, {1}, 20, 4);
    CHECK(seen.front() == 4);
    CHECK(slow.rows[0].inference_ms_per_frame >= 2.0);
    CHECK(slow.rows[0].inference_ms_per_frame < 6.0);
    CHECK(slow.to_json()["rows"][0]["T"] == 1);
  }
}
