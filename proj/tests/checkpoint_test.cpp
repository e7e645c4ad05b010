#include "fsh/checkpoint.hpp"
#include "fsh/errors.hpp"

#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <limits>

using namespace fsh;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("fsh_ckpt_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

NetworkConfig small() {
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

}  // namespace

TEST_SUITE("checkpoint") {
  TEST_CASE("archive round trip is bit exact") {
    const auto dir = scratch("roundtrip");
    Archive a;
    a.manifest["kind"] = "test";
    a.manifest["nested"] = {{"x", 1}, {"y", "z"}};
    Eigen::MatrixXf m = Eigen::MatrixXf::Random(5, 3);
    m(0, 0) = std::numeric_limits<float>::denorm_min();
    m(1, 0) = -0.0f;
    a.put("m", m);
    a.put("empty", Eigen::MatrixXf(0, 4));
    a.save(dir / "a.ckpt");
    const auto b = Archive::load(dir / "a.ckpt");
    CHECK(b.manifest == a.manifest);
    REQUIRE(b.has("m"));
    CHECK(std::memcmp(b.get("m").data(), m.data(), sizeof(float) * 15) == 0);
    CHECK(b.get("empty").cols() == 4);
    CHECK_FALSE(b.has("nope"));
    CHECK_THROWS_AS(b.get("nope"), DataError);
  }

  TEST_CASE("put replaces an existing tensor") {
    Archive a;
    a.put("t", Eigen::MatrixXf::Zero(2, 2));
    a.put("t", Eigen::MatrixXf::Ones(1, 3));
    CHECK(a.tensors().size() == 1);
    CHECK(a.get("t").cols() == 3);
  }

  TEST_CASE("save is atomic and leaves no temporary") {
    const auto dir = scratch("atomic");
    Archive a;
    a.put("t", Eigen::MatrixXf::Ones(2, 2));
    a.save(dir / "x.ckpt");
    a.put("t", Eigen::MatrixXf::Zero(2, 2));
    a.save(dir / "x.ckpt");
    int files = 0;
    for ([[maybe_unused]] const auto& e : fs::directory_iterator(dir)) ++files;
    CHECK(files == 1);
    CHECK(Archive::load(dir / "x.ckpt").get("t").isZero());
    a.save(dir / "sub" / "y.ckpt");
    CHECK(fs::exists(dir / "sub" / "y.ckpt"));
    // A rename that cannot complete leaves the target untouched and no temporary behind.
    fs::create_directories(dir / "blocked" / "inner");
    CHECK_THROWS_AS(a.save(dir / "blocked"), DataError);
    CHECK(fs::is_directory(dir / "blocked" / "inner"));
    CHECK_FALSE(fs::exists(dir / "blocked.tmp"));
  }

  TEST_CASE("corrupt or foreign files are rejected") {
    const auto dir = scratch("corrupt");
    std::ofstream(dir / "junk") << "hello world";
    CHECK_THROWS_AS(Archive::load(dir / "junk"), DataError);
    CHECK_THROWS_AS(Archive::load(dir / "absent"), DataError);
    Archive a;
    a.put("t", Eigen::MatrixXf::Ones(8, 8));
    a.save(dir / "ok.ckpt");
    const auto size = fs::file_size(dir / "ok.ckpt");
    fs::resize_file(dir / "ok.ckpt", size - 10);
    CHECK_THROWS_AS(Archive::load(dir / "ok.ckpt"), DataError);
  }

  TEST_CASE("parameter sets round trip including spectral vectors") {
    const auto dir = scratch("params");
    Generator<float> g(small(), 4);
    auto& p0 = g.params()[0];
    REQUIRE(p0.spectral);
    p0.sn_u.setRandom();
    Archive a;
    store_parameters(a, "G", g.params());
    a.save(dir / "g.ckpt");
    Generator<float> h(small(), 99);
    load_parameters(Archive::load(dir / "g.ckpt"), "G", h.params());
    for (std::size_t i = 0; i < g.params().size(); ++i) {
      CHECK(g.params()[i].value == h.params()[i].value);
      CHECK(g.params()[i].sn_u == h.params()[i].sn_u);
      CHECK(g.params()[i].sn_v == h.params()[i].sn_v);
    }
    Embedder<float> e(small(), 1);
    CHECK_THROWS_AS(load_parameters(a, "G", e.params()), DataError);
  }

  TEST_CASE("network config json round trip") {
    const auto c = small();
    CHECK(network_config_from_json(to_json(c)) == c);
    CHECK(network_config_from_json(to_json(NetworkConfig::full_scale(5))) == NetworkConfig::full_scale(5));
  }

  TEST_CASE("sha256 known answers") {
    CHECK(sha256_hex("") == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    const auto dir = scratch("sha");
    std::ofstream(dir / "f", std::ios::binary) << "abc";
    CHECK(file_sha256(dir / "f") == sha256_hex("abc"));
  }
}
