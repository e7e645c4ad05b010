#include "fsh/checkpoint.hpp"

#include "fsh/errors.hpp"

#include <openssl/evp.h>

#include <array>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace fs = std::filesystem;

namespace fsh {

namespace {

constexpr char kMagic[8] = {'F', 'S', 'H', 'C', 'K', 'P', 'T', '\0'};

template <typename T>
void write_pod(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T read_pod(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!in) throw DataError("truncated checkpoint");
  return v;
}

}  // namespace

void Archive::put(const std::string& name, Eigen::MatrixXf tensor) {
  for (auto& [n, t] : tensors_) {
    if (n == name) {
      t = std::move(tensor);
      return;
    }
  }
  tensors_.emplace_back(name, std::move(tensor));
}

bool Archive::has(const std::string& name) const {
  for (const auto& [n, t] : tensors_)
    if (n == name) return true;
  return false;
}

const Eigen::MatrixXf& Archive::get(const std::string& name) const {
  for (const auto& [n, t] : tensors_)
    if (n == name) return t;
  throw DataError("checkpoint has no tensor '" + name + "'");
}

void Archive::save(const fs::path& path) const {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write checkpoint " + tmp.string());
    out.write(kMagic, sizeof kMagic);
    write_pod<std::uint32_t>(out, kArchiveVersion);
    const std::string text = manifest.dump();
    write_pod<std::uint64_t>(out, text.size());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(tensors_.size()));
    for (const auto& [name, t] : tensors_) {
      write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
      out.write(name.data(), static_cast<std::streamsize>(name.size()));
      write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(t.rows()));
      write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(t.cols()));
      out.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(sizeof(float) * t.size()));
    }
    out.flush();
    if (!out) throw DataError("failed writing checkpoint " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    std::error_code ignored;
    fs::remove(tmp, ignored);
    throw DataError("cannot move checkpoint into place at " + path.string() + ": " + ec.message());
  }
}

Archive Archive::load(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  char magic[8];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kMagic, sizeof kMagic) != 0) throw DataError("not a checkpoint: " + path.string());
  const auto version = read_pod<std::uint32_t>(in);
  if (version != kArchiveVersion) throw DataError("unsupported checkpoint version " + std::to_string(version));
  const auto mlen = read_pod<std::uint64_t>(in);
  std::string text(mlen, '\0');
  in.read(text.data(), static_cast<std::streamsize>(mlen));
  if (!in) throw DataError("truncated checkpoint manifest");
  Archive a;
  a.manifest = nlohmann::json::parse(text);
  const auto count = read_pod<std::uint32_t>(in);
  for (std::uint32_t k = 0; k < count; ++k) {
    const auto nlen = read_pod<std::uint32_t>(in);
    std::string name(nlen, '\0');
    in.read(name.data(), nlen);
    const auto rows = read_pod<std::uint32_t>(in);
    const auto cols = read_pod<std::uint32_t>(in);
    Eigen::MatrixXf t(rows, cols);
    in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(sizeof(float) * t.size()));
    if (!in) throw DataError("truncated tensor '" + name + "'");
    a.tensors_.emplace_back(std::move(name), std::move(t));
  }
  return a;
}

void store_parameters(Archive& archive, const std::string& prefix, const ParameterSet<float>& params) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& p = params[i];
    archive.put(prefix + "/" + p.name, p.value);
    if (p.spectral) {
      archive.put(prefix + "/" + p.name + "#u", p.sn_u);
      archive.put(prefix + "/" + p.name + "#v", p.sn_v);
    }
  }
}

void load_parameters(const Archive& archive, const std::string& prefix, ParameterSet<float>& params) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    const auto& t = archive.get(prefix + "/" + p.name);
    if (t.rows() != p.value.rows() || t.cols() != p.value.cols())
      throw DataError("checkpoint tensor '" + prefix + "/" + p.name + "' has the wrong shape");
    p.value = t;
    if (p.spectral) {
      p.sn_u = archive.get(prefix + "/" + p.name + "#u").col(0);
      p.sn_v = archive.get(prefix + "/" + p.name + "#v").col(0);
    }
    p.zero_grad();
  }
}

nlohmann::json to_json(const NetworkConfig& c) {
  return {{"resolution", c.resolution},
          {"min_channels", c.min_channels},
          {"max_channels", c.max_channels},
          {"embedding_dim", c.embedding_dim},
          {"num_videos", c.num_videos},
          {"down_blocks", c.down_blocks},
          {"bottleneck_blocks", c.bottleneck_blocks},
          {"up_blocks", c.up_blocks},
          {"attention_down", c.attention_down},
          {"attention_up", c.attention_up}};
}

NetworkConfig network_config_from_json(const nlohmann::json& j) {
  NetworkConfig c;
  c.resolution = j.at("resolution");
  c.min_channels = j.at("min_channels");
  c.max_channels = j.at("max_channels");
  c.embedding_dim = j.at("embedding_dim");
  c.num_videos = j.at("num_videos");
  c.down_blocks = j.at("down_blocks");
  c.bottleneck_blocks = j.at("bottleneck_blocks");
  c.up_blocks = j.at("up_blocks");
  c.attention_down = j.at("attention_down").get<std::vector<int>>();
  c.attention_up = j.at("attention_up").get<std::vector<int>>();
  c.validate();
  return c;
}

nlohmann::json adaptive_layout_json(const std::vector<AdaptiveSlice>& layout) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& s : layout)
    out.push_back({{"layer", s.layer}, {"offset", s.offset}, {"channels", s.channels}, {"order", "scale_delta,bias"}});
  return out;
}

std::string sha256_hex(std::string_view bytes) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
  unsigned int len = 0;
  EVP_Digest(bytes.data(), bytes.size(), digest.data(), &len, EVP_sha256(), nullptr);
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i) hex << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
  return hex.str();
}

std::string file_sha256(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return sha256_hex(ss.str());
}

}  // namespace fsh
