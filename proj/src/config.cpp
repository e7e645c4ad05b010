#include "fsh/config.hpp"

#include "fsh/checkpoint.hpp"
#include "fsh/errors.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <algorithm>
#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace pt = boost::property_tree;

namespace fsh {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r\n") - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) out.push_back(trim(cur));
  return out;
}

long to_long(const std::string& key, const std::string& v) {
  long out = 0;
  const auto* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end) throw ConfigError("'" + key + "' expects an integer, got '" + v + "'");
  return out;
}

double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("'" + key + "' expects a number, got '" + v + "'");
  }
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("'" + key + "' expects true or false, got '" + v + "'");
}

std::vector<int> to_int_list(const std::string& key, const std::string& v) {
  std::vector<int> out;
  if (trim(v).empty()) return out;
  for (const auto& item : split(v, ',')) out.push_back(static_cast<int>(to_long(key, item)));
  return out;
}

std::string join(const std::vector<int>& xs) {
  std::string s;
  for (std::size_t i = 0; i < xs.size(); ++i) s += (i ? "," : "") + std::to_string(xs[i]);
  return s;
}

std::string num(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

using Setter = std::function<void(RunConfig&, const std::string&, const std::string&)>;

const std::map<std::string, std::map<std::string, Setter>>& schema() {
  static const std::map<std::string, std::map<std::string, Setter>> s = {
      {"network",
       {{"resolution", [](RunConfig& c, auto& k, auto& v) { c.network.resolution = int(to_long(k, v)); }},
        {"min_channels", [](RunConfig& c, auto& k, auto& v) { c.network.min_channels = int(to_long(k, v)); }},
        {"max_channels", [](RunConfig& c, auto& k, auto& v) { c.network.max_channels = int(to_long(k, v)); }},
        {"embedding_dim", [](RunConfig& c, auto& k, auto& v) { c.network.embedding_dim = int(to_long(k, v)); }},
        {"num_videos", [](RunConfig& c, auto& k, auto& v) { c.network.num_videos = int(to_long(k, v)); }},
        {"down_blocks", [](RunConfig& c, auto& k, auto& v) { c.network.down_blocks = int(to_long(k, v)); }},
        {"bottleneck_blocks",
         [](RunConfig& c, auto& k, auto& v) { c.network.bottleneck_blocks = int(to_long(k, v)); }},
        {"up_blocks", [](RunConfig& c, auto& k, auto& v) { c.network.up_blocks = int(to_long(k, v)); }},
        {"attention_down", [](RunConfig& c, auto& k, auto& v) { c.network.attention_down = to_int_list(k, v); }},
        {"attention_up", [](RunConfig& c, auto& k, auto& v) { c.network.attention_up = to_int_list(k, v); }}}},
      {"train",
       {{"K", [](RunConfig& c, auto& k, auto& v) { c.train.K = int(to_long(k, v)); }},
        {"lr_eg", [](RunConfig& c, auto& k, auto& v) { c.train.lr_eg = to_double(k, v); }},
        {"lr_d", [](RunConfig& c, auto& k, auto& v) { c.train.lr_d = to_double(k, v); }},
        {"d_steps_per_g", [](RunConfig& c, auto& k, auto& v) { c.train.d_steps_per_g = int(to_long(k, v)); }},
        {"batch_size", [](RunConfig& c, auto& k, auto& v) { c.train.batch_size = int(to_long(k, v)); }},
        {"max_steps", [](RunConfig& c, auto& k, auto& v) { c.train.max_steps = to_long(k, v); }},
        {"variant", [](RunConfig& c, auto&, auto& v) { c.train.variant = parse_variant(v); }},
        {"disable_mch", [](RunConfig& c, auto& k, auto& v) { c.train.disable_mch = to_bool(k, v); }},
        {"ckpt_every", [](RunConfig& c, auto& k, auto& v) { c.train.ckpt_every = to_long(k, v); }}}},
      {"loss",
       {{"fm_weight", [](RunConfig& c, auto& k, auto& v) { c.train.weights.fm = to_double(k, v); }},
        {"mch_weight", [](RunConfig& c, auto& k, auto& v) { c.train.weights.mch = to_double(k, v); }},
        {"content.spec", [](RunConfig& c, auto&, auto& v) { c.train.weights.content = parse_perceptual_spec(v); }}}},
      {"finetune",
       {{"epochs", [](RunConfig& c, auto& k, auto& v) { c.finetune.epochs = int(to_long(k, v)); }},
        {"disable_adv", [](RunConfig& c, auto& k, auto& v) { c.finetune.disable_adv = to_bool(k, v); }},
        {"freeze_psi", [](RunConfig& c, auto& k, auto& v) { c.finetune.freeze_psi = to_bool(k, v); }},
        {"lr_g", [](RunConfig& c, auto& k, auto& v) { c.finetune.lr_g = to_double(k, v); }},
        {"lr_d", [](RunConfig& c, auto& k, auto& v) { c.finetune.lr_d = to_double(k, v); }},
        {"d_steps_per_g", [](RunConfig& c, auto& k, auto& v) { c.finetune.d_steps_per_g = int(to_long(k, v)); }},
        {"max_batch", [](RunConfig& c, auto& k, auto& v) { c.finetune.max_batch = int(to_long(k, v)); }}}},
      {"data",
       {{"root", [](RunConfig& c, auto&, auto& v) { c.data_root = v; }},
        {"line_width", [](RunConfig& c, auto& k, auto& v) { c.line_width = int(to_long(k, v)); }}}},
      {"run",
       {{"seed", [](RunConfig& c, auto& k, auto& v) { c.seed = static_cast<std::uint64_t>(to_long(k, v)); }},
        {"output_dir", [](RunConfig& c, auto&, auto& v) { c.output_dir = v; }}}},
  };
  return s;
}

}  // namespace

PerceptualExtractorSpec parse_perceptual_spec(const std::string& text) {
  PerceptualExtractorSpec spec;
  for (const auto& entry : split(text, ';')) {
    if (entry.empty()) continue;
    const auto parts = split(entry, ':');
    if (parts.size() != 3) throw ConfigError("content.spec entry '" + entry + "' must be extractor:layers:weight");
    spec.entries.push_back({parts[0], to_int_list("content.spec", parts[1]), to_double("content.spec", parts[2])});
  }
  spec.validate();
  return spec;
}

std::string format_perceptual_spec(const PerceptualExtractorSpec& spec) {
  std::string out;
  for (std::size_t i = 0; i < spec.entries.size(); ++i) {
    const auto& e = spec.entries[i];
    out += (i ? ";" : "") + e.extractor + ":" + join(e.layers) + ":" + num(e.weight);
  }
  return out;
}

RunConfig::RunConfig() {
  network.num_videos = 0;
  propagate();
}

void RunConfig::validate() const {
  NetworkConfig n = network;
  if (n.num_videos == 0) n.num_videos = 1;
  n.validate();
  train.validate();
  finetune.validate();
  if (line_width < 1) throw ConfigError("line_width must be >= 1");
  const auto& ids = ExtractorRegistry<float>::standard_ids();
  for (const auto& e : train.weights.content.entries)
    if (std::find(ids.begin(), ids.end(), e.extractor) == ids.end())
      throw ConfigError("perceptual extractor unavailable: " + e.extractor);
}

void RunConfig::propagate() {
  train.seed = seed;
  finetune.seed = seed;
  finetune.weights = train.weights;
}

std::string RunConfig::to_ini() const {
  std::ostringstream o;
  o << "[network]\n"
    << "resolution = " << network.resolution << "\n"
    << "min_channels = " << network.min_channels << "\n"
    << "max_channels = " << network.max_channels << "\n"
    << "embedding_dim = " << network.embedding_dim << "\n"
    << "num_videos = " << network.num_videos << "\n"
    << "down_blocks = " << network.down_blocks << "\n"
    << "bottleneck_blocks = " << network.bottleneck_blocks << "\n"
    << "up_blocks = " << network.up_blocks << "\n"
    << "attention_down = " << join(network.attention_down) << "\n"
    << "attention_up = " << join(network.attention_up) << "\n\n"
    << "[train]\n"
    << "K = " << train.K << "\n"
    << "lr_eg = " << num(train.lr_eg) << "\n"
    << "lr_d = " << num(train.lr_d) << "\n"
    << "d_steps_per_g = " << train.d_steps_per_g << "\n"
    << "batch_size = " << train.batch_size << "\n"
    << "max_steps = " << train.max_steps << "\n"
    << "variant = " << (train.variant == Variant::FF ? "ff" : "ft") << "\n"
    << "disable_mch = " << (train.disable_mch ? "true" : "false") << "\n"
    << "ckpt_every = " << train.ckpt_every << "\n\n"
    << "[loss]\n"
    << "fm_weight = " << num(train.weights.fm) << "\n"
    << "mch_weight = " << num(train.weights.mch) << "\n"
    << "content.spec = " << format_perceptual_spec(train.weights.content) << "\n\n"
    << "[finetune]\n"
    << "epochs = " << finetune.epochs << "\n"
    << "disable_adv = " << (finetune.disable_adv ? "true" : "false") << "\n"
    << "freeze_psi = " << (finetune.freeze_psi ? "true" : "false") << "\n"
    << "lr_g = " << num(finetune.lr_g) << "\n"
    << "lr_d = " << num(finetune.lr_d) << "\n"
    << "d_steps_per_g = " << finetune.d_steps_per_g << "\n"
    << "max_batch = " << finetune.max_batch << "\n\n"
    << "[data]\n"
    << "root = " << data_root.string() << "\n"
    << "line_width = " << line_width << "\n\n"
    << "[run]\n"
    << "seed = " << seed << "\n"
    << "output_dir = " << output_dir.string() << "\n";
  return o.str();
}

std::string RunConfig::hash() const { return sha256_hex(to_ini()).substr(0, 16); }

RunConfig RunConfig::parse(const std::string& ini_text) {
  pt::ptree tree;
  std::istringstream in(ini_text);
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(std::string("malformed config: ") + e.message() + " (line " + std::to_string(e.line()) + ")");
  }
  RunConfig c;
  const auto& s = schema();
  for (const auto& [section, body] : tree) {
    auto sec = s.find(section);
    if (sec == s.end()) {
      if (body.empty() && !body.data().empty()) throw ConfigError("unknown config key '" + section + "' outside a section");
      throw ConfigError("unknown config section [" + section + "]");
    }
    for (const auto& [key, value] : body) {
      auto it = sec->second.find(key);
      if (it == sec->second.end()) throw ConfigError("unknown config key '" + section + "." + key + "'");
      it->second(c, section + "." + key, trim(value.data()));
    }
  }
  c.validate();
  c.propagate();
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

}  // namespace fsh
