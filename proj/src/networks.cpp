#include "fsh/networks.hpp"

#include "fsh/errors.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace fsh {

// ---------------------------------------------------------------------------
// NetworkConfig

namespace {

bool is_power_of_two(int v) { return v > 0 && (v & (v - 1)) == 0; }

bool contains(const std::vector<int>& xs, int v) { return std::find(xs.begin(), xs.end(), v) != xs.end(); }

int log2_int(int v) {
  int r = 0;
  while (v > 1) {
    v >>= 1;
    ++r;
  }
  return r;
}

}  // namespace

void NetworkConfig::validate() const {
  if (!is_power_of_two(resolution) || resolution < 16)
    throw ConfigError("resolution must be a power of two >= 16, got " + std::to_string(resolution));
  if (embedding_dim < 4) throw ConfigError("embedding dimension N must be >= 4");
  if (num_videos < 1) throw ConfigError("number of training videos M must be >= 1");
  if (min_channels < 1 || max_channels < min_channels)
    throw ConfigError("channel counts must satisfy 0 < min_channels <= max_channels");
  if (down_blocks < 1 || up_blocks != down_blocks)
    throw ConfigError("generator needs as many upsampling as downsampling blocks (>= 1)");
  if (bottleneck_blocks < 0) throw ConfigError("bottleneck block count must be >= 0");
  if ((resolution >> down_blocks) < 1) throw ConfigError("too many downsampling blocks for the resolution");
}

int NetworkConfig::stage_channels(int k) const {
  long c = static_cast<long>(min_channels) << std::min(k, 30);
  return static_cast<int>(std::min<long>(c, max_channels));
}

int NetworkConfig::embedder_blocks() const { return log2_int(resolution) - 2; }

NetworkConfig NetworkConfig::desk(int num_videos) {
  NetworkConfig c;
  c.num_videos = num_videos;
  return c;
}

NetworkConfig NetworkConfig::full_scale(int num_videos) {
  NetworkConfig c;
  c.resolution = 256;
  c.min_channels = 64;
  c.max_channels = 512;
  c.embedding_dim = 512;
  c.num_videos = num_videos;
  c.down_blocks = 4;
  c.bottleneck_blocks = 4;
  c.up_blocks = 4;
  c.attention_down = {32};
  c.attention_up = {64};
  return c;
}

// ---------------------------------------------------------------------------
// Parameter construction

namespace {

template <typename Scalar>
void fill_normal(MatrixX<Scalar>& m, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (Eigen::Index j = 0; j < m.cols(); ++j)
    for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = static_cast<Scalar>(dist(rng));
}

template <typename Scalar>
void make_spectral(Parameter<Scalar>& p, std::mt19937_64& rng) {
  p.spectral = true;
  MatrixX<Scalar> u(p.value.rows(), 1), v(p.value.cols(), 1);
  fill_normal(u, 1.0, rng);
  fill_normal(v, 1.0, rng);
  p.sn_u = u.col(0).normalized();
  p.sn_v = v.col(0).normalized();
  for (int it = 0; it < 30; ++it) {
    p.sn_v = (p.value.transpose() * p.sn_u).normalized();
    p.sn_u = (p.value * p.sn_v).normalized();
  }
}

template <typename Scalar>
void add_conv(ParameterSet<Scalar>& ps, const std::string& name, int cin, int cout, int kernel,
              std::mt19937_64& rng) {
  auto& w = ps.add(name + ".w", cout, kernel * kernel * cin);
  fill_normal(w.value, std::sqrt(2.0 / (kernel * kernel * (cin + cout))), rng);
  make_spectral(w, rng);
  ps.add(name + ".b", cout, 1);
}

template <typename Scalar>
Var<Scalar> weight_var(Pass<Scalar>& pass, Parameter<Scalar>& p) {
  auto v = pass.tape.parameter(p, pass.train_params);
  if (!p.spectral) return v;
  return spectral_normalized(v, p.sn_u, p.sn_v, pass.update_sn ? 1 : 0);
}

template <typename Scalar>
Var<Scalar> conv(Pass<Scalar>& pass, ParameterSet<Scalar>& ps, const std::string& name, const Var<Scalar>& x) {
  auto& w = ps.get(name + ".w");
  const auto cin = x.value().rows();
  const int kernel = static_cast<int>(std::lround(std::sqrt(double(w.value.cols()) / double(cin))));
  auto wv = weight_var(pass, w);
  auto bv = pass.tape.parameter(ps.get(name + ".b"), pass.train_params);
  return conv2d(x, wv, bv, kernel);
}

std::size_t conv_count(int cin, int cout, int kernel) {
  return static_cast<std::size_t>(kernel) * kernel * cin * cout + cout;
}

int attention_inner(int channels) { return std::max(1, channels / 8); }

std::size_t attention_count(int channels) {
  return 2 * conv_count(channels, attention_inner(channels), 1) + conv_count(channels, channels, 1) + 1;
}

}  // namespace

template <typename Scalar>
void add_self_attention(ParameterSet<Scalar>& params, const std::string& prefix, int channels, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const int inner = attention_inner(channels);
  add_conv(params, prefix + ".query", channels, inner, 1, rng);
  add_conv(params, prefix + ".key", channels, inner, 1, rng);
  add_conv(params, prefix + ".value", channels, channels, 1, rng);
  auto& gamma = params.add(prefix + ".gamma", 1, 1);
  gamma.value(0, 0) = Scalar(0);
}

template <typename Scalar>
Var<Scalar> self_attention(Pass<Scalar>& pass, ParameterSet<Scalar>& params, const std::string& prefix,
                           const Var<Scalar>& x) {
  auto q = conv(pass, params, prefix + ".query", x);
  auto k = conv(pass, params, prefix + ".key", x);
  auto v = conv(pass, params, prefix + ".value", x);
  auto gamma = pass.tape.parameter(params.get(prefix + ".gamma"), pass.train_params);
  return add(x, mul_scalar(spatial_attention(q, k, v), gamma));
}

// ---------------------------------------------------------------------------
// Shared downsampling trunk (embedder and discriminator)

namespace {

template <typename Scalar>
void build_down_trunk(ParameterSet<Scalar>& ps, const NetworkConfig& c, bool extra_block, std::mt19937_64& rng) {
  const int blocks = c.embedder_blocks();
  int in = 6, res = c.resolution;
  for (int k = 0; k < blocks; ++k) {
    const int out = k == blocks - 1 ? c.embedding_dim : c.stage_channels(k);
    const std::string p = "down" + std::to_string(k);
    add_conv(ps, p + ".conv1", in, out, 3, rng);
    add_conv(ps, p + ".conv2", out, out, 3, rng);
    add_conv(ps, p + ".skip", in, out, 1, rng);
    res /= 2;
    if (contains(c.attention_down, res)) add_self_attention(ps, p + ".attn", out, rng());
    in = out;
  }
  if (extra_block) {
    add_conv(ps, "extra.conv1", in, in, 3, rng);
    add_conv(ps, "extra.conv2", in, in, 3, rng);
  }
}

template <typename Scalar>
Var<Scalar> run_down_trunk(Pass<Scalar>& pass, ParameterSet<Scalar>& ps, const NetworkConfig& c,
                           const Var<Scalar>& input, bool extra_block, std::vector<Var<Scalar>>* features) {
  const int blocks = c.embedder_blocks();
  Var<Scalar> h = input;
  int res = c.resolution;
  for (int k = 0; k < blocks; ++k) {
    const std::string p = "down" + std::to_string(k);
    auto main = k == 0 ? h : relu(h);
    main = conv(pass, ps, p + ".conv1", main);
    main = conv(pass, ps, p + ".conv2", relu(main));
    main = avg_pool2(main);
    auto skip = conv(pass, ps, p + ".skip", avg_pool2(h));
    h = add(main, skip);
    res /= 2;
    if (contains(c.attention_down, res)) h = self_attention(pass, ps, p + ".attn", h);
    if (features) features->push_back(h);
  }
  if (extra_block) {
    auto main = conv(pass, ps, "extra.conv1", relu(h));
    main = conv(pass, ps, "extra.conv2", relu(main));
    h = add(h, main);
    if (features) features->push_back(h);
  }
  return h;
}

template <typename Scalar>
void check_image_batch(const NetworkConfig& c, const Var<Scalar>& frames, const char* what) {
  const Shape s = frames.shape();
  if (s.height != c.resolution || s.width != c.resolution || frames.value().rows() != 3)
    throw ContractError(std::string(what) + ": expected 3-channel " + std::to_string(c.resolution) + "x" +
                        std::to_string(c.resolution) + " input, got " + std::to_string(frames.value().rows()) +
                        "-channel " + std::to_string(s.height) + "x" + std::to_string(s.width));
}

}  // namespace

// ---------------------------------------------------------------------------
// Embedder

template <typename Scalar>
Embedder<Scalar>::Embedder(const NetworkConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  std::mt19937_64 rng(seed);
  build_down_trunk(params_, config_, false, rng);
}

template <typename Scalar>
Var<Scalar> Embedder<Scalar>::forward(Pass<Scalar>& pass, const Var<Scalar>& frames, const Var<Scalar>& landmarks) {
  check_image_batch(config_, frames, "embedder frames");
  check_image_batch(config_, landmarks, "embedder landmark images");
  auto h = run_down_trunk(pass, params_, config_, concat_channels(frames, landmarks), false, static_cast<std::vector<Var<Scalar>>*>(nullptr));
  return sum_pool(relu(h));
}

// ---------------------------------------------------------------------------
// Generator

template <typename Scalar>
Generator<Scalar>::Generator(const NetworkConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  std::mt19937_64 rng(seed);
  auto adaptive = [&](const std::string& name, int channels) {
    layout_.push_back({name, adaptive_size_, channels});
    adaptive_size_ += 2 * channels;
  };

  const int nd = config_.down_blocks;
  int in = 3, res = config_.resolution;
  for (int k = 0; k < nd; ++k) {
    const int out = config_.stage_channels(k);
    const std::string p = "enc" + std::to_string(k);
    add_conv(params_, p + ".conv1", in, out, 3, rng);
    add_conv(params_, p + ".conv2", out, out, 3, rng);
    add_conv(params_, p + ".skip", in, out, 1, rng);
    res /= 2;
    if (contains(config_.attention_down, res)) add_self_attention(params_, p + ".attn", out, rng());
    in = out;
  }
  for (int b = 0; b < config_.bottleneck_blocks; ++b) {
    const std::string p = "res" + std::to_string(b);
    adaptive(p + ".norm1", in);
    add_conv(params_, p + ".conv1", in, in, 3, rng);
    adaptive(p + ".norm2", in);
    add_conv(params_, p + ".conv2", in, in, 3, rng);
  }
  for (int j = 0; j < config_.up_blocks; ++j) {
    const int out = config_.stage_channels(nd - 1 - j);
    const std::string p = "dec" + std::to_string(j);
    adaptive(p + ".norm1", in);
    add_conv(params_, p + ".conv1", in, out, 3, rng);
    adaptive(p + ".norm2", out);
    add_conv(params_, p + ".conv2", out, out, 3, rng);
    add_conv(params_, p + ".skip", in, out, 1, rng);
    res *= 2;
    if (contains(config_.attention_up, res)) add_self_attention(params_, p + ".attn", out, rng());
    in = out;
  }
  adaptive("final.norm", in);
  add_conv(params_, "final.conv", in, 3, 3, rng);

  auto& proj = params_.add(kProjection, adaptive_size_, config_.embedding_dim);
  fill_normal(proj.value, 0.02, rng);
  make_spectral(proj, rng);
}

template <typename Scalar>
Var<Scalar> Generator<Scalar>::project(Pass<Scalar>& pass, const Var<Scalar>& embeddings) {
  if (embeddings.value().rows() != config_.embedding_dim)
    throw ContractError("generator projection: embedding length " + std::to_string(embeddings.value().rows()) +
                        " != N = " + std::to_string(config_.embedding_dim));
  return matmul(weight_var(pass, params_.get(kProjection)), embeddings);
}

template <typename Scalar>
Var<Scalar> Generator<Scalar>::forward(Pass<Scalar>& pass, const Var<Scalar>& landmarks, const Var<Scalar>& adaptive) {
  check_image_batch(config_, landmarks, "generator landmark images");
  if (adaptive.value().rows() != adaptive_size_)
    throw ContractError("generator: adaptive parameter length " + std::to_string(adaptive.value().rows()) +
                        " != " + std::to_string(adaptive_size_));
  const int batch = landmarks.shape().batch;
  if (adaptive.value().cols() != 1 && adaptive.value().cols() != batch)
    throw ContractError("generator: adaptive parameters must have 1 or batch columns");

  const Scalar eps = Scalar(1e-5);
  std::size_t slot = 0;
  auto adain_layer = [&](const Var<Scalar>& x) {
    const auto& s = layout_.at(slot++);
    auto delta = slice_rows(adaptive, s.offset, s.channels);
    auto bias = slice_rows(adaptive, s.offset + s.channels, s.channels);
    return channel_affine(instance_norm(x, eps), delta, bias);
  };

  const int nd = config_.down_blocks;
  Var<Scalar> h = landmarks;
  int res = config_.resolution;
  for (int k = 0; k < nd; ++k) {
    const std::string p = "enc" + std::to_string(k);
    auto main = k == 0 ? h : relu(instance_norm(h, eps));
    main = conv(pass, params_, p + ".conv1", main);
    main = conv(pass, params_, p + ".conv2", relu(instance_norm(main, eps)));
    main = avg_pool2(main);
    h = add(main, conv(pass, params_, p + ".skip", avg_pool2(h)));
    res /= 2;
    if (contains(config_.attention_down, res)) h = self_attention(pass, params_, p + ".attn", h);
  }
  for (int b = 0; b < config_.bottleneck_blocks; ++b) {
    const std::string p = "res" + std::to_string(b);
    auto main = conv(pass, params_, p + ".conv1", relu(adain_layer(h)));
    main = conv(pass, params_, p + ".conv2", relu(adain_layer(main)));
    h = add(h, main);
  }
  for (int j = 0; j < config_.up_blocks; ++j) {
    const std::string p = "dec" + std::to_string(j);
    auto main = conv(pass, params_, p + ".conv1", relu(adain_layer(h)));
    main = conv(pass, params_, p + ".conv2", relu(adain_layer(main)));
    h = upsample2(add(main, conv(pass, params_, p + ".skip", h)));
    res *= 2;
    if (contains(config_.attention_up, res)) h = self_attention(pass, params_, p + ".attn", h);
  }
  h = conv(pass, params_, "final.conv", relu(adain_layer(h)));
  return tanh(h);
}

// ---------------------------------------------------------------------------
// Discriminators

template <typename Scalar>
Discriminator<Scalar>::Discriminator(const NetworkConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  std::mt19937_64 rng(seed);
  build_down_trunk(params_, config_, true, rng);
  auto& w = params_.add(kW, config_.embedding_dim, config_.num_videos);
  fill_normal(w.value, 0.02, rng);
  auto& w0 = params_.add(kW0, config_.embedding_dim, 1);
  fill_normal(w0.value, 0.02, rng);
  params_.add(kBias, 1, 1);
}

template <typename Scalar>
DiscriminatorOutput<Scalar> Discriminator<Scalar>::forward(Pass<Scalar>& pass, const Var<Scalar>& frames,
                                                           const Var<Scalar>& landmarks,
                                                           const std::vector<int>& video_indices) {
  check_image_batch(config_, frames, "discriminator frames");
  check_image_batch(config_, landmarks, "discriminator landmark images");
  const int batch = frames.shape().batch;
  if (static_cast<int>(video_indices.size()) != batch)
    throw ContractError("discriminator: need one video index per sample");
  for (int i : video_indices)
    if (i < 0 || i >= config_.num_videos)
      throw ContractError("discriminator: video index " + std::to_string(i) + " outside [0, " +
                          std::to_string(config_.num_videos) + ")");

  DiscriminatorOutput<Scalar> out;
  auto h = run_down_trunk(pass, params_, config_, concat_channels(frames, landmarks), true, &out.features);
  out.embedding = sum_pool(relu(h));
  auto w = pass.tape.parameter(params_.get(kW), pass.train_params);
  auto w0 = pass.tape.parameter(params_.get(kW0), pass.train_params);
  auto b = pass.tape.parameter(params_.get(kBias), pass.train_params);
  auto columns = add(gather_columns(w, video_indices), gather_columns(w0, std::vector<int>(batch, 0)));
  out.score = add_scalar(column_dot(out.embedding, columns), b);
  return out;
}

template <typename Scalar>
std::size_t Discriminator<Scalar>::trunk_parameter_count() const {
  return params_.count() - params_.get(kW).value.size() - params_.get(kW0).value.size() -
         params_.get(kBias).value.size();
}

template <typename Scalar>
FinetuneDiscriminator<Scalar>::FinetuneDiscriminator(const Discriminator<Scalar>& meta, const VectorX<Scalar>& w_prime)
    : config_(meta.config()) {
  if (w_prime.size() != config_.embedding_dim)
    throw ContractError("fine-tune discriminator: w' length != N");
  const auto& src = meta.params();
  for (std::size_t i = 0; i < src.size(); ++i) {
    const auto& p = src[i];
    if (p.name == Discriminator<Scalar>::kW || p.name == Discriminator<Scalar>::kW0 ||
        p.name == Discriminator<Scalar>::kBias)
      continue;
    auto& q = params_.add(p.name, static_cast<int>(p.value.rows()), static_cast<int>(p.value.cols()));
    q.value = p.value;
    q.spectral = p.spectral;
    q.sn_u = p.sn_u;
    q.sn_v = p.sn_v;
  }
  params_.add(kWPrime, config_.embedding_dim, 1).value = w_prime;
  params_.add(kBias, 1, 1).value = src.get(Discriminator<Scalar>::kBias).value;
}

template <typename Scalar>
DiscriminatorOutput<Scalar> FinetuneDiscriminator<Scalar>::forward(Pass<Scalar>& pass, const Var<Scalar>& frames,
                                                                   const Var<Scalar>& landmarks) {
  check_image_batch(config_, frames, "discriminator frames");
  check_image_batch(config_, landmarks, "discriminator landmark images");
  DiscriminatorOutput<Scalar> out;
  auto h = run_down_trunk(pass, params_, config_, concat_channels(frames, landmarks), true, &out.features);
  out.embedding = sum_pool(relu(h));
  auto w = pass.tape.parameter(params_.get(kWPrime), pass.train_params);
  auto b = pass.tape.parameter(params_.get(kBias), pass.train_params);
  out.score = add_scalar(column_dot(out.embedding, w), b);
  return out;
}

// ---------------------------------------------------------------------------
// Analytic parameter accounting

ParameterCounts analytic_parameter_counts(const NetworkConfig& c) {
  c.validate();
  ParameterCounts counts;
  {
    const int blocks = c.embedder_blocks();
    int in = 6, res = c.resolution;
    for (int k = 0; k < blocks; ++k) {
      const int out = k == blocks - 1 ? c.embedding_dim : c.stage_channels(k);
      counts.embedder += conv_count(in, out, 3) + conv_count(out, out, 3) + conv_count(in, out, 1);
      res /= 2;
      if (contains(c.attention_down, res)) counts.embedder += attention_count(out);
      in = out;
    }
    counts.discriminator_trunk = counts.embedder + 2 * conv_count(in, in, 3);
  }
  {
    std::size_t adaptive = 0;
    int in = 3, res = c.resolution;
    for (int k = 0; k < c.down_blocks; ++k) {
      const int out = c.stage_channels(k);
      counts.generator += conv_count(in, out, 3) + conv_count(out, out, 3) + conv_count(in, out, 1);
      res /= 2;
      if (contains(c.attention_down, res)) counts.generator += attention_count(out);
      in = out;
    }
    counts.generator += static_cast<std::size_t>(c.bottleneck_blocks) * 2 * conv_count(in, in, 3);
    adaptive += static_cast<std::size_t>(c.bottleneck_blocks) * 4 * in;
    for (int j = 0; j < c.up_blocks; ++j) {
      const int out = c.stage_channels(c.down_blocks - 1 - j);
      counts.generator += conv_count(in, out, 3) + conv_count(out, out, 3) + conv_count(in, out, 1);
      adaptive += 2 * static_cast<std::size_t>(in + out);
      res *= 2;
      if (contains(c.attention_up, res)) counts.generator += attention_count(out);
      in = out;
    }
    counts.generator += conv_count(in, 3, 3);
    adaptive += 2 * static_cast<std::size_t>(in);
    counts.generator += adaptive * static_cast<std::size_t>(c.embedding_dim);
  }
  return counts;
}

// ---------------------------------------------------------------------------
// Single-sample conveniences

template <typename Scalar>
MatrixX<Scalar> stack_images(const std::vector<const Image*>& images) {
  if (images.empty()) throw ContractError("stack_images: no images");
  const int hw = images.front()->height * images.front()->width;
  MatrixX<Scalar> out(3, hw * static_cast<Eigen::Index>(images.size()));
  for (std::size_t k = 0; k < images.size(); ++k) {
    if (!images[k]->same_shape(*images.front())) throw ContractError("stack_images: mixed image sizes");
    out.middleCols(static_cast<Eigen::Index>(k) * hw, hw) = images[k]->pixels.template cast<Scalar>();
  }
  return out;
}

template <typename Scalar>
Image to_image(const MatrixX<Scalar>& pixels, int height, int width, int sample) {
  Image img(height, width);
  img.pixels = pixels.middleCols(static_cast<Eigen::Index>(sample) * height * width, height * width).template cast<float>();
  return img;
}

namespace {

template <typename Scalar>
Var<Scalar> image_var(Tape<Scalar>& tape, const Image& img) {
  return tape.constant(stack_images<Scalar>({&img}), Shape{1, img.height, img.width});
}

}  // namespace

template <typename Scalar>
VectorX<Scalar> embed_frame(Embedder<Scalar>& embedder, const Image& frame, const Image& landmark_image) {
  Tape<Scalar> tape;
  Pass<Scalar> pass{tape};
  auto e = embedder.forward(pass, image_var(tape, frame), image_var(tape, landmark_image));
  return e.value().col(0);
}

template <typename Scalar>
VectorX<Scalar> average_embeddings(const std::vector<VectorX<Scalar>>& vectors) {
  if (vectors.empty()) throw ContractError("average_embeddings: empty list");
  VectorX<Scalar> sum = VectorX<Scalar>::Zero(vectors.front().size());
  for (const auto& v : vectors) {
    if (v.size() != sum.size()) throw ContractError("average_embeddings: unequal lengths");
    sum += v;
  }
  return sum / Scalar(vectors.size());
}

template <typename Scalar>
AdaptiveParams<Scalar> project_adaptive(const MatrixX<Scalar>& projection, const VectorX<Scalar>& embedding,
                                        const std::vector<AdaptiveSlice>& layout) {
  if (projection.cols() != embedding.size())
    throw ContractError("project_adaptive: P has " + std::to_string(projection.cols()) + " columns, embedding has " +
                        std::to_string(embedding.size()) + " entries");
  AdaptiveParams<Scalar> out;
  out.values = projection * embedding;
  out.layout = layout;
  int total = 0;
  for (const auto& s : layout) total = std::max(total, s.offset + 2 * s.channels);
  if (total > out.values.size()) throw ContractError("project_adaptive: layout exceeds projected length");
  return out;
}

template <typename Scalar>
MatrixX<Scalar> adain(const MatrixX<Scalar>& features, const VectorX<Scalar>& scale, const VectorX<Scalar>& bias,
                      Scalar eps) {
  if (scale.size() != features.rows() || bias.size() != features.rows())
    throw ContractError("adain: scale/bias length must equal the channel count");
  VectorX<Scalar> mu = features.rowwise().mean();
  MatrixX<Scalar> centered = features.colwise() - mu;
  VectorX<Scalar> inv = (centered.array().square().rowwise().mean() + eps).rsqrt();
  MatrixX<Scalar> out = (scale.cwiseProduct(inv)).asDiagonal() * centered;
  out.colwise() += bias;
  return out;
}

template <typename Scalar>
MatrixX<Scalar> spectral_normalize(const MatrixX<Scalar>& weight, VectorX<Scalar>& u, int n_iter) {
  if (u.size() != weight.rows()) throw ContractError("spectral_normalize: u must have one entry per output row");
  const Scalar eps = Scalar(1e-12);
  if (weight.norm() <= eps) return weight;
  if (u.norm() <= eps) u = VectorX<Scalar>::Ones(weight.rows());
  u.normalize();
  VectorX<Scalar> v = weight.transpose() * u;
  for (int it = 0; it < n_iter; ++it) {
    v = weight.transpose() * u;
    if (v.norm() > eps) v.normalize();
    VectorX<Scalar> nu = weight * v;
    if (nu.norm() > eps) u = nu.normalized();
  }
  if (v.norm() > eps) v.normalize();
  const Scalar sigma = u.dot(weight * v);
  if (sigma <= eps) return weight;
  return weight / sigma;
}

template <typename Scalar>
Image generate(Generator<Scalar>& generator, const Image& landmark_image, const AdaptiveParams<Scalar>& adaptive) {
  Tape<Scalar> tape;
  Pass<Scalar> pass{tape};
  auto psi = tape.constant(adaptive.values, Shape{1, 1, 1});
  auto out = generator.forward(pass, image_var(tape, landmark_image), psi);
  return to_image(out.value(), landmark_image.height, landmark_image.width);
}

namespace {

template <typename Scalar>
std::vector<MatrixX<Scalar>> feature_values(const std::vector<Var<Scalar>>& feats) {
  std::vector<MatrixX<Scalar>> out;
  out.reserve(feats.size());
  for (const auto& f : feats) out.push_back(f.value());
  return out;
}

}  // namespace

template <typename Scalar>
std::pair<Scalar, std::vector<MatrixX<Scalar>>> discriminate(Discriminator<Scalar>& disc, const Image& frame,
                                                             const Image& landmark_image, int video_index) {
  Tape<Scalar> tape;
  Pass<Scalar> pass{tape};
  auto out = disc.forward(pass, image_var(tape, frame), image_var(tape, landmark_image), {video_index});
  return {out.score.item(), feature_values(out.features)};
}

template <typename Scalar>
std::pair<Scalar, std::vector<MatrixX<Scalar>>> discriminate_finetune(FinetuneDiscriminator<Scalar>& disc,
                                                                      const Image& frame, const Image& landmark_image) {
  Tape<Scalar> tape;
  Pass<Scalar> pass{tape};
  auto out = disc.forward(pass, image_var(tape, frame), image_var(tape, landmark_image));
  return {out.score.item(), feature_values(out.features)};
}

#define FSH_INSTANTIATE(S)                                                                                      \
  template class Embedder<S>;                                                                                   \
  template class Generator<S>;                                                                                  \
  template class Discriminator<S>;                                                                              \
  template class FinetuneDiscriminator<S>;                                                                      \
  template MatrixX<S> stack_images<S>(const std::vector<const Image*>&);                                        \
  template Image to_image<S>(const MatrixX<S>&, int, int, int);                                                 \
  template VectorX<S> embed_frame(Embedder<S>&, const Image&, const Image&);                                    \
  template VectorX<S> average_embeddings(const std::vector<VectorX<S>>&);                                       \
  template AdaptiveParams<S> project_adaptive(const MatrixX<S>&, const VectorX<S>&,                             \
                                              const std::vector<AdaptiveSlice>&);                               \
  template MatrixX<S> adain(const MatrixX<S>&, const VectorX<S>&, const VectorX<S>&, S);                        \
  template MatrixX<S> spectral_normalize(const MatrixX<S>&, VectorX<S>&, int);                                  \
  template Var<S> self_attention(Pass<S>&, ParameterSet<S>&, const std::string&, const Var<S>&);                \
  template void add_self_attention(ParameterSet<S>&, const std::string&, int, std::uint64_t);                   \
  template Image generate(Generator<S>&, const Image&, const AdaptiveParams<S>&);                               \
  template std::pair<S, std::vector<MatrixX<S>>> discriminate(Discriminator<S>&, const Image&, const Image&,    \
                                                              int);                                             \
  template std::pair<S, std::vector<MatrixX<S>>> discriminate_finetune(FinetuneDiscriminator<S>&, const Image&, \
                                                                       const Image&);

FSH_INSTANTIATE(float)
FSH_INSTANTIATE(double)

#undef FSH_INSTANTIATE

}  // namespace fsh
