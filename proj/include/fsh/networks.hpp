#pragma once

// Embedder, generator and projection discriminator built from spectrally
// normalized residual blocks. All three are templated on the scalar type so
// the same code trains in float and is gradient-checked in double.

#include "fsh/autograd.hpp"
#include "fsh/image.hpp"

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace fsh {

struct NetworkConfig {
  int resolution = 64;
  int min_channels = 16;
  int max_channels = 128;
  int embedding_dim = 64;  ///< N
  int num_videos = 1;      ///< M, columns of the discriminator's W
  int down_blocks = 3;
  int bottleneck_blocks = 2;
  int up_blocks = 3;
  /// Output resolutions after which a self-attention block follows a
  /// downsampling block (embedder, discriminator, generator encoder).
  std::vector<int> attention_down = {16};
  /// Output resolutions after which self-attention follows an upsampling block.
  std::vector<int> attention_up = {16};

  void validate() const;
  /// Channels of the k-th downsampling stage: min(min_channels * 2^k, max_channels).
  int stage_channels(int k) const;
  /// Number of downsampling blocks in the embedder (down to 4x4).
  int embedder_blocks() const;

  static NetworkConfig desk(int num_videos = 1);
  static NetworkConfig full_scale(int num_videos = 1);
  bool operator==(const NetworkConfig&) const = default;
};

/// One forward evaluation context.
template <typename Scalar>
struct Pass {
  Tape<Scalar>& tape;
  bool train_params = false;  ///< record gradients into Parameter::grad
  bool update_sn = false;     ///< one power iteration on every spectral-norm vector
};

/// [offset, offset+channels) holds scale deltas and [offset+channels,
/// offset+2*channels) holds biases of one adaptive normalization layer.
struct AdaptiveSlice {
  std::string layer;
  int offset = 0;
  int channels = 0;
};

/// Person-specific normalization parameters, laid out per AdaptiveSlice.
template <typename Scalar>
struct AdaptiveParams {
  VectorX<Scalar> values;
  std::vector<AdaptiveSlice> layout;

  auto scale_delta(std::size_t layer) const { return values.segment(layout[layer].offset, layout[layer].channels); }
  auto bias(std::size_t layer) const {
    return values.segment(layout[layer].offset + layout[layer].channels, layout[layer].channels);
  }
};

template <typename Scalar>
class Embedder {
 public:
  Embedder(const NetworkConfig& config, std::uint64_t seed);

  /// frames and landmark images are 3 x (B*H*W); returns N x B embeddings.
  Var<Scalar> forward(Pass<Scalar>& pass, const Var<Scalar>& frames, const Var<Scalar>& landmarks);

  const NetworkConfig& config() const { return config_; }
  ParameterSet<Scalar>& params() { return params_; }
  const ParameterSet<Scalar>& params() const { return params_; }

 private:
  NetworkConfig config_;
  ParameterSet<Scalar> params_;
};

template <typename Scalar>
class Generator {
 public:
  Generator(const NetworkConfig& config, std::uint64_t seed);

  /// Adaptive parameters P * e for N x B embeddings (L_adapt x B).
  Var<Scalar> project(Pass<Scalar>& pass, const Var<Scalar>& embeddings);
  /// Synthesizes images in [-1,1] from 3 x (B*H*W) landmark images.
  /// `adaptive` is L_adapt x B, or L_adapt x 1 shared by the batch.
  Var<Scalar> forward(Pass<Scalar>& pass, const Var<Scalar>& landmarks, const Var<Scalar>& adaptive);

  int adaptive_size() const { return adaptive_size_; }
  const std::vector<AdaptiveSlice>& adaptive_layout() const { return layout_; }
  /// Name of the projection matrix parameter inside params().
  static constexpr const char* kProjection = "proj.P";

  const NetworkConfig& config() const { return config_; }
  ParameterSet<Scalar>& params() { return params_; }
  const ParameterSet<Scalar>& params() const { return params_; }

 private:
  NetworkConfig config_;
  ParameterSet<Scalar> params_;
  std::vector<AdaptiveSlice> layout_;
  int adaptive_size_ = 0;
};

template <typename Scalar>
struct DiscriminatorOutput {
  Var<Scalar> score;                  ///< 1 x B realism scores
  Var<Scalar> embedding;              ///< V(x, y), N x B
  std::vector<Var<Scalar>> features;  ///< activations after each residual block
};

/// Projection discriminator: score = V(x,y)' (W_i + w0) + b.
template <typename Scalar>
class Discriminator {
 public:
  Discriminator(const NetworkConfig& config, std::uint64_t seed);

  DiscriminatorOutput<Scalar> forward(Pass<Scalar>& pass, const Var<Scalar>& frames, const Var<Scalar>& landmarks,
                                      const std::vector<int>& video_indices);

  static constexpr const char* kW = "proj.W";
  static constexpr const char* kW0 = "proj.w0";
  static constexpr const char* kBias = "proj.b";

  /// Parameters of V only (excludes W, w0 and b).
  std::size_t trunk_parameter_count() const;

  const NetworkConfig& config() const { return config_; }
  ParameterSet<Scalar>& params() { return params_; }
  const ParameterSet<Scalar>& params() const { return params_; }

 private:
  NetworkConfig config_;
  ParameterSet<Scalar> params_;
};

/// Fine-tuning discriminator: score = V(x,y)' w' + b with a single free w'.
template <typename Scalar>
class FinetuneDiscriminator {
 public:
  /// Copies V and b from `meta`; w' = w_prime.
  FinetuneDiscriminator(const Discriminator<Scalar>& meta, const VectorX<Scalar>& w_prime);

  DiscriminatorOutput<Scalar> forward(Pass<Scalar>& pass, const Var<Scalar>& frames, const Var<Scalar>& landmarks);

  static constexpr const char* kWPrime = "proj.w_prime";
  static constexpr const char* kBias = "proj.b";

  const NetworkConfig& config() const { return config_; }
  ParameterSet<Scalar>& params() { return params_; }
  const ParameterSet<Scalar>& params() const { return params_; }

 private:
  NetworkConfig config_;
  ParameterSet<Scalar> params_;
};

/// Parameter counts derived from the block structure alone.
struct ParameterCounts {
  std::size_t embedder = 0;
  std::size_t generator = 0;  ///< includes the projection matrix P
  std::size_t discriminator_trunk = 0;
};
ParameterCounts analytic_parameter_counts(const NetworkConfig& config);

// ---------------------------------------------------------------------------
// Single-sample conveniences over the graph API (frozen spectral norm, no grads).

template <typename Scalar>
MatrixX<Scalar> stack_images(const std::vector<const Image*>& images);
template <typename Scalar>
Image to_image(const MatrixX<Scalar>& pixels, int height, int width, int sample = 0);

template <typename Scalar>
VectorX<Scalar> embed_frame(Embedder<Scalar>& embedder, const Image& frame, const Image& landmark_image);

/// Elementwise mean; throws ContractError on an empty list or unequal lengths.
template <typename Scalar>
VectorX<Scalar> average_embeddings(const std::vector<VectorX<Scalar>>& vectors);

/// psi_hat = P * e sliced by `layout`.
template <typename Scalar>
AdaptiveParams<Scalar> project_adaptive(const MatrixX<Scalar>& projection, const VectorX<Scalar>& embedding,
                                        const std::vector<AdaptiveSlice>& layout);

/// Per-channel standardization of a C x (h*w) map followed by scale * x + bias.
template <typename Scalar>
MatrixX<Scalar> adain(const MatrixX<Scalar>& features, const VectorX<Scalar>& scale, const VectorX<Scalar>& bias,
                      Scalar eps);

/// Returns weight / sigma_max after n_iter power iterations refining u in place.
template <typename Scalar>
MatrixX<Scalar> spectral_normalize(const MatrixX<Scalar>& weight, VectorX<Scalar>& u, int n_iter);

/// x + gamma * attention(x) using the named block inside `params`.
template <typename Scalar>
Var<Scalar> self_attention(Pass<Scalar>& pass, ParameterSet<Scalar>& params, const std::string& prefix,
                           const Var<Scalar>& x);
/// Adds the parameters of a self-attention block over `channels` channels.
template <typename Scalar>
void add_self_attention(ParameterSet<Scalar>& params, const std::string& prefix, int channels, std::uint64_t seed);

template <typename Scalar>
Image generate(Generator<Scalar>& generator, const Image& landmark_image, const AdaptiveParams<Scalar>& adaptive);

template <typename Scalar>
std::pair<Scalar, std::vector<MatrixX<Scalar>>> discriminate(Discriminator<Scalar>& disc, const Image& frame,
                                                             const Image& landmark_image, int video_index);
template <typename Scalar>
std::pair<Scalar, std::vector<MatrixX<Scalar>>> discriminate_finetune(FinetuneDiscriminator<Scalar>& disc,
                                                                      const Image& frame, const Image& landmark_image);

}  // namespace fsh
