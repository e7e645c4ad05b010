#pragma once

// Reverse-mode differentiation over dense feature maps.
//
// Every tensor is an Eigen matrix with one row per channel and one column per
// (sample, pixel) pair, samples outermost and pixels in row-major order. A
// vector batch (embeddings, scores) is the degenerate case height = width = 1.

#include <Eigen/Dense>

#include <cstddef>
#include <deque>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

namespace fsh {

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

struct Shape {
  int batch = 1;
  int height = 1;
  int width = 1;

  int pixels() const { return height * width; }
  int columns() const { return batch * height * width; }
  bool operator==(const Shape&) const = default;
};

/// A named trainable tensor with its gradient accumulator. Spectrally
/// normalized weights also persist their power-iteration vectors.
template <typename Scalar>
struct Parameter {
  std::string name;
  MatrixX<Scalar> value;
  MatrixX<Scalar> grad;
  bool trainable = true;
  bool spectral = false;
  VectorX<Scalar> sn_u;
  VectorX<Scalar> sn_v;

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

/// Insertion-ordered collection of parameters, addressable by name.
template <typename Scalar>
class ParameterSet {
 public:
  ParameterSet() = default;
  ParameterSet(const ParameterSet& other) { *this = other; }
  ParameterSet& operator=(const ParameterSet& other);
  ParameterSet(ParameterSet&&) noexcept = default;
  ParameterSet& operator=(ParameterSet&&) noexcept = default;

  Parameter<Scalar>& add(const std::string& name, int rows, int cols);
  Parameter<Scalar>& get(const std::string& name);
  const Parameter<Scalar>& get(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::size_t size() const { return params_.size(); }
  Parameter<Scalar>& operator[](std::size_t i) { return *params_[i]; }
  const Parameter<Scalar>& operator[](std::size_t i) const { return *params_[i]; }

  /// Total number of scalar entries across all parameters.
  std::size_t count() const;
  void zero_grad();

 private:
  std::vector<std::unique_ptr<Parameter<Scalar>>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

template <typename Scalar>
class Tape;

/// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
template <typename Scalar>
class Var {
 public:
  Var() = default;
  Var(Tape<Scalar>* tape, std::size_t id) : tape_(tape), id_(id) {}

  bool valid() const { return tape_ != nullptr; }
  Tape<Scalar>* tape() const { return tape_; }
  std::size_t id() const { return id_; }

  const MatrixX<Scalar>& value() const;
  const MatrixX<Scalar>& grad() const;
  const Shape& shape() const;
  bool requires_grad() const;

  Scalar item() const { return value()(0, 0); }

 private:
  Tape<Scalar>* tape_ = nullptr;
  std::size_t id_ = 0;
};

template <typename Scalar>
class Tape {
 public:
  using Matrix = MatrixX<Scalar>;
  using Backward = std::function<void(const Matrix& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<Scalar> constant(Matrix value, Shape shape);
  /// Leaf whose gradient is kept on the tape (inspect with Var::grad()).
  Var<Scalar> input(Matrix value, Shape shape);
  /// Leaf bound to a parameter; gradients are added to `p.grad` when
  /// `trainable` is set and the parameter itself is trainable.
  Var<Scalar> parameter(Parameter<Scalar>& p, bool trainable = true);

  /// Records an op result. `backward` runs only if `requires_grad`.
  Var<Scalar> record(Matrix value, Shape shape, bool requires_grad, Backward backward);

  /// Seeds d(root)/d(root) = 1 for a 1x1 root and propagates to all leaves.
  void backward(const Var<Scalar>& root);

  void accumulate(std::size_t id, const Matrix& g);
  template <typename Derived>
  void accumulate(std::size_t id, const Eigen::MatrixBase<Derived>& g) {
    accumulate(id, Matrix(g));
  }

  const Matrix& value(std::size_t id) const { return nodes_[id].value; }
  const Matrix& grad(std::size_t id) const { return nodes_[id].grad; }
  const Shape& shape(std::size_t id) const { return nodes_[id].shape; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    Shape shape;
    bool requires_grad = false;
    Backward backward;
  };
  std::deque<Node> nodes_;
};

template <typename Scalar>
const MatrixX<Scalar>& Var<Scalar>::value() const { return tape_->value(id_); }
template <typename Scalar>
const MatrixX<Scalar>& Var<Scalar>::grad() const { return tape_->grad(id_); }
template <typename Scalar>
const Shape& Var<Scalar>::shape() const { return tape_->shape(id_); }
template <typename Scalar>
bool Var<Scalar>::requires_grad() const { return tape_->requires_grad(id_); }

// ---------------------------------------------------------------------------
// Elementwise and structural ops.

template <typename Scalar> Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b);
template <typename Scalar> Var<Scalar> sub(const Var<Scalar>& a, const Var<Scalar>& b);
template <typename Scalar> Var<Scalar> scale(const Var<Scalar>& a, Scalar s);
template <typename Scalar> Var<Scalar> add_constant(const Var<Scalar>& a, Scalar c);
template <typename Scalar> Var<Scalar> relu(const Var<Scalar>& a);
template <typename Scalar> Var<Scalar> tanh(const Var<Scalar>& a);

/// Multiplies every entry by the 1x1 variable `s`.
template <typename Scalar> Var<Scalar> mul_scalar(const Var<Scalar>& a, const Var<Scalar>& s);
/// Adds the 1x1 variable `s` to every entry.
template <typename Scalar> Var<Scalar> add_scalar(const Var<Scalar>& a, const Var<Scalar>& s);

template <typename Scalar> Var<Scalar> concat_channels(const Var<Scalar>& a, const Var<Scalar>& b);
template <typename Scalar> Var<Scalar> concat_batch(const Var<Scalar>& a, const Var<Scalar>& b);
template <typename Scalar> Var<Scalar> slice_batch(const Var<Scalar>& a, int start, int count);
template <typename Scalar> Var<Scalar> slice_rows(const Var<Scalar>& a, int start, int count);

/// Plain matrix product; the result inherits the shape of `b`.
template <typename Scalar> Var<Scalar> matmul(const Var<Scalar>& a, const Var<Scalar>& b);

/// Selects columns of `table` (rows x M) by index; result is rows x indices.size().
template <typename Scalar>
Var<Scalar> gather_columns(const Var<Scalar>& table, const std::vector<int>& indices);

/// Per-column inner products. `b` may have a single column, broadcast over `a`.
template <typename Scalar> Var<Scalar> column_dot(const Var<Scalar>& a, const Var<Scalar>& b);

/// Averages consecutive groups of `group` columns.
template <typename Scalar> Var<Scalar> group_mean_columns(const Var<Scalar>& a, int group);

template <typename Scalar> Var<Scalar> mean(const Var<Scalar>& a);
template <typename Scalar> Var<Scalar> mean_abs_diff(const Var<Scalar>& a, const Var<Scalar>& b);

// ---------------------------------------------------------------------------
// Convolutional ops.

/// Stride-1 "same" convolution with an odd square kernel. Weight layout is
/// out_channels x (kernel*kernel*in_channels), kernel position major.
/// `bias` may be an invalid Var.
template <typename Scalar>
Var<Scalar> conv2d(const Var<Scalar>& x, const Var<Scalar>& weight, const Var<Scalar>& bias,
                   int kernel);

template <typename Scalar> Var<Scalar> avg_pool2(const Var<Scalar>& x);
template <typename Scalar> Var<Scalar> upsample2(const Var<Scalar>& x);
/// Sums over spatial positions; result is channels x batch.
template <typename Scalar> Var<Scalar> sum_pool(const Var<Scalar>& x);

/// Per-sample, per-channel standardization over spatial positions.
template <typename Scalar> Var<Scalar> instance_norm(const Var<Scalar>& x, Scalar eps);

/// out = (1 + scale_delta) * x + bias, per channel and sample. The
/// modulation tensors are channels x batch, or channels x 1 to broadcast.
template <typename Scalar>
Var<Scalar> channel_affine(const Var<Scalar>& x, const Var<Scalar>& scale_delta,
                           const Var<Scalar>& bias);

/// Dot-product attention over spatial positions of each sample:
/// out[:, j] = sum_i softmax_i(query_i . key_j) * value[:, i].
template <typename Scalar>
Var<Scalar> spatial_attention(const Var<Scalar>& query, const Var<Scalar>& key,
                              const Var<Scalar>& value);

/// Divides `weight` by its top singular value sigma = u' W v. With
/// `n_iter` > 0, u and v are first refined by power iteration in place.
/// u and v are treated as constants when differentiating.
template <typename Scalar>
Var<Scalar> spectral_normalized(const Var<Scalar>& weight, VectorX<Scalar>& u, VectorX<Scalar>& v,
                                int n_iter, Scalar eps = Scalar(1e-12));

}  // namespace fsh
