#include "fsh/autograd.hpp"

#include "fsh/errors.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace fsh {

// ---------------------------------------------------------------------------
// ParameterSet

template <typename Scalar>
ParameterSet<Scalar>& ParameterSet<Scalar>::operator=(const ParameterSet& other) {
  if (this == &other) return *this;
  params_.clear();
  index_ = other.index_;
  params_.reserve(other.params_.size());
  for (const auto& p : other.params_) params_.push_back(std::make_unique<Parameter<Scalar>>(*p));
  return *this;
}

template <typename Scalar>
Parameter<Scalar>& ParameterSet<Scalar>::add(const std::string& name, int rows, int cols) {
  if (contains(name)) throw ContractError("duplicate parameter name: " + name);
  auto p = std::make_unique<Parameter<Scalar>>();
  p->name = name;
  p->value = MatrixX<Scalar>::Zero(rows, cols);
  p->grad = MatrixX<Scalar>::Zero(rows, cols);
  index_[name] = params_.size();
  params_.push_back(std::move(p));
  return *params_.back();
}

template <typename Scalar>
Parameter<Scalar>& ParameterSet<Scalar>::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ContractError("unknown parameter: " + name);
  return *params_[it->second];
}

template <typename Scalar>
const Parameter<Scalar>& ParameterSet<Scalar>::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ContractError("unknown parameter: " + name);
  return *params_[it->second];
}

template <typename Scalar>
std::size_t ParameterSet<Scalar>::count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += static_cast<std::size_t>(p->value.size());
  return n;
}

template <typename Scalar>
void ParameterSet<Scalar>::zero_grad() {
  for (auto& p : params_) p->zero_grad();
}

// ---------------------------------------------------------------------------
// Tape

template <typename Scalar>
Var<Scalar> Tape<Scalar>::constant(Matrix value, Shape shape) {
  return record(std::move(value), shape, false, {});
}

template <typename Scalar>
Var<Scalar> Tape<Scalar>::input(Matrix value, Shape shape) {
  return record(std::move(value), shape, true, [](const Matrix&) {});
}

template <typename Scalar>
Var<Scalar> Tape<Scalar>::parameter(Parameter<Scalar>& p, bool trainable) {
  const bool rg = trainable && p.trainable;
  Shape shape{static_cast<int>(p.value.cols()), 1, 1};
  Parameter<Scalar>* target = &p;
  return record(p.value, shape, rg, [target](const Matrix& g) {
    if (target->grad.size() != target->value.size())
      target->grad.setZero(target->value.rows(), target->value.cols());
    target->grad += g;
  });
}

template <typename Scalar>
Var<Scalar> Tape<Scalar>::record(Matrix value, Shape shape, bool requires_grad, Backward backward) {
  if (value.cols() != shape.columns())
    throw ContractError("tensor columns do not match its shape");
  Node node;
  node.value = std::move(value);
  node.shape = shape;
  node.requires_grad = requires_grad;
  if (requires_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var<Scalar>(this, nodes_.size() - 1);
}

template <typename Scalar>
void Tape<Scalar>::accumulate(std::size_t id, const Matrix& g) {
  Node& n = nodes_[id];
  if (!n.requires_grad) return;
  if (n.grad.size() == 0)
    n.grad = g;
  else
    n.grad += g;
}

template <typename Scalar>
void Tape<Scalar>::backward(const Var<Scalar>& root) {
  if (root.tape() != this) throw ContractError("backward root belongs to another tape");
  Node& r = nodes_[root.id()];
  if (r.value.size() != 1) throw ContractError("backward root must be a scalar");
  if (!r.requires_grad) return;
  r.grad = Matrix::Ones(1, 1);
  for (std::size_t i = root.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || !n.backward || n.grad.size() == 0) continue;
    n.backward(n.grad);
  }
}

// ---------------------------------------------------------------------------
// Helpers

namespace {

template <typename Scalar>
bool any_grad(std::initializer_list<const Var<Scalar>*> vars) {
  for (const auto* v : vars)
    if (v->valid() && v->requires_grad()) return true;
  return false;
}

template <typename Scalar>
void require_same(const Var<Scalar>& a, const Var<Scalar>& b, const char* op) {
  if (a.tape() != b.tape()) throw ContractError(std::string(op) + ": operands on different tapes");
  if (a.value().rows() != b.value().rows() || a.value().cols() != b.value().cols())
    throw ContractError(std::string(op) + ": shape mismatch");
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise

template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b) {
  require_same(a, b, "add");
  auto* t = a.tape();
  const auto ia = a.id(), ib = b.id();
  return t->record(a.value() + b.value(), a.shape(), any_grad({&a, &b}),
                   [t, ia, ib](const MatrixX<Scalar>& g) {
                     t->accumulate(ia, g);
                     t->accumulate(ib, g);
                   });
}

template <typename Scalar>
Var<Scalar> sub(const Var<Scalar>& a, const Var<Scalar>& b) {
  require_same(a, b, "sub");
  auto* t = a.tape();
  const auto ia = a.id(), ib = b.id();
  return t->record(a.value() - b.value(), a.shape(), any_grad({&a, &b}),
                   [t, ia, ib](const MatrixX<Scalar>& g) {
                     t->accumulate(ia, g);
                     t->accumulate(ib, (-g).eval());
                   });
}

template <typename Scalar>
Var<Scalar> scale(const Var<Scalar>& a, Scalar s) {
  auto* t = a.tape();
  const auto ia = a.id();
  return t->record(a.value() * s, a.shape(), a.requires_grad(),
                   [t, ia, s](const MatrixX<Scalar>& g) { t->accumulate(ia, (g * s).eval()); });
}

template <typename Scalar>
Var<Scalar> add_constant(const Var<Scalar>& a, Scalar c) {
  auto* t = a.tape();
  const auto ia = a.id();
  return t->record((a.value().array() + c).matrix(), a.shape(), a.requires_grad(),
                   [t, ia](const MatrixX<Scalar>& g) { t->accumulate(ia, g); });
}

template <typename Scalar>
Var<Scalar> relu(const Var<Scalar>& a) {
  auto* t = a.tape();
  const auto ia = a.id();
  return t->record(a.value().cwiseMax(Scalar(0)), a.shape(), a.requires_grad(),
                   [t, ia](const MatrixX<Scalar>& g) {
                     const auto& x = t->value(ia);
                     MatrixX<Scalar> gx = (x.array() > Scalar(0)).select(g, Scalar(0));
                     t->accumulate(ia, gx);
                   });
}

template <typename Scalar>
Var<Scalar> tanh(const Var<Scalar>& a) {
  auto* t = a.tape();
  const auto ia = a.id();
  const auto iy = t->size();
  return t->record(a.value().array().tanh().matrix(), a.shape(), a.requires_grad(),
                   [t, ia, iy](const MatrixX<Scalar>& g) {
                     const auto& y = t->value(iy);
                     t->accumulate(ia, (g.array() * (Scalar(1) - y.array().square())).matrix().eval());
                   });
}

template <typename Scalar>
Var<Scalar> mul_scalar(const Var<Scalar>& a, const Var<Scalar>& s) {
  if (s.value().size() != 1) throw ContractError("mul_scalar: multiplier must be 1x1");
  auto* t = a.tape();
  const auto ia = a.id(), is = s.id();
  const Scalar k = s.item();
  return t->record(a.value() * k, a.shape(), any_grad({&a, &s}),
                   [t, ia, is, k](const MatrixX<Scalar>& g) {
                     if (t->requires_grad(ia)) t->accumulate(ia, (g * k).eval());
                     if (t->requires_grad(is)) {
                       MatrixX<Scalar> gs(1, 1);
                       gs(0, 0) = g.cwiseProduct(t->value(ia)).sum();
                       t->accumulate(is, gs);
                     }
                   });
}

template <typename Scalar>
Var<Scalar> add_scalar(const Var<Scalar>& a, const Var<Scalar>& s) {
  if (s.value().size() != 1) throw ContractError("add_scalar: addend must be 1x1");
  auto* t = a.tape();
  const auto ia = a.id(), is = s.id();
  return t->record((a.value().array() + s.item()).matrix(), a.shape(), any_grad({&a, &s}),
                   [t, ia, is](const MatrixX<Scalar>& g) {
                     t->accumulate(ia, g);
                     if (t->requires_grad(is)) {
                       MatrixX<Scalar> gs(1, 1);
                       gs(0, 0) = g.sum();
                       t->accumulate(is, gs);
                     }
                   });
}

template <typename Scalar>
Var<Scalar> concat_channels(const Var<Scalar>& a, const Var<Scalar>& b) {
  if (!(a.shape() == b.shape())) throw ContractError("concat_channels: shape mismatch");
  auto* t = a.tape();
  const auto ia = a.id(), ib = b.id();
  const auto ra = a.value().rows(), rb = b.value().rows();
  MatrixX<Scalar> out(ra + rb, a.value().cols());
  out.topRows(ra) = a.value();
  out.bottomRows(rb) = b.value();
  return t->record(std::move(out), a.shape(), any_grad({&a, &b}),
                   [t, ia, ib, ra, rb](const MatrixX<Scalar>& g) {
                     if (t->requires_grad(ia)) t->accumulate(ia, g.topRows(ra).eval());
                     if (t->requires_grad(ib)) t->accumulate(ib, g.bottomRows(rb).eval());
                   });
}

template <typename Scalar>
Var<Scalar> concat_batch(const Var<Scalar>& a, const Var<Scalar>& b) {
  const Shape sa = a.shape(), sb = b.shape();
  if (sa.height != sb.height || sa.width != sb.width || a.value().rows() != b.value().rows())
    throw ContractError("concat_batch: shape mismatch");
  auto* t = a.tape();
  const auto ia = a.id(), ib = b.id();
  const auto ca = a.value().cols(), cb = b.value().cols();
  MatrixX<Scalar> out(a.value().rows(), ca + cb);
  out.leftCols(ca) = a.value();
  out.rightCols(cb) = b.value();
  Shape s = sa;
  s.batch = sa.batch + sb.batch;
  return t->record(std::move(out), s, any_grad({&a, &b}),
                   [t, ia, ib, ca, cb](const MatrixX<Scalar>& g) {
                     if (t->requires_grad(ia)) t->accumulate(ia, g.leftCols(ca).eval());
                     if (t->requires_grad(ib)) t->accumulate(ib, g.rightCols(cb).eval());
                   });
}

template <typename Scalar>
Var<Scalar> slice_batch(const Var<Scalar>& a, int start, int count) {
  const Shape sa = a.shape();
  if (start < 0 || count < 1 || start + count > sa.batch) throw ContractError("slice_batch: range");
  auto* t = a.tape();
  const auto ia = a.id();
  const int hw = sa.pixels();
  const auto rows = a.value().rows(), cols = a.value().cols();
  Shape s = sa;
  s.batch = count;
  return t->record(a.value().middleCols(start * hw, count * hw), s, a.requires_grad(),
                   [t, ia, start, hw, count, rows, cols](const MatrixX<Scalar>& g) {
                     MatrixX<Scalar> full = MatrixX<Scalar>::Zero(rows, cols);
                     full.middleCols(start * hw, count * hw) = g;
                     t->accumulate(ia, full);
                   });
}

template <typename Scalar>
Var<Scalar> slice_rows(const Var<Scalar>& a, int start, int count) {
  if (start < 0 || count < 1 || start + count > a.value().rows())
    throw ContractError("slice_rows: range");
  auto* t = a.tape();
  const auto ia = a.id();
  const auto rows = a.value().rows(), cols = a.value().cols();
  return t->record(a.value().middleRows(start, count), a.shape(), a.requires_grad(),
                   [t, ia, start, count, rows, cols](const MatrixX<Scalar>& g) {
                     MatrixX<Scalar> full = MatrixX<Scalar>::Zero(rows, cols);
                     full.middleRows(start, count) = g;
                     t->accumulate(ia, full);
                   });
}

template <typename Scalar>
Var<Scalar> matmul(const Var<Scalar>& a, const Var<Scalar>& b) {
  if (a.value().cols() != b.value().rows()) throw ContractError("matmul: inner dimension mismatch");
  auto* t = a.tape();
  const auto ia = a.id(), ib = b.id();
  MatrixX<Scalar> out = a.value() * b.value();
  return t->record(std::move(out), b.shape(), any_grad({&a, &b}),
                   [t, ia, ib](const MatrixX<Scalar>& g) {
                     if (t->requires_grad(ia))
                       t->accumulate(ia, (g * t->value(ib).transpose()).eval());
                     if (t->requires_grad(ib))
                       t->accumulate(ib, (t->value(ia).transpose() * g).eval());
                   });
}

template <typename Scalar>
Var<Scalar> gather_columns(const Var<Scalar>& table, const std::vector<int>& indices) {
  const auto& w = table.value();
  MatrixX<Scalar> out(w.rows(), static_cast<Eigen::Index>(indices.size()));
  for (std::size_t k = 0; k < indices.size(); ++k) {
    if (indices[k] < 0 || indices[k] >= w.cols())
      throw ContractError("gather_columns: index " + std::to_string(indices[k]) + " out of range");
    out.col(static_cast<Eigen::Index>(k)) = w.col(indices[k]);
  }
  auto* t = table.tape();
  const auto it = table.id();
  const auto rows = w.rows(), cols = w.cols();
  Shape s{static_cast<int>(indices.size()), 1, 1};
  return t->record(std::move(out), s, table.requires_grad(),
                   [t, it, indices, rows, cols](const MatrixX<Scalar>& g) {
                     MatrixX<Scalar> full = MatrixX<Scalar>::Zero(rows, cols);
                     for (std::size_t k = 0; k < indices.size(); ++k)
                       full.col(indices[k]) += g.col(static_cast<Eigen::Index>(k));
                     t->accumulate(it, full);
                   });
}

template <typename Scalar>
Var<Scalar> column_dot(const Var<Scalar>& a, const Var<Scalar>& b) {
  const auto& av = a.value();
  const auto& bv = b.value();
  const bool broadcast = bv.cols() == 1 && av.cols() != 1;
  if (av.rows() != bv.rows() || (!broadcast && av.cols() != bv.cols()))
    throw ContractError("column_dot: shape mismatch");
  MatrixX<Scalar> out(1, av.cols());
  for (Eigen::Index j = 0; j < av.cols(); ++j)
    out(0, j) = av.col(j).dot(bv.col(broadcast ? 0 : j));
  auto* t = a.tape();
  const auto ia = a.id(), ib = b.id();
  Shape s{static_cast<int>(av.cols()), 1, 1};
  return t->record(std::move(out), s, any_grad({&a, &b}),
                   [t, ia, ib, broadcast](const MatrixX<Scalar>& g) {
                     const auto& av = t->value(ia);
                     const auto& bv = t->value(ib);
                     if (t->requires_grad(ia)) {
                       MatrixX<Scalar> ga(av.rows(), av.cols());
                       for (Eigen::Index j = 0; j < av.cols(); ++j)
                         ga.col(j) = bv.col(broadcast ? 0 : j) * g(0, j);
                       t->accumulate(ia, ga);
                     }
                     if (t->requires_grad(ib)) {
                       MatrixX<Scalar> gb = MatrixX<Scalar>::Zero(bv.rows(), bv.cols());
                       for (Eigen::Index j = 0; j < av.cols(); ++j)
                         gb.col(broadcast ? 0 : j) += av.col(j) * g(0, j);
                       t->accumulate(ib, gb);
                     }
                   });
}

template <typename Scalar>
Var<Scalar> group_mean_columns(const Var<Scalar>& a, int group) {
  const auto& av = a.value();
  if (group < 1 || av.cols() % group != 0) throw ContractError("group_mean_columns: bad group size");
  const auto groups = av.cols() / group;
  MatrixX<Scalar> out(av.rows(), groups);
  for (Eigen::Index j = 0; j < groups; ++j)
    out.col(j) = av.middleCols(j * group, group).rowwise().sum() / Scalar(group);
  auto* t = a.tape();
  const auto ia = a.id();
  Shape s{static_cast<int>(groups), 1, 1};
  return t->record(std::move(out), s, a.requires_grad(),
                   [t, ia, group](const MatrixX<Scalar>& g) {
                     MatrixX<Scalar> ga(g.rows(), g.cols() * group);
                     for (Eigen::Index j = 0; j < g.cols(); ++j)
                       ga.middleCols(j * group, group) = (g.col(j) / Scalar(group)).replicate(1, group);
                     t->accumulate(ia, ga);
                   });
}

template <typename Scalar>
Var<Scalar> mean(const Var<Scalar>& a) {
  auto* t = a.tape();
  const auto ia = a.id();
  const auto n = a.value().size();
  MatrixX<Scalar> out(1, 1);
  out(0, 0) = a.value().mean();
  return t->record(std::move(out), Shape{}, a.requires_grad(),
                   [t, ia, n](const MatrixX<Scalar>& g) {
                     const auto& x = t->value(ia);
                     t->accumulate(ia, MatrixX<Scalar>::Constant(x.rows(), x.cols(), g(0, 0) / Scalar(n)));
                   });
}

template <typename Scalar>
Var<Scalar> mean_abs_diff(const Var<Scalar>& a, const Var<Scalar>& b) {
  require_same(a, b, "mean_abs_diff");
  auto* t = a.tape();
  const auto ia = a.id(), ib = b.id();
  const auto n = a.value().size();
  MatrixX<Scalar> out(1, 1);
  out(0, 0) = (a.value() - b.value()).cwiseAbs().sum() / Scalar(n);
  return t->record(std::move(out), Shape{}, any_grad({&a, &b}),
                   [t, ia, ib, n](const MatrixX<Scalar>& g) {
                     MatrixX<Scalar> sign =
                         (t->value(ia) - t->value(ib)).array().sign().matrix() * (g(0, 0) / Scalar(n));
                     if (t->requires_grad(ia)) t->accumulate(ia, sign);
                     if (t->requires_grad(ib)) t->accumulate(ib, (-sign).eval());
                   });
}

// ---------------------------------------------------------------------------
// Convolution

namespace {

template <typename Scalar>
void im2col(const MatrixX<Scalar>& x, const Shape& s, int kernel, MatrixX<Scalar>& cols) {
  const int c = static_cast<int>(x.rows());
  const int pad = kernel / 2;
  const int h = s.height, w = s.width, hw = s.pixels();
  cols.resize(static_cast<Eigen::Index>(kernel) * kernel * c, s.columns());
  for (int b = 0; b < s.batch; ++b) {
    for (int yy = 0; yy < h; ++yy) {
      for (int xx = 0; xx < w; ++xx) {
        const int p = b * hw + yy * w + xx;
        Scalar* dst = cols.col(p).data();
        for (int ky = 0; ky < kernel; ++ky) {
          const int sy = yy + ky - pad;
          for (int kx = 0; kx < kernel; ++kx, dst += c) {
            const int sx = xx + kx - pad;
            if (sy < 0 || sy >= h || sx < 0 || sx >= w) {
              std::fill(dst, dst + c, Scalar(0));
            } else {
              const Scalar* src = x.col(b * hw + sy * w + sx).data();
              std::copy(src, src + c, dst);
            }
          }
        }
      }
    }
  }
}

template <typename Scalar>
void col2im(const MatrixX<Scalar>& cols, const Shape& s, int kernel, int c, MatrixX<Scalar>& x) {
  const int pad = kernel / 2;
  const int h = s.height, w = s.width, hw = s.pixels();
  x.setZero(c, s.columns());
  for (int b = 0; b < s.batch; ++b) {
    for (int yy = 0; yy < h; ++yy) {
      for (int xx = 0; xx < w; ++xx) {
        const int p = b * hw + yy * w + xx;
        const Scalar* src = cols.col(p).data();
        for (int ky = 0; ky < kernel; ++ky) {
          const int sy = yy + ky - pad;
          for (int kx = 0; kx < kernel; ++kx, src += c) {
            const int sx = xx + kx - pad;
            if (sy < 0 || sy >= h || sx < 0 || sx >= w) continue;
            Scalar* dst = x.col(b * hw + sy * w + sx).data();
            for (int k = 0; k < c; ++k) dst[k] += src[k];
          }
        }
      }
    }
  }
}

}  // namespace

template <typename Scalar>
Var<Scalar> conv2d(const Var<Scalar>& x, const Var<Scalar>& weight, const Var<Scalar>& bias,
                   int kernel) {
  if (kernel < 1 || kernel % 2 == 0) throw ContractError("conv2d: kernel must be odd");
  const auto& xv = x.value();
  const auto& wv = weight.value();
  const int cin = static_cast<int>(xv.rows());
  if (wv.cols() != static_cast<Eigen::Index>(kernel) * kernel * cin)
    throw ContractError("conv2d: weight has " + std::to_string(wv.cols()) + " columns, expected " +
                        std::to_string(kernel * kernel * cin));
  const bool has_bias = bias.valid();
  if (has_bias && (bias.value().rows() != wv.rows() || bias.value().cols() != 1))
    throw ContractError("conv2d: bias shape mismatch");

  const Shape s = x.shape();
  auto cols = std::make_shared<MatrixX<Scalar>>();
  const MatrixX<Scalar>* input = &xv;
  if (kernel > 1) {
    im2col(xv, s, kernel, *cols);
    input = cols.get();
  }
  MatrixX<Scalar> out(wv.rows(), s.columns());
  out.noalias() = wv * (*input);
  if (has_bias) out.colwise() += bias.value().col(0);

  auto* t = x.tape();
  const auto ix = x.id(), iw = weight.id();
  const auto ib = has_bias ? bias.id() : std::size_t(0);
  const bool rg = any_grad({&x, &weight}) || (has_bias && bias.requires_grad());
  if (!rg || !weight.requires_grad()) cols.reset();
  return t->record(std::move(out), s, rg,
                   [t, ix, iw, ib, has_bias, kernel, s, cin, cols](const MatrixX<Scalar>& g) {
                     if (t->requires_grad(iw)) {
                       const MatrixX<Scalar>& in = kernel > 1 ? *cols : t->value(ix);
                       MatrixX<Scalar> gw(g.rows(), in.rows());
                       gw.noalias() = g * in.transpose();
                       t->accumulate(iw, gw);
                     }
                     if (has_bias && t->requires_grad(ib)) t->accumulate(ib, g.rowwise().sum().eval());
                     if (t->requires_grad(ix)) {
                       MatrixX<Scalar> gcols(t->value(iw).cols(), g.cols());
                       gcols.noalias() = t->value(iw).transpose() * g;
                       if (kernel == 1) {
                         t->accumulate(ix, gcols);
                       } else {
                         MatrixX<Scalar> gx;
                         col2im(gcols, s, kernel, cin, gx);
                         t->accumulate(ix, gx);
                       }
                     }
                   });
}

template <typename Scalar>
Var<Scalar> avg_pool2(const Var<Scalar>& x) {
  const Shape s = x.shape();
  if (s.height % 2 || s.width % 2) throw ContractError("avg_pool2: odd spatial size");
  const Shape o{s.batch, s.height / 2, s.width / 2};
  const auto& xv = x.value();
  MatrixX<Scalar> out(xv.rows(), o.columns());
  for (int b = 0; b < s.batch; ++b)
    for (int y = 0; y < o.height; ++y)
      for (int xx = 0; xx < o.width; ++xx) {
        const int base = b * s.pixels() + 2 * y * s.width + 2 * xx;
        out.col(b * o.pixels() + y * o.width + xx) =
            Scalar(0.25) * (xv.col(base) + xv.col(base + 1) + xv.col(base + s.width) +
                            xv.col(base + s.width + 1));
      }
  auto* t = x.tape();
  const auto ix = x.id();
  return t->record(std::move(out), o, x.requires_grad(), [t, ix, s, o](const MatrixX<Scalar>& g) {
    MatrixX<Scalar> gx(g.rows(), s.columns());
    for (int b = 0; b < s.batch; ++b)
      for (int y = 0; y < o.height; ++y)
        for (int xx = 0; xx < o.width; ++xx) {
          const int base = b * s.pixels() + 2 * y * s.width + 2 * xx;
          const auto q = (Scalar(0.25) * g.col(b * o.pixels() + y * o.width + xx)).eval();
          gx.col(base) = q;
          gx.col(base + 1) = q;
          gx.col(base + s.width) = q;
          gx.col(base + s.width + 1) = q;
        }
    t->accumulate(ix, gx);
  });
}

template <typename Scalar>
Var<Scalar> upsample2(const Var<Scalar>& x) {
  const Shape s = x.shape();
  const Shape o{s.batch, s.height * 2, s.width * 2};
  const auto& xv = x.value();
  MatrixX<Scalar> out(xv.rows(), o.columns());
  for (int b = 0; b < o.batch; ++b)
    for (int y = 0; y < o.height; ++y)
      for (int xx = 0; xx < o.width; ++xx)
        out.col(b * o.pixels() + y * o.width + xx) = xv.col(b * s.pixels() + (y / 2) * s.width + xx / 2);
  auto* t = x.tape();
  const auto ix = x.id();
  return t->record(std::move(out), o, x.requires_grad(), [t, ix, s, o](const MatrixX<Scalar>& g) {
    MatrixX<Scalar> gx = MatrixX<Scalar>::Zero(g.rows(), s.columns());
    for (int b = 0; b < o.batch; ++b)
      for (int y = 0; y < o.height; ++y)
        for (int xx = 0; xx < o.width; ++xx)
          gx.col(b * s.pixels() + (y / 2) * s.width + xx / 2) += g.col(b * o.pixels() + y * o.width + xx);
    t->accumulate(ix, gx);
  });
}

template <typename Scalar>
Var<Scalar> sum_pool(const Var<Scalar>& x) {
  const Shape s = x.shape();
  const auto& xv = x.value();
  const int hw = s.pixels();
  MatrixX<Scalar> out(xv.rows(), s.batch);
  for (int b = 0; b < s.batch; ++b) out.col(b) = xv.middleCols(b * hw, hw).rowwise().sum();
  auto* t = x.tape();
  const auto ix = x.id();
  return t->record(std::move(out), Shape{s.batch, 1, 1}, x.requires_grad(),
                   [t, ix, s, hw](const MatrixX<Scalar>& g) {
                     MatrixX<Scalar> gx(g.rows(), s.columns());
                     for (int b = 0; b < s.batch; ++b) gx.middleCols(b * hw, hw) = g.col(b).replicate(1, hw);
                     t->accumulate(ix, gx);
                   });
}

template <typename Scalar>
Var<Scalar> instance_norm(const Var<Scalar>& x, Scalar eps) {
  const Shape s = x.shape();
  const int hw = s.pixels();
  const auto& xv = x.value();
  auto xhat = std::make_shared<MatrixX<Scalar>>(xv.rows(), xv.cols());
  auto inv_std = std::make_shared<MatrixX<Scalar>>(xv.rows(), s.batch);
  for (int b = 0; b < s.batch; ++b) {
    auto block = xv.middleCols(b * hw, hw);
    VectorX<Scalar> mu = block.rowwise().mean();
    MatrixX<Scalar> centered = block.colwise() - mu;
    VectorX<Scalar> var = centered.array().square().rowwise().mean();
    VectorX<Scalar> is = (var.array() + eps).rsqrt();
    inv_std->col(b) = is;
    xhat->middleCols(b * hw, hw) = is.asDiagonal() * centered;
  }
  auto* t = x.tape();
  const auto ix = x.id();
  MatrixX<Scalar> out = *xhat;
  return t->record(std::move(out), s, x.requires_grad(),
                   [t, ix, s, hw, xhat, inv_std](const MatrixX<Scalar>& g) {
                     MatrixX<Scalar> gx(g.rows(), g.cols());
                     for (int b = 0; b < s.batch; ++b) {
                       auto gb = g.middleCols(b * hw, hw);
                       auto xb = xhat->middleCols(b * hw, hw);
                       VectorX<Scalar> mg = gb.rowwise().mean();
                       VectorX<Scalar> mgx = gb.cwiseProduct(xb).rowwise().mean();
                       MatrixX<Scalar> d = gb.colwise() - mg;
                       d -= mgx.asDiagonal() * xb;
                       gx.middleCols(b * hw, hw) = inv_std->col(b).asDiagonal() * d;
                     }
                     t->accumulate(ix, gx);
                   });
}

template <typename Scalar>
Var<Scalar> channel_affine(const Var<Scalar>& x, const Var<Scalar>& scale_delta,
                           const Var<Scalar>& bias) {
  const Shape s = x.shape();
  const int hw = s.pixels();
  const auto& xv = x.value();
  const auto& dv = scale_delta.value();
  const auto& bv = bias.value();
  const bool broadcast = dv.cols() == 1;
  if (dv.rows() != xv.rows() || bv.rows() != xv.rows() || dv.cols() != bv.cols() ||
      (!broadcast && dv.cols() != s.batch))
    throw ContractError("channel_affine: modulation shape mismatch");
  MatrixX<Scalar> out(xv.rows(), xv.cols());
  for (int b = 0; b < s.batch; ++b) {
    const int m = broadcast ? 0 : b;
    VectorX<Scalar> sc = dv.col(m).array() + Scalar(1);
    out.middleCols(b * hw, hw) = (sc.asDiagonal() * xv.middleCols(b * hw, hw)).colwise() + bv.col(m);
  }
  auto* t = x.tape();
  const auto ix = x.id(), id = scale_delta.id(), ib = bias.id();
  return t->record(std::move(out), s, any_grad({&x, &scale_delta, &bias}),
                   [t, ix, id, ib, s, hw, broadcast](const MatrixX<Scalar>& g) {
                     const auto& xv = t->value(ix);
                     const auto& dv = t->value(id);
                     MatrixX<Scalar> gd = MatrixX<Scalar>::Zero(dv.rows(), dv.cols());
                     MatrixX<Scalar> gb = MatrixX<Scalar>::Zero(dv.rows(), dv.cols());
                     MatrixX<Scalar> gx;
                     const bool need_x = t->requires_grad(ix);
                     if (need_x) gx.resize(g.rows(), g.cols());
                     for (int b = 0; b < s.batch; ++b) {
                       const int m = broadcast ? 0 : b;
                       auto gblk = g.middleCols(b * hw, hw);
                       gd.col(m) += gblk.cwiseProduct(xv.middleCols(b * hw, hw)).rowwise().sum();
                       gb.col(m) += gblk.rowwise().sum();
                       if (need_x) {
                         VectorX<Scalar> sc = dv.col(m).array() + Scalar(1);
                         gx.middleCols(b * hw, hw) = sc.asDiagonal() * gblk;
                       }
                     }
                     if (need_x) t->accumulate(ix, gx);
                     t->accumulate(id, gd);
                     t->accumulate(ib, gb);
                   });
}

template <typename Scalar>
Var<Scalar> spatial_attention(const Var<Scalar>& query, const Var<Scalar>& key,
                              const Var<Scalar>& value) {
  const Shape s = value.shape();
  if (!(query.shape() == s) || !(key.shape() == s) || query.value().rows() != key.value().rows())
    throw ContractError("spatial_attention: shape mismatch");
  const int n = s.pixels();
  const auto& qv = query.value();
  const auto& kv = key.value();
  const auto& vv = value.value();
  auto weights = std::make_shared<std::vector<MatrixX<Scalar>>>(s.batch);
  MatrixX<Scalar> out(vv.rows(), vv.cols());
  for (int b = 0; b < s.batch; ++b) {
    MatrixX<Scalar> logits = qv.middleCols(b * n, n).transpose() * kv.middleCols(b * n, n);
    // Column j holds the distribution over source positions i for target j.
    for (int j = 0; j < n; ++j) {
      auto col = logits.col(j);
      col = (col.array() - col.maxCoeff()).exp().matrix();
      col /= col.sum();
    }
    out.middleCols(b * n, n).noalias() = vv.middleCols(b * n, n) * logits;
    (*weights)[b] = std::move(logits);
  }
  auto* t = query.tape();
  const auto iq = query.id(), ik = key.id(), iv = value.id();
  return t->record(std::move(out), s, any_grad({&query, &key, &value}),
                   [t, iq, ik, iv, s, n, weights](const MatrixX<Scalar>& g) {
                     const auto& qv = t->value(iq);
                     const auto& kv = t->value(ik);
                     const auto& vv = t->value(iv);
                     MatrixX<Scalar> gq(qv.rows(), qv.cols()), gk(kv.rows(), kv.cols()), gv(vv.rows(), vv.cols());
                     for (int b = 0; b < s.batch; ++b) {
                       const auto& a = (*weights)[b];
                       auto gb = g.middleCols(b * n, n);
                       gv.middleCols(b * n, n).noalias() = gb * a.transpose();
                       MatrixX<Scalar> ga = vv.middleCols(b * n, n).transpose() * gb;
                       // Softmax backward, column by column.
                       Eigen::Matrix<Scalar, 1, Eigen::Dynamic> dots =
                           a.cwiseProduct(ga).colwise().sum();
                       MatrixX<Scalar> gl = a.cwiseProduct(ga - dots.replicate(n, 1));
                       gq.middleCols(b * n, n).noalias() = kv.middleCols(b * n, n) * gl.transpose();
                       gk.middleCols(b * n, n).noalias() = qv.middleCols(b * n, n) * gl;
                     }
                     t->accumulate(iq, gq);
                     t->accumulate(ik, gk);
                     t->accumulate(iv, gv);
                   });
}

template <typename Scalar>
Var<Scalar> spectral_normalized(const Var<Scalar>& weight, VectorX<Scalar>& u, VectorX<Scalar>& v,
                                int n_iter, Scalar eps) {
  const auto& w = weight.value();
  if (u.size() != w.rows() || v.size() != w.cols())
    throw ContractError("spectral_normalized: power-iteration vectors have wrong size");
  for (int it = 0; it < n_iter; ++it) {
    VectorX<Scalar> nv = w.transpose() * u;
    const Scalar nvn = nv.norm();
    if (nvn > eps) v = nv / nvn;
    VectorX<Scalar> nu = w * v;
    const Scalar nun = nu.norm();
    if (nun > eps) u = nu / nun;
  }
  const Scalar sigma = std::max(u.dot(w * v), eps);
  auto* t = weight.tape();
  const auto iw = weight.id();
  MatrixX<Scalar> out = w / sigma;
  VectorX<Scalar> uc = u, vc = v;
  return t->record(std::move(out), weight.shape(), weight.requires_grad(),
                   [t, iw, sigma, uc, vc](const MatrixX<Scalar>& g) {
                     const auto& w = t->value(iw);
                     const Scalar inner = g.cwiseProduct(w).sum() / sigma;
                     MatrixX<Scalar> gw = (g - inner * (uc * vc.transpose())) / sigma;
                     t->accumulate(iw, gw);
                   });
}

// ---------------------------------------------------------------------------
// Explicit instantiations

#define FSH_INSTANTIATE(S)                                                                       \
  template class ParameterSet<S>;                                                                \
  template class Tape<S>;                                                                        \
  template Var<S> add(const Var<S>&, const Var<S>&);                                             \
  template Var<S> sub(const Var<S>&, const Var<S>&);                                             \
  template Var<S> scale(const Var<S>&, S);                                                       \
  template Var<S> add_constant(const Var<S>&, S);                                                \
  template Var<S> relu(const Var<S>&);                                                           \
  template Var<S> tanh(const Var<S>&);                                                           \
  template Var<S> mul_scalar(const Var<S>&, const Var<S>&);                                      \
  template Var<S> add_scalar(const Var<S>&, const Var<S>&);                                      \
  template Var<S> concat_channels(const Var<S>&, const Var<S>&);                                 \
  template Var<S> concat_batch(const Var<S>&, const Var<S>&);                                    \
  template Var<S> slice_batch(const Var<S>&, int, int);                                          \
  template Var<S> slice_rows(const Var<S>&, int, int);                                           \
  template Var<S> matmul(const Var<S>&, const Var<S>&);                                          \
  template Var<S> gather_columns(const Var<S>&, const std::vector<int>&);                        \
  template Var<S> column_dot(const Var<S>&, const Var<S>&);                                      \
  template Var<S> group_mean_columns(const Var<S>&, int);                                        \
  template Var<S> mean(const Var<S>&);                                                           \
  template Var<S> mean_abs_diff(const Var<S>&, const Var<S>&);                                   \
  template Var<S> conv2d(const Var<S>&, const Var<S>&, const Var<S>&, int);                      \
  template Var<S> avg_pool2(const Var<S>&);                                                      \
  template Var<S> upsample2(const Var<S>&);                                                      \
  template Var<S> sum_pool(const Var<S>&);                                                       \
  template Var<S> instance_norm(const Var<S>&, S);                                               \
  template Var<S> channel_affine(const Var<S>&, const Var<S>&, const Var<S>&);                   \
  template Var<S> spatial_attention(const Var<S>&, const Var<S>&, const Var<S>&);                \
  template Var<S> spectral_normalized(const Var<S>&, VectorX<S>&, VectorX<S>&, int, S);

FSH_INSTANTIATE(float)
FSH_INSTANTIATE(double)

#undef FSH_INSTANTIATE

}  // namespace fsh
