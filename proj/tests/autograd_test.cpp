#include "gradcheck.hpp"

#include "fsh/autograd.hpp"
#include "fsh/errors.hpp"

#include <doctest.h>

#include <random>

using namespace fsh;
using fsh::test::check_input_gradient;

namespace {

MatrixX<double> random_matrix(int rows, int cols, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  MatrixX<double> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

/// Contracts a tensor with fixed random weights so every entry matters.
Var<double> probe(Tape<double>& t, const Var<double>& y) {
  const auto& v = y.value();
  auto w = t.constant(random_matrix(static_cast<int>(v.rows()), static_cast<int>(v.cols()), 99), y.shape());
  return mean(column_dot(y, w));
}

constexpr double kTol = 1e-3;

}  // namespace

TEST_SUITE("autograd") {
  TEST_CASE("elementwise ops match finite differences") {
    const Shape s{2, 3, 3};
    const auto x = random_matrix(4, s.columns(), 1, 0.1, 1.0);
    CHECK(check_input_gradient(x, s, [](Tape<double>& t, const Var<double>& a) { return probe(t, tanh(a)); }) < kTol);
    CHECK(check_input_gradient(x, s, [](Tape<double>& t, const Var<double>& a) { return probe(t, relu(a)); }) < kTol);
    CHECK(check_input_gradient(x, s, [](Tape<double>& t, const Var<double>& a) {
            return probe(t, add_constant(scale(a, 2.5), -0.3));
          }) < kTol);
    CHECK(check_input_gradient(x, s, [](Tape<double>& t, const Var<double>& a) {
            return probe(t, sub(a, scale(a, 0.5)));
          }) < kTol);
  }

  TEST_CASE("scalar broadcast ops") {
    const Shape s{1, 2, 2};
    const auto x = random_matrix(3, 4, 2);
    CHECK(check_input_gradient(x, s, [](Tape<double>& t, const Var<double>& a) {
            auto g = slice_rows(slice_batch(a, 0, 1), 0, 1);  // 1 x 4
            auto one = mean(g);
            return probe(t, mul_scalar(a, one));
          }) < kTol);
    CHECK(check_input_gradient(x, s, [](Tape<double>& t, const Var<double>& a) {
            return probe(t, add_scalar(a, mean(a)));
          }) < kTol);
  }

  TEST_CASE("structural ops") {
    const Shape s{2, 2, 2};
    const auto x = random_matrix(4, s.columns(), 3);
    CHECK(check_input_gradient(x, s, [](Tape<double>& t, const Var<double>& a) {
            return probe(t, concat_channels(a, scale(a, 3.0)));
          }) < kTol);
    CHECK(check_input_gradient(x, s, [](Tape<double>& t, const Var<double>& a) {
            return probe(t, concat_batch(slice_batch(a, 1, 1), a));
          }) < kTol);
    CHECK(check_input_gradient(x, s, [](Tape<double>& t, const Var<double>& a) {
            return probe(t, slice_rows(a, 1, 2));
          }) < kTol);
  }

  TEST_CASE("matrix and column ops") {
    const auto x = random_matrix(3, 4, 4);
    const Shape s{4, 1, 1};
    CHECK(check_input_gradient(x, s, [](Tape<double>& t, const Var<double>& a) {
            auto m = t.constant(random_matrix(5, 3, 5), Shape{3, 1, 1});
            return probe(t, matmul(m, a));
          }) < kTol);
    CHECK(check_input_gradient(x, s, [](Tape<double>& t, const Var<double>& a) {
            return probe(t, gather_columns(a, {3, 0, 0, 2, 1}));
          }) < kTol);
    CHECK(check_input_gradient(x, s, [](Tape<double>& t, const Var<double>& a) {
            return probe(t, column_dot(a, slice_batch(a, 2, 1)));
          }) < kTol);
    CHECK(check_input_gradient(x, s, [](Tape<double>& t, const Var<double>& a) {
            return probe(t, group_mean_columns(a, 2));
          }) < kTol);
    CHECK(check_input_gradient(x, s, [](Tape<double>& t, const Var<double>& a) {
            return mean_abs_diff(a, t.constant(MatrixX<double>::Constant(3, 4, 2.0), Shape{4, 1, 1}));
          }) < kTol);
  }

  TEST_CASE("convolution, pooling and normalization") {
    const Shape s{2, 4, 4};
    const auto x = random_matrix(3, s.columns(), 6);
    for (int k : {1, 3}) {
      CHECK(check_input_gradient(x, s, [k](Tape<double>& t, const Var<double>& a) {
              auto w = t.constant(random_matrix(2, k * k * 3, 7), Shape{k * k * 3, 1, 1});
              auto b = t.constant(random_matrix(2, 1, 8), Shape{1, 1, 1});
              return probe(t, conv2d(a, w, b, k));
            }) < kTol);
    }
    const auto w0 = random_matrix(2, 27, 9);
    CHECK(check_input_gradient(w0, Shape{27, 1, 1}, [&x, s](Tape<double>& t, const Var<double>& w) {
            return probe(t, conv2d(t.constant(x, s), w, Var<double>{}, 3));
          }) < kTol);
    CHECK(check_input_gradient(x, s, [](Tape<double>& t, const Var<double>& a) { return probe(t, avg_pool2(a)); }) <
          kTol);
    CHECK(check_input_gradient(x, s, [](Tape<double>& t, const Var<double>& a) { return probe(t, upsample2(a)); }) <
          kTol);
    CHECK(check_input_gradient(x, s, [](Tape<double>& t, const Var<double>& a) { return probe(t, sum_pool(a)); }) <
          kTol);
    CHECK(check_input_gradient(x, s, [](Tape<double>& t, const Var<double>& a) {
            return probe(t, instance_norm(a, 1e-5));
          }) < kTol);
  }

  TEST_CASE("channel affine with per-sample and broadcast modulation") {
    const Shape s{2, 2, 2};
    const auto x = random_matrix(3, s.columns(), 10);
    for (int cols : {1, 2}) {
      const auto mod = random_matrix(6, cols, 11);
      CHECK(check_input_gradient(mod, Shape{cols, 1, 1}, [&x, s](Tape<double>& t, const Var<double>& m) {
              return probe(t, channel_affine(t.constant(x, s), slice_rows(m, 0, 3), slice_rows(m, 3, 3)));
            }) < kTol);
    }
    CHECK(check_input_gradient(x, s, [](Tape<double>& t, const Var<double>& a) {
            auto m = t.constant(random_matrix(3, 2, 12), Shape{2, 1, 1});
            return probe(t, channel_affine(a, m, m));
          }) < kTol);
  }

  TEST_CASE("spatial attention") {
    const Shape s{2, 2, 2};
    const auto x = random_matrix(3, s.columns(), 13);
    CHECK(check_input_gradient(x, s, [](Tape<double>& t, const Var<double>& a) {
            return probe(t, spatial_attention(slice_rows(a, 0, 2), slice_rows(a, 1, 2), a));
          }) < kTol);
  }

  TEST_CASE("spectral normalization with frozen vectors") {
    const auto w0 = random_matrix(4, 6, 14);
    VectorX<double> u = VectorX<double>::Ones(4).normalized(), v = VectorX<double>::Ones(6).normalized();
    Tape<double> warm;
    spectral_normalized(warm.constant(w0, Shape{6, 1, 1}), u, v, 20);
    CHECK(check_input_gradient(w0, Shape{6, 1, 1}, [&](Tape<double>& t, const Var<double>& w) {
            VectorX<double> uu = u, vv = v;
            return probe(t, spectral_normalized(w, uu, vv, 0));
          }) < kTol);
  }

  TEST_CASE("parameters accumulate into Parameter::grad only when trainable") {
    ParameterSet<double> ps;
    auto& p = ps.add("p", 2, 2);
    p.value.setConstant(1.0);
    {
      Tape<double> t;
      auto l = mean(t.parameter(p, true));
      t.backward(l);
    }
    CHECK(p.grad(0, 0) == doctest::Approx(0.25));
    ps.zero_grad();
    {
      Tape<double> t;
      auto l = mean(t.parameter(p, false));
      t.backward(l);
    }
    CHECK(p.grad.isZero());
    p.trainable = false;
    {
      Tape<double> t;
      auto l = mean(t.parameter(p, true));
      t.backward(l);
    }
    CHECK(p.grad.isZero());
  }

  TEST_CASE("contract violations throw") {
    Tape<double> t;
    auto a = t.constant(MatrixX<double>::Zero(2, 3), Shape{3, 1, 1});
    auto b = t.constant(MatrixX<double>::Zero(3, 3), Shape{3, 1, 1});
    CHECK_THROWS_AS(add(a, b), ContractError);
    CHECK_THROWS_AS(t.backward(a), ContractError);
  }
}
