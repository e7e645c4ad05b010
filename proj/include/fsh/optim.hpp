#pragma once

#include "fsh/autograd.hpp"

#include <map>
#include <string>

namespace fsh {

struct AdamSettings {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adaptive moment estimation with bias correction. Moments are keyed by
/// parameter name so state survives checkpoint round trips.
template <typename Scalar>
class Adam {
 public:
  struct Moments {
    MatrixX<Scalar> first;
    MatrixX<Scalar> second;
  };

  explicit Adam(AdamSettings settings = {}) : settings_(settings) {}

  /// Applies one update from the accumulated gradients of every trainable parameter.
  void step(ParameterSet<Scalar>& params);

  long steps() const { return steps_; }
  const AdamSettings& settings() const { return settings_; }
  void set_lr(double lr) { settings_.lr = lr; }

  std::map<std::string, Moments>& moments() { return moments_; }
  const std::map<std::string, Moments>& moments() const { return moments_; }
  void restore(long steps, std::map<std::string, Moments> moments) {
    steps_ = steps;
    moments_ = std::move(moments);
  }

 private:
  AdamSettings settings_;
  long steps_ = 0;
  std::map<std::string, Moments> moments_;
};

}  // namespace fsh
