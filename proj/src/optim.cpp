#include "fsh/optim.hpp"

#include <cmath>

namespace fsh {

template <typename Scalar>
void Adam<Scalar>::step(ParameterSet<Scalar>& params) {
  ++steps_;
  const Scalar b1 = static_cast<Scalar>(settings_.beta1);
  const Scalar b2 = static_cast<Scalar>(settings_.beta2);
  const Scalar c1 = static_cast<Scalar>(1.0 - std::pow(settings_.beta1, double(steps_)));
  const Scalar c2 = static_cast<Scalar>(1.0 - std::pow(settings_.beta2, double(steps_)));
  const Scalar lr = static_cast<Scalar>(settings_.lr);
  const Scalar eps = static_cast<Scalar>(settings_.eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (!p.trainable) continue;
    if (p.grad.size() != p.value.size()) p.zero_grad();
    auto& m = moments_[p.name];
    if (m.first.size() != p.value.size()) {
      m.first = MatrixX<Scalar>::Zero(p.value.rows(), p.value.cols());
      m.second = MatrixX<Scalar>::Zero(p.value.rows(), p.value.cols());
    }
    m.first = b1 * m.first + (Scalar(1) - b1) * p.grad;
    m.second = b2 * m.second + (Scalar(1) - b2) * p.grad.cwiseAbs2();
    p.value.array() -= lr * (m.first.array() / c1) / ((m.second.array() / c2).sqrt() + eps);
  }
}

template class Adam<float>;
template class Adam<double>;

}  // namespace fsh
