#include "taskroute/optim.hpp"

namespace taskroute {

template <typename T>
void sgd_momentum_step(std::span<Parameter<T>* const> params, T lr, T momentum) {
  for (const Parameter<T>* p : params) {
    if (!p->grad) throw UsageError("sgd step: parameter '" + p->name + "' has no gradient");
    if (p->grad->shape() != p->value.shape()) {
      throw UsageError("sgd step: gradient shape " + shape_str(p->grad->shape()) + " of parameter '" + p->name +
                       "' does not match " + shape_str(p->value.shape()));
    }
  }
  for (Parameter<T>* p : params) {
    auto value = p->value.data();
    auto velocity = p->velocity.data();
    const auto grad = p->grad->data();
    for (std::size_t i = 0; i < value.size(); ++i) {
      velocity[i] = momentum * velocity[i] + grad[i];
      value[i] -= lr * velocity[i];
    }
    p->grad.reset();
  }
}

template void sgd_momentum_step(std::span<Parameter<float>* const>, float, float);
template void sgd_momentum_step(std::span<Parameter<double>* const>, double, double);

}  // namespace taskroute
