#pragma once

#include <span>

#include "taskroute/autograd.hpp"

namespace taskroute {

/// SGD with classical momentum: v <- momentum*v + grad; value <- value - lr*v.
/// Every parameter must carry a gradient; gradients are cleared afterwards.
/// Throws UsageError naming the first parameter without a gradient, before
/// touching any state.
template <typename T>
void sgd_momentum_step(std::span<Parameter<T>* const> params, T lr, T momentum);

}  // namespace taskroute
