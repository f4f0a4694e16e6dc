#pragma once

#include <functional>

#include "lqec/tensor.hpp"

namespace lqec::detail {

// Builds and backpropagates loss_fn(i) for i in [0, n), spreading the
// sequences across the worker pool. Each worker accumulates leaf gradients
// into its own sink; sinks are merged in worker order and per-sequence
// loss values are summed in index order, so the result is bit-identical
// regardless of scheduling. Returns the summed loss value.
double batched_loss_backward(int n, const std::function<Tensor(int)>& loss_fn);

}  // namespace lqec::detail
