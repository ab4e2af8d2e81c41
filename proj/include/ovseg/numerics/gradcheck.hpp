#pragma once

#include <functional>

#include "ovseg/numerics/tensor.hpp"

namespace ovseg {

/// Compares the tape gradient of a scalar function against central
/// differences. Returns the largest |g_tape - g_fd| / max(|g_tape|, |g_fd|, 1e-8)
/// over all elements of x. x's values are restored on return.
double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, Tensor x, double eps = 1e-5);

}  // namespace ovseg
