#pragma once

#include <functional>
#include <vector>

#include "kd/tensor.hpp"

namespace kd {

/// Central-difference gradient of a scalar function with respect to x.
/// f is re-evaluated with x's storage perturbed in place, so it must read
/// x's current values on every call.
std::vector<double> finite_difference_gradient(
    const std::function<double()>& f, Tensor& x, double h = 1e-5);

/// Max relative error between two gradient vectors, guarded for
/// near-zero entries.
double max_rel_error(const std::vector<double>& a,
                     const std::vector<double>& b, double floor = 1e-6);

}  // namespace kd
