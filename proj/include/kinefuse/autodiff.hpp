#pragma once

// Fixed-size forward-mode jets for the small per-sample kernels (camera head,
// root exponential map, calibration quaternions, drift knots).

#include <Eigen/Core>
#include <unsupported/Eigen/AutoDiff>

namespace kinefuse {

template <int N>
using Jet = Eigen::AutoDiffScalar<Eigen::Matrix<double, N, 1>>;

/// Jet seeded as the i-th independent variable.
template <int N>
Jet<N> make_jet(double value, int i) {
  return Jet<N>(value, N, i);
}

template <int N>
Jet<N> make_const(double value) {
  return Jet<N>(value, Eigen::Matrix<double, N, 1>::Zero());
}

}  // namespace kinefuse
