#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "lap/network.hpp"
#include "lap/tensor.hpp"

namespace lap::ot {

inline constexpr std::size_t kMaxOracleSize = 512;

/// Discrete Monge solution between two uniform clouds of M points.
struct Assignment {
  std::vector<std::size_t> permutation;  // row i of X goes to row permutation[i] of Y
  double cost = 0.0;                     // (1/M) sum_i ||x_i - y_perm(i)||^p
};

/// c(x, y) = ||x - y||_2^p
double ground_cost(std::span<const double> x, std::span<const double> y, double p);

/// (1/M) sum_i c(x_i, y_perm(i)) for clouds X[M,d], Y[M,d].
double assignment_cost(const Tensor& x, const Tensor& y, std::span<const std::size_t> perm,
                       double p);

/// Exact minimum-cost perfect matching (shortest augmenting path Hungarian
/// method with dual potentials, O(M^3)). Among optimal matchings the
/// lexicographically smallest permutation is returned. `cost` estimates
/// W_p^p between the empirical measures. Requires M <= kMaxOracleSize and p >= 1.
Assignment hungarian_wp(const Tensor& x, const Tensor& y, double p);

/// T(x) = shift + scale * (x - source_mean), componentwise.
struct DiagonalAffineMap {
  std::vector<double> scale;
  std::vector<double> shift;
  std::vector<double> source_mean;

  std::vector<double> operator()(std::span<const double> x) const;
  /// Applies the map to every row of X[M,d].
  Tensor apply(const Tensor& x) const;
};

/// W2-optimal map between N(m0, diag(s0^2)) and N(m1, diag(s1^2)):
/// scale = s1 / s0, shift = m1.
DiagonalAffineMap gaussian_ot_map(std::span<const double> m0, std::span<const double> s0,
                                  std::span<const double> m1, std::span<const double> s1);

/// Closed-form W2^2 between the two diagonal Gaussians.
double gaussian_w2_squared(std::span<const double> m0, std::span<const double> s0,
                           std::span<const double> m1, std::span<const double> s1);

struct BoundReport {
  double k_times_cost = 0.0;  // K * mean_b sum_k ||v_k||^2
  double endpoint_msd = 0.0;  // mean_b ||phi_K - phi_0||^2
  double w2_squared = 0.0;    // Hungarian W2^2(phi_0 cloud, phi_K cloud)
  std::optional<double> ratio;  // k_times_cost / w2_squared, absent when w2 is 0

  /// {"k_times_cost", "endpoint_msd", "w2_squared", "ratio"}; ratio is null
  /// when absent.
  std::string to_json() const;
};

class BoundViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Absolute slack allowed in each inequality of the chain.
inline constexpr double kBoundTolerance = 1e-9;

/// Runs `batch` through the model in eval mode and checks
///   K * cost >= endpoint MSD >= W2^2(input states, output states).
/// Throws BoundViolation if either inequality fails beyond tolerance.
BoundReport network_cost_bound_check(Model& model, const Tensor& batch);

/// Chain check on an already collected trajectory.
BoundReport cost_bound_check(const Trajectory& traj);

}  // namespace lap::ot
