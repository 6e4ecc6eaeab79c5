#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>

#include "lap/network.hpp"
#include "lap/tape.hpp"

namespace lap {

struct GradCheckOptions {
  double step = 1e-5;
  /// Above this many coordinates a seeded subset of about this size is
  /// checked: each leaf gets a proportional share, never fewer than 4.
  std::size_t max_coordinates = 10000;
  std::uint64_t seed = 0;
  /// Leave out coordinates whose +h and -h evaluations have a different ReLU
  /// sign pattern: there the difference quotient averages two slopes and
  /// says nothing about the derivative.
  bool skip_kinks = true;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t coordinates = 0;     // how many were compared
  std::size_t kink_crossings = 0;  // sampled but left out, see skip_kinks
  std::size_t worst_leaf = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

/// Builds a scalar on a fresh tape. Leaf i of `params` must be registered as
/// tape.parameter(i, *params[i]).
using TapeFn = std::function<NodeId(Tape&)>;

/// Central differences against reverse mode. The error of one coordinate is
/// |g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|); the max over all checked
/// coordinates is returned. Parameters are restored bit-exactly.
GradCheckResult grad_check(const TapeFn& f, std::span<Tensor* const> params,
                           const GradCheckOptions& options = {});

/// grad_check of cross entropy + cost_weight * transport cost over every
/// model parameter, train-mode batch statistics, running stats untouched.
GradCheckResult model_grad_check(Model& model, const Tensor& inputs, std::span<const int> labels,
                                 double cost_weight, const GradCheckOptions& options = {});

/// Cross entropy divided by transport cost at the current parameters, so that
/// both terms of the checked objective have the same size. A large cost term
/// otherwise lifts the rounding noise of the difference quotient (about
/// 1e-16 * |f| / h) above the small gradients of wide layers.
double balanced_cost_weight(Model& model, const Tensor& inputs, std::span<const int> labels);

}  // namespace lap
