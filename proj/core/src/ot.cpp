#include "lap/ot.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace lap::ot {

namespace {

void check_clouds(const Tensor& x, const Tensor& y) {
  if (x.rank() != 2 || y.rank() != 2 || x.shape() != y.shape())
    throw ShapeError("point clouds must both be [M,d], got " + shape_str(x.shape()) + " and " +
                     shape_str(y.shape()));
  require_finite(x, "source cloud");
  require_finite(y, "target cloud");
}

std::span<const double> row(const Tensor& t, std::size_t i) {
  const std::size_t d = t.dim(1);
  return t.data().subspan(i * d, d);
}

// Among perfect matchings of the tight (zero reduced cost) subgraph, walk
// rows in order and give each the smallest column that still admits a
// perfect matching for the remaining rows.
class LexRefiner {
 public:
  LexRefiner(std::vector<std::vector<std::size_t>> tight, std::vector<std::size_t> match_row)
      : n_(match_row.size()),
        tight_(std::move(tight)),
        match_row_(std::move(match_row)),
        match_col_(n_),
        fixed_(n_, false) {
    for (std::size_t i = 0; i < n_; ++i) match_col_[match_row_[i]] = i;
  }

  std::vector<std::size_t> run() {
    for (std::size_t i = 0; i < n_; ++i) {
      for (std::size_t j : tight_[i]) {
        const std::size_t owner = match_col_[j];
        if (fixed_[owner] && owner != i) continue;
        if (j == match_row_[i] || reroute(i, j)) break;
      }
      fixed_[i] = true;
    }
    return match_row_;
  }

 private:
  // Try to give row i column j: the current owner of j must reach i's old
  // column through an alternating path over unfixed rows.
  bool reroute(std::size_t i, std::size_t j) {
    const std::size_t target = match_row_[i];
    visited_.assign(n_, false);
    path_.clear();
    if (!search(match_col_[j], target, i)) return false;
    // path_ holds (row, new column) pairs; apply them, then i -> j.
    for (auto [r, c] : path_) {
      match_row_[r] = c;
      match_col_[c] = r;
    }
    match_row_[i] = j;
    match_col_[j] = i;
    return true;
  }

  bool search(std::size_t r, std::size_t target, std::size_t excluded) {
    for (std::size_t c : tight_[r]) {
      if (visited_[c]) continue;
      visited_[c] = true;
      if (c == target) {
        path_.emplace_back(r, c);
        return true;
      }
      const std::size_t owner = match_col_[c];
      if (owner == r || owner == excluded || fixed_[owner]) continue;
      path_.emplace_back(r, c);
      if (search(owner, target, excluded)) return true;
      path_.pop_back();
    }
    return false;
  }

  std::size_t n_;
  std::vector<std::vector<std::size_t>> tight_;
  std::vector<std::size_t> match_row_, match_col_;
  std::vector<bool> fixed_;
  std::vector<bool> visited_;
  std::vector<std::pair<std::size_t, std::size_t>> path_;
};

}  // namespace

double ground_cost(std::span<const double> x, std::span<const double> y, double p) {
  double d2 = 0.0;
  for (std::size_t k = 0; k < x.size(); ++k) d2 += (x[k] - y[k]) * (x[k] - y[k]);
  if (p == 2.0) return d2;
  return std::pow(std::sqrt(d2), p);
}

double assignment_cost(const Tensor& x, const Tensor& y, std::span<const std::size_t> perm,
                       double p) {
  check_clouds(x, y);
  const std::size_t M = x.dim(0);
  if (perm.size() != M) throw ShapeError("permutation length does not match the clouds");
  double total = 0.0;
  for (std::size_t i = 0; i < M; ++i) total += ground_cost(row(x, i), row(y, perm[i]), p);
  return total / static_cast<double>(M);
}

Assignment hungarian_wp(const Tensor& x, const Tensor& y, double p) {
  check_clouds(x, y);
  if (!(p >= 1.0)) throw std::invalid_argument("hungarian_wp needs p >= 1");
  const std::size_t n = x.dim(0);
  if (n > kMaxOracleSize)
    throw std::invalid_argument("hungarian_wp is capped at " + std::to_string(kMaxOracleSize) +
                                " points, got " + std::to_string(n));

  std::vector<double> a(n * n);
  double scale = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      a[i * n + j] = ground_cost(row(x, i), row(y, j), p);
      scale = std::max(scale, a[i * n + j]);
    }

  // Potentials u (rows) and v (columns), 1-based with a virtual column 0.
  constexpr double kInf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
  std::vector<std::size_t> owner(n + 1, 0), way(n + 1, 0);
  std::vector<bool> used(n + 1);
  for (std::size_t i = 1; i <= n; ++i) {
    owner[0] = i;
    std::size_t j0 = 0;
    std::fill(minv.begin(), minv.end(), kInf);
    std::fill(used.begin(), used.end(), false);
    do {
      used[j0] = true;
      const std::size_t i0 = owner[j0];
      double delta = kInf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = a[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[owner[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (owner[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      owner[j0] = owner[j1];
      j0 = j1;
    } while (j0 != 0);
  }

  std::vector<std::size_t> match_row(n);
  for (std::size_t j = 1; j <= n; ++j) match_row[owner[j] - 1] = j - 1;

  const double tol = 1e-12 * std::max(1.0, scale);
  std::vector<std::vector<std::size_t>> tight(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (j == match_row[i] || a[i * n + j] - u[i + 1] - v[j + 1] <= tol) tight[i].push_back(j);

  Assignment out;
  out.permutation = LexRefiner(std::move(tight), std::move(match_row)).run();
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) total += a[i * n + out.permutation[i]];
  out.cost = total / static_cast<double>(n);
  return out;
}

std::vector<double> DiagonalAffineMap::operator()(std::span<const double> x) const {
  if (x.size() != scale.size()) throw ShapeError("point dimension does not match the map");
  std::vector<double> out(x.size());
  for (std::size_t k = 0; k < x.size(); ++k)
    out[k] = shift[k] + scale[k] * (x[k] - source_mean[k]);
  return out;
}

Tensor DiagonalAffineMap::apply(const Tensor& x) const {
  if (x.rank() != 2 || x.dim(1) != scale.size())
    throw ShapeError("cloud " + shape_str(x.shape()) + " does not match a map of dimension " +
                     std::to_string(scale.size()));
  Tensor out(x.shape());
  const std::size_t d = scale.size();
  for (std::size_t i = 0; i < x.dim(0); ++i) {
    const auto y = (*this)(row(x, i));
    std::copy(y.begin(), y.end(), out.ptr() + i * d);
  }
  return out;
}

namespace {
void check_gaussians(std::span<const double> m0, std::span<const double> s0,
                     std::span<const double> m1, std::span<const double> s1) {
  const std::size_t d = m0.size();
  if (d == 0 || s0.size() != d || m1.size() != d || s1.size() != d)
    throw ShapeError("Gaussian parameters must share one positive dimension");
  for (std::size_t k = 0; k < d; ++k)
    if (!(s0[k] > 0.0) || !(s1[k] > 0.0))
      throw std::invalid_argument("Gaussian standard deviations must be positive");
}
}  // namespace

DiagonalAffineMap gaussian_ot_map(std::span<const double> m0, std::span<const double> s0,
                                  std::span<const double> m1, std::span<const double> s1) {
  check_gaussians(m0, s0, m1, s1);
  DiagonalAffineMap map;
  for (std::size_t k = 0; k < m0.size(); ++k) {
    map.scale.push_back(s1[k] / s0[k]);
    map.shift.push_back(m1[k]);
    map.source_mean.push_back(m0[k]);
  }
  return map;
}

double gaussian_w2_squared(std::span<const double> m0, std::span<const double> s0,
                           std::span<const double> m1, std::span<const double> s1) {
  check_gaussians(m0, s0, m1, s1);
  double w = 0.0;
  for (std::size_t k = 0; k < m0.size(); ++k)
    w += (m0[k] - m1[k]) * (m0[k] - m1[k]) + (s0[k] - s1[k]) * (s0[k] - s1[k]);
  return w;
}

std::string BoundReport::to_json() const {
  nlohmann::json j{{"k_times_cost", k_times_cost},
                   {"endpoint_msd", endpoint_msd},
                   {"w2_squared", w2_squared}};
  j["ratio"] = ratio ? nlohmann::json(*ratio) : nlohmann::json(nullptr);
  return j.dump();
}

BoundReport cost_bound_check(const Trajectory& traj) {
  const auto bounds = displacement_endpoint_bound(traj);
  BoundReport r;
  for (const auto& b : bounds) {
    r.k_times_cost += b.lhs;
    r.endpoint_msd += b.rhs;
  }
  const double B = static_cast<double>(bounds.size());
  r.k_times_cost /= B;
  r.endpoint_msd /= B;
  r.w2_squared = hungarian_wp(traj.states.front(), traj.states.back(), 2.0).cost;
  if (r.w2_squared > 0.0) r.ratio = r.k_times_cost / r.w2_squared;

  auto violated = [](double big, double small) { return big < small - kBoundTolerance; };
  std::ostringstream why;
  why.precision(17);
  if (violated(r.k_times_cost, r.endpoint_msd))
    why << "K*cost " << r.k_times_cost << " < endpoint MSD " << r.endpoint_msd;
  else if (violated(r.endpoint_msd, r.w2_squared))
    why << "endpoint MSD " << r.endpoint_msd << " < W2^2 " << r.w2_squared;
  if (!why.str().empty()) throw BoundViolation("transport bound chain violated: " + why.str());
  return r;
}

BoundReport network_cost_bound_check(Model& model, const Tensor& batch) {
  if (batch.dim(0) > kMaxOracleSize)
    throw std::invalid_argument("bound check batch exceeds the oracle size");
  Tape tape;
  const auto pass = model.forward(tape, batch, Mode::eval);
  return cost_bound_check(collect_trajectory(tape, pass));
}

}  // namespace lap::ot
