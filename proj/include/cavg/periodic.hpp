#pragma once

// T-periodic solutions of x' = eps f(t, x, eps) as fixed points of the time-T
// map, continuation in eps toward a zero of the averaged field, and the
// end-to-end `certify` pipeline (boundary check, degree, orbit, convergence).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <fmt/format.h>
#include <fmt/ranges.h>

#include "cavg/degree.hpp"
#include "cavg/integrator.hpp"
#include "cavg/quadrature.hpp"
#include "cavg/system.hpp"

namespace cavg {

class PeriodicError : public std::runtime_error {
 public:
  enum class Kind { invalid_input, degenerate, no_bracket, no_convergence };

  PeriodicError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

  [[nodiscard]] Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

struct PeriodicOptions {
  double tol = 1e-10;               // bound on |P(z) - z|
  double integration_tol = 1e-12;   // verification runs at a tenth of this
  int scan_points = 64;             // 1D bracketing grid over V
  int max_iterations = 200;
  int max_restarts = 3;             // nD: fresh finite-difference Jacobians on stagnation
};

struct PeriodicOrbit {
  double eps = 0.0;
  std::vector<double> fixed_point;
  double residual = 0.0;            // |P(z) - z| at the solver's integration tolerance
  double verified_residual = 0.0;   // same, from an independent integration at tol / 10
  Trajectory trajectory;            // from the verification integration
  bool inside_V = false;
  std::optional<double> sup_dist;   // sup_t |phi(t) - z*| when z* is known
  int iterations = 0;
};

inline double sup_distance(const Trajectory& traj, std::span<const double> z_star) {
  double sup = 0.0;
  for (const auto& x : traj.x) {
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) s += (x[i] - z_star[i]) * (x[i] - z_star[i]);
    sup = std::max(sup, std::sqrt(s));
  }
  return sup;
}

namespace detail {

inline double euclid(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

class Displacement {
 public:
  Displacement(const CaratheodorySystem& sys, double eps, double tol) : sys_(sys), eps_(eps) { opt_.tol = tol; }

  /// P(z) - z, or nullopt when the trajectory cannot be completed.
  std::optional<std::vector<double>> operator()(std::span<const double> z) const {
    try {
      auto p = poincare(sys_, z, eps_, opt_);
      for (std::size_t i = 0; i < p.size(); ++i) p[i] -= z[i];
      return p;
    } catch (const IntegrationError&) {
      return std::nullopt;
    }
  }

 private:
  const CaratheodorySystem& sys_;
  double eps_;
  IntegratorOptions opt_;
};

struct SolveResult {
  std::vector<double> z;
  double residual = 0.0;
  int iterations = 0;
};

// Bracket the displacement on a grid over V, then alternate secant and
// bisection steps. Bisection alone guarantees termination; it also reaches
// zeros where the displacement is not Lipschitz.
inline SolveResult solve_scalar(const Displacement& d, const Box& V, double guess, const PeriodicOptions& opt) {
  auto eval = [&](double r) -> std::optional<double> {
    const double z[1] = {r};
    auto v = d(z);
    if (!v) return std::nullopt;
    return (*v)[0];
  };
  int evals = 0;
  if (auto g = eval(guess); g && std::abs(*g) <= opt.tol) return {{guess}, std::abs(*g), 1};

  const double lo = V.lo[0], hi = V.hi[0];
  const int m = std::max(2, opt.scan_points);
  std::vector<double> xs(m);
  std::vector<std::optional<double>> ds(m);
  for (int i = 0; i < m; ++i) {
    xs[i] = lo + (hi - lo) * (i + 0.5) / m;
    ds[i] = eval(xs[i]);
    ++evals;
  }

  // Closest candidate to the guess: an exact grid hit or a sign change.
  double best_dist = std::numeric_limits<double>::infinity();
  std::optional<int> hit;
  std::optional<int> bracket;
  for (int i = 0; i < m; ++i) {
    if (ds[i] && std::abs(*ds[i]) <= opt.tol && std::abs(xs[i] - guess) < best_dist) {
      best_dist = std::abs(xs[i] - guess);
      hit = i;
      bracket.reset();
    }
    if (i + 1 < m && ds[i] && ds[i + 1] && (*ds[i]) * (*ds[i + 1]) < 0.0) {
      const double dist = std::abs(0.5 * (xs[i] + xs[i + 1]) - guess);
      if (dist < best_dist) {
        best_dist = dist;
        bracket = i;
        hit.reset();
      }
    }
  }
  if (hit) return {{xs[*hit]}, std::abs(*ds[*hit]), evals};
  if (!bracket) {
    throw PeriodicError(PeriodicError::Kind::no_bracket,
                        "displacement P(z) - z has no sign change over V; no fixed point was bracketed");
  }

  double a = xs[*bracket], b = xs[*bracket + 1];
  double da = *ds[*bracket], db = *ds[*bracket + 1];
  for (int it = 0; it < opt.max_iterations; ++it) {
    double c;
    const double mid = 0.5 * (a + b);
    if (it % 2 == 0 && db != da) {
      c = b - db * (b - a) / (db - da);
      if (!(c > a && c < b)) c = mid;
    } else {
      c = mid;
    }
    if (!(c > a && c < b)) break;  // a and b are adjacent doubles
    auto dc = eval(c);
    ++evals;
    if (!dc) {
      throw PeriodicError(PeriodicError::Kind::no_convergence,
                          fmt::format("trajectory from {} could not be completed", c));
    }
    if (std::abs(*dc) <= opt.tol) return {{c}, std::abs(*dc), evals};
    if ((*dc > 0.0) == (da > 0.0)) {
      a = c;
      da = *dc;
    } else {
      b = c;
      db = *dc;
    }
  }
  const bool pick_a = std::abs(da) <= std::abs(db);
  const double z = pick_a ? a : b;
  const double r = std::abs(pick_a ? da : db);
  if (r <= opt.tol) return {{z}, r, evals};
  throw PeriodicError(PeriodicError::Kind::no_convergence,
                      fmt::format("bracket collapsed at {} with residual {} > {}", z, r, opt.tol));
}

inline Eigen::MatrixXd displacement_jacobian(const Displacement& d, std::span<const double> z,
                                             std::span<const double> dz, const Box& V) {
  const std::size_t n = z.size();
  Eigen::MatrixXd J(n, n);
  std::vector<double> zp(z.begin(), z.end());
  for (std::size_t j = 0; j < n; ++j) {
    double h = 1e-7 * std::max(1.0, std::abs(z[j]));
    if (z[j] + h > V.hi[j]) h = -h;
    zp[j] = z[j] + h;
    auto dp = d(zp);
    if (!dp) {
      throw PeriodicError(PeriodicError::Kind::no_convergence, "finite-difference probe left the domain");
    }
    for (std::size_t i = 0; i < n; ++i) J(static_cast<long>(i), static_cast<long>(j)) = ((*dp)[i] - dz[i]) / h;
    zp[j] = z[j];
  }
  return J;
}

// Broyden iteration with Armijo backtracking; iterates are clamped to V.
inline SolveResult solve_vector(const Displacement& d, const Box& V, std::vector<double> z, const PeriodicOptions& opt) {
  const std::size_t n = z.size();
  V.clamp(z);
  auto dz = d(z);
  if (!dz) throw PeriodicError(PeriodicError::Kind::no_convergence, "trajectory from the initial guess left the domain");
  double res = euclid(*dz);
  int iterations = 0;
  if (res <= opt.tol) return {z, res, iterations};

  int restarts = 0;
  Eigen::MatrixXd J = displacement_jacobian(d, z, *dz, V);
  while (iterations < opt.max_iterations) {
    ++iterations;
    Eigen::VectorXd rhs(n);
    for (std::size_t i = 0; i < n; ++i) rhs(static_cast<long>(i)) = -(*dz)[i];
    Eigen::VectorXd step = J.colPivHouseholderQr().solve(rhs);

    bool accepted = false;
    std::vector<double> z_new(n);
    std::optional<std::vector<double>> d_new;
    double lambda = 1.0;
    for (int ls = 0; ls < 12; ++ls, lambda *= 0.5) {
      for (std::size_t i = 0; i < n; ++i) z_new[i] = z[i] + lambda * step(static_cast<long>(i));
      V.clamp(z_new);
      d_new = d(z_new);
      if (d_new && euclid(*d_new) <= (1.0 - 1e-4 * lambda) * res) {
        accepted = true;
        break;
      }
    }
    if (!accepted) {
      if (++restarts > opt.max_restarts) break;
      J = displacement_jacobian(d, z, *dz, V);
      continue;
    }
    Eigen::VectorXd sx(n), sy(n);
    for (std::size_t i = 0; i < n; ++i) {
      sx(static_cast<long>(i)) = z_new[i] - z[i];
      sy(static_cast<long>(i)) = (*d_new)[i] - (*dz)[i];
    }
    const double ss = sx.squaredNorm();
    if (ss > 0.0) J += ((sy - J * sx) * sx.transpose()) / ss;
    z = z_new;
    dz = d_new;
    res = euclid(*dz);
    if (res <= opt.tol) return {z, res, iterations};
  }
  throw PeriodicError(PeriodicError::Kind::no_convergence,
                      fmt::format("quasi-Newton iteration stalled at ({}) with residual {}", fmt::join(z, ", "), res));
}

inline void check_eps(const CaratheodorySystem& sys, double eps) {
  if (eps == 0.0) {
    throw PeriodicError(PeriodicError::Kind::degenerate, "degenerate: all points fixed at eps = 0");
  }
  if (!(eps > 0.0 && eps <= sys.eps_max())) {
    throw PeriodicError(PeriodicError::Kind::invalid_input,
                        fmt::format("eps = {} outside (0, {}]", eps, sys.eps_max()));
  }
}

}  // namespace detail

/// Fixed point of the time-T map inside V, found from `guess`.
inline PeriodicOrbit find_periodic(const CaratheodorySystem& sys, const Box& V, double eps,
                                   std::span<const double> guess, const PeriodicOptions& opt = {},
                                   std::optional<std::vector<double>> z_star = std::nullopt) {
  detail::check_eps(sys, eps);
  if (V.dim() != sys.dim() || !V.non_degenerate() || !sys.domain().contains(V)) {
    throw PeriodicError(PeriodicError::Kind::invalid_input, "V must be a non-degenerate box inside the domain");
  }
  if (guess.size() != sys.dim() || !V.contains(guess)) {
    throw PeriodicError(PeriodicError::Kind::invalid_input, fmt::format("guess ({}) is not in V", fmt::join(guess, ", ")));
  }
  if (!(opt.tol > 0.0) || !(opt.integration_tol > 0.0)) {
    throw PeriodicError(PeriodicError::Kind::invalid_input, "tolerances must be positive");
  }

  const detail::Displacement d(sys, eps, opt.integration_tol);
  const detail::SolveResult s = sys.dim() == 1
                                    ? detail::solve_scalar(d, V, guess[0], opt)
                                    : detail::solve_vector(d, V, std::vector<double>(guess.begin(), guess.end()), opt);

  PeriodicOrbit orbit;
  orbit.eps = eps;
  orbit.fixed_point = s.z;
  orbit.residual = s.residual;
  orbit.iterations = s.iterations;

  IntegratorOptions verify;
  verify.tol = opt.integration_tol / 10.0;
  try {
    orbit.trajectory = integrate(sys, s.z, eps, verify);
  } catch (const IntegrationError& e) {
    throw PeriodicError(PeriodicError::Kind::no_convergence, fmt::format("verification integration failed: {}", e.what()));
  }
  std::vector<double> gap = orbit.trajectory.final_state();
  for (std::size_t i = 0; i < gap.size(); ++i) gap[i] -= s.z[i];
  orbit.verified_residual = detail::euclid(gap);
  if (!(orbit.verified_residual <= opt.tol)) {
    throw PeriodicError(PeriodicError::Kind::no_convergence,
                        fmt::format("fixed point ({}) fails re-verification: residual {} > {}", fmt::join(s.z, ", "),
                                    orbit.verified_residual, opt.tol));
  }
  orbit.inside_V = std::all_of(orbit.trajectory.x.begin(), orbit.trajectory.x.end(),
                               [&](const auto& x) { return V.contains_interior(x); });
  if (z_star) orbit.sup_dist = sup_distance(orbit.trajectory, *z_star);
  return orbit;
}

struct SweepEntry {
  double eps = 0.0;
  std::optional<PeriodicOrbit> orbit;
  std::string failure;
};

struct SweepReport {
  std::vector<double> eps_grid;
  std::vector<SweepEntry> entries;
  std::vector<double> sup_distances;  // NaN for failed entries
  bool monotone_tail = false;
  std::optional<double> fit_exponent;  // least-squares slope of log sup_dist against log eps

  [[nodiscard]] bool all_found() const {
    return std::all_of(entries.begin(), entries.end(), [](const auto& e) { return e.orbit.has_value(); });
  }
};

/// Continuation over a decreasing eps grid, each solve warm-started from the
/// previous fixed point (the first from `guess`, or z* when absent).
inline SweepReport sweep(const CaratheodorySystem& sys, const Box& V, std::span<const double> z_star,
                         std::span<const double> eps_grid, const PeriodicOptions& opt = {},
                         std::optional<std::vector<double>> guess = std::nullopt) {
  if (z_star.size() != sys.dim()) throw PeriodicError(PeriodicError::Kind::invalid_input, "z* has the wrong dimension");
  if (eps_grid.empty()) throw PeriodicError(PeriodicError::Kind::invalid_input, "eps grid is empty");
  for (std::size_t i = 0; i < eps_grid.size(); ++i) {
    if (!(eps_grid[i] > 0.0 && eps_grid[i] <= sys.eps_max())) {
      throw PeriodicError(PeriodicError::Kind::invalid_input,
                          fmt::format("eps_grid[{}] = {} outside (0, {}]", i, eps_grid[i], sys.eps_max()));
    }
    if (i > 0 && !(eps_grid[i] < eps_grid[i - 1])) {
      throw PeriodicError(PeriodicError::Kind::invalid_input,
                          fmt::format("eps_grid[{}] = {} is not below its predecessor", i, eps_grid[i]));
    }
  }

  SweepReport rep;
  rep.eps_grid.assign(eps_grid.begin(), eps_grid.end());
  const std::vector<double> zs(z_star.begin(), z_star.end());
  std::vector<double> seed = guess.value_or(zs);
  for (double eps : eps_grid) {
    SweepEntry e;
    e.eps = eps;
    try {
      e.orbit = find_periodic(sys, V, eps, seed, opt, zs);
      seed = e.orbit->fixed_point;
      rep.sup_distances.push_back(*e.orbit->sup_dist);
    } catch (const std::exception& ex) {
      e.failure = ex.what();
      rep.sup_distances.push_back(std::numeric_limits<double>::quiet_NaN());
    }
    rep.entries.push_back(std::move(e));
  }

  const std::size_t n = rep.sup_distances.size();
  rep.monotone_tail = true;
  for (std::size_t i = n / 2; i < n; ++i) {
    if (std::isnan(rep.sup_distances[i])) rep.monotone_tail = false;
    if (i > n / 2 && !(rep.sup_distances[i] <= rep.sup_distances[i - 1])) rep.monotone_tail = false;
  }

  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  int m = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double s = rep.sup_distances[i];
    if (!(s > 0.0)) continue;
    const double lx = std::log(eps_grid[i]), ly = std::log(s);
    sx += lx;
    sy += ly;
    sxx += lx * lx;
    sxy += lx * ly;
    ++m;
  }
  if (m >= 2 && m * sxx - sx * sx > 0.0) rep.fit_exponent = (m * sxy - sx * sy) / (m * sxx - sx * sx);
  return rep;
}

struct CertifyOptions {
  double eps = 0.05;
  std::vector<double> eps_grid;  // default: eps, eps/2, eps/4, eps/8
  QuadratureOptions quadrature;
  PeriodicOptions periodic;
  int scan_points = 201;         // per axis, for zero-set inspection of f1 over V
  double zero_tol = 1e-8;        // |f1| below this counts as a zero in the inspection scan
};

enum class ConvergenceStatus { verified, failed, skipped };

inline std::string_view to_string(ConvergenceStatus s) {
  switch (s) {
    case ConvergenceStatus::verified: return "verified";
    case ConvergenceStatus::failed: return "failed";
    case ConvergenceStatus::skipped: return "skipped";
  }
  return "?";
}

struct CertifyReport {
  std::string system;
  Box V;
  std::optional<std::vector<double>> z_star;
  double eps = 0.0;

  // degree stage
  double boundary_margin = 0.0;
  std::optional<DegreeResult> degree;
  std::optional<ExcisionCheck> excision;

  // existence stage
  std::optional<PeriodicOrbit> orbit;

  // convergence stage
  ConvergenceStatus convergence = ConvergenceStatus::skipped;
  std::string convergence_reason;
  std::optional<SweepReport> sweep;
  std::size_t zero_samples = 0;  // grid points over V with |f1| <= zero_tol

  std::optional<std::string> halted_stage;
  std::string message;

  [[nodiscard]] bool existence_only() const { return !halted_stage && convergence == ConvergenceStatus::skipped; }
};

namespace detail {

inline std::vector<std::vector<double>> box_grid(const Box& V, int per_axis) {
  const std::size_t n = V.dim();
  if (n == 2) per_axis = std::min(per_axis, 41);
  if (n > 2) per_axis = std::max(3, static_cast<int>(std::pow(4096.0, 1.0 / n)));
  std::vector<std::vector<double>> pts;
  std::vector<int> idx(n, 0);
  for (;;) {
    std::vector<double> p(n);
    for (std::size_t i = 0; i < n; ++i) p[i] = V.lo[i] + (V.hi[i] - V.lo[i]) * idx[i] / (per_axis - 1);
    pts.push_back(std::move(p));
    std::size_t k = 0;
    while (k < n && ++idx[k] == per_axis) idx[k++] = 0;
    if (k == n) break;
  }
  return pts;
}

}  // namespace detail

/// Hypotheses (f1 != 0 on the boundary of V, nonzero degree) followed by the
/// conclusions (a periodic orbit in V; convergence to z* when z* is an
/// isolated zero). Stops at the first failing stage.
inline CertifyReport certify(const CaratheodorySystem& sys, const Box& V, std::optional<std::vector<double>> z_star,
                             const CertifyOptions& opt = {}, unsigned threads = 1) {
  CertifyReport rep;
  rep.system = sys.name();
  rep.V = V;
  rep.z_star = z_star;
  rep.eps = opt.eps;
  auto halt = [&](const char* stage, std::string msg) {
    rep.halted_stage = stage;
    rep.message = std::move(msg);
    return rep;
  };

  if (V.dim() != sys.dim() || !V.non_degenerate() || !sys.domain().contains(V)) {
    return halt("averaged_field", "V must be a non-degenerate box inside the system domain");
  }
  if (z_star && (z_star->size() != sys.dim() || !V.contains_interior(*z_star))) {
    return halt("averaged_field", "z* must lie inside V");
  }
  const AveragedField field(sys, opt.quadrature);
  const VectorField F = [&field](std::span<const double> z) { return field(z); };

  try {
    rep.boundary_margin = boundary_margin(F, V);
  } catch (const std::exception& e) {
    return halt("averaged_field", e.what());
  }
  if (!(rep.boundary_margin > kBoundaryMarginThreshold)) {
    return halt("degree", fmt::format("f1 vanishes on the boundary of V (margin {})", rep.boundary_margin));
  }
  try {
    rep.degree = degree_auto(F, V, z_star);
  } catch (const DegreeError& e) {
    return halt("degree", e.what());
  }
  if (rep.degree->value == 0) return halt("degree", "degree of f1 over V is zero");

  std::vector<double> guess = z_star.value_or(V.center());
  try {
    rep.orbit = find_periodic(sys, V, opt.eps, guess, opt.periodic, z_star);
  } catch (const std::exception& e) {
    return halt("existence", e.what());
  }

  // Zero set of f1 over V.
  const auto grid = detail::box_grid(V, opt.scan_points);
  const auto values = field.average_on_grid(grid, threads);
  double min_sep = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < V.dim(); ++i) min_sep = std::min(min_sep, V.hi[i] - V.lo[i]);
  min_sep *= 0.05;
  bool isolated = true;
  for (std::size_t k = 0; k < grid.size(); ++k) {
    if (detail::euclid(values[k].value) <= opt.zero_tol) {
      ++rep.zero_samples;
      if (z_star) {
        std::vector<double> diff(grid[k]);
        for (std::size_t i = 0; i < diff.size(); ++i) diff[i] -= (*z_star)[i];
        if (detail::euclid(diff) > min_sep) isolated = false;
      }
    }
  }

  if (!z_star) {
    rep.convergence_reason = rep.zero_samples > 1
                                 ? fmt::format("f1 vanishes at {} scan points over V (no isolated zero); existence only",
                                               rep.zero_samples)
                                 : "no z* supplied; existence only";
    rep.message = "hypotheses hold; periodic orbit found";
    return rep;
  }
  if (!isolated) {
    rep.convergence_reason = "f1 vanishes away from z*; z* is not an isolated zero; existence only";
    rep.message = "hypotheses hold; periodic orbit found";
    return rep;
  }
  if (detail::euclid(field(*z_star)) > 1e-6) {
    rep.convergence = ConvergenceStatus::failed;
    rep.convergence_reason = "f1(z*) is not zero";
    return halt("convergence", rep.convergence_reason);
  }

  if (V.dim() <= 2) {
    double room = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < V.dim(); ++i) {
      room = std::min({room, (*z_star)[i] - V.lo[i], V.hi[i] - (*z_star)[i]});
    }
    const std::vector<double> radii{0.8 * room, 0.4 * room, 0.2 * room, 0.1 * room};
    try {
      rep.excision = excision_check(F, V, *z_star, radii);
    } catch (const DegreeError&) {
      // The ball degrees are diagnostic only.
    }
  }

  std::vector<double> grid_eps = opt.eps_grid;
  if (grid_eps.empty()) grid_eps = {opt.eps, opt.eps / 2, opt.eps / 4, opt.eps / 8};
  try {
    rep.sweep = sweep(sys, V, *z_star, grid_eps, opt.periodic, rep.orbit->fixed_point);
  } catch (const PeriodicError& e) {
    rep.convergence = ConvergenceStatus::failed;
    rep.convergence_reason = e.what();
    return halt("convergence", e.what());
  }
  const auto& sw = *rep.sweep;
  const bool contained = std::all_of(sw.entries.begin(), sw.entries.end(),
                                     [](const auto& e) { return e.orbit && e.orbit->inside_V; });
  if (sw.all_found() && contained && sw.monotone_tail) {
    rep.convergence = ConvergenceStatus::verified;
    rep.convergence_reason = fmt::format("sup |phi - z*| non-increasing along the eps grid; final {}",
                                         sw.sup_distances.back());
    rep.message = "hypotheses hold; periodic orbit found; convergence to z* verified";
  } else {
    rep.convergence = ConvergenceStatus::failed;
    rep.convergence_reason = "sweep did not show contained, non-increasing sup distances";
    return halt("convergence", rep.convergence_reason);
  }
  return rep;
}

}  // namespace cavg
