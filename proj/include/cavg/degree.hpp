#pragma once

// Brouwer degree d(F, V, 0) of a continuous field F over a box V, by
//   - the endpoint-sign rule in one dimension,
//   - the sign of det DF at a regular zero (central finite differences),
//   - the winding number of F along the boundary of a planar region.
// Every method refuses to answer when |F| on the sampled boundary drops below
// kBoundaryMarginThreshold.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <numbers>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>
#include <fmt/format.h>

#include "cavg/system.hpp"

namespace cavg {

using ScalarField = std::function<double(double)>;
using VectorField = std::function<std::vector<double>(std::span<const double>)>;

inline constexpr double kBoundaryMarginThreshold = 1e-9;

enum class DegreeMethod { interval_sign, regular_zero, winding_2d };

inline std::string_view to_string(DegreeMethod m) {
  switch (m) {
    case DegreeMethod::interval_sign: return "interval_sign";
    case DegreeMethod::regular_zero: return "regular_zero";
    case DegreeMethod::winding_2d: return "winding_2d";
  }
  return "?";
}

struct BoundarySample {
  std::vector<double> point;
  std::vector<double> value;
};

struct DegreeDiagnostics {
  std::vector<BoundarySample> boundary_samples;  // interval endpoints, or the refined winding contour
  std::vector<double> jacobian;                  // row-major, regular_zero only
  double step = 0.0;
  double determinant = 0.0;
  double winding_total = 0.0;                    // total angle / 2pi
  double winding_residual = 0.0;
};

struct DegreeResult {
  int value = 0;
  DegreeMethod method = DegreeMethod::interval_sign;
  double boundary_margin = 0.0;
  DegreeDiagnostics diagnostics;
};

class DegreeError : public std::runtime_error {
 public:
  enum class Kind { boundary_zero, inapplicable, invalid_input, non_integer };

  DegreeError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

  [[nodiscard]] Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

namespace detail {

inline double norm2(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

inline double max_abs(std::span<const double> v) {
  double m = 0.0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

inline int sign_int(double v) { return v > 0.0 ? 1 : (v < 0.0 ? -1 : 0); }

}  // namespace detail

/// Sample points on the boundary of a box: both endpoints in 1D, about
/// `boundary_grid` points spread over the perimeter in 2D, and a tensor grid
/// on each face in higher dimensions.
inline std::vector<std::vector<double>> box_boundary_points(const Box& V, int boundary_grid) {
  const std::size_t n = V.dim();
  std::vector<std::vector<double>> pts;
  if (n == 1) return {{V.lo[0]}, {V.hi[0]}};
  if (n == 2) {
    const double w = V.hi[0] - V.lo[0];
    const double h = V.hi[1] - V.lo[1];
    const double perimeter = 2.0 * (w + h);
    for (int k = 0; k < boundary_grid; ++k) {
      double s = perimeter * k / boundary_grid;
      if (s < w) {
        pts.push_back({V.lo[0] + s, V.lo[1]});
      } else if ((s -= w) < h) {
        pts.push_back({V.hi[0], V.lo[1] + s});
      } else if ((s -= h) < w) {
        pts.push_back({V.hi[0] - s, V.hi[1]});
      } else {
        s -= w;
        pts.push_back({V.lo[0], V.hi[1] - s});
      }
    }
    return pts;
  }
  const double per_face = std::max(1.0, static_cast<double>(boundary_grid) / (2.0 * n));
  const int m = std::max(2, static_cast<int>(std::ceil(std::pow(per_face, 1.0 / (n - 1)))));
  for (std::size_t face = 0; face < n; ++face) {
    for (double fixed : {V.lo[face], V.hi[face]}) {
      std::vector<int> idx(n - 1, 0);
      for (;;) {
        std::vector<double> p(n);
        std::size_t j = 0;
        for (std::size_t i = 0; i < n; ++i) {
          if (i == face) {
            p[i] = fixed;
          } else {
            p[i] = V.lo[i] + (V.hi[i] - V.lo[i]) * idx[j++] / (m - 1);
          }
        }
        pts.push_back(std::move(p));
        std::size_t k = 0;
        while (k < idx.size() && ++idx[k] == m) idx[k++] = 0;
        if (k == idx.size()) break;
      }
    }
  }
  return pts;
}

/// min |F| over the sampled boundary of V.
inline double boundary_margin(const VectorField& F, const Box& V, int boundary_grid = 256) {
  double margin = std::numeric_limits<double>::infinity();
  for (const auto& p : box_boundary_points(V, boundary_grid)) margin = std::min(margin, detail::norm2(F(p)));
  return margin;
}

/// Endpoint-sign rule: for continuous f on [a, b] with f(a) f(b) < 0 the degree
/// over (a, b) is sign(f(b) - f(a)).
inline DegreeResult degree_interval(const ScalarField& f, double a, double b) {
  if (!(a < b)) throw DegreeError(DegreeError::Kind::invalid_input, fmt::format("need a < b, got [{}, {}]", a, b));
  const double fa = f(a);
  const double fb = f(b);
  DegreeResult r;
  r.method = DegreeMethod::interval_sign;
  r.boundary_margin = std::min(std::abs(fa), std::abs(fb));
  r.diagnostics.boundary_samples = {{{a}, {fa}}, {{b}, {fb}}};
  if (!(r.boundary_margin > kBoundaryMarginThreshold)) {
    throw DegreeError(DegreeError::Kind::boundary_zero,
                      fmt::format("field vanishes on the boundary: f({})={}, f({})={}", a, fa, b, fb));
  }
  if (!(fa * fb < 0.0)) {
    throw DegreeError(DegreeError::Kind::inapplicable,
                      fmt::format("endpoint rule needs f(a) f(b) < 0, got f({})={}, f({})={}", a, fa, b, fb));
  }
  r.value = detail::sign_int(fb - fa);
  return r;
}

struct RegularZeroOptions {
  double zero_tol = 1e-6;         // |F(z*)|_inf must not exceed this
  double det_threshold = 1e-8;    // |det DF(z*)| must exceed this
  double consistency_tol = 1e-3;  // relative gap allowed between Jacobians at h and 4h
  int boundary_grid = 256;
};

/// Central-difference Jacobian of F at z with step h.
inline Eigen::MatrixXd fd_jacobian(const VectorField& F, std::span<const double> z, double h) {
  const std::size_t n = z.size();
  Eigen::MatrixXd J(n, n);
  std::vector<double> zp(z.begin(), z.end()), zm(z.begin(), z.end());
  for (std::size_t j = 0; j < n; ++j) {
    zp[j] = z[j] + h;
    zm[j] = z[j] - h;
    const auto fp = F(zp);
    const auto fm = F(zm);
    for (std::size_t i = 0; i < n; ++i) J(static_cast<long>(i), static_cast<long>(j)) = (fp[i] - fm[i]) / (2.0 * h);
    zp[j] = z[j];
    zm[j] = z[j];
  }
  return J;
}

/// Local degree sign(det DF(z*)) at a zero z* in V. Refuses ("inapplicable")
/// when F is not differentiable at z* (the Jacobian changes between steps h
/// and 4h) or when the zero is singular.
inline DegreeResult degree_regular_zero(const VectorField& F, std::span<const double> z_star, const Box& V,
                                        const RegularZeroOptions& opt = {}) {
  const std::size_t n = z_star.size();
  if (n == 0 || V.dim() != n) throw DegreeError(DegreeError::Kind::invalid_input, "dimension mismatch between z* and V");
  if (!V.contains_interior(z_star)) {
    throw DegreeError(DegreeError::Kind::invalid_input, "z* must lie inside V");
  }
  DegreeResult r;
  r.method = DegreeMethod::regular_zero;
  r.boundary_margin = boundary_margin(F, V, opt.boundary_grid);
  if (!(r.boundary_margin > kBoundaryMarginThreshold)) {
    throw DegreeError(DegreeError::Kind::boundary_zero,
                      fmt::format("field vanishes on the boundary (margin {})", r.boundary_margin));
  }
  const auto f0 = F(z_star);
  if (detail::max_abs(f0) > opt.zero_tol) {
    throw DegreeError(DegreeError::Kind::invalid_input,
                      fmt::format("z* is not a zero: |F(z*)| = {}", detail::max_abs(f0)));
  }

  double zmax = 0.0;
  for (double v : z_star) zmax = std::max(zmax, std::abs(v));
  const double step = std::max(1e-6, 1e-6 * zmax);
  const Eigen::MatrixXd J = fd_jacobian(F, z_star, step);
  const Eigen::MatrixXd J4 = fd_jacobian(F, z_star, 4.0 * step);

  r.diagnostics.step = step;
  {
    Eigen::MatrixXd Jt = J.transpose();
    r.diagnostics.jacobian.assign(Jt.data(), Jt.data() + Jt.size());
  }
  r.diagnostics.determinant = J.determinant();

  const double gap = (J - J4).norm();
  if (!(gap <= opt.consistency_tol * std::max(1.0, J.norm()))) {
    throw DegreeError(DegreeError::Kind::inapplicable,
                      fmt::format("non-differentiable zero, method inapplicable (Jacobian at h and 4h "
                                  "differ by {} relative to norm {})",
                                  gap, J.norm()));
  }
  if (!(std::abs(r.diagnostics.determinant) > opt.det_threshold)) {
    throw DegreeError(DegreeError::Kind::inapplicable,
                      fmt::format("non-regular zero, method inapplicable (|det| = {})",
                                  std::abs(r.diagnostics.determinant)));
  }
  r.value = detail::sign_int(r.diagnostics.determinant);
  return r;
}

/// Closed planar curve parametrised on [0, 1).
using PlanarCurve = std::function<std::array<double, 2>(double)>;

inline PlanarCurve box_contour(const Box& V) {
  return [V](double s) -> std::array<double, 2> {
    const double w = V.hi[0] - V.lo[0];
    const double h = V.hi[1] - V.lo[1];
    double d = s * 2.0 * (w + h);
    if (d < w) return {V.lo[0] + d, V.lo[1]};
    if ((d -= w) < h) return {V.hi[0], V.lo[1] + d};
    if ((d -= h) < w) return {V.hi[0] - d, V.hi[1]};
    d -= w;
    return {V.lo[0], V.hi[1] - d};
  };
}

inline PlanarCurve circle_contour(std::array<double, 2> center, double radius) {
  return [center, radius](double s) -> std::array<double, 2> {
    const double a = 2.0 * std::numbers::pi * s;
    return {center[0] + radius * std::cos(a), center[1] + radius * std::sin(a)};
  };
}

/// Winding number of F along a counter-clockwise contour. Consecutive samples
/// are refined by bisection until each angular increment is below pi/2.
inline DegreeResult degree_winding_contour(const VectorField& F, const PlanarCurve& curve, int samples = 256,
                                           int max_depth = 40) {
  if (samples < 4) throw DegreeError(DegreeError::Kind::invalid_input, "need at least 4 boundary samples");
  DegreeResult r;
  r.method = DegreeMethod::winding_2d;
  r.boundary_margin = std::numeric_limits<double>::infinity();
  bool unresolved = false;

  auto eval = [&](double s) {
    const auto p = curve(s);
    BoundarySample b{{p[0], p[1]}, F(std::span<const double>(p.data(), 2))};
    const double mag = detail::norm2(b.value);
    r.boundary_margin = std::min(r.boundary_margin, mag);
    if (!(mag > kBoundaryMarginThreshold)) {
      throw DegreeError(DegreeError::Kind::boundary_zero,
                        fmt::format("field vanishes on the boundary near ({}, {}) (|F| = {})", p[0], p[1], mag));
    }
    return b;
  };
  auto angle = [](const BoundarySample& a, const BoundarySample& b) {
    const double cross = a.value[0] * b.value[1] - a.value[1] * b.value[0];
    const double dot = a.value[0] * b.value[0] + a.value[1] * b.value[1];
    return std::atan2(cross, dot);
  };

  double total = 0.0;
  auto& contour = r.diagnostics.boundary_samples;
  std::function<void(double, const BoundarySample&, double, const BoundarySample&, int)> walk =
      [&](double sa, const BoundarySample& a, double sb, const BoundarySample& b, int depth) {
        const double d = angle(a, b);
        if (std::abs(d) < std::numbers::pi / 2.0) {
          total += d;
          contour.push_back(b);
          return;
        }
        if (depth >= max_depth) {
          unresolved = true;
          total += d;
          contour.push_back(b);
          return;
        }
        const double sm = 0.5 * (sa + sb);
        const auto m = eval(sm);
        walk(sa, a, sm, m, depth + 1);
        walk(sm, m, sb, b, depth + 1);
      };

  const auto first = eval(0.0);
  contour.push_back(first);
  auto prev = first;
  for (int k = 1; k <= samples; ++k) {
    const double s = static_cast<double>(k) / samples;
    const auto cur = k == samples ? first : eval(s);
    walk(static_cast<double>(k - 1) / samples, prev, s, cur, 0);
    prev = cur;
  }

  const double turns = total / (2.0 * std::numbers::pi);
  r.value = static_cast<int>(std::lround(turns));
  r.diagnostics.winding_total = turns;
  r.diagnostics.winding_residual = std::abs(turns - r.value);
  if (unresolved || r.diagnostics.winding_residual >= 0.1) {
    throw DegreeError(DegreeError::Kind::non_integer,
                      fmt::format("winding total {} is not resolved to an integer", turns));
  }
  return r;
}

inline DegreeResult degree_winding(const VectorField& F, const Box& V, int samples = 256) {
  if (V.dim() != 2 || !V.non_degenerate()) {
    throw DegreeError(DegreeError::Kind::invalid_input, "winding degree needs a non-degenerate planar box");
  }
  return degree_winding_contour(F, box_contour(V), samples);
}

/// Degree over V by the best available method: endpoint rule in 1D, winding in
/// 2D, regular zero (requires z*) otherwise.
inline DegreeResult degree_auto(const VectorField& F, const Box& V,
                                std::optional<std::vector<double>> z_star = std::nullopt) {
  if (V.dim() == 1) {
    return degree_interval([&](double x) { return F(std::span<const double>(&x, 1))[0]; }, V.lo[0], V.hi[0]);
  }
  if (V.dim() == 2) return degree_winding(F, V);
  if (!z_star) {
    throw DegreeError(DegreeError::Kind::inapplicable,
                      "in dimension >= 3 the degree is only available at a supplied regular zero");
  }
  return degree_regular_zero(F, *z_star, V);
}

struct HomotopyCheck {
  bool passed = false;
  double min_margin = std::numeric_limits<double>::infinity();
  double sigma_at_min = 0.0;
  std::vector<double> point_at_min;
  int sigma_grid = 0;
  int boundary_grid = 0;
};

/// Samples the straight-line homotopy (1 - sigma) f + sigma g on the boundary
/// of V. Passes iff the minimum norm exceeds kBoundaryMarginThreshold; both
/// grids are doubled once when the minimum is within 1000x of the threshold.
inline HomotopyCheck homotopy_nonvanishing(const VectorField& f, const VectorField& g, const Box& V,
                                           int sigma_grid = 101, int boundary_grid = 256) {
  if (sigma_grid < 2 || boundary_grid < 1) {
    throw DegreeError(DegreeError::Kind::invalid_input, "homotopy grids are too small");
  }
  auto run = [&](int ns, int nb) {
    HomotopyCheck c;
    c.sigma_grid = ns;
    c.boundary_grid = nb;
    for (const auto& p : box_boundary_points(V, nb)) {
      const auto fv = f(p);
      const auto gv = g(p);
      for (int k = 0; k < ns; ++k) {
        const double sigma = static_cast<double>(k) / (ns - 1);
        double s2 = 0.0;
        for (std::size_t i = 0; i < fv.size(); ++i) {
          const double v = (1.0 - sigma) * fv[i] + sigma * gv[i];
          s2 += v * v;
        }
        const double m = std::sqrt(s2);
        if (m < c.min_margin) {
          c.min_margin = m;
          c.sigma_at_min = sigma;
          c.point_at_min = p;
        }
      }
    }
    c.passed = c.min_margin > kBoundaryMarginThreshold;
    return c;
  };
  auto check = run(sigma_grid, boundary_grid);
  if (check.min_margin < 1e3 * kBoundaryMarginThreshold) {
    auto finer = run(2 * sigma_grid - 1, 2 * boundary_grid);
    if (finer.min_margin < check.min_margin) check = finer;
  }
  return check;
}

struct ExcisionCheck {
  bool passed = false;
  int reference_degree = 0;
  std::vector<double> radii;
  std::vector<int> ball_degrees;
};

/// Degree over each ball B(z*, mu) compared with the degree over V. Balls are
/// intervals in 1D and discs (winding) in 2D.
inline ExcisionCheck excision_check(const VectorField& F, const Box& V, std::span<const double> z_star,
                                    std::span<const double> mu_list) {
  const std::size_t n = V.dim();
  if (z_star.size() != n) throw DegreeError(DegreeError::Kind::invalid_input, "dimension mismatch between z* and V");
  if (n > 2) throw DegreeError(DegreeError::Kind::invalid_input, "excision check supports dimensions 1 and 2");
  for (double mu : mu_list) {
    if (!(mu > 0.0)) throw DegreeError(DegreeError::Kind::invalid_input, "radii must be positive");
    for (std::size_t i = 0; i < n; ++i) {
      if (z_star[i] - mu < V.lo[i] || z_star[i] + mu > V.hi[i]) {
        throw DegreeError(DegreeError::Kind::invalid_input,
                          fmt::format("ball of radius {} around z* escapes V", mu));
      }
    }
  }
  ExcisionCheck c;
  c.reference_degree = degree_auto(F, V).value;
  c.passed = true;
  for (double mu : mu_list) {
    int d = 0;
    if (n == 1) {
      const Box ball = Box::interval(z_star[0] - mu, z_star[0] + mu);
      d = degree_auto(F, ball).value;
    } else {
      d = degree_winding_contour(F, circle_contour({z_star[0], z_star[1]}, mu)).value;
    }
    c.radii.push_back(mu);
    c.ball_degrees.push_back(d);
    if (d != c.reference_degree) c.passed = false;
  }
  return c;
}

}  // namespace cavg
