#pragma once

// Carathéodory systems in standard form  x' = eps * f(t, x, eps),  f T-periodic
// in t, plus the polar reduction of the perturbed oscillator
//   x'' = -x + eps * g(x, x', eps)
// to the scalar standard form  dr/dtheta = eps * f(theta, r, eps).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include <fmt/format.h>
#include <fmt/ranges.h>

#include "cavg/expr.hpp"

namespace cavg {

class SystemError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Axis-aligned box [lo, hi] in R^n.
struct Box {
  std::vector<double> lo;
  std::vector<double> hi;

  static Box interval(double a, double b) { return Box{{a}, {b}}; }

  [[nodiscard]] std::size_t dim() const noexcept { return lo.size(); }

  [[nodiscard]] bool non_degenerate() const {
    if (lo.empty() || lo.size() != hi.size()) return false;
    for (std::size_t i = 0; i < lo.size(); ++i) {
      if (!(std::isfinite(lo[i]) && std::isfinite(hi[i]) && lo[i] < hi[i])) return false;
    }
    return true;
  }

  /// Closed-box membership.
  [[nodiscard]] bool contains(std::span<const double> x) const {
    if (x.size() != lo.size()) return false;
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (!(x[i] >= lo[i] && x[i] <= hi[i])) return false;
    }
    return true;
  }

  /// Open-box membership.
  [[nodiscard]] bool contains_interior(std::span<const double> x) const {
    if (x.size() != lo.size()) return false;
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (!(x[i] > lo[i] && x[i] < hi[i])) return false;
    }
    return true;
  }

  [[nodiscard]] bool contains(const Box& other) const {
    return other.dim() == dim() && contains(other.lo) && contains(other.hi);
  }

  [[nodiscard]] std::vector<double> center() const {
    std::vector<double> c(lo.size());
    for (std::size_t i = 0; i < c.size(); ++i) c[i] = 0.5 * (lo[i] + hi[i]);
    return c;
  }

  void clamp(std::span<double> x) const {
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = std::clamp(x[i], lo[i], hi[i]);
  }

  [[nodiscard]] std::string to_string() const {
    std::string s;
    for (std::size_t i = 0; i < lo.size(); ++i) {
      s += fmt::format("{}[{:.17g}, {:.17g}]", i ? " x " : "", lo[i], hi[i]);
    }
    return s;
  }
};

/// out = f(t, x, eps). Must be safe to call concurrently.
using RhsFunction =
    std::function<void(double t, std::span<const double> x, double eps, std::span<double> out)>;

/// Scalar switching function s(x); its zero set is a declared discontinuity surface.
using SwitchFunction = std::function<double(std::span<const double> x)>;

class CaratheodorySystem {
 public:
  struct Parts {
    std::string name;
    std::size_t dim = 1;
    double period = 2.0 * std::numbers::pi;
    double eps_max = 0.1;
    Box domain;
    RhsFunction rhs;
    std::vector<double> t_breaks;
    std::vector<SwitchFunction> x_switch;
    /// Number of random finiteness probes run at construction (0 disables).
    int sample_checks = 1000;
  };

  explicit CaratheodorySystem(Parts parts) : p_(std::move(parts)) { validate(); }

  [[nodiscard]] const std::string& name() const noexcept { return p_.name; }
  [[nodiscard]] std::size_t dim() const noexcept { return p_.dim; }
  [[nodiscard]] double period() const noexcept { return p_.period; }
  [[nodiscard]] double eps_max() const noexcept { return p_.eps_max; }
  [[nodiscard]] const Box& domain() const noexcept { return p_.domain; }
  [[nodiscard]] const std::vector<double>& t_breaks() const noexcept { return p_.t_breaks; }
  [[nodiscard]] const std::vector<SwitchFunction>& x_switch() const noexcept { return p_.x_switch; }

  /// Reduces t into [0, T).
  [[nodiscard]] double reduce_time(double t) const {
    double r = std::fmod(t, p_.period);
    if (r < 0.0) r += p_.period;
    if (r >= p_.period) r = 0.0;
    return r;
  }

  /// Unchecked evaluation of f; t is reduced modulo T. Used on hot paths.
  void eval_raw(double t, std::span<const double> x, double eps, std::span<double> out) const {
    p_.rhs(reduce_time(t), x, eps, out);
  }

  /// Checked evaluation of f (without the eps factor).
  [[nodiscard]] std::vector<double> eval_rhs(double t, std::span<const double> x, double eps) const {
    if (x.size() != p_.dim) {
      throw SystemError(fmt::format("state has dimension {}, system has {}", x.size(), p_.dim));
    }
    if (!p_.domain.contains(x)) {
      throw SystemError(fmt::format("state ({}) outside domain {}", fmt::join(x, ", "),
                                    p_.domain.to_string()));
    }
    if (!(eps >= 0.0 && eps <= p_.eps_max)) {
      throw SystemError(fmt::format("eps = {} outside [0, {}]", eps, p_.eps_max));
    }
    std::vector<double> out(p_.dim);
    eval_raw(t, x, eps, out);
    return out;
  }

 private:
  void validate() {
    if (p_.dim == 0) throw SystemError("dimension must be positive");
    if (!(p_.period > 0.0) || !std::isfinite(p_.period)) throw SystemError("period must be positive");
    if (!(p_.eps_max > 0.0) || !std::isfinite(p_.eps_max)) throw SystemError("eps_max must be positive");
    if (p_.domain.dim() != p_.dim || !p_.domain.non_degenerate()) {
      throw SystemError("domain must be a non-degenerate box of the system dimension");
    }
    if (!p_.rhs) throw SystemError("right-hand side is empty");
    for (std::size_t i = 0; i < p_.t_breaks.size(); ++i) {
      const double b = p_.t_breaks[i];
      if (!(b >= 0.0 && b < p_.period)) {
        throw SystemError(fmt::format("t_break {} outside [0, {})", b, p_.period));
      }
      if (i > 0 && !(b > p_.t_breaks[i - 1])) throw SystemError("t_breaks must be strictly increasing");
    }
    if (p_.sample_checks > 0) probe_finiteness();
  }

  // Random probe of f over [0,T] x domain x [0, eps_max]; a proxy for local
  // integrable boundedness.
  void probe_finiteness() const {
    std::mt19937_64 rng(0x5eed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::vector<double> x(p_.dim), out(p_.dim);
    for (int k = 0; k < p_.sample_checks; ++k) {
      const double t = unit(rng) * p_.period;
      for (std::size_t i = 0; i < p_.dim; ++i) {
        x[i] = p_.domain.lo[i] + unit(rng) * (p_.domain.hi[i] - p_.domain.lo[i]);
      }
      const double eps = unit(rng) * p_.eps_max;
      try {
        p_.rhs(t, x, eps, out);
      } catch (const EvalError& e) {
        throw SystemError(fmt::format("right-hand side fails at t={}, x=({}), eps={}: {}", t,
                                      fmt::join(x, ", "), eps, e.what()));
      }
      for (double v : out) {
        if (!std::isfinite(v)) {
          throw SystemError(fmt::format("right-hand side is not finite at t={}, x=({}), eps={}", t,
                                        fmt::join(x, ", "), eps));
        }
      }
    }
  }

  Parts p_;
};

/// First-order system given by expression sources over (t, x1..xn, eps);
/// for n == 1 the state may also be written `x`.
struct FirstOrderDefinition {
  std::string name;
  std::vector<std::string> rhs;
  double period = 2.0 * std::numbers::pi;
  double eps_max = 0.1;
  Box domain;
  std::vector<double> t_breaks;
  std::vector<std::string> x_switch;
};

/// x'' = -x + eps g(x, x', eps) on the annulus r0 <= |(x, x')| <= r1.
/// `g` is over variables (x, y, eps) with y = x'. `g_polar`, when set, is the
/// same function already written in polar form over (theta, r, eps); it is used
/// in place of composing g with (r cos theta, r sin theta), which loses the
/// exact value of x^2 + y^2.
struct SecondOrderSystem {
  std::string name;
  std::string g;
  std::optional<std::string> g_polar;
  double r0 = 0.5;
  double r1 = 1.5;
  double eps_max = 0.1;
};

using SystemDefinition = std::variant<FirstOrderDefinition, SecondOrderSystem>;

inline std::vector<std::string> first_order_variables(std::size_t dim) {
  std::vector<std::string> vars{"t"};
  for (std::size_t i = 1; i <= dim; ++i) vars.push_back(fmt::format("x{}", i));
  vars.push_back("eps");
  if (dim == 1) vars.push_back("x");
  return vars;
}

inline CaratheodorySystem build_first_order(const FirstOrderDefinition& def) {
  const std::size_t n = def.rhs.size();
  if (n == 0) throw SystemError("rhs must have at least one component");
  if (def.domain.dim() != n) {
    throw SystemError(fmt::format("rhs has {} components but domain has dimension {}", n,
                                  def.domain.dim()));
  }
  const auto vars = first_order_variables(n);
  std::vector<Expression> rhs;
  for (const auto& src : def.rhs) rhs.push_back(Expression::parse(src, vars));
  std::vector<Expression> sw;
  std::vector<std::string> state_vars(vars.begin() + 1, vars.begin() + 1 + static_cast<long>(n));
  if (n == 1) state_vars.push_back("x");
  for (const auto& src : def.x_switch) sw.push_back(Expression::parse(src, state_vars));

  CaratheodorySystem::Parts parts;
  parts.name = def.name;
  parts.dim = n;
  parts.period = def.period;
  parts.eps_max = def.eps_max;
  parts.domain = def.domain;
  parts.t_breaks = def.t_breaks;
  parts.rhs = [rhs, n](double t, std::span<const double> x, double eps, std::span<double> out) {
    double buf[16];
    std::vector<double> heap;
    std::span<double> values;
    if (n + 3 <= 16) {
      values = std::span<double>(buf, n + 3);
    } else {
      heap.resize(n + 3);
      values = heap;
    }
    values[0] = t;
    for (std::size_t i = 0; i < n; ++i) values[i + 1] = x[i];
    values[n + 1] = eps;
    if (n == 1) values[3] = x[0];
    for (std::size_t i = 0; i < n; ++i) out[i] = rhs[i].evaluate(values.subspan(0, rhs[i].variables().size()));
  };
  for (auto& s : sw) {
    parts.x_switch.push_back([s, n](std::span<const double> x) {
      if (n == 1) return s.evaluate({x[0], x[0]});
      return s.evaluate(x);
    });
  }
  return CaratheodorySystem(std::move(parts));
}

namespace detail {

inline double snap_angle(double theta) {
  // Zeros of trigonometric sign factors sit at multiples of pi/4 in every
  // builtin; snap near-hits so the declared break is the representable one.
  constexpr double quarter = std::numbers::pi / 4.0;
  const double k = std::round(theta / quarter);
  if (std::abs(theta - k * quarter) < 1e-10) return std::fmod(k * quarter, 2.0 * std::numbers::pi);
  return theta;
}

}  // namespace detail

/// theta-locations in [0, 2pi) where a sign(...) factor of g changes sign
/// independently of r. Each sign argument is sampled on a periodic theta grid
/// at several radii; a zero is kept only if it appears at every radius where
/// the argument is not identically zero in theta.
inline std::vector<double> derive_theta_breaks(const Expression& g, double r0, double r1,
                                               int theta_samples = 720) {
  constexpr double two_pi = 2.0 * std::numbers::pi;
  const double radius_fracs[] = {0.137, 0.311, 0.523, 0.761, 0.929};
  std::vector<double> result;

  for (const auto& arg : g.sign_arguments()) {
    auto s = [&](double theta, double r) {
      return arg.evaluate({r * std::cos(theta), r * std::sin(theta), 0.0});
    };
    std::optional<std::vector<double>> common;
    for (double frac : radius_fracs) {
      const double r = r0 + frac * (r1 - r0);
      std::vector<double> zeros;
      bool all_zero = true;
      for (int k = 0; k < theta_samples; ++k) {
        const double ta = two_pi * k / theta_samples;
        const double tb = two_pi * (k + 1) / theta_samples;
        const double sa = s(ta, r);
        const double sb = s(tb, r);
        if (sa != 0.0) all_zero = false;
        if (sa == 0.0) {
          zeros.push_back(ta);
        } else if (sa * sb < 0.0) {
          double lo = ta, hi = tb, slo = sa;
          for (int it = 0; it < 200 && hi - lo > 1e-15; ++it) {
            const double mid = 0.5 * (lo + hi);
            const double sm = s(mid, r);
            if (sm == 0.0) {
              lo = hi = mid;
              break;
            }
            if ((sm > 0.0) == (slo > 0.0)) {
              lo = mid;
              slo = sm;
            } else {
              hi = mid;
            }
          }
          zeros.push_back(0.5 * (lo + hi));
        }
      }
      if (all_zero) continue;
      for (double& z : zeros) z = detail::snap_angle(z);
      if (!common) {
        common = zeros;
      } else {
        std::vector<double> kept;
        for (double c : *common) {
          for (double z : zeros) {
            double d = std::abs(c - z);
            d = std::min(d, two_pi - d);
            if (d < 1e-8) {
              kept.push_back(c);
              break;
            }
          }
        }
        common = std::move(kept);
      }
    }
    if (common) result.insert(result.end(), common->begin(), common->end());
  }

  for (double& b : result) {
    if (b >= two_pi || b < 0.0) b = 0.0;
  }
  std::sort(result.begin(), result.end());
  std::vector<double> unique;
  for (double b : result) {
    if (unique.empty() || b - unique.back() > 1e-8) unique.push_back(b);
  }
  if (unique.size() > 1 && two_pi - unique.back() + unique.front() < 1e-8) unique.pop_back();
  return unique;
}

/// Radii in (r0, r1) where a sign(...) or cbrt(...) argument of g vanishes for
/// every sampled theta. These circles are where the reduced field jumps or
/// loses its Lipschitz bound, so they are declared as switching surfaces.
inline std::vector<double> derive_radial_switches(const Expression& g, double r0, double r1,
                                                  int r_samples = 400) {
  const double thetas[] = {0.3141, 1.1093, 2.2871, 3.9017, 5.5123};
  std::vector<double> result;
  auto args = g.call_arguments(Function::sign);
  auto roots = g.call_arguments(Function::cbrt);
  args.insert(args.end(), roots.begin(), roots.end());

  for (const auto& arg : args) {
    std::optional<std::vector<double>> common;
    for (double theta : thetas) {
      auto s = [&](double r) { return arg.evaluate({r * std::cos(theta), r * std::sin(theta), 0.0}); };
      std::vector<double> zeros;
      for (int k = 0; k < r_samples; ++k) {
        const double ra = r0 + (r1 - r0) * k / r_samples;
        const double rb = r0 + (r1 - r0) * (k + 1) / r_samples;
        const double sa = s(ra);
        const double sb = s(rb);
        if (sa == 0.0 && k > 0) {
          zeros.push_back(ra);
        } else if (sa * sb < 0.0) {
          double lo = ra, hi = rb, slo = sa;
          for (int it = 0; it < 200 && hi - lo > 1e-15; ++it) {
            const double mid = 0.5 * (lo + hi);
            const double sm = s(mid);
            if (sm == 0.0) {
              lo = hi = mid;
              break;
            }
            if ((sm > 0.0) == (slo > 0.0)) {
              lo = mid;
              slo = sm;
            } else {
              hi = mid;
            }
          }
          zeros.push_back(0.5 * (lo + hi));
        }
      }
      if (!common) {
        common = zeros;
        continue;
      }
      std::vector<double> kept;
      for (double c : *common) {
        for (double z : zeros) {
          if (std::abs(c - z) < 1e-8) {
            kept.push_back(c);
            break;
          }
        }
      }
      common = std::move(kept);
    }
    if (common) result.insert(result.end(), common->begin(), common->end());
  }
  for (double& r : result) {
    const double rounded = std::round(r * 1e6) / 1e6;
    if (std::abs(r - rounded) < 1e-10) r = rounded;
  }
  std::sort(result.begin(), result.end());
  std::vector<double> unique;
  for (double r : result) {
    if (unique.empty() || r - unique.back() > 1e-8) unique.push_back(r);
  }
  return unique;
}

/// Reduction of the perturbed oscillator to  dr/dtheta = eps f(theta, r, eps)  with
///   f = -r g~ sin(theta) / (r - eps g~ cos(theta)),  g~(theta, r, eps) = g(r cos, r sin, eps).
/// eps_max is shrunk so that the denominator stays >= r/2 (hence >= r0/2) at
/// sampled points of [0, 2pi) x [r0, r1] x [0, eps_max].
inline CaratheodorySystem polar_reduce(const SecondOrderSystem& s) {
  if (!(s.r0 > 0.0 && s.r1 > s.r0)) throw SystemError("annulus requires r1 > r0 > 0");
  if (!(s.eps_max > 0.0)) throw SystemError("eps_max must be positive");
  const Expression g = Expression::parse(s.g, {"x", "y", "eps"});
  std::optional<Expression> gp;
  if (s.g_polar) gp = Expression::parse(*s.g_polar, {"theta", "r", "eps"});

  auto g_tilde = [g, gp](double theta, double r, double eps) {
    if (gp) return gp->evaluate({theta, r, eps});
    return g.evaluate({r * std::cos(theta), r * std::sin(theta), eps});
  };

  constexpr double two_pi = 2.0 * std::numbers::pi;
  double eps_max = s.eps_max;
  {
    constexpr int n_theta = 360;
    constexpr int n_r = 101;
    double bound = std::numeric_limits<double>::infinity();
    for (double eps : {0.0, 0.5 * s.eps_max, s.eps_max}) {
      for (int i = 0; i < n_r; ++i) {
        const double r = s.r0 + (s.r1 - s.r0) * i / (n_r - 1);
        for (int k = 0; k < n_theta; ++k) {
          const double theta = two_pi * (k + 0.5) / n_theta;
          double gt;
          try {
            gt = g_tilde(theta, r, eps);
          } catch (const EvalError& e) {
            throw SystemError(fmt::format("g fails at theta={}, r={}: {}", theta, r, e.what()));
          }
          if (!std::isfinite(gt)) {
            throw SystemError("no positive eps_max keeps the denominator away from zero: g is unbounded");
          }
          if (gt != 0.0) bound = std::min(bound, r / (2.0 * std::abs(gt)));
        }
      }
    }
    if (!(bound > 0.0)) throw SystemError("no positive eps_max keeps the denominator away from zero");
    eps_max = std::min(eps_max, bound);
  }

  CaratheodorySystem::Parts parts;
  parts.name = s.name;
  parts.dim = 1;
  parts.period = two_pi;
  parts.eps_max = eps_max;
  parts.domain = Box::interval(s.r0, s.r1);
  parts.t_breaks = derive_theta_breaks(g, s.r0, s.r1);
  for (double rc : derive_radial_switches(g, s.r0, s.r1)) {
    parts.x_switch.push_back([rc](std::span<const double> x) { return x[0] - rc; });
  }
  parts.rhs = [g_tilde](double theta, std::span<const double> x, double eps, std::span<double> out) {
    const double r = x[0];
    const double gt = g_tilde(theta, r, eps);
    out[0] = -r * gt * std::sin(theta) / (r - eps * gt * std::cos(theta));
  };
  return CaratheodorySystem(std::move(parts));
}

inline CaratheodorySystem build(const SystemDefinition& def) {
  return std::visit(
      [](const auto& d) -> CaratheodorySystem {
        if constexpr (std::is_same_v<std::decay_t<decltype(d)>, FirstOrderDefinition>) {
          return build_first_order(d);
        } else {
          return polar_reduce(d);
        }
      },
      def);
}

inline const std::vector<std::string>& builtin_names() {
  static const std::vector<std::string> names{"example1", "example2", "zero", "linear_test"};
  return names;
}

/// Builtin systems:
///   example1     g = sign(y (x^2+y^2-1)) max{0, (x^2+y^2-1)(x^2+y^2-4)}, annulus [0.5, 2.5]
///   example2     g = sign(y) cbrt(x^2+y^2-1), annulus [0.5, 1.5]
///   zero         f = 0 on [-10, 10], T = 2pi
///   linear_test  f = (x2 + cos t, -x1 - x2/2 + sin t) on [-2, 2]^2, T = 2pi
/// The oscillator perturbations do not depend on eps.
inline SystemDefinition builtin_definition(const std::string& name) {
  constexpr double two_pi = 2.0 * std::numbers::pi;
  if (name == "example1") {
    return SecondOrderSystem{
        "example1", "sign(y*(x^2+y^2-1))*max(0, (x^2+y^2-1)*(x^2+y^2-4))",
        "sign((r^2-1)*sin(theta))*max(0, (r^2-1)*(r^2-4))", 0.5, 2.5, 0.2};
  }
  if (name == "example2") {
    return SecondOrderSystem{"example2", "sign(y)*cbrt(x^2+y^2-1)", "sign(sin(theta))*cbrt(r^2-1)",
                             0.5, 1.5, 0.2};
  }
  if (name == "zero") {
    return FirstOrderDefinition{"zero", {"0"}, two_pi, 1.0, Box::interval(-10.0, 10.0), {}, {}};
  }
  if (name == "linear_test") {
    return FirstOrderDefinition{"linear_test",
                                {"x2 + cos(t)", "-x1 - 0.5*x2 + sin(t)"},
                                two_pi,
                                0.5,
                                Box{{-2.0, -2.0}, {2.0, 2.0}},
                                {},
                                {}};
  }
  throw SystemError(fmt::format("unknown builtin '{}' (known: {})", name, fmt::join(builtin_names(), ", ")));
}

inline CaratheodorySystem builtin(const std::string& name) { return build(builtin_definition(name)); }

}  // namespace cavg
