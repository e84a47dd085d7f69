#pragma once

// Adaptive Dormand-Prince 5(4) integration of  x' = eps f(t, x, eps)  for
// right-hand sides that may jump in t. The time axis is cut at every declared
// t_break (shifted by multiples of T); steps land exactly on each cut and the
// field is always sampled strictly inside the current piece, so a step never
// sees both sides of a declared jump. Declared switching surfaces s(x) = 0 are
// located by bisection on the step size. When the field points into a surface
// from both sides the solution continues along it with the Filippov sliding
// field.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <fmt/format.h>
#include <fmt/ranges.h>

#include "cavg/expr.hpp"
#include "cavg/system.hpp"

namespace cavg {

struct IntegratorOptions {
  double tol = 1e-9;                  // local error bound per step (scaled by max(1, |x_i|))
  double min_step_factor = 1e-13;     // step underflow below this times T
  double max_step_fraction = 1.0 / 64.0;
  double event_tol = 1e-12;           // switching-surface location accuracy in t
  std::size_t max_steps = 200'000;
};

struct StepStats {
  double min_step = std::numeric_limits<double>::infinity();
  double max_step = 0.0;
  double mean_step = 0.0;
  std::size_t accepted = 0;
  std::size_t rejected = 0;
  std::size_t break_crossings = 0;
  std::size_t switch_events = 0;
  std::size_t sliding_steps = 0;
};

struct Trajectory {
  double eps = 0.0;
  std::vector<double> t;
  std::vector<std::vector<double>> x;
  StepStats stats;

  [[nodiscard]] const std::vector<double>& final_state() const { return x.back(); }
};

class IntegrationError : public std::runtime_error {
 public:
  enum class Kind { domain_exit, step_underflow, evaluator, invalid_input };

  IntegrationError(Kind kind, const std::string& what, double t = 0.0, std::vector<double> x = {})
      : std::runtime_error(what), kind_(kind), t_(t), x_(std::move(x)) {}

  [[nodiscard]] Kind kind() const noexcept { return kind_; }
  [[nodiscard]] double time() const noexcept { return t_; }
  [[nodiscard]] const std::vector<double>& state() const noexcept { return x_; }

 private:
  Kind kind_;
  double t_;
  std::vector<double> x_;
};

namespace detail {

namespace dp5 {
inline constexpr double c2 = 1.0 / 5, c3 = 3.0 / 10, c4 = 4.0 / 5, c5 = 8.0 / 9;
inline constexpr double a21 = 1.0 / 5;
inline constexpr double a31 = 3.0 / 40, a32 = 9.0 / 40;
inline constexpr double a41 = 44.0 / 45, a42 = -56.0 / 15, a43 = 32.0 / 9;
inline constexpr double a51 = 19372.0 / 6561, a52 = -25360.0 / 2187, a53 = 64448.0 / 6561,
                        a54 = -212.0 / 729;
inline constexpr double a61 = 9017.0 / 3168, a62 = -355.0 / 33, a63 = 46732.0 / 5247, a64 = 49.0 / 176,
                        a65 = -5103.0 / 18656;
inline constexpr double b1 = 35.0 / 384, b3 = 500.0 / 1113, b4 = 125.0 / 192, b5 = -2187.0 / 6784,
                        b6 = 11.0 / 84;
inline constexpr double e1 = 71.0 / 57600, e3 = -71.0 / 16695, e4 = 71.0 / 1920, e5 = -17253.0 / 339200,
                        e6 = 22.0 / 525, e7 = -1.0 / 40;
}  // namespace dp5

class Stepper {
 public:
  Stepper(const CaratheodorySystem& sys, double eps)
      : sys_(sys), eps_(eps), n_(sys.dim()), k_(7, std::vector<double>(n_)), tmp_(n_) {}

  void set_piece(double lo, double hi) {
    lo_ = lo;
    hi_ = hi;
    const double nudge = 8.0 * std::numeric_limits<double>::epsilon() *
                         std::max({1.0, std::abs(lo), std::abs(hi), sys_.period()});
    lo_eval_ = lo + nudge;
    hi_eval_ = hi - nudge;
    if (lo_eval_ > hi_eval_) lo_eval_ = hi_eval_ = 0.5 * (lo + hi);
  }

  /// Normal components of the field just below and just above surface s at x.
  struct SurfaceProbe {
    double below = 0.0;
    double above = 0.0;
    std::vector<double> normal;
    std::vector<double> f_below, f_above;

    [[nodiscard]] bool attracting() const { return above <= 0.0 && below >= 0.0 && below - above > 0.0; }
  };

  SurfaceProbe probe(double t, std::span<const double> x, const SwitchFunction& s) {
    SurfaceProbe p;
    p.normal.resize(n_);
    std::vector<double> y(x.begin(), x.end());
    double scale = 1.0, norm2 = 0.0;
    for (std::size_t i = 0; i < n_; ++i) {
      scale = std::max(scale, std::abs(x[i]));
      const double hs = 1e-7 * std::max(1.0, std::abs(x[i]));
      y[i] = x[i] + hs;
      const double sp = s(y);
      y[i] = x[i] - hs;
      const double sm = s(y);
      y[i] = x[i];
      p.normal[i] = (sp - sm) / (2.0 * hs);
      norm2 += p.normal[i] * p.normal[i];
    }
    if (!(norm2 > 0.0) || !std::isfinite(norm2)) return p;
    const double delta = 1e-9 * scale / std::sqrt(norm2);
    p.f_below.resize(n_);
    p.f_above.resize(n_);
    for (std::size_t i = 0; i < n_; ++i) y[i] = x[i] - delta * p.normal[i];
    eval_field(t, y, p.f_below);
    for (std::size_t i = 0; i < n_; ++i) y[i] = x[i] + delta * p.normal[i];
    eval_field(t, y, p.f_above);
    for (std::size_t i = 0; i < n_; ++i) {
      p.below += p.normal[i] * p.f_below[i];
      p.above += p.normal[i] * p.f_above[i];
    }
    return p;
  }

  void set_sliding(const SwitchFunction* s) { sliding_ = s; }

  void eval_field(double t, std::span<const double> x, std::vector<double>& out) {
    const double te = std::clamp(t, lo_eval_, hi_eval_);
    try {
      sys_.eval_raw(te, x, eps_, out);
    } catch (const EvalError& e) {
      throw IntegrationError(IntegrationError::Kind::evaluator,
                             fmt::format("right-hand side failed at t={}: {}", te, e.what()), te,
                             std::vector<double>(x.begin(), x.end()));
    }
    for (auto& v : out) v *= eps_;
  }

  /// One step of size h from (t, x): writes the 5th-order solution into `out`
  /// and returns the scaled error norm.
  double step(double t, std::span<const double> x, double h, std::span<double> out, double tol) {
    using namespace dp5;
    auto& k = k_;
    eval(t, x, k[0]);
    for (std::size_t i = 0; i < n_; ++i) tmp_[i] = x[i] + h * a21 * k[0][i];
    eval(t + c2 * h, tmp_, k[1]);
    for (std::size_t i = 0; i < n_; ++i) tmp_[i] = x[i] + h * (a31 * k[0][i] + a32 * k[1][i]);
    eval(t + c3 * h, tmp_, k[2]);
    for (std::size_t i = 0; i < n_; ++i) tmp_[i] = x[i] + h * (a41 * k[0][i] + a42 * k[1][i] + a43 * k[2][i]);
    eval(t + c4 * h, tmp_, k[3]);
    for (std::size_t i = 0; i < n_; ++i) {
      tmp_[i] = x[i] + h * (a51 * k[0][i] + a52 * k[1][i] + a53 * k[2][i] + a54 * k[3][i]);
    }
    eval(t + c5 * h, tmp_, k[4]);
    for (std::size_t i = 0; i < n_; ++i) {
      tmp_[i] = x[i] + h * (a61 * k[0][i] + a62 * k[1][i] + a63 * k[2][i] + a64 * k[3][i] + a65 * k[4][i]);
    }
    eval(t + h, tmp_, k[5]);
    for (std::size_t i = 0; i < n_; ++i) {
      out[i] = x[i] + h * (b1 * k[0][i] + b3 * k[2][i] + b4 * k[3][i] + b5 * k[4][i] + b6 * k[5][i]);
    }
    eval(t + h, out, k[6]);
    double err = 0.0;
    for (std::size_t i = 0; i < n_; ++i) {
      const double e = h * (e1 * k[0][i] + e3 * k[2][i] + e4 * k[3][i] + e5 * k[4][i] + e6 * k[5][i] +
                            e7 * k[6][i]);
      const double scale = tol * std::max({1.0, std::abs(x[i]), std::abs(out[i])});
      err = std::max(err, std::abs(e) / scale);
    }
    if (!std::isfinite(err)) err = std::numeric_limits<double>::infinity();
    return err;
  }

 private:
  void eval(double t, std::span<const double> x, std::vector<double>& out) {
    if (sliding_ == nullptr) {
      eval_field(t, x, out);
      return;
    }
    // Convex combination of the one-sided fields with no normal component.
    auto p = probe(t, x, *sliding_);
    if (p.f_below.empty()) {
      eval_field(t, x, out);
      return;
    }
    const double gap = p.below - p.above;
    const double alpha = gap != 0.0 ? p.below / gap : 0.5;
    for (std::size_t i = 0; i < n_; ++i) out[i] = alpha * p.f_above[i] + (1.0 - alpha) * p.f_below[i];
  }

  const CaratheodorySystem& sys_;
  double eps_;
  std::size_t n_;
  std::vector<std::vector<double>> k_;
  std::vector<double> tmp_;
  const SwitchFunction* sliding_ = nullptr;
  double lo_ = 0.0, hi_ = 0.0, lo_eval_ = 0.0, hi_eval_ = 0.0;
};

inline std::vector<double> cut_points(const CaratheodorySystem& sys, double t0, double t1) {
  std::vector<double> cuts{t0};
  const double T = sys.period();
  const auto first_period = static_cast<long>(std::floor(t0 / T));
  const auto last_period = static_cast<long>(std::floor(t1 / T));
  for (long k = first_period; k <= last_period; ++k) {
    const double base = static_cast<double>(k) * T;
    if (base > t0 && base < t1) cuts.push_back(base);
    for (double b : sys.t_breaks()) {
      const double c = base + b;
      if (c > t0 && c < t1) cuts.push_back(c);
    }
  }
  cuts.push_back(t1);
  std::sort(cuts.begin(), cuts.end());
  cuts.erase(std::unique(cuts.begin(), cuts.end()), cuts.end());
  return cuts;
}

inline int switch_sign(double v) { return v > 0.0 ? 1 : (v < 0.0 ? -1 : 0); }

}  // namespace detail

/// Integrates x' = eps f(t, x, eps) from (t0, x0) to t1 >= t0.
inline Trajectory integrate_span(const CaratheodorySystem& sys, std::span<const double> x0, double eps,
                                 double t0, double t1, const IntegratorOptions& opt = {}) {
  const std::size_t n = sys.dim();
  if (x0.size() != n) {
    throw IntegrationError(IntegrationError::Kind::invalid_input,
                           fmt::format("initial state has dimension {}, system has {}", x0.size(), n));
  }
  if (!sys.domain().contains(x0)) {
    throw IntegrationError(IntegrationError::Kind::invalid_input,
                           fmt::format("initial state ({}) outside domain {}", fmt::join(x0, ", "),
                                       sys.domain().to_string()),
                           t0, std::vector<double>(x0.begin(), x0.end()));
  }
  if (!(eps >= 0.0 && eps <= sys.eps_max())) {
    throw IntegrationError(IntegrationError::Kind::invalid_input,
                           fmt::format("eps = {} outside [0, {}]", eps, sys.eps_max()));
  }
  if (!(opt.tol > 0.0) || !(t1 >= t0)) {
    throw IntegrationError(IntegrationError::Kind::invalid_input, "need tol > 0 and t1 >= t0");
  }

  Trajectory traj;
  traj.eps = eps;
  std::vector<double> x(x0.begin(), x0.end()), xn(n), xtrial(n), fx(n);
  traj.t.push_back(t0);
  traj.x.push_back(x);
  if (t1 == t0) return traj;

  const double T = sys.period();
  const double h_min = opt.min_step_factor * T;
  const double h_max = opt.max_step_fraction * T;
  const auto cuts = detail::cut_points(sys, t0, t1);
  // Error per unit step relative to h_max: a step of size h may commit at most
  // tol * h / h_max, so every step meets tol and the global error scales with
  // tol^(5/4) instead of leveling off as steps accumulate.
  // Floored near round-off so tiny steps are not rejected on rounding noise.
  const double tol_floor = std::min(opt.tol, 100.0 * std::numeric_limits<double>::epsilon());
  auto step_tol = [&](double step) { return std::max(opt.tol * std::min(1.0, step / h_max), tol_floor); };
  detail::Stepper stepper(sys, eps);
  const auto& switches = sys.x_switch();
  std::vector<int> side(switches.size());
  for (std::size_t j = 0; j < switches.size(); ++j) side[j] = detail::switch_sign(switches[j](x));

  // Index of the first declared surface crossed by y, or -1.
  int sliding = -1;
  auto crosses = [&](std::span<const double> y) {
    for (std::size_t j = 0; j < switches.size(); ++j) {
      if (static_cast<int>(j) == sliding) continue;
      const int s = detail::switch_sign(switches[j](y));
      if (side[j] != 0 && s != 0 && s != side[j]) return static_cast<int>(j);
    }
    return -1;
  };
  int candidate = -1;
  for (std::size_t j = 0; j < switches.size(); ++j) {
    if (side[j] == 0) candidate = static_cast<int>(j);
  }

  double t = t0;
  double h = h_max;
  double err_prev = 1e-4;
  double step_sum = 0.0;

  for (std::size_t piece = 0; piece + 1 < cuts.size(); ++piece) {
    const double p1 = cuts[piece + 1];
    stepper.set_piece(cuts[piece], p1);
    if (piece > 0) ++traj.stats.break_crossings;
    while (t < p1) {
      if (traj.stats.accepted + traj.stats.rejected >= opt.max_steps) {
        throw IntegrationError(IntegrationError::Kind::step_underflow,
                               fmt::format("step budget exhausted at t={}", t), t, x);
      }
      if (candidate >= 0) {
        const auto& s = switches[static_cast<std::size_t>(candidate)];
        stepper.set_sliding(nullptr);
        auto p = stepper.probe(t, x, s);
        if (p.attracting()) {
          // Pull the state back onto the surface before sliding along it.
          double n2 = 0.0;
          for (double v : p.normal) n2 += v * v;
          const double sv = s(x);
          std::vector<double> y(x);
          for (std::size_t i = 0; i < n; ++i) y[i] -= sv * p.normal[i] / n2;
          if (sys.domain().contains(y)) x = y;
          sliding = candidate;
          stepper.set_sliding(&s);
        } else if (sliding >= 0) {
          stepper.set_sliding(&switches[static_cast<std::size_t>(sliding)]);
        }
        candidate = -1;
      } else if (sliding >= 0) {
        const auto& s = switches[static_cast<std::size_t>(sliding)];
        stepper.set_sliding(nullptr);
        auto p = stepper.probe(t, x, s);
        if (p.attracting()) {
          stepper.set_sliding(&s);
        } else {
          side[static_cast<std::size_t>(sliding)] = p.above > 0.0 ? 1 : -1;
          sliding = -1;
        }
      }

      const double h_nominal = std::min(h, h_max);
      h = h_nominal;
      bool lands = false;
      if (t + h >= p1 - 0.01 * h) {
        h = p1 - t;
        lands = true;
      }
      if (sliding < 0 && !switches.empty()) {
        // An attracting surface within one Euler step: approach it in steps
        // of half the remaining distance, then snap onto it once closer than
        // the tolerance. Near a non-Lipschitz surface the RK map otherwise
        // has spurious fixed points just short of it.
        stepper.eval_field(t, x, fx);
        for (std::size_t i = 0; i < n; ++i) xtrial[i] = x[i] + h * fx[i];
        if (const int j = crosses(xtrial); j >= 0) {
          const auto& s = switches[static_cast<std::size_t>(j)];
          const double sv = s(x);
          auto p = stepper.probe(t, x, s);
          double n2 = 0.0, rate = 0.0, scale = 1.0;
          for (std::size_t i = 0; i < n; ++i) {
            n2 += p.normal[i] * p.normal[i];
            rate += p.normal[i] * fx[i];
            scale = std::max(scale, std::abs(x[i]));
          }
          std::vector<double> y(x);
          if (n2 > 0.0) {
            for (std::size_t i = 0; i < n; ++i) y[i] -= sv * p.normal[i] / n2;
          }
          const auto q = n2 > 0.0 ? stepper.probe(t, y, s) : p;
          if (n2 > 0.0 && q.attracting()) {
            if (std::abs(sv) / std::sqrt(n2) <= 100.0 * opt.tol * scale && sys.domain().contains(y)) {
              x = y;
              sliding = j;
              stepper.set_sliding(&s);
              traj.x.back() = x;
              ++traj.stats.switch_events;
              continue;
            }
            if (rate != 0.0) {
              const double h_cap = 0.5 * std::abs(sv / rate);
              if (h_cap < h) {
                h = h_cap;
                lands = false;
              }
            }
          }
        }
      }
      if (h < h_min && !lands) {
        throw IntegrationError(IntegrationError::Kind::step_underflow,
                               fmt::format("step size {} underflow at t={}", h, t), t, x);
      }
      double err = stepper.step(t, x, h, xn, step_tol(h));

      // Event location runs before the error test: a step across a surface
      // where the field is not smooth is usually rejected, and shrinking it
      // blindly can stall just short of the surface.
      double h_taken = h;
      int hit = switches.empty() ? -1 : crosses(xn);
      if (hit >= 0) {
        double lo = 0.0, hi = h;
        while (hi - lo > opt.event_tol) {
          const double mid = 0.5 * (lo + hi);
          stepper.step(t, x, mid, xtrial, opt.tol);
          if (crosses(xtrial) >= 0) {
            hi = mid;
          } else {
            lo = mid;
          }
        }
        if (hi < h) {
          err = stepper.step(t, x, hi, xn, step_tol(hi));
          hit = crosses(xn);
          lands = false;
        }
        h_taken = hi;
      }

      if (err > 1.0) {
        ++traj.stats.rejected;
        h = h_taken * std::max(0.2, 0.9 * std::pow(err, -0.25));
        if (h < h_min) {
          throw IntegrationError(IntegrationError::Kind::step_underflow,
                                 fmt::format("step size {} underflow at t={}", h, t), t, x);
        }
        continue;
      }

      if (!sys.domain().contains(xn)) {
        double lo = 0.0, hi = h_taken;
        for (int it = 0; it < 200 && hi - lo > opt.event_tol; ++it) {
          const double mid = 0.5 * (lo + hi);
          stepper.step(t, x, mid, xtrial, opt.tol);
          if (sys.domain().contains(xtrial)) {
            lo = mid;
          } else {
            hi = mid;
          }
        }
        stepper.step(t, x, hi, xtrial, opt.tol);
        throw IntegrationError(IntegrationError::Kind::domain_exit,
                               fmt::format("trajectory left the domain at t={} (x=({}))", t + hi,
                                           fmt::join(xtrial, ", ")),
                               t + hi, xtrial);
      }

      t = lands ? p1 : t + h_taken;
      x.swap(xn);
      traj.t.push_back(t);
      traj.x.push_back(x);
      ++traj.stats.accepted;
      if (sliding >= 0) ++traj.stats.sliding_steps;
      step_sum += h_taken;
      traj.stats.min_step = std::min(traj.stats.min_step, h_taken);
      traj.stats.max_step = std::max(traj.stats.max_step, h_taken);
      for (std::size_t j = 0; j < switches.size(); ++j) {
        if (static_cast<int>(j) == sliding) continue;
        if (hit >= 0 || side[j] == 0) side[j] = detail::switch_sign(switches[j](x));
      }
      if (hit >= 0) {
        ++traj.stats.switch_events;
        candidate = hit;
      }

      // PI step-size control.
      const double e = std::max(err, 1e-10);
      const double factor = 0.9 * std::pow(e, -0.7 / 4.0) * std::pow(err_prev, 0.4 / 4.0);
      err_prev = e;
      h = h_taken * std::clamp(factor, 0.2, 5.0);
      if (lands) h = std::max(h, h_nominal);
      // Restart on the far side of an event with the step tried before it.
      if (hit >= 0) {
        h = std::max(h, h_nominal);
        err_prev = 1e-4;
      }
    }
  }
  if (traj.stats.accepted > 0) traj.stats.mean_step = step_sum / static_cast<double>(traj.stats.accepted);
  return traj;
}

/// One period [0, T].
inline Trajectory integrate(const CaratheodorySystem& sys, std::span<const double> x0, double eps,
                            const IntegratorOptions& opt = {}) {
  return integrate_span(sys, x0, eps, 0.0, sys.period(), opt);
}

inline Trajectory integrate(const CaratheodorySystem& sys, std::span<const double> x0, double eps, double tol) {
  IntegratorOptions opt;
  opt.tol = tol;
  return integrate(sys, x0, eps, opt);
}

/// Time-T map x0 -> x(T).
inline std::vector<double> poincare(const CaratheodorySystem& sys, std::span<const double> x0, double eps,
                                    const IntegratorOptions& opt = {}) {
  return integrate(sys, x0, eps, opt).final_state();
}

inline std::vector<double> poincare(const CaratheodorySystem& sys, std::span<const double> x0, double eps,
                                    double tol) {
  IntegratorOptions opt;
  opt.tol = tol;
  return poincare(sys, x0, eps, opt);
}

}  // namespace cavg
