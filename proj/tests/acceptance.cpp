// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numbers>
#include <random>
#include <string>

#include <fmt/format.h>

#include "cavg/degree.hpp"
#include "cavg/integrator.hpp"
#include "cavg/periodic.hpp"
#include "cavg/quadrature.hpp"

using namespace cavg;

namespace {

constexpr double pi = std::numbers::pi;

struct Verdict {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void criterion(int id, const char* title, const std::function<Verdict()>& body) {
  const auto start = std::chrono::steady_clock::now();
  Verdict v;
  try {
    v = body();
  } catch (const std::exception& e) {
    v = {false, fmt::format("exception: {}", e.what())};
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  if (!v.pass) ++failures;
  fmt::print("{} {} {}: {} [{:.2f} s]\n", v.pass ? "PASS" : "FAIL", id, title, v.detail, secs);
  std::fflush(stdout);
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

VectorField as_field(const AveragedField& f) {
  return [&f](std::span<const double> z) { return f(z); };
}

ScalarField as_scalar(const AveragedField& f) {
  return [&f](double r) { return f(r); };
}

VectorField lift(std::function<double(double)> g) {
  return [g](std::span<const double> z) { return std::vector<double>{g(z[0])}; };
}

}  // namespace

int main() {
  const auto example1 = builtin("example1");
  const auto example2 = builtin("example2");
  const Box V1 = Box::interval(0.9, 2.1);
  const Box V2 = Box::interval(0.5, 1.5);

  criterion(1, "averaged field, example2 closed form", [&] {
    const auto t0 = std::chrono::steady_clock::now();
    const AveragedField f(example2);
    double worst = 0.0;
    bool converged = true;
    for (int i = 0; i <= 100; ++i) {
      const double r = 0.5 + i / 100.0;
      const double z[1] = {r};
      const auto a = f.average(z);
      converged = converged && a.converged;
      worst = std::max(worst, std::abs(a.value[0] + (2.0 / pi) * std::cbrt(r * r - 1.0)));
    }
    const double secs = seconds_since(t0);
    return Verdict{converged && worst <= 1e-8 && secs <= 5.0,
                   fmt::format("max abs error {:.3g} (limit 1e-8), runtime {:.3f} s (limit 5 s)", worst, secs)};
  });

  criterion(2, "averaged field, example1 piecewise closed form", [&] {
    const AveragedField f(example1);
    auto closed = [](double r) {
      const double q = (r * r - 1.0) * (r * r - 4.0);
      return r < 1.0 ? (2.0 / pi) * q : (r <= 2.0 ? 0.0 : -(2.0 / pi) * q);
    };
    double worst = 0.0, plateau = 0.0;
    for (int i = 0; i <= 100; ++i) {
      const double r = 0.5 + 2.0 * i / 100.0;
      const double v = f(r);
      worst = std::max(worst, std::abs(v - closed(r)));
      if (r >= 1.05 && r <= 1.95) plateau = std::max(plateau, std::abs(v));
    }
    for (int i = 0; i <= 90; ++i) plateau = std::max(plateau, std::abs(f(1.05 + 0.01 * i)));
    return Verdict{worst <= 1e-6 && plateau <= 1e-10,
                   fmt::format("max abs error {:.3g} (limit 1e-6), plateau max |f1| {:.3g} (limit 1e-10)", worst,
                               plateau)};
  });

  criterion(3, "interval degrees", [&] {
    const AveragedField f1(example1), f2(example2);
    const int d1 = degree_interval(as_scalar(f1), 0.9, 2.1).value;
    const int d2 = degree_interval(as_scalar(f2), 0.5, 1.5).value;
    const int did = degree_interval([](double x) { return x; }, -1.0, 1.0).value;
    return Verdict{d1 == -1 && d2 == -1 && did == 1,
                   fmt::format("example1 on (0.9, 2.1): {}, example2 on (0.5, 1.5): {}, identity on (-1, 1): {}", d1,
                               d2, did)};
  });

  criterion(4, "degree properties (additivity, homotopy invariance)", [&] {
    std::mt19937_64 rng(2024);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    int additive = 0;
    for (int trial = 0; trial < 20; ++trial) {
      // Odd number of simple zeros so the endpoint rule applies on the window.
      const int m = 1 + 2 * static_cast<int>(u(rng) * 3);
      std::vector<double> roots;
      for (int i = 0; i < m; ++i) roots.push_back(1.5 + 2.0 * i + 0.8 * (u(rng) - 0.5));
      const double lead = u(rng) < 0.5 ? -1.0 : 1.0;
      auto p = [roots, lead](double x) {
        double v = lead;
        for (double r : roots) v *= x - r;
        return v;
      };
      const double a = 0.5, b = 2.0 * m + 0.5;
      int sum = 0;
      for (std::size_t i = 0; i < roots.size(); ++i) {
        const double lo = i == 0 ? a : 0.5 * (roots[i - 1] + roots[i]);
        const double hi = i + 1 == roots.size() ? b : 0.5 * (roots[i] + roots[i + 1]);
        sum += degree_interval(p, lo, hi).value;
      }
      if (degree_interval(p, a, b).value == sum) ++additive;
    }
    const AveragedField f1(example1), f2(example2);
    auto g1 = [](double r) { return 1.5 - r; };
    auto g2 = [](double r) { return 1.0 - r; };
    const auto h1 = homotopy_nonvanishing(as_field(f1), lift(g1), V1);
    const auto h2 = homotopy_nonvanishing(as_field(f2), lift(g2), V2);
    const bool agree1 = degree_interval(as_scalar(f1), 0.9, 2.1).value == degree_interval(g1, 0.9, 2.1).value;
    const bool agree2 = degree_interval(as_scalar(f2), 0.5, 1.5).value == degree_interval(g2, 0.5, 1.5).value;
    return Verdict{additive == 20 && h1.passed && h2.passed && agree1 && agree2,
                   fmt::format("additivity {}/20; homotopy example1 {} (margin {:.3g}), example2 {} (margin {:.3g}); "
                               "degrees agree {} / {}",
                               additive, h1.passed ? "pass" : "fail", h1.min_margin, h2.passed ? "pass" : "fail",
                               h2.min_margin, agree1, agree2)};
  });

  criterion(5, "excision around r* = 1 (example2)", [&] {
    const AveragedField f2(example2);
    const double z[1] = {1.0};
    const std::vector<double> mu{0.4, 0.2, 0.1, 0.05};
    const auto c = excision_check(as_field(f2), V2, z, mu);
    bool all = c.reference_degree == -1;
    for (int d : c.ball_degrees) all = all && d == -1;
    return Verdict{c.passed && all && c.ball_degrees.size() == 4,
                   fmt::format("degree over V {}, over balls {}", c.reference_degree, fmt::join(c.ball_degrees, " "))};
  });

  criterion(6, "integration with declared breaks and RK order", [&] {
    const auto jump = build_first_order(
        {"sign_sin", {"sign(sin(t))"}, 2 * pi, 1.0, Box::interval(-10, 10), {0.0, pi}, {}});
    const double x0[1] = {0.0};
    const double end = integrate(jump, x0, 1.0).final_state()[0];

    // cos t with the step cap lifted so the tolerance governs the step size.
    const auto smooth = build_first_order({"cos", {"cos(t)"}, 2 * pi, 1.0, Box::interval(-2, 2), {}, {}});
    IntegratorOptions opt;
    opt.max_step_fraction = 1.0;
    opt.tol = 1e-6;
    const double coarse = std::abs(integrate(smooth, x0, 1.0, opt).final_state()[0]);
    opt.tol = 1e-6 / 8.0;
    const double fine = std::abs(integrate(smooth, x0, 1.0, opt).final_state()[0]);
    const double ratio = coarse / fine;
    return Verdict{std::abs(end) <= 1e-12 && ratio >= 8.0,
                   fmt::format("x(2pi) for sign(sin t) = {:.3g} (limit 1e-12); error ratio {:.3g} for tol 1e-6 -> "
                               "1.25e-7 (limit >= 8)",
                               end, ratio)};
  });

  criterion(7, "periodic orbits of example2 converge to r* = 1", [&] {
    const auto t0 = std::chrono::steady_clock::now();
    const double z[1] = {1.0};
    const std::vector<double> grid{0.1, 0.05, 0.025, 0.0125};
    const auto rep = sweep(example2, V2, z, grid, {}, std::vector<double>{1.2});
    bool ok = rep.all_found();
    double worst_res = 0.0;
    bool contained = true, non_increasing = true;
    for (std::size_t i = 0; i < rep.entries.size(); ++i) {
      if (!rep.entries[i].orbit) continue;
      const auto& o = *rep.entries[i].orbit;
      worst_res = std::max({worst_res, o.residual, o.verified_residual});
      contained = contained && o.inside_V;
      if (i > 0 && !(rep.sup_distances[i] <= rep.sup_distances[i - 1])) non_increasing = false;
    }
    const double final_sup = rep.sup_distances.empty() ? NAN : rep.sup_distances.back();
    const double secs = seconds_since(t0);
    ok = ok && worst_res <= 1e-10 && contained && non_increasing && final_sup <= 0.05 && secs <= 60.0;
    return Verdict{ok, fmt::format("max residual {:.3g} (limit 1e-10), contained {}, sup distances {} "
                                   "(non-increasing {}, final limit 0.05), runtime {:.2f} s (limit 60 s)",
                                   worst_res, contained, fmt::join(rep.sup_distances, " "), non_increasing, secs)};
  });

  criterion(8, "existence-only orbit of example1", [&] {
    const double guess[1] = {1.5};
    const auto o = find_periodic(example1, V1, 0.05, guess);
    const double res = std::max(o.residual, o.verified_residual);
    return Verdict{res <= 1e-10 && o.inside_V,
                   fmt::format("fixed point {:.17g}, residual {:.3g} (limit 1e-10), inside V {}", o.fixed_point[0],
                               res, o.inside_V)};
  });

  criterion(9, "degenerate inputs are refused", [&] {
    const auto rep = certify(builtin("zero"), Box::interval(0, 1), std::nullopt);
    const bool halted = rep.halted_stage && *rep.halted_stage == "degree";
    const AveragedField f2(example2);
    const double z[1] = {1.0};
    std::string outcome;
    bool refused = false;
    try {
      const auto d = degree_regular_zero(as_field(f2), z, V2);
      outcome = fmt::format("returned {}", d.value);
    } catch (const DegreeError& e) {
      refused = e.kind() == DegreeError::Kind::inapplicable;
      outcome = e.what();
    }
    return Verdict{halted && refused, fmt::format("zero system halted at '{}'; regular zero at r* = 1: {}",
                                                  rep.halted_stage.value_or("none"), outcome)};
  });

  fmt::print("{} of 9 criteria passed\n", 9 - failures);
  return failures == 0 ? 0 : 1;
}
