#pragma once

// Averaged field f1(z) = (1/T) * integral_0^T f(t, z, 0) dt by globally
// adaptive 7/15-point Gauss-Kronrod quadrature. The initial partition is
// seeded with the system's declared t_breaks so no panel straddles a declared
// jump; the panel with the largest error estimate is bisected until every
// component meets max(abs_tol, rel_tol |f1|).

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <map>
#include <memory>
#include <mutex>
#include <queue>
#include <span>
#include <stdexcept>
#include <vector>

#include <fmt/format.h>
#include <fmt/ranges.h>

#include "cavg/parallel.hpp"
#include "cavg/system.hpp"

namespace cavg {

struct QuadratureOptions {
  double abs_tol = 1e-10;
  double rel_tol = 1e-8;
  int max_subdivisions = 2000;
};

struct AverageResult {
  std::vector<double> value;
  std::vector<double> error;
  bool converged = false;
  int subdivisions = 0;
};

namespace gauss_kronrod {

// Kronrod abscissae on [-1, 1] (positive half, descending; last is 0). The
// odd-indexed ones are the 7-point Gauss nodes.
inline constexpr std::array<double, 8> kNodes = {
    0.991455371120812639206854697526329, 0.949107912342758524526189684047851,
    0.864864423359769072789712788640926, 0.741531185599394439863864773280788,
    0.586087235467691130294144845693013, 0.405845151377397166906606412076961,
    0.207784955007898467600689403773245, 0.000000000000000000000000000000000};

inline constexpr std::array<double, 8> kKronrodWeights = {
    0.022935322010529224963732008058970, 0.063092092629978553290700663189204,
    0.104790010322250183839876322541518, 0.140653259715525918745189590510238,
    0.169004726639267902826583426598550, 0.190350578064785409913256402421014,
    0.204432940075298892414161999234649, 0.209482141084727828012999174891714};

// Gauss weights for kNodes[1], kNodes[3], kNodes[5], kNodes[7].
inline constexpr std::array<double, 4> kGaussWeights = {
    0.129484966168869693270611432679082, 0.279705391489276667901467771423780,
    0.381830050505118944950369775488975, 0.417959183673469387755102040816327};

struct Panel {
  double a = 0.0;
  double b = 0.0;
  std::vector<double> kronrod;
  std::vector<double> abs_error;
  double priority = 0.0;
};

/// Applies the 15-point rule to a vector integrand g(t, out) on [a, b].
template <class Integrand>
Panel apply(Integrand&& g, double a, double b, std::size_t n) {
  Panel p;
  p.a = a;
  p.b = b;
  p.kronrod.assign(n, 0.0);
  std::vector<double> gauss(n, 0.0), fp(n), fm(n);
  const double half = 0.5 * (b - a);
  const double mid = 0.5 * (a + b);

  g(mid, std::span<double>(fp));
  for (std::size_t i = 0; i < n; ++i) {
    p.kronrod[i] += kKronrodWeights[7] * fp[i];
    gauss[i] += kGaussWeights[3] * fp[i];
  }
  for (int j = 0; j < 7; ++j) {
    const double dx = half * kNodes[j];
    g(mid - dx, std::span<double>(fm));
    g(mid + dx, std::span<double>(fp));
    for (std::size_t i = 0; i < n; ++i) {
      const double s = fm[i] + fp[i];
      p.kronrod[i] += kKronrodWeights[j] * s;
      if (j % 2 == 1) gauss[i] += kGaussWeights[j / 2] * s;
    }
  }
  p.abs_error.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    p.kronrod[i] *= half;
    gauss[i] *= half;
    p.abs_error[i] = std::abs(p.kronrod[i] - gauss[i]);
    p.priority = std::max(p.priority, p.abs_error[i]);
  }
  return p;
}

}  // namespace gauss_kronrod

/// Adaptive integral of a vector integrand over [a, b] with interior
/// breakpoints. Returns the raw integral (not divided by the length).
template <class Integrand>
AverageResult integrate_adaptive(Integrand&& g, std::size_t n, double a, double b,
                                 std::span<const double> breaks, const QuadratureOptions& opt) {
  std::vector<double> cuts{a};
  for (double c : breaks) {
    if (c > a && c < b) cuts.push_back(c);
  }
  cuts.push_back(b);
  std::sort(cuts.begin(), cuts.end());

  auto cmp = [](const gauss_kronrod::Panel& x, const gauss_kronrod::Panel& y) {
    return x.priority < y.priority;
  };
  std::priority_queue<gauss_kronrod::Panel, std::vector<gauss_kronrod::Panel>, decltype(cmp)> heap(cmp);
  AverageResult res;
  res.value.assign(n, 0.0);
  res.error.assign(n, 0.0);
  for (std::size_t k = 0; k + 1 < cuts.size(); ++k) {
    if (cuts[k + 1] > cuts[k]) heap.push(gauss_kronrod::apply(g, cuts[k], cuts[k + 1], n));
  }

  const double length = b - a;
  auto totals = [&] {
    std::fill(res.value.begin(), res.value.end(), 0.0);
    std::fill(res.error.begin(), res.error.end(), 0.0);
    auto copy = heap;
    while (!copy.empty()) {
      const auto& p = copy.top();
      for (std::size_t i = 0; i < n; ++i) {
        res.value[i] += p.kronrod[i];
        res.error[i] += p.abs_error[i];
      }
      copy.pop();
    }
  };
  auto done = [&] {
    for (std::size_t i = 0; i < n; ++i) {
      const double tol = std::max(opt.abs_tol * length, opt.rel_tol * std::abs(res.value[i]));
      if (res.error[i] > tol) return false;
    }
    return true;
  };

  // Running totals are kept incrementally; the full re-sum above is only used
  // at the end to avoid drift.
  totals();
  while (!done()) {
    if (res.subdivisions >= opt.max_subdivisions || heap.empty()) {
      res.converged = false;
      return res;
    }
    auto worst = heap.top();
    const double mid = 0.5 * (worst.a + worst.b);
    if (!(mid > worst.a && mid < worst.b)) {
      res.converged = false;
      return res;
    }
    heap.pop();
    auto left = gauss_kronrod::apply(g, worst.a, mid, n);
    auto right = gauss_kronrod::apply(g, mid, worst.b, n);
    for (std::size_t i = 0; i < n; ++i) {
      res.value[i] += left.kronrod[i] + right.kronrod[i] - worst.kronrod[i];
      res.error[i] += left.abs_error[i] + right.abs_error[i] - worst.abs_error[i];
    }
    heap.push(std::move(left));
    heap.push(std::move(right));
    ++res.subdivisions;
  }
  totals();
  res.converged = true;
  return res;
}

class AveragedField {
 public:
  explicit AveragedField(CaratheodorySystem system, QuadratureOptions options = {})
      : system_(std::make_shared<const CaratheodorySystem>(std::move(system))),
        options_(options),
        cache_(std::make_shared<Cache>()) {
    if (!(options_.abs_tol > 0.0) || !(options_.rel_tol > 0.0) || options_.max_subdivisions < 0) {
      throw std::invalid_argument("quadrature tolerances must be positive");
    }
  }

  [[nodiscard]] const CaratheodorySystem& system() const noexcept { return *system_; }
  [[nodiscard]] const QuadratureOptions& options() const noexcept { return options_; }
  [[nodiscard]] std::size_t dim() const noexcept { return system_->dim(); }

  /// f1(z) with per-component error estimates; eps is fixed at 0.
  [[nodiscard]] AverageResult average(std::span<const double> z) const {
    const auto& sys = *system_;
    if (z.size() != sys.dim()) {
      throw std::invalid_argument(
          fmt::format("point has dimension {}, system has {}", z.size(), sys.dim()));
    }
    if (!sys.domain().contains(z)) {
      throw std::out_of_range(
          fmt::format("point ({}) outside domain {}", fmt::join(z, ", "), sys.domain().to_string()));
    }
    std::vector<double> key(z.begin(), z.end());
    {
      std::lock_guard lock(cache_->mutex);
      if (auto it = cache_->entries.find(key); it != cache_->entries.end()) return it->second;
    }
    auto integrand = [&](double t, std::span<double> out) { sys.eval_raw(t, key, 0.0, out); };
    const double T = sys.period();
    AverageResult r = integrate_adaptive(integrand, sys.dim(), 0.0, T, sys.t_breaks(), options_);
    for (auto& v : r.value) v /= T;
    for (auto& e : r.error) e /= T;
    {
      std::lock_guard lock(cache_->mutex);
      cache_->entries.emplace(std::move(key), r);
    }
    return r;
  }

  [[nodiscard]] std::vector<double> operator()(std::span<const double> z) const { return average(z).value; }

  /// Scalar convenience for one-dimensional systems.
  [[nodiscard]] double operator()(double r) const {
    const double z[1] = {r};
    return average(z).value[0];
  }

  /// Results in input order. A point outside the domain is rejected with its index.
  [[nodiscard]] std::vector<AverageResult> average_on_grid(const std::vector<std::vector<double>>& grid,
                                                           unsigned threads = 1) const {
    for (std::size_t i = 0; i < grid.size(); ++i) {
      if (grid[i].size() != dim() || !system_->domain().contains(grid[i])) {
        throw std::out_of_range(fmt::format("grid point {} ({}) outside domain {}", i,
                                            fmt::join(grid[i], ", "), system_->domain().to_string()));
      }
    }
    std::vector<AverageResult> out(grid.size());
    parallel_for(grid.size(), threads, [&](std::size_t i) { out[i] = average(grid[i]); });
    return out;
  }

 private:
  struct Cache {
    std::mutex mutex;
    std::map<std::vector<double>, AverageResult> entries;
  };

  std::shared_ptr<const CaratheodorySystem> system_;
  QuadratureOptions options_;
  std::shared_ptr<Cache> cache_;
};

}  // namespace cavg
