#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <complex>
#include <numbers>
#include <random>

#include "cavg/degree.hpp"
#include "cavg/quadrature.hpp"

using namespace cavg;
using Catch::Matchers::ContainsSubstring;

namespace {

constexpr double pi = std::numbers::pi;

VectorField scalar_field(std::function<double(double)> f) {
  return [f](std::span<const double> z) { return std::vector<double>{f(z[0])}; };
}

VectorField averaged(const char* name) {
  auto field = std::make_shared<AveragedField>(builtin(name));
  return [field](std::span<const double> z) { return (*field)(z); };
}

ScalarField scalar(const VectorField& F) {
  return [F](double x) { return F(std::span<const double>(&x, 1))[0]; };
}

// P.1: a nonzero degree implies a zero in V; found here by a dense scan for a
// sign change refined by bisection.
bool has_zero_1d(const ScalarField& f, double a, double b) {
  const int n = 2000;
  double xa = a, fa = f(a);
  for (int i = 1; i <= n; ++i) {
    const double xb = a + (b - a) * i / n;
    const double fb = f(xb);
    if (std::abs(fa) < 1e-6) return true;
    if (fa * fb < 0) {
      double lo = xa, hi = xb, flo = fa;
      for (int k = 0; k < 200; ++k) {
        const double mid = 0.5 * (lo + hi);
        const double fm = f(mid);
        if (std::abs(fm) < 1e-6) return true;
        if ((fm < 0) == (flo < 0)) {
          lo = mid;
          flo = fm;
        } else {
          hi = mid;
        }
      }
    }
    xa = xb;
    fa = fb;
  }
  return std::abs(fa) < 1e-6;
}

// Brute-force winding number by dense uniform sampling of the box boundary.
int brute_winding(const VectorField& F, const Box& V, int n) {
  const auto curve = box_contour(V);
  double total = 0.0;
  auto angle = [&](double s) {
    const auto p = curve(s);
    const auto v = F(std::span<const double>(p.data(), 2));
    return std::atan2(v[1], v[0]);
  };
  double prev = angle(0.0);
  for (int i = 1; i <= n; ++i) {
    const double cur = angle(static_cast<double>(i % n) / n);
    double d = cur - prev;
    while (d > pi) d -= 2 * pi;
    while (d < -pi) d += 2 * pi;
    total += d;
    prev = cur;
  }
  return static_cast<int>(std::lround(total / (2 * pi)));
}

}  // namespace

TEST_CASE("interval rule on the oscillator examples") {
  const auto f2 = scalar(averaged("example2"));
  const auto d2 = degree_interval(f2, 0.5, 1.5);
  CHECK(d2.value == -1);
  CHECK(d2.method == DegreeMethod::interval_sign);
  CHECK(d2.boundary_margin > 0.1);
  CHECK(has_zero_1d(f2, 0.5, 1.5));

  const auto f1 = scalar(averaged("example1"));
  const auto d1 = degree_interval(f1, 0.9, 2.1);
  CHECK(d1.value == -1);
  CHECK(d1.boundary_margin > 1e-3);
  CHECK(has_zero_1d(f1, 0.9, 2.1));

  CHECK(degree_interval([](double x) { return x; }, -1.0, 1.0).value == 1);
}

TEST_CASE("interval rule refuses inapplicable input") {
  auto id = [](double x) { return x; };
  try {
    (void)degree_interval(id, 0.0, 1.0);
    FAIL("expected a boundary-zero rejection");
  } catch (const DegreeError& e) {
    CHECK(e.kind() == DegreeError::Kind::boundary_zero);
  }
  try {
    (void)degree_interval([](double x) { return x * x + 1.0; }, -1.0, 1.0);
    FAIL("expected an inapplicable rejection");
  } catch (const DegreeError& e) {
    CHECK(e.kind() == DegreeError::Kind::inapplicable);
  }
  CHECK_THROWS_AS(degree_interval(id, 1.0, -1.0), DegreeError);
  CHECK_THROWS_AS(degree_interval([](double) { return 0.0; }, 0.0, 1.0), DegreeError);
}

TEST_CASE("regular zero") {
  const auto g1 = scalar_field([](double r) { return 1.5 - r; });
  const double z15[1] = {1.5};
  const auto d = degree_regular_zero(g1, z15, Box::interval(0.9, 2.1));
  CHECK(d.value == -1);
  CHECK(d.method == DegreeMethod::regular_zero);
  CHECK(d.diagnostics.step == Catch::Approx(1.5e-6));
  REQUIRE(d.diagnostics.jacobian.size() == 1);
  CHECK(d.diagnostics.jacobian[0] == Catch::Approx(-1.0));

  const Box square{{-1, -1}, {1, 1}};
  const double origin[2] = {0.0, 0.0};
  VectorField id = [](std::span<const double> z) { return std::vector<double>{z[0], z[1]}; };
  VectorField flip = [](std::span<const double> z) { return std::vector<double>{z[0], -z[1]}; };
  CHECK(degree_regular_zero(id, origin, square).value == 1);
  CHECK(degree_regular_zero(flip, origin, square).value == -1);
  CHECK(degree_regular_zero(flip, origin, square).diagnostics.determinant == Catch::Approx(-1.0));
}

TEST_CASE("regular zero refuses the non-differentiable zero of example2") {
  const auto F = averaged("example2");
  const double one[1] = {1.0};
  try {
    (void)degree_regular_zero(F, one, Box::interval(0.5, 1.5));
    FAIL("expected inapplicable");
  } catch (const DegreeError& e) {
    CHECK(e.kind() == DegreeError::Kind::inapplicable);
    CHECK_THAT(e.what(), ContainsSubstring("inapplicable"));
  }
}

TEST_CASE("regular zero refuses singular and non-zero points") {
  const Box box = Box::interval(-1, 1);
  const double origin[1] = {0.0};
  const double half[1] = {0.5};
  auto cube = scalar_field([](double x) { return x * x * x; });
  CHECK_THROWS_AS(degree_regular_zero(cube, origin, box), DegreeError);
  auto shifted = scalar_field([](double x) { return x - 0.25; });
  CHECK_THROWS_AS(degree_regular_zero(shifted, half, box), DegreeError);
  const double outside[1] = {2.0};
  CHECK_THROWS_AS(degree_regular_zero(scalar_field([](double x) { return x - 2.0; }), outside, box), DegreeError);
}

TEST_CASE("winding number") {
  const Box unit{{-1, -1}, {1, 1}};
  VectorField square = [](std::span<const double> z) {
    const std::complex<double> w = std::complex<double>(z[0], z[1]) * std::complex<double>(z[0], z[1]);
    return std::vector<double>{w.real(), w.imag()};
  };
  const auto d = degree_winding(square, unit);
  CHECK(d.value == 2);
  CHECK(d.value == brute_winding(square, unit, 20000));
  CHECK(d.diagnostics.winding_residual < 0.1);

  VectorField id = [](std::span<const double> z) { return std::vector<double>{z[0], z[1]}; };
  CHECK(degree_winding(id, unit).value == 1);

  VectorField constant = [](std::span<const double>) { return std::vector<double>{1.0, 0.0}; };
  CHECK(degree_winding(constant, unit).value == 0);

  VectorField conj_cube = [](std::span<const double> z) {
    const std::complex<double> c(z[0], -z[1]);
    const auto w = c * c * c;
    return std::vector<double>{w.real(), w.imag()};
  };
  CHECK(degree_winding(conj_cube, unit).value == -3);
  CHECK(brute_winding(conj_cube, unit, 20000) == -3);

  // Zero on the boundary.
  VectorField shifted = [](std::span<const double> z) { return std::vector<double>{z[0] - 1.0, z[1]}; };
  CHECK_THROWS_AS(degree_winding(shifted, unit), DegreeError);

  CHECK_THROWS_AS(degree_winding(id, Box::interval(0, 1)), DegreeError);
}

TEST_CASE("winding agrees with brute force on random quadratic maps") {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const Box box{{-1.2, -0.9}, {1.1, 1.3}};
  int checked = 0;
  for (int k = 0; k < 30; ++k) {
    double c[12];
    for (double& v : c) v = u(rng);
    VectorField F = [c](std::span<const double> z) {
      const double x = z[0], y = z[1];
      return std::vector<double>{c[0] + c[1] * x + c[2] * y + c[3] * x * x + c[4] * x * y + c[5] * y * y,
                                 c[6] + c[7] * x + c[8] * y + c[9] * x * x + c[10] * x * y + c[11] * y * y};
    };
    if (boundary_margin(F, box, 4096) < 1e-3) continue;
    CHECK(degree_winding(F, box).value == brute_winding(F, box, 40000));
    ++checked;
  }
  CHECK(checked > 20);
}

TEST_CASE("method agreement at regular zeros") {
  std::mt19937_64 rng(31);
  std::uniform_real_distribution<double> u(-0.8, 0.8);
  for (int k = 0; k < 20; ++k) {
    const double r = u(rng);
    const double s = u(rng) > 0 ? 1.0 : -1.0;
    auto f = [r, s](double x) { return s * (x - r) * (1.0 + 0.3 * std::sin(x)); };
    const double z[1] = {r};
    CHECK(degree_interval(f, -1.0, 1.0).value ==
          degree_regular_zero(scalar_field(f), z, Box::interval(-1.0, 1.0)).value);
  }
  const Box box{{-1, -1}, {1, 1}};
  for (int k = 0; k < 10; ++k) {
    const double a = u(rng), b = u(rng), c = u(rng), d = u(rng);
    if (std::abs(a * d - b * c) < 0.05) continue;
    VectorField F = [=](std::span<const double> z) {
      return std::vector<double>{a * z[0] + b * z[1] + 0.1 * z[0] * z[0], c * z[0] + d * z[1]};
    };
    const double origin[2] = {0.0, 0.0};
    if (boundary_margin(F, box, 4096) < 1e-3) continue;
    CHECK(degree_winding(F, box).value == degree_regular_zero(F, origin, box).value);
  }
}

TEST_CASE("additivity over isolating subintervals") {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 20; ++trial) {
    // Product of (x - r_i) with 1 to 5 well separated simple zeros in (0, 10).
    const int m = 1 + static_cast<int>(u(rng) * 5);
    std::vector<double> roots;
    for (int i = 0; i < m; ++i) roots.push_back(1.0 + 2.0 * i + 0.5 + (u(rng) - 0.5));
    const double lead = u(rng) < 0.5 ? -1.0 : 1.0;
    auto p = [roots, lead](double x) {
      double v = lead;
      for (double r : roots) v *= x - r;
      return v;
    };
    const double a = 0.25, b = 2.0 * m + 0.75;
    // The window may have f(a) f(b) > 0 (even zero count); the sum is then 0 and
    // the endpoint rule does not apply, so compare through the zero count parity.
    int sum = 0;
    for (std::size_t i = 0; i < roots.size(); ++i) {
      const double lo = 0.5 * ((i == 0 ? a : roots[i - 1]) + roots[i]);
      const double hi = 0.5 * (roots[i] + (i + 1 == roots.size() ? b : roots[i + 1]));
      sum += degree_interval(p, lo, hi).value;
    }
    if (p(a) * p(b) < 0) {
      CHECK(degree_interval(p, a, b).value == sum);
    } else {
      CHECK(sum == 0);
      CHECK_THROWS_AS(degree_interval(p, a, b), DegreeError);
    }
  }
}

TEST_CASE("homotopies of the oscillator examples") {
  const auto f2 = averaged("example2");
  const auto g2 = scalar_field([](double r) { return 1.0 - r; });
  const Box V2 = Box::interval(0.5, 1.5);
  const auto h2 = homotopy_nonvanishing(f2, g2, V2);
  CHECK(h2.passed);
  CHECK(h2.min_margin > 0.1);
  CHECK(degree_auto(f2, V2).value == degree_auto(g2, V2).value);

  const auto f1 = averaged("example1");
  const auto g1 = scalar_field([](double r) { return 1.5 - r; });
  const Box V1 = Box::interval(0.9, 2.1);
  const auto h1 = homotopy_nonvanishing(f1, g1, V1);
  CHECK(h1.passed);
  CHECK(degree_auto(f1, V1).value == degree_auto(g1, V1).value);
  const double z[1] = {1.5};
  CHECK(degree_regular_zero(g1, z, V1).value == -1);
}

TEST_CASE("homotopy self-check and forced failure") {
  const auto f = scalar_field([](double r) { return r - 1.0; });
  const Box V = Box::interval(0.0, 2.0);
  const auto self = homotopy_nonvanishing(f, f, V);
  CHECK(self.passed);
  CHECK(self.min_margin == 1.0);

  const auto g = scalar_field([](double r) { return 1.0 - r; });
  const auto bad = homotopy_nonvanishing(f, g, V);
  CHECK_FALSE(bad.passed);
  CHECK(bad.sigma_at_min == 0.5);
  CHECK(bad.min_margin == 0.0);

  CHECK_THROWS_AS(homotopy_nonvanishing(f, g, V, 1, 10), DegreeError);
}

TEST_CASE("excision") {
  const auto F = averaged("example2");
  const double one[1] = {1.0};
  const std::vector<double> mu{0.4, 0.2, 0.1, 0.05};
  const auto c = excision_check(F, Box::interval(0.5, 1.5), one, mu);
  CHECK(c.passed);
  CHECK(c.reference_degree == -1);
  CHECK(c.ball_degrees == std::vector<int>{-1, -1, -1, -1});

  const auto lin = scalar_field([](double r) { return r - 1.0; });
  const std::vector<double> mu2{0.3, 0.1};
  const auto c2 = excision_check(lin, Box::interval(0.5, 1.5), one, mu2);
  CHECK(c2.passed);
  CHECK(c2.ball_degrees == std::vector<int>{1, 1});

  VectorField id = [](std::span<const double> z) { return std::vector<double>{z[0], z[1]}; };
  const double origin[2] = {0.0, 0.0};
  const std::vector<double> mu3{0.9, 0.5, 1e-3};
  const auto c3 = excision_check(id, Box{{-1, -1}, {1, 1}}, origin, mu3);
  CHECK(c3.passed);
  CHECK(c3.ball_degrees == std::vector<int>{1, 1, 1});

  const std::vector<double> escape{0.6};
  CHECK_THROWS_WITH(excision_check(F, Box::interval(0.5, 1.5), one, escape), ContainsSubstring("escapes V"));
}

TEST_CASE("boundary margin and boundary sampling") {
  const Box square{{0, 0}, {2, 1}};
  const auto pts = box_boundary_points(square, 64);
  CHECK(pts.size() >= 64);
  for (const auto& p : pts) {
    const bool on_edge = p[0] == 0 || p[0] == 2 || p[1] == 0 || p[1] == 1;
    CHECK(on_edge);
  }
  const Box cube{{0, 0, 0}, {1, 1, 1}};
  for (const auto& p : box_boundary_points(cube, 200)) {
    bool on_face = false;
    for (int i = 0; i < 3; ++i) on_face = on_face || p[i] == 0 || p[i] == 1;
    CHECK(on_face);
  }
  VectorField id3 = [](std::span<const double> z) { return std::vector<double>(z.begin(), z.end()); };
  const Box centred{{-1, -1, -1}, {1, 1, 1}};
  CHECK(boundary_margin(id3, centred) == Catch::Approx(1.0));
  const double origin[3] = {0, 0, 0};
  CHECK(degree_auto(id3, centred, std::vector<double>(origin, origin + 3)).value == 1);
  CHECK_THROWS_AS(degree_auto(id3, centred), DegreeError);
}
