#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <numbers>
#include <random>

#include "cavg/system.hpp"

using namespace cavg;
using Catch::Matchers::ContainsSubstring;
using Catch::Matchers::WithinAbs;

namespace {

constexpr double pi = std::numbers::pi;

double f_at(const CaratheodorySystem& sys, double t, double x, double eps) {
  const double v[1] = {x};
  return sys.eval_rhs(t, v, eps)[0];
}

}  // namespace

TEST_CASE("zero system evaluates to zero") {
  const auto sys = builtin("zero");
  CHECK(sys.period() == 2.0 * pi);
  CHECK(sys.dim() == 1);
  CHECK(f_at(sys, 0.3, 1.7, 0.1) == 0.0);
  CHECK(f_at(sys, -4.0, -10.0, 0.0) == 0.0);
}

TEST_CASE("reduced example2 at theta = pi/2, r = sqrt 2") {
  const auto sys = builtin("example2");
  CHECK(f_at(sys, pi / 2, std::sqrt(2.0), 0.0) == Catch::Approx(-1.0).epsilon(1e-15));
}

TEST_CASE("evaluation is T-periodic in t") {
  const auto sys = builtin("example2");
  const double T = sys.period();
  CHECK(f_at(sys, T + 0.5, 1.2, 0.05) == Catch::Approx(f_at(sys, 0.5, 1.2, 0.05)).epsilon(1e-14));
  // On dyadic sample times t + T rounds back to t exactly, so the values match bitwise.
  for (int k = 1; k < 64; ++k) {
    const double t = k / 16.0;
    if (t >= T) break;
    for (double r : {0.6, 0.95, 1.2, 1.45}) {
      CHECK(f_at(sys, t + T, r, 0.03) == f_at(sys, t, r, 0.03));
    }
  }
  CHECK(sys.reduce_time(-0.5) == Catch::Approx(T - 0.5));
  CHECK(sys.reduce_time(T) == 0.0);
}

TEST_CASE("builtin metadata") {
  const auto e2 = builtin("example2");
  CHECK(e2.period() == 2.0 * pi);
  CHECK(e2.domain().lo[0] == 0.5);
  CHECK(e2.domain().hi[0] == 1.5);
  REQUIRE(e2.t_breaks().size() == 2);
  CHECK(e2.t_breaks()[0] == 0.0);
  CHECK(e2.t_breaks()[1] == pi);

  const auto e1 = builtin("example1");
  CHECK(e1.domain().lo[0] == 0.5);
  CHECK(e1.domain().hi[0] == 2.5);
  REQUIRE(e1.t_breaks().size() == 2);
  CHECK(e1.t_breaks()[0] == 0.0);
  CHECK(e1.t_breaks()[1] == pi);

  const auto lin = builtin("linear_test");
  CHECK(lin.dim() == 2);

  CHECK_THROWS_WITH(builtin("example3"), ContainsSubstring("unknown builtin 'example3'"));
}

TEST_CASE("radial switching surfaces are derived from sign and cbrt arguments") {
  for (const char* name : {"example1", "example2"}) {
    const auto sys = builtin(name);
    REQUIRE(sys.x_switch().size() == 1);
    const double at_one[1] = {1.0};
    const double off[1] = {1.3};
    CHECK(sys.x_switch()[0](at_one) == 0.0);
    CHECK(sys.x_switch()[0](off) == Catch::Approx(0.3));
  }
}

TEST_CASE("eps_max keeps the reduced denominator away from zero") {
  const auto e1 = builtin("example1");
  const auto e2 = builtin("example2");
  CHECK(e1.eps_max() > 0.05);
  CHECK(e1.eps_max() < 0.2);
  CHECK(e2.eps_max() >= 0.1);
  // Denominator r - eps g~ cos(theta) >= r/2 on a fine grid at eps_max.
  for (const auto* sys : {&e1, &e2}) {
    const bool first = sys == &e1;
    const double lo = sys->domain().lo[0], hi = sys->domain().hi[0];
    for (int i = 0; i <= 100; ++i) {
      const double r = lo + (hi - lo) * i / 100.0;
      const double r2 = r * r - 1.0;
      const double mag = first ? std::max(0.0, r2 * (r * r - 4.0)) : std::abs(std::cbrt(r2));
      CHECK(r - sys->eps_max() * mag >= 0.5 * r - 1e-12);
    }
  }
}

TEST_CASE("polar reduction of g = 0 is the zero system") {
  for (auto [r0, r1] : {std::pair{0.5, 1.5}, std::pair{0.1, 7.0}, std::pair{2.0, 3.0}}) {
    const auto sys = polar_reduce(SecondOrderSystem{"quiet", "0", std::nullopt, r0, r1, 0.1});
    CHECK(sys.t_breaks().empty());
    CHECK(sys.x_switch().empty());
    CHECK(sys.eps_max() == 0.1);
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int k = 0; k < 50; ++k) {
      CHECK(f_at(sys, 2 * pi * u(rng), r0 + (r1 - r0) * u(rng), 0.1 * u(rng)) == 0.0);
    }
  }
}

TEST_CASE("reduced example2 matches the direct polar formula") {
  const auto sys = builtin("example2");
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> theta(0.0, 2 * pi), radius(0.5, 1.5);
  for (int k = 0; k < 200; ++k) {
    const double th = theta(rng);
    const double r = radius(rng);
    if (std::sin(th) == 0.0) continue;
    const double want = -(std::sin(th) > 0 ? 1.0 : -1.0) * std::cbrt(r * r - 1.0) * std::sin(th);
    CHECK_THAT(f_at(sys, th, r, 0.0), WithinAbs(want, 1e-15));
  }
}

TEST_CASE("reduced example1 matches the direct polar formula") {
  const auto sys = builtin("example1");
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> theta(0.0, 2 * pi), radius(0.5, 2.5);
  for (int k = 0; k < 200; ++k) {
    const double th = theta(rng);
    const double r = radius(rng);
    const double q = r * r - 1.0;
    const double s = q * std::sin(th);
    const double sg = s > 0 ? 1.0 : (s < 0 ? -1.0 : 0.0);
    const double want = -sg * std::max(0.0, q * (r * r - 4.0)) * std::sin(th);
    CHECK_THAT(f_at(sys, th, r, 0.0), WithinAbs(want, 1e-12 * std::max(1.0, std::abs(want))));
  }
}

TEST_CASE("composing g with polar coordinates agrees with the explicit polar form") {
  auto def = std::get<SecondOrderSystem>(builtin_definition("example2"));
  def.g_polar.reset();
  const auto composed = polar_reduce(def);
  const auto exact = builtin("example2");
  CHECK(composed.t_breaks() == exact.t_breaks());
  std::mt19937_64 rng(13);
  std::uniform_real_distribution<double> theta(0.0, 2 * pi), radius(0.5, 1.5), e(0.0, 0.1);
  for (int k = 0; k < 200; ++k) {
    const double th = theta(rng), r = radius(rng), eps = e(rng);
    CHECK_THAT(f_at(composed, th, r, eps), WithinAbs(f_at(exact, th, r, eps), 1e-5));
  }
}

TEST_CASE("reduced field at positive eps") {
  const auto sys = builtin("example2");
  const double th = 0.7, r = 1.3, eps = 0.05;
  const double gt = std::cbrt(r * r - 1.0);
  const double want = -r * gt * std::sin(th) / (r - eps * gt * std::cos(th));
  CHECK(f_at(sys, th, r, eps) == Catch::Approx(want).epsilon(1e-14));
}

TEST_CASE("first-order systems from expressions") {
  FirstOrderDefinition def{"pair", {"x2", "-x1 + eps*sin(t)"}, 2 * pi, 0.5, Box{{-1, -1}, {1, 1}}, {}, {}};
  const auto sys = build_first_order(def);
  const double x[2] = {0.25, -0.5};
  const auto v = sys.eval_rhs(pi / 2, x, 0.5);
  CHECK(v[0] == -0.5);
  CHECK(v[1] == Catch::Approx(-0.25 + 0.5));

  FirstOrderDefinition scalar{"s", {"x*t"}, 1.0, 1.0, Box::interval(0, 2), {0.5}, {"x - 1"}};
  const auto s = build_first_order(scalar);
  CHECK(f_at(s, 0.25, 2.0, 0.0) == 0.5);
  REQUIRE(s.x_switch().size() == 1);
  const double two[1] = {2.0};
  CHECK(s.x_switch()[0](two) == 1.0);
}

TEST_CASE("eval_rhs rejects bad inputs") {
  const auto sys = builtin("example2");
  const double out[1] = {1.6};
  const double in[1] = {1.0};
  const double pair[2] = {1.0, 1.0};
  CHECK_THROWS_AS(sys.eval_rhs(0.1, out, 0.0), SystemError);
  CHECK_THROWS_AS(sys.eval_rhs(0.1, pair, 0.0), SystemError);
  CHECK_THROWS_AS(sys.eval_rhs(0.1, in, -0.01), SystemError);
  CHECK_THROWS_AS(sys.eval_rhs(0.1, in, 1.0), SystemError);
}

TEST_CASE("invalid system definitions are rejected") {
  auto make = [](FirstOrderDefinition d) { return build_first_order(d); };
  const Box unit = Box::interval(0, 1);
  CHECK_THROWS_AS(make({"p", {"1"}, 0.0, 1.0, unit, {}, {}}), SystemError);
  CHECK_THROWS_AS(make({"e", {"1"}, 1.0, 0.0, unit, {}, {}}), SystemError);
  CHECK_THROWS_AS(make({"d", {"1"}, 1.0, 1.0, Box::interval(1, 1), {}, {}}), SystemError);
  CHECK_THROWS_AS(make({"n", {"1", "1"}, 1.0, 1.0, unit, {}, {}}), SystemError);
  CHECK_THROWS_AS(make({"b", {"1"}, 1.0, 1.0, unit, {0.5, 0.25}, {}}), SystemError);
  CHECK_THROWS_AS(make({"b", {"1"}, 1.0, 1.0, unit, {1.0}, {}}), SystemError);
  CHECK_THROWS_AS(make({"v", {"y"}, 1.0, 1.0, unit, {}, {}}), ParseError);
  CHECK_THROWS_AS(make({"z", {}, 1.0, 1.0, unit, {}, {}}), SystemError);
  CHECK_THROWS_AS(polar_reduce(SecondOrderSystem{"a", "0", std::nullopt, 1.0, 0.5, 0.1}), SystemError);
  CHECK_THROWS_AS(polar_reduce(SecondOrderSystem{"a", "0", std::nullopt, 0.0, 0.5, 0.1}), SystemError);
}

TEST_CASE("finiteness probe catches fields that blow up") {
  const Box box = Box::interval(-1, 1);
  CHECK_THROWS_WITH(build_first_order({"log", {"log(x)"}, 1.0, 1.0, box, {}, {}}),
                    ContainsSubstring("right-hand side fails"));
  CHECK_THROWS_WITH(build_first_order({"exp", {"exp(1000*x)"}, 1.0, 1.0, box, {}, {}}),
                    ContainsSubstring("not finite"));
  CHECK_NOTHROW(build_first_order({"ok", {"sign(x)*sqrt(abs(x))"}, 1.0, 1.0, box, {}, {}}));
}
