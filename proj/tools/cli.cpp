#include "cli.hpp"

#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <numbers>
#include <set>
#include <sstream>

#include <fmt/format.h>
#include <fmt/ostream.h>
#include <fmt/ranges.h>

#include "CLI11.hpp"
#include "cavg/degree.hpp"
#include "cavg/parallel.hpp"
#include "cavg/periodic.hpp"

namespace cavg::cli {

using json = nlohmann::ordered_json;

namespace {

// Stage failure that maps to exit code 1.
class HypothesisFailure : public std::runtime_error {
 public:
  HypothesisFailure(std::string stage, const std::string& what)
      : std::runtime_error(what), stage_(std::move(stage)) {}
  [[nodiscard]] const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

// Usage error raised after argument parsing; maps to exit code 2.
class UsageError : public std::runtime_error {
 public:
  UsageError(std::string stage, const std::string& what) : std::runtime_error(what), stage_(std::move(stage)) {}
  [[nodiscard]] const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

std::string num(double v) { return fmt::format("{:.17g}", v); }

// Typed access to a JSON object that remembers its path for error messages.
class Node {
 public:
  Node(const json& j, std::string path) : j_(j), path_(std::move(path)) {}

  void expect_object() const {
    if (!j_.is_object()) fail("expected an object");
  }
  void allow(std::initializer_list<const char*> keys) const {
    expect_object();
    std::set<std::string> ok(keys.begin(), keys.end());
    for (const auto& [k, v] : j_.items()) {
      if (!ok.contains(k)) throw ConfigError(fmt::format("{}.{}: unknown field", path_, k));
    }
  }
  [[nodiscard]] bool has(const char* key) const { return j_.contains(key) && !j_.at(key).is_null(); }
  [[nodiscard]] Node at(const char* key) const {
    if (!j_.contains(key)) throw ConfigError(fmt::format("{}.{}: required field missing", path_, key));
    return {j_.at(key), fmt::format("{}.{}", path_, key)};
  }
  [[nodiscard]] double number() const {
    if (!j_.is_number()) fail("expected a number");
    return j_.get<double>();
  }
  [[nodiscard]] double positive() const {
    const double v = number();
    if (!(v > 0.0) || !std::isfinite(v)) fail("must be positive");
    return v;
  }
  [[nodiscard]] int integer() const {
    if (!j_.is_number_integer()) fail("expected an integer");
    return j_.get<int>();
  }
  [[nodiscard]] std::string string() const {
    if (!j_.is_string()) fail("expected a string");
    return j_.get<std::string>();
  }
  [[nodiscard]] std::vector<double> numbers() const {
    if (!j_.is_array()) fail("expected an array of numbers");
    std::vector<double> v;
    for (std::size_t i = 0; i < j_.size(); ++i) v.push_back(Node(j_[i], fmt::format("{}[{}]", path_, i)).number());
    return v;
  }
  [[nodiscard]] std::vector<std::string> strings() const {
    if (!j_.is_array()) fail("expected an array of strings");
    std::vector<std::string> v;
    for (std::size_t i = 0; i < j_.size(); ++i) v.push_back(Node(j_[i], fmt::format("{}[{}]", path_, i)).string());
    return v;
  }
  [[nodiscard]] Box box() const {
    allow({"lo", "hi"});
    Box b{at("lo").numbers(), at("hi").numbers()};
    if (b.lo.size() != b.hi.size()) fail("lo and hi differ in length");
    if (!b.non_degenerate()) fail("needs lo < hi in every coordinate");
    return b;
  }
  [[noreturn]] void fail(const std::string& msg) const { throw ConfigError(fmt::format("{}: {}", path_, msg)); }

 private:
  const json& j_;
  std::string path_;
};

SystemDefinition parse_system(const Node& n, std::optional<std::string>& builtin) {
  n.allow({"builtin", "first_order", "second_order"});
  const int sources = int(n.has("builtin")) + int(n.has("first_order")) + int(n.has("second_order"));
  if (sources != 1) n.fail("exactly one of builtin, first_order, second_order is required");
  if (n.has("builtin")) {
    const auto name = n.at("builtin").string();
    try {
      auto def = builtin_definition(name);
      builtin = name;
      return def;
    } catch (const SystemError& e) {
      n.at("builtin").fail(e.what());
    }
  }
  if (n.has("first_order")) {
    const auto f = n.at("first_order");
    f.allow({"name", "rhs", "period", "eps_max", "domain", "t_breaks", "x_switch"});
    FirstOrderDefinition d;
    d.name = f.has("name") ? f.at("name").string() : "custom";
    d.rhs = f.at("rhs").strings();
    if (f.has("period")) d.period = f.at("period").positive();
    if (f.has("eps_max")) d.eps_max = f.at("eps_max").positive();
    d.domain = f.at("domain").box();
    if (f.has("t_breaks")) d.t_breaks = f.at("t_breaks").numbers();
    if (f.has("x_switch")) d.x_switch = f.at("x_switch").strings();
    return d;
  }
  const auto s = n.at("second_order");
  s.allow({"name", "g", "g_polar", "r0", "r1", "eps_max"});
  SecondOrderSystem d;
  d.name = s.has("name") ? s.at("name").string() : "custom";
  d.g = s.at("g").string();
  if (s.has("g_polar")) d.g_polar = s.at("g_polar").string();
  d.r0 = s.at("r0").positive();
  d.r1 = s.at("r1").positive();
  if (s.has("eps_max")) d.eps_max = s.at("eps_max").positive();
  return d;
}

json box_json(const Box& b) { return {{"lo", b.lo}, {"hi", b.hi}}; }

}  // namespace

RunConfig parse_config(const json& doc) {
  const Node root(doc, "config");
  root.allow({"system", "V", "z_star", "eps", "eps_grid", "tol", "integration_tol", "quadrature", "grid", "guess",
              "method", "threads", "out", "format"});
  RunConfig cfg;
  if (root.has("system")) cfg.system = parse_system(root.at("system"), cfg.builtin);
  if (root.has("V")) cfg.V = root.at("V").box();
  if (root.has("z_star")) cfg.z_star = root.at("z_star").numbers();
  if (root.has("eps")) cfg.eps = root.at("eps").number();
  if (root.has("eps_grid")) cfg.eps_grid = root.at("eps_grid").numbers();
  if (root.has("tol")) cfg.tol = root.at("tol").positive();
  if (root.has("integration_tol")) cfg.integration_tol = root.at("integration_tol").positive();
  if (root.has("quadrature")) {
    const auto q = root.at("quadrature");
    q.allow({"abs_tol", "rel_tol", "max_subdivisions"});
    if (q.has("abs_tol")) cfg.quadrature.abs_tol = q.at("abs_tol").positive();
    if (q.has("rel_tol")) cfg.quadrature.rel_tol = q.at("rel_tol").positive();
    if (q.has("max_subdivisions")) {
      cfg.quadrature.max_subdivisions = q.at("max_subdivisions").integer();
      if (cfg.quadrature.max_subdivisions < 0) q.at("max_subdivisions").fail("must be non-negative");
    }
  }
  if (root.has("grid")) {
    cfg.grid = root.at("grid").strings();
    for (std::size_t i = 0; i < cfg.grid.size(); ++i) {
      try {
        parse_grid_axis(cfg.grid[i]);
      } catch (const ConfigError& e) {
        throw ConfigError(fmt::format("config.grid[{}]: {}", i, e.what()));
      }
    }
  }
  if (root.has("guess")) cfg.guess = root.at("guess").numbers();
  if (root.has("method")) cfg.method = root.at("method").string();
  if (root.has("threads")) {
    const int t = root.at("threads").integer();
    if (t < 1) root.at("threads").fail("must be at least 1");
    cfg.threads = static_cast<unsigned>(t);
  }
  if (root.has("out")) cfg.out = root.at("out").string();
  if (root.has("format")) cfg.format = root.at("format").string();
  return cfg;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(fmt::format("cannot read config file '{}'", path));
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(fmt::format("{}: not valid JSON ({})", path, e.what()));
  }
  return parse_config(doc);
}

json system_to_json(const SystemDefinition& def) {
  return std::visit(
      [](const auto& d) -> json {
        if constexpr (std::is_same_v<std::decay_t<decltype(d)>, FirstOrderDefinition>) {
          return {{"first_order",
                   {{"name", d.name},
                    {"rhs", d.rhs},
                    {"period", d.period},
                    {"eps_max", d.eps_max},
                    {"domain", box_json(d.domain)},
                    {"t_breaks", d.t_breaks},
                    {"x_switch", d.x_switch}}}};
        } else {
          json s = {{"name", d.name}, {"g", d.g}, {"r0", d.r0}, {"r1", d.r1}, {"eps_max", d.eps_max}};
          if (d.g_polar) s["g_polar"] = *d.g_polar;
          return {{"second_order", s}};
        }
      },
      def);
}

json to_json(const RunConfig& cfg) {
  json j = json::object();
  if (cfg.system) j["system"] = system_to_json(*cfg.system);
  if (cfg.V) j["V"] = box_json(*cfg.V);
  if (cfg.z_star) j["z_star"] = *cfg.z_star;
  if (cfg.eps) j["eps"] = *cfg.eps;
  if (!cfg.eps_grid.empty()) j["eps_grid"] = cfg.eps_grid;
  if (cfg.tol) j["tol"] = *cfg.tol;
  if (cfg.integration_tol) j["integration_tol"] = *cfg.integration_tol;
  j["quadrature"] = {{"abs_tol", cfg.quadrature.abs_tol},
                     {"rel_tol", cfg.quadrature.rel_tol},
                     {"max_subdivisions", cfg.quadrature.max_subdivisions}};
  if (!cfg.grid.empty()) j["grid"] = cfg.grid;
  if (cfg.guess) j["guess"] = *cfg.guess;
  j["method"] = cfg.method;
  if (cfg.threads) j["threads"] = *cfg.threads;
  if (cfg.out) j["out"] = *cfg.out;
  j["format"] = cfg.format;
  return j;
}

std::vector<double> parse_grid_axis(const std::string& axis) {
  std::vector<std::string> parts;
  std::stringstream ss(axis);
  for (std::string p; std::getline(ss, p, ':');) parts.push_back(p);
  if (parts.size() != 3) throw ConfigError(fmt::format("grid '{}' must look like a:b:n", axis));
  double a = 0, b = 0;
  long n = 0;
  try {
    std::size_t used = 0;
    a = std::stod(parts[0], &used);
    if (used != parts[0].size()) throw std::invalid_argument("a");
    b = std::stod(parts[1], &used);
    if (used != parts[1].size()) throw std::invalid_argument("b");
    n = std::stol(parts[2], &used);
    if (used != parts[2].size()) throw std::invalid_argument("n");
  } catch (const std::logic_error&) {
    throw ConfigError(fmt::format("grid '{}' must look like a:b:n", axis));
  }
  if (n < 1 || !std::isfinite(a) || !std::isfinite(b)) throw ConfigError(fmt::format("grid '{}': need n >= 1", axis));
  if (n == 1) return {a};
  std::vector<double> v(static_cast<std::size_t>(n));
  for (long i = 0; i < n; ++i) v[static_cast<std::size_t>(i)] = a + (b - a) * static_cast<double>(i) / (n - 1);
  v.back() = b;
  return v;
}

namespace {

struct BuiltinDefaults {
  std::optional<Box> V;
  std::optional<std::vector<double>> z_star;
  std::optional<double> eps;
};

BuiltinDefaults builtin_defaults(const std::string& name) {
  if (name == "example1") return {Box::interval(0.9, 2.1), std::nullopt, 0.05};
  if (name == "example2") return {Box::interval(0.5, 1.5), std::vector<double>{1.0}, 0.05};
  if (name == "zero") return {Box::interval(0.0, 1.0), std::nullopt, 0.05};
  if (name == "linear_test") return {Box{{-1.0, -1.0}, {1.0, 1.0}}, std::vector<double>{0.0, 0.0}, 0.1};
  return {};
}

// Homotopy targets drawn next to f1 for the oscillator examples.
std::optional<std::string> homotopy_target(const std::string& name) {
  if (name == "example1") return "3/2 - r";
  if (name == "example2") return "1 - r";
  return std::nullopt;
}

double target_value(const std::string& name, double r) { return name == "example1" ? 1.5 - r : 1.0 - r; }

// Everything a subcommand needs after flags and config are merged.
struct Context {
  RunConfig cfg;
  std::optional<CaratheodorySystem> system;
  unsigned threads = 1;
  std::ostream* out = nullptr;
  std::ostream* err = nullptr;

  const CaratheodorySystem& sys() const { return *system; }

  Box V() const {
    if (!cfg.V) throw UsageError("config", "no window V given (use --V lo hi ...)");
    return *cfg.V;
  }

  PeriodicOptions periodic() const {
    PeriodicOptions p;
    if (cfg.tol) p.tol = *cfg.tol;
    if (cfg.integration_tol) p.integration_tol = *cfg.integration_tol;
    return p;
  }

  double eps() const {
    if (!cfg.eps) throw UsageError("config", "no eps given (use --eps)");
    return *cfg.eps;
  }

  std::vector<double> eps_grid() const {
    if (!cfg.eps_grid.empty()) return cfg.eps_grid;
    const double e = eps();
    return {e, e / 2, e / 4, e / 8};
  }

  // Writes to --out when given, else to stdout.
  void emit(const std::string& text) const {
    if (cfg.out) {
      std::ofstream f(*cfg.out, std::ios::binary);
      if (!f) throw UsageError("output", fmt::format("cannot write '{}'", *cfg.out));
      f << text;
    } else {
      *out << text;
    }
  }
};

void write_file(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw UsageError("output", fmt::format("cannot write '{}'", path));
  f << text;
}

std::string columns(const std::string& prefix, std::size_t n) {
  std::string s;
  for (std::size_t i = 1; i <= n; ++i) s += fmt::format("{}{}_{}", i > 1 ? "," : "", prefix, i);
  return s;
}

std::string joined(std::span<const double> v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + num(v[i]);
  return s;
}

// Two-space indent and a trailing newline.
std::string dump(const json& j) { return j.dump(2) + "\n"; }

json degree_json(const DegreeResult& d) {
  json j = {{"value", d.value}, {"method", std::string(to_string(d.method))}, {"boundary_margin", d.boundary_margin}};
  if (d.method == DegreeMethod::regular_zero) {
    j["determinant"] = d.diagnostics.determinant;
    j["jacobian"] = d.diagnostics.jacobian;
    j["step"] = d.diagnostics.step;
  }
  if (d.method == DegreeMethod::winding_2d) {
    j["winding_total"] = d.diagnostics.winding_total;
    j["winding_residual"] = d.diagnostics.winding_residual;
    j["contour_samples"] = d.diagnostics.boundary_samples.size();
  }
  return j;
}

json stats_json(const StepStats& s) {
  return {{"min_step", s.min_step},         {"max_step", s.max_step},
          {"mean_step", s.mean_step},       {"accepted", s.accepted},
          {"rejected", s.rejected},         {"break_crossings", s.break_crossings},
          {"switch_events", s.switch_events}, {"sliding_steps", s.sliding_steps}};
}

json orbit_json(const PeriodicOrbit& o) {
  json j = {{"eps", o.eps},
            {"fixed_point", o.fixed_point},
            {"residual", o.residual},
            {"verified_residual", o.verified_residual},
            {"inside_V", o.inside_V},
            {"iterations", o.iterations},
            {"samples", o.trajectory.t.size()}};
  j["sup_dist"] = o.sup_dist ? json(*o.sup_dist) : json(nullptr);
  return j;
}

VectorField averaged(const AveragedField& field) {
  return [&field](std::span<const double> z) { return field(z); };
}

// ---- subcommands ----

int cmd_average(const Context& ctx) {
  const auto& sys = ctx.sys();
  const std::size_t n = sys.dim();
  std::vector<std::string> axes = ctx.cfg.grid;
  if (axes.empty()) {
    if (!ctx.cfg.V) throw UsageError("config", "average needs --grid a:b:n (one per axis) or --V");
    for (std::size_t i = 0; i < n; ++i) axes.push_back(fmt::format("{}:{}:101", num(ctx.cfg.V->lo[i]), num(ctx.cfg.V->hi[i])));
  }
  if (axes.size() != n) {
    throw UsageError("config", fmt::format("system has dimension {} but {} grid axes were given", n, axes.size()));
  }
  std::vector<std::vector<double>> axis_points;
  for (const auto& a : axes) axis_points.push_back(parse_grid_axis(a));
  std::vector<std::vector<double>> grid;
  std::vector<std::size_t> idx(n, 0);
  for (;;) {
    std::vector<double> p(n);
    for (std::size_t i = 0; i < n; ++i) p[i] = axis_points[i][idx[i]];
    grid.push_back(std::move(p));
    std::size_t k = 0;
    while (k < n && ++idx[k] == axis_points[k].size()) idx[k++] = 0;
    if (k == n) break;
  }

  const AveragedField field(sys, ctx.cfg.quadrature);
  std::vector<AverageResult> values;
  try {
    values = field.average_on_grid(grid, ctx.threads);
  } catch (const std::out_of_range& e) {
    throw UsageError("averaged_field", e.what());
  }
  bool converged = true;
  std::string text;
  if (ctx.cfg.format == "json") {
    json rows = json::array();
    for (std::size_t k = 0; k < grid.size(); ++k) {
      rows.push_back({{"z", grid[k]}, {"f1", values[k].value}, {"error", values[k].error}});
      converged = converged && values[k].converged;
    }
    text = dump(rows);
  } else {
    text = fmt::format("{},{},{}\n", columns("z", n), columns("f1", n), columns("err", n));
    for (std::size_t k = 0; k < grid.size(); ++k) {
      text += fmt::format("{},{},{}\n", joined(grid[k]), joined(values[k].value), joined(values[k].error));
      converged = converged && values[k].converged;
    }
  }
  ctx.emit(text);
  if (!converged) {
    *ctx.err << "warning [averaged_field]: quadrature did not reach tolerance at some grid points\n";
  }
  return 0;
}

int cmd_degree(const Context& ctx) {
  const auto& sys = ctx.sys();
  const Box V = ctx.V();
  if (V.dim() != sys.dim() || !sys.domain().contains(V)) {
    throw UsageError("config", fmt::format("V {} must be a box inside the domain {}", V.to_string(),
                                           sys.domain().to_string()));
  }
  const AveragedField field(sys, ctx.cfg.quadrature);
  const auto F = averaged(field);
  const auto& m = ctx.cfg.method;
  DegreeResult d;
  try {
    if (m == "auto") {
      d = degree_auto(F, V, ctx.cfg.z_star);
    } else if (m == "interval_sign") {
      if (V.dim() != 1) throw UsageError("degree", "interval_sign needs a one-dimensional system");
      d = degree_interval([&](double r) { return field(r); }, V.lo[0], V.hi[0]);
    } else if (m == "regular_zero") {
      if (!ctx.cfg.z_star) throw UsageError("degree", "regular_zero needs --z-star");
      d = degree_regular_zero(F, *ctx.cfg.z_star, V);
    } else if (m == "winding_2d") {
      d = degree_winding(F, V);
    } else {
      throw UsageError("config", fmt::format("unknown method '{}'", m));
    }
  } catch (const DegreeError& e) {
    if (e.kind() == DegreeError::Kind::invalid_input) throw UsageError("degree", e.what());
    if (e.kind() == DegreeError::Kind::boundary_zero) {
      throw HypothesisFailure("degree", fmt::format("f1 vanishes on the boundary of V ({})", e.what()));
    }
    throw HypothesisFailure("degree", e.what());
  }
  ctx.emit(dump(degree_json(d)));
  return d.value == 0 ? 1 : 0;
}

int cmd_periodic(const Context& ctx) {
  const auto& sys = ctx.sys();
  const Box V = ctx.V();
  const double eps = ctx.eps();
  std::vector<double> guess = ctx.cfg.guess.value_or(ctx.cfg.z_star.value_or(V.center()));
  PeriodicOrbit o;
  try {
    o = find_periodic(sys, V, eps, guess, ctx.periodic(), ctx.cfg.z_star);
  } catch (const PeriodicError& e) {
    if (e.kind() == PeriodicError::Kind::invalid_input) throw UsageError("existence", e.what());
    throw HypothesisFailure("existence", e.what());
  }
  json summary = orbit_json(o);
  summary["stats"] = stats_json(o.trajectory.stats);
  if (ctx.cfg.out) {
    const auto& tr = o.trajectory;
    std::string text;
    if (ctx.cfg.format == "json") {
      text = dump({{"t", tr.t}, {"x", tr.x}});
    } else {
      text = fmt::format("t,{}\n", columns("x", sys.dim()));
      for (std::size_t k = 0; k < tr.t.size(); ++k) text += fmt::format("{},{}\n", num(tr.t[k]), joined(tr.x[k]));
    }
    ctx.emit(text);
    write_file(*ctx.cfg.out + ".stats.json", dump(stats_json(tr.stats)));
  }
  *ctx.out << dump(summary);
  return 0;
}

int cmd_sweep(const Context& ctx) {
  const auto& sys = ctx.sys();
  const Box V = ctx.V();
  if (!ctx.cfg.z_star) throw UsageError("config", "sweep needs --z-star");
  SweepReport rep;
  try {
    rep = sweep(sys, V, *ctx.cfg.z_star, ctx.eps_grid(), ctx.periodic(), ctx.cfg.guess);
  } catch (const PeriodicError& e) {
    throw UsageError("convergence", e.what());
  }
  const std::size_t n = sys.dim();
  std::string text;
  if (ctx.cfg.format == "json") {
    json rows = json::array();
    for (const auto& e : rep.entries) {
      json row = {{"eps", e.eps}};
      if (e.orbit) {
        row["fixed_point"] = e.orbit->fixed_point;
        row["residual"] = e.orbit->residual;
        row["sup_dist"] = *e.orbit->sup_dist;
      } else {
        row["failure"] = e.failure;
      }
      rows.push_back(row);
    }
    text = dump({{"entries", rows},
                 {"monotone_tail", rep.monotone_tail},
                 {"fit_exponent", rep.fit_exponent ? json(*rep.fit_exponent) : json(nullptr)}});
  } else {
    text = fmt::format("eps,{},residual,sup_dist\n", columns("fixed_point", n));
    for (const auto& e : rep.entries) {
      if (e.orbit) {
        text += fmt::format("{},{},{},{}\n", num(e.eps), joined(e.orbit->fixed_point), num(e.orbit->residual),
                            num(*e.orbit->sup_dist));
      } else {
        std::vector<double> nan(n, std::numeric_limits<double>::quiet_NaN());
        text += fmt::format("{},{},nan,nan\n", num(e.eps), joined(nan));
      }
    }
  }
  ctx.emit(text);
  for (const auto& e : rep.entries) {
    if (!e.orbit) *ctx.err << fmt::format("error [existence]: eps = {}: {}\n", num(e.eps), e.failure);
  }
  *ctx.err << fmt::format("monotone_tail={} fit_exponent={}\n", rep.monotone_tail,
                          rep.fit_exponent ? num(*rep.fit_exponent) : std::string("none"));
  return rep.all_found() ? 0 : 1;
}

json certify_json(const CertifyReport& r) {
  json j;
  j["system"] = r.system;
  j["V"] = box_json(r.V);
  j["z_star"] = r.z_star ? json(*r.z_star) : json(nullptr);
  j["eps"] = r.eps;
  j["hypotheses"] = {{"boundary_margin", r.boundary_margin},
                     {"boundary_nonvanishing", r.boundary_margin > kBoundaryMarginThreshold},
                     {"degree", r.degree ? degree_json(*r.degree) : json(nullptr)}};
  if (r.excision) {
    j["hypotheses"]["excision"] = {{"passed", r.excision->passed},
                                   {"radii", r.excision->radii},
                                   {"ball_degrees", r.excision->ball_degrees}};
  }
  json concl;
  concl["orbit"] = r.orbit ? orbit_json(*r.orbit) : json(nullptr);
  concl["mode"] = r.halted_stage ? "halted"
                  : r.convergence == ConvergenceStatus::verified ? "existence_and_convergence"
                                                                 : "existence_only";
  concl["convergence"] = std::string(to_string(r.convergence));
  concl["convergence_reason"] = r.convergence_reason;
  concl["zero_samples"] = r.zero_samples;
  if (r.sweep) {
    json rows = json::array();
    for (std::size_t i = 0; i < r.sweep->entries.size(); ++i) {
      const auto& e = r.sweep->entries[i];
      json row = {{"eps", e.eps}, {"sup_dist", r.sweep->sup_distances[i]}};
      if (e.orbit) {
        row["fixed_point"] = e.orbit->fixed_point;
        row["residual"] = e.orbit->residual;
        row["inside_V"] = e.orbit->inside_V;
      } else {
        row["failure"] = e.failure;
      }
      rows.push_back(row);
    }
    concl["sweep"] = {{"entries", rows},
                      {"monotone_tail", r.sweep->monotone_tail},
                      {"fit_exponent", r.sweep->fit_exponent ? json(*r.sweep->fit_exponent) : json(nullptr)}};
  }
  j["conclusions"] = concl;
  j["halted_stage"] = r.halted_stage ? json(*r.halted_stage) : json(nullptr);
  j["message"] = r.message;
  return j;
}

int cmd_certify(const Context& ctx) {
  CertifyOptions opt;
  opt.eps = ctx.eps();
  opt.eps_grid = ctx.cfg.eps_grid;
  opt.quadrature = ctx.cfg.quadrature;
  opt.periodic = ctx.periodic();
  const auto rep = certify(ctx.sys(), ctx.V(), ctx.cfg.z_star, opt, ctx.threads);
  ctx.emit(dump(certify_json(rep)));
  if (rep.halted_stage) {
    *ctx.err << fmt::format("error [{}]: {}\n", *rep.halted_stage, rep.message);
    return 1;
  }
  return 0;
}

int cmd_example(const Context& ctx, const std::string& name, bool dump_config) {
  if (dump_config) {
    RunConfig c;
    c.system = builtin_definition(name);
    const auto d = builtin_defaults(name);
    c.V = d.V;
    c.z_star = d.z_star;
    c.eps = d.eps;
    ctx.emit(dump(to_json(c)));
    return 0;
  }
  const auto target = homotopy_target(name);
  if (!target) throw UsageError("config", fmt::format("no figure data for '{}' (use example1 or example2)", name));
  const auto& sys = ctx.sys();
  std::vector<double> rs;
  if (!ctx.cfg.grid.empty()) {
    rs = parse_grid_axis(ctx.cfg.grid[0]);
  } else {
    rs = parse_grid_axis(fmt::format("{}:{}:201", num(sys.domain().lo[0]), num(sys.domain().hi[0])));
  }
  const AveragedField field(sys, ctx.cfg.quadrature);
  std::vector<std::vector<double>> grid;
  for (double r : rs) grid.push_back({r});
  std::vector<AverageResult> values;
  try {
    values = field.average_on_grid(grid, ctx.threads);
  } catch (const std::out_of_range& e) {
    throw UsageError("averaged_field", e.what());
  }
  const double sigmas[] = {0.25, 0.5, 0.75};
  std::string text = "r,f1,g1,g_sigma_0.25,g_sigma_0.5,g_sigma_0.75\n";
  for (std::size_t k = 0; k < rs.size(); ++k) {
    const double f = values[k].value[0];
    const double g = target_value(name, rs[k]);
    text += fmt::format("{},{},{}", num(rs[k]), num(f), num(g));
    for (double s : sigmas) text += "," + num((1.0 - s) * f + s * g);
    text += "\n";
  }
  ctx.emit(text);
  *ctx.err << fmt::format("homotopy target g1(r) = {}\n", *target);
  return 0;
}

struct Flags {
  std::string config;
  std::string builtin;
  std::vector<double> V;
  std::vector<double> z_star;
  double eps = std::numeric_limits<double>::quiet_NaN();
  std::vector<double> eps_grid;
  double tol = std::numeric_limits<double>::quiet_NaN();
  std::vector<std::string> grid;
  std::vector<double> guess;
  std::string method;
  unsigned threads = 0;
  std::string out;
  std::string format;
  std::string example_name;
  bool dump = false;
};

void add_common(CLI::App* sub, Flags& f) {
  sub->add_option("--config", f.config, "JSON run configuration");
  sub->add_option("--builtin", f.builtin, "builtin system: example1, example2, zero, linear_test");
  sub->add_option("--V", f.V, "window V as lo hi pairs, one per axis")->expected(2, 64);
  sub->add_option("--threads", f.threads, "worker threads (default: CAVG_THREADS or 1)");
  sub->add_option("--out", f.out, "output file (default: stdout)");
  sub->add_option("--format", f.format, "csv or json")->check(CLI::IsMember({"csv", "json"}));
  sub->add_option("--tol", f.tol, "fixed-point residual tolerance");
}

RunConfig merge(const Flags& f, const std::string& command) {
  RunConfig cfg;
  if (!f.config.empty()) cfg = load_config(f.config);
  if (!f.builtin.empty()) {
    if (cfg.system && !cfg.builtin) {
      throw ConfigError("--builtin conflicts with the system defined in the config file");
    }
    try {
      cfg.system = builtin_definition(f.builtin);
    } catch (const SystemError& e) {
      throw ConfigError(fmt::format("--builtin: {}", e.what()));
    }
    cfg.builtin = f.builtin;
  }
  if (command == "example") {
    cfg.system = builtin_definition(f.example_name);
    cfg.builtin = f.example_name;
  }
  if (!f.V.empty()) {
    if (f.V.size() % 2 != 0) throw ConfigError("--V: expected lo hi pairs");
    Box b;
    for (std::size_t i = 0; i < f.V.size(); i += 2) {
      b.lo.push_back(f.V[i]);
      b.hi.push_back(f.V[i + 1]);
    }
    if (!b.non_degenerate()) throw ConfigError("--V: needs lo < hi on every axis");
    cfg.V = b;
  }
  if (!f.z_star.empty()) cfg.z_star = f.z_star;
  if (!std::isnan(f.eps)) cfg.eps = f.eps;
  if (!f.eps_grid.empty()) cfg.eps_grid = f.eps_grid;
  if (!std::isnan(f.tol)) {
    if (!(f.tol > 0.0)) throw ConfigError("--tol: must be positive");
    cfg.tol = f.tol;
  }
  if (!f.grid.empty()) cfg.grid = f.grid;
  if (!f.guess.empty()) cfg.guess = f.guess;
  if (!f.method.empty()) cfg.method = f.method;
  if (f.threads > 0) cfg.threads = f.threads;
  if (!f.out.empty()) cfg.out = f.out;
  if (!f.format.empty()) cfg.format = f.format;

  if (cfg.builtin) {
    const auto d = builtin_defaults(*cfg.builtin);
    if (!cfg.V) cfg.V = d.V;
    // The builtin z* is only assumed when it lies inside the chosen window.
    if (!cfg.z_star && d.z_star && cfg.V->contains_interior(*d.z_star)) cfg.z_star = d.z_star;
    if (!cfg.eps) cfg.eps = d.eps;
  }
  if (cfg.format != "csv" && cfg.format != "json") throw ConfigError("config.format: must be csv or json");
  if (cfg.tol && !(*cfg.tol > 0.0)) throw ConfigError("config.tol: must be positive");
  return cfg;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Periodic orbits of x' = eps f(t, x, eps) by averaging and Brouwer degree", "cavg"};
  app.require_subcommand(1);
  Flags f;

  auto* average = app.add_subcommand("average", "averaged field f1 on a grid");
  add_common(average, f);
  average->add_option("--grid", f.grid, "a:b:n per axis");

  auto* degree = app.add_subcommand("degree", "Brouwer degree of f1 over V");
  add_common(degree, f);
  degree->add_option("--method", f.method, "auto, interval_sign, regular_zero, winding_2d");
  degree->add_option("--z-star", f.z_star, "zero of f1 (regular_zero)");

  auto* periodic = app.add_subcommand("periodic", "T-periodic orbit at one eps");
  add_common(periodic, f);
  periodic->add_option("--eps", f.eps, "perturbation size");
  periodic->add_option("--guess", f.guess, "initial guess");
  periodic->add_option("--z-star", f.z_star, "zero of f1 (for sup distance)");

  auto* sweep_cmd = app.add_subcommand("sweep", "continuation of the orbit over a decreasing eps grid");
  add_common(sweep_cmd, f);
  sweep_cmd->add_option("--eps", f.eps, "largest eps (grid eps, eps/2, eps/4, eps/8)");
  sweep_cmd->add_option("--eps-grid", f.eps_grid, "explicit decreasing eps values");
  sweep_cmd->add_option("--z-star", f.z_star, "zero of f1");
  sweep_cmd->add_option("--guess", f.guess, "initial guess for the first eps");

  auto* certify_cmd = app.add_subcommand("certify", "hypotheses and conclusions as one JSON report");
  add_common(certify_cmd, f);
  certify_cmd->add_option("--eps", f.eps, "perturbation size");
  certify_cmd->add_option("--eps-grid", f.eps_grid, "eps grid for the convergence stage");
  certify_cmd->add_option("--z-star", f.z_star, "isolated zero of f1");

  auto* example = app.add_subcommand("example", "figure data (f1 and homotopy) or a config dump for a builtin");
  example->add_option("name", f.example_name, "builtin name")->required();
  example->add_flag("--dump", f.dump, "print a config file that reproduces the builtin");
  example->add_option("--grid", f.grid, "a:b:n");
  example->add_option("--out", f.out, "output file (default: stdout)");

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    const auto subs = app.get_subcommands();
    out << (subs.empty() ? app.help() : subs.front()->help());
    return 0;
  } catch (const CLI::ParseError& e) {
    err << fmt::format("usage error: {}\n", e.what());
    err << "run with --help for usage\n";
    return 2;
  }

  const auto* chosen = app.get_subcommands().front();
  const std::string command = chosen->get_name();
  Context ctx;
  ctx.out = &out;
  ctx.err = &err;
  try {
    ctx.cfg = merge(f, command);
    if (command == "example" && f.dump) return cmd_example(ctx, f.example_name, true);
    if (!ctx.cfg.system) throw ConfigError("no system given (use --builtin or a config file)");
    ctx.system = build(*ctx.cfg.system);
    ctx.threads = ctx.cfg.threads.value_or(default_thread_count());
    if (command == "average") return cmd_average(ctx);
    if (command == "degree") return cmd_degree(ctx);
    if (command == "periodic") return cmd_periodic(ctx);
    if (command == "sweep") return cmd_sweep(ctx);
    if (command == "certify") return cmd_certify(ctx);
    return cmd_example(ctx, f.example_name, false);
  } catch (const ConfigError& e) {
    err << fmt::format("error [config]: {}\n", e.what());
    return 2;
  } catch (const ParseError& e) {
    err << fmt::format("error [config]: expression: {}\n", e.what());
    return 2;
  } catch (const SystemError& e) {
    err << fmt::format("error [system]: {}\n", e.what());
    return 2;
  } catch (const UsageError& e) {
    err << fmt::format("error [{}]: {}\n", e.stage(), e.what());
    return 2;
  } catch (const HypothesisFailure& e) {
    err << fmt::format("error [{}]: {}\n", e.stage(), e.what());
    return 1;
  } catch (const IntegrationError& e) {
    err << fmt::format("error [integrator]: {}\n", e.what());
    return e.kind() == IntegrationError::Kind::invalid_input ? 2 : 1;
  } catch (const std::exception& e) {
    err << fmt::format("error [{}]: {}\n", command, e.what());
    return 1;
  }
}

}  // namespace cavg::cli
