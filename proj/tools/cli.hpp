#pragma once

#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "cavg/quadrature.hpp"
#include "cavg/system.hpp"

namespace cavg::cli {

/// Bad configuration; the message starts with the offending field path.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  std::optional<std::string> builtin;
  std::optional<SystemDefinition> system;

  std::optional<Box> V;
  std::optional<std::vector<double>> z_star;
  std::optional<double> eps;
  std::vector<double> eps_grid;
  std::optional<double> tol;              // fixed-point residual tolerance
  std::optional<double> integration_tol;
  QuadratureOptions quadrature;
  std::vector<std::string> grid;          // one "a:b:n" per axis
  std::optional<std::vector<double>> guess;
  std::string method = "auto";
  std::optional<unsigned> threads;
  std::optional<std::string> out;
  std::string format = "csv";
};

/// Reads a config document. Unknown keys and wrong types are rejected with
/// the JSON path of the field.
RunConfig parse_config(const nlohmann::ordered_json& doc);
RunConfig load_config(const std::string& path);

/// Inverse of parse_config; systems are always written out in full.
nlohmann::ordered_json to_json(const RunConfig& cfg);

nlohmann::ordered_json system_to_json(const SystemDefinition& def);

/// Parses "a:b:n" into n equally spaced points from a to b.
std::vector<double> parse_grid_axis(const std::string& axis);

/// Entry point shared by the executable and the tests. Exit codes: 0 success,
/// 1 a hypothesis or module failure, 2 usage or configuration error.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace cavg::cli
