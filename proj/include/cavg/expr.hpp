#pragma once

// Scalar expression language used to define right-hand sides.
//
// Grammar (recursive descent, whitespace ignored):
//
//   expr    := term (('+' | '-') term)*
//   term    := unary (('*' | '/') unary)*
//   unary   := ('-' | '+') unary | power
//   power   := primary ('^' unary)?          right-associative, binds tighter
//                                            than unary minus: -2^2 == -4
//   primary := number | name | name '(' args ')' | '(' expr ')'
//
// Functions: sin cos sqrt cbrt abs sign exp log (one argument), max min (two).
// The name `pi` is a constant unless it is declared as a variable.

#include <cctype>
#include <cmath>
#include <cstddef>
#include <cstdlib>
#include <initializer_list>
#include <map>
#include <memory>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <fmt/format.h>

namespace cavg {

class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t position)
      : std::runtime_error(fmt::format("{} at position {}", what, position)), position_(position) {}

  [[nodiscard]] std::size_t position() const noexcept { return position_; }

 private:
  std::size_t position_;
};

/// Raised when evaluation leaves the real domain of a primitive (sqrt of a
/// negative, log of a non-positive, division by zero, NaN-producing pow).
class EvalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Function { sin, cos, sqrt, cbrt, abs, sign, exp, log, max, min };

namespace detail {

struct FunctionInfo {
  std::string_view name;
  Function fn;
  int arity;
};

inline constexpr FunctionInfo kFunctions[] = {
    {"sin", Function::sin, 1},   {"cos", Function::cos, 1},   {"sqrt", Function::sqrt, 1},
    {"cbrt", Function::cbrt, 1}, {"abs", Function::abs, 1},   {"sign", Function::sign, 1},
    {"exp", Function::exp, 1},   {"log", Function::log, 1},   {"max", Function::max, 2},
    {"min", Function::min, 2},
};

inline const FunctionInfo* find_function(std::string_view name) {
  for (const auto& info : kFunctions) {
    if (info.name == name) return &info;
  }
  return nullptr;
}

inline std::string_view function_name(Function fn) {
  for (const auto& info : kFunctions) {
    if (info.fn == fn) return info.name;
  }
  return "?";
}

enum class NodeKind { number, variable, negate, add, sub, mul, div, pow, call };

struct Node {
  NodeKind kind = NodeKind::number;
  double value = 0.0;
  std::size_t variable = 0;
  Function fn = Function::sin;
  std::vector<std::shared_ptr<const Node>> args;
};

using NodePtr = std::shared_ptr<const Node>;

/// sign(0) is 0.
inline double sign_of(double v) noexcept { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

inline double eval_node(const Node& node, std::span<const double> values) {
  switch (node.kind) {
    case NodeKind::number:
      return node.value;
    case NodeKind::variable:
      return values[node.variable];
    case NodeKind::negate:
      return -eval_node(*node.args[0], values);
    case NodeKind::add:
      return eval_node(*node.args[0], values) + eval_node(*node.args[1], values);
    case NodeKind::sub:
      return eval_node(*node.args[0], values) - eval_node(*node.args[1], values);
    case NodeKind::mul:
      return eval_node(*node.args[0], values) * eval_node(*node.args[1], values);
    case NodeKind::div: {
      const double den = eval_node(*node.args[1], values);
      if (den == 0.0) throw EvalError("division by zero");
      return eval_node(*node.args[0], values) / den;
    }
    case NodeKind::pow: {
      const double base = eval_node(*node.args[0], values);
      const double expo = eval_node(*node.args[1], values);
      const double r = std::pow(base, expo);
      if (std::isnan(r) && !std::isnan(base) && !std::isnan(expo)) {
        throw EvalError(fmt::format("pow({}, {}) is not real", base, expo));
      }
      return r;
    }
    case NodeKind::call: {
      const double a = eval_node(*node.args[0], values);
      switch (node.fn) {
        case Function::sin: return std::sin(a);
        case Function::cos: return std::cos(a);
        case Function::sqrt:
          if (a < 0.0) throw EvalError(fmt::format("sqrt of negative value {}", a));
          return std::sqrt(a);
        case Function::cbrt: return std::cbrt(a);
        case Function::abs: return std::abs(a);
        case Function::sign: return sign_of(a);
        case Function::exp: return std::exp(a);
        case Function::log:
          if (!(a > 0.0)) throw EvalError(fmt::format("log of non-positive value {}", a));
          return std::log(a);
        case Function::max: {
          const double b = eval_node(*node.args[1], values);
          return a >= b ? a : b;
        }
        case Function::min: {
          const double b = eval_node(*node.args[1], values);
          return a <= b ? a : b;
        }
      }
      break;
    }
  }
  return 0.0;
}

inline void print_node(const Node& node, const std::vector<std::string>& vars, std::string& out) {
  auto binary = [&](char op) {
    out += '(';
    print_node(*node.args[0], vars, out);
    out += ' ';
    out += op;
    out += ' ';
    print_node(*node.args[1], vars, out);
    out += ')';
  };
  switch (node.kind) {
    case NodeKind::number:
      out += fmt::format("{:.17g}", node.value);
      return;
    case NodeKind::variable:
      out += vars[node.variable];
      return;
    case NodeKind::negate:
      out += "(-";
      print_node(*node.args[0], vars, out);
      out += ')';
      return;
    case NodeKind::add: binary('+'); return;
    case NodeKind::sub: binary('-'); return;
    case NodeKind::mul: binary('*'); return;
    case NodeKind::div: binary('/'); return;
    case NodeKind::pow: binary('^'); return;
    case NodeKind::call:
      out += function_name(node.fn);
      out += '(';
      for (std::size_t i = 0; i < node.args.size(); ++i) {
        if (i) out += ", ";
        print_node(*node.args[i], vars, out);
      }
      out += ')';
      return;
  }
}

class Parser {
 public:
  Parser(std::string_view src, const std::vector<std::string>& vars) : src_(src), vars_(vars) {}

  NodePtr parse() {
    skip_ws();
    if (pos_ >= src_.size()) throw ParseError("empty expression", pos_);
    auto node = parse_expr();
    skip_ws();
    if (pos_ < src_.size()) throw ParseError(fmt::format("unexpected '{}'", src_[pos_]), pos_);
    return node;
  }

 private:
  static NodePtr make(NodeKind kind, std::vector<NodePtr> args) {
    auto n = std::make_shared<Node>();
    n->kind = kind;
    n->args = std::move(args);
    return n;
  }

  void skip_ws() {
    while (pos_ < src_.size() && std::isspace(static_cast<unsigned char>(src_[pos_]))) ++pos_;
  }

  bool accept(char c) {
    skip_ws();
    if (pos_ < src_.size() && src_[pos_] == c) {
      ++pos_;
      return true;
    }
    return false;
  }

  void expect(char c) {
    skip_ws();
    if (pos_ >= src_.size()) throw ParseError(fmt::format("expected '{}' but input ended", c), pos_);
    if (src_[pos_] != c) throw ParseError(fmt::format("expected '{}' but found '{}'", c, src_[pos_]), pos_);
    ++pos_;
  }

  NodePtr parse_expr() {
    auto lhs = parse_term();
    for (;;) {
      if (accept('+')) {
        lhs = make(NodeKind::add, {lhs, parse_term()});
      } else if (accept('-')) {
        lhs = make(NodeKind::sub, {lhs, parse_term()});
      } else {
        return lhs;
      }
    }
  }

  NodePtr parse_term() {
    auto lhs = parse_unary();
    for (;;) {
      if (accept('*')) {
        lhs = make(NodeKind::mul, {lhs, parse_unary()});
      } else if (accept('/')) {
        lhs = make(NodeKind::div, {lhs, parse_unary()});
      } else {
        return lhs;
      }
    }
  }

  NodePtr parse_unary() {
    if (accept('-')) return make(NodeKind::negate, {parse_unary()});
    if (accept('+')) return parse_unary();
    return parse_power();
  }

  NodePtr parse_power() {
    auto base = parse_primary();
    if (accept('^')) return make(NodeKind::pow, {base, parse_unary()});
    return base;
  }

  NodePtr parse_primary() {
    skip_ws();
    if (pos_ >= src_.size()) throw ParseError("unexpected end of input", pos_);
    const char c = src_[pos_];
    if (std::isdigit(static_cast<unsigned char>(c)) || c == '.') return parse_number();
    if (std::isalpha(static_cast<unsigned char>(c)) || c == '_') return parse_name();
    if (c == '(') {
      ++pos_;
      auto inner = parse_expr();
      expect(')');
      return inner;
    }
    throw ParseError(fmt::format("unexpected '{}'", c), pos_);
  }

  NodePtr parse_number() {
    const std::size_t start = pos_;
    auto digits = [&] {
      while (pos_ < src_.size() && std::isdigit(static_cast<unsigned char>(src_[pos_]))) ++pos_;
    };
    digits();
    if (pos_ < src_.size() && src_[pos_] == '.') {
      ++pos_;
      digits();
    }
    if (pos_ < src_.size() && (src_[pos_] == 'e' || src_[pos_] == 'E')) {
      std::size_t save = pos_++;
      if (pos_ < src_.size() && (src_[pos_] == '+' || src_[pos_] == '-')) ++pos_;
      if (pos_ < src_.size() && std::isdigit(static_cast<unsigned char>(src_[pos_]))) {
        digits();
      } else {
        pos_ = save;
      }
    }
    const std::string text(src_.substr(start, pos_ - start));
    if (text == ".") throw ParseError("malformed number", start);
    auto n = std::make_shared<Node>();
    n->kind = NodeKind::number;
    n->value = std::strtod(text.c_str(), nullptr);
    return n;
  }

  NodePtr parse_name() {
    const std::size_t start = pos_;
    while (pos_ < src_.size() &&
           (std::isalnum(static_cast<unsigned char>(src_[pos_])) || src_[pos_] == '_')) {
      ++pos_;
    }
    const std::string_view name = src_.substr(start, pos_ - start);

    for (std::size_t i = 0; i < vars_.size(); ++i) {
      if (vars_[i] == name) {
        auto n = std::make_shared<Node>();
        n->kind = NodeKind::variable;
        n->variable = i;
        return n;
      }
    }

    const FunctionInfo* info = find_function(name);
    skip_ws();
    const bool call = pos_ < src_.size() && src_[pos_] == '(';
    if (info == nullptr) {
      if (name == "pi" && !call) {
        auto n = std::make_shared<Node>();
        n->value = std::numbers::pi;
        return n;
      }
      throw ParseError(fmt::format("unknown {} '{}'", call ? "function" : "identifier", name), start);
    }
    if (!call) throw ParseError(fmt::format("function '{}' requires arguments", name), pos_);
    ++pos_;

    std::vector<NodePtr> args;
    if (!accept(')')) {
      do {
        args.push_back(parse_expr());
      } while (accept(','));
      expect(')');
    }
    if (static_cast<int>(args.size()) != info->arity) {
      throw ParseError(fmt::format("function '{}' takes {} argument(s), got {}", name, info->arity,
                                   args.size()),
                       start);
    }
    auto n = std::make_shared<Node>();
    n->kind = NodeKind::call;
    n->fn = info->fn;
    n->args = std::move(args);
    return n;
  }

  std::string_view src_;
  const std::vector<std::string>& vars_;
  std::size_t pos_ = 0;
};

inline void collect_calls(const NodePtr& node, Function fn, std::vector<NodePtr>& out) {
  if (node->kind == NodeKind::call && node->fn == fn) out.push_back(node->args[0]);
  for (const auto& a : node->args) collect_calls(a, fn, out);
}

inline void collect_variables(const Node& node, std::vector<bool>& used) {
  if (node.kind == NodeKind::variable) used[node.variable] = true;
  for (const auto& a : node.args) collect_variables(*a, used);
}

}  // namespace detail

/// Immutable parsed expression. Copies share the syntax tree; evaluation is
/// re-entrant.
class Expression {
 public:
  Expression() = default;

  static Expression parse(std::string_view source, std::vector<std::string> variables) {
    Expression e;
    e.variables_ = std::make_shared<const std::vector<std::string>>(std::move(variables));
    e.root_ = detail::Parser(source, *e.variables_).parse();
    e.source_ = std::string(source);
    return e;
  }

  /// `values` follows the declared variable order.
  [[nodiscard]] double evaluate(std::span<const double> values) const {
    if (values.size() < variables_->size()) {
      throw std::invalid_argument(fmt::format("expression expects {} values, got {}",
                                              variables_->size(), values.size()));
    }
    const double r = detail::eval_node(*root_, values);
    if (std::isnan(r)) throw EvalError(fmt::format("'{}' evaluated to NaN", source_));
    return r;
  }

  [[nodiscard]] double evaluate(std::initializer_list<double> values) const {
    return evaluate(std::span<const double>(values.begin(), values.size()));
  }

  [[nodiscard]] double evaluate(const std::map<std::string, double>& bindings) const {
    std::vector<double> values(variables_->size());
    for (std::size_t i = 0; i < values.size(); ++i) {
      auto it = bindings.find((*variables_)[i]);
      if (it == bindings.end()) {
        if (!references((*variables_)[i])) continue;
        throw std::invalid_argument(fmt::format("no binding for variable '{}'", (*variables_)[i]));
      }
      values[i] = it->second;
    }
    return evaluate(values);
  }

  /// Fully parenthesised rendering that re-parses to an identical tree.
  [[nodiscard]] std::string to_string() const {
    std::string out;
    detail::print_node(*root_, *variables_, out);
    return out;
  }

  [[nodiscard]] const std::string& source() const noexcept { return source_; }
  [[nodiscard]] const std::vector<std::string>& variables() const noexcept { return *variables_; }
  [[nodiscard]] bool valid() const noexcept { return root_ != nullptr; }

  [[nodiscard]] bool references(std::string_view name) const {
    std::vector<bool> used(variables_->size(), false);
    detail::collect_variables(*root_, used);
    for (std::size_t i = 0; i < used.size(); ++i) {
      if (used[i] && (*variables_)[i] == name) return true;
    }
    return false;
  }

  /// Arguments of every sign(...) call, as expressions over the same variables.
  [[nodiscard]] std::vector<Expression> sign_arguments() const { return call_arguments(Function::sign); }

  /// First arguments of every call to fn.
  [[nodiscard]] std::vector<Expression> call_arguments(Function fn) const {
    std::vector<detail::NodePtr> nodes;
    detail::collect_calls(root_, fn, nodes);
    std::vector<Expression> out;
    out.reserve(nodes.size());
    for (auto& n : nodes) {
      Expression e;
      e.variables_ = variables_;
      e.root_ = n;
      detail::print_node(*n, *variables_, e.source_);
      out.push_back(std::move(e));
    }
    return out;
  }

 private:
  std::shared_ptr<const std::vector<std::string>> variables_ =
      std::make_shared<const std::vector<std::string>>();
  detail::NodePtr root_;
  std::string source_;
};

}  // namespace cavg
