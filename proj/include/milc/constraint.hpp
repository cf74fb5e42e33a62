#pragma once

// Lock-order constraints produced by annotation inference.

#include <map>
#include <string>
#include <variant>
#include <vector>

#include "milc/ast.hpp"
#include "milc/print.hpp"

namespace milc {

/// Lambda < lock, with Lambda ground.
struct GroundBelow {
  Permission locks;
  LockSym lock;
  friend bool operator==(const GroundBelow&, const GroundBelow&) = default;
};
/// nu < lock: every element of theta(nu), seen through the reference's
/// substitution, is below `lock`.
struct VarBelow {
  VarRef var;
  LockSym lock;
  friend bool operator==(const VarBelow&, const VarBelow&) = default;
};
/// lock < rho.
struct AboveVar {
  LockSym lock;
  VarRef var;
  friend bool operator==(const AboveVar&, const AboveVar&) = default;
};

struct Constraint {
  std::variant<GroundBelow, VarBelow, AboveVar> node;
  SourceSpan span;

  template <class T>
  const T* as() const { return std::get_if<T>(&node); }
  friend bool operator==(const Constraint& a, const Constraint& b) { return a.node == b.node; }
};

using ConstraintSet = std::vector<Constraint>;

/// theta: permission variable -> permission.
using Substitution = std::map<PermVar, Permission>;

inline std::string to_string(const Constraint& c) {
  if (const auto* g = c.as<GroundBelow>()) return to_string(g->locks) + " < " + g->lock.name;
  if (const auto* v = c.as<VarBelow>()) return to_string(v->var) + " < " + v->lock.name;
  const auto& a = *c.as<AboveVar>();
  return a.lock.name + " < " + to_string(a.var);
}

/// One constraint per line, in the format parse_constraints reads.
inline std::string print_constraints(const ConstraintSet& cs) {
  std::string out;
  for (const auto& c : cs) out += to_string(c) + "\n";
  return out;
}

inline std::string to_string(const Substitution& theta) {
  std::string out;
  for (const auto& [v, p] : theta) out += to_string(v) + " := " + to_string(p) + "\n";
  return out;
}

inline std::set<PermVar> constraint_vars(const ConstraintSet& cs) {
  std::set<PermVar> out;
  for (const auto& c : cs) {
    if (const auto* v = c.as<VarBelow>()) out.insert(v->var.var);
    if (const auto* a = c.as<AboveVar>()) out.insert(a->var.var);
  }
  return out;
}

}  // namespace milc
