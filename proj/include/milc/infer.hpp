#pragma once

// Annotation inference: tag an annotation-free program with permission
// variables, collect lock-order constraints, solve them, and substitute.

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <tuple>
#include <unordered_set>
#include <utility>
#include <variant>
#include <vector>

#include "milc/ast.hpp"
#include "milc/constraint.hpp"
#include "milc/print.hpp"
#include "milc/typecheck.hpp"

namespace milc {

struct VarOrigin {
  LockSym lock;
  bool upper = false;  // rho (above) rather than nu (below)
  SourceSpan span;
};

/// Psi with kinds over permission variables, plus the scope of each variable.
struct VarTypingEnv {
  TypingEnv base;
  std::vector<LockSym> order;  // binding order
  std::map<LockSym, std::size_t> group;
  std::map<PermVar, VarOrigin> origin;
  std::map<PermVar, Permission> domain;  // locks theta may assign; absent means any

  /// Binds a lock; its kind variables may range over locks bound earlier in
  /// the same group when `scoped`.
  void bind(const LockSym& l, const LockKind& k, std::size_t g = 0, bool scoped = false,
            const SourceSpan& span = {}) {
    Permission earlier;
    if (scoped)
      for (const auto& o : order)
        if (group.at(o) == g) earlier.insert(o);
    base.locks[l] = k;
    order.push_back(l);
    group[l] = g;
    for (const auto& r : k.below.vars) {
      origin[r.var] = {l, false, span};
      if (scoped) domain[r.var] = earlier;
    }
    for (const auto& r : k.above.vars) {
      origin[r.var] = {l, true, span};
      if (scoped) domain[r.var] = earlier;
    }
  }

  std::size_t var_count() const { return origin.size(); }
};

struct VarSupply {
  std::uint32_t next = 1;
  PermVar fresh() { return {next++}; }
  LockKind fresh_kind() {
    PermVar nu = fresh();
    PermVar rho = fresh();
    return {Bound{{}, {VarRef{nu, {}}}}, Bound{{}, {VarRef{rho, {}}}}};
  }
};

/// T: every forall binder gets a fresh (nu, rho).
inline MilType tag_type(const MilType& t, VarSupply& vars) {
  return std::visit(
      [&](const auto& n) -> MilType {
        using N = std::decay_t<decltype(n)>;
        if constexpr (std::is_same_v<N, TupleType>) {
          std::vector<MilType> cells;
          for (const auto& c : n.cells) cells.push_back(tag_type(c, vars));
          return tuple_type(std::move(cells), n.guard);
        } else if constexpr (std::is_same_v<N, CodeType>) {
          RegFileType regs;
          for (const auto& [r, ty] : n.regs->entries) regs.entries.emplace(r, tag_type(ty, vars));
          return code_type(std::move(regs), n.perm);
        } else if constexpr (std::is_same_v<N, ForallType>) {
          LockKind k = vars.fresh_kind();
          return forall_type(n.binder, std::move(k), tag_type(*n.body, vars));
        } else {
          return MilType{n};
        }
      },
      t.node);
}

template <class T>
struct Annotated {
  T value{};
  ConstraintSet constraints;
  std::optional<TypeError> error;
  bool ok() const { return !error.has_value(); }
};

/// V: the type of v, with nu < lam < rho for every type application.
inline Annotated<MilType> annotate_value(const Value& v, const VarTypingEnv& env,
                                         const RegFileType& regs, const SourceSpan& span = {}) {
  Annotated<MilType> out;
  detail::SinkGuard guard(&out.constraints);
  auto r = check_value(env.base, regs, v, span);
  if (r) out.value = *r.value;
  else out.error = r.error;
  return out;
}

/// I: newLocks get fresh kinds and extend env; order goals become constraints.
inline Annotated<InstrSeq> annotate_instrs(const InstrSeq& code, VarTypingEnv& env,
                                           const RegFileType& regs, const Permission& perm,
                                           VarSupply& vars, std::size_t group = 0) {
  Annotated<InstrSeq> out;
  out.value = code;
  for (auto& ins : out.value.body) {
    if (auto* nl = std::get_if<NewLockInstr>(&ins.node)) nl->kind = vars.fresh_kind();
  }
  {
    detail::SinkGuard guard(&out.constraints);
    out.error = check_instrs({env.base, regs, perm}, out.value);
  }
  for (const auto& ins : out.value.body)
    if (const auto* nl = ins.as<NewLockInstr>()) env.bind(nl->binder, *nl->kind, group, true, ins.span);
  return out;
}

struct Annotation {
  VarTypingEnv env;
  Heap program;  // H-star, kinds over variables
  ConstraintSet constraints;
  std::vector<TypeError> errors;
  std::size_t vars = 0;
  std::size_t signature_vars = 0;  // allocated by the first pass
};

namespace detail {

inline LockSym rename_lock(const LockSym& l, const LockMap& m) {
  auto it = m.find(l);
  return it == m.end() ? l : it->second;
}

inline Permission rename_perm(const Permission& p, const LockMap& m) {
  Permission out;
  for (const auto& l : p) out.insert(rename_lock(l, m));
  return out;
}

inline MilType rename_type(const MilType& t, const LockMap& m) {
  return std::visit(
      [&](const auto& n) -> MilType {
        using N = std::decay_t<decltype(n)>;
        if constexpr (std::is_same_v<N, LockType>) {
          return lock_type(rename_lock(n.lock, m));
        } else if constexpr (std::is_same_v<N, TupleType>) {
          std::vector<MilType> cells;
          for (const auto& c : n.cells) cells.push_back(rename_type(c, m));
          return tuple_type(std::move(cells), rename_lock(n.guard, m));
        } else if constexpr (std::is_same_v<N, CodeType>) {
          RegFileType regs;
          for (const auto& [r, ty] : n.regs->entries) regs.entries.emplace(r, rename_type(ty, m));
          return code_type(std::move(regs), rename_perm(n.perm, m));
        } else if constexpr (std::is_same_v<N, ForallType>) {
          std::optional<LockKind> k;
          if (n.kind) k = LockKind{{rename_perm(n.kind->below.locks, m), n.kind->below.vars},
                                   {rename_perm(n.kind->above.locks, m), n.kind->above.vars}};
          return forall_type(rename_lock(n.binder, m), std::move(k), rename_type(*n.body, m));
        } else {
          return MilType{n};
        }
      },
      t.node);
}

inline Value rename_value(const Value& v, const LockMap& m) {
  if (const auto* app = v.as<TypeAppValue>()) return type_app(rename_value(*app->base, m), rename_lock(app->arg, m));
  if (const auto* u = v.as<UninitValue>()) return uninit_value(rename_type(u->type, m));
  return v;
}

inline InstrSeq rename_seq(const InstrSeq& seq, const LockMap& m) {
  InstrSeq out = seq;
  for (auto& ins : out.body) {
    std::visit(
        [&](auto& n) {
          using N = std::decay_t<decltype(n)>;
          if constexpr (std::is_same_v<N, MoveInstr> || std::is_same_v<N, StoreInstr>) {
            n.src = rename_value(n.src, m);
          } else if constexpr (std::is_same_v<N, LoadInstr>) {
            n.src = rename_value(n.src, m);
          } else if constexpr (std::is_same_v<N, ArithInstr>) {
            n.rhs = rename_value(n.rhs, m);
          } else if constexpr (std::is_same_v<N, BranchInstr>) {
            n.operand = rename_value(n.operand, m);
            n.target = rename_value(n.target, m);
          } else if constexpr (std::is_same_v<N, ForkInstr>) {
            n.target = rename_value(n.target, m);
          } else if constexpr (std::is_same_v<N, MallocInstr>) {
            for (auto& c : n.cells) c = rename_type(c, m);
            n.guard = rename_lock(n.guard, m);
          } else if constexpr (std::is_same_v<N, NewLockInstr>) {
            n.binder = rename_lock(n.binder, m);
          } else {
            n.lock = rename_value(n.lock, m);
          }
        },
        ins.node);
  }
  if (auto* j = std::get_if<JumpTerm>(&out.term)) j->target = rename_value(j->target, m);
  return out;
}

inline std::vector<LockSym> block_binders(const CodeBlock& cb) {
  std::vector<LockSym> out;
  if (auto view = view_signature(cb.sig))
    for (const auto& b : view->binders) out.push_back(b.lock);
  for (const auto& ins : cb.body->body)
    if (const auto* nl = ins.as<NewLockInstr>()) out.push_back(nl->binder);
  return out;
}

/// Binder names bound in several blocks become name1, name2, ... in block order.
inline Heap rename_binders(const Heap& program) {
  std::map<std::string, std::size_t> blocks_binding;
  std::set<std::string> taken;
  for (const auto& [label, hv] : program) {
    taken.insert(label.name);
    if (const auto* cb = hv.as<CodeBlock>()) {
      std::set<std::string> names;
      for (const auto& l : block_binders(*cb)) names.insert(l.name);
      for (const auto& n : names) ++blocks_binding[n];
      taken.insert(names.begin(), names.end());
    }
  }
  std::map<std::string, std::size_t> seen;
  Heap out;
  for (const auto& [label, hv] : program) {
    const auto* cb = hv.as<CodeBlock>();
    if (!cb) {
      out.insert(label, hv);
      continue;
    }
    LockMap m;
    std::set<std::string> counted;
    for (const auto& l : block_binders(*cb)) {
      if (blocks_binding[l.name] < 2) continue;
      if (counted.insert(l.name).second) ++seen[l.name];
      std::string name = l.name + std::to_string(seen[l.name]);
      for (std::size_t j = 1; taken.count(name); ++j)
        name = l.name + std::to_string(seen[l.name]) + "_" + std::to_string(j);
      taken.insert(name);
      m[l] = LockSym{l.id, name};
    }
    if (m.empty()) {
      out.insert(label, hv);
      continue;
    }
    out.insert(label, code_block(rename_type(cb->sig, m), rename_seq(*cb->body, m), cb->span));
  }
  return out;
}

inline bool has_forall(const MilType& t) {
  if (t.is<ForallType>()) return true;
  if (const auto* tt = t.as<TupleType>())
    return std::any_of(tt->cells.begin(), tt->cells.end(), [](const MilType& c) { return has_forall(c); });
  if (const auto* ct = t.as<CodeType>())
    for (const auto& [r, ty] : ct->regs->entries)
      if (has_forall(ty)) return true;
  return false;
}

/// Polymorphic code stored in registers or cells would need equations
/// between variables; inference rejects it.
inline std::optional<TypeError> nested_forall(const Label& label, const CodeBlock& cb) {
  auto fail = [&](const SourceSpan& sp) {
    return TypeError{"E-INFER-NESTED", sp,
                     "inference does not support lock-polymorphic code types inside register or "
                     "tuple types",
                     std::nullopt, label.name};
  };
  auto view = view_signature(cb.sig);
  if (view)
    for (const auto& [r, t] : view->code->regs->entries)
      if (has_forall(t)) return fail(cb.span);
  for (const auto& ins : cb.body->body)
    if (const auto* m = ins.as<MallocInstr>())
      for (const auto& c : m->cells)
        if (has_forall(c)) return fail(ins.span);
  return std::nullopt;
}

}  // namespace detail

/// A: pass 1 tags every signature, pass 2 annotates every block body.
/// Lock-order annotations already present are discarded.
inline Annotation annotate_program(const Heap& input) {
  Annotation out;
  Heap program = detail::rename_binders(erase(input));
  VarSupply vars;
  for (const auto& [label, hv] : program) {
    if (const auto* cb = hv.as<CodeBlock>()) {
      if (auto err = detail::nested_forall(label, *cb)) out.errors.push_back(*err);
      out.program.insert(label, code_block(tag_type(cb->sig, vars), *cb->body, cb->span));
    } else {
      out.program.insert(label, hv);
    }
  }
  out.signature_vars = vars.next - 1;
  if (!out.errors.empty()) return out;
  out.env.base = program_env(out.program);
  std::size_t group = 0;
  Heap tagged;
  for (const auto& [label, hv] : out.program) {
    const auto* cb = hv.as<CodeBlock>();
    if (!cb) {
      tagged.insert(label, hv);
      continue;
    }
    ++group;
    auto view = view_signature(cb->sig);
    if (!view) {
      out.errors.push_back({"E-TYPE", cb->span, "code block signature is not a code type", std::nullopt, label.name});
      tagged.insert(label, hv);
      continue;
    }
    VarTypingEnv local;
    local.base.labels = out.env.base.labels;
    for (const auto& b : view->binders) local.bind(b.lock, **b.kind, group, true, cb->span);
    Permission perm = view->code->perm;
    std::optional<TypeError> err;
    for (const auto& l : perm)
      if (!local.base.has_lock(l)) err = TypeError{"E-UNBOUND", cb->span, "unbound lock '" + l.name + "'", std::nullopt, {}};
    Annotated<InstrSeq> body;
    if (!err) {
      body = annotate_instrs(*cb->body, local, *view->code->regs, perm, vars, group);
      err = body.error;
    } else {
      body.value = *cb->body;
    }
    if (err) {
      err->block = label.name;
      out.errors.push_back(*err);
    }
    for (auto& c : body.constraints) out.constraints.push_back(std::move(c));
    // scope information of every block is kept; Psi itself only carries labels
    for (const auto& l : local.order) {
      if (out.env.group.count(l)) continue;
      out.env.order.push_back(l);
      out.env.group[l] = local.group[l];
      out.env.base.locks[l] = local.base.locks[l];
    }
    for (const auto& [v, o] : local.origin) out.env.origin[v] = o;
    for (const auto& [v, d] : local.domain) out.env.domain[v] = d;
    tagged.insert(label, code_block(cb->sig, std::move(body.value), cb->span));
  }
  out.program = std::move(tagged);
  out.vars = vars.next - 1;
  return out;
}

// ---------------------------------------------------------------------------
// Applying a substitution

inline Permission apply_theta(const Bound& b, const Substitution& theta) {
  Permission out = b.locks;
  for (const auto& r : b.vars) {
    auto it = theta.find(r.var);
    if (it == theta.end()) continue;
    for (const auto& u : it->second) out.insert(subst_lock(u, r.subst));
  }
  return out;
}

inline LockKind apply_theta(const LockKind& k, const Substitution& theta) {
  return {Bound{apply_theta(k.below, theta), {}}, Bound{apply_theta(k.above, theta), {}}};
}

inline MilType apply_theta(const MilType& t, const Substitution& theta) {
  return std::visit(
      [&](const auto& n) -> MilType {
        using N = std::decay_t<decltype(n)>;
        if constexpr (std::is_same_v<N, TupleType>) {
          std::vector<MilType> cells;
          for (const auto& c : n.cells) cells.push_back(apply_theta(c, theta));
          return tuple_type(std::move(cells), n.guard);
        } else if constexpr (std::is_same_v<N, CodeType>) {
          RegFileType regs;
          for (const auto& [r, ty] : n.regs->entries) regs.entries.emplace(r, apply_theta(ty, theta));
          return code_type(std::move(regs), n.perm);
        } else if constexpr (std::is_same_v<N, ForallType>) {
          std::optional<LockKind> k;
          if (n.kind) k = apply_theta(*n.kind, theta);
          return forall_type(n.binder, std::move(k), apply_theta(*n.body, theta));
        } else {
          return MilType{n};
        }
      },
      t.node);
}

inline InstrSeq apply_theta(const InstrSeq& seq, const Substitution& theta) {
  InstrSeq out = seq;
  for (auto& ins : out.body) {
    if (auto* nl = std::get_if<NewLockInstr>(&ins.node); nl && nl->kind)
      nl->kind = apply_theta(*nl->kind, theta);
    if (auto* m = std::get_if<MallocInstr>(&ins.node))
      for (auto& c : m->cells) c = apply_theta(c, theta);
  }
  return out;
}

inline Heap apply_theta(const Heap& program, const Substitution& theta) {
  Heap out;
  for (const auto& [label, hv] : program) {
    if (const auto* cb = hv.as<CodeBlock>())
      out.insert(label, code_block(apply_theta(cb->sig, theta),
                                   apply_theta(*cb->body, theta),
                                   cb->span));
    else
      out.insert(label, hv);
  }
  return out;
}

/// Psi-theta: every lock kind made ground.
inline TypingEnv apply_theta(const VarTypingEnv& env, const Substitution& theta) {
  TypingEnv out;
  for (const auto& [l, t] : env.base.labels) out.labels.emplace(l, apply_theta(t, theta));
  for (const auto& [l, k] : env.base.locks) out.locks.emplace(l, apply_theta(k, theta));
  return out;
}

/// Psi-theta |- x-theta < y-theta for every constraint, and the order of
/// Psi-theta is irreflexive.
inline bool verify(const TypingEnv& env, const ConstraintSet& cs, const Substitution& theta) {
  try {
    if (!reflexive_locks(env).empty()) return false;
    auto members = [&](const VarRef& r) {
      Permission out;
      auto it = theta.find(r.var);
      if (it != theta.end())
        for (const auto& u : it->second) out.insert(subst_lock(u, r.subst));
      return out;
    };
    for (const auto& c : cs) {
      if (const auto* g = c.as<GroundBelow>()) {
        if (!less_than(env, g->locks, g->lock)) return false;
      } else if (const auto* v = c.as<VarBelow>()) {
        if (!less_than(env, members(v->var), v->lock)) return false;
      } else {
        const auto& a = *c.as<AboveVar>();
        for (const auto& u : members(a.var))
          if (!less_than(env, a.lock, u)) return false;
      }
    }
    return true;
  } catch (const UnboundLock&) {
    return false;
  }
}

// ---------------------------------------------------------------------------
// Solving

struct Witness {
  std::vector<LockSym> cycle;        // lam0 < lam1 < ... < lam0, when the order is cyclic
  std::optional<Constraint> goal;    // constraint that cannot be met otherwise
  std::string text;
};

struct Solved {
  Substitution theta;
  std::vector<std::pair<LockSym, LockSym>> induced_order;
};

struct Unsolvable {
  ConstraintSet core;
  Witness witness;
};

struct SolveStats {
  std::size_t rounds = 0;                 // propagation rounds
  std::vector<Substitution> history;      // theta after each round
  bool propagated = false;                // propagation alone found the solution
  bool refuted = false;                   // forced orders alone are cyclic
  std::size_t search_states = 0;
  bool exhaustive = true;                 // the exact search finished within its limit
};

struct SolveOutcome {
  std::variant<Solved, Unsolvable> result;
  SolveStats stats;

  bool solved() const { return std::holds_alternative<Solved>(result); }
  const Solved& solution() const { return std::get<Solved>(result); }
  const Unsolvable& failure() const { return std::get<Unsolvable>(result); }
};

struct SolveOptions {
  bool core = true;
  std::size_t search_limit = 200000;
  std::size_t core_trial_limit = 500;  // per deletion trial; unproven trials keep their constraint
};

namespace detail {

class Bits {
 public:
  Bits() = default;
  explicit Bits(std::size_t n) : w_((n + 63) / 64, 0) {}
  bool test(std::size_t i) const { return w_[i / 64] >> (i % 64) & 1; }
  void set(std::size_t i) { w_[i / 64] |= std::uint64_t{1} << (i % 64); }
  bool merge(const Bits& o) {
    bool changed = false;
    for (std::size_t k = 0; k < w_.size(); ++k) {
      std::uint64_t nw = w_[k] | o.w_[k];
      changed = changed || nw != w_[k];
      w_[k] = nw;
    }
    return changed;
  }
  const std::vector<std::uint64_t>& words() const { return w_; }

 private:
  std::vector<std::uint64_t> w_;
};

class SolverCore {
 public:
  SolverCore(const VarTypingEnv& env, const ConstraintSet& cs) : env_(env), cs_(cs) {
    for (const auto& [l, k] : env.base.locks) lock_index(l);
    for (const auto& c : cs) {
      if (const auto* g = c.as<GroundBelow>()) {
        for (const auto& l : g->locks) lock_index(l);
        lock_index(g->lock);
      } else if (const auto* v = c.as<VarBelow>()) {
        lock_index(v->lock);
        var_index(v->var.var);
      } else {
        lock_index(c.as<AboveVar>()->lock);
        var_index(c.as<AboveVar>()->var.var);
      }
    }
    for (const auto& [v, o] : env.origin) var_index(v);
    n_ = locks_.size();
    ground_.assign(n_, Bits(n_));
    below_vars_.assign(n_, {});
    above_vars_.assign(n_, {});
    var_lock_.assign(vars_.size(), -1);
    var_upper_.assign(vars_.size(), false);
    domain_.assign(vars_.size(), Bits(n_));
    for (const auto& [l, k] : env.base.locks) {
      std::size_t y = lidx_.at(l);
      for (const auto& u : k.below.locks) ground_[lidx_.at(u)].set(y);
      for (const auto& u : k.above.locks) ground_[y].set(lidx_.at(u));
      for (const auto& r : k.below.vars) {
        std::size_t v = vidx_.at(r.var);
        below_vars_[y].push_back(v);
        var_lock_[v] = static_cast<int>(y);
      }
      for (const auto& r : k.above.vars) {
        std::size_t v = vidx_.at(r.var);
        above_vars_[y].push_back(v);
        var_lock_[v] = static_cast<int>(y);
        var_upper_[v] = true;
      }
    }
    for (std::size_t v = 0; v < vars_.size(); ++v) {
      auto it = env.domain.find(vars_[v]);
      for (std::size_t u = 0; u < n_; ++u)
        if (it == env.domain.end() || it->second.count(locks_[u])) domain_[v].set(u);
    }
    confined_ = confined();
  }

  using Theta = std::vector<Bits>;
  struct Req {
    int from;  // -1: lock outside the universe
    int to;
    std::size_t constraint;
  };

  Theta empty_theta() const { return Theta(vars_.size(), Bits(n_)); }

  std::vector<Bits> closure(const Theta& th) const {
    std::vector<Bits> reach = ground_;
    for (std::size_t v = 0; v < vars_.size(); ++v) {
      if (var_lock_[v] < 0) continue;
      auto y = static_cast<std::size_t>(var_lock_[v]);
      for (std::size_t u = 0; u < n_; ++u) {
        if (!th[v].test(u)) continue;
        if (var_upper_[v]) reach[y].set(u);
        else reach[u].set(y);
      }
    }
    for (std::size_t k = 0; k < n_; ++k)
      for (std::size_t i = 0; i < n_; ++i)
        if (reach[i].test(k)) reach[i].merge(reach[k]);
    return reach;
  }

  /// Requirements lam < mu that theta currently imposes.
  std::vector<Req> requirements(const Theta& th) const {
    std::vector<Req> out;
    for (std::size_t ci = 0; ci < cs_.size(); ++ci) {
      const Constraint& c = cs_[ci];
      if (const auto* g = c.as<GroundBelow>()) {
        for (const auto& l : g->locks) out.push_back({lock_at(l), lock_at(g->lock), ci});
      } else if (const auto* vb = c.as<VarBelow>()) {
        std::size_t v = vidx_.at(vb->var.var);
        for (std::size_t u = 0; u < n_; ++u)
          if (th[v].test(u)) out.push_back({lock_at(subst_lock(locks_[u], vb->var.subst)), lock_at(vb->lock), ci});
      } else {
        const auto& a = *c.as<AboveVar>();
        std::size_t v = vidx_.at(a.var.var);
        for (std::size_t u = 0; u < n_; ++u)
          if (th[v].test(u)) out.push_back({lock_at(a.lock), lock_at(subst_lock(locks_[u], a.var.subst)), ci});
      }
    }
    return out;
  }

  /// Ways to add the edge x < y: (variable, element) pairs within scope.
  std::vector<std::pair<std::size_t, std::size_t>> options(const Theta& th, std::size_t x,
                                                           std::size_t y) const {
    std::vector<std::pair<std::size_t, std::size_t>> out;
    for (std::size_t v : below_vars_[y])
      if (domain_[v].test(x) && !th[v].test(x)) out.push_back({v, x});
    for (std::size_t v : above_vars_[x])
      if (domain_[v].test(y) && !th[v].test(y)) out.push_back({v, y});
    return out;
  }

  static int reflexive(const std::vector<Bits>& reach) {
    for (std::size_t i = 0; i < reach.size(); ++i)
      if (reach[i].test(i)) return static_cast<int>(i);
    return -1;
  }

  struct Failure {
    std::vector<LockSym> cycle;
    std::optional<std::size_t> constraint;
    std::string text;
  };

  /// Greedy least-fixed-point rounds; nullopt failure means theta satisfies every requirement.
  std::optional<Failure> propagate(Theta& th, SolveStats* stats) const {
    for (std::size_t round = 1;; ++round) {
      auto reach = closure(th);
      if (int x = reflexive(reach); x >= 0) return Failure{cycle_through(th, static_cast<std::size_t>(x)), std::nullopt, "lock order is cyclic"};
      bool changed = false;
      for (const auto& r : requirements(th)) {
        if (r.from < 0 || r.to < 0)
          return Failure{{}, r.constraint, "constraint mentions a lock outside the scope of the order"};
        if (r.from == r.to) return Failure{{locks_[r.from], locks_[r.from]}, r.constraint, "constraint requires " + locks_[r.from].name + " < " + locks_[r.from].name};
        if (reach[r.from].test(r.to)) continue;
        auto opts = options(th, r.from, r.to);
        if (opts.empty())
          return Failure{{}, r.constraint, "no lock kind in scope can order " + locks_[r.from].name + " < " + locks_[r.to].name};
        th[opts.front().first].set(opts.front().second);
        reach = closure(th);
        changed = true;
      }
      if (stats) {
        stats->rounds = round;
        stats->history.push_back(to_substitution(th));
      }
      if (!changed) {
        if (int x = reflexive(reach); x >= 0) return Failure{cycle_through(th, static_cast<std::size_t>(x)), std::nullopt, "lock order is cyclic"};
        return std::nullopt;
      }
    }
  }

  /// Orders every solution contains: GroundBelow goals and ground kinds, and
  /// each order between a callee's binders carried to its instantiation
  /// sites. A cycle among them proves the set unsolvable.
  std::optional<Failure> refute(std::vector<std::size_t>* used = nullptr) const {
    struct Why {
      int constraint = -1;  // GroundBelow behind the fact
      int site = -1;        // or the site it was carried through, from callee pair (i, j)
      std::size_t i = 0, j = 0, pass = 0;
    };
    std::vector<Bits> direct = ground_;
    std::map<std::pair<std::size_t, std::size_t>, Why> why;
    for (const auto& r : requirements(empty_theta())) {
      if (r.from < 0 || r.to < 0) continue;
      if (r.from == r.to) {
        if (used) used->assign(1, r.constraint);
        return Failure{{locks_[r.from], locks_[r.from]}, r.constraint,
                       "constraint requires " + locks_[r.from].name + " < " + locks_[r.from].name};
      }
      direct[r.from].set(r.to);
      why.emplace(std::pair<std::size_t, std::size_t>(r.from, r.to), Why{static_cast<int>(r.constraint)});
    }
    auto sites = instantiation_sites();
    for (std::size_t pass = 1;; ++pass) {
      auto reach = direct;
      for (std::size_t k = 0; k < n_; ++k)
        for (std::size_t i = 0; i < n_; ++i)
          if (reach[i].test(k)) reach[i].merge(reach[k]);
      if (int x = reflexive(reach); x >= 0) {
        auto cycle = path_back(direct, static_cast<std::size_t>(x));
        if (used) {
          std::set<std::size_t> cis;
          std::vector<std::pair<std::size_t, std::size_t>> todo;
          for (std::size_t k = 0; k + 1 < cycle.size(); ++k) todo.push_back({lidx_.at(cycle[k]), lidx_.at(cycle[k + 1])});
          std::set<std::pair<std::size_t, std::size_t>> done;
          while (!todo.empty()) {
            auto e = todo.back();
            todo.pop_back();
            if (!done.insert(e).second) continue;
            auto it = why.find(e);
            if (it == why.end()) continue;
            const Why& w = it->second;
            if (w.constraint >= 0) cis.insert(static_cast<std::size_t>(w.constraint));
            if (w.site < 0) continue;
            const auto& via = sites[w.site].carried.at({w.i, w.j});
            cis.insert(via.begin(), via.end());
            // the callee order came from facts of earlier passes
            std::vector<Bits> older(n_, Bits(n_));
            for (std::size_t a = 0; a < n_; ++a)
              for (std::size_t b = 0; b < n_; ++b) {
                if (!direct[a].test(b)) continue;
                auto wi = why.find({a, b});
                if (wi == why.end() || wi->second.pass < w.pass) older[a].set(b);
              }
            auto path = path_to(older, w.i, w.j);
            for (std::size_t k = 0; k + 1 < path.size(); ++k) todo.push_back({path[k], path[k + 1]});
          }
          used->assign(cis.begin(), cis.end());
        }
        return Failure{std::move(cycle), std::nullopt, "lock order is cyclic"};
      }
      bool changed = false;
      for (std::size_t si = 0; si < sites.size(); ++si)
        for (const auto& entry : sites[si].carried) {
          auto [i, j] = entry.first;
          std::size_t a = sites[si].sigma.at(i), b = sites[si].sigma.at(j);
          if (reach[i].test(j) && !direct[a].test(b) && !reach[a].test(b)) {
            direct[a].set(b);
            why.emplace(std::pair<std::size_t, std::size_t>(a, b), Why{-1, static_cast<int>(si), i, j, pass});
            changed = true;
          }
        }
      if (!changed) return std::nullopt;
    }
  }

  /// Complete search over theta, growing it one element at a time along the
  /// first unmet requirement.
  std::optional<Theta> search(SolveStats& stats, std::size_t limit) const {
    std::unordered_set<std::string> seen;
    Theta th = empty_theta();
    std::optional<Theta> found;
    dfs(th, seen, stats, limit, found);
    return found;
  }

  Substitution to_substitution(const Theta& th) const {
    Substitution out;
    for (std::size_t v = 0; v < vars_.size(); ++v) {
      Permission p;
      for (std::size_t u = 0; u < n_; ++u)
        if (th[v].test(u)) p.insert(locks_[u]);
      out[vars_[v]] = std::move(p);
    }
    return out;
  }

  std::vector<std::pair<LockSym, LockSym>> order_pairs(const Theta& th) const {
    auto reach = closure(th);
    std::vector<std::pair<LockSym, LockSym>> out;
    for (std::size_t i = 0; i < n_; ++i)
      for (std::size_t j = 0; j < n_; ++j)
        if (reach[i].test(j)) out.push_back({locks_[i], locks_[j]});
    return out;
  }

  const ConstraintSet& constraints() const { return cs_; }

 private:
  std::size_t lock_index(const LockSym& l) {
    auto [it, fresh] = lidx_.emplace(l, locks_.size());
    if (fresh) locks_.push_back(l);
    return it->second;
  }
  void var_index(const PermVar& v) {
    auto [it, fresh] = vidx_.emplace(v, vars_.size());
    if (fresh) vars_.push_back(v);
  }
  int lock_at(const LockSym& l) const {
    auto it = lidx_.find(l);
    return it == lidx_.end() ? -1 : static_cast<int>(it->second);
  }

  static std::string key(const Theta& th) {
    std::string k;
    for (const auto& b : th)
      for (auto w : b.words()) k.append(reinterpret_cast<const char*>(&w), sizeof w);
    return k;
  }

  bool dfs(Theta& th, std::unordered_set<std::string>& seen, SolveStats& stats, std::size_t limit,
           std::optional<Theta>& found) const {
    if (!seen.insert(key(th)).second) return false;
    if (++stats.search_states > limit) {
      stats.exhaustive = false;
      return false;
    }
    auto reach = closure(th);
    if (reflexive(reach) >= 0) return false;
    std::optional<Req> unmet;
    for (const auto& r : requirements(th)) {
      if (r.from < 0 || r.to < 0 || r.from == r.to) return false;
      if (!reach[r.from].test(r.to)) {
        unmet = r;
        break;
      }
    }
    if (!unmet) {
      found = th;
      return true;
    }
    auto a = static_cast<std::size_t>(unmet->from);
    auto b = static_cast<std::size_t>(unmet->to);
    // the first missing edge of any path a ->* b leaves a's current reach
    std::vector<std::pair<std::size_t, std::size_t>> cands = options(th, a, b);
    for (std::size_t x = 0; x < n_; ++x) {
      if (x != a && !reach[a].test(x)) continue;
      for (std::size_t y = 0; y < n_; ++y) {
        if (x == a && y == b) continue;
        if (reach[x].test(y)) continue;
        for (const auto& o : options(th, x, y)) cands.push_back(o);
      }
    }
    for (const auto& [v, u] : cands) {
      Theta next = th;
      next[v].set(u);
      if (dfs(next, seen, stats, limit, found)) return true;
      if (!stats.exhaustive) return false;
    }
    return false;
  }

  std::vector<LockSym> cycle_through(const Theta& th, std::size_t x) const {
    std::vector<Bits> direct = ground_;
    for (std::size_t v = 0; v < vars_.size(); ++v) {
      if (var_lock_[v] < 0) continue;
      auto y = static_cast<std::size_t>(var_lock_[v]);
      for (std::size_t u = 0; u < n_; ++u) {
        if (!th[v].test(u)) continue;
        if (var_upper_[v]) direct[y].set(u);
        else direct[u].set(y);
      }
    }
    return path_back(direct, x);
  }

  // BFS over edges from x to y, as lock indices
  std::vector<std::size_t> path_to(const std::vector<Bits>& edges, std::size_t x, std::size_t y) const {
    std::vector<int> prev(n_, -1);
    std::vector<bool> seen(n_, false);
    std::vector<std::size_t> queue{x};
    seen[x] = true;
    for (std::size_t qi = 0; qi < queue.size(); ++qi) {
      std::size_t u = queue[qi];
      if (u == y) break;
      for (std::size_t w = 0; w < n_; ++w)
        if (edges[u].test(w) && !seen[w]) {
          seen[w] = true;
          prev[w] = static_cast<int>(u);
          queue.push_back(w);
        }
    }
    if (!seen[y]) return {};
    std::vector<std::size_t> path{y};
    for (std::size_t k = y; k != x; k = static_cast<std::size_t>(prev[k])) path.push_back(static_cast<std::size_t>(prev[k]));
    std::reverse(path.begin(), path.end());
    return path;
  }

  // BFS over direct edges from x back to x
  std::vector<LockSym> path_back(const std::vector<Bits>& direct, std::size_t x) const {
    std::vector<int> prev(n_, -1);
    std::vector<std::size_t> queue{x};
    std::vector<bool> seen(n_, false);
    for (std::size_t qi = 0; qi < queue.size(); ++qi) {
      std::size_t u = queue[qi];
      for (std::size_t w = 0; w < n_; ++w) {
        if (!direct[u].test(w)) continue;
        if (w == x) {
          std::vector<LockSym> path{locks_[x]};
          for (std::size_t k = u; k != x; k = static_cast<std::size_t>(prev[k])) path.push_back(locks_[k]);
          std::reverse(path.begin() + 1, path.end());
          path.push_back(locks_[x]);
          return path;
        }
        if (!seen[w]) {
          seen[w] = true;
          prev[w] = static_cast<int>(u);
          queue.push_back(w);
        }
      }
    }
    return {locks_[x], locks_[x]};
  }

  static constexpr std::size_t kNoGroup = static_cast<std::size_t>(-1);

  std::size_t group_of(std::size_t y) const {
    auto it = env_.group.find(locks_[y]);
    return it == env_.group.end() ? kNoGroup : it->second;
  }

  // every kind edge joins two locks of one group, so a path between binders
  // of a block never leaves the block
  bool confined() const {
    for (std::size_t v = 0; v < vars_.size(); ++v) {
      if (var_lock_[v] < 0 || !env_.domain.count(vars_[v])) return false;
      std::size_t g = group_of(static_cast<std::size_t>(var_lock_[v]));
      if (g == kNoGroup) return false;
      for (std::size_t u = 0; u < n_; ++u)
        if (domain_[v].test(u) && group_of(u) != g) return false;
    }
    for (const auto& [l, k] : env_.base.locks) {
      std::size_t g = group_of(lidx_.at(l));
      for (const auto* b : {&k.below, &k.above}) {
        for (const auto& u : b->locks)
          if (group_of(lidx_.at(u)) != g) return false;
        for (const auto& r : b->vars)
          if (!r.subst.empty()) return false;
      }
    }
    return true;
  }

  /// Binder-to-argument maps of the type applications the constraints
  /// describe. A callee order i < j is carried to a site only when every
  /// edge that could lie on a path from i to j is checked there.
  struct Site {
    std::map<std::size_t, std::size_t> sigma;
    std::map<std::pair<std::size_t, std::size_t>, std::vector<std::size_t>> carried;  // pair -> constraints used
  };

  std::vector<Site> instantiation_sites() const {
    std::vector<Site> out;
    if (!confined_) return out;
    std::map<std::tuple<std::string, int, int, std::size_t>, std::vector<std::size_t>> by_site;
    for (std::size_t ci = 0; ci < cs_.size(); ++ci) {
      const Constraint& c = cs_[ci];
      const VarRef* ref = nullptr;
      if (const auto* vb = c.as<VarBelow>()) ref = &vb->var;
      else if (const auto* av = c.as<AboveVar>()) ref = &av->var;
      if (!ref) continue;
      int y = var_lock_[vidx_.at(ref->var)];
      if (y < 0) continue;
      by_site[{c.span.file, c.span.line, c.span.column, group_of(static_cast<std::size_t>(y))}].push_back(ci);
    }
    for (const auto& [key, cis] : by_site) {
      std::size_t g = std::get<3>(key);
      Site site;
      std::map<std::size_t, std::size_t> anchor;  // a constraint binding each binder
      bool ok = true;
      for (std::size_t ci : cis) {
        const Constraint& c = cs_[ci];
        const auto* vb = c.as<VarBelow>();
        const LockSym& arg = vb ? vb->lock : c.as<AboveVar>()->lock;
        std::size_t v = vidx_.at(vb ? vb->var.var : c.as<AboveVar>()->var.var);
        auto y = static_cast<std::size_t>(var_lock_[v]);
        auto bind = [&](std::size_t from, int to) {
          if (to < 0) {
            ok = false;
            return;
          }
          auto [it, fresh] = site.sigma.emplace(from, static_cast<std::size_t>(to));
          if (!fresh && it->second != static_cast<std::size_t>(to)) ok = false;
          anchor.emplace(from, ci);
        };
        bind(y, lock_at(arg));
        const VarRef& ref = vb ? vb->var : c.as<AboveVar>()->var;
        for (std::size_t u = 0; u < n_; ++u)
          if (domain_[v].test(u)) bind(u, lock_at(subst_lock(locks_[u], ref.subst)));
      }
      if (!ok) continue;
      // checked[v]: the constraint at this site that maps every edge of v
      std::map<std::size_t, std::size_t> checked;
      for (std::size_t ci : cis) {
        const Constraint& c = cs_[ci];
        const auto* vb = c.as<VarBelow>();
        const VarRef& ref = vb ? vb->var : c.as<AboveVar>()->var;
        std::size_t v = vidx_.at(ref.var);
        if (var_upper_[v] == (vb != nullptr)) continue;
        bool agrees = true;
        for (std::size_t u = 0; u < n_ && agrees; ++u)
          if (domain_[v].test(u))
            agrees = site.sigma.count(u) &&
                     lock_at(subst_lock(locks_[u], ref.subst)) == static_cast<int>(site.sigma.at(u));
        if (agrees) checked.emplace(v, ci);
      }
      std::vector<std::size_t> members;
      for (std::size_t y = 0; y < n_; ++y)
        if (group_of(y) == g) members.push_back(y);
      struct Edge {
        std::size_t from, to;
        int var;  // -1 for a ground kind edge
      };
      std::vector<Edge> edges;
      std::vector<Bits> possible(n_, Bits(n_));
      for (std::size_t y : members) {
        for (std::size_t u : members)
          if (ground_[u].test(y)) edges.push_back({u, y, -1});
        for (std::size_t v : below_vars_[y])
          for (std::size_t u : members)
            if (domain_[v].test(u)) edges.push_back({u, y, static_cast<int>(v)});
        for (std::size_t v : above_vars_[y])
          for (std::size_t u : members)
            if (domain_[v].test(u)) edges.push_back({y, u, static_cast<int>(v)});
      }
      for (const auto& e : edges) possible[e.from].set(e.to);
      for (std::size_t k : members)
        for (std::size_t i : members)
          if (possible[i].test(k)) possible[i].merge(possible[k]);
      auto on_path = [&](std::size_t i, std::size_t j, const Edge& e) {
        return (e.from == i || possible[i].test(e.from)) && (e.to == j || possible[e.to].test(j));
      };
      for (const auto& [i, a] : site.sigma)
        for (const auto& [j, b] : site.sigma) {
          if (i == j || group_of(i) != g || group_of(j) != g) continue;
          std::set<std::size_t> used;
          std::set<std::size_t> ends{i, j};
          bool carried = true;
          for (const auto& e : edges) {
            if (!on_path(i, j, e)) continue;
            auto ck = e.var < 0 ? checked.end() : checked.find(static_cast<std::size_t>(e.var));
            if (ck == checked.end() || !site.sigma.count(e.from) || !site.sigma.count(e.to)) {
              carried = false;
              break;
            }
            used.insert(ck->second);
            ends.insert(e.from);
            ends.insert(e.to);
          }
          if (!carried) continue;
          // every binder the proof maps must still be bound by what it keeps
          std::set<std::size_t> bound;
          for (std::size_t ci : used) {
            const auto* vb = cs_[ci].as<VarBelow>();
            std::size_t v = vidx_.at(vb ? vb->var.var : cs_[ci].as<AboveVar>()->var.var);
            bound.insert(static_cast<std::size_t>(var_lock_[v]));
            for (std::size_t u = 0; u < n_; ++u)
              if (domain_[v].test(u)) bound.insert(u);
          }
          for (std::size_t y : ends)
            if (!bound.count(y)) used.insert(anchor.at(y));
          site.carried[{i, j}].assign(used.begin(), used.end());
        }
      if (!site.carried.empty()) out.push_back(std::move(site));
    }
    return out;
  }

  const VarTypingEnv& env_;
  const ConstraintSet& cs_;
  bool confined_ = false;
  std::vector<LockSym> locks_;
  std::map<LockSym, std::size_t> lidx_;
  std::vector<PermVar> vars_;
  std::map<PermVar, std::size_t> vidx_;
  std::size_t n_ = 0;
  std::vector<Bits> ground_;
  std::vector<std::vector<std::size_t>> below_vars_, above_vars_;
  std::vector<int> var_lock_;
  std::vector<bool> var_upper_;
  std::vector<Bits> domain_;
};

inline Witness make_witness(const SolverCore::Failure& f, const ConstraintSet& cs) {
  Witness w;
  w.cycle = f.cycle;
  if (f.constraint) w.goal = cs[*f.constraint];
  w.text = f.text;
  if (!f.cycle.empty()) {
    w.text += ": ";
    for (std::size_t i = 0; i < f.cycle.size(); ++i) w.text += (i ? " < " : "") + f.cycle[i].name;
  }
  if (w.goal) w.text += " (constraint " + to_string(*w.goal) + ")";
  return w;
}

inline std::optional<Substitution> solve_theta(const SolverCore& core, SolveStats& stats,
                                               std::size_t limit,
                                               std::optional<SolverCore::Failure>* failure) {
  auto th = core.empty_theta();
  auto f = core.propagate(th, &stats);
  if (!f) {
    stats.propagated = true;
    return core.to_substitution(th);
  }
  if (failure) *failure = f;
  if (auto r = core.refute()) {
    stats.refuted = true;
    if (failure) *failure = r;
    return std::nullopt;
  }
  if (auto found = core.search(stats, limit)) return core.to_substitution(*found);
  return std::nullopt;
}

}  // namespace detail

/// Propagation only: theta after each round, for inspection.
inline std::pair<Substitution, SolveStats> propagate(const VarTypingEnv& env, const ConstraintSet& cs) {
  detail::SolverCore core(env, cs);
  SolveStats stats;
  auto th = core.empty_theta();
  core.propagate(th, &stats);
  return {core.to_substitution(th), stats};
}

inline SolveOutcome solve(const VarTypingEnv& env, const ConstraintSet& cs, const SolveOptions& opts = {}) {
  SolveOutcome out;
  detail::SolverCore core(env, cs);
  std::optional<detail::SolverCore::Failure> failure;
  auto theta = detail::solve_theta(core, out.stats, opts.search_limit, &failure);
  if (theta && verify(apply_theta(env, *theta), cs, *theta)) {
    Solved s;
    s.theta = std::move(*theta);
    TypingEnv ground = apply_theta(env, s.theta);
    LockOrder order(ground);
    for (const auto& [a, ka] : ground.locks)
      for (const auto& [b, kb] : ground.locks)
        if (order.less(a, b)) s.induced_order.push_back({a, b});
    out.result = std::move(s);
    return out;
  }
  Unsolvable u;
  u.core = cs;
  std::vector<std::size_t> used;
  if (opts.core && out.stats.refuted && core.refute(&used)) {
    // the constraints the refutation used are already unsolvable
    ConstraintSet proof;
    for (std::size_t i : used) proof.push_back(cs[i]);
    u.core = std::move(proof);
  }
  if (opts.core) {
    // greedy deletion: a constraint goes only when the rest is still provably unsolvable
    for (std::size_t i = u.core.size(); i-- > 0;) {
      ConstraintSet trial = u.core;
      trial.erase(trial.begin() + static_cast<std::ptrdiff_t>(i));
      detail::SolverCore tc(env, trial);
      SolveStats st;
      if (!detail::solve_theta(tc, st, std::min(opts.search_limit, opts.core_trial_limit), nullptr) && st.exhaustive)
        u.core = std::move(trial);
    }
  }
  detail::SolverCore cc(env, u.core);
  auto th = cc.empty_theta();
  if (auto r = cc.refute()) u.witness = detail::make_witness(*r, u.core);
  else if (auto f = cc.propagate(th, nullptr)) u.witness = detail::make_witness(*f, u.core);
  else if (failure) u.witness = detail::make_witness(*failure, cs);
  if (!out.stats.exhaustive) u.witness.text += " (search limit reached)";
  out.result = std::move(u);
  return out;
}

// ---------------------------------------------------------------------------
// W

struct InferResult {
  TypingEnv env;          // Psi-theta over the labels of the output
  Heap program;           // H-star-theta; empty in fast mode
  ConstraintSet constraints;
  std::size_t vars = 0;
  Substitution theta;
  std::vector<std::pair<LockSym, LockSym>> induced_order;
};

struct InferOptions {
  bool fast = false;          // accept/reject only
  bool check_result = true;   // assert Psi |- H-star on the output
  SolveOptions solve;
};

struct InferOutcome {
  Annotation annotation;
  std::optional<SolveOutcome> solve;
  std::optional<InferResult> result;

  bool structural_error() const { return !annotation.errors.empty(); }
  bool accepted() const { return solve && solve->solved(); }
};

/// Thrown when the output of inference does not typecheck.
struct SoundnessViolation : std::logic_error {
  explicit SoundnessViolation(const std::string& what, std::vector<TypeError> errs)
      : std::logic_error(what), errors(std::move(errs)) {}
  std::vector<TypeError> errors;
};

inline InferOutcome infer(const Heap& program, const InferOptions& opts = {}) {
  InferOutcome out;
  out.annotation = annotate_program(program);
  if (out.structural_error()) return out;
  out.solve = solve(out.annotation.env, out.annotation.constraints, opts.solve);
  if (!out.solve->solved()) return out;
  InferResult r;
  r.constraints = out.annotation.constraints;
  r.vars = out.annotation.vars;
  r.theta = out.solve->solution().theta;
  r.induced_order = out.solve->solution().induced_order;
  if (!opts.fast) {
    r.program = apply_theta(out.annotation.program, r.theta);
    r.env = program_env(r.program);
    if (opts.check_result) {
      auto errs = check_heap(r.env, r.program);
      if (!errs.empty())
        throw SoundnessViolation("inferred program does not typecheck: " + to_diagnostic(errs.front()).message,
                                 std::move(errs));
    }
  }
  out.result = std::move(r);
  return out;
}

}  // namespace milc
