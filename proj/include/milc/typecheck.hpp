#pragma once

// The deadlock-prevention type system: lock order, values, instructions,
// heaps.

#include <deque>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "milc/ast.hpp"
#include "milc/constraint.hpp"
#include "milc/print.hpp"

namespace milc {

struct TypingEnv {
  std::map<Label, MilType> labels;
  std::map<LockSym, LockKind> locks;

  bool has_lock(const LockSym& l) const { return locks.count(l) != 0; }
  const MilType* label_type(const Label& l) const {
    auto it = labels.find(l);
    return it == labels.end() ? nullptr : &it->second;
  }
};

/// Labels of every code block mapped to its signature.
inline TypingEnv program_env(const Heap& program) {
  TypingEnv env;
  for (const auto& [label, hv] : program)
    if (const auto* cb = hv.as<CodeBlock>()) env.labels.emplace(label, cb->sig);
  return env;
}

struct UnboundLock : std::invalid_argument {
  explicit UnboundLock(const LockSym& l)
      : std::invalid_argument("unbound lock '" + l.name + "'"), lock(l) {}
  LockSym lock;
};

/// The order induced by the lock kinds of an environment: mu -> lam for mu in
/// below(lam), lam -> mu for mu in above(lam), closed under reachability.
class LockOrder {
 public:
  explicit LockOrder(const TypingEnv& env) : env_(&env) {
    for (const auto& [l, k] : env.locks) {
      for (const auto& mu : k.below.locks) succ_[mu].insert(l);
      for (const auto& mu : k.above.locks) succ_[l].insert(mu);
    }
  }

  /// a < b, i.e. a nonempty path from a to b.
  bool less(const LockSym& a, const LockSym& b) const {
    require(a);
    require(b);
    std::set<LockSym> seen;
    std::deque<LockSym> work{a};
    while (!work.empty()) {
      LockSym cur = work.front();
      work.pop_front();
      auto it = succ_.find(cur);
      if (it == succ_.end()) continue;
      for (const auto& n : it->second) {
        if (n == b) return true;
        if (seen.insert(n).second) work.push_back(n);
      }
    }
    return false;
  }
  bool less(const Permission& lhs, const LockSym& b) const {
    require(b);
    for (const auto& a : lhs)
      if (!less(a, b)) return false;
    return true;
  }
  bool less(const LockSym& a, const Permission& rhs) const {
    require(a);
    for (const auto& b : rhs)
      if (!less(a, b)) return false;
    return true;
  }
  bool less(const Permission& lhs, const Permission& rhs) const {
    for (const auto& a : lhs) require(a);
    for (const auto& b : rhs) require(b);
    for (const auto& a : lhs)
      for (const auto& b : rhs)
        if (!less(a, b)) return false;
    return true;
  }

  /// Some bound lock with lam < lam, if any.
  std::optional<LockSym> reflexive() const {
    for (const auto& [l, k] : env_->locks)
      if (less(l, l)) return l;
    return std::nullopt;
  }

 private:
  void require(const LockSym& l) const {
    if (!env_->has_lock(l)) throw UnboundLock(l);
  }

  const TypingEnv* env_;
  std::map<LockSym, std::set<LockSym>> succ_;
};

/// Psi |- lhs < rhs. Throws UnboundLock when a lock is not bound in env.
template <class L, class R>
bool less_than(const TypingEnv& env, const L& lhs, const R& rhs) {
  return LockOrder(env).less(lhs, rhs);
}

/// The failed goal of an E-ORDER error: lhs < rhs.
struct OrderGoal {
  Permission lhs;
  LockSym rhs;
  friend bool operator==(const OrderGoal&, const OrderGoal&) = default;
};

struct TypeError {
  std::string code;
  SourceSpan span;
  std::string message;
  std::optional<OrderGoal> goal;  // E-ORDER only
  std::string block;              // enclosing code block, when known
};

inline Diagnostic to_diagnostic(const TypeError& e) {
  std::string msg = e.message;
  if (!e.block.empty()) msg += " (in block '" + e.block + "')";
  return {Severity::Error, e.span, e.code, msg};
}

/// Either a value or a type error.
template <class T>
struct Checked {
  std::optional<T> value;
  std::optional<TypeError> error;
  bool ok() const { return value.has_value(); }
  explicit operator bool() const { return ok(); }
};

struct CheckContext {
  TypingEnv env;
  RegFileType regs;
  Permission perm;
};

/// Typing context before instruction `pc` (the last entry is the terminator).
struct ContextSnapshot {
  RegFileType regs;
  Permission perm;
};
using ContextTrace = std::vector<ContextSnapshot>;

namespace detail {

struct TypeFailure {
  TypeError error;
};

[[noreturn]] inline void type_fail(const std::string& code, const SourceSpan& span,
                                   const std::string& msg,
                                   std::optional<OrderGoal> goal = std::nullopt) {
  throw TypeFailure{{code, span, msg, std::move(goal), {}}};
}

inline void require_bound(const TypingEnv& env, const LockSym& l, const SourceSpan& span) {
  if (!env.has_lock(l)) type_fail("E-UNBOUND", span, "unbound lock '" + l.name + "'");
}

inline void require_bound(const TypingEnv& env, const std::set<LockSym>& ls,
                          const SourceSpan& span) {
  for (const auto& l : ls) require_bound(env, l, span);
}

inline void require_wellformed(const TypingEnv& env, const MilType& t, const SourceSpan& span) {
  require_bound(env, free_locks(t), span);
}

/// While set, lock-order goals are recorded here instead of checked.
inline ConstraintSet*& constraint_sink() {
  thread_local ConstraintSet* sink = nullptr;
  return sink;
}

struct SinkGuard {
  ConstraintSet* saved;
  explicit SinkGuard(ConstraintSet* s) : saved(constraint_sink()) { constraint_sink() = s; }
  ~SinkGuard() { constraint_sink() = saved; }
  SinkGuard(const SinkGuard&) = delete;
  SinkGuard& operator=(const SinkGuard&) = delete;
};

inline void emit_interval(ConstraintSet& out, const LockKind& k, const LockSym& lam,
                          const SourceSpan& span) {
  if (!k.below.locks.empty()) out.push_back({GroundBelow{k.below.locks, lam}, span});
  for (const auto& v : k.below.vars) out.push_back({VarBelow{v, lam}, span});
  for (const auto& mu : k.above.locks) out.push_back({GroundBelow{{lam}, mu}, span});
  for (const auto& v : k.above.vars) out.push_back({AboveVar{lam, v}, span});
}

/// Psi |- Lambda1 < lam < Lambda2, failing with the first unsatisfied goal.
inline void require_interval(const TypingEnv& env, const LockKind& k, const LockSym& lam,
                             const SourceSpan& span) {
  if (auto* sink = constraint_sink()) return emit_interval(*sink, k, lam, span);
  LockOrder order(env);
  if (!order.less(k.below.locks, lam)) {
    type_fail("E-ORDER", span,
              "lock order violated: " + to_string(k.below.locks) + " < " + lam.name +
                  " is not derivable",
              OrderGoal{k.below.locks, lam});
  }
  for (const auto& mu : k.above.locks) {
    if (!order.less(lam, mu)) {
      type_fail("E-ORDER", span,
                "lock order violated: {" + lam.name + "} < " + mu.name + " is not derivable",
                OrderGoal{{lam}, mu});
    }
  }
}

inline void require_acyclic(const TypingEnv& env, const LockSym& l, const SourceSpan& span) {
  if (constraint_sink()) return;
  if (LockOrder(env).less(l, l))
    type_fail("E-ORDER-CYCLE", span, "lock order is cyclic: " + l.name + " < " + l.name);
}

inline MilType synth_value(const TypingEnv& env, const RegFileType& regs, const Value& v,
                           const SourceSpan& span) {
  if (const auto* r = v.as<RegValue>()) {
    auto it = regs.entries.find(r->reg);
    if (it == regs.entries.end())
      type_fail("E-UNBOUND", span, "register " + to_string(r->reg) + " has no type");
    return it->second;
  }
  if (v.is<IntValue>()) return int_type();
  if (const auto* lit = v.as<LockLit>()) {
    if (lit->lock.tag) {
      require_bound(env, *lit->lock.tag, span);
      return lock_type(*lit->lock.tag);
    }
    type_fail("E-TYPE", span, "lock literal " + to_string(lit->lock) + " has no principal type");
  }
  if (const auto* lbl = v.as<LabelValue>()) {
    const MilType* t = env.label_type(lbl->label);
    if (!t) type_fail("E-UNBOUND", span, "unbound label '" + lbl->label.name + "'");
    return *t;
  }
  if (const auto* u = v.as<UninitValue>()) {
    require_wellformed(env, u->type, span);
    return u->type;
  }
  const auto& app = *v.as<TypeAppValue>();
  MilType base = synth_value(env, regs, *app.base, span);
  const auto* fa = base.as<ForallType>();
  if (!fa)
    type_fail("E-TYPE", span,
              "type application " + to_string(v) + " to a value of type " + to_string(base));
  require_bound(env, app.arg, span);
  if (!fa->kind)
    type_fail("E-UNANNOTATED", span,
              "binder '" + fa->binder.name + "' has no lock-order annotation");
  require_interval(env, *fa->kind, app.arg, span);
  return subst_type(*fa->body, {{fa->binder, app.arg}});
}

/// Psi;Gamma |- v : expected. Untagged lock literals inhabit every lock type.
inline bool value_has_type(const TypingEnv& env, const RegFileType& regs, const Value& v,
                           const MilType& expected, const SourceSpan& span = {}) {
  if (const auto* lit = v.as<LockLit>(); lit && !lit->lock.tag) {
    const auto* lt = expected.as<LockType>();
    return lt && env.has_lock(lt->lock);
  }
  try {
    return same_type(synth_value(env, regs, v, span), expected);
  } catch (const TypeFailure&) {
    return false;
  }
}

inline bool subtype(const RegFileType& sub, const RegFileType& sup) {
  for (const auto& [r, t] : sup.entries) {
    auto it = sub.entries.find(r);
    if (it == sub.entries.end() || !same_type(it->second, t)) return false;
  }
  return true;
}

inline std::string perm_diff(const Permission& a, const Permission& b) {
  return to_string(a) + " vs " + to_string(b);
}

inline const CodeType& expect_code(const MilType& t, const Value& v, const SourceSpan& span) {
  const auto* c = t.as<CodeType>();
  if (!c)
    type_fail("E-TYPE", span,
              "expected a code type for " + to_string(v) + ", found " + to_string(t));
  return *c;
}

inline void require_subtype(const RegFileType& sub, const RegFileType& sup,
                            const SourceSpan& span) {
  if (!subtype(sub, sup))
    type_fail("E-SUBTYPE", span,
              "register file " + to_string(sub) + " is not a subtype of " + to_string(sup));
}

inline bool is_lock_cell(const MilType& t) { return t.is<LockType>(); }

inline LockSym expect_lock_tuple(const MilType& t, const Value& v, const SourceSpan& span) {
  const auto* tt = t.as<TupleType>();
  if (tt && tt->cells.size() == 1) {
    const auto* lt = tt->cells[0].as<LockType>();
    if (lt && lt->lock == tt->guard) return tt->guard;
  }
  type_fail("E-TYPE", span, "expected a lock, " + to_string(v) + " has type " + to_string(t));
}

/// Psi;Gamma;Lambda |- I, mutating the context as the rules thread it.
inline void check_seq(TypingEnv env, RegFileType regs, Permission perm, const InstrSeq& seq,
                      ContextTrace* trace) {
  for (const auto& ins : seq.body) {
    if (trace) trace->push_back({regs, perm});
    const SourceSpan& sp = ins.span;
    std::visit(
        [&](const auto& n) {
          using N = std::decay_t<decltype(n)>;
          if constexpr (std::is_same_v<N, MoveInstr>) {
            regs.entries[n.dst] = synth_value(env, regs, n.src, sp);
          } else if constexpr (std::is_same_v<N, ArithInstr>) {
            MilType lhs = synth_value(env, regs, reg_value(n.lhs), sp);
            if (!lhs.is<IntType>())
              type_fail("E-TYPE", sp, to_string(n.lhs) + " is not an int");
            if (!value_has_type(env, regs, n.rhs, int_type(), sp)) {
              synth_value(env, regs, n.rhs, sp);
              type_fail("E-TYPE", sp, to_string(n.rhs) + " is not an int");
            }
            regs.entries[n.dst] = int_type();
          } else if constexpr (std::is_same_v<N, BranchInstr>) {
            auto it = regs.entries.find(n.reg);
            if (it == regs.entries.end())
              type_fail("E-UNBOUND", sp, "register " + to_string(n.reg) + " has no type");
            const auto* lit = n.operand.template as<LockLit>();
            if (const auto* lt = it->second.template as<LockType>();
                lt && lit && lit->lock.bit == LockBit::Open) {
              // jump to critical region
              const LockSym lam = lt->lock;
              MilType tt = synth_value(env, regs, n.target, sp);
              const CodeType& target = expect_code(tt, n.target, sp);
              Permission want = perm;
              if (perm.count(lam) || (want.insert(lam), target.perm != want))
                type_fail("E-PERM-MISMATCH", sp,
                          "critical region must require the current permission plus " + lam.name +
                              ": " + perm_diff(target.perm, want));
              require_subtype(regs, *target.regs, sp);
              if (auto* sink = constraint_sink())
                sink->push_back({GroundBelow{perm, lam}, sp});
              else if (!LockOrder(env).less(perm, lam))
                type_fail("E-ORDER", sp,
                          "lock order violated: " + to_string(perm) + " < " + lam.name +
                              " is not derivable",
                          OrderGoal{perm, lam});
            } else if (it->second.template is<IntType>()) {
              if (!value_has_type(env, regs, n.operand, int_type(), sp))
                type_fail("E-TYPE", sp, "branch operand " + to_string(n.operand) + " is not an int");
              MilType tt = synth_value(env, regs, n.target, sp);
              const CodeType& target = expect_code(tt, n.target, sp);
              if (target.perm != perm)
                type_fail("E-PERM-MISMATCH", sp,
                          "branch target permission differs: " + perm_diff(target.perm, perm));
              require_subtype(regs, *target.regs, sp);
            } else {
              type_fail("E-BRANCH", sp,
                        "cannot branch on " + to_string(n.reg) + " : " + to_string(it->second) +
                            " against " + to_string(n.operand));
            }
          } else if constexpr (std::is_same_v<N, ForkInstr>) {
            MilType tt = synth_value(env, regs, n.target, sp);
            const CodeType& target = expect_code(tt, n.target, sp);
            for (const auto& l : target.perm)
              if (!perm.count(l))
                type_fail("E-PERM-LEAK", sp,
                          "fork transfers " + to_string(target.perm) + " but the thread holds " +
                              to_string(perm));
            require_subtype(regs, *target.regs, sp);
            for (const auto& l : target.perm) perm.erase(l);
          } else if constexpr (std::is_same_v<N, MallocInstr>) {
            require_bound(env, n.guard, sp);
            for (const auto& c : n.cells) {
              require_wellformed(env, c, sp);
              if (is_lock_cell(c))
                type_fail("E-LOCK-ESCAPE", sp, "tuple cell of lock type " + to_string(c));
            }
            if (!perm.count(n.guard))
              type_fail("E-PERM-MISSING", sp, "malloc needs lock " + n.guard.name);
            regs.entries[n.dst] = tuple_type(n.cells, n.guard);
          } else if constexpr (std::is_same_v<N, LoadInstr>) {
            MilType st = synth_value(env, regs, n.src, sp);
            const auto* tt = st.as<TupleType>();
            if (!tt) type_fail("E-TYPE", sp, "load from non-tuple " + to_string(st));
            if (n.index < 1 || static_cast<std::size_t>(n.index) > tt->cells.size())
              type_fail("E-INDEX", sp, "index " + std::to_string(n.index) + " outside " + to_string(st));
            const MilType& cell = tt->cells[n.index - 1];
            if (is_lock_cell(cell)) type_fail("E-LOCK-ESCAPE", sp, "load of a lock value");
            if (!perm.count(tt->guard))
              type_fail("E-PERM-MISSING", sp, "load needs lock " + tt->guard.name);
            regs.entries[n.dst] = cell;
          } else if constexpr (std::is_same_v<N, StoreInstr>) {
            MilType dt = synth_value(env, regs, reg_value(n.dst), sp);
            const auto* tt = dt.as<TupleType>();
            if (!tt) type_fail("E-TYPE", sp, "store into non-tuple " + to_string(dt));
            if (n.index < 1 || static_cast<std::size_t>(n.index) > tt->cells.size())
              type_fail("E-INDEX", sp, "index " + std::to_string(n.index) + " outside " + to_string(dt));
            const MilType& cell = tt->cells[n.index - 1];
            if (is_lock_cell(cell)) type_fail("E-LOCK-ESCAPE", sp, "store of a lock value");
            if (!value_has_type(env, regs, n.src, cell, sp)) {
              MilType vt = synth_value(env, regs, n.src, sp);
              type_fail("E-TYPE", sp, "stored value has type " + to_string(vt) + ", cell has " + to_string(cell));
            }
            if (!perm.count(tt->guard))
              type_fail("E-PERM-MISSING", sp, "store needs lock " + tt->guard.name);
          } else if constexpr (std::is_same_v<N, NewLockInstr>) {
            if (!n.kind)
              type_fail("E-UNANNOTATED", sp, "newLock '" + n.binder.name + "' has no lock-order annotation");
            std::set<LockSym> in_regs;
            for (const auto& [r, t] : regs.entries) collect_free_locks(t, in_regs);
            if (env.has_lock(n.binder) || in_regs.count(n.binder) || perm.count(n.binder))
              type_fail("E-SHADOW", sp, "lock '" + n.binder.name + "' is not fresh");
            require_bound(env, n.kind->below.locks, sp);
            require_bound(env, n.kind->above.locks, sp);
            env.locks[n.binder] = *n.kind;
            require_acyclic(env, n.binder, sp);
            regs.entries[n.dst] = lock_tuple_type(n.binder);
          } else if constexpr (std::is_same_v<N, TslInstr>) {
            LockSym lam = expect_lock_tuple(synth_value(env, regs, n.lock, sp), n.lock, sp);
            if (perm.count(lam)) type_fail("E-TSL-HELD", sp, "testSetLock on held lock " + lam.name);
            regs.entries[n.dst] = lock_type(lam);
          } else {
            LockSym lam = expect_lock_tuple(synth_value(env, regs, n.lock, sp), n.lock, sp);
            if (!perm.count(lam))
              type_fail("E-UNLOCK-NOT-HELD", sp, "unlock of lock " + lam.name + " not held");
            perm.erase(lam);
          }
        },
        ins.node);
  }
  if (trace) trace->push_back({regs, perm});
  const SourceSpan& sp = seq.term_span;
  if (const auto* j = std::get_if<JumpTerm>(&seq.term)) {
    MilType tt = synth_value(env, regs, j->target, sp);
    const CodeType& target = expect_code(tt, j->target, sp);
    require_subtype(regs, *target.regs, sp);
    if (target.perm != perm)
      type_fail("E-PERM-MISMATCH", sp, "jump target permission differs: " + perm_diff(target.perm, perm));
  } else if (!perm.empty()) {
    type_fail("E-DONE-HOLDING", sp, "done while holding " + to_string(perm));
  }
}

/// Adds the forall binders of a signature to env, checking their kinds.
inline const CodeType& open_signature(TypingEnv& env, const MilType& sig, const SourceSpan& span) {
  auto view = view_signature(sig);
  if (!view) type_fail("E-TYPE", span, "code block signature is not a code type");
  for (const auto& b : view->binders) {
    if (!*b.kind)
      type_fail("E-UNANNOTATED", span, "binder '" + b.lock.name + "' has no lock-order annotation");
    if (env.has_lock(b.lock)) type_fail("E-SHADOW", span, "lock '" + b.lock.name + "' is not fresh");
    require_bound(env, (*b.kind)->below.locks, span);
    require_bound(env, (*b.kind)->above.locks, span);
    env.locks[b.lock] = **b.kind;
    require_acyclic(env, b.lock, span);
  }
  for (const auto& [r, t] : view->code->regs->entries) require_wellformed(env, t, span);
  require_bound(env, view->code->perm, span);
  return *view->code;
}

template <class F>
std::optional<TypeError> capture(F&& f) {
  try {
    f();
    return std::nullopt;
  } catch (const TypeFailure& e) {
    return e.error;
  }
}

}  // namespace detail

/// Value typing Psi;Gamma |- v : tau.
inline Checked<MilType> check_value(const TypingEnv& env, const RegFileType& regs, const Value& v,
                                    const SourceSpan& span = {}) {
  Checked<MilType> out;
  out.error = detail::capture([&] { out.value = detail::synth_value(env, regs, v, span); });
  return out;
}

/// Psi;Gamma |- v : tau in checking mode.
inline bool has_type(const TypingEnv& env, const RegFileType& regs, const Value& v,
                     const MilType& t) {
  return detail::value_has_type(env, regs, v, t);
}

/// Width subtyping: every entry of sup appears in sub with an identical type.
inline bool check_subtype(const TypingEnv&, const RegFileType& sub, const RegFileType& sup) {
  return detail::subtype(sub, sup);
}

inline std::optional<TypeError> check_instrs(const CheckContext& ctx, const InstrSeq& code,
                                             ContextTrace* trace = nullptr) {
  return detail::capture([&] { detail::check_seq(ctx.env, ctx.regs, ctx.perm, code, trace); });
}

/// Checks one code block: binders with their kinds enter Psi, then the body is
/// checked against the signature's Gamma and permission.
inline std::optional<TypeError> check_block(const TypingEnv& env, const Label& label,
                                            const CodeBlock& cb, ContextTrace* trace = nullptr,
                                            TypingEnv* opened = nullptr) {
  auto err = detail::capture([&] {
    TypingEnv inner = env;
    const CodeType& code = detail::open_signature(inner, cb.sig, cb.span);
    detail::check_seq(inner, *code.regs, code.perm, *cb.body, trace);
    if (opened) *opened = std::move(inner);
  });
  if (err) err->block = label.name;
  return err;
}

/// Psi |- H: every code block and tuple, with the first error of each block.
inline std::vector<TypeError> check_heap(const TypingEnv& env, const Heap& program) {
  std::vector<TypeError> errors;
  for (const auto& [label, hv] : program) {
    if (const auto* cb = hv.as<CodeBlock>()) {
      if (auto err = check_block(env, label, *cb)) errors.push_back(std::move(*err));
      continue;
    }
    const auto& tv = *hv.as<TupleVal>();
    auto err = detail::capture([&] {
      const MilType* t = env.label_type(label);
      if (!t) detail::type_fail("E-UNBOUND", {}, "no type for heap label '" + label.name + "'");
      const auto* tt = t->as<TupleType>();
      if (!tt || tt->cells.size() != tv.values.size() || tt->guard != tv.guard)
        detail::type_fail("E-TYPE", {}, "heap tuple '" + label.name + "' does not match " + to_string(*t));
      for (std::size_t i = 0; i < tv.values.size(); ++i)
        if (!detail::value_has_type(env, {}, tv.values[i], tt->cells[i]))
          detail::type_fail("E-TYPE", {},
                            "cell " + std::to_string(i + 1) + " of '" + label.name + "' holds " +
                                to_string(tv.values[i]) + ", expected " + to_string(tt->cells[i]));
    });
    if (err) {
      err->block = label.name;
      errors.push_back(std::move(*err));
    }
  }
  return errors;
}

inline std::vector<TypeError> check_program(const Heap& program) {
  return check_heap(program_env(program), program);
}

/// Irreflexivity of the order of env: the locks with lam < lam.
inline std::vector<LockSym> reflexive_locks(const TypingEnv& env) {
  std::vector<LockSym> out;
  LockOrder order(env);
  for (const auto& [l, k] : env.locks)
    if (order.less(l, l)) out.push_back(l);
  return out;
}

}  // namespace milc
