#pragma once

// Typing of machine states: Psi |- S. Used as a runtime oracle for subject
// reduction.

#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "milc/machine.hpp"
#include "milc/typecheck.hpp"

namespace milc {

/// Tracks Psi as the machine allocates: malloc adds a label, newLock a label
/// and a lock.
class PsiTracker {
 public:
  explicit PsiTracker(const Heap& program) : env_(program_env(program)) {}

  const TypingEnv& env() const { return env_; }

  void observe(const StepEvent& ev) {
    if (ev.fresh_lock) env_.locks[*ev.fresh_lock] = ev.lock_kind ? *ev.lock_kind : LockKind{};
    if (ev.fresh_label && ev.alloc_type) env_.labels[*ev.fresh_label] = *ev.alloc_type;
  }

 private:
  TypingEnv env_;
};

struct StateViolation {
  std::string where;
  std::string message;
};

inline std::string to_string(const StateViolation& v) { return v.where + ": " + v.message; }

class StateChecker {
 public:
  explicit StateChecker(const Heap& program) : program_(program) {
    TypingEnv env = program_env(program);
    for (const auto& [label, hv] : program) {
      const auto* cb = hv.as<CodeBlock>();
      if (!cb) continue;
      BlockInfo info;
      if (auto err = check_block(env, label, *cb, &info.trace)) info.error = to_diagnostic(*err).message;
      blocks_.emplace(label, std::move(info));
    }
  }

  /// Nullopt when Psi types the state.
  std::optional<StateViolation> check(const TypingEnv& psi, const MachineState& s) const {
    std::map<LockSym, std::string> owner;
    auto claim = [&](const Permission& held, const std::string& who) -> std::optional<StateViolation> {
      for (const auto& l : held) {
        if (!psi.has_lock(l)) return StateViolation{who, "holds unbound lock " + l.name};
        auto [it, fresh] = owner.emplace(l, who);
        if (!fresh) return StateViolation{who, "lock " + l.name + " is also held by " + it->second};
      }
      return std::nullopt;
    };
    for (std::size_t i = 0; i < s.procs.size(); ++i) {
      std::string who = "proc#" + std::to_string(i + 1);
      if (auto v = claim(s.procs[i].held, who)) return v;
      if (auto v = check_processor(psi, s.procs[i], who)) return v;
    }
    for (std::size_t k = 0; k < s.pool.size(); ++k) {
      std::string who = "thread#" + std::to_string(k + 1);
      if (auto v = claim(thread_holds(s, s.pool[k]), who)) return v;
      if (auto v = check_thread(psi, s.pool[k], who)) return v;
    }
    for (const auto& [label, hv] : s.heap) {
      if (hv.as<CodeBlock>()) {
        auto it = blocks_.find(label);
        if (it == blocks_.end()) return StateViolation{label.name, "code block not in the program"};
        if (it->second.error) return StateViolation{label.name, *it->second.error};
        continue;
      }
      if (auto v = check_tuple(psi, label, *hv.as<TupleVal>(), owner)) return v;
    }
    return std::nullopt;
  }

 private:
  struct BlockInfo {
    ContextTrace trace;
    std::optional<std::string> error;
  };

  std::optional<StateViolation> check_processor(const TypingEnv& psi, const Processor& p,
                                                const std::string& who) const {
    RegFileType gamma;
    if (p.code.seq.get() != detail::done_seq().get()) {
      auto it = blocks_.find(p.code.origin);
      if (it == blocks_.end()) return StateViolation{who, "runs unknown block " + p.code.origin.name};
      const BlockInfo& info = it->second;
      if (info.error) return StateViolation{who, "block " + p.code.origin.name + ": " + *info.error};
      if (p.code.pc >= info.trace.size())
        return StateViolation{who, "no typing context at pc " + std::to_string(p.code.pc)};
      for (const auto& [r, t] : info.trace[p.code.pc].regs.entries)
        gamma.entries.emplace(r, subst_type(t, p.code.map));
    }
    if (auto v = check_regs(psi, p.regs, gamma, who)) return v;
    InstrSeq rest = p.code.remaining();
    // locks taken by testSetLock whose critical jump is still ahead
    std::vector<LockSym> pending;
    for (const auto& l : p.held) {
      for (const auto& v : p.regs) {
        const auto* lit = v.as<LockLit>();
        if (lit && lit->lock.tag && *lit->lock.tag == l) {
          pending.push_back(l);
          break;
        }
      }
    }
    std::optional<TypeError> first;
    std::size_t n = pending.size();
    std::vector<std::size_t> masks;
    for (std::size_t m = 0; m < (std::size_t{1} << n); ++m) masks.push_back(m);
    std::stable_sort(masks.begin(), masks.end(), [](std::size_t a, std::size_t b) {
      return __builtin_popcountll(a) < __builtin_popcountll(b);
    });
    for (std::size_t m : masks) {
      Permission perm = p.held;
      for (std::size_t k = 0; k < n; ++k)
        if (m >> k & 1) perm.erase(pending[k]);
      auto err = check_instrs({psi, gamma, perm}, rest);
      if (!err) return std::nullopt;
      if (!first) first = err;
    }
    return StateViolation{who, "remaining code: " + to_diagnostic(*first).message};
  }

  std::optional<StateViolation> check_thread(const TypingEnv& psi, const PoolThread& t,
                                             const std::string& who) const {
    auto ct = check_value(psi, {}, apply_all(label_value(t.target.name), t.args));
    if (!ct) return StateViolation{who, to_diagnostic(*ct.error).message};
    const auto* code = ct.value->as<CodeType>();
    if (!code) return StateViolation{who, t.target.name + " is not fully applied"};
    return check_regs(psi, t.regs, *code->regs, who);
  }

  static std::optional<StateViolation> check_regs(const TypingEnv& psi, const RegFile& regs,
                                                  const RegFileType& gamma, const std::string& who) {
    for (const auto& [r, t] : gamma.entries) {
      if (r.index < 1 || static_cast<std::size_t>(r.index) > regs.size())
        return StateViolation{who, "register " + to_string(r) + " out of range"};
      const Value& v = regs[r.index - 1];
      if (!has_type(psi, {}, v, t))
        return StateViolation{who, to_string(r) + " holds " + to_string(v) + ", expected " + to_string(t)};
    }
    return std::nullopt;
  }

  static std::optional<StateViolation> check_tuple(const TypingEnv& psi, const Label& label,
                                                   const TupleVal& tv,
                                                   const std::map<LockSym, std::string>& owner) {
    const MilType* t = psi.label_type(label);
    if (!t) return StateViolation{label.name, "no type in Psi"};
    const auto* tt = t->as<TupleType>();
    if (!tt || tt->guard != tv.guard || tt->cells.size() != tv.values.size())
      return StateViolation{label.name, "tuple does not match " + to_string(*t)};
    for (std::size_t i = 0; i < tv.values.size(); ++i)
      if (!has_type(psi, {}, tv.values[i], tt->cells[i]))
        return StateViolation{label.name, "cell " + std::to_string(i + 1) + " holds " +
                                              to_string(tv.values[i]) + ", expected " +
                                              to_string(tt->cells[i])};
    if (tt->cells.size() == 1 && tt->cells[0].is<LockType>()) {
      const auto* lit = tv.values[0].as<LockLit>();
      bool closed = lit && lit->lock.bit == LockBit::Closed;
      if (owner.count(tv.guard) && !closed)
        return StateViolation{label.name, "lock " + tv.guard.name + " is held but open"};
    }
    return std::nullopt;
  }

  Heap program_;
  std::map<Label, BlockInfo> blocks_;
};

}  // namespace milc
