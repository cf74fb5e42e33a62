#pragma once

// The abstract N-processor machine: small-step reduction, the restricted
// per-processor relation, and the deadlock detector.

#include <algorithm>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <unordered_set>
#include <variant>
#include <vector>

#include "milc/ast.hpp"
#include "milc/print.hpp"

namespace milc {

using RegFile = std::vector<Value>;  // index 0 holds r1

struct CodePtr {
  Label origin;  // block the code was entered from
  std::shared_ptr<const InstrSeq> seq;
  std::size_t pc = 0;
  LockMap map;  // pending substitution for the rest of seq

  bool at_terminator() const { return pc >= seq->body.size(); }
  bool at_done() const { return at_terminator() && std::holds_alternative<DoneTerm>(seq->term); }
  /// The current instruction with the pending substitution applied.
  Instruction instruction() const { return subst_instr(seq->body[pc], map); }
  Terminator terminator() const { return subst_term(seq->term, map); }
  /// The remaining code I of the processor.
  InstrSeq remaining() const { return subst_seq(*seq, map, pc); }
};

struct Processor {
  RegFile regs;
  Permission held;
  CodePtr code;

  bool idle() const { return code.at_done(); }
};

struct PoolThread {
  Label target;
  std::vector<LockSym> args;
  RegFile regs;
};

struct SchedulerPolicy {
  enum class Kind { Fifo, Seeded } kind = Kind::Fifo;
  std::uint64_t seed = 0;

  static SchedulerPolicy fifo() { return {}; }
  static SchedulerPolicy seeded(std::uint64_t s) { return {Kind::Seeded, s}; }
};

struct MachineState {
  Heap heap;
  std::vector<PoolThread> pool;  // oldest first
  std::vector<Processor> procs;
  bool halted = false;

  // fresh-name counters and scheduler bookkeeping, so that step depends on
  // the state and the policy only
  std::uint32_t next_lock_id = 1;
  std::uint64_t fresh_label = 0;
  std::uint64_t fresh_lock = 0;
  std::size_t cursor = 0;
  std::uint64_t rng = 0;
};

struct StepEvent {
  std::string rule;
  std::optional<std::size_t> proc;  // 0-based
  std::string details;
  std::optional<Label> fresh_label;
  std::optional<LockSym> fresh_lock;
  std::optional<MilType> alloc_type;  // type of the new heap tuple
  std::optional<LockKind> lock_kind;  // kind of the new lock, if annotated
  std::optional<std::size_t> thread;  // pool index taken by schedule
};

struct Stuck {
  std::size_t proc = 0;
  std::string instruction;
  std::string reason;
};

struct AlreadyHalted {};

using StepOutcome = std::variant<StepEvent, Stuck, AlreadyHalted>;

namespace detail {

inline std::uint64_t splitmix(std::uint64_t& s) {
  std::uint64_t z = (s += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline const std::shared_ptr<const InstrSeq>& done_seq() {
  static const auto seq = std::make_shared<const InstrSeq>();
  return seq;
}

struct StuckError {
  std::string reason;
};

[[noreturn]] inline void stuck(std::string reason) { throw StuckError{std::move(reason)}; }

}  // namespace detail

inline CodePtr idle_code() { return {Label{"<idle>"}, detail::done_seq(), 0, {}}; }

/// R-hat: registers resolved, type applications recursed.
inline Value eval_value(const RegFile& regs, const Value& v) {
  if (const auto* r = v.as<RegValue>()) {
    auto idx = static_cast<std::size_t>(r->reg.index - 1);
    if (r->reg.index < 1 || idx >= regs.size()) return v;
    return regs[idx];
  }
  if (const auto* app = v.as<TypeAppValue>()) return type_app(eval_value(regs, *app->base), app->arg);
  return v;
}

/// Value equality in branches: 0^lam equals 0.
inline bool branch_equal(const Value& a, const Value& b) {
  const auto* la = a.as<LockLit>();
  const auto* lb = b.as<LockLit>();
  if (la && lb) return la->lock.same_bit(lb->lock);
  return a == b;
}

namespace detail {

inline Value& reg_slot(RegFile& regs, Register r) {
  if (r.index < 1 || static_cast<std::size_t>(r.index) > regs.size())
    stuck("register " + to_string(r) + " out of range");
  return regs[r.index - 1];
}

inline const Value& reg_read(const RegFile& regs, Register r) {
  if (r.index < 1 || static_cast<std::size_t>(r.index) > regs.size())
    stuck("register " + to_string(r) + " out of range");
  return regs[r.index - 1];
}

inline Label expect_label(const Value& v, const char* what) {
  const auto* l = v.as<LabelValue>();
  if (!l) stuck(std::string(what) + " " + to_string(v) + " is not a heap address");
  return l->label;
}

struct Target {
  Label label;
  std::vector<LockSym> args;
  const CodeBlock* block;
  SignatureView view;
};

inline Target resolve_code(const Heap& heap, const Value& v) {
  auto parts = unapply(v);
  if (!parts) stuck("jump target " + to_string(v) + " is not a code label");
  const HeapValue* hv = heap.find(parts->first);
  if (!hv) stuck("label " + parts->first.name + " is not in the heap");
  const auto* cb = hv->as<CodeBlock>();
  if (!cb) stuck("label " + parts->first.name + " is not a code block");
  auto view = view_signature(cb->sig);
  if (!view) stuck("label " + parts->first.name + " has no code type");
  if (view->binders.size() != parts->second.size())
    stuck("code block " + parts->first.name + " takes " + std::to_string(view->binders.size()) +
          " lock arguments, given " + std::to_string(parts->second.size()));
  return {parts->first, parts->second, cb, *view};
}

inline LockMap binder_map(const Target& t) {
  LockMap m;
  for (std::size_t i = 0; i < t.args.size(); ++i) m[t.view.binders[i].lock] = t.args[i];
  return m;
}

inline CodePtr enter(const Target& t) { return {t.label, t.block->body, 0, binder_map(t)}; }

inline Permission target_perm(const Target& t) { return subst_perm(t.view.code->perm, binder_map(t)); }

inline TupleVal& expect_tuple(Heap& heap, const Label& l) {
  HeapValue* hv = heap.find(l);
  if (!hv) stuck("label " + l.name + " is not in the heap");
  auto* tv = hv->as<TupleVal>();
  if (!tv) stuck("label " + l.name + " is not a tuple");
  return *tv;
}

inline LockValue expect_lock_cell(const TupleVal& tv, const Label& l) {
  if (tv.values.size() != 1) stuck("label " + l.name + " is not a lock");
  const auto* lit = tv.values[0].as<LockLit>();
  if (!lit) stuck("label " + l.name + " is not a lock");
  return lit->lock;
}

inline std::string args_text(const std::vector<LockSym>& args) {
  std::string out = "[";
  for (std::size_t i = 0; i < args.size(); ++i) out += (i ? "," : "") + args[i].name;
  return out + "]";
}

inline Label fresh_label(MachineState& s) {
  while (true) {
    Label l{"l_" + std::to_string(s.fresh_label++)};
    if (!s.heap.contains(l)) return l;
  }
}

/// Executes one instruction of processor i. Returns the rule fired, or
/// nullopt when the processor is at done. `allow_unlock` is false for the
/// restricted relation.
inline std::optional<StepEvent> exec_processor(MachineState& s, std::size_t i, bool allow_unlock) {
  Processor& p = s.procs[i];
  CodePtr& code = p.code;
  StepEvent ev;
  ev.proc = i;
  if (code.at_terminator()) {
    if (code.at_done()) return std::nullopt;
    Terminator t = code.terminator();
    const auto& j = std::get<JumpTerm>(t);
    Value target = eval_value(p.regs, j.target);
    Target tgt = resolve_code(s.heap, target);
    code = enter(tgt);
    ev.rule = "jump";
    ev.details = "target=" + to_string(target);
    return ev;
  }
  Instruction ins = code.instruction();
  const Instruction& raw = code.seq->body[code.pc];
  bool advance = true;
  std::visit(
      [&](const auto& n) {
        using N = std::decay_t<decltype(n)>;
        if constexpr (std::is_same_v<N, MoveInstr>) {
          Value v = eval_value(p.regs, n.src);
          ev.rule = "move";
          ev.details = to_string(n.dst) + "=" + to_string(v);
          reg_slot(p.regs, n.dst) = std::move(v);
        } else if constexpr (std::is_same_v<N, ArithInstr>) {
          const auto* a = reg_read(p.regs, n.lhs).template as<IntValue>();
          Value rhs = eval_value(p.regs, n.rhs);
          const auto* b = rhs.template as<IntValue>();
          if (!a || !b) stuck("arith on non-integers");
          auto sum = static_cast<std::int64_t>(static_cast<std::uint64_t>(a->n) +
                                               static_cast<std::uint64_t>(b->n));
          ev.rule = "arith";
          ev.details = to_string(n.dst) + "=" + std::to_string(sum);
          reg_slot(p.regs, n.dst) = int_value(sum);
        } else if constexpr (std::is_same_v<N, BranchInstr>) {
          const Value& lhs = reg_read(p.regs, n.reg);
          if (branch_equal(lhs, eval_value(p.regs, n.operand))) {
            Value target = eval_value(p.regs, n.target);
            Target tgt = resolve_code(s.heap, target);
            code = enter(tgt);
            advance = false;
            ev.rule = "branchT";
            ev.details = "target=" + to_string(target);
          } else {
            ev.rule = "branchF";
          }
        } else if constexpr (std::is_same_v<N, ForkInstr>) {
          Value target = eval_value(p.regs, n.target);
          Target tgt = resolve_code(s.heap, target);
          Permission give = target_perm(tgt);
          for (const auto& l : give)
            if (!p.held.count(l)) stuck("fork needs " + to_string(give) + ", holding " + to_string(p.held));
          for (const auto& l : give) p.held.erase(l);
          s.pool.push_back({tgt.label, tgt.args, p.regs});
          ev.rule = "fork";
          ev.details = "thread=" + tgt.label.name + args_text(tgt.args) + " perm=" + to_string(give);
        } else if constexpr (std::is_same_v<N, MallocInstr>) {
          Label l = fresh_label(s);
          TupleVal tv{{}, n.guard};
          for (const auto& c : n.cells) tv.values.push_back(uninit_value(c));
          s.heap.insert(l, HeapValue{std::move(tv)});
          reg_slot(p.regs, n.dst) = label_value(l.name);
          ev.rule = "malloc";
          ev.details = "label=" + l.name + " type=" + to_string(tuple_type(n.cells, n.guard));
          ev.fresh_label = l;
          ev.alloc_type = tuple_type(n.cells, n.guard);
        } else if constexpr (std::is_same_v<N, LoadInstr>) {
          Label l = expect_label(eval_value(p.regs, n.src), "load source");
          TupleVal& tv = expect_tuple(s.heap, l);
          if (!p.held.count(tv.guard)) stuck("load needs lock " + tv.guard.name);
          if (n.index < 1 || static_cast<std::size_t>(n.index) > tv.values.size())
            stuck("load index out of range");
          Value v = tv.values[n.index - 1];
          ev.rule = "load";
          ev.details = to_string(n.dst) + "=" + to_string(v);
          reg_slot(p.regs, n.dst) = std::move(v);
        } else if constexpr (std::is_same_v<N, StoreInstr>) {
          Label l = expect_label(reg_read(p.regs, n.dst), "store destination");
          Value v = eval_value(p.regs, n.src);
          TupleVal& tv = expect_tuple(s.heap, l);
          if (!p.held.count(tv.guard)) stuck("store needs lock " + tv.guard.name);
          if (n.index < 1 || static_cast<std::size_t>(n.index) > tv.values.size())
            stuck("store index out of range");
          ev.rule = "store";
          ev.details = l.name + "[" + std::to_string(n.index) + "]=" + to_string(v);
          tv.values[n.index - 1] = std::move(v);
        } else if constexpr (std::is_same_v<N, NewLockInstr>) {
          const auto& binder = std::get<NewLockInstr>(raw.node).binder;
          LockSym fresh{s.next_lock_id++, binder.name + "_" + std::to_string(s.fresh_lock++)};
          Label l = fresh_label(s);
          s.heap.insert(l, HeapValue{TupleVal{{lock_value(LockBit::Open)}, fresh}});
          reg_slot(p.regs, n.dst) = label_value(l.name);
          code.map[binder] = fresh;
          ev.rule = "newLock";
          ev.details = "lock=" + fresh.name + " label=" + l.name;
          ev.fresh_label = l;
          ev.fresh_lock = fresh;
          ev.alloc_type = lock_tuple_type(fresh);
          if (n.kind) ev.lock_kind = subst_kind(*n.kind, code.map);
        } else if constexpr (std::is_same_v<N, TslInstr>) {
          Label l = expect_label(eval_value(p.regs, n.lock), "testSetLock operand");
          TupleVal& tv = expect_tuple(s.heap, l);
          LockValue b = expect_lock_cell(tv, l);
          if (p.held.count(tv.guard)) stuck("testSetLock on held lock " + tv.guard.name);
          if (b.bit == LockBit::Open) {
            tv.values[0] = lock_value(LockBit::Closed);
            reg_slot(p.regs, n.dst) = lock_value(LockBit::Open, tv.guard);
            p.held.insert(tv.guard);
            ev.rule = "tsl0";
          } else {
            reg_slot(p.regs, n.dst) = lock_value(LockBit::Closed);
            ev.rule = "tsl1";
          }
          ev.details = "lock=" + tv.guard.name;
        } else {
          if (!allow_unlock) {
            ev.rule = "";
            return;
          }
          Label l = expect_label(eval_value(p.regs, n.lock), "unlock operand");
          TupleVal& tv = expect_tuple(s.heap, l);
          expect_lock_cell(tv, l);
          if (!p.held.count(tv.guard)) stuck("unlock of lock " + tv.guard.name + " not held");
          tv.values[0] = lock_value(LockBit::Open);
          p.held.erase(tv.guard);
          ev.rule = "unlock";
          ev.details = "lock=" + tv.guard.name;
        }
      },
      ins.node);
  if (ev.rule.empty()) return std::nullopt;  // unlock under the restricted relation
  if (advance) ++code.pc;
  return ev;
}

inline void schedule(MachineState& s, std::size_t thread, std::size_t proc, StepEvent& ev) {
  PoolThread t = std::move(s.pool[thread]);
  s.pool.erase(s.pool.begin() + static_cast<std::ptrdiff_t>(thread));
  Target tgt = resolve_code(s.heap, apply_all(label_value(t.target.name), t.args));
  Processor& p = s.procs[proc];
  p.regs = std::move(t.regs);
  p.held = target_perm(tgt);
  p.code = enter(tgt);
  ev.rule = "schedule";
  ev.proc = proc;
  ev.thread = thread;
  ev.details = "thread=" + tgt.label.name + args_text(tgt.args);
}

}  // namespace detail

/// One machine step under the given scheduling policy, in place.
inline StepOutcome step(MachineState& s, const SchedulerPolicy& policy) {
  if (s.halted) return AlreadyHalted{};
  std::vector<std::size_t> busy, idle;
  for (std::size_t i = 0; i < s.procs.size(); ++i) (s.procs[i].idle() ? idle : busy).push_back(i);
  if (busy.empty() && s.pool.empty()) {
    s.halted = true;
    return StepEvent{"halt", std::nullopt, "", {}, {}, {}, {}, {}};
  }
  bool can_schedule = !idle.empty() && !s.pool.empty();
  std::optional<std::size_t> run_proc;
  std::optional<std::pair<std::size_t, std::size_t>> sched;  // (thread, proc)
  if (policy.kind == SchedulerPolicy::Kind::Fifo) {
    if (can_schedule) {
      sched = std::make_pair(std::size_t{0}, idle.front());
    } else {
      std::size_t n = s.procs.size();
      for (std::size_t k = 0; k < n; ++k) {
        std::size_t i = (s.cursor + k) % n;
        if (!s.procs[i].idle()) {
          run_proc = i;
          break;
        }
      }
      s.cursor = (*run_proc + 1) % n;
    }
  } else {
    std::size_t options = busy.size() + (can_schedule ? 1 : 0);
    std::size_t pick = detail::splitmix(s.rng) % options;
    if (pick < busy.size()) {
      run_proc = busy[pick];
    } else {
      std::size_t t = detail::splitmix(s.rng) % s.pool.size();
      std::size_t p = idle[detail::splitmix(s.rng) % idle.size()];
      sched = std::make_pair(t, p);
    }
  }
  try {
    if (sched) {
      StepEvent ev;
      detail::schedule(s, sched->first, sched->second, ev);
      return ev;
    }
    return *detail::exec_processor(s, *run_proc, true);
  } catch (const detail::StuckError& e) {
    std::size_t i = sched ? sched->second : *run_proc;
    const CodePtr& c = s.procs[i].code;
    std::string text = c.at_terminator() ? to_string(c.terminator()) : to_string(c.instruction());
    return Stuck{i, text, e.reason};
  }
}

inline std::pair<MachineState, StepOutcome> step_pure(const MachineState& s,
                                                      const SchedulerPolicy& policy) {
  MachineState next = s;
  StepOutcome out = step(next, policy);
  return {std::move(next), std::move(out)};
}

/// S ->_i S', excluding halt, schedule and unlock. Returns false (Blocked)
/// when no permitted rule applies.
inline bool step_i(MachineState& s, std::size_t i) {
  if (s.halted || i >= s.procs.size()) return false;
  try {
    return detail::exec_processor(s, i, false).has_value();
  } catch (const detail::StuckError&) {
    return false;
  }
}

struct TryingResult {
  std::set<LockSym> locks;
  bool exhaustive = true;
};

namespace detail {

inline void serialize(std::string& out, const Value& v) { out += to_string(v); }

/// Canonical text of the parts of a state that processor i can change.
inline std::string local_key(const MachineState& s, std::size_t i,
                             const std::map<int, LockSym>& prov) {
  std::string key;
  for (const auto& [label, hv] : s.heap) {
    if (const auto* tv = hv.as<TupleVal>()) {
      key += label.name + "=";
      for (const auto& v : tv->values) {
        serialize(key, v);
        key += ",";
      }
      key += ";";
    }
  }
  const Processor& p = s.procs[i];
  key += "|";
  for (const auto& v : p.regs) {
    serialize(key, v);
    key += ",";
  }
  key += "|" + to_string(p.held) + "|" + p.code.origin.name + "@" + std::to_string(p.code.pc) + "@" +
         std::to_string(reinterpret_cast<std::uintptr_t>(p.code.seq.get()));
  for (const auto& [k, v] : p.code.map) key += "," + std::to_string(k.id) + ">" + std::to_string(v.id);
  key += "|" + std::to_string(s.pool.size()) + "|" + std::to_string(s.next_lock_id);
  for (const auto& [r, l] : prov) key += "," + std::to_string(r) + ">" + std::to_string(l.id);
  return key;
}

inline std::optional<LockSym> immediately_tries(const Processor& p,
                                                const std::map<int, LockSym>& prov) {
  if (p.code.at_terminator()) return std::nullopt;
  const Instruction& raw = p.code.seq->body[p.code.pc];
  const auto* br = raw.as<BranchInstr>();
  if (!br) return std::nullopt;
  const auto* lit = br->operand.as<LockLit>();
  if (!lit || lit->lock.bit != LockBit::Open || lit->lock.tag) return std::nullopt;
  if (br->reg.index < 1 || static_cast<std::size_t>(br->reg.index) > p.regs.size()) return std::nullopt;
  const Value& held = p.regs[br->reg.index - 1];
  const auto* v = held.as<LockLit>();
  if (!v) return std::nullopt;
  if (v->lock.bit == LockBit::Open && v->lock.tag) return v->lock.tag;
  auto it = prov.find(br->reg.index);
  if (it != prov.end()) return it->second;
  return std::nullopt;
}

/// Registers written by the current instruction of p, and the lock a tsl
/// reads from, evaluated before the step.
inline void note_provenance(const MachineState& s, const Processor& p, std::map<int, LockSym>& prov) {
  if (p.code.at_terminator()) return;
  Instruction ins = p.code.instruction();
  std::visit(
      [&](const auto& n) {
        using N = std::decay_t<decltype(n)>;
        if constexpr (std::is_same_v<N, TslInstr>) {
          Value v = eval_value(p.regs, n.lock);
          if (const auto* l = v.template as<LabelValue>()) {
            if (const HeapValue* hv = s.heap.find(l->label)) {
              if (const auto* tv = hv->template as<TupleVal>()) {
                prov[n.dst.index] = tv->guard;
                return;
              }
            }
          }
          prov.erase(n.dst.index);
        } else if constexpr (std::is_same_v<N, MoveInstr> || std::is_same_v<N, ArithInstr> ||
                             std::is_same_v<N, MallocInstr> || std::is_same_v<N, LoadInstr> ||
                             std::is_same_v<N, NewLockInstr>) {
          prov.erase(n.dst.index);
        }
      },
      ins.node);
}

}  // namespace detail

/// Locks processor i is trying to enter a critical region for, exploring its
/// ->_i chain. A lock counts when the processor sits at `if r = 0b jump` with
/// R(r) = 0^lam, or with r last written by testSetLock on lam.
inline TryingResult trying_locks(const MachineState& state, std::size_t i, std::size_t budget) {
  TryingResult out;
  if (state.halted || i >= state.procs.size()) return out;
  MachineState s = state;
  std::map<int, LockSym> prov;
  std::unordered_set<std::string> seen;
  for (std::size_t k = 0;; ++k) {
    if (auto l = detail::immediately_tries(s.procs[i], prov)) out.locks.insert(*l);
    if (!seen.insert(detail::local_key(s, i, prov)).second) return out;
    if (k >= budget) {
      out.exhaustive = false;
      return out;
    }
    std::map<int, LockSym> next = prov;
    detail::note_provenance(s, s.procs[i], next);
    if (!step_i(s, i)) return out;
    prov = std::move(next);
  }
}

struct Holder {
  enum class Kind { Processor, Pool } kind = Kind::Processor;
  std::size_t index = 0;  // 0-based
  friend bool operator==(const Holder&, const Holder&) = default;
};

struct DeadlockEdge {
  Holder holder;
  LockSym holds;
  LockSym wants;
};

struct DeadlockReport {
  std::vector<DeadlockEdge> cycle;
  bool exhaustive = true;
};

struct DeadlockCheck {
  std::optional<DeadlockReport> report;  // nullopt: not deadlocked
  bool exhaustive = true;
  std::vector<DeadlockEdge> edges;  // every hold/want edge found
};

inline std::string to_string(const Holder& h) {
  return std::string(h.kind == Holder::Kind::Processor ? "proc#" : "thread#") +
         std::to_string(h.index + 1);
}

/// `proc#1 holds a wants b -> proc#2 holds b wants a`
inline std::string to_string(const DeadlockReport& r) {
  std::string out;
  for (std::size_t k = 0; k < r.cycle.size(); ++k) {
    if (k) out += " -> ";
    const auto& e = r.cycle[k];
    out += to_string(e.holder) + " holds " + e.holds.name + " wants " + e.wants.name;
  }
  return out;
}

/// Locks a pool thread holds: the code block's permission under its arguments.
inline Permission thread_holds(const MachineState& s, const PoolThread& t) {
  try {
    auto tgt = detail::resolve_code(s.heap, apply_all(label_value(t.target.name), t.args));
    return detail::target_perm(tgt);
  } catch (const detail::StuckError&) {
    return {};
  }
}

inline TryingResult thread_trying(const MachineState& s, const PoolThread& t, std::size_t budget) {
  if (s.procs.empty()) return {};
  MachineState probe = s;
  try {
    auto tgt = detail::resolve_code(s.heap, apply_all(label_value(t.target.name), t.args));
    probe.procs[0] = {t.regs, detail::target_perm(tgt), detail::enter(tgt)};
  } catch (const detail::StuckError&) {
    return {};
  }
  return trying_locks(probe, 0, budget);
}

/// Looks for a cycle lam0 -> lam1 -> ... -> lam0 where each step is a holder
/// that holds lam_k and is trying lam_k+1. A holder's own locks are not
/// counted among the locks it is trying.
inline DeadlockCheck detect_deadlock(const MachineState& s, std::size_t budget) {
  DeadlockCheck out;
  if (s.halted) return out;
  auto add = [&](Holder h, const Permission& holds, const TryingResult& tr) {
    out.exhaustive = out.exhaustive && tr.exhaustive;
    for (const auto& a : holds)
      for (const auto& b : tr.locks)
        if (!holds.count(b)) out.edges.push_back({h, a, b});
  };
  for (std::size_t i = 0; i < s.procs.size(); ++i) {
    const Permission& holds = s.procs[i].held;
    if (holds.empty()) continue;
    add({Holder::Kind::Processor, i}, holds, trying_locks(s, i, budget));
  }
  for (std::size_t k = 0; k < s.pool.size(); ++k) {
    Permission holds = thread_holds(s, s.pool[k]);
    if (holds.empty()) continue;
    add({Holder::Kind::Pool, k}, holds, thread_trying(s, s.pool[k], budget));
  }
  // DFS over locks for a directed cycle
  std::map<LockSym, std::vector<std::size_t>> succ;
  for (std::size_t e = 0; e < out.edges.size(); ++e) succ[out.edges[e].holds].push_back(e);
  std::map<LockSym, int> color;  // 0 white, 1 on stack, 2 done
  std::vector<std::size_t> path;
  std::function<bool(const LockSym&)> dfs = [&](const LockSym& u) -> bool {
    color[u] = 1;
    for (std::size_t e : succ[u]) {
      const LockSym& v = out.edges[e].wants;
      path.push_back(e);
      if (color[v] == 1) {
        std::size_t start = 0;
        while (!(out.edges[path[start]].holds == v)) ++start;
        DeadlockReport rep;
        for (std::size_t k = start; k < path.size(); ++k) rep.cycle.push_back(out.edges[path[k]]);
        rep.exhaustive = out.exhaustive;
        out.report = std::move(rep);
        return true;
      }
      if (color[v] == 0 && dfs(v)) return true;
      path.pop_back();
    }
    color[u] = 2;
    return false;
  };
  for (const auto& [u, es] : succ) {
    if (color[u] == 0 && dfs(u)) break;
  }
  return out;
}

struct MachineConfig {
  std::size_t processors = 2;
  int registers = 8;
};

/// Initial state: the program as heap, empty pool, processor 1 running the
/// entry block and the others idle. Nullopt when the entry is missing or
/// takes lock arguments or a permission.
inline std::optional<MachineState> initial_state(const Heap& program, const Label& entry,
                                                 const MachineConfig& cfg,
                                                 const SchedulerPolicy& policy = {}) {
  const HeapValue* hv = program.find(entry);
  if (!hv || cfg.processors < 1) return std::nullopt;
  const auto* cb = hv->as<CodeBlock>();
  if (!cb) return std::nullopt;
  auto view = view_signature(cb->sig);
  if (!view || !view->binders.empty() || !view->code->perm.empty()) return std::nullopt;
  MachineState s;
  s.heap = program;
  s.next_lock_id = max_lock_id(program) + 1;
  s.rng = policy.seed;
  RegFile regs(static_cast<std::size_t>(cfg.registers), uninit_value(int_type()));
  s.procs.assign(cfg.processors, Processor{regs, {}, idle_code()});
  s.procs[0].code = {entry, cb->body, 0, {}};
  return s;
}

struct RunOptions {
  MachineConfig machine;
  SchedulerPolicy policy;
  std::size_t max_steps = 100000;
  std::size_t check_every = 100;
  std::size_t deadlock_budget = 10000;
};

struct RunOutcome {
  enum class Kind { Halted, DeadlockDetected, StepBudgetExhausted, Stuck, BadEntry } kind =
      Kind::Halted;
  std::size_t steps = 0;
  std::optional<DeadlockReport> deadlock;
  std::optional<milc::Stuck> stuck;
  MachineState final_state;
};

inline std::string to_string(RunOutcome::Kind k) {
  switch (k) {
    case RunOutcome::Kind::Halted: return "Halted";
    case RunOutcome::Kind::DeadlockDetected: return "DeadlockDetected";
    case RunOutcome::Kind::StepBudgetExhausted: return "StepBudgetExhausted";
    case RunOutcome::Kind::Stuck: return "Stuck";
    case RunOutcome::Kind::BadEntry: return "BadEntry";
  }
  return "";
}

using StepObserver = std::function<void(std::size_t, const StepEvent&, const MachineState&)>;

inline std::string format_event(std::size_t k, const StepEvent& ev) {
  std::string out = "step=" + std::to_string(k) + " rule=" + ev.rule + " proc=";
  out += ev.proc ? std::to_string(*ev.proc + 1) : "-";
  if (!ev.details.empty()) out += " " + ev.details;
  return out;
}

/// Runs from the initial state, probing for deadlock every check_every steps.
inline RunOutcome run(const Heap& program, const Label& entry, const RunOptions& opts,
                      const StepObserver& observer = {}) {
  RunOutcome out;
  auto init = initial_state(program, entry, opts.machine, opts.policy);
  if (!init) {
    out.kind = RunOutcome::Kind::BadEntry;
    return out;
  }
  MachineState& s = out.final_state;
  s = std::move(*init);
  std::size_t every = std::max<std::size_t>(1, opts.check_every);
  for (std::size_t k = 1; k <= opts.max_steps; ++k) {
    StepOutcome r = step(s, opts.policy);
    out.steps = k;
    if (auto* st = std::get_if<Stuck>(&r)) {
      out.kind = RunOutcome::Kind::Stuck;
      out.stuck = *st;
      return out;
    }
    if (std::holds_alternative<AlreadyHalted>(r)) {
      out.kind = RunOutcome::Kind::Halted;
      return out;
    }
    const auto& ev = std::get<StepEvent>(r);
    if (observer) observer(k, ev, s);
    if (s.halted) {
      out.kind = RunOutcome::Kind::Halted;
      return out;
    }
    if (k % every == 0) {
      DeadlockCheck dc = detect_deadlock(s, opts.deadlock_budget);
      if (dc.report) {
        out.kind = RunOutcome::Kind::DeadlockDetected;
        out.deadlock = std::move(dc.report);
        return out;
      }
    }
  }
  out.kind = RunOutcome::Kind::StepBudgetExhausted;
  return out;
}

}  // namespace milc
