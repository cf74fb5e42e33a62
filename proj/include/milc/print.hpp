#pragma once

// Surface-syntax printer. Output of print_program re-parses to an
// alpha-equivalent heap.

#include <sstream>
#include <string>

#include "milc/ast.hpp"

namespace milc {

inline std::string to_string(const Register& r) { return "r" + std::to_string(r.index); }
inline std::string to_string(const LockSym& l) { return l.name; }
inline std::string to_string(const PermVar& v) { return "rho" + std::to_string(v.id); }

inline std::string to_string(const Permission& p) {
  std::string out = "{";
  bool first = true;
  for (const auto& l : p) {
    if (!first) out += ",";
    out += l.name;
    first = false;
  }
  return out + "}";
}

inline std::string to_string(const LockMap& m) {
  std::string out;
  for (const auto& [k, v] : m) {
    out += out.empty() ? "[" : ",";
    out += v.name + "/" + k.name;
  }
  return out.empty() ? out : out + "]";
}

inline std::string to_string(const VarRef& r) { return to_string(r.var) + to_string(r.subst); }

inline std::string to_string(const Bound& b) {
  if (b.locks.empty() && b.vars.size() == 1) return to_string(b.vars.front());
  std::string out = "{";
  bool first = true;
  for (const auto& l : b.locks) {
    if (!first) out += ",";
    out += l.name;
    first = false;
  }
  for (const auto& v : b.vars) {
    if (!first) out += ",";
    out += to_string(v);
    first = false;
  }
  return out + "}";
}

inline std::string to_string(const LockKind& k) {
  return "(" + to_string(k.below) + "," + to_string(k.above) + ")";
}

inline std::string to_string(const MilType& t);

inline std::string to_string(const RegFileType& g) {
  std::string out = "(";
  bool first = true;
  for (const auto& [r, t] : g.entries) {
    if (!first) out += ", ";
    out += to_string(r) + ":" + to_string(t);
    first = false;
  }
  return out + ")";
}

inline std::string to_string(const MilType& t) {
  return std::visit(
      [](const auto& n) -> std::string {
        using N = std::decay_t<decltype(n)>;
        if constexpr (std::is_same_v<N, IntType>) {
          return "int";
        } else if constexpr (std::is_same_v<N, LockType>) {
          return n.lock.name;
        } else if constexpr (std::is_same_v<N, TupleType>) {
          std::string out = "<";
          for (std::size_t i = 0; i < n.cells.size(); ++i) {
            if (i) out += ",";
            out += to_string(n.cells[i]);
          }
          return out + ">^" + n.guard.name;
        } else if constexpr (std::is_same_v<N, CodeType>) {
          std::string out = to_string(*n.regs);
          if (!n.perm.empty()) out += " requires " + to_string(n.perm);
          return out;
        } else {
          // consecutive unannotated binders collapse into forall[l,m]
          std::string out = "forall[" + n.binder.name;
          const MilType* body = &*n.body;
          if (n.kind) {
            out += "::" + to_string(*n.kind);
          } else {
            while (const auto* inner = body->as<ForallType>()) {
              if (inner->kind) break;
              out += "," + inner->binder.name;
              body = &*inner->body;
            }
          }
          return out + "]." + to_string(*body);
        }
      },
      t.node);
}

inline std::string to_string(const LockValue& b) {
  std::string out = b.bit == LockBit::Open ? "0b" : "1b";
  if (b.tag) out += "^" + b.tag->name;
  return out;
}

inline std::string to_string(const Value& v) {
  if (const auto* app = v.as<TypeAppValue>()) {
    std::vector<LockSym> args{app->arg};
    const Value* base = &*app->base;
    while (const auto* inner = base->as<TypeAppValue>()) {
      args.push_back(inner->arg);
      base = &*inner->base;
    }
    std::string out = to_string(*base) + "[";
    for (std::size_t i = args.size(); i-- > 0;) {
      out += args[i].name;
      if (i) out += ",";
    }
    return out + "]";
  }
  return std::visit(
      [](const auto& n) -> std::string {
        using N = std::decay_t<decltype(n)>;
        if constexpr (std::is_same_v<N, RegValue>) {
          return to_string(n.reg);
        } else if constexpr (std::is_same_v<N, IntValue>) {
          return std::to_string(n.n);
        } else if constexpr (std::is_same_v<N, LockLit>) {
          return to_string(n.lock);
        } else if constexpr (std::is_same_v<N, LabelValue>) {
          return n.label.name;
        } else if constexpr (std::is_same_v<N, UninitValue>) {
          return "?" + to_string(n.type);
        } else {
          return "";
        }
      },
      v.node);
}

inline std::string to_string(const Instruction& ins) {
  return std::visit(
      [](const auto& n) -> std::string {
        using N = std::decay_t<decltype(n)>;
        if constexpr (std::is_same_v<N, MoveInstr>) {
          return to_string(n.dst) + " := " + to_string(n.src);
        } else if constexpr (std::is_same_v<N, ArithInstr>) {
          return to_string(n.dst) + " := " + to_string(n.lhs) + " + " + to_string(n.rhs);
        } else if constexpr (std::is_same_v<N, BranchInstr>) {
          return "if " + to_string(n.reg) + " = " + to_string(n.operand) + " jump " +
                 to_string(n.target);
        } else if constexpr (std::is_same_v<N, ForkInstr>) {
          return "fork " + to_string(n.target);
        } else if constexpr (std::is_same_v<N, MallocInstr>) {
          std::string out = to_string(n.dst) + " := malloc [";
          for (std::size_t i = 0; i < n.cells.size(); ++i) {
            if (i) out += ",";
            out += to_string(n.cells[i]);
          }
          return out + "]^" + n.guard.name;
        } else if constexpr (std::is_same_v<N, LoadInstr>) {
          return to_string(n.dst) + " := " + to_string(n.src) + "[" + std::to_string(n.index) + "]";
        } else if constexpr (std::is_same_v<N, StoreInstr>) {
          return to_string(n.dst) + "[" + std::to_string(n.index) + "] := " + to_string(n.src);
        } else if constexpr (std::is_same_v<N, NewLockInstr>) {
          std::string out = n.binder.name;
          if (n.kind) out += "::" + to_string(*n.kind);
          return out + ", " + to_string(n.dst) + " := newLock";
        } else if constexpr (std::is_same_v<N, TslInstr>) {
          return to_string(n.dst) + " := testSetLock " + to_string(n.lock);
        } else {
          return "unlock " + to_string(n.lock);
        }
      },
      ins.node);
}

inline std::string to_string(const Terminator& t) {
  if (const auto* j = std::get_if<JumpTerm>(&t)) return "jump " + to_string(j->target);
  return "done";
}

inline std::string to_string(const InstrSeq& seq, const std::string& indent = "  ") {
  std::string out;
  for (const auto& ins : seq.body) out += indent + to_string(ins) + "\n";
  out += indent + to_string(seq.term) + "\n";
  return out;
}

inline std::string print_block(const Label& label, const CodeBlock& cb) {
  return label.name + " " + to_string(cb.sig) + " {\n" + to_string(*cb.body) + "}\n";
}

inline std::string to_string(const HeapValue& hv) {
  if (const auto* tv = hv.as<TupleVal>()) {
    std::string out = "<";
    for (std::size_t i = 0; i < tv->values.size(); ++i) {
      if (i) out += ",";
      out += to_string(tv->values[i]);
    }
    return out + ">^" + tv->guard.name;
  }
  const auto& cb = *hv.as<CodeBlock>();
  return to_string(cb.sig) + " {\n" + to_string(*cb.body) + "}";
}

/// Prints every code block in program order; tuples (runtime only) are
/// printed as comments so the output stays parseable.
inline std::string print_program(const Heap& heap) {
  std::string out;
  for (const auto& [label, hv] : heap) {
    if (const auto* cb = hv.as<CodeBlock>()) {
      out += print_block(label, *cb);
    } else {
      out += "-- " + label.name + " = " + to_string(hv) + "\n";
    }
  }
  return out;
}

}  // namespace milc
