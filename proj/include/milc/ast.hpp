#pragma once

// Abstract syntax of MIL: values, types, instructions, heaps.
//
// Lock symbols are identified by a numeric id; the name is only for display.
// The parser renames binders apart, so two distinct binders never share an id
// and substitution never captures.

#include <algorithm>
#include <compare>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <variant>
#include <vector>

#include "milc/diagnostic.hpp"

namespace milc {

/// Owning, deep-copying pointer used to give recursive AST nodes value semantics.
template <class T>
class Box {
 public:
  Box() : ptr_(std::make_unique<T>()) {}
  Box(T value) : ptr_(std::make_unique<T>(std::move(value))) {}  // NOLINT implicit
  Box(const Box& other) : ptr_(std::make_unique<T>(*other.ptr_)) {}
  Box(Box&&) noexcept = default;
  Box& operator=(const Box& other) {
    if (this != &other) ptr_ = std::make_unique<T>(*other.ptr_);
    return *this;
  }
  Box& operator=(Box&&) noexcept = default;
  ~Box() = default;

  const T& operator*() const { return *ptr_; }
  T& operator*() { return *ptr_; }
  const T* operator->() const { return ptr_.get(); }
  T* operator->() { return ptr_.get(); }

  friend bool operator==(const Box& a, const Box& b) { return *a.ptr_ == *b.ptr_; }

 private:
  std::unique_ptr<T> ptr_;
};

struct Register {
  int index = 1;  // 1-based
  friend auto operator<=>(const Register&, const Register&) = default;
};

struct LockSym {
  std::uint32_t id = 0;
  std::string name;

  friend bool operator==(const LockSym& a, const LockSym& b) { return a.id == b.id; }
  friend std::strong_ordering operator<=>(const LockSym& a, const LockSym& b) {
    return a.id <=> b.id;
  }
};

struct Label {
  std::string name;
  friend auto operator<=>(const Label&, const Label&) = default;
};

using Permission = std::set<LockSym>;
using LockMap = std::map<LockSym, LockSym>;

/// Permission variable (the paper's nu / rho); printed as rho<id>.
struct PermVar {
  std::uint32_t id = 0;
  friend auto operator<=>(const PermVar&, const PermVar&) = default;
};

/// A permission variable seen through the lock substitution accumulated by
/// type applications: stands for { subst(u) | u in theta(var) }.
struct VarRef {
  PermVar var;
  LockMap subst;
  friend bool operator==(const VarRef&, const VarRef&) = default;
};

/// One side of a lock kind: ground locks plus (during inference) variables.
struct Bound {
  Permission locks;
  std::vector<VarRef> vars;

  bool ground() const { return vars.empty(); }
  friend bool operator==(const Bound&, const Bound&) = default;
};

/// lambda:(below, above) -- lambda is greater than every lock in `below`
/// and smaller than every lock in `above`.
struct LockKind {
  Bound below;
  Bound above;
  bool ground() const { return below.ground() && above.ground(); }
  friend bool operator==(const LockKind&, const LockKind&) = default;
};

inline LockKind ground_kind(Permission below, Permission above) {
  return {Bound{std::move(below), {}}, Bound{std::move(above), {}}};
}

// ---------------------------------------------------------------------------
// Types

struct MilType;
struct RegFileType;

struct IntType {
  friend bool operator==(const IntType&, const IntType&) = default;
};
struct LockType {
  LockSym lock;
  friend bool operator==(const LockType&, const LockType&) = default;
};
struct TupleType {
  std::vector<MilType> cells;
  LockSym guard;
  friend bool operator==(const TupleType&, const TupleType&);
};
struct CodeType {
  Box<RegFileType> regs;
  Permission perm;
  friend bool operator==(const CodeType&, const CodeType&);
};
struct ForallType {
  LockSym binder;
  std::optional<LockKind> kind;  // present iff annotated
  Box<MilType> body;
  friend bool operator==(const ForallType&, const ForallType&);
};

struct MilType {
  std::variant<IntType, LockType, TupleType, CodeType, ForallType> node;

  template <class T>
  const T* as() const { return std::get_if<T>(&node); }
  template <class T>
  T* as() { return std::get_if<T>(&node); }
  template <class T>
  bool is() const { return std::holds_alternative<T>(node); }

  friend bool operator==(const MilType&, const MilType&) = default;
};

struct RegFileType {
  std::map<Register, MilType> entries;
  friend bool operator==(const RegFileType&, const RegFileType&) = default;
};

inline bool operator==(const TupleType& a, const TupleType& b) {
  return a.guard == b.guard && a.cells == b.cells;
}
inline bool operator==(const CodeType& a, const CodeType& b) {
  return a.perm == b.perm && a.regs == b.regs;
}
inline bool operator==(const ForallType& a, const ForallType& b) {
  return a.binder == b.binder && a.kind == b.kind && a.body == b.body;
}

inline MilType int_type() { return {IntType{}}; }
inline MilType lock_type(LockSym l) { return {LockType{std::move(l)}}; }
inline MilType tuple_type(std::vector<MilType> cells, LockSym guard) {
  return {TupleType{std::move(cells), std::move(guard)}};
}
inline MilType code_type(RegFileType regs, Permission perm = {}) {
  return {CodeType{Box<RegFileType>(std::move(regs)), std::move(perm)}};
}
inline MilType forall_type(LockSym binder, std::optional<LockKind> kind, MilType body) {
  return {ForallType{std::move(binder), std::move(kind), Box<MilType>(std::move(body))}};
}
/// The type <lambda>^lambda of a lock cell in the heap.
inline MilType lock_tuple_type(const LockSym& l) { return tuple_type({lock_type(l)}, l); }

// ---------------------------------------------------------------------------
// Values

enum class LockBit { Open, Closed };

struct LockValue {
  LockBit bit = LockBit::Open;
  std::optional<LockSym> tag;  // 0^lambda, runtime only

  /// Branch comparison ignores the tag.
  bool same_bit(const LockValue& o) const { return bit == o.bit; }
  friend bool operator==(const LockValue&, const LockValue&) = default;
};

struct Value;

struct RegValue {
  Register reg;
  friend bool operator==(const RegValue&, const RegValue&) = default;
};
struct IntValue {
  std::int64_t n = 0;
  friend bool operator==(const IntValue&, const IntValue&) = default;
};
struct LockLit {
  LockValue lock;
  friend bool operator==(const LockLit&, const LockLit&) = default;
};
struct LabelValue {
  Label label;
  friend bool operator==(const LabelValue&, const LabelValue&) = default;
};
struct TypeAppValue {
  Box<Value> base;
  LockSym arg;
  friend bool operator==(const TypeAppValue&, const TypeAppValue&);
};
struct UninitValue {
  MilType type;
  friend bool operator==(const UninitValue&, const UninitValue&) = default;
};

struct Value {
  std::variant<RegValue, IntValue, LockLit, LabelValue, TypeAppValue, UninitValue> node;

  template <class T>
  const T* as() const { return std::get_if<T>(&node); }
  template <class T>
  bool is() const { return std::holds_alternative<T>(node); }

  friend bool operator==(const Value&, const Value&) = default;
};

inline bool operator==(const TypeAppValue& a, const TypeAppValue& b) {
  return a.arg == b.arg && a.base == b.base;
}

inline Value reg_value(int index) { return {RegValue{Register{index}}}; }
inline Value reg_value(Register r) { return {RegValue{r}}; }
inline Value int_value(std::int64_t n) { return {IntValue{n}}; }
inline Value lock_value(LockBit bit, std::optional<LockSym> tag = std::nullopt) {
  return {LockLit{LockValue{bit, std::move(tag)}}};
}
inline Value label_value(std::string name) { return {LabelValue{Label{std::move(name)}}}; }
inline Value type_app(Value base, LockSym arg) {
  return {TypeAppValue{Box<Value>(std::move(base)), std::move(arg)}};
}
inline Value uninit_value(MilType t) { return {UninitValue{std::move(t)}}; }

/// Applies `args` to `base` left to right: base[a1][a2]...
inline Value apply_all(Value base, const std::vector<LockSym>& args) {
  for (const auto& a : args) base = type_app(std::move(base), a);
  return base;
}

/// Splits l[a1]..[an] into (l, [a1..an]); nullopt when the head is not a label.
inline std::optional<std::pair<Label, std::vector<LockSym>>> unapply(const Value& v) {
  std::vector<LockSym> args;
  const Value* cur = &v;
  while (const auto* app = cur->as<TypeAppValue>()) {
    args.push_back(app->arg);
    cur = &*app->base;
  }
  const auto* lbl = cur->as<LabelValue>();
  if (!lbl) return std::nullopt;
  std::reverse(args.begin(), args.end());
  return std::make_pair(lbl->label, std::move(args));
}

// ---------------------------------------------------------------------------
// Instructions

struct MoveInstr {
  Register dst;
  Value src;
  friend bool operator==(const MoveInstr&, const MoveInstr&) = default;
};
struct ArithInstr {  // dst := lhs + rhs
  Register dst;
  Register lhs;
  Value rhs;
  friend bool operator==(const ArithInstr&, const ArithInstr&) = default;
};
struct BranchInstr {  // if reg = operand jump target
  Register reg;
  Value operand;
  Value target;
  friend bool operator==(const BranchInstr&, const BranchInstr&) = default;
};
struct ForkInstr {
  Value target;
  friend bool operator==(const ForkInstr&, const ForkInstr&) = default;
};
struct MallocInstr {
  Register dst;
  std::vector<MilType> cells;
  LockSym guard;
  friend bool operator==(const MallocInstr&, const MallocInstr&) = default;
};
struct LoadInstr {  // dst := src[index]
  Register dst;
  Value src;
  int index = 1;
  friend bool operator==(const LoadInstr&, const LoadInstr&) = default;
};
struct StoreInstr {  // dst[index] := src
  Register dst;
  int index = 1;
  Value src;
  friend bool operator==(const StoreInstr&, const StoreInstr&) = default;
};
struct NewLockInstr {
  LockSym binder;
  std::optional<LockKind> kind;
  Register dst;
  friend bool operator==(const NewLockInstr&, const NewLockInstr&) = default;
};
struct TslInstr {
  Register dst;
  Value lock;
  friend bool operator==(const TslInstr&, const TslInstr&) = default;
};
struct UnlockInstr {
  Value lock;
  friend bool operator==(const UnlockInstr&, const UnlockInstr&) = default;
};

struct Instruction {
  std::variant<MoveInstr, ArithInstr, BranchInstr, ForkInstr, MallocInstr, LoadInstr,
               StoreInstr, NewLockInstr, TslInstr, UnlockInstr>
      node;
  SourceSpan span;

  template <class T>
  const T* as() const { return std::get_if<T>(&node); }

  // spans are not part of term identity
  friend bool operator==(const Instruction& a, const Instruction& b) { return a.node == b.node; }
};

struct JumpTerm {
  Value target;
  friend bool operator==(const JumpTerm&, const JumpTerm&) = default;
};
struct DoneTerm {
  friend bool operator==(const DoneTerm&, const DoneTerm&) = default;
};
using Terminator = std::variant<JumpTerm, DoneTerm>;

struct InstrSeq {
  std::vector<Instruction> body;
  Terminator term = DoneTerm{};
  SourceSpan term_span;

  friend bool operator==(const InstrSeq& a, const InstrSeq& b) {
    return a.body == b.body && a.term == b.term;
  }
};

// ---------------------------------------------------------------------------
// Heaps

struct TupleVal {
  std::vector<Value> values;
  LockSym guard;
  friend bool operator==(const TupleVal&, const TupleVal&) = default;
};

struct CodeBlock {
  MilType sig;  // zero or more Foralls over a CodeType
  std::shared_ptr<const InstrSeq> body;
  SourceSpan span;

  friend bool operator==(const CodeBlock& a, const CodeBlock& b) {
    return a.sig == b.sig && *a.body == *b.body;
  }
};

struct HeapValue {
  std::variant<TupleVal, CodeBlock> node;

  template <class T>
  const T* as() const { return std::get_if<T>(&node); }
  template <class T>
  T* as() { return std::get_if<T>(&node); }

  friend bool operator==(const HeapValue&, const HeapValue&) = default;
};

/// Label -> heap value map that remembers insertion order (program order).
class Heap {
 public:
  using Entry = std::pair<Label, HeapValue>;

  bool contains(const Label& l) const { return index_.count(l.name) != 0; }
  const HeapValue* find(const Label& l) const {
    auto it = index_.find(l.name);
    return it == index_.end() ? nullptr : &entries_[it->second].second;
  }
  HeapValue* find(const Label& l) {
    auto it = index_.find(l.name);
    return it == index_.end() ? nullptr : &entries_[it->second].second;
  }
  /// Inserts a new binding; returns false if the label is already bound.
  bool insert(Label l, HeapValue v) {
    if (contains(l)) return false;
    index_.emplace(l.name, entries_.size());
    entries_.emplace_back(std::move(l), std::move(v));
    return true;
  }
  void assign(const Label& l, HeapValue v) {
    if (auto* slot = find(l)) {
      *slot = std::move(v);
    } else {
      insert(l, std::move(v));
    }
  }

  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }
  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }

  friend bool operator==(const Heap& a, const Heap& b) { return a.entries_ == b.entries_; }

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

inline HeapValue code_block(MilType sig, InstrSeq body, SourceSpan span = {}) {
  return {CodeBlock{std::move(sig), std::make_shared<const InstrSeq>(std::move(body)), span}};
}

// ---------------------------------------------------------------------------
// Signatures

struct Binder {
  LockSym lock;
  const std::optional<LockKind>* kind = nullptr;
};

/// A code block signature peeled into its forall binders and the code type.
struct SignatureView {
  std::vector<Binder> binders;
  const CodeType* code = nullptr;
};

inline std::optional<SignatureView> view_signature(const MilType& t) {
  SignatureView view;
  const MilType* cur = &t;
  while (const auto* fa = cur->as<ForallType>()) {
    view.binders.push_back({fa->binder, &fa->kind});
    cur = &*fa->body;
  }
  view.code = cur->as<CodeType>();
  if (!view.code) return std::nullopt;
  return view;
}

// ---------------------------------------------------------------------------
// Substitution of lock symbols (capture-free because binders are unique)

inline LockSym subst_lock(const LockSym& l, const LockMap& m) {
  auto it = m.find(l);
  return it == m.end() ? l : it->second;
}

inline Permission subst_perm(const Permission& p, const LockMap& m) {
  Permission out;
  for (const auto& l : p) out.insert(subst_lock(l, m));
  return out;
}

/// Composes `m` after the delayed substitution of a variable reference.
inline VarRef subst_varref(const VarRef& ref, const LockMap& m) {
  VarRef out{ref.var, {}};
  for (const auto& [k, v] : ref.subst) out.subst[k] = subst_lock(v, m);
  for (const auto& [k, v] : m) out.subst.emplace(k, v);
  return out;
}

inline Bound subst_bound(const Bound& b, const LockMap& m) {
  Bound out{subst_perm(b.locks, m), {}};
  for (const auto& r : b.vars) out.vars.push_back(subst_varref(r, m));
  return out;
}

inline LockKind subst_kind(const LockKind& k, const LockMap& m) {
  return {subst_bound(k.below, m), subst_bound(k.above, m)};
}

inline MilType subst_type(const MilType& t, const LockMap& m);

inline RegFileType subst_regs(const RegFileType& g, const LockMap& m) {
  RegFileType out;
  for (const auto& [r, t] : g.entries) out.entries.emplace(r, subst_type(t, m));
  return out;
}

inline MilType subst_type(const MilType& t, const LockMap& m) {
  if (m.empty()) return t;
  return std::visit(
      [&](const auto& n) -> MilType {
        using N = std::decay_t<decltype(n)>;
        if constexpr (std::is_same_v<N, IntType>) {
          return int_type();
        } else if constexpr (std::is_same_v<N, LockType>) {
          return lock_type(subst_lock(n.lock, m));
        } else if constexpr (std::is_same_v<N, TupleType>) {
          std::vector<MilType> cells;
          for (const auto& c : n.cells) cells.push_back(subst_type(c, m));
          return tuple_type(std::move(cells), subst_lock(n.guard, m));
        } else if constexpr (std::is_same_v<N, CodeType>) {
          return code_type(subst_regs(*n.regs, m), subst_perm(n.perm, m));
        } else {
          std::optional<LockKind> kind;
          if (n.kind) kind = subst_kind(*n.kind, m);
          LockMap inner = m;
          inner.erase(n.binder);
          return forall_type(n.binder, std::move(kind), subst_type(*n.body, inner));
        }
      },
      t.node);
}

inline Value subst_value(const Value& v, const LockMap& m) {
  if (m.empty()) return v;
  if (const auto* app = v.as<TypeAppValue>()) {
    return type_app(subst_value(*app->base, m), subst_lock(app->arg, m));
  }
  if (const auto* lit = v.as<LockLit>()) {
    if (lit->lock.tag) return lock_value(lit->lock.bit, subst_lock(*lit->lock.tag, m));
    return v;
  }
  if (const auto* u = v.as<UninitValue>()) return uninit_value(subst_type(u->type, m));
  return v;
}

inline Instruction subst_instr(const Instruction& ins, const LockMap& m) {
  if (m.empty()) return ins;
  Instruction out = ins;
  std::visit(
      [&](auto& n) {
        using N = std::decay_t<decltype(n)>;
        if constexpr (std::is_same_v<N, MoveInstr>) {
          n.src = subst_value(n.src, m);
        } else if constexpr (std::is_same_v<N, ArithInstr>) {
          n.rhs = subst_value(n.rhs, m);
        } else if constexpr (std::is_same_v<N, BranchInstr>) {
          n.operand = subst_value(n.operand, m);
          n.target = subst_value(n.target, m);
        } else if constexpr (std::is_same_v<N, ForkInstr>) {
          n.target = subst_value(n.target, m);
        } else if constexpr (std::is_same_v<N, MallocInstr>) {
          for (auto& c : n.cells) c = subst_type(c, m);
          n.guard = subst_lock(n.guard, m);
        } else if constexpr (std::is_same_v<N, LoadInstr>) {
          n.src = subst_value(n.src, m);
        } else if constexpr (std::is_same_v<N, StoreInstr>) {
          n.src = subst_value(n.src, m);
        } else if constexpr (std::is_same_v<N, NewLockInstr>) {
          // the binder itself is bound here; only its kind mentions outer locks
          if (n.kind) n.kind = subst_kind(*n.kind, m);
        } else if constexpr (std::is_same_v<N, TslInstr>) {
          n.lock = subst_value(n.lock, m);
        } else {
          n.lock = subst_value(n.lock, m);
        }
      },
      out.node);
  return out;
}

inline Terminator subst_term(const Terminator& t, const LockMap& m) {
  if (const auto* j = std::get_if<JumpTerm>(&t)) return JumpTerm{subst_value(j->target, m)};
  return t;
}

/// Substitutes in the suffix of `seq` starting at instruction `from`.
inline InstrSeq subst_seq(const InstrSeq& seq, const LockMap& m, std::size_t from = 0) {
  InstrSeq out;
  out.term_span = seq.term_span;
  LockMap cur = m;
  for (std::size_t i = from; i < seq.body.size(); ++i) {
    out.body.push_back(subst_instr(seq.body[i], cur));
    if (const auto* nl = seq.body[i].as<NewLockInstr>()) cur.erase(nl->binder);
  }
  out.term = subst_term(seq.term, cur);
  return out;
}

// ---------------------------------------------------------------------------
// Free lock symbols

inline void collect_bound_locks(const Bound& b, std::set<LockSym>& out) {
  out.insert(b.locks.begin(), b.locks.end());
  for (const auto& r : b.vars)
    for (const auto& [k, v] : r.subst) out.insert(v);
}

inline void collect_free_locks(const MilType& t, std::set<LockSym>& out) {
  std::visit(
      [&](const auto& n) {
        using N = std::decay_t<decltype(n)>;
        if constexpr (std::is_same_v<N, LockType>) {
          out.insert(n.lock);
        } else if constexpr (std::is_same_v<N, TupleType>) {
          for (const auto& c : n.cells) collect_free_locks(c, out);
          out.insert(n.guard);
        } else if constexpr (std::is_same_v<N, CodeType>) {
          for (const auto& [r, ty] : n.regs->entries) collect_free_locks(ty, out);
          out.insert(n.perm.begin(), n.perm.end());
        } else if constexpr (std::is_same_v<N, ForallType>) {
          if (n.kind) {
            collect_bound_locks(n.kind->below, out);
            collect_bound_locks(n.kind->above, out);
          }
          std::set<LockSym> inner;
          collect_free_locks(*n.body, inner);
          inner.erase(n.binder);
          out.insert(inner.begin(), inner.end());
        }
      },
      t.node);
}

inline std::set<LockSym> free_locks(const MilType& t) {
  std::set<LockSym> out;
  collect_free_locks(t, out);
  return out;
}

// ---------------------------------------------------------------------------
// Alpha-equivalence of types (binder ids may differ)

inline bool same_type(const MilType& a, const MilType& b);

inline bool same_regs(const RegFileType& a, const RegFileType& b) {
  if (a.entries.size() != b.entries.size()) return false;
  auto ia = a.entries.begin();
  auto ib = b.entries.begin();
  for (; ia != a.entries.end(); ++ia, ++ib) {
    if (ia->first != ib->first || !same_type(ia->second, ib->second)) return false;
  }
  return true;
}

inline bool same_type(const MilType& a, const MilType& b) {
  if (a.node.index() != b.node.index()) return false;
  if (const auto* ta = a.as<TupleType>()) {
    const auto* tb = b.as<TupleType>();
    if (ta->guard != tb->guard || ta->cells.size() != tb->cells.size()) return false;
    for (std::size_t i = 0; i < ta->cells.size(); ++i)
      if (!same_type(ta->cells[i], tb->cells[i])) return false;
    return true;
  }
  if (const auto* ca = a.as<CodeType>()) {
    const auto* cb = b.as<CodeType>();
    return ca->perm == cb->perm && same_regs(*ca->regs, *cb->regs);
  }
  if (const auto* fa = a.as<ForallType>()) {
    const auto* fb = b.as<ForallType>();
    if (fa->kind.has_value() != fb->kind.has_value()) return false;
    if (fa->kind && !(*fa->kind == *fb->kind)) return false;
    if (fa->binder == fb->binder) return same_type(*fa->body, *fb->body);
    // both binders become a lock id no program uses
    static thread_local std::uint32_t next_fresh = 0xF0000000u;
    LockSym fresh{next_fresh++, fa->binder.name};
    return same_type(subst_type(*fa->body, {{fa->binder, fresh}}),
                     subst_type(*fb->body, {{fb->binder, fresh}}));
  }
  return a == b;
}

// ---------------------------------------------------------------------------
// Annotation erasure

inline MilType erase_type(const MilType& t) {
  return std::visit(
      [&](const auto& n) -> MilType {
        using N = std::decay_t<decltype(n)>;
        if constexpr (std::is_same_v<N, TupleType>) {
          std::vector<MilType> cells;
          for (const auto& c : n.cells) cells.push_back(erase_type(c));
          return tuple_type(std::move(cells), n.guard);
        } else if constexpr (std::is_same_v<N, CodeType>) {
          RegFileType regs;
          for (const auto& [r, ty] : n.regs->entries) regs.entries.emplace(r, erase_type(ty));
          return code_type(std::move(regs), n.perm);
        } else if constexpr (std::is_same_v<N, ForallType>) {
          return forall_type(n.binder, std::nullopt, erase_type(*n.body));
        } else {
          return MilType{n};
        }
      },
      t.node);
}

inline Value erase_value(const Value& v) {
  if (const auto* app = v.as<TypeAppValue>()) return type_app(erase_value(*app->base), app->arg);
  if (const auto* u = v.as<UninitValue>()) return uninit_value(erase_type(u->type));
  return v;
}

inline InstrSeq erase_seq(const InstrSeq& seq) {
  InstrSeq out = seq;
  for (auto& ins : out.body) {
    std::visit(
        [](auto& n) {
          using N = std::decay_t<decltype(n)>;
          if constexpr (std::is_same_v<N, NewLockInstr>) {
            n.kind.reset();
          } else if constexpr (std::is_same_v<N, MallocInstr>) {
            for (auto& c : n.cells) c = erase_type(c);
          } else if constexpr (std::is_same_v<N, MoveInstr> || std::is_same_v<N, LoadInstr>) {
            n.src = erase_value(n.src);
          } else if constexpr (std::is_same_v<N, StoreInstr>) {
            n.src = erase_value(n.src);
          }
        },
        ins.node);
  }
  return out;
}

/// Removes every lock-order annotation (newLock kinds and forall kinds).
inline Heap erase(const Heap& program) {
  Heap out;
  for (const auto& [label, hv] : program) {
    if (const auto* cb = hv.as<CodeBlock>()) {
      out.insert(label, code_block(erase_type(cb->sig), erase_seq(*cb->body), cb->span));
    } else {
      const auto& tv = *hv.as<TupleVal>();
      TupleVal t{{}, tv.guard};
      for (const auto& v : tv.values) t.values.push_back(erase_value(v));
      out.insert(label, HeapValue{std::move(t)});
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Traversal helpers

namespace detail {
inline void type_annotation_flags(const MilType& t, bool& annotated, bool& plain) {
  std::visit(
      [&](const auto& n) {
        using N = std::decay_t<decltype(n)>;
        if constexpr (std::is_same_v<N, TupleType>) {
          for (const auto& c : n.cells) type_annotation_flags(c, annotated, plain);
        } else if constexpr (std::is_same_v<N, CodeType>) {
          for (const auto& [r, ty] : n.regs->entries) type_annotation_flags(ty, annotated, plain);
        } else if constexpr (std::is_same_v<N, ForallType>) {
          (n.kind ? annotated : plain) = true;
          type_annotation_flags(*n.body, annotated, plain);
        }
      },
      t.node);
}
}  // namespace detail

struct AnnotationFlags {
  bool annotated = false;  // some binder carries a kind
  bool plain = false;      // some binder lacks a kind
};

inline AnnotationFlags annotation_flags(const Heap& program) {
  AnnotationFlags f;
  for (const auto& [label, hv] : program) {
    const auto* cb = hv.as<CodeBlock>();
    if (!cb) continue;
    detail::type_annotation_flags(cb->sig, f.annotated, f.plain);
    for (const auto& ins : cb->body->body) {
      if (const auto* nl = ins.as<NewLockInstr>()) (nl->kind ? f.annotated : f.plain) = true;
      if (const auto* m = ins.as<MallocInstr>())
        for (const auto& c : m->cells) detail::type_annotation_flags(c, f.annotated, f.plain);
    }
  }
  return f;
}

inline void collect_type_lock_ids(const MilType& t, std::uint32_t& max_id) {
  std::set<LockSym> locks;
  collect_free_locks(t, locks);
  for (const auto& l : locks) max_id = std::max(max_id, l.id);
  const MilType* cur = &t;
  std::visit(
      [&](const auto& n) {
        using N = std::decay_t<decltype(n)>;
        if constexpr (std::is_same_v<N, ForallType>) {
          max_id = std::max(max_id, n.binder.id);
          collect_type_lock_ids(*n.body, max_id);
        } else if constexpr (std::is_same_v<N, TupleType>) {
          for (const auto& c : n.cells) collect_type_lock_ids(c, max_id);
        } else if constexpr (std::is_same_v<N, CodeType>) {
          for (const auto& [r, ty] : n.regs->entries) collect_type_lock_ids(ty, max_id);
        }
      },
      cur->node);
}

/// Largest lock id mentioned anywhere in the heap (0 when none); fresh locks
/// are allocated above it.
inline std::uint32_t max_lock_id(const Heap& heap) {
  std::uint32_t max_id = 0;
  auto scan_value = [&](const Value& v, auto& self) -> void {
    if (const auto* app = v.as<TypeAppValue>()) {
      max_id = std::max(max_id, app->arg.id);
      self(*app->base, self);
    } else if (const auto* lit = v.as<LockLit>()) {
      if (lit->lock.tag) max_id = std::max(max_id, lit->lock.tag->id);
    } else if (const auto* u = v.as<UninitValue>()) {
      collect_type_lock_ids(u->type, max_id);
    }
  };
  for (const auto& [label, hv] : heap) {
    if (const auto* tv = hv.as<TupleVal>()) {
      max_id = std::max(max_id, tv->guard.id);
      for (const auto& v : tv->values) scan_value(v, scan_value);
      continue;
    }
    const auto& cb = *hv.as<CodeBlock>();
    collect_type_lock_ids(cb.sig, max_id);
    auto kind_ids = [&](const std::optional<LockKind>& k) {
      if (!k) return;
      std::set<LockSym> s;
      collect_bound_locks(k->below, s);
      collect_bound_locks(k->above, s);
      for (const auto& l : s) max_id = std::max(max_id, l.id);
    };
    for (const auto& ins : cb.body->body) {
      std::visit(
          [&](const auto& n) {
            using N = std::decay_t<decltype(n)>;
            if constexpr (std::is_same_v<N, NewLockInstr>) {
              max_id = std::max(max_id, n.binder.id);
              kind_ids(n.kind);
            } else if constexpr (std::is_same_v<N, MallocInstr>) {
              max_id = std::max(max_id, n.guard.id);
              for (const auto& c : n.cells) collect_type_lock_ids(c, max_id);
            } else if constexpr (std::is_same_v<N, MoveInstr> || std::is_same_v<N, LoadInstr> ||
                                 std::is_same_v<N, StoreInstr>) {
              scan_value(n.src, scan_value);
            } else if constexpr (std::is_same_v<N, BranchInstr>) {
              scan_value(n.operand, scan_value);
              scan_value(n.target, scan_value);
            } else if constexpr (std::is_same_v<N, ForkInstr>) {
              scan_value(n.target, scan_value);
            } else if constexpr (std::is_same_v<N, TslInstr> || std::is_same_v<N, UnlockInstr>) {
              scan_value(n.lock, scan_value);
            } else if constexpr (std::is_same_v<N, ArithInstr>) {
              scan_value(n.rhs, scan_value);
            }
          },
          ins.node);
    }
    if (const auto* j = std::get_if<JumpTerm>(&cb.body->term)) scan_value(j->target, scan_value);
  }
  return max_id;
}

}  // namespace milc
