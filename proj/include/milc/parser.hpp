#pragma once

// Lexer and recursive-descent parser for MIL surface syntax.

#include <cctype>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "milc/ast.hpp"
#include "milc/constraint.hpp"
#include "milc/diagnostic.hpp"

namespace milc {

struct ParseOptions {
  std::string file;
  int registers = 8;
};

/// Name -> lock table used by the standalone type and constraint parsers.
/// Unknown names are created on first use.
class LockTable {
 public:
  explicit LockTable(std::uint32_t first_id = 1) : next_(first_id) {}
  LockSym get(const std::string& name) {
    auto it = locks_.find(name);
    if (it != locks_.end()) return it->second;
    LockSym l{next_++, name};
    locks_.emplace(name, l);
    return l;
  }
  /// A new lock that is not entered under its name.
  LockSym fresh(const std::string& name) { return {next_++, name}; }
  void add(const LockSym& l) {
    locks_[l.name] = l;
    if (l.id >= next_) next_ = l.id + 1;
  }
  const std::map<std::string, LockSym>& all() const { return locks_; }

 private:
  std::map<std::string, LockSym> locks_;
  std::uint32_t next_;
};

namespace detail {

enum class Tok { Ident, Int, LockBit, Punct, End };

struct Token {
  Tok kind = Tok::End;
  std::string text;
  std::int64_t number = 0;
  SourceSpan span;
};

struct ParseError {
  Diagnostic diag;
};

class Lexer {
 public:
  Lexer(std::string_view src, std::string file) : src_(src), file_(std::move(file)) {}

  std::vector<Token> run() {
    std::vector<Token> out;
    while (true) {
      skip_space();
      Token t;
      t.span = {file_, line_, col_, 0};
      if (pos_ >= src_.size()) {
        t.kind = Tok::End;
        t.span = {file_, last_line_, last_col_, 1};
        out.push_back(t);
        return out;
      }
      char c = src_[pos_];
      std::size_t start = pos_;
      if (std::isalpha(static_cast<unsigned char>(c)) || c == '_') {
        while (pos_ < src_.size() && (std::isalnum(static_cast<unsigned char>(src_[pos_])) ||
                                      src_[pos_] == '_'))
          advance();
        t.kind = Tok::Ident;
        t.text = std::string(src_.substr(start, pos_ - start));
      } else if (std::isdigit(static_cast<unsigned char>(c)) ||
                 (c == '-' && pos_ + 1 < src_.size() &&
                  std::isdigit(static_cast<unsigned char>(src_[pos_ + 1])))) {
        advance();
        while (pos_ < src_.size() && std::isdigit(static_cast<unsigned char>(src_[pos_])))
          advance();
        std::string digits(src_.substr(start, pos_ - start));
        if (pos_ < src_.size() && src_[pos_] == 'b' && (digits == "0" || digits == "1") &&
            !(pos_ + 1 < src_.size() && (std::isalnum(static_cast<unsigned char>(src_[pos_ + 1])) ||
                                         src_[pos_ + 1] == '_'))) {
          advance();
          t.kind = Tok::LockBit;
          t.number = digits == "1";
          t.text = digits + "b";
        } else {
          if (pos_ < src_.size() && (std::isalpha(static_cast<unsigned char>(src_[pos_])) ||
                                     src_[pos_] == '_'))
            fail(t.span, "malformed number '" + digits + src_[pos_] + "'");
          t.kind = Tok::Int;
          t.text = digits;
          try {
            t.number = std::stoll(digits);
          } catch (const std::exception&) {
            fail(t.span, "integer literal out of range: " + digits);
          }
        }
      } else if (c == ':' && peek(1) == '=') {
        advance(2);
        t.kind = Tok::Punct;
        t.text = ":=";
      } else if (c == ':' && peek(1) == ':') {
        advance(2);
        t.kind = Tok::Punct;
        t.text = "::";
      } else if (std::string_view(":,;.(){}[]<>^=+?/").find(c) != std::string_view::npos) {
        advance();
        t.kind = Tok::Punct;
        t.text = std::string(1, c);
      } else {
        fail(t.span, std::string("unexpected character '") + c + "'");
      }
      t.span.length = static_cast<int>(pos_ - start);
      out.push_back(std::move(t));
    }
  }

 private:
  char peek(std::size_t off) const {
    return pos_ + off < src_.size() ? src_[pos_ + off] : '\0';
  }
  void advance(std::size_t n = 1) {
    for (std::size_t i = 0; i < n && pos_ < src_.size(); ++i) {
      if (!std::isspace(static_cast<unsigned char>(src_[pos_]))) {
        last_line_ = line_;
        last_col_ = col_;
      }
      if (src_[pos_] == '\n') {
        ++line_;
        col_ = 1;
      } else {
        ++col_;
      }
      ++pos_;
    }
  }
  void skip_space() {
    while (pos_ < src_.size()) {
      char c = src_[pos_];
      if (std::isspace(static_cast<unsigned char>(c))) {
        advance();
      } else if (c == '-' && peek(1) == '-') {
        while (pos_ < src_.size() && src_[pos_] != '\n') advance();
      } else {
        break;
      }
    }
  }
  [[noreturn]] void fail(SourceSpan span, std::string msg) {
    span.length = 1;
    throw ParseError{{Severity::Error, std::move(span), "P-LEX", std::move(msg)}};
  }

  std::string_view src_;
  std::string file_;
  std::size_t pos_ = 0;
  int line_ = 1;
  int col_ = 1;
  int last_line_ = 1;
  int last_col_ = 1;
};

inline std::optional<int> register_index(const std::string& s) {
  if (s.size() < 2 || s[0] != 'r') return std::nullopt;
  for (std::size_t i = 1; i < s.size(); ++i)
    if (!std::isdigit(static_cast<unsigned char>(s[i]))) return std::nullopt;
  if (s.size() > 10) return 1 << 30;
  return std::stoi(s.substr(1));
}

inline const std::set<std::string>& keywords() {
  static const std::set<std::string> kw{"forall", "requires", "jump",    "done",
                                        "fork",   "if",       "malloc",  "newLock",
                                        "testSetLock", "unlock", "int"};
  return kw;
}

class TokenStream {
 public:
  explicit TokenStream(std::vector<Token> toks) : toks_(std::move(toks)) {}

  const Token& peek(std::size_t off = 0) const {
    std::size_t i = std::min(pos_ + off, toks_.size() - 1);
    return toks_[i];
  }
  const Token& next() {
    const Token& t = toks_[pos_];
    if (pos_ + 1 < toks_.size()) ++pos_;
    return t;
  }
  bool at_punct(std::string_view p, std::size_t off = 0) const {
    const auto& t = peek(off);
    return t.kind == Tok::Punct && t.text == p;
  }
  bool at_ident(std::string_view s, std::size_t off = 0) const {
    const auto& t = peek(off);
    return t.kind == Tok::Ident && t.text == s;
  }
  bool accept_punct(std::string_view p) {
    if (!at_punct(p)) return false;
    next();
    return true;
  }
  bool at_end() const { return peek().kind == Tok::End; }
  const Token& last() const { return toks_[pos_ == 0 ? 0 : pos_ - 1]; }

 private:
  std::vector<Token> toks_;
  std::size_t pos_ = 0;
};

[[noreturn]] inline void error_at(const SourceSpan& span, const std::string& code,
                                  const std::string& msg) {
  throw ParseError{{Severity::Error, span, code, msg}};
}

inline std::string describe(const Token& t) {
  if (t.kind == Tok::End) return "end of input";
  return "'" + t.text + "'";
}

/// Lexical scope of lock symbols during parsing of one block.
class LockScope {
 public:
  std::optional<LockSym> find(const std::string& name) const {
    for (auto it = frames_.rbegin(); it != frames_.rend(); ++it) {
      auto f = it->find(name);
      if (f != it->end()) return f->second;
    }
    if (table_) {
      return table_->get(name);
    }
    return std::nullopt;
  }
  void push() { frames_.emplace_back(); }
  void pop() { frames_.pop_back(); }
  void bind(const std::string& source_name, const LockSym& l) { frames_.back()[source_name] = l; }
  void set_table(LockTable* t) { table_ = t; }

 private:
  std::vector<std::map<std::string, LockSym>> frames_{1};
  LockTable* table_ = nullptr;
};

struct BinderUse {
  bool annotated = false;
  SourceSpan span;
};

class Parser {
 public:
  Parser(std::vector<Token> toks, ParseOptions opts)
      : ts_(std::move(toks)), opts_(std::move(opts)) {}

  void use_table(LockTable* table) {
    table_ = table;
    scope_.set_table(table);
  }

  Heap program() {
    Heap heap;
    while (!ts_.at_end()) {
      const Token& name = expect_ident("block name");
      if (keywords().count(name.text) || register_index(name.text))
        error_at(name.span, "P-SYNTAX", "expected a block name, found " + describe(name));
      block_names_.clear();
      scope_ = LockScope{};
      scope_.push();
      MilType sig = signature();
      InstrSeq body = block_body();
      scope_.pop();
      for (const auto& n : block_names_) lock_names_.emplace(n.first, n.second);
      if (!heap.insert(Label{name.text}, code_block(std::move(sig), std::move(body), name.span)))
        error_at(name.span, "P-DUP-LABEL", "duplicate label '" + name.text + "'");
    }
    for (const auto& [n, span] : label_refs_) {
      if (!heap.contains(Label{n})) {
        if (lock_names_.count(n))
          error_at(span, "P-NAMESPACE", "lock '" + n + "' used where a label is expected");
        error_at(span, "P-UNBOUND-LABEL", "unbound label '" + n + "'");
      }
    }
    for (const auto& [n, span] : lock_names_) {
      if (heap.contains(Label{n}))
        error_at(span, "P-NAMESPACE", "'" + n + "' is both a lock and a label");
    }
    return heap;
  }

  MilType standalone_type() {
    MilType t = type();
    expect_end();
    return t;
  }

  ConstraintSet constraints() {
    ConstraintSet out;
    while (!ts_.at_end()) {
      SourceSpan span = ts_.peek().span;
      if (ts_.at_punct("{")) {
        Permission p = permission();
        expect_punct("<");
        LockSym l = lock_ref();
        out.push_back({GroundBelow{std::move(p), std::move(l)}, span});
      } else if (is_var(ts_.peek())) {
        VarRef v = var_ref();
        expect_punct("<");
        LockSym l = lock_ref();
        out.push_back({VarBelow{std::move(v), std::move(l)}, span});
      } else {
        LockSym l = lock_ref();
        expect_punct("<");
        if (!is_var(ts_.peek()))
          error_at(ts_.peek().span, "P-SYNTAX",
                   "expected a permission variable, found " + describe(ts_.peek()));
        VarRef v = var_ref();
        out.push_back({AboveVar{std::move(l), std::move(v)}, span});
      }
      ts_.accept_punct(";");
    }
    return out;
  }

 private:
  // ---- helpers ----------------------------------------------------------
  const Token& expect_ident(const std::string& what) {
    const Token& t = ts_.peek();
    if (t.kind != Tok::Ident)
      error_at(t.span, "P-SYNTAX", "expected " + what + ", found " + describe(t));
    return ts_.next();
  }
  void expect_keyword(const std::string& kw) {
    const Token& t = ts_.peek();
    if (!(t.kind == Tok::Ident && t.text == kw))
      error_at(t.span, "P-SYNTAX", "expected '" + kw + "', found " + describe(t));
    ts_.next();
  }
  const Token& expect_punct(const std::string& p) {
    const Token& t = ts_.peek();
    if (!(t.kind == Tok::Punct && t.text == p))
      error_at(t.span, "P-SYNTAX", "expected '" + p + "', found " + describe(t));
    return ts_.next();
  }
  std::int64_t expect_int(const std::string& what) {
    const Token& t = ts_.peek();
    if (t.kind != Tok::Int)
      error_at(t.span, "P-SYNTAX", "expected " + what + ", found " + describe(t));
    return ts_.next().number;
  }
  void expect_end() {
    if (!ts_.at_end())
      error_at(ts_.peek().span, "P-SYNTAX", "unexpected " + describe(ts_.peek()));
  }

  static bool is_var(const Token& t) {
    if (t.kind != Tok::Ident || t.text.size() < 4 || t.text.rfind("rho", 0) != 0) return false;
    for (std::size_t i = 3; i < t.text.size(); ++i)
      if (!std::isdigit(static_cast<unsigned char>(t.text[i]))) return false;
    return true;
  }

  VarRef var_ref() {
    const Token& t = ts_.next();
    VarRef ref{PermVar{static_cast<std::uint32_t>(std::stoul(t.text.substr(3)))}, {}};
    if (ts_.accept_punct("[")) {
      do {
        LockSym to = lock_ref();
        expect_punct("/");
        LockSym from = lock_ref();
        ref.subst[from] = to;
      } while (ts_.accept_punct(","));
      expect_punct("]");
    }
    return ref;
  }

  Register reg_from(const Token& t) {
    auto idx = register_index(t.text);
    if (!idx || *idx < 1 || *idx > opts_.registers)
      error_at(t.span, "P-UNBOUND-REG",
               "register '" + t.text + "' outside r1..r" + std::to_string(opts_.registers));
    return Register{*idx};
  }

  bool at_register(std::size_t off = 0) const {
    const auto& t = ts_.peek(off);
    return t.kind == Tok::Ident && register_index(t.text).has_value();
  }

  Register reg() {
    const Token& t = ts_.peek();
    if (!at_register()) error_at(t.span, "P-SYNTAX", "expected a register, found " + describe(t));
    return reg_from(ts_.next());
  }

  LockSym lock_ref() {
    const Token& t = expect_ident("a lock");
    if (keywords().count(t.text) || register_index(t.text))
      error_at(t.span, "P-SYNTAX", "expected a lock, found " + describe(t));
    auto l = scope_.find(t.text);
    if (!l) error_at(t.span, "P-UNBOUND-LOCK", "unbound lock '" + t.text + "'");
    return *l;
  }

  /// Introduces a new lock binder, renaming it apart from any other binder
  /// of the same block.
  LockSym bind_lock(const Token& t, bool annotated) {
    if (keywords().count(t.text) || register_index(t.text) || is_var(t))
      error_at(t.span, "P-SYNTAX", "invalid lock name " + describe(t));
    if (!binder_uses_.empty() && binder_uses_.front().annotated != annotated) {
      error_at(t.span, "P-MIXED",
               "program mixes annotated and annotation-free binders (first binder at line " +
                   std::to_string(binder_uses_.front().span.line) + ")");
    }
    binder_uses_.push_back({annotated, t.span});
    std::string name = t.text;
    if (block_names_.count(name)) {
      int k = 1;
      while (block_names_.count(t.text + "_" + std::to_string(k))) ++k;
      name = t.text + "_" + std::to_string(k);
    }
    block_names_.emplace(name, t.span);
    LockSym l = table_ ? table_->fresh(name) : LockSym{next_lock_++, name};
    scope_.bind(t.text, l);
    return l;
  }

  Permission permission() {
    expect_punct("{");
    Permission p;
    if (!ts_.at_punct("}")) {
      do {
        p.insert(lock_ref());
      } while (ts_.accept_punct(","));
    }
    expect_punct("}");
    return p;
  }

  LockKind kind() {
    expect_punct("(");
    Permission below = permission();
    expect_punct(",");
    Permission above = permission();
    expect_punct(")");
    return ground_kind(std::move(below), std::move(above));
  }

  // ---- types ------------------------------------------------------------
  RegFileType reg_file() {
    expect_punct("(");
    RegFileType g;
    if (!ts_.at_punct(")")) {
      do {
        const Token& rt = ts_.peek();
        Register r = reg();
        expect_punct(":");
        MilType t = type();
        if (!g.entries.emplace(r, std::move(t)).second)
          error_at(rt.span, "P-SYNTAX", "register '" + rt.text + "' typed twice");
      } while (ts_.accept_punct(","));
    }
    expect_punct(")");
    return g;
  }

  MilType code_type_tail() {
    RegFileType g = reg_file();
    Permission p;
    if (ts_.at_ident("requires")) {
      ts_.next();
      p = permission();
    }
    return code_type(std::move(g), std::move(p));
  }

  struct PendingBinder {
    LockSym lock;
    std::optional<LockKind> kind;
  };

  /// Parses `forall[...].` groups (possibly several); binders stay in scope
  /// until the caller pops.
  std::vector<PendingBinder> forall_prefix() {
    std::vector<PendingBinder> out;
    while (ts_.at_ident("forall")) {
      ts_.next();
      expect_punct("[");
      do {
        const Token& bt = expect_ident("a lock binder");
        std::optional<LockKind> k;
        bool annotated = ts_.at_punct("::");
        if (annotated) {
          ts_.next();
          k = kind();
        }
        out.push_back({bind_lock(bt, annotated), std::move(k)});
      } while (ts_.accept_punct(","));
      expect_punct("]");
      expect_punct(".");
    }
    return out;
  }

  static MilType wrap_foralls(std::vector<PendingBinder> binders, MilType body) {
    for (auto it = binders.rbegin(); it != binders.rend(); ++it)
      body = forall_type(it->lock, std::move(it->kind), std::move(body));
    return body;
  }

  MilType type() {
    const Token& t = ts_.peek();
    if (t.kind == Tok::Ident && t.text == "int") {
      ts_.next();
      return int_type();
    }
    if (t.kind == Tok::Ident && t.text == "forall") {
      scope_.push();
      auto binders = forall_prefix();
      MilType body = type();
      scope_.pop();
      return wrap_foralls(std::move(binders), std::move(body));
    }
    if (t.kind == Tok::Punct && t.text == "<") {
      ts_.next();
      std::vector<MilType> cells;
      if (!ts_.at_punct(">")) {
        do {
          cells.push_back(type());
        } while (ts_.accept_punct(","));
      }
      expect_punct(">");
      expect_punct("^");
      LockSym guard = lock_ref();
      return tuple_type(std::move(cells), std::move(guard));
    }
    if (t.kind == Tok::Punct && t.text == "(") return code_type_tail();
    if (t.kind == Tok::Ident) return lock_type(lock_ref());
    error_at(t.span, "P-SYNTAX", "expected a type, found " + describe(t));
  }

  MilType signature() {
    auto binders = forall_prefix();
    if (!ts_.at_punct("("))
      error_at(ts_.peek().span, "P-SYNTAX",
               "expected a register file type, found " + describe(ts_.peek()));
    MilType code = code_type_tail();
    return wrap_foralls(std::move(binders), std::move(code));
  }

  // ---- values -----------------------------------------------------------
  Value value() {
    const Token& t = ts_.peek();
    Value v;
    if (t.kind == Tok::Int) {
      return int_value(ts_.next().number);
    } else if (t.kind == Tok::LockBit) {
      ts_.next();
      if (ts_.at_punct("^"))
        error_at(ts_.peek().span, "P-TAGGED", "tagged lock values appear only at runtime");
      return lock_value(t.number ? LockBit::Closed : LockBit::Open);
    } else if (t.kind == Tok::Punct && t.text == "?") {
      ts_.next();
      return uninit_value(type());
    } else if (at_register()) {
      v = reg_value(reg_from(ts_.next()));
    } else if (t.kind == Tok::Ident && !keywords().count(t.text)) {
      const Token& lt = ts_.next();
      if (!table_ && scope_.find(lt.text))
        error_at(lt.span, "P-NAMESPACE", "lock '" + lt.text + "' used where a value is expected");
      label_refs_.emplace_back(lt.text, lt.span);
      v = label_value(lt.text);
    } else {
      error_at(t.span, "P-SYNTAX", "expected a value, found " + describe(t));
    }
    // type applications: v[l1,l2]; `[` followed by an integer is a load index
    while (ts_.at_punct("[") && ts_.peek(1).kind == Tok::Ident) {
      ts_.next();
      do {
        v = type_app(std::move(v), lock_ref());
      } while (ts_.accept_punct(","));
      expect_punct("]");
    }
    return v;
  }

  // ---- instructions -----------------------------------------------------
  SourceSpan span_from(const SourceSpan& start) const {
    SourceSpan s = start;
    const auto& last = ts_.last().span;
    if (last.line == start.line) s.length = last.column + last.length - start.column;
    return s;
  }

  InstrSeq block_body() {
    expect_punct("{");
    InstrSeq seq;
    int pushed = 0;
    while (true) {
      const Token& t = ts_.peek();
      SourceSpan start = t.span;
      if (t.kind == Tok::Ident && t.text == "jump") {
        ts_.next();
        seq.term = JumpTerm{value()};
        seq.term_span = span_from(start);
        break;
      }
      if (t.kind == Tok::Ident && t.text == "done") {
        ts_.next();
        seq.term = DoneTerm{};
        seq.term_span = span_from(start);
        break;
      }
      if (t.kind == Tok::Punct && t.text == "}")
        error_at(t.span, "P-SYNTAX", "instruction sequence must end with 'jump' or 'done'");
      if (t.kind == Tok::End) error_at(t.span, "P-SYNTAX", "unexpected end of input in block");
      Instruction ins = instruction(pushed);
      ins.span = span_from(start);
      seq.body.push_back(std::move(ins));
      ts_.accept_punct(";");
    }
    ts_.accept_punct(";");
    expect_punct("}");
    for (; pushed > 0; --pushed) scope_.pop();
    return seq;
  }

  Instruction instruction(int& pushed) {
    const Token& t = ts_.peek();
    if (t.kind == Tok::Ident && t.text == "if") {
      ts_.next();
      Register r = reg();
      expect_punct("=");
      Value operand = value();
      expect_keyword("jump");
      Value target = value();
      return {BranchInstr{r, std::move(operand), std::move(target)}, {}};
    }
    if (t.kind == Tok::Ident && t.text == "fork") {
      ts_.next();
      return {ForkInstr{value()}, {}};
    }
    if (t.kind == Tok::Ident && t.text == "unlock") {
      ts_.next();
      return {UnlockInstr{value()}, {}};
    }
    if (at_register()) {
      Register dst = reg();
      if (ts_.accept_punct("[")) {
        int idx = static_cast<int>(expect_int("a tuple index"));
        if (idx < 1) error_at(ts_.last().span, "P-SYNTAX", "tuple indices start at 1");
        expect_punct("]");
        expect_punct(":=");
        return {StoreInstr{dst, idx, value()}, {}};
      }
      expect_punct(":=");
      const Token& rhs = ts_.peek();
      if (rhs.kind == Tok::Ident && rhs.text == "newLock")
        error_at(rhs.span, "P-SYNTAX", "newLock needs a lock binder: 'lam, r := newLock'");
      if (rhs.kind == Tok::Ident && rhs.text == "testSetLock") {
        ts_.next();
        return {TslInstr{dst, value()}, {}};
      }
      if (rhs.kind == Tok::Ident && rhs.text == "malloc") {
        ts_.next();
        expect_punct("[");
        std::vector<MilType> cells;
        if (!ts_.at_punct("]")) {
          do {
            cells.push_back(type());
          } while (ts_.accept_punct(","));
        }
        expect_punct("]");
        expect_punct("^");
        LockSym guard = lock_ref();
        return {MallocInstr{dst, std::move(cells), std::move(guard)}, {}};
      }
      Value src = value();
      if (ts_.at_punct("+")) {
        const auto* rv = src.as<RegValue>();
        if (!rv) error_at(ts_.peek().span, "P-SYNTAX", "left operand of '+' must be a register");
        ts_.next();
        return {ArithInstr{dst, rv->reg, value()}, {}};
      }
      if (ts_.at_punct("[") && ts_.peek(1).kind == Tok::Int) {
        ts_.next();
        int idx = static_cast<int>(expect_int("a tuple index"));
        if (idx < 1) error_at(ts_.last().span, "P-SYNTAX", "tuple indices start at 1");
        expect_punct("]");
        return {LoadInstr{dst, std::move(src), idx}, {}};
      }
      return {MoveInstr{dst, std::move(src)}, {}};
    }
    if (t.kind == Tok::Ident && !keywords().count(t.text)) {
      const Token& bt = ts_.next();
      std::optional<LockKind> k;
      bool annotated = ts_.at_punct("::");
      if (annotated) {
        ts_.next();
        k = kind();
      }
      expect_punct(",");
      Register dst = reg();
      expect_punct(":=");
      expect_keyword("newLock");
      scope_.push();
      ++pushed;
      LockSym l = bind_lock(bt, annotated);
      return {NewLockInstr{std::move(l), std::move(k), dst}, {}};
    }
    error_at(t.span, "P-SYNTAX", "expected an instruction, found " + describe(t));
  }

  TokenStream ts_;
  ParseOptions opts_;
  LockScope scope_;
  LockTable* table_ = nullptr;
  std::uint32_t next_lock_ = 1;
  std::map<std::string, SourceSpan> block_names_;
  std::map<std::string, SourceSpan> lock_names_;
  std::vector<std::pair<std::string, SourceSpan>> label_refs_;
  std::vector<BinderUse> binder_uses_;
};

template <class F>
auto guarded(F&& f) -> Result<decltype(f())> {
  try {
    return f();
  } catch (const ParseError& e) {
    return std::vector<Diagnostic>{e.diag};
  }
}

}  // namespace detail

/// Parses a whole program. Lock binders are renamed apart within each block
/// (`l`, `l_1`, ...); lock ids are unique across the program.
inline Result<Heap> parse_program(std::string_view source, const ParseOptions& opts = {}) {
  return detail::guarded([&] {
    detail::Parser p(detail::Lexer(source, opts.file).run(), opts);
    return p.program();
  });
}

/// Parses a standalone type; free lock names resolve through `table`.
inline Result<MilType> parse_type(std::string_view source, LockTable& table,
                                  const ParseOptions& opts = {}) {
  return detail::guarded([&] {
    detail::Parser p(detail::Lexer(source, opts.file).run(), opts);
    p.use_table(&table);
    return p.standalone_type();
  });
}

/// Parses a `.milc-constraints` file: `{a,b} < l`, `rho3 < l`, `l < rho4`,
/// with an optional substitution `rho3[x/y]`.
inline Result<ConstraintSet> parse_constraints(std::string_view source, LockTable& table,
                                               const ParseOptions& opts = {}) {
  return detail::guarded([&] {
    detail::Parser p(detail::Lexer(source, opts.file).run(), opts);
    p.use_table(&table);
    return p.constraints();
  });
}

inline Result<ConstraintSet> parse_constraints(std::string_view source) {
  LockTable table;
  return parse_constraints(source, table);
}

}  // namespace milc
