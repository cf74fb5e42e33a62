#include <gtest/gtest.h>

#include "milc/typecheck.hpp"
#include "support.hpp"

using namespace milc;
using milc::test::load;
using milc::test::parse_or_throw;

namespace {

/// Psi of the annotated main: labels plus the kinds its newLocks declare.
struct MainEnv {
  TypingEnv env;
  std::map<std::string, LockSym> locks;
};

MainEnv main_env(const Heap& h) {
  MainEnv out{program_env(h), {}};
  const auto* main = h.find({"main"})->as<CodeBlock>();
  for (const auto& ins : main->body->body)
    if (const auto* nl = ins.as<NewLockInstr>()) {
      out.env.locks[nl->binder] = nl->kind ? *nl->kind : LockKind{};
      out.locks[nl->binder.name] = nl->binder;
    }
  return out;
}

std::vector<std::string> codes(const std::string& src) {
  std::vector<std::string> out;
  for (const auto& e : check_program(parse_or_throw(src))) out.push_back(e.code);
  return out;
}

RegFileType regs(std::initializer_list<std::pair<int, MilType>> es) {
  RegFileType g;
  for (const auto& [r, t] : es) g.entries.emplace(Register{r}, t);
  return g;
}

const char* kRelease =
    "release forall[l::({},{})].(r1:<l>^l) requires {l} {\n  unlock r1\n  done\n}\n";

}  // namespace

TEST(LessThan, KindEntriesAndTransitivity) {
  LockSym f1{1, "f1"}, f2{2, "f2"}, f3{3, "f3"};
  TypingEnv env;
  env.locks[f1] = ground_kind({}, {});
  env.locks[f3] = ground_kind({f1}, {});
  env.locks[f2] = ground_kind({f1}, {f3});
  EXPECT_TRUE(less_than(env, f1, f2));
  EXPECT_TRUE(less_than(env, f2, f3));
  EXPECT_TRUE(less_than(env, f1, f3));
  EXPECT_FALSE(less_than(env, f3, f2));
  EXPECT_FALSE(less_than(env, f2, f1));
  EXPECT_FALSE(less_than(env, f1, f1));
  EXPECT_TRUE(less_than(env, Permission{}, f1));
  EXPECT_TRUE(less_than(env, Permission{}, f3));
  EXPECT_TRUE(less_than(env, Permission{f1, f2}, f3));
  EXPECT_FALSE(less_than(env, Permission{f1, f3}, f2));
  EXPECT_TRUE(less_than(env, f1, Permission{f2, f3}));
  EXPECT_TRUE(reflexive_locks(env).empty());
}

TEST(LessThan, UnboundLockThrows) {
  LockSym a{1, "a"}, b{2, "b"};
  TypingEnv env;
  env.locks[a] = ground_kind({}, {});
  EXPECT_THROW(less_than(env, a, b), UnboundLock);
  EXPECT_THROW(less_than(env, Permission{b}, a), UnboundLock);
}

TEST(LessThan, CycleIsReflexive) {
  LockSym a{1, "a"}, b{2, "b"};
  TypingEnv env;
  env.locks[a] = ground_kind({b}, {});
  env.locks[b] = ground_kind({a}, {});
  EXPECT_TRUE(less_than(env, a, a));
  EXPECT_EQ(reflexive_locks(env).size(), 2u);
}

TEST(CheckValue, FirstForkGoalsHold) {
  Heap h = load("philosophers_annotated.mil");
  auto m = main_env(h);
  auto r = check_value(m.env, {}, apply_all(label_value("liftLeftFork"), {m.locks["f1"], m.locks["f2"]}));
  ASSERT_TRUE(r) << r.error->message;
  const auto* code = r.value->as<CodeType>();
  ASSERT_NE(code, nullptr);
  EXPECT_EQ(to_string(*r.value), "(r1:<f1>^f1, r2:<f2>^f2)");
  r = check_value(m.env, {}, apply_all(label_value("liftLeftFork"), {m.locks["f2"], m.locks["f3"]}));
  EXPECT_TRUE(r);
}

TEST(CheckValue, SwappedApplicationFailsOrder) {
  Heap h = load("philosophers_annotated.mil");
  auto m = main_env(h);
  auto r = check_value(m.env, {}, apply_all(label_value("liftLeftFork"), {m.locks["f3"], m.locks["f2"]}));
  ASSERT_FALSE(r);
  EXPECT_EQ(r.error->code, "E-ORDER");
  ASSERT_TRUE(r.error->goal);
  EXPECT_EQ(r.error->goal->lhs, Permission{m.locks["f3"]});
  EXPECT_EQ(r.error->goal->rhs, m.locks["f2"]);
}

TEST(CheckValue, LockLiteralsHaveLockType) {
  LockSym l{5, "l"};
  TypingEnv env;
  env.locks[l] = ground_kind({}, {});
  EXPECT_TRUE(has_type(env, {}, lock_value(LockBit::Open, l), lock_type(l)));
  EXPECT_TRUE(has_type(env, {}, lock_value(LockBit::Open), lock_type(l)));
  EXPECT_TRUE(has_type(env, {}, lock_value(LockBit::Closed), lock_type(l)));
  auto r = check_value(env, {}, lock_value(LockBit::Open, l));
  ASSERT_TRUE(r);
  EXPECT_EQ(*r.value, lock_type(l));
}

TEST(CheckValue, RegistersAndLabels) {
  TypingEnv env;
  auto r = check_value(env, regs({{1, int_type()}}), reg_value(1));
  ASSERT_TRUE(r);
  EXPECT_EQ(*r.value, int_type());
  EXPECT_EQ(check_value(env, {}, reg_value(2)).error->code, "E-UNBOUND");
  EXPECT_EQ(check_value(env, {}, label_value("nowhere")).error->code, "E-UNBOUND");
  EXPECT_TRUE(has_type(env, {}, int_value(3), int_type()));
}

TEST(CheckValue, ApplyingNonForall) {
  Heap h = load("philosophers_annotated.mil");
  auto m = main_env(h);
  auto r = check_value(m.env, {}, apply_all(label_value("main"), {m.locks["f1"]}));
  ASSERT_FALSE(r);
  EXPECT_EQ(r.error->code, "E-TYPE");
}

TEST(Subtype, Width) {
  LockSym l{1, "l"}, m{2, "m"};
  TypingEnv env;
  RegFileType wide = regs({{1, lock_tuple_type(l)}, {2, lock_tuple_type(m)}, {3, int_type()}});
  RegFileType narrow = regs({{1, lock_tuple_type(l)}, {2, lock_tuple_type(m)}});
  EXPECT_TRUE(check_subtype(env, wide, narrow));
  EXPECT_FALSE(check_subtype(env, narrow, wide));
  EXPECT_TRUE(check_subtype(env, wide, wide));
  EXPECT_FALSE(check_subtype(env, regs({{1, int_type()}}), regs({{1, lock_tuple_type(l)}})));
}

TEST(CheckInstrs, DoneWhileHolding) {
  LockSym l{1, "l"};
  TypingEnv env;
  env.locks[l] = ground_kind({}, {});
  auto err = check_instrs({env, {}, {l}}, InstrSeq{});
  ASSERT_TRUE(err);
  EXPECT_EQ(err->code, "E-DONE-HOLDING");
  EXPECT_FALSE(check_instrs({env, {}, {}}, InstrSeq{}));
}

TEST(CheckInstrs, ShadowingNewLock) {
  LockSym l{1, "l"};
  TypingEnv env;
  env.locks[l] = ground_kind({}, {});
  InstrSeq seq;
  seq.body.push_back({NewLockInstr{l, ground_kind({}, {}), Register{1}}, {}});
  auto err = check_instrs({env, {}, {}}, seq);
  ASSERT_TRUE(err);
  EXPECT_EQ(err->code, "E-SHADOW");
}

TEST(CheckBlock, LiftRightForkUnderAnnotatedSignature) {
  Heap h = load("philosophers_annotated.mil");
  TypingEnv env = program_env(h);
  const auto* cb = h.find({"liftRightFork"})->as<CodeBlock>();
  EXPECT_FALSE(check_block(env, {"liftRightFork"}, *cb));
  for (const char* name : {"liftLeftFork", "eat"})
    EXPECT_FALSE(check_block(env, {name}, *h.find({name})->as<CodeBlock>())) << name;
}

TEST(CheckHeap, AnnotatedPhilosophersHasExactlyOneOrderError) {
  Heap h = load("philosophers_annotated.mil");
  auto errors = check_program(h);
  ASSERT_EQ(errors.size(), 1u);
  const auto& e = errors[0];
  EXPECT_EQ(e.code, "E-ORDER");
  EXPECT_EQ(e.block, "main");
  EXPECT_EQ(e.span.line, 7);
  ASSERT_TRUE(e.goal);
  auto m = main_env(h);
  EXPECT_EQ(e.goal->lhs, Permission{m.locks["f3"]});
  EXPECT_FALSE(less_than(m.env, e.goal->lhs, e.goal->rhs));
}

TEST(CheckHeap, PositivePrograms) {
  for (const auto& name : milc::test::accepted_corpus()) {
    auto errors = check_program(load(name));
    EXPECT_TRUE(errors.empty()) << name << ": " << (errors.empty() ? "" : errors[0].message);
  }
}

TEST(CheckHeap, UnannotatedProgramsAreRejected) {
  auto errors = check_program(load("philosophers.mil"));
  ASSERT_FALSE(errors.empty());
  EXPECT_EQ(errors[0].code, "E-UNANNOTATED");
}

TEST(CheckHeap, OrderedAnnotationIsStrictPartialOrder) {
  Heap h = load("philosophers_ordered_annotated.mil");
  auto m = main_env(h);
  EXPECT_TRUE(reflexive_locks(m.env).empty());
  EXPECT_TRUE(less_than(m.env, m.locks["f1"], m.locks["f3"]));
}

TEST(ErrorCodes, OrderAtCriticalJump) {
  std::string src =
      "main () { done }\n"
      "b forall[l::({},{})].forall[m::({},{})].(r1:<l>^l, r2:<m>^m) requires {l} {\n"
      "  r3 := testSetLock r2\n  if r3 = 0b jump c[l,m]\n  jump b[l,m]\n}\n"
      "c forall[l::({},{})].forall[m::({},{})].(r1:<l>^l, r2:<m>^m) requires {l,m} {\n"
      "  unlock r1\n  unlock r2\n  done\n}\n";
  EXPECT_EQ(codes(src), std::vector<std::string>{"E-ORDER"});
}

TEST(ErrorCodes, InstructionRules) {
  std::string head = "main () { done }\n";
  auto one = [&](const std::string& body, const std::string& sig =
                                               "forall[l::({},{})].(r1:<l>^l) requires {l}") {
    auto cs = codes(head + "b " + sig + " {\n" + body + "\n}\n" + kRelease);
    return cs.empty() ? std::string("ok") : cs[0];
  };
  EXPECT_EQ(one("  done"), "E-DONE-HOLDING");
  EXPECT_EQ(one("  r2 := testSetLock r1\n  jump release[l]"), "E-TSL-HELD");
  EXPECT_EQ(one("  unlock r1\n  unlock r1\n  done"), "E-UNLOCK-NOT-HELD");
  EXPECT_EQ(one("  r2 := malloc [int]^l\n  jump release[l]"), "ok");
  EXPECT_EQ(one("  r2 := malloc [l]^l\n  jump release[l]"), "E-LOCK-ESCAPE");
  EXPECT_EQ(one("  unlock r1\n  r2 := malloc [int]^l\n  done"), "E-PERM-MISSING");
  EXPECT_EQ(one("  r2 := malloc [int]^l\n  r3 := r2[2]\n  jump release[l]"), "E-INDEX");
  EXPECT_EQ(one("  r2 := 1\n  r3 := r2[1]\n  jump release[l]"), "E-TYPE");
  EXPECT_EQ(one("  unlock r1\n  jump release[l]"), "E-PERM-MISMATCH");
  EXPECT_EQ(one("  r1 := 3\n  jump release[l]"), "E-SUBTYPE");
  EXPECT_EQ(one("  r2 := r7\n  jump release[l]"), "E-UNBOUND");
  EXPECT_EQ(one("  fork release[l]\n  fork release[l]\n  done"), "E-PERM-LEAK");
  EXPECT_EQ(one("  r2 := 1\n  if r2 = 1 jump 5\n  jump release[l]"), "E-TYPE");
  EXPECT_EQ(one("  if r1 = 0b jump release[l]\n  jump release[l]"), "E-BRANCH");
  EXPECT_EQ(one("  fork release[l]\n  done"), "ok");
}

TEST(ErrorCodes, SignatureAndNewLockRules) {
  EXPECT_EQ(codes("main () {\n  l, r1 := newLock\n  done\n}\n"), std::vector<std::string>{"E-UNANNOTATED"});
  EXPECT_EQ(codes("main () {\n  a::({},{}), r1 := newLock\n  b::({a},{a}), r2 := newLock\n  done\n}\n"),
            std::vector<std::string>{"E-ORDER-CYCLE"});
}

TEST(Substitution, RenamedBinderStillChecks) {
  for (const auto& name : milc::test::accepted_corpus()) {
    Heap h = load(name);
    TypingEnv env = program_env(h);
    std::uint32_t next = max_lock_id(h) + 1;
    for (const auto& [label, hv] : h) {
      const auto* cb = hv.as<CodeBlock>();
      if (!cb) continue;
      auto view = view_signature(cb->sig);
      if (!view || view->binders.empty()) continue;
      // the first binder becomes a fresh lock of the same kind
      TypingEnv inner = env;
      LockMap m;
      for (std::size_t i = 0; i < view->binders.size(); ++i) {
        const auto& b = view->binders[i];
        LockKind k = subst_kind(**b.kind, m);
        if (i == 0) m[b.lock] = LockSym{next++, b.lock.name + "'"};
        inner.locks[subst_lock(b.lock, m)] = k;
      }
      InstrSeq body = subst_seq(*cb->body, m);
      auto err = check_instrs({inner, subst_regs(*view->code->regs, m), subst_perm(view->code->perm, m)}, body);
      EXPECT_FALSE(err) << name << " " << label.name << ": " << (err ? err->message : "");
    }
  }
}
