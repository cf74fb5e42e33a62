#include <gtest/gtest.h>

#include "milc/ast.hpp"
#include "milc/print.hpp"
#include "support.hpp"

using namespace milc;

namespace {

LockSym L(std::uint32_t id, const std::string& name) { return {id, name}; }

RegFileType regs(std::initializer_list<std::pair<int, MilType>> es) {
  RegFileType g;
  for (const auto& [r, t] : es) g.entries.emplace(Register{r}, t);
  return g;
}

}  // namespace

TEST(Box, CopyIsDeep) {
  Box<MilType> a(int_type());
  Box<MilType> b = a;
  *b = lock_type(L(1, "l"));
  EXPECT_TRUE(a->is<IntType>());
  EXPECT_TRUE(b->is<LockType>());
  EXPECT_FALSE(a == b);
}

TEST(LockSym, EqualityIsById) {
  EXPECT_EQ(L(3, "l"), L(3, "other"));
  EXPECT_NE(L(3, "l"), L(4, "l"));
  EXPECT_LT(L(1, "z"), L(2, "a"));
}

TEST(Subst, ReplacesFreeLocks) {
  LockSym l = L(1, "l"), m = L(2, "m"), f = L(3, "f");
  MilType t = code_type(regs({{1, lock_tuple_type(l)}, {2, lock_tuple_type(m)}}), {l});
  MilType s = subst_type(t, {{l, f}});
  EXPECT_EQ(to_string(s), "(r1:<f>^f, r2:<m>^m) requires {f}");
}

TEST(Subst, ForallBinderShadows) {
  LockSym l = L(1, "l"), f = L(3, "f");
  MilType t = forall_type(l, std::nullopt, code_type(regs({{1, lock_tuple_type(l)}})));
  EXPECT_EQ(subst_type(t, {{l, f}}), t);
}

TEST(Subst, KindsAreSubstituted) {
  LockSym l = L(1, "l"), m = L(2, "m"), f = L(3, "f");
  MilType t = forall_type(m, ground_kind({l}, {}), code_type({}));
  MilType s = subst_type(t, {{l, f}});
  const auto* fa = s.as<ForallType>();
  ASSERT_NE(fa, nullptr);
  EXPECT_EQ(fa->kind->below.locks, Permission{f});
}

TEST(Subst, VarRefComposes) {
  LockSym a = L(1, "a"), b = L(2, "b"), c = L(3, "c");
  VarRef ref{PermVar{1}, {{a, b}}};
  LockMap m{{b, c}, {a, a}};
  VarRef out = subst_varref(ref, m);
  for (const auto& u : {a, b, c}) {
    LockSym direct = subst_lock(subst_lock(u, ref.subst), m);
    EXPECT_EQ(subst_lock(u, out.subst), direct) << u.name;
  }
}

TEST(Values, ApplyAllAndUnapply) {
  LockSym f1 = L(1, "f1"), f2 = L(2, "f2");
  Value v = apply_all(label_value("liftLeftFork"), {f1, f2});
  EXPECT_EQ(to_string(v), "liftLeftFork[f1,f2]");
  auto parts = unapply(v);
  ASSERT_TRUE(parts);
  EXPECT_EQ(parts->first.name, "liftLeftFork");
  ASSERT_EQ(parts->second.size(), 2u);
  EXPECT_EQ(parts->second[0], f1);
  EXPECT_EQ(parts->second[1], f2);
  EXPECT_FALSE(unapply(type_app(reg_value(1), f1)));
}

TEST(Types, SameTypeUpToBinderNames) {
  LockSym l = L(1, "l"), k = L(7, "k");
  MilType a = forall_type(l, std::nullopt, code_type(regs({{1, lock_tuple_type(l)}}), {l}));
  MilType b = forall_type(k, std::nullopt, code_type(regs({{1, lock_tuple_type(k)}}), {k}));
  EXPECT_TRUE(same_type(a, b));
  EXPECT_FALSE(a == b);
  MilType c = forall_type(k, std::nullopt, code_type(regs({{1, lock_tuple_type(l)}}), {k}));
  EXPECT_FALSE(same_type(a, c));
}

TEST(Types, FreeLocks) {
  LockSym l = L(1, "l"), m = L(2, "m");
  MilType t = forall_type(l, std::nullopt, code_type(regs({{1, lock_tuple_type(l)}, {2, lock_type(m)}})));
  EXPECT_EQ(free_locks(t), std::set<LockSym>{m});
}

TEST(Erase, RemovesKindsAndIsIdempotent) {
  for (const auto& name : milc::test::corpus()) {
    Heap h = milc::test::load(name);
    Heap once = erase(h);
    EXPECT_EQ(erase(once), once) << name;
    EXPECT_FALSE(annotation_flags(once).annotated) << name;
  }
}

TEST(Heap, RejectsDuplicateLabelsAndKeepsOrder) {
  Heap h;
  EXPECT_TRUE(h.insert({"b"}, code_block(code_type({}), {})));
  EXPECT_TRUE(h.insert({"a"}, code_block(code_type({}), {})));
  EXPECT_FALSE(h.insert({"b"}, code_block(code_type({}), {})));
  ASSERT_EQ(h.size(), 2u);
  EXPECT_EQ(h.begin()->first.name, "b");
  EXPECT_TRUE(h.contains({"a"}));
  EXPECT_EQ(h.find({"zz"}), nullptr);
}

TEST(Print, Forms) {
  LockSym l = L(1, "l"), m = L(2, "m");
  EXPECT_EQ(to_string(lock_value(LockBit::Open)), "0b");
  EXPECT_EQ(to_string(lock_value(LockBit::Closed)), "1b");
  EXPECT_EQ(to_string(lock_value(LockBit::Open, l)), "0b^l");
  EXPECT_EQ(to_string(ground_kind({l}, {})), "({l},{})");
  MilType sig = forall_type(l, std::nullopt,
                            forall_type(m, std::nullopt,
                                        code_type(regs({{1, lock_tuple_type(l)}, {2, lock_tuple_type(m)}}), {l})));
  EXPECT_EQ(to_string(sig), "forall[l,m].(r1:<l>^l, r2:<m>^m) requires {l}");
  MilType ann = forall_type(l, ground_kind({}, {}), forall_type(m, ground_kind({l}, {}), code_type({})));
  EXPECT_EQ(to_string(ann), "forall[l::({},{})].forall[m::({l},{})].()");
  EXPECT_EQ(to_string(tuple_type({int_type(), int_type()}, l)), "<int,int>^l");
  EXPECT_EQ(to_string(VarRef{PermVar{3}, {{l, m}}}), "rho3[m/l]");
}
