// Acceptance run: one PASS/FAIL line per criterion, details indented below.

#include <sys/wait.h>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <iostream>
#include <sstream>

#include "milc/infer.hpp"
#include "milc/machine.hpp"
#include "milc/state_check.hpp"
#include "support.hpp"

using namespace milc;
using milc::test::load;
using milc::test::parse_or_throw;

namespace {

struct Report {
  bool pass = true;
  std::ostringstream notes;

  void expect(bool ok, const std::string& what) {
    if (!ok) pass = false;
    notes << "      " << (ok ? "ok    " : "FAILED") << " " << what << "\n";
  }
  void note(const std::string& what) { notes << "      note   " << what << "\n"; }
};

int failures = 0;

void criterion(int n, const std::string& title, double limit_s, const std::function<void(Report&)>& body) {
  Report r;
  auto t0 = std::chrono::steady_clock::now();
  try {
    body(r);
  } catch (const std::exception& e) {
    r.expect(false, std::string("exception: ") + e.what());
  }
  double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (limit_s > 0) r.expect(s < limit_s, "runtime " + std::to_string(s) + " s under " + std::to_string(limit_s) + " s");
  if (!r.pass) ++failures;
  std::printf("%s  %d  %s  (%.3f s)\n", r.pass ? "PASS" : "FAIL", n, title.c_str(), s);
  std::cout << r.notes.str() << std::flush;
}

int shell(const std::string& args) {
  std::string cmd = std::string(MILC_BIN) + " " + args + " >/dev/null 2>&1";
  int raw = std::system(cmd.c_str());
  return WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
}

LockSym named(const TypingEnv& env, const std::string& name) {
  for (const auto& [l, k] : env.locks)
    if (l.name == name) return l;
  throw std::runtime_error("no lock " + name);
}

bool below(const TypingEnv& env, const Permission& lhs, const LockSym& rhs) {
  return std::all_of(lhs.begin(), lhs.end(), [&](const LockSym& a) { return less_than(env, a, rhs); });
}

/// Main's newLock bindings on top of the labels.
TypingEnv main_env(const Heap& h) {
  TypingEnv env = program_env(h);
  for (const auto& ins : h.find({"main"})->as<CodeBlock>()->body->body)
    if (const auto* nl = ins.as<NewLockInstr>()) env.locks[nl->binder] = nl->kind ? *nl->kind : LockKind{};
  return env;
}

std::vector<Heap> accepted_programs() {
  std::vector<Heap> out;
  for (const auto& name : milc::test::accepted_corpus()) out.push_back(load(name));
  return out;
}

}  // namespace

int main() {
  std::cout << "milc acceptance\n";

  criterion(1, "philosophers rejected by inference", 1.0, [](Report& r) {
    auto h = load("philosophers.mil");
    auto out = infer(h);
    r.expect(!out.structural_error() && !out.accepted(), "infer reports no lock order");
    const auto& a = out.annotation;
    r.expect(a.vars == 18, "18 permission variables (" + std::to_string(a.vars) + ")");
    r.expect(a.signature_vars == 12 && a.vars - a.signature_vars == 6, "12 from signatures, 6 from main");
    std::set<std::string> block;
    for (const auto& c : a.constraints)
      if (c.span.line >= 13 && c.span.line <= 17) block.insert(to_string(c));
    for (const char* c : {"rho9 < l2", "l2 < rho10", "rho11[l2/l3] < m2", "m2 < rho12[l2/l3]", "{l2} < m2"})
      r.expect(block.count(c) == 1, std::string("liftRightFork emits ") + c);
    r.expect(out.solve && !out.solve->failure().core.empty(), "core of " + std::to_string(out.solve->failure().core.size()) + " constraints");
    r.expect(shell("infer " + milc::test::corpus_path("philosophers.mil")) == 1, "milc infer exits 1");
  });

  criterion(2, "philosophers rejected by checking", 1.0, [](Report& r) {
    auto h = load("philosophers_annotated.mil");
    auto errors = check_program(h);
    r.expect(errors.size() == 1 && errors[0].code == "E-ORDER", "exactly one E-ORDER");
    if (!errors.empty()) {
      r.expect(errors[0].block == "main" && errors[0].span.line == 7, "at the third fork (main, line 7)");
    }
    TypingEnv env = main_env(h);
    LockSym f1 = named(env, "f1"), f2 = named(env, "f2"), f3 = named(env, "f3");
    r.expect(below(env, {}, f1) && below(env, {f1}, f2), "first fork goals {} < f1 and {f1} < f2 hold");
    r.expect(below(env, {}, f2) && below(env, {f2}, f3), "second fork goals {} < f2 and {f2} < f3 hold");
    r.expect(!below(env, {f3}, f2), "{f3} < f2 is underivable");
    bool literal = !errors.empty() && errors[0].goal && errors[0].goal->lhs == Permission{f3} && errors[0].goal->rhs == f2;
    std::string got = !errors.empty() && errors[0].goal
                          ? to_string(errors[0].goal->lhs) + " < " + errors[0].goal->rhs.name
                          : "none";
    r.expect(literal, "reported goal is {f3} < f2 (got " + got + ")");
    if (!literal)
      r.note("liftLeftFork[f3,f1] instantiates its second binder m := f1, whose kind ({l},{}) asks {f3} < f1; "
             "no instantiation in this program asks {f3} < f2");
    r.expect(shell("check " + milc::test::corpus_path("philosophers_annotated.mil")) == 1, "milc check exits 1");
  });

  criterion(3, "reordered philosophers accepted, checked and deadlock free", 30.0, [](Report& r) {
    auto h = load("philosophers_ordered.mil");
    auto out = infer(h);
    r.expect(out.accepted(), "infer accepts");
    if (!out.accepted()) return;
    const Heap& annotated = out.result->program;
    r.expect(check_program(annotated).empty(), "annotated output passes check");
    r.expect(check_program(parse_or_throw(print_program(annotated))).empty(), "printed output reparses and checks");
    std::size_t deadlocks = 0, halted = 0;
    for (std::uint64_t seed = 1; seed <= 100; ++seed) {
      RunOptions opts;
      opts.machine = {2, 8};
      opts.policy = SchedulerPolicy::seeded(seed);
      opts.max_steps = 5000;
      auto res = run(annotated, {"main"}, opts);
      deadlocks += res.kind == RunOutcome::Kind::DeadlockDetected;
      halted += res.kind == RunOutcome::Kind::Halted;
      if (res.kind == RunOutcome::Kind::Stuck) r.expect(false, "seed " + std::to_string(seed) + " stuck");
    }
    r.expect(deadlocks == 0, "100 seeded runs at N=2, no deadlock reported (" + std::to_string(halted) + " halted)");
  });

  criterion(4, "Figure 1 deadlocks at N=2 under Fifo", 5.0, [](Report& r) {
    auto h = load("philosophers.mil");
    RunOptions opts;
    opts.machine = {2, 8};
    opts.policy = SchedulerPolicy::fifo();
    opts.deadlock_budget = 10000;
    auto res = run(h, {"main"}, opts);
    bool three = res.deadlock && res.deadlock->exhaustive && res.deadlock->cycle.size() == 3;
    r.expect(three, "exhaustive 3-lock cycle reported (got " + to_string(res.kind) + " after " +
                        std::to_string(res.steps) + " steps)");
    if (!three)
      r.note("with two processors Fifo runs philosophers 1 and 2; the third waits in the pool holding nothing, "
             "so no thread holds f3 and a cycle through all three forks cannot form");
    opts.machine = {3, 8};
    auto n3 = run(h, {"main"}, opts);
    std::string cycle = n3.deadlock ? to_string(*n3.deadlock) : "none";
    r.note("N=3 under Fifo: " + to_string(n3.kind) + " after " + std::to_string(n3.steps) + " steps, " + cycle);
  });

  criterion(5, "subject reduction along seeded runs", 0, [](Report& r) {
    std::size_t runs = 0, steps = 0, violations = 0;
    for (const auto& h : accepted_programs()) {
      const StateChecker checker(h);
      for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        PsiTracker psi(h);
        SchedulerPolicy policy = SchedulerPolicy::seeded(seed);
        auto s = initial_state(h, {"main"}, {2, 8}, policy);
        if (!s) {
          ++violations;
          continue;
        }
        ++runs;
        if (checker.check(psi.env(), *s)) ++violations;
        for (std::size_t k = 0; k < 1000 && !s->halted; ++k) {
          std::size_t labels = psi.env().labels.size(), locks = psi.env().locks.size();
          auto o = step(*s, policy);
          const auto* ev = std::get_if<StepEvent>(&o);
          if (!ev) {
            ++violations;
            break;
          }
          ++steps;
          psi.observe(*ev);
          bool fresh_label = ev->rule == "malloc" || ev->rule == "newLock";
          bool fresh_lock = ev->rule == "newLock";
          if (psi.env().labels.size() != labels + fresh_label || psi.env().locks.size() != locks + fresh_lock)
            ++violations;
          if (ev->rule != "halt" && checker.check(psi.env(), *s)) ++violations;
        }
      }
    }
    r.expect(violations == 0, std::to_string(violations) + " violations over " + std::to_string(runs) + " runs, " +
                                  std::to_string(steps) + " steps");
  });

  criterion(6, "typed programs are never reported deadlocked", 0, [](Report& r) {
    std::size_t probes = 0, cycles = 0;
    for (const auto& h : accepted_programs())
      for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        SchedulerPolicy policy = SchedulerPolicy::seeded(seed);
        auto s = initial_state(h, {"main"}, {2 + seed % 2, 8}, policy);
        if (!s) continue;
        for (std::size_t k = 0; k < 2000 && !s->halted; ++k) {
          if (!std::holds_alternative<StepEvent>(step(*s, policy))) break;
          if (k % 10 != 0) continue;
          ++probes;
          auto dc = detect_deadlock(*s, 10000);
          if (dc.report && dc.report->exhaustive) ++cycles;
        }
      }
    r.expect(cycles == 0, std::to_string(cycles) + " exhaustive cycles over " + std::to_string(probes) + " probes");
  });

  criterion(7, "solver agrees with brute force", 60.0, [](Report& r) {
    std::size_t sets = 0, agree = 0, verified = 0, solved = 0;
    for (std::uint64_t seed = 0; seed < 1200; ++seed) {
      auto g = milc::test::generate_constraints(seed);
      ++sets;
      auto out = solve(g.env, g.cs);
      agree += out.solved() == milc::test::brute_force_solvable(g);
      if (out.solved()) {
        ++solved;
        verified += verify(apply_theta(g.env, out.solution().theta), g.cs, out.solution().theta);
      }
    }
    r.expect(agree == sets, std::to_string(agree) + "/" + std::to_string(sets) + " verdicts agree");
    r.expect(verified == solved, std::to_string(verified) + "/" + std::to_string(solved) + " solutions verify");
  });

  criterion(8, "inferred programs typecheck", 0, [](Report& r) {
    std::size_t accepted = 0, failed = 0, oracle = 0, tried = 0;
    InferOptions opts;
    opts.check_result = false;
    opts.solve.core = false;
    for (std::uint64_t seed = 0; accepted < 200 && seed < 5000; ++seed) {
      auto g = milc::test::generate_program(seed);
      auto out = infer(parse_or_throw(g.source), opts);
      ++tried;
      oracle += out.accepted() == milc::test::chains_acyclic(g.locks, g.chains);
      if (!out.accepted()) continue;
      ++accepted;
      failed += !check_heap(out.result->env, out.result->program).empty();
    }
    r.expect(accepted >= 200, std::to_string(accepted) + " accepted programs");
    r.expect(failed == 0, std::to_string(failed) + " outputs fail check_heap");
    r.expect(oracle == tried, std::to_string(oracle) + "/" + std::to_string(tried) +
                                  " verdicts match the acyclic-acquisition oracle");
  });

  criterion(9, "round trips", 0, [](Report& r) {
    std::size_t corpus_ok = 0, gen_ok = 0, erase_ok = 0;
    for (const auto& name : milc::test::corpus()) {
      Heap h = load(name);
      std::string text = print_program(h);
      Heap again = parse_or_throw(text, name);
      corpus_ok += again == h && print_program(again) == text;
      erase_ok += erase(erase(h)) == erase(h);
    }
    for (std::uint64_t seed = 0; seed < 200; ++seed) {
      Heap h = parse_or_throw(milc::test::generate_program(seed).source);
      std::string text = print_program(h);
      gen_ok += parse_or_throw(text) == h;
    }
    auto n = milc::test::corpus().size();
    r.expect(corpus_ok == n, "parse . print on corpus " + std::to_string(corpus_ok) + "/" + std::to_string(n));
    r.expect(gen_ok == 200, "parse . print on generated " + std::to_string(gen_ok) + "/200");
    r.expect(erase_ok == n, "erase idempotent " + std::to_string(erase_ok) + "/" + std::to_string(n));
    std::size_t checking = 0, inferred = 0;
    for (const auto& name : milc::test::corpus()) {
      Heap h = load(name);
      if (!annotation_flags(h).annotated || !check_program(h).empty()) continue;
      ++checking;
      bool ok = infer(erase(h)).accepted();
      inferred += ok;
      if (!ok) r.note("infer . erase rejects " + name);
    }
    r.note("infer . erase accepts " + std::to_string(inferred) + "/" + std::to_string(checking) +
           " checking corpus programs (best effort, not blocking)");
  });

  std::cout << (failures ? std::to_string(failures) + " criteria FAIL" : std::string("all criteria PASS")) << "\n";
  return failures ? 1 : 0;
}
