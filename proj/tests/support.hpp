#pragma once

#include <cstdint>
#include <fstream>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "milc/infer.hpp"
#include "milc/parser.hpp"

namespace milc::test {

inline std::string corpus_path(const std::string& name) { return std::string(MILC_CORPUS) + "/" + name; }

inline std::string read_text(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline Heap parse_or_throw(const std::string& src, const std::string& file = "<gen>", int registers = 8) {
  auto r = parse_program(src, {file, registers});
  if (!r) {
    std::string msg;
    for (const auto& d : r.errors()) msg += format_diagnostic(d) + "\n";
    throw std::runtime_error(msg + src);
  }
  return r.value();
}

inline Heap load(const std::string& name, int registers = 8) {
  return parse_or_throw(read_text(corpus_path(name)), name, registers);
}

inline const std::vector<std::string>& corpus() {
  static const std::vector<std::string> names = {
      "philosophers.mil", "philosophers_annotated.mil", "philosophers_ordered.mil",
      "philosophers_ordered_annotated.mil", "minimal.mil", "counter.mil", "counter_annotated.mil",
      "handoff.mil", "handoff_annotated.mil", "deadlock2.mil"};
  return names;
}

/// Annotated corpus programs that pass the checker.
inline const std::vector<std::string>& accepted_corpus() {
  static const std::vector<std::string> names = {"minimal.mil", "counter_annotated.mil",
                                                 "handoff_annotated.mil",
                                                 "philosophers_ordered_annotated.mil"};
  return names;
}

// ---------------------------------------------------------------------------
// Program generator

/// A generated annotation-free program: K locks made in main, one worker per
/// acquisition chain. The program is deadlock free by typing iff the union of
/// chain orders is acyclic.
struct GenProgram {
  std::string source;
  std::size_t locks = 0;
  std::vector<std::vector<std::size_t>> chains;
};

inline bool chains_acyclic(std::size_t k, const std::vector<std::vector<std::size_t>>& chains) {
  std::vector<std::uint32_t> reach(k, 0);
  for (const auto& c : chains)
    for (std::size_t a = 0; a < c.size(); ++a)
      for (std::size_t b = a + 1; b < c.size(); ++b) reach[c[a]] |= 1u << c[b];
  for (std::size_t m = 0; m < k; ++m)
    for (std::size_t i = 0; i < k; ++i)
      if (reach[i] >> m & 1) reach[i] |= reach[m];
  for (std::size_t i = 0; i < k; ++i)
    if (reach[i] >> i & 1) return false;
  return true;
}

inline GenProgram generate_program(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto pick = [&](std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
  };
  GenProgram g;
  g.locks = pick(1, 4);
  std::size_t workers = pick(1, 3);
  for (std::size_t w = 0; w < workers; ++w) {
    std::vector<std::size_t> all;
    for (std::size_t i = 0; i < g.locks; ++i) all.push_back(i);
    std::shuffle(all.begin(), all.end(), rng);
    all.resize(pick(1, g.locks));
    g.chains.push_back(all);
  }

  std::string binders, args, regs;
  for (std::size_t i = 0; i < g.locks; ++i) {
    std::string x = "x" + std::to_string(i + 1);
    binders += (i ? "," : "") + x;
    args += (i ? "," : "") + std::string("k") + std::to_string(i + 1);
    regs += (i ? ", " : "") + std::string("r") + std::to_string(i + 1) + ":<" + x + ">^" + x;
  }
  auto head = [&](const std::string& name, const std::set<std::size_t>& held) {
    std::string out = name + " forall[" + binders + "].(" + regs + ")";
    if (!held.empty()) {
      out += " requires {";
      bool first = true;
      for (auto h : held) {
        out += (first ? "" : ",") + std::string("x") + std::to_string(h + 1);
        first = false;
      }
      out += "}";
    }
    return out + " {\n";
  };
  auto inst = [&](const std::string& name) { return name + "[" + binders + "]"; };

  std::string src = "main () {\n";
  for (std::size_t i = 0; i < g.locks; ++i)
    src += "  k" + std::to_string(i + 1) + ", r" + std::to_string(i + 1) + " := newLock\n";
  for (std::size_t w = 0; w < workers; ++w)
    src += "  fork w" + std::to_string(w + 1) + "_0[" + args + "]\n";
  if (pick(0, 1)) src += "  r8 := 1\n  r8 := r8 + 2\n";
  src += "  done\n}\n";

  for (std::size_t w = 0; w < workers; ++w) {
    const auto& chain = g.chains[w];
    std::string base = "w" + std::to_string(w + 1) + "_";
    std::set<std::size_t> held;
    for (std::size_t s = 0; s < chain.size(); ++s) {
      std::string r = "r" + std::to_string(chain[s] + 1);
      src += head(base + std::to_string(s), held);
      src += "  r8 := testSetLock " + r + "\n";
      src += "  if r8 = 0b jump " + inst(base + std::to_string(s + 1)) + "\n";
      src += "  jump " + inst(base + std::to_string(s)) + "\n}\n";
      held.insert(chain[s]);
    }
    src += head(base + std::to_string(chain.size()), held);
    std::size_t ending = pick(0, 2);
    if (ending == 2) {
      src += "  fork " + inst("rel" + std::to_string(w + 1)) + "\n  done\n}\n";
      src += head("rel" + std::to_string(w + 1), held);
    }
    std::vector<std::size_t> order(chain.begin(), chain.end());
    std::shuffle(order.begin(), order.end(), rng);
    for (auto h : order) src += "  unlock r" + std::to_string(h + 1) + "\n";
    src += ending == 1 ? "  jump " + inst(base + "0") + "\n}\n" : "  done\n}\n";
  }
  g.source = src;
  return g;
}

// ---------------------------------------------------------------------------
// Constraint-set generator and brute-force oracle

struct GenConstraints {
  VarTypingEnv env;
  ConstraintSet cs;
  std::vector<LockSym> locks;
  std::vector<PermVar> vars;
};

inline GenConstraints generate_constraints(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto pick = [&](std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
  };
  GenConstraints g;
  std::size_t n = pick(1, 4);
  for (std::size_t i = 0; i < n; ++i)
    g.locks.push_back({static_cast<std::uint32_t>(i + 1), "a" + std::to_string(i + 1)});
  std::size_t nvars = pick(0, 4);
  for (std::size_t v = 0; v < nvars; ++v) g.vars.push_back({static_cast<std::uint32_t>(v + 1)});

  auto some_locks = [&](double p) {
    Permission out;
    for (const auto& l : g.locks)
      if (std::uniform_real_distribution<double>(0, 1)(rng) < p) out.insert(l);
    return out;
  };
  auto some_subst = [&] {
    LockMap m;
    if (pick(0, 3) == 0) m[g.locks[pick(0, n - 1)]] = g.locks[pick(0, n - 1)];
    return m;
  };

  // kinds: sparse ground edges, variables attached to random locks
  std::vector<LockKind> kinds(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (pick(0, 2) == 0) kinds[i].below.locks.insert(g.locks[pick(0, n - 1)]);
    if (pick(0, 4) == 0) kinds[i].above.locks.insert(g.locks[pick(0, n - 1)]);
  }
  bool scoped = pick(0, 1);
  for (std::size_t v = 0; v < nvars; ++v) {
    std::size_t at = pick(0, n - 1);
    VarRef ref{g.vars[v], {}};
    if (pick(0, 1)) kinds[at].above.vars.push_back(ref);
    else kinds[at].below.vars.push_back(ref);
  }
  for (std::size_t i = 0; i < n; ++i) g.env.bind(g.locks[i], kinds[i], 0, scoped);

  std::size_t m = pick(1, 6);
  for (std::size_t c = 0; c < m; ++c) {
    std::size_t form = nvars == 0 ? 0 : pick(0, 2);
    const LockSym& lam = g.locks[pick(0, n - 1)];
    if (form == 0) g.cs.push_back({GroundBelow{some_locks(0.3), lam}, {}});
    else if (form == 1) g.cs.push_back({VarBelow{{g.vars[pick(0, nvars - 1)], some_subst()}, lam}, {}});
    else g.cs.push_back({AboveVar{lam, {g.vars[pick(0, nvars - 1)], some_subst()}}, {}});
  }
  return g;
}

/// Caller locks plus callee blocks whose binders are instantiated at a few
/// sites, some of whose constraints are dropped or garbled.
inline GenConstraints generate_site_constraints(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto pick = [&](std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
  };
  GenConstraints g;
  std::uint32_t next_lock = 1;
  auto lock = [&](const std::string& name) {
    g.locks.push_back({next_lock++, name});
    return g.locks.back();
  };
  std::size_t k = pick(2, 4);
  std::vector<LockSym> caller;
  for (std::size_t i = 0; i < k; ++i) {
    LockKind kind;
    if (i > 0 && pick(0, 3) == 0) kind.below.locks.insert(caller[pick(0, i - 1)]);
    caller.push_back(lock("c" + std::to_string(i + 1)));
    g.env.bind(caller.back(), kind, 1, true);
  }
  std::size_t blocks = pick(1, 2);
  int line = 1;
  for (std::size_t b = 0; b < blocks; ++b) {
    std::size_t nb = pick(2, 3);
    std::vector<LockSym> binders;
    std::vector<std::pair<PermVar, PermVar>> kv;
    for (std::size_t j = 0; j < nb; ++j) {
      PermVar nu{static_cast<std::uint32_t>(g.vars.size() + 1)};
      g.vars.push_back(nu);
      PermVar rho{static_cast<std::uint32_t>(g.vars.size() + 1)};
      g.vars.push_back(rho);
      kv.push_back({nu, rho});
      binders.push_back(lock("b" + std::to_string(b + 1) + "_" + std::to_string(j + 1)));
      g.env.bind(binders.back(), {Bound{{}, {VarRef{nu, {}}}}, Bound{{}, {VarRef{rho, {}}}}}, b + 2, true);
    }
    // orders the callee body needs
    for (std::size_t c = pick(0, 2); c-- > 0;) {
      std::size_t x = pick(0, nb - 1), y = pick(0, nb - 1);
      if (x != y) g.cs.push_back({GroundBelow{{binders[x]}, binders[y]}, {"gen", line++, 1, 0}});
    }
    for (std::size_t site = pick(1, 3); site-- > 0;) {
      SourceSpan at{"gen", line++, 1, 0};
      std::vector<LockSym> args;
      for (std::size_t j = 0; j < nb; ++j) args.push_back(caller[pick(0, k - 1)]);
      LockMap sub;
      for (std::size_t j = 0; j < nb; ++j) {
        LockMap s = sub;
        if (pick(0, 9) == 0 && j > 0) s[binders[0]] = caller[pick(0, k - 1)];
        if (pick(0, 6) != 0) g.cs.push_back({VarBelow{{kv[j].first, s}, args[j]}, at});
        if (pick(0, 6) != 0) g.cs.push_back({AboveVar{args[j], {kv[j].second, s}}, at});
        sub[binders[j]] = args[j];
      }
    }
  }
  for (std::size_t c = pick(0, 1); c-- > 0;) {
    std::size_t x = pick(0, k - 1), y = pick(0, k - 1);
    if (x != y) g.cs.push_back({GroundBelow{{caller[x]}, caller[y]}, {"gen", line++, 1, 0}});
  }
  return g;
}

/// Exhaustive search over theta with bitmask closure; shares no code with
/// the solver or the checker.
inline bool brute_force_solvable(const GenConstraints& g) {
  std::size_t n = g.locks.size(), nv = g.vars.size();
  auto idx = [&](const LockSym& l) {
    for (std::size_t i = 0; i < n; ++i)
      if (g.locks[i].id == l.id) return i;
    throw std::logic_error("lock outside universe");
  };
  auto mask_of = [&](const Permission& p) {
    std::uint32_t m = 0;
    for (const auto& l : p) m |= 1u << idx(l);
    return m;
  };
  auto mapped = [&](std::uint32_t set, const LockMap& sub) {
    std::uint32_t out = 0;
    for (std::size_t u = 0; u < n; ++u) {
      if (!(set >> u & 1)) continue;
      auto it = sub.find(g.locks[u]);
      out |= 1u << (it == sub.end() ? u : idx(it->second));
    }
    return out;
  };
  std::vector<std::uint32_t> domain(nv, (1u << n) - 1);
  for (std::size_t v = 0; v < nv; ++v) {
    auto it = g.env.domain.find(g.vars[v]);
    if (it != g.env.domain.end()) domain[v] = mask_of(it->second);
  }
  std::vector<std::uint32_t> theta(nv, 0);
  auto holds = [&]() {
    std::vector<std::uint32_t> succ(n, 0);
    for (std::size_t y = 0; y < n; ++y) {
      const LockKind& k = g.env.base.locks.at(g.locks[y]);
      std::uint32_t below = mask_of(k.below.locks), above = mask_of(k.above.locks);
      for (const auto& r : k.below.vars) below |= mapped(theta[r.var.id - 1], r.subst);
      for (const auto& r : k.above.vars) above |= mapped(theta[r.var.id - 1], r.subst);
      for (std::size_t u = 0; u < n; ++u)
        if (below >> u & 1) succ[u] |= 1u << y;
      succ[y] |= above;
    }
    for (std::size_t m = 0; m < n; ++m)
      for (std::size_t i = 0; i < n; ++i)
        if (succ[i] >> m & 1) succ[i] |= succ[m];
    for (std::size_t i = 0; i < n; ++i)
      if (succ[i] >> i & 1) return false;
    auto below_all = [&](std::uint32_t set, std::size_t to) {
      for (std::size_t u = 0; u < n; ++u)
        if ((set >> u & 1) && !(succ[u] >> to & 1)) return false;
      return true;
    };
    for (const auto& c : g.cs) {
      if (const auto* gb = c.as<GroundBelow>()) {
        if (!below_all(mask_of(gb->locks), idx(gb->lock))) return false;
      } else if (const auto* vb = c.as<VarBelow>()) {
        if (!below_all(mapped(theta[vb->var.var.id - 1], vb->var.subst), idx(vb->lock))) return false;
      } else {
        const auto& a = *c.as<AboveVar>();
        std::uint32_t set = mapped(theta[a.var.var.id - 1], a.var.subst);
        if ((succ[idx(a.lock)] & set) != set) return false;
      }
    }
    return true;
  };
  // odometer over subsets of each domain
  while (true) {
    if (holds()) return true;
    std::size_t v = 0;
    for (; v < nv; ++v) {
      // next subset of domain[v] in increasing order
      theta[v] = (theta[v] - domain[v]) & domain[v];
      if (theta[v] != 0) break;
    }
    if (v == nv) return false;
  }
}

inline Substitution to_theta(const GenConstraints& g, const std::vector<std::uint32_t>& masks) {
  Substitution out;
  for (std::size_t v = 0; v < masks.size(); ++v) {
    Permission p;
    for (std::size_t u = 0; u < g.locks.size(); ++u)
      if (masks[v] >> u & 1) p.insert(g.locks[u]);
    out[g.vars[v]] = p;
  }
  return out;
}

}  // namespace milc::test
