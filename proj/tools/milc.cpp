// milc: check, infer and run MIL programs.
//
// Exit codes
//   check  0 typable, 1 type errors, 2 parse errors, 3 I/O
//   infer  0 accepted, 1 no lock order exists, 2 parse or structural errors, 3 I/O
//   run    0 halted, 2 parse error or bad entry, 3 I/O, 4 deadlock, 5 step budget, 6 stuck

#include <atomic>
#include <cstdint>
#include <fstream>
#include <iostream>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "milc/infer.hpp"
#include "milc/machine.hpp"
#include "milc/parser.hpp"
#include "milc/typecheck.hpp"

namespace {

using nlohmann::json;

constexpr const char* kSchema = "milc/1";

struct Config {
  std::string file;
  std::size_t processors = 2;
  int registers = 8;
  std::size_t max_steps = 100000;
  std::size_t deadlock_budget = 10000;
  std::size_t check_every = 100;
  std::string scheduler = "fifo";
  std::string entry = "main";
  std::string seeds;
  std::string trace;
  std::string emit_annotated;
  std::string emit_constraints;
  bool json = false;
  bool fast = false;
};

std::optional<std::string> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return std::nullopt;
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

bool write_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
  return static_cast<bool>(out);
}

json diag_json(const milc::Diagnostic& d, const std::string& file) {
  return {{"file", d.span.file.empty() ? file : d.span.file},
          {"line", d.span.line},
          {"column", d.span.column},
          {"code", d.code},
          {"message", d.message}};
}

void emit(const Config& cfg, const json& j) {
  if (cfg.json) std::cout << j.dump(2) << "\n";
}

int io_error(const Config& cfg, const std::string& command, const std::string& what) {
  std::cerr << cfg.file << ": error[IO]: " << what << "\n";
  emit(cfg, {{"schema", kSchema}, {"command", command}, {"file", cfg.file}, {"error", what}});
  return 3;
}

/// Parses the input; prints diagnostics and returns nullopt on failure.
std::optional<milc::Heap> load(const Config& cfg, const std::string& command, int& status) {
  auto src = read_file(cfg.file);
  if (!src) {
    status = io_error(cfg, command, "cannot read file");
    return std::nullopt;
  }
  auto parsed = milc::parse_program(*src, {cfg.file, cfg.registers});
  if (!parsed) {
    json diags = json::array();
    for (const auto& d : parsed.errors()) {
      std::cerr << milc::format_diagnostic(d, cfg.file) << "\n";
      diags.push_back(diag_json(d, cfg.file));
    }
    emit(cfg, {{"schema", kSchema}, {"command", command}, {"file", cfg.file}, {"diagnostics", diags}});
    status = 2;
    return std::nullopt;
  }
  return parsed.value();
}

int cmd_check(const Config& cfg) {
  int status = 0;
  auto program = load(cfg, "check", status);
  if (!program) return status;
  auto errors = milc::check_program(*program);
  json diags = json::array();
  for (const auto& e : errors) {
    auto d = milc::to_diagnostic(e);
    std::cerr << milc::format_diagnostic(d, cfg.file) << "\n";
    diags.push_back(diag_json(d, cfg.file));
  }
  if (cfg.json) {
    emit(cfg, {{"schema", kSchema}, {"command", "check"}, {"file", cfg.file},
               {"ok", errors.empty()}, {"diagnostics", diags}});
  } else if (errors.empty()) {
    std::cout << cfg.file << ": ok\n";
  }
  return errors.empty() ? 0 : 1;
}

std::string span_prefix(const milc::SourceSpan& s, const std::string& file) {
  return (s.file.empty() ? file : s.file) + ":" + std::to_string(s.line) + ":" + std::to_string(s.column);
}

int cmd_infer(const Config& cfg) {
  int status = 0;
  auto program = load(cfg, "infer", status);
  if (!program) return status;
  milc::InferOptions opts;
  opts.fast = cfg.fast || cfg.emit_annotated.empty();
  milc::InferOutcome out = milc::infer(*program, opts);
  json j{{"schema", kSchema}, {"command", "infer"}, {"file", cfg.file}};
  if (out.structural_error()) {
    json diags = json::array();
    for (const auto& e : out.annotation.errors) {
      auto d = milc::to_diagnostic(e);
      std::cerr << milc::format_diagnostic(d, cfg.file) << "\n";
      diags.push_back(diag_json(d, cfg.file));
    }
    j["diagnostics"] = diags;
    emit(cfg, j);
    return 2;
  }
  const auto& ann = out.annotation;
  if (!cfg.emit_constraints.empty() &&
      !write_file(cfg.emit_constraints, milc::print_constraints(ann.constraints)))
    return io_error(cfg, "infer", "cannot write " + cfg.emit_constraints);
  json constraints = json::array();
  for (const auto& c : ann.constraints) constraints.push_back(milc::to_string(c));
  j["vars"] = ann.vars;
  j["signature_vars"] = ann.signature_vars;
  j["constraints"] = constraints;
  j["accepted"] = out.accepted();
  if (out.accepted()) {
    const auto& sol = out.solve->solution();
    json theta = json::object();
    for (const auto& [v, p] : sol.theta) {
      json locks = json::array();
      for (const auto& l : p) locks.push_back(l.name);
      theta[milc::to_string(v)] = locks;
    }
    json order = json::array();
    for (const auto& [a, b] : sol.induced_order) order.push_back({a.name, b.name});
    j["theta"] = theta;
    j["order"] = order;
    if (!cfg.emit_annotated.empty() &&
        !write_file(cfg.emit_annotated, milc::print_program(out.result->program)))
      return io_error(cfg, "infer", "cannot write " + cfg.emit_annotated);
    if (!cfg.json) {
      std::cout << cfg.file << ": accepted (" << ann.vars << " permission variables, "
                << ann.constraints.size() << " constraints)\n";
      if (!sol.induced_order.empty()) {
        std::cout << "order:";
        for (const auto& [a, b] : sol.induced_order) std::cout << " " << a.name << " < " << b.name;
        std::cout << "\n";
      }
    }
    emit(cfg, j);
    return 0;
  }
  const auto& fail = out.solve->failure();
  json core = json::array();
  for (const auto& c : fail.core)
    core.push_back({{"constraint", milc::to_string(c)}, {"at", span_prefix(c.span, cfg.file)}});
  j["core"] = core;
  j["witness"] = fail.witness.text;
  if (!cfg.json) {
    std::cout << cfg.file << ": rejected: no lock order exists (" << ann.vars
              << " permission variables, " << ann.constraints.size() << " constraints)\n";
    std::cout << "minimal unsolvable core:\n";
    for (const auto& c : fail.core)
      std::cout << "  " << span_prefix(c.span, cfg.file) << ": " << milc::to_string(c) << "\n";
    std::cout << fail.witness.text << "\n";
  }
  emit(cfg, j);
  return 1;
}

std::optional<milc::SchedulerPolicy> parse_scheduler(const std::string& s) {
  if (s == "fifo") return milc::SchedulerPolicy::fifo();
  if (s.rfind("seed:", 0) == 0) {
    try {
      return milc::SchedulerPolicy::seeded(std::stoull(s.substr(5)));
    } catch (const std::exception&) {
      return std::nullopt;
    }
  }
  return std::nullopt;
}

int run_status(milc::RunOutcome::Kind k) {
  switch (k) {
    case milc::RunOutcome::Kind::Halted: return 0;
    case milc::RunOutcome::Kind::DeadlockDetected: return 4;
    case milc::RunOutcome::Kind::StepBudgetExhausted: return 5;
    case milc::RunOutcome::Kind::Stuck: return 6;
    case milc::RunOutcome::Kind::BadEntry: return 2;
  }
  return 2;
}

json outcome_json(const milc::RunOutcome& r) {
  json j{{"outcome", milc::to_string(r.kind)}, {"steps", r.steps}};
  if (r.deadlock) {
    json cycle = json::array();
    for (const auto& e : r.deadlock->cycle)
      cycle.push_back({{"holder", milc::to_string(e.holder)}, {"holds", e.holds.name}, {"wants", e.wants.name}});
    j["deadlock"] = {{"exhaustive", r.deadlock->exhaustive}, {"cycle", cycle}};
  }
  if (r.stuck)
    j["stuck"] = {{"proc", r.stuck->proc + 1}, {"instruction", r.stuck->instruction}, {"reason", r.stuck->reason}};
  return j;
}

std::string outcome_text(const milc::RunOutcome& r) {
  std::string out = milc::to_string(r.kind) + " after " + std::to_string(r.steps) + " steps";
  if (r.deadlock) out += ": " + milc::to_string(*r.deadlock);
  if (r.stuck)
    out += ": proc#" + std::to_string(r.stuck->proc + 1) + " at '" + r.stuck->instruction + "': " + r.stuck->reason;
  return out;
}

int cmd_run(const Config& cfg) {
  int status = 0;
  auto program = load(cfg, "run", status);
  if (!program) return status;
  milc::RunOptions opts;
  opts.machine = {cfg.processors, cfg.registers};
  opts.max_steps = cfg.max_steps;
  opts.check_every = cfg.check_every;
  opts.deadlock_budget = cfg.deadlock_budget;
  auto policy = parse_scheduler(cfg.scheduler);
  if (!policy) {
    std::cerr << "error: unknown scheduler '" << cfg.scheduler << "' (expected fifo or seed:<n>)\n";
    return 2;
  }
  opts.policy = *policy;
  milc::Label entry{cfg.entry};
  if (!milc::initial_state(*program, entry, opts.machine)) {
    std::cerr << cfg.file << ": error[E-ENTRY]: entry block '" << cfg.entry
              << "' is missing or takes lock arguments or a permission\n";
    emit(cfg, {{"schema", kSchema}, {"command", "run"}, {"file", cfg.file}, {"outcome", "BadEntry"}});
    return 2;
  }

  if (!cfg.seeds.empty()) {
    auto dots = cfg.seeds.find("..");
    std::uint64_t lo = 0, hi = 0;
    try {
      if (dots == std::string::npos) throw std::invalid_argument("range");
      lo = std::stoull(cfg.seeds.substr(0, dots));
      hi = std::stoull(cfg.seeds.substr(dots + 2));
    } catch (const std::exception&) {
      std::cerr << "error: --seeds expects a..b\n";
      return 2;
    }
    if (hi < lo) std::swap(lo, hi);
    std::vector<milc::RunOutcome> results(hi - lo + 1);
    std::atomic<std::size_t> next{0};
    unsigned workers = std::max(1u, std::min<unsigned>(std::thread::hardware_concurrency(), 8));
    std::vector<std::thread> pool;
    for (unsigned w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t i; (i = next++) < results.size();) {
          milc::RunOptions o = opts;
          o.policy = milc::SchedulerPolicy::seeded(lo + i);
          results[i] = milc::run(*program, entry, o);
          results[i].final_state = {};
        }
      });
    }
    for (auto& t : pool) t.join();
    int worst = 0;
    json runs = json::array();
    for (std::size_t i = 0; i < results.size(); ++i) {
      int s = run_status(results[i].kind);
      if (s == 4 || (s == 6 && worst != 4) || (s == 5 && worst == 0)) worst = s;
      json r = outcome_json(results[i]);
      r["seed"] = lo + i;
      runs.push_back(r);
      if (!cfg.json) std::cout << "seed " << lo + i << ": " << outcome_text(results[i]) << "\n";
    }
    emit(cfg, {{"schema", kSchema}, {"command", "run"}, {"file", cfg.file}, {"runs", runs}});
    return worst;
  }

  std::ofstream trace_file;
  std::ostream* trace = nullptr;
  if (cfg.trace == "-") {
    trace = &std::cout;
  } else if (!cfg.trace.empty()) {
    trace_file.open(cfg.trace);
    if (!trace_file) return io_error(cfg, "run", "cannot write " + cfg.trace);
    trace = &trace_file;
  }
  milc::StepObserver observer;
  if (trace)
    observer = [&](std::size_t k, const milc::StepEvent& ev, const milc::MachineState&) {
      *trace << milc::format_event(k, ev) << "\n";
    };
  milc::RunOutcome r = milc::run(*program, entry, opts, observer);
  if (r.stuck) {
    std::cerr << cfg.file << ": error[STUCK]: proc#" << r.stuck->proc + 1 << " cannot execute '"
              << r.stuck->instruction << "': " << r.stuck->reason << "\n";
  }
  if (cfg.json) {
    json j = outcome_json(r);
    j["schema"] = kSchema;
    j["command"] = "run";
    j["file"] = cfg.file;
    emit(cfg, j);
  } else {
    std::cout << outcome_text(r) << "\n";
  }
  return run_status(r.kind);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"milc: typechecker, annotation inference and abstract machine for MIL"};
  app.require_subcommand(1);
  Config cfg;

  auto common = [&](CLI::App* sub) {
    sub->add_option("file", cfg.file, "MIL source file")->required();
    sub->add_option("--registers", cfg.registers, "registers per processor")->check(CLI::PositiveNumber);
    sub->add_flag("--json", cfg.json, "machine-readable output on stdout");
  };

  auto* check = app.add_subcommand("check", "typecheck an annotated program");
  common(check);

  auto* infer = app.add_subcommand("infer", "infer lock-order annotations");
  common(infer);
  infer->add_option("--emit-annotated", cfg.emit_annotated, "write the annotated program");
  infer->add_option("--emit-constraints", cfg.emit_constraints, "write the constraint set");
  infer->add_flag("--fast", cfg.fast, "report accept/reject only");

  auto* run = app.add_subcommand("run", "execute on the abstract machine");
  common(run);
  run->add_option("--processors", cfg.processors, "number of processors")->check(CLI::PositiveNumber);
  run->add_option("--scheduler", cfg.scheduler, "fifo or seed:<n>");
  run->add_option("--max-steps", cfg.max_steps, "step budget")->check(CLI::PositiveNumber);
  run->add_option("--deadlock-budget", cfg.deadlock_budget, "exploration budget of the deadlock probe")
      ->check(CLI::PositiveNumber);
  run->add_option("--check-every", cfg.check_every, "steps between deadlock probes")->check(CLI::PositiveNumber);
  run->add_option("--entry", cfg.entry, "entry block");
  run->add_option("--trace", cfg.trace, "write one line per step to a file (- for stdout)");
  run->add_option("--seeds", cfg.seeds, "run seeded schedulers a..b in parallel");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  if (check->parsed()) return cmd_check(cfg);
  if (infer->parsed()) return cmd_infer(cfg);
  return cmd_run(cfg);
}
