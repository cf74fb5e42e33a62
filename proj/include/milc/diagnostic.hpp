#pragma once

#include <string>
#include <utility>
#include <vector>

namespace milc {

struct SourceSpan {
  std::string file;
  int line = 0;    // 1-based; 0 when unknown
  int column = 0;  // 1-based
  int length = 0;

  bool known() const { return line > 0; }
};

enum class Severity { Error, Warning };

struct Diagnostic {
  Severity severity = Severity::Error;
  SourceSpan span;
  std::string code;
  std::string message;
};

/// `<file>:<line>:<col>: error[<code>]: <message>`
inline std::string format_diagnostic(const Diagnostic& d, const std::string& fallback_file = "") {
  std::string file = d.span.file.empty() ? fallback_file : d.span.file;
  if (file.empty()) file = "<input>";
  std::string out = file + ":" + std::to_string(d.span.line) + ":" + std::to_string(d.span.column) +
                    ": ";
  out += d.severity == Severity::Error ? "error" : "warning";
  out += "[" + d.code + "]: " + d.message;
  return out;
}

/// Either a value or a list of diagnostics.
template <class T>
class Result {
 public:
  Result(T value) : value_(std::move(value)), ok_(true) {}  // NOLINT implicit
  Result(std::vector<Diagnostic> errors) : errors_(std::move(errors)) {}  // NOLINT implicit

  bool ok() const { return ok_; }
  explicit operator bool() const { return ok_; }
  const T& value() const& { return value_; }
  T& value() & { return value_; }
  T&& value() && { return std::move(value_); }
  const T& operator*() const { return value_; }
  const T* operator->() const { return &value_; }
  const std::vector<Diagnostic>& errors() const { return errors_; }

 private:
  T value_{};
  std::vector<Diagnostic> errors_;
  bool ok_ = false;
};

}  // namespace milc
