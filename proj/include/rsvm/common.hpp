#pragma once

#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace rsvm {

// Error taxonomy: shape/domain errors are programming-contract violations,
// IoError carries file context for anything touching the filesystem.
class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DomainError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class AutogradError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<int64_t>;

inline int64_t numel_of(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << ",";
    os << s[i];
  }
  os << ")";
  return os.str();
}

// Thread-local toggle: ops skip tape construction while disabled.
struct GradMode {
  static bool& enabled() {
    thread_local bool on = true;
    return on;
  }
};

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(GradMode::enabled()) { GradMode::enabled() = false; }
  ~NoGradGuard() { GradMode::enabled() = prev; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

// Optional forward-pass finite check (NaN/Inf detection). Off by default;
// verification suites and debug runs switch it on.
struct FiniteCheck {
  static bool& enabled() {
    thread_local bool on = false;
    return on;
  }
};

struct FiniteCheckGuard {
  bool prev;
  explicit FiniteCheckGuard(bool on = true) : prev(FiniteCheck::enabled()) {
    FiniteCheck::enabled() = on;
  }
  ~FiniteCheckGuard() { FiniteCheck::enabled() = prev; }
};

// Seeded RNG used for all parameter init, shuffles and synthetic data.
class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(seed) {}

  double uniform(double lo, double hi) {
    std::uniform_real_distribution<double> d(lo, hi);
    return d(eng_);
  }
  double normal(double mean = 0.0, double stddev = 1.0) {
    std::normal_distribution<double> d(mean, stddev);
    return d(eng_);
  }
  // Normal resampled until within two standard deviations.
  double trunc_normal(double stddev) {
    for (;;) {
      double z = normal(0.0, 1.0);
      if (z > -2.0 && z < 2.0) return z * stddev;
    }
  }
  uint64_t next_u64() { return eng_(); }
  std::mt19937_64& engine() { return eng_; }

 private:
  std::mt19937_64 eng_;
};

}  // namespace rsvm
