#pragma once

#include <cmath>
#include <cstdio>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "lungseg/tensor.hpp"

namespace lungseg {

struct GradCheckEntry {
  std::string name;
  double max_rel_err = 0.0;
  double at_value = 0.0;  // analytic gradient where the worst error occurred
  bool pass = true;
};

struct GradCheckReport {
  double h = 1e-5;
  double tol = 1e-4;
  std::vector<GradCheckEntry> entries;

  bool pass() const {
    for (const auto& e : entries)
      if (!e.pass) return false;
    return true;
  }

  double max_rel_err() const {
    double m = 0.0;
    for (const auto& e : entries) m = std::max(m, e.max_rel_err);
    return m;
  }

  std::string table() const {
    std::string s = "parameter                       max_rel_err   status\n";
    char line[160];
    for (const auto& e : entries) {
      std::snprintf(line, sizeof(line), "%-30s  %11.3e   %s\n", e.name.c_str(), e.max_rel_err,
                    e.pass ? "pass" : "FAIL");
      s += line;
    }
    return s;
  }
};

/// Compares tape gradients against central finite differences for every
/// element of every listed tensor. `f` must rebuild the forward pass from the
/// current tensor values and return a scalar; it is evaluated twice up front
/// to reject non-deterministic functions.
///
/// The error measure is |a - fd| / max(1, |a|, |fd|), i.e. relative for
/// large gradients and absolute near zero, which keeps finite-difference
/// round-off from dominating tiny components.
template <typename T>
GradCheckReport gradcheck(const std::function<TensorT<T>()>& f,
                          const std::vector<std::pair<std::string, TensorT<T>>>& tensors,
                          double h = 1e-5, double tol = 1e-4) {
  GradCheckReport report;
  report.h = h;
  report.tol = tol;

  const double l0 = static_cast<double>(f().item());
  const double l1 = static_cast<double>(f().item());
  if (l0 != l1) {
    throw NumericError("gradcheck: function is not deterministic (double evaluation mismatch)");
  }

  auto loss = f();
  backward(loss);
  std::vector<std::vector<T>> analytic;
  analytic.reserve(tensors.size());
  for (const auto& [name, t] : tensors) {
    if (!t.requires_grad()) throw TapeError("gradcheck tensor '" + name + "' does not require grad");
    analytic.push_back(t.has_grad() ? t.grad() : std::vector<T>(t.size(), T(0)));
  }

  for (std::size_t ti = 0; ti < tensors.size(); ++ti) {
    const auto& name = tensors[ti].first;
    auto t = tensors[ti].second;
    GradCheckEntry entry;
    entry.name = name;
    for (std::size_t i = 0; i < t.size(); ++i) {
      const T saved = t.at(i);
      t.at(i) = saved + static_cast<T>(h);
      const double lp = static_cast<double>(f().item());
      t.at(i) = saved - static_cast<T>(h);
      const double lm = static_cast<double>(f().item());
      t.at(i) = saved;
      const double fd = (lp - lm) / (2.0 * h);
      const double a = static_cast<double>(analytic[ti][i]);
      const double denom = std::max({1.0, std::fabs(a), std::fabs(fd)});
      const double rel = std::fabs(a - fd) / denom;
      if (rel > entry.max_rel_err) {
        entry.max_rel_err = rel;
        entry.at_value = a;
      }
    }
    entry.pass = entry.max_rel_err < tol;
    report.entries.push_back(std::move(entry));
  }
  return report;
}

}  // namespace lungseg
