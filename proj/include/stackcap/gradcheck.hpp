#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "stackcap/autodiff.hpp"

namespace stackcap {

/// A scalar-valued program over leaf parameters, rebuilt on a fresh tape for
/// every evaluation.
using TapeProgram = std::function<Var(Tape&, std::span<const Var>)>;

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double tol = 0.0;
  bool passed = true;

  const GradCheckEntry& worst() const {
    return *std::max_element(entries.begin(), entries.end(), [](const auto& a, const auto& b) {
      return a.max_rel_error < b.max_rel_error;
    });
  }
  double max_rel_error() const { return entries.empty() ? 0.0 : worst().max_rel_error; }
};

/// |a - n| / max(|a|, |n|, floor). The floor keeps gradients that are zero up
/// to rounding from dominating the report.
inline double relative_error(double analytic, double numeric, double floor = 1e-5) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

inline double evaluate_scalar(const TapeProgram& f, const std::vector<Tensor>& params) {
  Tape tape;
  std::vector<Var> leaves;
  for (const Tensor& p : params) leaves.push_back(tape.leaf(p, false));
  Var loss = f(tape, leaves);
  if (loss.value().size() != 1) {
    throw ShapeError("grad_check: program must be scalar-valued, got shape " +
                     shape_string(loss.value().shape()));
  }
  return loss.value().item();
}

/// Compares reverse-mode gradients against central differences for every
/// element of every parameter.
inline GradCheckReport grad_check(const TapeProgram& f, std::vector<Tensor> params,
                                  std::vector<std::string> names, double step, double tol) {
  if (!(step > 0.0)) throw std::invalid_argument("grad_check: step must be positive");
  if (!(tol > 0.0)) throw std::invalid_argument("grad_check: tol must be positive");
  if (names.size() != params.size()) {
    names.clear();
    for (std::size_t i = 0; i < params.size(); ++i) names.push_back("param" + std::to_string(i));
  }

  std::vector<Tensor> analytic;
  {
    Tape tape;
    std::vector<Var> leaves;
    for (const Tensor& p : params) leaves.push_back(tape.leaf(p, true));
    Var loss = f(tape, leaves);
    if (loss.value().size() != 1) {
      throw ShapeError("grad_check: program must be scalar-valued, got shape " +
                       shape_string(loss.value().shape()));
    }
    tape.backward(loss);
    for (const Var& v : leaves) analytic.push_back(tape.gradient(v));
  }

  GradCheckReport report;
  report.tol = tol;
  for (std::size_t p = 0; p < params.size(); ++p) {
    GradCheckEntry entry;
    entry.name = names[p];
    for (std::size_t i = 0; i < params[p].size(); ++i) {
      const double saved = params[p][i];
      params[p][i] = saved + step;
      const double up = evaluate_scalar(f, params);
      params[p][i] = saved - step;
      const double down = evaluate_scalar(f, params);
      params[p][i] = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double err = relative_error(analytic[p][i], numeric);
      if (err > entry.max_rel_error || i == 0) {
        entry.max_rel_error = err;
        entry.worst_index = i;
        entry.analytic = analytic[p][i];
        entry.numeric = numeric;
      }
    }
    report.passed = report.passed && entry.max_rel_error < tol;
    report.entries.push_back(entry);
  }
  return report;
}

}  // namespace stackcap
