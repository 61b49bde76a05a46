#pragma once

#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "elt/model.hpp"

namespace elt {

// Signature of the prefix-capture operation under test. The default forwards
// to LoopedModel::loop_forward_capture; tests swap in broken versions to show
// the prefix check notices.
using CaptureFn = std::function<LoopCapture(LoopedModel& model, const ad::Var& x,
                                            const ConditioningContext& ctx, int loop_max,
                                            int loop_int)>;

CaptureFn default_capture();

struct VerifyOptions {
  CaptureFn capture = default_capture();
  std::string filter;  // run only checks whose name contains this
};

struct CheckResult {
  std::string name;
  std::string module;
  std::string tolerance;
  bool passed = false;
  std::string detail;
  double seconds = 0.0;
};

struct CheckInfo {
  std::string name;
  std::string module;
  std::string tolerance;
};

// Every registered check, in run order.
std::vector<CheckInfo> registered_checks();

// Runs the (filtered) checks. Each result line is also streamed to
// `progress` when given. A check that throws counts as failed.
std::vector<CheckResult> run_checks(const VerifyOptions& opts = {}, std::ostream* progress = nullptr);

std::string format_result(const CheckResult& r);

// Central differences with the 4-point stencil
// f'(x) ~ (f(x-2h) - 8 f(x-h) + 8 f(x+h) - f(x+2h)) / 12h.
double central_difference(const std::function<double(double)>& f, double x, double h);

// |a - n| / max(|a|, |n|, floor), maximised over elements.
double max_relative_error(std::span<const double> analytic, std::span<const double> numeric,
                          double floor = 1e-6);

}  // namespace elt
