#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "ettk/tensor.hpp"

namespace ettk::gradcheck {

inline constexpr double kStep = 1e-5;
inline constexpr double kTolerance = 1e-6;

struct ParamRef {
  std::string name;
  Tensor<double>* tensor;
};

struct ParamError {
  std::string name;
  double max_rel_err = 0;
};

struct CheckResult {
  std::string name;
  std::vector<ParamError> params;
  double max_rel_err = 0;
  std::string worst_param;

  bool pass(double tol = kTolerance) const { return max_rel_err < tol; }
};

// Per-parameter error: max |analytic - numeric| over the tensor, divided by
// max(|analytic|_inf, |numeric|_inf, 1e-8). The numeric estimator publishes a
// per-entry uncertainty; discrepancy below 3x that bound counts as measured
// agreement (a wrong backward lands orders of magnitude above it).
inline double tensor_rel_err(const Tensor<double>& analytic, const Tensor<double>& numeric,
                             const Tensor<double>* uncertainty = nullptr) {
  double num = 0, den = 1e-8;
  for (std::int64_t i = 0; i < analytic.numel(); ++i) {
    double d = std::abs(analytic[i] - numeric[i]);
    if (uncertainty) d = std::max(0.0, d - 3.0 * (*uncertainty)[i]);
    num = std::max(num, d);
    den = std::max({den, std::abs(analytic[i]), std::abs(numeric[i])});
  }
  return num / den;
}

enum class LossForm {
  kWeightedSum,     // L = sum_i w_i * out_i, grad_out = w
  kHalfSumSquares,  // L = sum_i out_i^2 / 2,  grad_out = out at the base point
};

namespace detail {

// Loss difference evaluated elementwise against the base output, which keeps
// the central difference free of the O(eps * |L|) cancellation error a plain
// L(x+h) - L(x-h) would carry.
inline double centered_loss(const Tensor<double>& out, const Tensor<double>& base, const Tensor<double>& weights,
                            LossForm form) {
  double s = 0;
  if (form == LossForm::kWeightedSum) {
    for (std::int64_t i = 0; i < out.numel(); ++i) s += weights[i] * (out[i] - base[i]);
  } else {
    for (std::int64_t i = 0; i < out.numel(); ++i) s += 0.5 * (out[i] - base[i]) * (out[i] + base[i]);
  }
  return s;
}

struct DiffEstimate {
  double value = 0;
  double uncertainty = 0;
};

// Richardson-refined central difference with per-entry step selection. Deep
// composites put one parameter in a steep-curvature regime (small step wins)
// and another at a tiny gradient where roundoff dominates (large step wins);
// the step is chosen by the internal agreement of the two stencils, never by
// reference to the analytic value under test. The reported uncertainty is the
// disagreement of the stencils at the chosen step.
inline DiffEstimate adaptive_central(const std::function<double(double)>& loss_delta, double base_step) {
  struct Candidate {
    double value, est;
  };
  std::vector<Candidate> ladder;
  for (const double h : {base_step * 1000.0, base_step * 100.0, base_step * 10.0, base_step, base_step / 10.0}) {
    const double c1 = (loss_delta(h) - loss_delta(-h)) / (2 * h);
    const double c2 = (loss_delta(h / 2) - loss_delta(-h / 2)) / h;
    ladder.push_back({(4 * c2 - c1) / 3, std::abs(c2 - c1)});
  }
  // The ladder runs large to small; moving to a smaller step trades
  // truncation for roundoff, so only switch on a decisive improvement.
  std::size_t pick = 0;
  for (std::size_t i = 1; i < ladder.size(); ++i) {
    if (ladder[i].est < 0.25 * ladder[pick].est) pick = i;
  }
  // The stencil disagreement can cancel by accident at one step, so the
  // published uncertainty also covers the gap to the runner-up estimate.
  std::size_t second = pick == 0 ? 1 : 0;
  for (std::size_t i = 0; i < ladder.size(); ++i) {
    if (i != pick && ladder[i].est < ladder[second].est) second = i;
  }
  const double spread = std::abs(ladder[pick].value - ladder[second].value);
  return DiffEstimate{ladder[pick].value, std::max(ladder[pick].est, spread)};
}

}  // namespace detail

// Central finite differences in f64 for an operation with tensor output.
// `analytic` must hold the gradients of the chosen loss for every name in
// `params`; the loss is defined by `form` and `weights` (unused base-output
// copy for kHalfSumSquares).
inline CheckResult check_tensor_output(const std::string& name,
                                       const std::function<Tensor<double>()>& forward,
                                       const Tensor<double>& weights, LossForm form,
                                       const std::vector<ParamRef>& params,
                                       const std::map<std::string, Tensor<double>>& analytic,
                                       double step = kStep) {
  const Tensor<double> base = forward();
  CheckResult result;
  result.name = name;
  for (const auto& p : params) {
    const auto it = analytic.find(p.name);
    if (it == analytic.end()) {
      throw std::invalid_argument("gradcheck " + name + ": no analytic gradient named " + p.name);
    }
    if (it->second.shape() != p.tensor->shape()) {
      throw std::invalid_argument("gradcheck " + name + ": analytic gradient shape mismatch for " + p.name);
    }
    Tensor<double>& t = *p.tensor;
    Tensor<double> numeric(t.shape());
    Tensor<double> uncertainty(t.shape());
    for (std::int64_t i = 0; i < t.numel(); ++i) {
      const auto loss_delta = [&](double h) {
        const double saved = t[i];
        t[i] = saved + h;
        const double l = detail::centered_loss(forward(), base, weights, form);
        t[i] = saved;
        return l;
      };
      const auto est = detail::adaptive_central(loss_delta, step);
      numeric[i] = est.value;
      uncertainty[i] = est.uncertainty;
    }
    ParamError pe{p.name, tensor_rel_err(it->second, numeric, &uncertainty)};
    if (pe.max_rel_err > result.max_rel_err) {
      result.max_rel_err = pe.max_rel_err;
      result.worst_param = pe.name;
    }
    result.params.push_back(std::move(pe));
  }
  return result;
}

// Variant for operations that already produce a scalar (the losses).
inline CheckResult check_scalar(const std::string& name, const std::function<double()>& loss,
                                const std::vector<ParamRef>& params,
                                const std::map<std::string, Tensor<double>>& analytic, double step = kStep) {
  CheckResult result;
  result.name = name;
  for (const auto& p : params) {
    const auto it = analytic.find(p.name);
    if (it == analytic.end()) {
      throw std::invalid_argument("gradcheck " + name + ": no analytic gradient named " + p.name);
    }
    if (it->second.shape() != p.tensor->shape()) {
      throw std::invalid_argument("gradcheck " + name + ": analytic gradient shape mismatch for " + p.name);
    }
    Tensor<double>& t = *p.tensor;
    Tensor<double> numeric(t.shape());
    Tensor<double> uncertainty(t.shape());
    for (std::int64_t i = 0; i < t.numel(); ++i) {
      const auto loss_delta = [&](double h) {
        const double saved = t[i];
        t[i] = saved + h;
        const double l = loss();
        t[i] = saved;
        return l;
      };
      const auto est = detail::adaptive_central(loss_delta, step);
      numeric[i] = est.value;
      uncertainty[i] = est.uncertainty;
    }
    ParamError pe{p.name, tensor_rel_err(it->second, numeric, &uncertainty)};
    if (pe.max_rel_err > result.max_rel_err) {
      result.max_rel_err = pe.max_rel_err;
      result.worst_param = pe.name;
    }
    result.params.push_back(std::move(pe));
  }
  return result;
}

// The full f64 suite: every tensor primitive, both attention forms, the
// transformer layer variants, the losses and a miniature head.
std::vector<CheckResult> run_suite(std::uint32_t seed = 7);

}  // namespace ettk::gradcheck
