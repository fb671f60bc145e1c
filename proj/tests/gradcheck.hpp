#pragma once
// Central finite-difference checker for double-precision graphs.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "cofact/random.hpp"
#include "cofact/tensor.hpp"

namespace cofact::testing {

using DTensor = BasicTensor<double>;

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::size_t checked = 0;
  std::size_t skipped = 0;  // perturbation crossed a relu/max kink
  std::string worst;        // "param[index]" of the largest error
};

// rel = |analytic - numeric| / max(|analytic|, |numeric|, floor). The floor
// keeps near-zero gradients from turning O(h^2) truncation into large ratios.
inline double rel_err(double a, double n, double floor = 1e-3) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
}

inline GradCheckResult grad_check(const std::vector<DTensor>& params,
                                  const std::function<DTensor()>& loss_fn, double h = 1e-3) {
  GradCheckResult result;
  NonsmoothProbe probe;
  for (auto p : params) p.zero_grad();
  probe.reset();
  auto loss = loss_fn();
  const auto base_signature = probe.signature();
  loss.backward();

  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    DTensor p = params[pi];
    const std::vector<double> analytic(p.grad().begin(), p.grad().end());
    auto values = p.mutable_values();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double original = values[i];
      auto eval = [&](double v, std::uint64_t& sig) {
        values[i] = v;
        NoGradGuard guard;
        probe.reset();
        const double out = loss_fn().item();
        sig = probe.signature();
        return out;
      };
      std::uint64_t sig_plus = 0, sig_minus = 0;
      const double plus = eval(original + h, sig_plus);
      const double minus = eval(original - h, sig_minus);
      values[i] = original;
      if (sig_plus != base_signature || sig_minus != base_signature) {
        ++result.skipped;
        continue;
      }
      const double numeric = (plus - minus) / (2.0 * h);
      const double err = rel_err(analytic.empty() ? 0.0 : analytic[i], numeric);
      ++result.checked;
      if (err > result.max_rel_err) {
        result.max_rel_err = err;
        result.worst = "param" + std::to_string(pi) + "[" + std::to_string(i) + "]";
      }
    }
  }
  return result;
}

inline DTensor random_tensor(Shape shape, Rng& rng, double scale = 1.0, bool param = true) {
  std::vector<double> v(shape_size(shape));
  for (auto& x : v) x = rng.normal() * scale;
  return param ? DTensor::parameter(std::move(shape), std::move(v))
               : DTensor::constant(std::move(shape), std::move(v));
}

// sum_i w_i · y_i with fixed random weights: a scalar loss that exercises every output element.
inline DTensor weighted_sum(const DTensor& y, std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t n = y.size();
  std::vector<double> w(n);
  for (auto& x : w) x = rng.normal();
  auto flat = reshape(y, {1, n});
  return sum(matmul(flat, DTensor::constant({n, 1}, std::move(w))));
}

}  // namespace cofact::testing
