#pragma once

#include <cmath>
#include <vector>

namespace cofact::testing {

// Brute-force SupCon written directly from the formula.
inline double supcon_reference(const std::vector<std::vector<double>>& e, const std::vector<int>& y, double tau) {
  const std::size_t n = e.size();
  std::vector<std::vector<double>> z = e;
  for (auto& row : z) {
    double norm = 0.0;
    for (double x : row) norm += x * x;
    norm = std::sqrt(norm);
    for (double& x : row) x /= norm;
  }
  auto dot = [&](std::size_t a, std::size_t b) {
    double s = 0.0;
    for (std::size_t k = 0; k < z[a].size(); ++k) s += z[a][k] * z[b][k];
    return s;
  };
  double total = 0.0;
  std::size_t anchors = 0;
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t positives = 0;
    double acc = 0.0;
    double denom = 0.0;
    for (std::size_t k = 0; k < n; ++k)
      if (k != i) denom += std::exp(dot(i, k) / tau);
    for (std::size_t p = 0; p < n; ++p) {
      if (p == i || y[p] != y[i]) continue;
      ++positives;
      acc += std::log(std::exp(dot(i, p) / tau) / denom);
    }
    if (positives == 0) continue;
    total += -acc / static_cast<double>(positives);
    ++anchors;
  }
  return anchors ? total / static_cast<double>(anchors) : 0.0;
}

}  // namespace cofact::testing
