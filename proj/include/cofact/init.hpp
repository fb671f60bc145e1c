#pragma once

#include <cmath>

#include "cofact/random.hpp"
#include "cofact/tensor.hpp"

namespace cofact {

// Glorot-uniform [fan_in×fan_out] trainable matrix.
template <typename T>
BasicTensor<T> glorot_parameter(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::vector<T> values(fan_in * fan_out);
  for (auto& v : values) v = static_cast<T>(rng.uniform(-limit, limit));
  return BasicTensor<T>::parameter({fan_in, fan_out}, std::move(values));
}

template <typename T>
BasicTensor<T> filled_parameter(std::size_t n, T value) {
  return BasicTensor<T>::parameter({n}, std::vector<T>(n, value));
}

}  // namespace cofact
