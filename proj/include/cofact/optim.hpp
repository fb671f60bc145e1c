#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cofact/tensor.hpp"

namespace cofact {

template <typename T>
struct ParamGroup {
  std::string name;
  std::vector<BasicTensor<T>> params;
  double learning_rate = 5e-5;
};

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam with bias correction. Frozen tensors (requires_grad == false) passed
// in a group are ignored.
template <typename T>
class Adam {
 public:
  explicit Adam(std::vector<ParamGroup<T>> groups, AdamOptions options = {});

  // Throws ContractViolation when a trainable tensor carries no gradient.
  void step();
  void zero_grad();

  std::uint64_t step_count() const { return step_; }
  std::size_t trainable_count() const;
  const std::vector<ParamGroup<T>>& groups() const { return groups_; }
  // Moments are indexed [group][param][element].
  const std::vector<std::vector<std::vector<double>>>& first_moments() const { return m_; }
  const std::vector<std::vector<std::vector<double>>>& second_moments() const { return v_; }

 private:
  std::vector<ParamGroup<T>> groups_;
  AdamOptions options_;
  std::vector<std::vector<std::vector<double>>> m_;
  std::vector<std::vector<std::vector<double>>> v_;
  std::uint64_t step_ = 0;
};

extern template class Adam<float>;
extern template class Adam<double>;

}  // namespace cofact
