#include "cofact/optim.hpp"

#include <cmath>

namespace cofact {

template <typename T>
Adam<T>::Adam(std::vector<ParamGroup<T>> groups, AdamOptions options)
    : options_(options) {
  for (auto& group : groups) {
    if (!(group.learning_rate > 0.0))
      throw ValueError("learning rate of group '" + group.name + "' must be positive");
    ParamGroup<T> kept{group.name, {}, group.learning_rate};
    for (auto& p : group.params)
      if (p.requires_grad()) kept.params.push_back(p);
    m_.emplace_back();
    v_.emplace_back();
    for (const auto& p : kept.params) {
      m_.back().emplace_back(p.size(), 0.0);
      v_.back().emplace_back(p.size(), 0.0);
    }
    groups_.push_back(std::move(kept));
  }
}

template <typename T>
void Adam<T>::step() {
  for (const auto& group : groups_)
    for (const auto& p : group.params)
      if (!p.has_grad())
        throw ContractViolation("optimizer step with missing gradient in group '" + group.name +
                                "' (shape " + shape_string(p.shape()) + ")");
  ++step_;
  const double b1 = options_.beta1, b2 = options_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(step_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(step_));
  for (std::size_t gi = 0; gi < groups_.size(); ++gi) {
    auto& group = groups_[gi];
    for (std::size_t pi = 0; pi < group.params.size(); ++pi) {
      auto& p = group.params[pi];
      auto values = p.mutable_values();
      const auto grad = p.grad();
      auto& m = m_[gi][pi];
      auto& v = v_[gi][pi];
      for (std::size_t i = 0; i < values.size(); ++i) {
        const double g = grad[i];
        m[i] = b1 * m[i] + (1.0 - b1) * g;
        v[i] = b2 * v[i] + (1.0 - b2) * g * g;
        const double update = group.learning_rate * (m[i] / c1) / (std::sqrt(v[i] / c2) + options_.eps);
        values[i] = static_cast<T>(values[i] - update);
      }
    }
  }
}

template <typename T>
void Adam<T>::zero_grad() {
  for (auto& group : groups_)
    for (auto& p : group.params) p.zero_grad();
}

template <typename T>
std::size_t Adam<T>::trainable_count() const {
  std::size_t n = 0;
  for (const auto& group : groups_)
    for (const auto& p : group.params) n += p.size();
  return n;
}

template class Adam<float>;
template class Adam<double>;

}  // namespace cofact
