#include "cofact/classifier.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include "cofact/init.hpp"

namespace cofact {

template <typename T>
ClassifierHead<T> ClassifierHead<T>::make(std::size_t input_width, std::size_t hidden, Rng& rng) {
  return {glorot_parameter<T>(input_width, hidden, rng), glorot_parameter<T>(hidden, kNumClasses, rng)};
}

template <typename T>
NamedTensors<T> ClassifierHead<T>::named_parameters() const {
  return {{"head.Wz1", wz1}, {"head.Wz2", wz2}};
}

template <typename T>
ClassifierOutput<T> classify(const BasicTensor<T>& input, const ClassifierHead<T>& head) {
  if (input.rank() != 2 || input.dim(1) != head.input_width())
    throw DimensionError("classifier input width: expected " + std::to_string(head.input_width()) +
                         ", got shape " + shape_string(input.shape()));
  auto hidden = relu(matmul(input, head.wz1));
  auto logits = matmul(hidden, head.wz2);
  return {hidden, logits, softmax(logits, 1)};
}

namespace {

void check_labels(std::span<const int> labels, std::size_t batch, const char* op) {
  if (labels.size() != batch)
    throw DimensionError(std::string(op) + ": " + std::to_string(labels.size()) +
                         " labels for batch of " + std::to_string(batch));
  for (int y : labels)
    if (y < 0 || y >= static_cast<int>(kNumClasses))
      throw ValueError(std::string(op) + ": label " + std::to_string(y) + " outside 0..4");
}

}  // namespace

template <typename T>
BasicTensor<T> cross_entropy(const BasicTensor<T>& probs, std::span<const int> labels) {
  if (probs.rank() != 2 || probs.dim(1) != kNumClasses)
    throw DimensionError("cross_entropy expects [batch×5], got " + shape_string(probs.shape()));
  const std::size_t batch = probs.dim(0);
  check_labels(labels, batch, "cross_entropy");
  const T floor = T(1e-12);
  const auto pv = probs.values();
  T total = T(0);
  for (std::size_t i = 0; i < batch; ++i)
    total -= std::log(std::max(pv[i * kNumClasses + labels[i]], floor));
  std::vector<int> ys(labels.begin(), labels.end());
  auto pi = probs.impl();
  return make_op<T>("cross_entropy", {}, {total / T(batch)}, {probs},
                    [pi, ys, batch, floor](const detail::TensorImpl<T>& o) {
                      auto& g = pi->grad_buffer();
                      for (std::size_t i = 0; i < batch; ++i) {
                        const std::size_t idx = i * kNumClasses + ys[i];
                        if (pi->values[idx] > floor)
                          g[idx] -= o.grad[0] / (T(batch) * pi->values[idx]);
                      }
                    });
}

template <typename T>
BasicTensor<T> supcon_loss(const BasicTensor<T>& embeddings, std::span<const int> labels, T tau) {
  if (embeddings.rank() != 2)
    throw DimensionError("supcon_loss expects [batch×dim], got " + shape_string(embeddings.shape()));
  const std::size_t n = embeddings.dim(0), dim = embeddings.dim(1);
  if (n < 2) throw ValueError("supcon_loss needs a batch of at least 2");
  if (!(tau > T(0))) throw ValueError("supcon temperature must be positive");
  check_labels(labels, n, "supcon_loss");

  const auto ev = embeddings.values();
  const T norm_floor = T(1e-12);
  auto z = std::make_shared<std::vector<T>>(n * dim);
  auto norms = std::make_shared<std::vector<T>>(n);
  for (std::size_t i = 0; i < n; ++i) {
    T sq = T(0);
    for (std::size_t j = 0; j < dim; ++j) sq += ev[i * dim + j] * ev[i * dim + j];
    const T r = std::max(std::sqrt(sq), norm_floor);
    (*norms)[i] = r;
    for (std::size_t j = 0; j < dim; ++j) (*z)[i * dim + j] = ev[i * dim + j] / r;
  }
  std::vector<T> sim(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < n; ++k) {
      T dot = T(0);
      for (std::size_t j = 0; j < dim; ++j) dot += (*z)[i * dim + j] * (*z)[k * dim + j];
      sim[i * n + k] = dot / tau;
    }

  // dL/dsim, filled while computing the value.
  auto coeff = std::make_shared<std::vector<T>>(n * n, T(0));
  std::size_t valid = 0;
  T total = T(0);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t positives = 0;
    for (std::size_t k = 0; k < n; ++k) positives += (k != i && labels[k] == labels[i]) ? 1 : 0;
    if (positives == 0) continue;
    ++valid;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t k = 0; k < n; ++k)
      if (k != i) mx = std::max(mx, sim[i * n + k]);
    T denom = T(0);
    for (std::size_t k = 0; k < n; ++k)
      if (k != i) denom += std::exp(sim[i * n + k] - mx);
    const T lse = mx + std::log(denom);
    T pos_sum = T(0);
    for (std::size_t k = 0; k < n; ++k)
      if (k != i && labels[k] == labels[i]) pos_sum += sim[i * n + k];
    total += lse - pos_sum / T(positives);
    for (std::size_t k = 0; k < n; ++k) {
      if (k == i) continue;
      const T soft = std::exp(sim[i * n + k] - lse);
      const T pos = labels[k] == labels[i] ? T(1) / T(positives) : T(0);
      (*coeff)[i * n + k] = soft - pos;
    }
  }
  const T value = valid ? total / T(valid) : T(0);
  const T inv_valid = valid ? T(1) / T(valid) : T(0);

  auto ei = embeddings.impl();
  return make_op<T>(
      "supcon", {}, {value}, {embeddings},
      [ei, z, norms, coeff, n, dim, tau, inv_valid, norm_floor](const detail::TensorImpl<T>& o) {
        const T upstream = o.grad[0] * inv_valid / tau;
        std::vector<T> dz(n * dim, T(0));
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t k = 0; k < n; ++k) {
            const T c = (*coeff)[i * n + k] * upstream;
            if (c == T(0)) continue;
            for (std::size_t j = 0; j < dim; ++j) {
              dz[i * dim + j] += c * (*z)[k * dim + j];
              dz[k * dim + j] += c * (*z)[i * dim + j];
            }
          }
        auto& g = ei->grad_buffer();
        for (std::size_t i = 0; i < n; ++i) {
          const T r = (*norms)[i];
          if (r <= norm_floor) {
            for (std::size_t j = 0; j < dim; ++j) g[i * dim + j] += dz[i * dim + j] / norm_floor;
            continue;
          }
          T proj = T(0);
          for (std::size_t j = 0; j < dim; ++j) proj += (*z)[i * dim + j] * dz[i * dim + j];
          for (std::size_t j = 0; j < dim; ++j)
            g[i * dim + j] += (dz[i * dim + j] - (*z)[i * dim + j] * proj) / r;
        }
      });
}

template <typename T>
LossBreakdown<T> total_loss(const BasicTensor<T>& probs, const BasicTensor<T>& embeddings,
                            std::span<const int> labels, const LossConfig& config) {
  if (!(config.alpha >= 0.0 && config.alpha <= 1.0))
    throw ValueError("loss alpha must lie in [0, 1]");
  LossBreakdown<T> out;
  BasicTensor<T> ce, sc;
  if (config.alpha > 0.0) {
    ce = cross_entropy(probs, labels);
    out.cross_entropy = static_cast<double>(ce.item());
  }
  if (config.alpha < 1.0) {
    sc = supcon_loss(embeddings, labels, T(config.tau));
    out.supcon = static_cast<double>(sc.item());
  }
  if (config.alpha == 1.0) {
    out.total = ce;
  } else if (config.alpha == 0.0) {
    out.total = sc;
  } else {
    out.total = add(scale(ce, T(config.alpha)), scale(sc, T(1.0 - config.alpha)));
  }
  return out;
}

#define COFACT_INSTANTIATE(T)                                                                    \
  template struct ClassifierHead<T>;                                                             \
  template ClassifierOutput<T> classify<T>(const BasicTensor<T>&, const ClassifierHead<T>&);     \
  template BasicTensor<T> cross_entropy<T>(const BasicTensor<T>&, std::span<const int>);         \
  template BasicTensor<T> supcon_loss<T>(const BasicTensor<T>&, std::span<const int>, T);        \
  template LossBreakdown<T> total_loss<T>(const BasicTensor<T>&, const BasicTensor<T>&,          \
                                          std::span<const int>, const LossConfig&);

COFACT_INSTANTIATE(float)
COFACT_INSTANTIATE(double)

#undef COFACT_INSTANTIATE

}  // namespace cofact
