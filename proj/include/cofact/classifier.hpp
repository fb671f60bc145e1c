#pragma once

#include <span>
#include <string>

#include "cofact/embedding.hpp"
#include "cofact/labels.hpp"
#include "cofact/random.hpp"
#include "cofact/tensor.hpp"

namespace cofact {

// probs = softmax(relu(O·Wz1)·Wz2); no bias terms.
template <typename T>
struct ClassifierHead {
  BasicTensor<T> wz1;  // [input_width×d_m]
  BasicTensor<T> wz2;  // [d_m×5]

  static ClassifierHead make(std::size_t input_width, std::size_t hidden, Rng& rng);
  std::size_t input_width() const { return wz1.dim(0); }
  NamedTensors<T> named_parameters() const;  // "head.Wz1", "head.Wz2"
};

template <typename T>
struct ClassifierOutput {
  BasicTensor<T> hidden;  // [batch×d_m], the contrastive embedding (pre-normalization)
  BasicTensor<T> logits;  // [batch×5]
  BasicTensor<T> probs;   // [batch×5]
};

template <typename T>
ClassifierOutput<T> classify(const BasicTensor<T>& input, const ClassifierHead<T>& head);

// Batch-mean negative log-likelihood of the labelled class, log clamped at 1e-12.
template <typename T>
BasicTensor<T> cross_entropy(const BasicTensor<T>& probs, std::span<const int> labels);

// Supervised contrastive loss on L2-normalized rows:
//   l_i = -1/|P(i)| sum_{p in P(i)} log( exp(z_i.z_p/tau) / sum_{k != i} exp(z_i.z_k/tau) )
// P(i) = other rows with the same label. Rows without positives are skipped
// and excluded from the mean; the loss is 0 when no row has a positive.
template <typename T>
BasicTensor<T> supcon_loss(const BasicTensor<T>& embeddings, std::span<const int> labels, T tau);

struct LossConfig {
  double alpha = 1.0;  // weight of cross-entropy; 1 disables the contrastive term
  double tau = 0.3;

  static LossConfig final_model() { return {1.0, 0.3}; }
  static LossConfig joint() { return {0.7, 0.3}; }
};

template <typename T>
struct LossBreakdown {
  BasicTensor<T> total;
  double cross_entropy = 0.0;
  double supcon = 0.0;
};

// alpha·CE + (1 - alpha)·SupCon, with each term skipped when its weight is 0.
template <typename T>
LossBreakdown<T> total_loss(const BasicTensor<T>& probs, const BasicTensor<T>& embeddings,
                            std::span<const int> labels, const LossConfig& config);

}  // namespace cofact
