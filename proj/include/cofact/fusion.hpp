#pragma once

// Multi-modal multi-type fusion: six shared-weight co-attention blocks over
// the four embedded streams.
//
// Pairing order (fixed; checkpoint names fusion.pair1 .. fusion.pair6):
//   1 (CI, DI)   2 (CT, DT)   3 (CI, DT)   4 (CI, CT)   5 (DI, CT)   6 (DI, DT)
// Each pairing (X, Y) yields two contexts: queries from X, then queries from Y.
// The 12 contexts are followed by the 4 stream aggregates in the order
// CT, CI, DT, DI.

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cofact/embedding.hpp"
#include "cofact/random.hpp"
#include "cofact/tensor.hpp"

namespace cofact {

constexpr std::size_t kNumPairings = 6;

struct Pairing {
  Stream first;
  Stream second;
};

constexpr std::array<Pairing, kNumPairings> kPairings = {{
    {Stream::kClaimImage, Stream::kDocImage},
    {Stream::kClaimText, Stream::kDocText},
    {Stream::kClaimImage, Stream::kDocText},
    {Stream::kClaimImage, Stream::kClaimText},
    {Stream::kDocImage, Stream::kClaimText},
    {Stream::kDocImage, Stream::kDocText},
}};

constexpr std::array<Stream, 4> kStreamAggregateOrder = {Stream::kClaimText, Stream::kClaimImage,
                                                         Stream::kDocText, Stream::kDocImage};

// One parameter set serves both query directions.
template <typename T>
struct CoAttentionBlock {
  BasicTensor<T> wq, wk, wv;
  BasicTensor<T> ffn_w1, ffn_b1, ffn_w2, ffn_b2;
  BasicTensor<T> norm1_gain, norm1_bias, norm2_gain, norm2_bias;

  static CoAttentionBlock make(std::size_t d, std::size_t ff_inner, Rng& rng);
  std::size_t width() const { return wq.dim(0); }
  // prefix e.g. "fusion.pair1" -> "fusion.pair1.Wq", "fusion.pair1.ffn.W1", "fusion.pair1.norm1.gain"
  NamedTensors<T> named_parameters(const std::string& prefix) const;
};

struct AttentionOptions {
  std::size_t heads = 12;
  // Scale scores by 1/sqrt(d) instead of 1/sqrt(d/heads).
  bool paper_exact_scaling = false;
  double dropout = 0.0;
  bool training = false;
  std::uint64_t seed = 0;
  double norm_eps = 1e-5;
};

// values: [batch×max_len×d]; positions >= lengths[b] are padding.
template <typename T>
struct SequenceBatch {
  BasicTensor<T> values;
  std::vector<std::size_t> lengths;

  // Single unpadded sequence [len×d] as a batch of one.
  static SequenceBatch single(const BasicTensor<T>& sequence);
};

template <typename T>
struct CoAttentionResult {
  BasicTensor<T> a_to_b;     // queries from A: [batch×la×d]
  BasicTensor<T> b_to_a;     // queries from B: [batch×lb×d]
  BasicTensor<T> weights_ab;  // [(batch·heads)×la×lb], rows sum to 1
  BasicTensor<T> weights_ba;  // [(batch·heads)×lb×la]
};

template <typename T>
CoAttentionResult<T> co_attend(const SequenceBatch<T>& a, const SequenceBatch<T>& b,
                               const CoAttentionBlock<T>& block, const AttentionOptions& options);

enum class Aggregation { kMean, kMeanMaxLast };

std::string_view aggregation_name(Aggregation mode);
Aggregation parse_aggregation(std::string_view name);
// Vectors per aggregated sequence: 1 for mean, 3 for mean/max/last.
std::size_t aggregation_factor(Aggregation mode);

template <typename T>
struct StreamSet {
  SequenceBatch<T> claim_text, claim_image, doc_text, doc_image;
  const SequenceBatch<T>& get(Stream s) const;
};

template <typename T>
struct FusionOutput {
  std::vector<BasicTensor<T>> contexts;  // 12 × [batch×(factor·d)]
  std::vector<BasicTensor<T>> streams;   // 4 × [batch×(factor·d)]
  // [batch×16·factor·d], contexts then streams.
  BasicTensor<T> concatenated() const;
};

template <typename T>
BasicTensor<T> aggregate(const SequenceBatch<T>& seq, Aggregation mode);

template <typename T>
FusionOutput<T> fuse(const StreamSet<T>& streams, std::span<const CoAttentionBlock<T>> blocks,
                     const AttentionOptions& options, Aggregation mode = Aggregation::kMean);

}  // namespace cofact
