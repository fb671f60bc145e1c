#include "cofact/fusion.hpp"

#include <cmath>

#include "cofact/init.hpp"

namespace cofact {

template <typename T>
CoAttentionBlock<T> CoAttentionBlock<T>::make(std::size_t d, std::size_t ff_inner, Rng& rng) {
  CoAttentionBlock block;
  block.wq = glorot_parameter<T>(d, d, rng);
  block.wk = glorot_parameter<T>(d, d, rng);
  block.wv = glorot_parameter<T>(d, d, rng);
  block.ffn_w1 = glorot_parameter<T>(d, ff_inner, rng);
  block.ffn_b1 = filled_parameter<T>(ff_inner, T(0));
  block.ffn_w2 = glorot_parameter<T>(ff_inner, d, rng);
  block.ffn_b2 = filled_parameter<T>(d, T(0));
  block.norm1_gain = filled_parameter<T>(d, T(1));
  block.norm1_bias = filled_parameter<T>(d, T(0));
  block.norm2_gain = filled_parameter<T>(d, T(1));
  block.norm2_bias = filled_parameter<T>(d, T(0));
  return block;
}

template <typename T>
NamedTensors<T> CoAttentionBlock<T>::named_parameters(const std::string& prefix) const {
  const std::string p = prefix + ".";
  return {{p + "Wq", wq},
          {p + "Wk", wk},
          {p + "Wv", wv},
          {p + "ffn.W1", ffn_w1},
          {p + "ffn.b1", ffn_b1},
          {p + "ffn.W2", ffn_w2},
          {p + "ffn.b2", ffn_b2},
          {p + "norm1.gain", norm1_gain},
          {p + "norm1.bias", norm1_bias},
          {p + "norm2.gain", norm2_gain},
          {p + "norm2.bias", norm2_bias}};
}

template <typename T>
SequenceBatch<T> SequenceBatch<T>::single(const BasicTensor<T>& sequence) {
  if (sequence.rank() != 2)
    throw DimensionError("expected a [len×d] sequence, got " + shape_string(sequence.shape()));
  return {reshape(sequence, {1, sequence.dim(0), sequence.dim(1)}), {sequence.dim(0)}};
}

namespace {

template <typename T>
struct Direction {
  BasicTensor<T> output;
  BasicTensor<T> weights;
};

// Queries from `q`, keys and values from `kv`.
template <typename T>
Direction<T> attend_one_way(const SequenceBatch<T>& q, const SequenceBatch<T>& kv,
                            const CoAttentionBlock<T>& block, const AttentionOptions& opt,
                            std::uint64_t seed) {
  const std::size_t d = block.width();
  const std::size_t heads = opt.heads;
  const double scale_dim = opt.paper_exact_scaling ? double(d) : double(d / heads);

  auto queries = split_heads(matmul(q.values, block.wq), heads);
  auto keys = split_heads(matmul(kv.values, block.wk), heads);
  auto vals = split_heads(matmul(kv.values, block.wv), heads);

  auto scores = scale(matmul(queries, transpose(keys)), T(1.0 / std::sqrt(scale_dim)));
  auto weights = softmax(mask_keys(scores, kv.lengths, heads), 2);
  auto dropped = dropout(weights, opt.dropout, mix_seed(seed, 0), opt.training);
  auto context = merge_heads(matmul(dropped, vals), heads);

  auto z = layer_norm(add(q.values, context), block.norm1_gain, block.norm1_bias, T(opt.norm_eps));
  auto ffn = add_bias(matmul(relu(add_bias(matmul(z, block.ffn_w1), block.ffn_b1)), block.ffn_w2),
                      block.ffn_b2);
  ffn = dropout(ffn, opt.dropout, mix_seed(seed, 1), opt.training);
  auto out = layer_norm(add(ffn, z), block.norm2_gain, block.norm2_bias, T(opt.norm_eps));
  return {out, weights};
}

template <typename T>
void check_batch(const SequenceBatch<T>& s, std::size_t d, const char* side) {
  const auto& shape = s.values.shape();
  if (shape.size() != 3 || shape[2] != d)
    throw DimensionError(std::string("co-attention input ") + side + " " + shape_string(shape) +
                         " does not have width " + std::to_string(d));
  if (s.lengths.size() != shape[0])
    throw DimensionError(std::string("co-attention input ") + side + ": " +
                         std::to_string(s.lengths.size()) + " lengths for batch " +
                         std::to_string(shape[0]));
}

}  // namespace

template <typename T>
CoAttentionResult<T> co_attend(const SequenceBatch<T>& a, const SequenceBatch<T>& b,
                               const CoAttentionBlock<T>& block, const AttentionOptions& options) {
  const std::size_t d = block.width();
  if (options.heads == 0 || d % options.heads != 0)
    throw DimensionError("width " + std::to_string(d) + " not divisible by " +
                         std::to_string(options.heads) + " heads");
  check_batch(a, d, "A");
  check_batch(b, d, "B");
  if (a.values.dim(0) != b.values.dim(0))
    throw DimensionError("co-attention batch sizes differ: " + shape_string(a.values.shape()) +
                         " vs " + shape_string(b.values.shape()));
  auto ab = attend_one_way(a, b, block, options, mix_seed(options.seed, 0));
  auto ba = attend_one_way(b, a, block, options, mix_seed(options.seed, 1));
  return {ab.output, ba.output, ab.weights, ba.weights};
}

std::string_view aggregation_name(Aggregation mode) {
  return mode == Aggregation::kMean ? "mean" : "mean_max_last";
}

Aggregation parse_aggregation(std::string_view name) {
  if (name == "mean") return Aggregation::kMean;
  if (name == "mean_max_last") return Aggregation::kMeanMaxLast;
  throw ValueError("unknown aggregation '" + std::string(name) + "' (expected mean or mean_max_last)");
}

std::size_t aggregation_factor(Aggregation mode) { return mode == Aggregation::kMean ? 1 : 3; }

template <typename T>
const SequenceBatch<T>& StreamSet<T>::get(Stream s) const {
  switch (s) {
    case Stream::kClaimText: return claim_text;
    case Stream::kClaimImage: return claim_image;
    case Stream::kDocText: return doc_text;
    case Stream::kDocImage: return doc_image;
  }
  throw ContractViolation("unknown stream");
}

template <typename T>
BasicTensor<T> FusionOutput<T>::concatenated() const {
  std::vector<BasicTensor<T>> parts = contexts;
  parts.insert(parts.end(), streams.begin(), streams.end());
  return concat(parts, 1);
}

template <typename T>
BasicTensor<T> aggregate(const SequenceBatch<T>& seq, Aggregation mode) {
  auto mean = seq_mean(seq.values, seq.lengths);
  if (mode == Aggregation::kMean) return mean;
  return concat<T>({mean, seq_max(seq.values, seq.lengths), seq_last(seq.values, seq.lengths)}, 1);
}

template <typename T>
FusionOutput<T> fuse(const StreamSet<T>& streams, std::span<const CoAttentionBlock<T>> blocks,
                     const AttentionOptions& options, Aggregation mode) {
  if (blocks.size() != kNumPairings)
    throw DimensionError("fusion needs exactly 6 co-attention blocks, got " +
                         std::to_string(blocks.size()));
  FusionOutput<T> out;
  for (std::size_t k = 0; k < kNumPairings; ++k) {
    const auto& first = streams.get(kPairings[k].first);
    const auto& second = streams.get(kPairings[k].second);
    AttentionOptions opt = options;
    opt.seed = mix_seed(options.seed, k + 1);
    auto res = co_attend(first, second, blocks[k], opt);
    out.contexts.push_back(aggregate(SequenceBatch<T>{res.a_to_b, first.lengths}, mode));
    out.contexts.push_back(aggregate(SequenceBatch<T>{res.b_to_a, second.lengths}, mode));
  }
  for (auto s : kStreamAggregateOrder) out.streams.push_back(aggregate(streams.get(s), mode));
  return out;
}

#define COFACT_INSTANTIATE(T)                                                                    \
  template struct CoAttentionBlock<T>;                                                           \
  template struct SequenceBatch<T>;                                                              \
  template struct StreamSet<T>;                                                                  \
  template struct FusionOutput<T>;                                                               \
  template CoAttentionResult<T> co_attend<T>(const SequenceBatch<T>&, const SequenceBatch<T>&,   \
                                             const CoAttentionBlock<T>&, const AttentionOptions&); \
  template BasicTensor<T> aggregate<T>(const SequenceBatch<T>&, Aggregation);                    \
  template FusionOutput<T> fuse<T>(const StreamSet<T>&, std::span<const CoAttentionBlock<T>>,    \
                                   const AttentionOptions&, Aggregation);

COFACT_INSTANTIATE(float)
COFACT_INSTANTIATE(double)

#undef COFACT_INSTANTIATE

}  // namespace cofact
