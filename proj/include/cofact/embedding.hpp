#pragma once

// Per-stream embedding layers and the parameter-efficient adapter that sits
// beside the backbone tail's feed-forward layer.

#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "cofact/random.hpp"
#include "cofact/tensor.hpp"

namespace cofact {

enum class Stream { kClaimText = 0, kDocText = 1, kClaimImage = 2, kDocImage = 3 };

// "CT", "DT", "CI", "DI"
std::string_view stream_tag(Stream stream);

template <typename T>
using NamedTensors = std::vector<std::pair<std::string, BasicTensor<T>>>;

// E = relu(X·W + b), W: [backbone_dim×d]
template <typename T>
struct StreamEmbedder {
  Stream stream = Stream::kClaimText;
  BasicTensor<T> weight;
  BasicTensor<T> bias;

  static StreamEmbedder make(Stream stream, std::size_t backbone_dim, std::size_t d, Rng& rng);
  std::size_t input_dim() const { return weight.dim(0); }
  std::size_t output_dim() const { return weight.dim(1); }
  // "embed.CT.W", "embed.CT.b", ...
  NamedTensors<T> named_parameters() const;
};

// x: [seq×backbone_dim] or [batch×seq×backbone_dim].
template <typename T>
BasicTensor<T> embed_stream(const BasicTensor<T>& x, const StreamEmbedder<T>& embedder);

// kFrozen runs the host tail alone with every parameter frozen; kAdapterOnly
// adds the adapter branch and trains only it; kAll trains both.
enum class AdapterScope { kFrozen, kAdapterOnly, kAll };

std::string_view adapter_scope_name(AdapterScope scope);
AdapterScope parse_adapter_scope(std::string_view name);

// Backbone tail: FFN(x) = relu(x·W1 + b1)·W2 + b2 with inner width
// min(2·backbone_dim, 512). Adapter(x) = (x·W + b) + v with v one learned
// vector shared by all positions.
template <typename T>
struct AdapterBlock {
  BasicTensor<T> ffn_w1, ffn_b1, ffn_w2, ffn_b2;
  BasicTensor<T> weight, bias, shift;

  static AdapterBlock make(std::size_t backbone_dim, Rng& rng);
  static std::size_t inner_width(std::size_t backbone_dim);

  std::size_t dim() const { return weight.dim(0); }
  std::size_t adapter_parameter_count() const;
  std::size_t host_parameter_count() const;
  // Parameters with requires_grad set.
  std::size_t trainable_parameter_count() const;

  // Sets requires_grad on host and adapter tensors to match `scope`.
  void configure(AdapterScope scope);

  // prefix "" gives "adapter.W", "ffn.W1", ...; prefix "text_" gives "text_adapter.W", ...
  NamedTensors<T> named_parameters(std::string_view prefix = "") const;
};

template <typename T>
BasicTensor<T> host_ffn(const BasicTensor<T>& x, const AdapterBlock<T>& block);

// FFN(x) + Adapter(x) (or FFN(x) alone for kFrozen). Host tensors never
// receive gradient unless scope is kAll.
template <typename T>
BasicTensor<T> adapt(const BasicTensor<T>& x, const AdapterBlock<T>& block, AdapterScope scope);

}  // namespace cofact
