#include "cofact/embedding.hpp"

#include <algorithm>

#include "cofact/init.hpp"

namespace cofact {

std::string_view stream_tag(Stream stream) {
  switch (stream) {
    case Stream::kClaimText: return "CT";
    case Stream::kDocText: return "DT";
    case Stream::kClaimImage: return "CI";
    case Stream::kDocImage: return "DI";
  }
  return "?";
}

std::string_view adapter_scope_name(AdapterScope scope) {
  switch (scope) {
    case AdapterScope::kFrozen: return "frozen";
    case AdapterScope::kAdapterOnly: return "adapter_only";
    case AdapterScope::kAll: return "all";
  }
  return "?";
}

AdapterScope parse_adapter_scope(std::string_view name) {
  if (name == "frozen") return AdapterScope::kFrozen;
  if (name == "adapter_only") return AdapterScope::kAdapterOnly;
  if (name == "all") return AdapterScope::kAll;
  throw ValueError("unknown adapter scope '" + std::string(name) +
                   "' (expected frozen, adapter_only or all)");
}

template <typename T>
StreamEmbedder<T> StreamEmbedder<T>::make(Stream stream, std::size_t backbone_dim, std::size_t d,
                                          Rng& rng) {
  return {stream, glorot_parameter<T>(backbone_dim, d, rng), filled_parameter<T>(d, T(0))};
}

template <typename T>
NamedTensors<T> StreamEmbedder<T>::named_parameters() const {
  const std::string base = "embed." + std::string(stream_tag(stream));
  return {{base + ".W", weight}, {base + ".b", bias}};
}

template <typename T>
BasicTensor<T> embed_stream(const BasicTensor<T>& x, const StreamEmbedder<T>& embedder) {
  if (x.rank() < 2 || x.shape().back() != embedder.input_dim())
    throw DimensionError("stream " + std::string(stream_tag(embedder.stream)) + ": input " +
                         shape_string(x.shape()) + " does not match embedding weight " +
                         shape_string(embedder.weight.shape()));
  return relu(add_bias(matmul(x, embedder.weight), embedder.bias));
}

template <typename T>
std::size_t AdapterBlock<T>::inner_width(std::size_t backbone_dim) {
  return std::min<std::size_t>(2 * backbone_dim, 512);
}

template <typename T>
AdapterBlock<T> AdapterBlock<T>::make(std::size_t backbone_dim, Rng& rng) {
  const std::size_t inner = inner_width(backbone_dim);
  AdapterBlock block;
  block.ffn_w1 = glorot_parameter<T>(backbone_dim, inner, rng);
  block.ffn_b1 = filled_parameter<T>(inner, T(0));
  block.ffn_w2 = glorot_parameter<T>(inner, backbone_dim, rng);
  block.ffn_b2 = filled_parameter<T>(backbone_dim, T(0));
  block.weight = glorot_parameter<T>(backbone_dim, backbone_dim, rng);
  block.bias = filled_parameter<T>(backbone_dim, T(0));
  block.shift = filled_parameter<T>(backbone_dim, T(0));
  return block;
}

template <typename T>
std::size_t AdapterBlock<T>::adapter_parameter_count() const {
  return weight.size() + bias.size() + shift.size();
}

template <typename T>
std::size_t AdapterBlock<T>::host_parameter_count() const {
  return ffn_w1.size() + ffn_b1.size() + ffn_w2.size() + ffn_b2.size();
}

template <typename T>
std::size_t AdapterBlock<T>::trainable_parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : named_parameters())
    if (t.requires_grad()) n += t.size();
  return n;
}

template <typename T>
void AdapterBlock<T>::configure(AdapterScope scope) {
  const bool host = scope == AdapterScope::kAll;
  const bool adapter = scope != AdapterScope::kFrozen;
  for (auto* t : {&ffn_w1, &ffn_b1, &ffn_w2, &ffn_b2}) t->set_requires_grad(host);
  for (auto* t : {&weight, &bias, &shift}) t->set_requires_grad(adapter);
}

template <typename T>
NamedTensors<T> AdapterBlock<T>::named_parameters(std::string_view prefix) const {
  const std::string p(prefix);
  return {{p + "adapter.W", weight}, {p + "adapter.b", bias},   {p + "adapter.v", shift},
          {p + "ffn.W1", ffn_w1},    {p + "ffn.b1", ffn_b1},    {p + "ffn.W2", ffn_w2},
          {p + "ffn.b2", ffn_b2}};
}

template <typename T>
BasicTensor<T> host_ffn(const BasicTensor<T>& x, const AdapterBlock<T>& block) {
  return add_bias(matmul(relu(add_bias(matmul(x, block.ffn_w1), block.ffn_b1)), block.ffn_w2),
                  block.ffn_b2);
}

template <typename T>
BasicTensor<T> adapt(const BasicTensor<T>& x, const AdapterBlock<T>& block, AdapterScope scope) {
  if (x.rank() < 2 || x.shape().back() != block.dim())
    throw DimensionError("adapter input " + shape_string(x.shape()) + " does not match width " +
                         std::to_string(block.dim()));
  // Outside kAll the host tail is a constant even if a caller left its
  // requires_grad flag set.
  auto host = [scope](const BasicTensor<T>& t) {
    return scope == AdapterScope::kAll || !t.requires_grad() ? t : t.detach();
  };
  AdapterBlock<T> view = block;
  view.ffn_w1 = host(block.ffn_w1);
  view.ffn_b1 = host(block.ffn_b1);
  view.ffn_w2 = host(block.ffn_w2);
  view.ffn_b2 = host(block.ffn_b2);
  auto out = host_ffn(x, view);
  if (scope == AdapterScope::kFrozen) return out;
  auto branch = add_bias(add_bias(matmul(x, block.weight), block.bias), block.shift);
  return add(out, branch);
}

#define COFACT_INSTANTIATE(T)                                                                 \
  template struct StreamEmbedder<T>;                                                          \
  template struct AdapterBlock<T>;                                                            \
  template BasicTensor<T> embed_stream<T>(const BasicTensor<T>&, const StreamEmbedder<T>&);   \
  template BasicTensor<T> host_ffn<T>(const BasicTensor<T>&, const AdapterBlock<T>&);         \
  template BasicTensor<T> adapt<T>(const BasicTensor<T>&, const AdapterBlock<T>&, AdapterScope);

COFACT_INSTANTIATE(float)
COFACT_INSTANTIATE(double)

#undef COFACT_INSTANTIATE

}  // namespace cofact
