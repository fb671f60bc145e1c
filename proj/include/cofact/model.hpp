#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "cofact/classifier.hpp"
#include "cofact/embedding.hpp"
#include "cofact/features.hpp"
#include "cofact/fusion.hpp"
#include "cofact/optim.hpp"
#include "cofact/tensor_io.hpp"

namespace cofact {

struct ModelConfig {
  std::size_t text_dim = 1024;   // backbone width of text embeddings
  std::size_t image_dim = 1024;  // backbone width of image embeddings
  std::size_t d = 256;
  std::size_t heads = 12;
  std::size_t ff_inner = 512;
  std::size_t d_m = 128;
  double dropout = 0.1;
  Aggregation aggregation = Aggregation::kMean;
  bool paper_exact_scaling = false;
  AdapterScope adapter_scope = AdapterScope::kAdapterOnly;
  bool adapter_on_text = false;
  bool use_features = true;
  // Ablation: claim/document text streams only, one co-attention block, no features.
  bool text_only = false;

  void validate() const;
  std::size_t fusion_width() const;
  std::size_t classifier_input_width() const;

  std::string to_json() const;
  static ModelConfig from_json(const std::string& text);
};

template <typename T>
struct ModelInput {
  StreamSet<T> streams;    // backbone-width sequences
  BasicTensor<T> features;  // [batch×32]; ignored when features are disabled
};

template <typename T>
struct ModelOutput {
  BasicTensor<T> probs;
  BasicTensor<T> hidden;
};

template <typename T>
class Model {
 public:
  static Model init(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }

  ModelOutput<T> forward(const ModelInput<T>& input, bool training, std::uint64_t seed) const;

  // Parameters the configuration actually uses, in checkpoint naming.
  NamedTensors<T> named_parameters() const;
  // "head" group at the primary rate, "backbone" (adapter + tail) at the backbone rate.
  std::vector<ParamGroup<T>> param_groups(double learning_rate, double backbone_learning_rate) const;

  template <typename U>
  Model<U> cast() const;

  TensorArchive to_archive(const std::string& metadata) const;
  static Model from_archive(const TensorArchive& archive, const ModelConfig& config);

  std::array<StreamEmbedder<T>, 4> embedders;  // indexed by Stream
  AdapterBlock<T> image_tail;
  std::optional<AdapterBlock<T>> text_tail;
  std::vector<CoAttentionBlock<T>> blocks;
  ClassifierHead<T> head;

 private:
  template <typename> friend class Model;

  // Overwrites every used parameter with source(name); throws DimensionError
  // naming the parameter when the source shape differs.
  void copy_values(const std::function<std::pair<Shape, std::vector<double>>(const std::string&)>& source);

  ModelConfig config_;
};

}  // namespace cofact
