#include "cofact/model.hpp"

#include <json.hpp>

namespace cofact {

void ModelConfig::validate() const {
  if (d == 0 || heads == 0 || d % heads != 0)
    throw ValueError("d=" + std::to_string(d) + " must be a positive multiple of heads=" +
                     std::to_string(heads));
  if (text_dim == 0 || image_dim == 0 || ff_inner == 0 || d_m == 0)
    throw ValueError("model widths must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ValueError("dropout must lie in [0, 1)");
}

std::size_t ModelConfig::fusion_width() const {
  const std::size_t vectors = text_only ? 4 : 2 * kNumPairings + 4;
  return vectors * aggregation_factor(aggregation) * d;
}

std::size_t ModelConfig::classifier_input_width() const {
  return fusion_width() + (use_features && !text_only ? kFeatureWidth : 0);
}

std::string ModelConfig::to_json() const {
  nlohmann::json j = {{"text_dim", text_dim},
                      {"image_dim", image_dim},
                      {"d", d},
                      {"heads", heads},
                      {"ff_inner", ff_inner},
                      {"d_m", d_m},
                      {"dropout", dropout},
                      {"aggregation", std::string(aggregation_name(aggregation))},
                      {"paper_exact_scaling", paper_exact_scaling},
                      {"adapter_scope", std::string(adapter_scope_name(adapter_scope))},
                      {"adapter_on_text", adapter_on_text},
                      {"use_features", use_features},
                      {"text_only", text_only}};
  return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("model config: ") + e.what());
  }
  ModelConfig c;
  try {
    c.text_dim = j.at("text_dim").get<std::size_t>();
    c.image_dim = j.at("image_dim").get<std::size_t>();
    c.d = j.at("d").get<std::size_t>();
    c.heads = j.at("heads").get<std::size_t>();
    c.ff_inner = j.at("ff_inner").get<std::size_t>();
    c.d_m = j.at("d_m").get<std::size_t>();
    c.dropout = j.at("dropout").get<double>();
    c.aggregation = parse_aggregation(j.at("aggregation").get<std::string>());
    c.paper_exact_scaling = j.at("paper_exact_scaling").get<bool>();
    c.adapter_scope = parse_adapter_scope(j.at("adapter_scope").get<std::string>());
    c.adapter_on_text = j.at("adapter_on_text").get<bool>();
    c.use_features = j.at("use_features").get<bool>();
    c.text_only = j.at("text_only").get<bool>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

template <typename T>
Model<T> Model<T>::init(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  Model m;
  m.config_ = config;
  for (auto s : {Stream::kClaimText, Stream::kDocText, Stream::kClaimImage, Stream::kDocImage}) {
    const bool text = s == Stream::kClaimText || s == Stream::kDocText;
    m.embedders[static_cast<int>(s)] =
        StreamEmbedder<T>::make(s, text ? config.text_dim : config.image_dim, config.d, rng);
  }
  m.image_tail = AdapterBlock<T>::make(config.image_dim, rng);
  m.image_tail.configure(config.adapter_scope);
  if (config.adapter_on_text) {
    m.text_tail = AdapterBlock<T>::make(config.text_dim, rng);
    m.text_tail->configure(config.adapter_scope);
  }
  for (std::size_t k = 0; k < kNumPairings; ++k)
    m.blocks.push_back(CoAttentionBlock<T>::make(config.d, config.ff_inner, rng));
  m.head = ClassifierHead<T>::make(config.classifier_input_width(), config.d_m, rng);
  return m;
}

template <typename T>
NamedTensors<T> Model<T>::named_parameters() const {
  NamedTensors<T> out;
  auto append = [&out](const NamedTensors<T>& more) { out.insert(out.end(), more.begin(), more.end()); };
  const bool text_only = config_.text_only;
  for (const auto& e : embedders) {
    const bool text = e.stream == Stream::kClaimText || e.stream == Stream::kDocText;
    if (text || !text_only) append(e.named_parameters());
  }
  if (!text_only) append(image_tail.named_parameters());
  if (text_tail) append(text_tail->named_parameters("text_"));
  for (std::size_t k = 0; k < blocks.size(); ++k)
    if (!text_only || k == 1) append(blocks[k].named_parameters("fusion.pair" + std::to_string(k + 1)));
  append(head.named_parameters());
  return out;
}

template <typename T>
std::vector<ParamGroup<T>> Model<T>::param_groups(double learning_rate,
                                                  double backbone_learning_rate) const {
  ParamGroup<T> fresh{"head", {}, learning_rate};
  ParamGroup<T> backbone{"backbone", {}, backbone_learning_rate};
  for (const auto& [name, t] : named_parameters()) {
    const bool tail = name.rfind("adapter.", 0) == 0 || name.rfind("ffn.", 0) == 0 ||
                      name.rfind("text_", 0) == 0;
    (tail ? backbone : fresh).params.push_back(t);
  }
  return {fresh, backbone};
}

template <typename T>
ModelOutput<T> Model<T>::forward(const ModelInput<T>& input, bool training,
                                 std::uint64_t seed) const {
  const auto scope = config_.adapter_scope;
  auto through_tail = [scope](const SequenceBatch<T>& s, const AdapterBlock<T>* tail) {
    return tail ? SequenceBatch<T>{adapt(s.values, *tail, scope), s.lengths} : s;
  };
  auto embed = [this](const SequenceBatch<T>& s, Stream stream) {
    return SequenceBatch<T>{embed_stream(s.values, embedders[static_cast<int>(stream)]), s.lengths};
  };
  const AdapterBlock<T>* text_tail_ptr = text_tail ? &*text_tail : nullptr;

  StreamSet<T> e;
  e.claim_text = embed(through_tail(input.streams.claim_text, text_tail_ptr), Stream::kClaimText);
  e.doc_text = embed(through_tail(input.streams.doc_text, text_tail_ptr), Stream::kDocText);

  AttentionOptions opt;
  opt.heads = config_.heads;
  opt.paper_exact_scaling = config_.paper_exact_scaling;
  opt.dropout = config_.dropout;
  opt.training = training;
  opt.seed = seed;

  std::vector<BasicTensor<T>> parts;
  if (config_.text_only) {
    opt.seed = mix_seed(seed, 2);
    auto res = co_attend(e.claim_text, e.doc_text, blocks[1], opt);
    parts = {aggregate(SequenceBatch<T>{res.a_to_b, e.claim_text.lengths}, config_.aggregation),
             aggregate(SequenceBatch<T>{res.b_to_a, e.doc_text.lengths}, config_.aggregation),
             aggregate(e.claim_text, config_.aggregation),
             aggregate(e.doc_text, config_.aggregation)};
  } else {
    e.claim_image = embed(through_tail(input.streams.claim_image, &image_tail), Stream::kClaimImage);
    e.doc_image = embed(through_tail(input.streams.doc_image, &image_tail), Stream::kDocImage);
    auto fused = fuse<T>(e, blocks, opt, config_.aggregation);
    parts = fused.contexts;
    parts.insert(parts.end(), fused.streams.begin(), fused.streams.end());
    if (config_.use_features) {
      if (!input.features.defined() || input.features.shape() != Shape{parts[0].dim(0), kFeatureWidth})
        throw DimensionError("feature input must be [batch×32]");
      parts.push_back(input.features);
    }
  }
  auto out = classify(concat(parts, 1), head);
  return {out.probs, out.hidden};
}

template <typename T>
void Model<T>::copy_values(
    const std::function<std::pair<Shape, std::vector<double>>(const std::string&)>& source) {
  for (auto& [name, t] : named_parameters()) {
    auto [shape, values] = source(name);
    if (shape != t.shape())
      throw DimensionError("parameter '" + name + "' has shape " + shape_string(shape) +
                           ", model expects " + shape_string(t.shape()));
    auto dst = BasicTensor<T>(t).mutable_values();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(values[i]);
  }
}

template <typename T>
template <typename U>
Model<U> Model<T>::cast() const {
  auto out = Model<U>::init(config_, 0);
  auto mine = named_parameters();
  out.copy_values([&mine](const std::string& name) {
    for (const auto& [n, t] : mine)
      if (n == name) return std::make_pair(t.shape(), std::vector<double>(t.values().begin(), t.values().end()));
    throw FormatError("missing parameter '" + name + "'");
  });
  return out;
}

template <typename T>
TensorArchive Model<T>::to_archive(const std::string& metadata) const {
  TensorArchive archive;
  archive.metadata = metadata;
  for (const auto& [name, t] : named_parameters()) archive.entries.emplace_back(name, t.template cast<float>());
  return archive;
}

template <typename T>
Model<T> Model<T>::from_archive(const TensorArchive& archive, const ModelConfig& config) {
  auto m = init(config, 0);
  m.copy_values([&archive](const std::string& name) {
    const auto& t = archive.at(name);
    return std::make_pair(t.shape(), std::vector<double>(t.values().begin(), t.values().end()));
  });
  return m;
}

template class Model<float>;
template class Model<double>;
template Model<double> Model<float>::cast<double>() const;
template Model<float> Model<double>::cast<float>() const;
template Model<float> Model<float>::cast<float>() const;
template Model<double> Model<double>::cast<double>() const;

}  // namespace cofact
