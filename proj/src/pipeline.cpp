#include "cofact/pipeline.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "cofact/error.hpp"
#include "cofact/random.hpp"
#include "cofact/tensor_io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace cofact {

// ---- RunConfig -------------------------------------------------------------

void RunConfig::validate() const {
  if (heads == 0 || d % heads != 0)
    throw ValueError("d=" + std::to_string(d) + " is not divisible by heads=" + std::to_string(heads) +
                     "; choose heads that divide d (e.g. d=256 with heads=8 or 16)");
  if (batch_size == 0) throw ValueError("batch_size must be positive");
  if (max_seq_len == 0) throw ValueError("max_seq_len must be positive");
  if (!(learning_rate > 0.0) || !(backbone_learning_rate > 0.0))
    throw ValueError("learning rates must be positive");
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ValueError("alpha must lie in [0, 1]");
  if (!(tau > 0.0)) throw ValueError("tau must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ValueError("dropout must lie in [0, 1)");
}

ModelConfig RunConfig::model_config(std::size_t text_dim, std::size_t image_dim) const {
  ModelConfig m;
  m.text_dim = text_dim;
  m.image_dim = image_dim;
  m.d = d;
  m.heads = heads;
  m.ff_inner = ff_inner;
  m.d_m = d_m;
  m.dropout = dropout;
  m.aggregation = aggregation;
  m.paper_exact_scaling = paper_exact_scaling;
  m.adapter_scope = adapter_scope;
  m.adapter_on_text = adapter_on_text;
  m.use_features = use_features;
  m.text_only = text_only;
  return m;
}

namespace {

json run_config_json(const RunConfig& c) {
  return json{{"d", c.d},
              {"ff_inner", c.ff_inner},
              {"heads", c.heads},
              {"d_m", c.d_m},
              {"dropout", c.dropout},
              {"max_seq_len", c.max_seq_len},
              {"batch_size", c.batch_size},
              {"learning_rate", c.learning_rate},
              {"backbone_learning_rate", c.backbone_learning_rate},
              {"epochs", c.epochs},
              {"seed", c.seed},
              {"alpha", c.alpha},
              {"tau", c.tau},
              {"aggregation", std::string(aggregation_name(c.aggregation))},
              {"adapter_scope", std::string(adapter_scope_name(c.adapter_scope))},
              {"paper_exact_scaling", c.paper_exact_scaling},
              {"adapter_on_text", c.adapter_on_text},
              {"use_features", c.use_features},
              {"text_only", c.text_only},
              {"train_manifest", c.train_manifest},
              {"val_manifest", c.val_manifest},
              {"output_dir", c.output_dir}};
}

}  // namespace

std::string RunConfig::to_json(int indent) const { return run_config_json(*this).dump(indent); }

void RunConfig::merge_json(const std::string& text) {
  json in;
  try {
    in = json::parse(text);
  } catch (const json::exception& e) {
    throw FormatError(std::string("run config: ") + e.what());
  }
  if (!in.is_object()) throw FormatError("run config must be a JSON object");
  json j = run_config_json(*this);
  for (const auto& [key, value] : in.items()) {
    if (!j.contains(key)) throw ValueError("unknown run config key '" + key + "'");
    j[key] = value;
  }
  try {
    RunConfig c;
    c.d = j["d"].get<std::size_t>();
    c.ff_inner = j["ff_inner"].get<std::size_t>();
    c.heads = j["heads"].get<std::size_t>();
    c.d_m = j["d_m"].get<std::size_t>();
    c.dropout = j["dropout"].get<double>();
    c.max_seq_len = j["max_seq_len"].get<std::size_t>();
    c.batch_size = j["batch_size"].get<std::size_t>();
    c.learning_rate = j["learning_rate"].get<double>();
    c.backbone_learning_rate = j["backbone_learning_rate"].get<double>();
    c.epochs = j["epochs"].get<std::size_t>();
    c.seed = j["seed"].get<std::uint64_t>();
    c.alpha = j["alpha"].get<double>();
    c.tau = j["tau"].get<double>();
    c.aggregation = parse_aggregation(j["aggregation"].get<std::string>());
    c.adapter_scope = parse_adapter_scope(j["adapter_scope"].get<std::string>());
    c.paper_exact_scaling = j["paper_exact_scaling"].get<bool>();
    c.adapter_on_text = j["adapter_on_text"].get<bool>();
    c.use_features = j["use_features"].get<bool>();
    c.text_only = j["text_only"].get<bool>();
    c.train_manifest = j["train_manifest"].get<std::string>();
    c.val_manifest = j["val_manifest"].get<std::string>();
    c.output_dir = j["output_dir"].get<std::string>();
    *this = c;
  } catch (const json::exception& e) {
    throw FormatError(std::string("run config: ") + e.what());
  }
}

RunConfig RunConfig::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  RunConfig c;
  c.merge_json(ss.str());
  return c;
}

// ---- manifests and ingestion -----------------------------------------------

namespace {

RawSample sample_from_json(const json& j, std::size_t line_no) {
  RawSample s;
  try {
    s.id = j.at("id").get<std::string>();
    s.claim_text = j.value("claim_text", "");
    s.claim_ocr = j.value("claim_ocr", "");
    s.doc_text = j.value("doc_text", "");
    s.doc_ocr = j.value("doc_ocr", "");
    s.claim_image_embedding_ref = j.at("claim_image_embedding_ref").get<std::string>();
    s.doc_image_embedding_ref = j.at("doc_image_embedding_ref").get<std::string>();
    if (j.contains("claim_text_embedding_ref") && !j["claim_text_embedding_ref"].is_null())
      s.claim_text_embedding_ref = j["claim_text_embedding_ref"].get<std::string>();
    if (j.contains("doc_text_embedding_ref") && !j["doc_text_embedding_ref"].is_null())
      s.doc_text_embedding_ref = j["doc_text_embedding_ref"].get<std::string>();
    if (j.contains("label") && !j["label"].is_null()) {
      const auto& l = j["label"];
      const std::string text = l.is_number_integer() ? std::to_string(l.get<int>()) : l.get<std::string>();
      auto parsed = parse_category(text);
      if (!parsed) throw ValueError("sample " + s.id + ": unknown label '" + text + "'");
      s.label = *parsed;
    }
  } catch (const json::exception& e) {
    throw FormatError("manifest line " + std::to_string(line_no) + ": " + e.what());
  }
  return s;
}

json sample_to_json(const RawSample& s) {
  json j = {{"id", s.id},
            {"claim_text", s.claim_text},
            {"claim_ocr", s.claim_ocr},
            {"doc_text", s.doc_text},
            {"doc_ocr", s.doc_ocr},
            {"claim_image_embedding_ref", s.claim_image_embedding_ref},
            {"doc_image_embedding_ref", s.doc_image_embedding_ref}};
  if (s.claim_text_embedding_ref) j["claim_text_embedding_ref"] = *s.claim_text_embedding_ref;
  if (s.doc_text_embedding_ref) j["doc_text_embedding_ref"] = *s.doc_text_embedding_ref;
  if (s.label) j["label"] = std::string(category_name(*s.label));
  return j;
}

Tensor truncate_rows(const Tensor& t, std::size_t max_rows) {
  if (t.dim(0) <= max_rows) return t;
  const auto v = t.values();
  return Tensor::constant({max_rows, t.dim(1)},
                          std::vector<float>(v.begin(), v.begin() + max_rows * t.dim(1)));
}

Tensor load_sequence(const fs::path& dir, const std::string& ref, const std::string& id,
                     const char* stream, std::size_t max_seq_len) {
  Tensor t;
  try {
    t = load_tensor(dir / ref);
  } catch (const Error& e) {
    throw IoError("sample " + id + ": " + stream + " embedding '" + ref + "': " + e.what());
  }
  if (t.rank() != 2 || t.dim(0) == 0 || t.dim(1) == 0)
    throw DimensionError("sample " + id + ": " + stream + " embedding '" + ref + "' has shape " +
                         shape_string(t.shape()) + ", expected [len×dim]");
  return truncate_rows(t, max_seq_len);
}

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

DatasetManifest read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path.string());
  DatasetManifest m;
  std::string line;
  std::size_t line_no = 0;
  bool header = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw FormatError("manifest " + path.string() + " line " + std::to_string(line_no) + ": " + e.what());
    }
    if (!header) {
      if (!j.contains("split") || !j.contains("embedding_dir"))
        throw FormatError("manifest " + path.string() + ": first line must hold split and embedding_dir");
      m.split = j["split"].get<std::string>();
      m.embedding_dir = path.parent_path() / j["embedding_dir"].get<std::string>();
      header = true;
      continue;
    }
    m.records.push_back(sample_from_json(j, line_no));
  }
  if (!header) throw FormatError("manifest " + path.string() + " is empty (no header line)");
  return m;
}

void write_manifest(const fs::path& path, const DatasetManifest& manifest) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write manifest " + path.string());
  fs::path rel = manifest.embedding_dir.lexically_relative(path.parent_path());
  if (rel.empty()) rel = manifest.embedding_dir;
  out << json{{"split", manifest.split}, {"embedding_dir", rel.generic_string()}}.dump() << '\n';
  for (const auto& r : manifest.records) out << sample_to_json(r).dump() << '\n';
  if (!out) throw IoError("write failed for " + path.string());
}

Tensor pseudo_text_embedding(std::string_view text, std::size_t dim, std::size_t max_seq_len) {
  const std::string norm = normalize_text(text);
  std::vector<std::string> tokens;
  std::istringstream ss(norm);
  for (std::string tok; ss >> tok;) {
    std::transform(tok.begin(), tok.end(), tok.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    tokens.push_back(tok);
  }
  if (tokens.empty()) tokens.push_back("<empty>");
  if (tokens.size() > max_seq_len) tokens.resize(max_seq_len);
  std::vector<float> values;
  values.reserve(tokens.size() * dim);
  for (const auto& tok : tokens) {
    Rng rng(fnv1a(tok));
    for (std::size_t k = 0; k < dim; ++k) values.push_back(static_cast<float>(rng.normal()));
  }
  return Tensor::constant({tokens.size(), dim}, std::move(values));
}

std::vector<Example> ingest(const DatasetManifest& manifest, std::size_t max_seq_len) {
  if (max_seq_len == 0) throw ValueError("max_seq_len must be positive");
  std::vector<Example> out;
  out.reserve(manifest.records.size());
  const auto& dir = manifest.embedding_dir;
  for (const auto& r : manifest.records) {
    Example e;
    e.sample = r;
    e.claim_image = load_sequence(dir, r.claim_image_embedding_ref, r.id, "claim image", max_seq_len);
    e.doc_image = load_sequence(dir, r.doc_image_embedding_ref, r.id, "document image", max_seq_len);
    if (e.claim_image.dim(1) != e.doc_image.dim(1))
      throw DimensionError("sample " + r.id + ": claim and document image widths differ");
    const std::size_t fallback_dim = e.claim_image.dim(1);
    e.claim_text = r.claim_text_embedding_ref
                       ? load_sequence(dir, *r.claim_text_embedding_ref, r.id, "claim text", max_seq_len)
                       : pseudo_text_embedding(r.claim_text, fallback_dim, max_seq_len);
    e.doc_text = r.doc_text_embedding_ref
                     ? load_sequence(dir, *r.doc_text_embedding_ref, r.id, "document text", max_seq_len)
                     : pseudo_text_embedding(r.doc_text, fallback_dim, max_seq_len);
    if (e.claim_text.dim(1) != e.doc_text.dim(1))
      throw DimensionError("sample " + r.id + ": claim and document text widths differ");
    if (!out.empty() && (e.claim_text.dim(1) != out[0].claim_text.dim(1) ||
                         e.claim_image.dim(1) != out[0].claim_image.dim(1)))
      throw DimensionError("sample " + r.id + ": embedding width differs from earlier samples");
    out.push_back(std::move(e));
  }
  return out;
}

DatasetManifest write_split(const fs::path& dir, const std::string& split,
                            const std::vector<Example>& examples) {
  const fs::path emb_root = dir / "embeddings";
  const fs::path emb_dir = emb_root / split;
  fs::create_directories(emb_dir);
  DatasetManifest m;
  m.split = split;
  m.embedding_dir = emb_root;
  for (const auto& e : examples) {
    RawSample r = e.sample;
    auto put = [&](const Tensor& t, const std::string& tag) {
      const std::string ref = split + "/" + r.id + "." + tag + ".pcft";
      save_tensor(emb_root / ref, t);
      return ref;
    };
    r.claim_text_embedding_ref = put(e.claim_text, "ct");
    r.doc_text_embedding_ref = put(e.doc_text, "dt");
    r.claim_image_embedding_ref = put(e.claim_image, "ci");
    r.doc_image_embedding_ref = put(e.doc_image, "di");
    m.records.push_back(std::move(r));
  }
  write_manifest(dir / (split + ".jsonl"), m);
  return m;
}

// ---- synthetic data ----------------------------------------------------------

namespace {

constexpr std::array<std::array<const char*, 6>, 6> kTopicWords = {{
    {"election", "senate", "ballot", "minister", "policy", "parliament"},
    {"vaccine", "virus", "hospital", "doctor", "dose", "clinic"},
    {"football", "league", "coach", "stadium", "match", "season"},
    {"storm", "flood", "rainfall", "forecast", "drought", "cyclone"},
    {"inflation", "market", "bank", "prices", "budget", "shares"},
    {"satellite", "software", "robot", "network", "chip", "launch"},
}};
constexpr std::array<const char*, 10> kFiller = {"the", "a", "of", "and", "in", "to", "is", "was", "for", "with"};
constexpr std::array<const char*, 5> kContradiction = {"false", "hoax", "debunked", "fake", "misleading"};

std::string topic_word(std::size_t topic, Rng& rng) {
  if (topic < kTopicWords.size()) return kTopicWords[topic][rng.index(6)];
  return "topic" + std::to_string(topic) + "w" + std::to_string(rng.index(6));
}

std::size_t poisson(double mean, Rng& rng) {
  const double limit = std::exp(-mean);
  double p = 1.0;
  std::size_t k = 0;
  while (true) {
    p *= rng.uniform();
    if (p <= limit) return k;
    ++k;
  }
}

struct TextPlan {
  double mentions = 0.2;
  double urls = 0.2;
  double fillers = 2.0;
  std::size_t contradictions = 0;
};

std::string make_text(std::size_t topic, std::size_t words, const TextPlan& plan, Rng& rng) {
  std::vector<std::string> toks;
  for (std::size_t i = 0; i < words; ++i) toks.push_back(topic_word(topic, rng));
  for (std::size_t i = poisson(plan.fillers, rng); i > 0; --i) toks.push_back(kFiller[rng.index(kFiller.size())]);
  for (std::size_t i = 0; i < plan.contradictions; ++i)
    toks.push_back(kContradiction[rng.index(kContradiction.size())]);
  for (std::size_t i = poisson(plan.mentions, rng); i > 0; --i)
    toks.push_back("@user" + std::to_string(rng.index(100)));
  for (std::size_t i = poisson(plan.urls, rng); i > 0; --i)
    toks.push_back("https://news.example/" + std::to_string(rng.index(10000)));
  rng.shuffle(toks.begin(), toks.end());
  std::string out;
  for (const auto& t : toks) out += (out.empty() ? "" : " ") + t;
  return out;
}

struct Generator {
  const SynthOptions& o;
  std::vector<std::vector<double>> prototypes;       // [topics][latent]
  // One "encoder" per modality: claim and document streams of the same
  // modality share a projection, as a shared backbone would.
  std::array<std::vector<double>, 2> projections;    // text, image [latent×backbone]
  std::vector<double> contradiction;                 // [backbone]

  explicit Generator(const SynthOptions& opts) : o(opts) {
    Rng rng(mix_seed(o.seed, 0));
    prototypes.assign(o.topics, std::vector<double>(o.latent_dim));
    for (auto& p : prototypes)
      for (auto& x : p) x = rng.normal();
    const double s = 1.0 / std::sqrt(static_cast<double>(o.latent_dim));
    for (auto& proj : projections) {
      proj.resize(o.latent_dim * o.backbone_dim);
      for (auto& x : proj) x = rng.normal() * s;
    }
    contradiction.resize(o.backbone_dim);
    for (auto& x : contradiction) x = rng.normal();
  }

  std::vector<double> latent(std::size_t topic, double sign, Rng& rng) const {
    std::vector<double> z = prototypes[topic];
    for (auto& x : z) x = sign * x + o.latent_noise * rng.normal();
    return z;
  }

  Tensor sequence(int stream, const std::vector<double>& z, std::size_t len,
                  std::size_t contradictions, Rng& rng) const {
    const std::size_t bd = o.backbone_dim, k = o.latent_dim;
    std::vector<float> v;
    v.reserve((len + contradictions) * bd);
    const auto& proj = projections[stream < 2 ? 0 : 1];
    for (std::size_t t = 0; t < len; ++t) {
      std::vector<double> zt(k);
      for (std::size_t a = 0; a < k; ++a) zt[a] = z[a] + o.token_noise * rng.normal();
      for (std::size_t j = 0; j < bd; ++j) {
        double acc = 0.1 * rng.normal();
        for (std::size_t a = 0; a < k; ++a) acc += zt[a] * proj[a * bd + j];
        v.push_back(static_cast<float>(acc));
      }
    }
    for (std::size_t t = 0; t < contradictions; ++t)
      for (std::size_t j = 0; j < bd; ++j)
        v.push_back(static_cast<float>(contradiction[j] + 0.1 * rng.normal()));
    return Tensor::constant({len + contradictions, bd}, std::move(v));
  }

  std::size_t other_topic(std::size_t topic, Rng& rng) const {
    if (o.topics < 2) return topic;
    const std::size_t shift = 1 + rng.index(o.topics - 1);
    return (topic + shift) % o.topics;
  }

  Example make(const std::string& id, int label, std::uint64_t stream_seed) const {
    Rng rng(stream_seed);
    const bool text_shared = label == 0 || label == 1;
    const bool refute = label == 4;
    const bool image_shared = label == 1 || label == 3 || (refute && rng.uniform() < 0.5);

    const std::size_t t_claim = rng.index(o.topics);
    const std::size_t t_doc = (text_shared || refute) ? t_claim : other_topic(t_claim, rng);
    const std::size_t i_claim = rng.index(o.topics);
    const std::size_t i_doc = image_shared ? i_claim : other_topic(i_claim, rng);

    auto text_len = [&] { return o.min_text_len + rng.index(o.max_text_len - o.min_text_len + 1); };
    const std::size_t contradictions = refute ? 1 + rng.index(2) : 0;

    Example e;
    e.sample.id = id;
    e.sample.label = label;

    TextPlan claim_plan, doc_plan;
    claim_plan.mentions = text_shared ? 1.5 : 0.3;
    doc_plan.urls = (label == 2 || label == 3) ? 1.2 : 0.2;
    doc_plan.fillers = refute ? 4.0 : 2.0;
    doc_plan.contradictions = contradictions;

    const std::size_t ct_len = text_len(), dt_len = text_len();
    e.sample.claim_text = make_text(t_claim, ct_len, claim_plan, rng);
    e.sample.doc_text = make_text(t_doc, dt_len, doc_plan, rng);
    TextPlan ocr_plan;
    ocr_plan.fillers = 0.5;
    ocr_plan.mentions = 0.0;
    ocr_plan.urls = 0.0;
    e.sample.claim_ocr = make_text(i_claim, 1 + rng.index(3), ocr_plan, rng);
    e.sample.doc_ocr = image_shared ? e.sample.claim_ocr : make_text(i_doc, 1 + rng.index(3), ocr_plan, rng);

    const auto z_ct = latent(t_claim, 1.0, rng);
    std::vector<double> z_dt;
    if (text_shared || refute) {
      z_dt = z_ct;
      for (auto& x : z_dt) x = (refute ? -x : x) + o.latent_noise * rng.normal();
    } else {
      z_dt = latent(t_doc, 1.0, rng);
    }
    const auto z_ci = latent(i_claim, 1.0, rng);
    std::vector<double> z_di;
    if (image_shared) {
      z_di = z_ci;
      for (auto& x : z_di) x += o.latent_noise * rng.normal();
    } else {
      z_di = latent(i_doc, 1.0, rng);
    }
    e.claim_text = sequence(0, z_ct, ct_len, 0, rng);
    e.doc_text = sequence(1, z_dt, dt_len, contradictions, rng);
    e.claim_image = sequence(2, z_ci, o.image_len, 0, rng);
    e.doc_image = sequence(3, z_di, o.image_len, 0, rng);
    return e;
  }

  std::vector<Example> split(const std::string& name, std::size_t per_class, std::uint64_t salt) const {
    std::vector<Example> out;
    const std::size_t n = per_class * kNumClasses;
    for (std::size_t i = 0; i < n; ++i) {
      char id[64];
      std::snprintf(id, sizeof id, "%s-%05zu", name.c_str(), i);
      out.push_back(make(id, static_cast<int>(i % kNumClasses), mix_seed(o.seed, salt + i)));
    }
    return out;
  }
};

}  // namespace

SyntheticData synthesize(const SynthOptions& options) {
  if (options.train_per_class == 0) throw ValueError("n_per_class must be at least 1");
  if (options.backbone_dim == 0 || options.latent_dim == 0 || options.topics == 0 ||
      options.image_len == 0 || options.min_text_len == 0 || options.max_text_len < options.min_text_len)
    throw ValueError("invalid synthetic data options");
  Generator g(options);
  return {g.split("train", options.train_per_class, 1'000'000),
          g.split("val", options.val_per_class, 2'000'000)};
}

// ---- batching ----------------------------------------------------------------

namespace {

std::size_t longest_stream(const Example& e) {
  return std::max({e.claim_text.dim(0), e.doc_text.dim(0), e.claim_image.dim(0), e.doc_image.dim(0)});
}

SequenceBatch<float> pad(const std::vector<Example>& examples, std::span<const std::size_t> idx,
                         Tensor Example::*member) {
  std::size_t max_len = 0;
  const std::size_t width = (examples[idx[0]].*member).dim(1);
  for (auto i : idx) max_len = std::max(max_len, (examples[i].*member).dim(0));
  std::vector<float> v(idx.size() * max_len * width, 0.0f);
  std::vector<std::size_t> lengths;
  for (std::size_t b = 0; b < idx.size(); ++b) {
    const Tensor& t = examples[idx[b]].*member;
    std::copy(t.values().begin(), t.values().end(), v.begin() + b * max_len * width);
    lengths.push_back(t.dim(0));
  }
  return {Tensor::constant({idx.size(), max_len, width}, std::move(v)), std::move(lengths)};
}

}  // namespace

Batch collate(const std::vector<Example>& examples, std::span<const std::size_t> indices,
              const FeatureScaler& scaler, bool use_features) {
  if (indices.empty()) throw ValueError("cannot collate an empty batch");
  Batch b;
  b.indices.assign(indices.begin(), indices.end());
  b.input.streams.claim_text = pad(examples, indices, &Example::claim_text);
  b.input.streams.doc_text = pad(examples, indices, &Example::doc_text);
  b.input.streams.claim_image = pad(examples, indices, &Example::claim_image);
  b.input.streams.doc_image = pad(examples, indices, &Example::doc_image);
  if (use_features) {
    std::vector<float> f;
    f.reserve(indices.size() * kFeatureWidth);
    for (auto i : indices) {
      const auto v = extract(examples[i].sample, scaler);
      f.insert(f.end(), v.begin(), v.end());
    }
    b.input.features = Tensor::constant({indices.size(), kFeatureWidth}, std::move(f));
  }
  for (auto i : indices) b.labels.push_back(examples[i].sample.label.value_or(-1));
  return b;
}

std::vector<std::vector<std::size_t>> length_sorted_chunks(const std::vector<Example>& examples,
                                                           std::size_t batch_size) {
  if (batch_size == 0) throw ValueError("batch_size must be positive");
  std::vector<std::size_t> order(examples.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return longest_stream(examples[a]) < longest_stream(examples[b]);
  });
  std::vector<std::vector<std::size_t>> chunks;
  for (std::size_t s = 0; s < order.size(); s += batch_size)
    chunks.emplace_back(order.begin() + s, order.begin() + std::min(order.size(), s + batch_size));
  // A trailing single-sample batch has no contrastive pairs; fold it into its neighbour.
  if (chunks.size() > 1 && chunks.back().size() == 1) {
    chunks[chunks.size() - 2].push_back(chunks.back()[0]);
    chunks.pop_back();
  }
  return chunks;
}

// ---- training and evaluation ----------------------------------------------

EvalResult evaluate(const Model<float>& model, const FeatureScaler& scaler,
                    const std::vector<Example>& examples, std::size_t batch_size,
                    const std::string& model_id) {
  NoGradGuard no_grad;
  EvalResult r;
  r.probs.model_id = model_id;
  r.probs.values.assign(examples.size() * kNumClasses, 0.0);
  for (const auto& e : examples) r.probs.sample_ids.push_back(e.sample.id);
  if (examples.empty()) return r;
  for (const auto& chunk : length_sorted_chunks(examples, batch_size)) {
    auto batch = collate(examples, chunk, scaler, model.config().use_features && !model.config().text_only);
    auto out = model.forward(batch.input, false, 0);
    const auto p = out.probs.values();
    for (std::size_t b = 0; b < chunk.size(); ++b)
      for (std::size_t c = 0; c < kNumClasses; ++c)
        r.probs.values[chunk[b] * kNumClasses + c] = p[b * kNumClasses + c];
  }
  const bool labeled = std::all_of(examples.begin(), examples.end(),
                                   [](const Example& e) { return e.sample.label.has_value(); });
  if (labeled) {
    for (const auto& e : examples) r.labels.push_back(*e.sample.label);
    r.confusion = confusion(r.probs.argmax(), r.labels);
    r.report = weighted_f1(*r.confusion);
  }
  return r;
}

TrainResult train(const RunConfig& config, const std::vector<Example>& train_set,
                  const std::vector<Example>& val_set,
                  const std::function<void(const EpochLog&)>& on_epoch) {
  config.validate();
  if (train_set.empty()) throw ValueError("training set is empty");
  for (const auto& e : train_set)
    if (!e.sample.label) throw ValueError("training sample " + e.sample.id + " has no label");

  const ModelConfig mc = config.model_config(train_set[0].claim_text.dim(1), train_set[0].claim_image.dim(1));
  const bool use_features = mc.use_features && !mc.text_only;
  auto model = Model<float>::init(mc, mix_seed(config.seed, 1));

  TrainResult result;
  if (use_features) {
    std::vector<FeatureVector> raw;
    raw.reserve(train_set.size());
    for (const auto& e : train_set) raw.push_back(raw_features(e.sample));
    result.scaler.fit(raw);
  }
  Adam<float> optimizer(model.param_groups(config.learning_rate, config.backbone_learning_rate));
  const auto chunks = length_sorted_chunks(train_set, config.batch_size);
  // Collation does not depend on the epoch.
  std::vector<Batch> batches;
  for (const auto& c : chunks) batches.push_back(collate(train_set, c, result.scaler, use_features));

  const LossConfig loss_cfg = config.loss();
  std::size_t step = 0;
  result.model = model.cast<float>();
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    std::vector<std::size_t> order(batches.size());
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng(mix_seed(config.seed, 100 + epoch));
    shuffle_rng.shuffle(order.begin(), order.end());

    double loss_sum = 0.0;
    for (auto bi : order) {
      const auto& batch = batches[bi];
      ++step;
      auto out = model.forward(batch.input, true, mix_seed(config.seed, 1'000'000 + step));
      auto loss = total_loss(out.probs, out.hidden, batch.labels, loss_cfg);
      const double total = static_cast<double>(loss.total.item());
      if (!std::isfinite(total) || !std::isfinite(loss.cross_entropy) || !std::isfinite(loss.supcon))
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                           std::to_string(step) + ": ce=" + std::to_string(loss.cross_entropy) +
                           " supcon=" + std::to_string(loss.supcon) + " total=" + std::to_string(total));
      optimizer.zero_grad();
      loss.total.backward();
      optimizer.step();
      loss_sum += total;
      result.steps.push_back({step, loss.cross_entropy, loss.supcon, total});
    }

    EpochLog log;
    log.epoch = epoch;
    log.mean_loss = loss_sum / static_cast<double>(batches.size());
    if (!val_set.empty()) {
      auto ev = evaluate(model, result.scaler, val_set, config.batch_size, "val");
      log.val_f1 = ev.report ? ev.report->weighted : 0.0;
      if (log.val_f1 > result.best_val_f1) {
        result.best_val_f1 = log.val_f1;
        result.best_epoch = epoch;
        result.model = model.cast<float>();
        result.val_probs = std::move(ev.probs);
      }
    } else {
      result.best_epoch = epoch;
      result.model = model.cast<float>();
    }
    result.epochs.push_back(log);
    if (on_epoch) on_epoch(log);
  }
  return result;
}

void save_checkpoint(const fs::path& path, const TrainResult& result) {
  json meta = {{"model", json::parse(result.model.config().to_json())},
               {"best_val_f1", result.best_val_f1},
               {"best_epoch", result.best_epoch}};
  auto archive = result.model.to_archive(meta.dump());
  archive.entries.emplace_back("features.scaler", result.scaler.to_tensor());
  save_archive(path, archive);
}

Checkpoint load_checkpoint(const fs::path& path) {
  auto archive = load_archive(path);
  json meta;
  try {
    meta = json::parse(archive.metadata);
  } catch (const json::exception& e) {
    throw FormatError("checkpoint " + path.string() + ": bad metadata: " + e.what());
  }
  if (!meta.contains("model")) throw FormatError("checkpoint " + path.string() + ": no model config");
  auto config = ModelConfig::from_json(meta["model"].dump());
  Checkpoint c{Model<float>::from_archive(archive, config), FeatureScaler{}};
  if (archive.contains("features.scaler")) c.scaler = FeatureScaler::from_tensor(archive.at("features.scaler"));
  return c;
}

void write_run_outputs(const fs::path& dir, const TrainResult& result) {
  fs::create_directories(dir);
  save_checkpoint(dir / "checkpoint.pcfk", result);
  {
    std::ofstream out(dir / "loss_log.jsonl");
    for (const auto& s : result.steps)
      out << json{{"step", s.step}, {"ce", s.ce}, {"supcon", s.supcon}, {"total", s.total}}.dump() << '\n';
  }
  {
    std::ofstream out(dir / "epochs.jsonl");
    for (const auto& e : result.epochs)
      out << json{{"epoch", e.epoch}, {"mean_loss", e.mean_loss}, {"val_f1", e.val_f1}}.dump() << '\n';
  }
  if (result.val_probs.rows() > 0) save_prob_matrix((dir / "val_probs.csv").string(), result.val_probs);
}

}  // namespace cofact
