#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cofact/classifier.hpp"
#include "cofact/ensemble.hpp"
#include "cofact/features.hpp"
#include "cofact/metrics.hpp"
#include "cofact/model.hpp"

namespace cofact {

struct RunConfig {
  std::size_t d = 256;
  std::size_t ff_inner = 512;
  std::size_t heads = 12;
  std::size_t d_m = 128;
  double dropout = 0.1;
  std::size_t max_seq_len = 512;
  std::size_t batch_size = 24;
  double learning_rate = 5e-5;           // newly initialized modules
  double backbone_learning_rate = 1e-5;  // adapter and backbone tail
  std::size_t epochs = 15;
  std::uint64_t seed = 42;
  double alpha = 1.0;
  double tau = 0.3;
  Aggregation aggregation = Aggregation::kMean;
  AdapterScope adapter_scope = AdapterScope::kAdapterOnly;
  bool paper_exact_scaling = false;
  bool adapter_on_text = false;
  bool use_features = true;
  bool text_only = false;

  std::string train_manifest;
  std::string val_manifest;
  std::string output_dir;

  void validate() const;
  LossConfig loss() const { return {alpha, tau}; }
  ModelConfig model_config(std::size_t text_dim, std::size_t image_dim) const;

  std::string to_json(int indent = 2) const;
  // Keys present in `text` override the current values; unknown keys are an error.
  void merge_json(const std::string& text);
  static RunConfig load(const std::filesystem::path& path);
};

// A sample with its four [len×dim] embedding sequences.
struct Example {
  RawSample sample;
  Tensor claim_text;
  Tensor doc_text;
  Tensor claim_image;
  Tensor doc_image;
};

// Line-delimited JSON. Line 1: {"split": ..., "embedding_dir": ...} with the
// directory relative to the manifest file; every further line is one RawSample
// whose embedding refs are relative to that directory.
struct DatasetManifest {
  std::string split;
  std::filesystem::path embedding_dir;  // resolved (absolute or cwd-relative)
  std::vector<RawSample> records;
};

DatasetManifest read_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, const DatasetManifest& manifest);

// Loads every record in manifest order. Sequences longer than max_seq_len keep
// their first max_seq_len rows. Missing text refs fall back to
// pseudo_text_embedding with the width of the image embeddings.
std::vector<Example> ingest(const DatasetManifest& manifest, std::size_t max_seq_len);

// Deterministic stand-in for a text encoder: one vector per token, derived
// from a hash of the normalized token. For tests and embedding-free corpora only.
Tensor pseudo_text_embedding(std::string_view text, std::size_t dim, std::size_t max_seq_len);

// Writes <dir>/<split>.jsonl and the embedding files under <dir>/embeddings/<split>/.
DatasetManifest write_split(const std::filesystem::path& dir, const std::string& split,
                            const std::vector<Example>& examples);

struct SynthOptions {
  std::size_t train_per_class = 100;
  std::size_t val_per_class = 20;
  std::size_t backbone_dim = 32;
  std::size_t latent_dim = 8;
  std::size_t topics = 6;
  std::size_t min_text_len = 4;
  std::size_t max_text_len = 8;
  std::size_t image_len = 4;
  double latent_noise = 0.2;  // per-sample jitter around the topic prototype
  double token_noise = 0.3;   // per-token jitter around the sample latent
  std::uint64_t seed = 42;
};

struct SyntheticData {
  std::vector<Example> train;
  std::vector<Example> val;
};

// Five classes by construction: claim and document streams share a latent
// topic ("similar"), use independent topics ("insufficient"), or the document
// text carries the negated topic plus contradiction tokens ("refute").
SyntheticData synthesize(const SynthOptions& options);

struct Batch {
  ModelInput<float> input;
  std::vector<int> labels;
  std::vector<std::size_t> indices;  // positions in the source example list
};

// Pads each stream to the longest sequence in the batch.
Batch collate(const std::vector<Example>& examples, std::span<const std::size_t> indices,
              const FeatureScaler& scaler, bool use_features);

// Indices sorted by longest stream (stable), chunked into batch_size groups.
std::vector<std::vector<std::size_t>> length_sorted_chunks(const std::vector<Example>& examples,
                                                           std::size_t batch_size);

struct EpochLog {
  std::size_t epoch = 0;
  double mean_loss = 0.0;
  double val_f1 = 0.0;
};

struct StepLog {
  std::size_t step = 0;
  double ce = 0.0;
  double supcon = 0.0;
  double total = 0.0;
};

struct TrainResult {
  Model<float> model;  // best-validation-F1 weights
  FeatureScaler scaler;
  double best_val_f1 = -1.0;
  std::size_t best_epoch = 0;
  std::vector<EpochLog> epochs;
  std::vector<StepLog> steps;
  ProbMatrix val_probs;
};

struct EvalResult {
  ProbMatrix probs;
  std::vector<int> labels;  // empty when the split is unlabeled
  std::optional<ConfusionMatrix> confusion;
  std::optional<F1Report> report;
};

// Eval mode (dropout off, no graph).
EvalResult evaluate(const Model<float>& model, const FeatureScaler& scaler,
                    const std::vector<Example>& examples, std::size_t batch_size,
                    const std::string& model_id);

// Mini-batch training with per-epoch validation; keeps the best-F1 weights.
// Throws NumericError naming epoch, step and loss components on a non-finite loss.
TrainResult train(const RunConfig& config, const std::vector<Example>& train_set,
                  const std::vector<Example>& val_set,
                  const std::function<void(const EpochLog&)>& on_epoch = {});

// Checkpoint archive: model parameters, "features.scaler", and metadata
// {"model": <ModelConfig>, "best_val_f1": ..., "best_epoch": ...}.
void save_checkpoint(const std::filesystem::path& path, const TrainResult& result);

struct Checkpoint {
  Model<float> model;
  FeatureScaler scaler;
};
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Writes checkpoint.pcfk, loss_log.jsonl, epochs.jsonl and val_probs.csv into `dir`.
void write_run_outputs(const std::filesystem::path& dir, const TrainResult& result);

}  // namespace cofact
