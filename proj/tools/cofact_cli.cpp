// cofact: command-line front end for data synthesis, feature extraction,
// training, evaluation and ensembling.

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>

#include "cofact/error.hpp"
#include "cofact/pipeline.hpp"
#include "cofact/tensor_io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void fail(const std::string& kind, const std::string& message) {
  std::cerr << json{{"error", kind}, {"message", message}}.dump() << std::endl;
}

// RunConfig fields exposed as flags. Values are collected as text and merged
// through RunConfig::merge_json so the flag and file paths share validation.
enum class Kind { kInt, kReal, kBool, kText };

struct RunFlags {
  std::string config_path;
  std::map<std::string, std::pair<Kind, std::string>> values;
  std::map<std::string, CLI::Option*> options;

  void attach(CLI::App& app) {
    app.add_option("--config", config_path, "JSON run config; flags given on the command line win")
        ->check(CLI::ExistingFile);
    const std::vector<std::tuple<std::string, Kind, std::string>> fields = {
        {"d", Kind::kInt, "fusion width"},
        {"ff_inner", Kind::kInt, "co-attention FFN inner width"},
        {"heads", Kind::kInt, "attention heads"},
        {"d_m", Kind::kInt, "classifier hidden width"},
        {"dropout", Kind::kReal, "dropout probability"},
        {"max_seq_len", Kind::kInt, "sequence truncation length"},
        {"batch_size", Kind::kInt, "mini-batch size"},
        {"learning_rate", Kind::kReal, "learning rate of newly initialized modules"},
        {"backbone_learning_rate", Kind::kReal, "learning rate of the adapter and backbone tail"},
        {"epochs", Kind::kInt, "training epochs"},
        {"seed", Kind::kInt, "run seed"},
        {"alpha", Kind::kReal, "cross-entropy weight in the total loss"},
        {"tau", Kind::kReal, "contrastive temperature"},
        {"aggregation", Kind::kText, "mean | mean_max_last"},
        {"adapter_scope", Kind::kText, "frozen | adapter_only | all"},
        {"paper_exact_scaling", Kind::kBool, "scale attention scores by 1/sqrt(d)"},
        {"adapter_on_text", Kind::kBool, "add an adapter tail to the text streams"},
        {"use_features", Kind::kBool, "append the 32 text statistics"},
        {"text_only", Kind::kBool, "text-stream ablation"},
        {"train_manifest", Kind::kText, "training manifest"},
        {"val_manifest", Kind::kText, "validation manifest"},
        {"output_dir", Kind::kText, "run output directory"},
    };
    for (const auto& [key, kind, help] : fields) {
      std::string flag = "--" + key;
      std::replace(flag.begin(), flag.end(), '_', '-');
      values[key] = {kind, ""};
      options[key] = app.add_option(flag, values[key].second, help);
    }
  }

  cofact::RunConfig resolve(bool check = true) const {
    cofact::RunConfig c;
    if (!config_path.empty()) c = cofact::RunConfig::load(config_path);
    json patch = json::object();
    for (const auto& [key, entry] : values) {
      if (options.at(key)->count() == 0) continue;
      const auto& [kind, text] = entry;
      try {
        switch (kind) {
          case Kind::kInt: patch[key] = std::stoull(text); break;
          case Kind::kReal: patch[key] = std::stod(text); break;
          case Kind::kBool:
            if (text != "true" && text != "false" && text != "1" && text != "0")
              throw cofact::ValueError("--" + key + " expects true or false");
            patch[key] = text == "true" || text == "1";
            break;
          case Kind::kText: patch[key] = text; break;
        }
      } catch (const std::logic_error&) {
        throw cofact::ValueError("bad value '" + text + "' for " + key);
      }
    }
    c.merge_json(patch.dump());
    if (check) c.validate();
    return c;
  }
};

std::vector<cofact::Example> load_split(const std::string& manifest, std::size_t max_seq_len) {
  return cofact::ingest(cofact::read_manifest(manifest), max_seq_len);
}

void print_report(const cofact::EvalResult& r) {
  if (!r.report) return;
  cofact::write_report_text(std::cout, *r.confusion, *r.report);
}

std::vector<int> labels_for(const cofact::ProbMatrix& m, const std::string& manifest_path) {
  auto manifest = cofact::read_manifest(manifest_path);
  std::map<std::string, int> by_id;
  for (const auto& r : manifest.records) {
    if (!r.label) throw cofact::ValueError("manifest sample " + r.id + " has no label");
    by_id[r.id] = *r.label;
  }
  std::vector<int> labels;
  for (const auto& id : m.sample_ids) {
    auto it = by_id.find(id);
    if (it == by_id.end()) throw cofact::ValueError("sample " + id + " is not in " + manifest_path);
    labels.push_back(it->second);
  }
  return labels;
}

void write_scores(std::ostream& out, const cofact::ProbMatrix& ref, const std::vector<double>& scores) {
  out << "sample_id,s0,s1,s2,s3,s4,prediction\n";
  const auto preds = cofact::argmax_rows(scores);
  for (std::size_t i = 0; i < ref.rows(); ++i) {
    out << ref.sample_ids[i];
    for (std::size_t c = 0; c < cofact::kNumClasses; ++c) out << ',' << scores[i * cofact::kNumClasses + c];
    out << ',' << cofact::category_name(preds[i]) << '\n';
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multimodal claim/document classifier toolkit"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "Generate a synthetic labelled dataset");
  cofact::SynthOptions synth_opt;
  std::string synth_out;
  synth->add_option("--out", synth_out, "output directory")->required();
  synth->add_option("--n-per-class", synth_opt.train_per_class, "training samples per class");
  synth->add_option("--val-per-class", synth_opt.val_per_class, "validation samples per class");
  synth->add_option("--backbone-dim", synth_opt.backbone_dim, "embedding width");
  synth->add_option("--latent-dim", synth_opt.latent_dim, "latent topic width");
  synth->add_option("--topics", synth_opt.topics, "number of latent topics");
  synth->add_option("--latent-noise", synth_opt.latent_noise, "per-sample latent jitter");
  synth->add_option("--token-noise", synth_opt.token_noise, "per-token jitter");
  synth->add_option("--seed", synth_opt.seed, "generator seed");

  // extract-features
  auto* feats = app.add_subcommand("extract-features", "Compute the 32 text statistics of a manifest");
  std::string feat_manifest, feat_out, feat_checkpoint;
  bool feat_csv = false;
  feats->add_option("--manifest", feat_manifest, "input manifest")->required();
  feats->add_option("--out", feat_out, "output tensor file ([n×32])")->required();
  feats->add_option("--checkpoint", feat_checkpoint, "apply the scaler stored in this checkpoint");
  feats->add_flag("--csv", feat_csv, "write CSV instead of a tensor file");

  // train
  auto* train = app.add_subcommand("train", "Train a model");
  RunFlags train_flags;
  train_flags.attach(*train);

  // evaluate
  auto* eval = app.add_subcommand("evaluate", "Evaluate a checkpoint on a manifest");
  std::string eval_ckpt, eval_manifest, eval_probs, eval_report, eval_id = "model";
  std::size_t eval_batch = 24, eval_max_len = 512;
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint archive")->required();
  eval->add_option("--manifest", eval_manifest, "manifest to score")->required();
  eval->add_option("--probs-out", eval_probs, "write the probability matrix here");
  eval->add_option("--report-out", eval_report, "write the confusion/F1 report CSV here");
  eval->add_option("--model-id", eval_id, "model id recorded in the probability matrix");
  eval->add_option("--batch-size", eval_batch, "evaluation batch size");
  eval->add_option("--max-seq-len", eval_max_len, "sequence truncation length");

  // ensemble
  auto* ens = app.add_subcommand("ensemble", "Blend or tune probability-matrix ensembles");
  ens->require_subcommand(1);
  auto* blend = ens->add_subcommand("blend", "Blend probability matrices with a spec");
  std::vector<std::string> blend_probs;
  std::string blend_spec, blend_out, blend_manifest;
  blend->add_option("--probs", blend_probs, "probability matrices")->required();
  blend->add_option("--spec", blend_spec, "ensemble spec file (default: average)");
  blend->add_option("--out", blend_out, "write blended scores and predictions here");
  blend->add_option("--manifest", blend_manifest, "labelled manifest for a report");

  auto* tune = ens->add_subcommand("tune", "Search ensemble weights and powers on a labelled split");
  std::vector<std::string> tune_probs;
  std::string tune_manifest, tune_out, tune_variant = "unified";
  cofact::TuneOptions tune_opt;
  tune->add_option("--probs", tune_probs, "probability matrices")->required();
  tune->add_option("--manifest", tune_manifest, "labelled manifest")->required();
  tune->add_option("--variant", tune_variant, "average | weighted | power | unified");
  tune->add_option("--budget", tune_opt.budget, "maximum candidate evaluations");
  tune->add_option("--refine-steps", tune_opt.refine_steps, "random refinement steps");
  tune->add_option("--seed", tune_opt.seed, "search seed");
  tune->add_option("--out", tune_out, "spec output file");

  // print-config
  auto* print = app.add_subcommand("print-config", "Print the resolved run configuration");
  RunFlags print_flags;
  print_flags.attach(*print);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    fail("usage", e.what());
    return 2;
  }

  try {
    if (*synth) {
      auto data = cofact::synthesize(synth_opt);
      cofact::write_split(synth_out, "train", data.train);
      cofact::write_split(synth_out, "val", data.val);
      std::cout << json{{"train", (fs::path(synth_out) / "train.jsonl").string()},
                        {"val", (fs::path(synth_out) / "val.jsonl").string()},
                        {"train_samples", data.train.size()},
                        {"val_samples", data.val.size()}}
                       .dump()
                << std::endl;
    } else if (*feats) {
      auto manifest = cofact::read_manifest(feat_manifest);
      std::optional<cofact::FeatureScaler> scaler;
      if (!feat_checkpoint.empty()) scaler = cofact::load_checkpoint(feat_checkpoint).scaler;
      std::vector<float> values;
      for (const auto& r : manifest.records) {
        const auto v = scaler ? cofact::extract(r, *scaler) : cofact::raw_features(r);
        values.insert(values.end(), v.begin(), v.end());
      }
      const std::size_t n = manifest.records.size();
      if (feat_csv) {
        std::ofstream out(feat_out);
        if (!out) throw cofact::IoError("cannot write " + feat_out);
        out << "sample_id";
        for (std::size_t k = 0; k < cofact::kFeatureWidth; ++k) out << ",f" << k;
        out << '\n';
        for (std::size_t i = 0; i < n; ++i) {
          out << manifest.records[i].id;
          for (std::size_t k = 0; k < cofact::kFeatureWidth; ++k) out << ',' << values[i * cofact::kFeatureWidth + k];
          out << '\n';
        }
      } else {
        cofact::save_tensor(feat_out, cofact::Tensor::constant({n, cofact::kFeatureWidth}, std::move(values)));
      }
      std::cout << json{{"samples", n}, {"width", cofact::kFeatureWidth}, {"out", feat_out}}.dump() << std::endl;
    } else if (*train) {
      auto config = train_flags.resolve();
      if (config.train_manifest.empty()) throw cofact::ValueError("--train-manifest is required");
      if (config.output_dir.empty()) throw cofact::ValueError("--output-dir is required");
      auto train_set = load_split(config.train_manifest, config.max_seq_len);
      std::vector<cofact::Example> val_set;
      if (!config.val_manifest.empty()) val_set = load_split(config.val_manifest, config.max_seq_len);
      auto result = cofact::train(config, train_set, val_set, [](const cofact::EpochLog& log) {
        std::cerr << json{{"epoch", log.epoch}, {"mean_loss", log.mean_loss}, {"val_f1", log.val_f1}}.dump()
                  << std::endl;
      });
      result.val_probs.model_id = "seed" + std::to_string(config.seed);
      cofact::write_run_outputs(config.output_dir, result);
      {
        std::ofstream cfg(fs::path(config.output_dir) / "run_config.json");
        cfg << config.to_json() << '\n';
      }
      std::cout << json{{"checkpoint", (fs::path(config.output_dir) / "checkpoint.pcfk").string()},
                        {"best_val_f1", result.best_val_f1},
                        {"best_epoch", result.best_epoch}}
                       .dump()
                << std::endl;
    } else if (*eval) {
      auto ckpt = cofact::load_checkpoint(eval_ckpt);
      auto examples = load_split(eval_manifest, eval_max_len);
      auto r = cofact::evaluate(ckpt.model, ckpt.scaler, examples, eval_batch, eval_id);
      if (!eval_probs.empty()) cofact::save_prob_matrix(eval_probs, r.probs);
      if (!eval_report.empty() && r.report) {
        std::ofstream out(eval_report);
        if (!out) throw cofact::IoError("cannot write " + eval_report);
        cofact::write_report_csv(out, *r.confusion, *r.report);
      }
      print_report(r);
      json summary = {{"samples", r.probs.rows()}};
      if (r.report) summary["weighted_f1"] = r.report->weighted;
      std::cout << summary.dump() << std::endl;
    } else if (*blend) {
      std::vector<cofact::ProbMatrix> mats;
      for (const auto& p : blend_probs) mats.push_back(cofact::load_prob_matrix(p));
      auto spec = blend_spec.empty() ? cofact::EnsembleSpec::average(mats.size()) : cofact::load_spec(blend_spec);
      auto scores = cofact::blend(mats, spec);
      if (!blend_out.empty()) {
        std::ofstream out(blend_out);
        if (!out) throw cofact::IoError("cannot write " + blend_out);
        write_scores(out, mats[0], scores);
      }
      json summary = {{"samples", mats[0].rows()}, {"variant", std::string(cofact::variant_name(spec.variant))}};
      if (!blend_manifest.empty()) {
        auto labels = labels_for(mats[0], blend_manifest);
        auto cm = cofact::confusion(cofact::argmax_rows(scores), labels);
        auto report = cofact::weighted_f1(cm);
        cofact::write_report_text(std::cout, cm, report);
        summary["weighted_f1"] = report.weighted;
      }
      std::cout << summary.dump() << std::endl;
    } else if (*tune) {
      std::vector<cofact::ProbMatrix> mats;
      for (const auto& p : tune_probs) mats.push_back(cofact::load_prob_matrix(p));
      auto labels = labels_for(mats[0], tune_manifest);
      auto spec = cofact::tune(mats, labels, cofact::parse_variant(tune_variant), tune_opt);
      if (!tune_out.empty()) cofact::save_spec(tune_out, spec);
      cofact::write_spec(std::cout, spec);
    } else if (*print) {
      // Printed even when not trainable: the defaults must be auditable as-is.
      const auto config = print_flags.resolve(false);
      std::cout << config.to_json() << std::endl;
      try {
        config.validate();
      } catch (const cofact::Error& e) {
        std::cerr << "warning: " << e.what() << std::endl;
      }
    }
  } catch (const cofact::Error& e) {
    fail(e.kind(), e.what());
    return 1;
  } catch (const std::exception& e) {
    fail("internal", e.what());
    return 1;
  }
  return 0;
}
