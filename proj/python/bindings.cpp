#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <json.hpp>

#include "cofact/ensemble.hpp"
#include "cofact/error.hpp"
#include "cofact/features.hpp"
#include "cofact/metrics.hpp"
#include "cofact/pipeline.hpp"

namespace py = pybind11;
namespace fs = std::filesystem;
using namespace cofact;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

ProbMatrix to_prob_matrix(const Array& a, std::size_t index) {
  if (a.ndim() != 2 || a.shape(1) != static_cast<py::ssize_t>(kNumClasses))
    throw DimensionError("probability matrix " + std::to_string(index) + " must have shape (n, 5)");
  ProbMatrix m;
  m.model_id = "m" + std::to_string(index);
  const auto n = static_cast<std::size_t>(a.shape(0));
  m.values.assign(a.data(), a.data() + n * kNumClasses);
  for (std::size_t i = 0; i < n; ++i) m.sample_ids.push_back(std::to_string(i));
  return m;
}

std::vector<ProbMatrix> to_prob_matrices(const std::vector<Array>& arrays) {
  std::vector<ProbMatrix> out;
  for (std::size_t i = 0; i < arrays.size(); ++i) out.push_back(to_prob_matrix(arrays[i], i));
  return out;
}

Array rows_to_array(const std::vector<double>& values) {
  Array out({static_cast<py::ssize_t>(values.size() / kNumClasses), static_cast<py::ssize_t>(kNumClasses)});
  std::copy(values.begin(), values.end(), out.mutable_data());
  return out;
}

py::dict spec_to_dict(const EnsembleSpec& s) {
  py::dict d;
  d["variant"] = std::string(variant_name(s.variant));
  d["weights"] = s.weights;
  d["powers"] = s.powers;
  d["f1"] = s.f1;
  return d;
}

EnsembleSpec spec_from(const std::string& variant, std::vector<double> weights, std::vector<double> powers) {
  EnsembleSpec s;
  s.variant = parse_variant(variant);
  s.weights = std::move(weights);
  s.powers = std::move(powers);
  return s;
}

py::dict report_to_dict(const ConfusionMatrix& cm, const F1Report& r) {
  std::vector<std::vector<std::uint64_t>> rows(cm.classes(), std::vector<std::uint64_t>(cm.classes()));
  for (std::size_t t = 0; t < cm.classes(); ++t)
    for (std::size_t p = 0; p < cm.classes(); ++p) rows[t][p] = cm.at(t, p);
  py::dict d;
  d["weighted_f1"] = r.weighted;
  d["per_class_f1"] = r.per_class;
  d["precision"] = r.precision;
  d["recall"] = r.recall;
  d["support"] = r.support;
  d["confusion"] = rows;
  return d;
}

RunConfig config_from(const py::dict& overrides) {
  RunConfig c;
  if (!overrides.empty()) {
    auto json_mod = py::module_::import("json");
    c.merge_json(json_mod.attr("dumps")(overrides).cast<std::string>());
  }
  c.validate();
  return c;
}

}  // namespace

PYBIND11_MODULE(_cofact, m) {
  m.doc() = "Bindings for the cofact C++ core";

  static py::exception<Error> base(m, "CofactError", PyExc_RuntimeError);
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      PyErr_SetString(base.ptr(), (std::string(e.kind()) + ": " + e.what()).c_str());
    }
  });

  m.attr("CLASS_NAMES") = [] {
    std::vector<std::string> names;
    for (std::size_t c = 0; c < kNumClasses; ++c) names.emplace_back(category_name(static_cast<int>(c)));
    return names;
  }();
  m.attr("FEATURE_WIDTH") = kFeatureWidth;

  m.def("normalize_text", [](const std::string& s) { return normalize_text(s); }, py::arg("text"));
  m.def(
      "raw_features",
      [](const std::string& claim_text, const std::string& doc_text, const std::string& claim_ocr,
         const std::string& doc_ocr) {
        RawSample s;
        s.claim_text = claim_text;
        s.doc_text = doc_text;
        s.claim_ocr = claim_ocr;
        s.doc_ocr = doc_ocr;
        const auto v = raw_features(s);
        return std::vector<double>(v.begin(), v.end());
      },
      py::arg("claim_text"), py::arg("doc_text"), py::arg("claim_ocr") = "", py::arg("doc_ocr") = "",
      "Unscaled 32-value feature vector (8 statistics per text field).");

  m.def(
      "f1_report",
      [](const std::vector<int>& preds, const std::vector<int>& labels) {
        const auto cm = confusion(preds, labels);
        return report_to_dict(cm, weighted_f1(cm));
      },
      py::arg("preds"), py::arg("labels"));

  m.def(
      "blend",
      [](const std::vector<Array>& mats, std::vector<double> weights, std::vector<double> powers,
         const std::string& variant) {
        return rows_to_array(blend(to_prob_matrices(mats), spec_from(variant, std::move(weights), std::move(powers))));
      },
      py::arg("mats"), py::arg("weights"), py::arg("powers"), py::arg("variant") = "unified",
      "Unnormalized scores sum_m w_m * clamp(P_m)^N_m, shape (n, 5).");

  m.def(
      "tune",
      [](const std::vector<Array>& mats, const std::vector<int>& labels, const std::string& variant,
         std::size_t budget, std::size_t refine_steps, std::uint64_t seed) {
        TuneOptions opt;
        opt.budget = budget;
        opt.refine_steps = refine_steps;
        opt.seed = seed;
        return spec_to_dict(tune(to_prob_matrices(mats), labels, parse_variant(variant), opt));
      },
      py::arg("mats"), py::arg("labels"), py::arg("variant") = "unified", py::arg("budget") = 200000,
      py::arg("refine_steps") = 2000, py::arg("seed") = 42);

  m.def("default_config", [] { return nlohmann::json::parse(RunConfig{}.to_json()).dump(); },
        "Default run configuration as a JSON string.");

  m.def(
      "synthesize",
      [](const fs::path& out, std::size_t n_per_class, std::size_t val_per_class, std::size_t backbone_dim,
         std::uint64_t seed) {
        SynthOptions o;
        o.train_per_class = n_per_class;
        o.val_per_class = val_per_class;
        o.backbone_dim = backbone_dim;
        o.seed = seed;
        const auto data = synthesize(o);
        write_split(out, "train", data.train);
        write_split(out, "val", data.val);
        return py::make_tuple((out / "train.jsonl").string(), (out / "val.jsonl").string());
      },
      py::arg("out"), py::arg("n_per_class") = 100, py::arg("val_per_class") = 20, py::arg("backbone_dim") = 32,
      py::arg("seed") = 42, "Writes train/val manifests and embeddings; returns the two manifest paths.");

  m.def(
      "train",
      [](const fs::path& train_manifest, const fs::path& val_manifest, const fs::path& output_dir,
         const py::dict& config) {
        const RunConfig c = config_from(config);
        TrainResult result;
        {
          const auto train_set = ingest(read_manifest(train_manifest), c.max_seq_len);
          const auto val_set = val_manifest.empty() ? std::vector<Example>{}
                                                    : ingest(read_manifest(val_manifest), c.max_seq_len);
          py::gil_scoped_release release;
          result = train(c, train_set, val_set);
        }
        write_run_outputs(output_dir, result);
        std::vector<double> epoch_f1, epoch_loss;
        for (const auto& e : result.epochs) {
          epoch_f1.push_back(e.val_f1);
          epoch_loss.push_back(e.mean_loss);
        }
        py::dict d;
        d["best_val_f1"] = result.best_val_f1;
        d["best_epoch"] = result.best_epoch;
        d["val_f1"] = epoch_f1;
        d["mean_loss"] = epoch_loss;
        d["checkpoint"] = (output_dir / "checkpoint.pcfk").string();
        return d;
      },
      py::arg("train_manifest"), py::arg("val_manifest"), py::arg("output_dir"), py::arg("config") = py::dict(),
      "Trains with RunConfig defaults overridden by `config`; writes the run outputs into output_dir.");

  m.def(
      "evaluate",
      [](const fs::path& checkpoint, const fs::path& manifest, std::size_t batch_size, std::size_t max_seq_len) {
        const auto ck = load_checkpoint(checkpoint);
        const auto examples = ingest(read_manifest(manifest), max_seq_len);
        const auto r = evaluate(ck.model, ck.scaler, examples, batch_size, checkpoint.stem().string());
        py::dict d;
        d["probs"] = rows_to_array(r.probs.values);
        d["sample_ids"] = r.probs.sample_ids;
        if (r.report) d["report"] = report_to_dict(*r.confusion, *r.report);
        return d;
      },
      py::arg("checkpoint"), py::arg("manifest"), py::arg("batch_size") = 24, py::arg("max_seq_len") = 512);
}
