#pragma once

#include <cstdint>
#include <iosfwd>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cofact/labels.hpp"

namespace cofact {

// One model's per-sample class probabilities, row-major [samples×5].
struct ProbMatrix {
  std::string model_id;
  std::vector<std::string> sample_ids;
  std::vector<double> values;

  std::size_t rows() const { return sample_ids.size(); }
  std::span<const double> row(std::size_t i) const;
  // Throws ValueError when a row is not a distribution (sum 1 ± 1e-4, entries in [0, 1]).
  void validate() const;
  std::vector<int> argmax() const;
};

// First line "<model_id>,<n_samples>", then "sample_id,p0,p1,p2,p3,p4" per sample.
void write_prob_matrix(std::ostream& out, const ProbMatrix& m);
ProbMatrix read_prob_matrix(std::istream& in);
void save_prob_matrix(const std::string& path, const ProbMatrix& m);
ProbMatrix load_prob_matrix(const std::string& path);

enum class EnsembleVariant { kAverage, kWeighted, kPower, kUnified };
std::string_view variant_name(EnsembleVariant v);
EnsembleVariant parse_variant(std::string_view name);

struct EnsembleSpec {
  EnsembleVariant variant = EnsembleVariant::kUnified;
  std::vector<double> weights;
  std::vector<double> powers;
  double f1 = std::numeric_limits<double>::quiet_NaN();  // validation score when tuned

  std::size_t models() const { return weights.size(); }
  // Checks positivity, arity, and the variant restrictions: average has equal
  // weights and unit powers, weighted has unit powers, power has one shared power.
  void validate() const;

  static EnsembleSpec average(std::size_t models);
};

// Flat key=value text: variant, weights, powers (comma-separated), optional f1.
void write_spec(std::ostream& out, const EnsembleSpec& spec);
EnsembleSpec read_spec(std::istream& in);
void save_spec(const std::string& path, const EnsembleSpec& spec);
EnsembleSpec load_spec(const std::string& path);

// Scores [samples×5] = sum_m w_m · clamp(P_m, 1e-12, 1)^N_m; not renormalized.
std::vector<double> blend(std::span<const ProbMatrix> mats, const EnsembleSpec& spec);
std::vector<int> argmax_rows(std::span<const double> scores);

struct TuneOptions {
  std::size_t budget = 200000;      // maximum number of candidate evaluations
  std::size_t refine_steps = 2000;  // random refinement after the grid, within budget
  std::uint64_t seed = 42;
};

// Maximizes weighted F1 over the variant's search space. Grid: weights in
// {0.1, ..., 1.0}, powers in {0.125, 0.25, 0.5, 1, 2}. When the grid exceeds the
// budget a seeded sample of it is used instead. The unified search also scores
// the best reduced-variant specs so it never falls below them; weighted and
// unified also try each single model at full weight with the rest negligible.
EnsembleSpec tune(std::span<const ProbMatrix> mats, std::span<const int> labels,
                  EnsembleVariant variant, const TuneOptions& options = {});

}  // namespace cofact
