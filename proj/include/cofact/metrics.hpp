#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "cofact/labels.hpp"

namespace cofact {

// Rows are true classes, columns predicted classes.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t classes = kNumClasses);

  std::size_t classes() const { return n_; }
  std::uint64_t at(std::size_t truth, std::size_t predicted) const;
  void add(std::size_t truth, std::size_t predicted, std::uint64_t count = 1);
  std::uint64_t total() const;
  std::uint64_t support(std::size_t truth) const;       // row sum
  std::uint64_t predicted_count(std::size_t cls) const;  // column sum

  bool operator==(const ConfusionMatrix&) const = default;

 private:
  std::size_t n_;
  std::vector<std::uint64_t> counts_;
};

ConfusionMatrix confusion(std::span<const int> preds, std::span<const int> labels,
                          std::size_t classes = kNumClasses);

struct F1Report {
  double weighted = 0.0;
  std::vector<double> per_class;
  std::vector<double> precision;
  std::vector<double> recall;
  std::vector<std::uint64_t> support;
};

// Per-class F1 = 2PR/(P+R), zero whenever a denominator vanishes; averaged
// with weights proportional to true-class support.
F1Report weighted_f1(const ConfusionMatrix& cm);

// Convenience for preds/labels vectors.
double weighted_f1_score(std::span<const int> preds, std::span<const int> labels);

// Rows of "truth,pred_0..pred_k" followed by per-class precision/recall/F1.
void write_report_csv(std::ostream& out, const ConfusionMatrix& cm, const F1Report& report);
// Aligned table for the console.
void write_report_text(std::ostream& out, const ConfusionMatrix& cm, const F1Report& report);

}  // namespace cofact
