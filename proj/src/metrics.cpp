#include "cofact/metrics.hpp"

#include <algorithm>
#include <iomanip>
#include <ostream>

#include "cofact/error.hpp"

namespace cofact {

ConfusionMatrix::ConfusionMatrix(std::size_t classes) : n_(classes), counts_(classes * classes, 0) {
  if (classes == 0) throw ValueError("confusion matrix needs at least one class");
}

std::uint64_t ConfusionMatrix::at(std::size_t truth, std::size_t predicted) const {
  if (truth >= n_ || predicted >= n_) throw ValueError("confusion index out of range");
  return counts_[truth * n_ + predicted];
}

void ConfusionMatrix::add(std::size_t truth, std::size_t predicted, std::uint64_t count) {
  if (truth >= n_ || predicted >= n_)
    throw ValueError("class pair (" + std::to_string(truth) + ", " + std::to_string(predicted) +
                     ") outside 0.." + std::to_string(n_ - 1));
  counts_[truth * n_ + predicted] += count;
}

std::uint64_t ConfusionMatrix::total() const {
  std::uint64_t t = 0;
  for (auto c : counts_) t += c;
  return t;
}

std::uint64_t ConfusionMatrix::support(std::size_t truth) const {
  std::uint64_t t = 0;
  for (std::size_t j = 0; j < n_; ++j) t += at(truth, j);
  return t;
}

std::uint64_t ConfusionMatrix::predicted_count(std::size_t cls) const {
  std::uint64_t t = 0;
  for (std::size_t i = 0; i < n_; ++i) t += at(i, cls);
  return t;
}

ConfusionMatrix confusion(std::span<const int> preds, std::span<const int> labels,
                          std::size_t classes) {
  if (preds.size() != labels.size())
    throw DimensionError("confusion: " + std::to_string(preds.size()) + " predictions vs " +
                         std::to_string(labels.size()) + " labels");
  ConfusionMatrix cm(classes);
  const int n = static_cast<int>(classes);
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (preds[i] < 0 || preds[i] >= n || labels[i] < 0 || labels[i] >= n)
      throw ValueError("confusion: class out of range at position " + std::to_string(i) + " (pred " +
                       std::to_string(preds[i]) + ", label " + std::to_string(labels[i]) + ")");
    cm.add(static_cast<std::size_t>(labels[i]), static_cast<std::size_t>(preds[i]));
  }
  return cm;
}

F1Report weighted_f1(const ConfusionMatrix& cm) {
  const std::uint64_t total = cm.total();
  if (total == 0) throw ValueError("weighted_f1 of an empty confusion matrix");
  const std::size_t n = cm.classes();
  F1Report r;
  r.per_class.assign(n, 0.0);
  r.precision.assign(n, 0.0);
  r.recall.assign(n, 0.0);
  r.support.assign(n, 0);
  for (std::size_t c = 0; c < n; ++c) {
    const double tp = static_cast<double>(cm.at(c, c));
    const std::uint64_t support = cm.support(c);
    const std::uint64_t predicted = cm.predicted_count(c);
    r.support[c] = support;
    const double p = predicted ? tp / static_cast<double>(predicted) : 0.0;
    const double rc = support ? tp / static_cast<double>(support) : 0.0;
    r.precision[c] = p;
    r.recall[c] = rc;
    r.per_class[c] = (p + rc) > 0.0 ? 2.0 * p * rc / (p + rc) : 0.0;
    r.weighted += r.per_class[c] * static_cast<double>(support);
  }
  r.weighted /= static_cast<double>(total);
  return r;
}

double weighted_f1_score(std::span<const int> preds, std::span<const int> labels) {
  return weighted_f1(confusion(preds, labels)).weighted;
}

namespace {

std::string class_label(std::size_t c, std::size_t n) {
  return n == kNumClasses ? std::string(category_name(static_cast<int>(c))) : std::to_string(c);
}

}  // namespace

void write_report_csv(std::ostream& out, const ConfusionMatrix& cm, const F1Report& report) {
  const std::size_t n = cm.classes();
  out << "truth";
  for (std::size_t j = 0; j < n; ++j) out << ",pred_" << class_label(j, n);
  out << '\n';
  for (std::size_t i = 0; i < n; ++i) {
    out << class_label(i, n);
    for (std::size_t j = 0; j < n; ++j) out << ',' << cm.at(i, j);
    out << '\n';
  }
  out << "class,precision,recall,f1,support\n" << std::setprecision(6) << std::fixed;
  for (std::size_t c = 0; c < n; ++c)
    out << class_label(c, n) << ',' << report.precision[c] << ',' << report.recall[c] << ','
        << report.per_class[c] << ',' << report.support[c] << '\n';
  out << "weighted,,," << report.weighted << ',' << cm.total() << '\n';
  out.unsetf(std::ios::floatfield);
}

void write_report_text(std::ostream& out, const ConfusionMatrix& cm, const F1Report& report) {
  const std::size_t n = cm.classes();
  std::size_t name_w = 8;
  for (std::size_t c = 0; c < n; ++c) name_w = std::max(name_w, class_label(c, n).size());
  const int w = static_cast<int>(name_w) + 2;
  out << std::left << std::setw(w) << "truth\\pred";
  for (std::size_t j = 0; j < n; ++j) out << std::right << std::setw(7) << j;
  out << '\n';
  for (std::size_t i = 0; i < n; ++i) {
    out << std::left << std::setw(w) << class_label(i, n);
    for (std::size_t j = 0; j < n; ++j) out << std::right << std::setw(7) << cm.at(i, j);
    out << '\n';
  }
  out << '\n'
      << std::left << std::setw(w) << "class" << std::right << std::setw(10) << "precision"
      << std::setw(10) << "recall" << std::setw(10) << "f1" << std::setw(10) << "support" << '\n'
      << std::fixed << std::setprecision(4);
  for (std::size_t c = 0; c < n; ++c)
    out << std::left << std::setw(w) << class_label(c, n) << std::right << std::setw(10)
        << report.precision[c] << std::setw(10) << report.recall[c] << std::setw(10)
        << report.per_class[c] << std::setw(10) << report.support[c] << '\n';
  out << std::left << std::setw(w) << "weighted" << std::right << std::setw(30) << report.weighted
      << std::setw(10) << cm.total() << '\n';
  out.unsetf(std::ios::floatfield);
  out << std::setprecision(6);
}

}  // namespace cofact
