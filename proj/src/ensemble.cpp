#include "cofact/ensemble.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "cofact/error.hpp"
#include "cofact/metrics.hpp"
#include "cofact/random.hpp"

namespace cofact {

namespace {

constexpr double kProbFloor = 1e-12;
constexpr double kRowTolerance = 1e-4;
constexpr std::array<double, 5> kPowerGrid = {0.125, 0.25, 0.5, 1.0, 2.0};
constexpr std::size_t kWeightSteps = 10;  // 0.1 .. 1.0

double weight_at(std::size_t i) { return static_cast<double>(i + 1) / 10.0; }

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    out.push_back(trim(s.substr(start, pos == std::string_view::npos ? s.size() - start : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

double parse_double(const std::string& text, const std::string& what) {
  double v = 0.0;
  const auto* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || ptr != end || text.empty())
    throw FormatError(what + ": '" + text + "' is not a number");
  return v;
}

std::string format_double(double v) {
  char buf[32];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

void check_aligned(std::span<const ProbMatrix> mats) {
  if (mats.empty()) throw ValueError("ensemble needs at least one probability matrix");
  for (const auto& m : mats) {
    if (m.values.size() != m.rows() * kNumClasses)
      throw DimensionError("probability matrix '" + m.model_id + "' has " +
                           std::to_string(m.values.size()) + " values for " +
                           std::to_string(m.rows()) + " rows");
    if (m.rows() != mats[0].rows())
      throw DimensionError("misaligned probability matrices: '" + mats[0].model_id + "' has " +
                           std::to_string(mats[0].rows()) + " rows, '" + m.model_id + "' has " +
                           std::to_string(m.rows()));
    if (m.sample_ids != mats[0].sample_ids)
      throw DimensionError("probability matrices '" + mats[0].model_id + "' and '" + m.model_id +
                           "' list samples in different order");
  }
}

}  // namespace

std::span<const double> ProbMatrix::row(std::size_t i) const {
  return std::span<const double>(values).subspan(i * kNumClasses, kNumClasses);
}

void ProbMatrix::validate() const {
  if (values.size() != rows() * kNumClasses)
    throw DimensionError("probability matrix '" + model_id + "' is not [" +
                         std::to_string(rows()) + "×5]");
  for (std::size_t i = 0; i < rows(); ++i) {
    double sum = 0.0;
    for (double p : row(i)) {
      if (!(p >= 0.0 && p <= 1.0))
        throw ValueError("probability matrix '" + model_id + "' row " + sample_ids[i] +
                         " has entry outside [0, 1]");
      sum += p;
    }
    if (std::abs(sum - 1.0) > kRowTolerance)
      throw ValueError("probability matrix '" + model_id + "' row " + sample_ids[i] + " sums to " +
                       format_double(sum));
  }
}

std::vector<int> ProbMatrix::argmax() const { return argmax_rows(values); }

void write_prob_matrix(std::ostream& out, const ProbMatrix& m) {
  out << m.model_id << ',' << m.rows() << '\n';
  for (std::size_t i = 0; i < m.rows(); ++i) {
    out << m.sample_ids[i];
    for (double p : m.row(i)) out << ',' << format_double(p);
    out << '\n';
  }
}

ProbMatrix read_prob_matrix(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw FormatError("probability matrix: missing header line");
  auto header = split(line, ',');
  if (header.size() != 2) throw FormatError("probability matrix header must be 'model_id,n_samples'");
  ProbMatrix m;
  m.model_id = header[0];
  const double n = parse_double(header[1], "probability matrix sample count");
  if (n < 0 || n != std::floor(n)) throw FormatError("probability matrix: bad sample count");
  const auto rows = static_cast<std::size_t>(n);
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    auto cells = split(line, ',');
    if (cells.size() != 1 + kNumClasses)
      throw FormatError("probability matrix line " + std::to_string(line_no) + ": expected 6 fields");
    m.sample_ids.push_back(cells[0]);
    for (std::size_t c = 0; c < kNumClasses; ++c)
      m.values.push_back(parse_double(cells[1 + c], "probability matrix line " + std::to_string(line_no)));
  }
  if (m.rows() != rows)
    throw FormatError("probability matrix '" + m.model_id + "' declares " + std::to_string(rows) +
                      " samples but has " + std::to_string(m.rows()));
  m.validate();
  return m;
}

void save_prob_matrix(const std::string& path, const ProbMatrix& m) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  write_prob_matrix(out, m);
  if (!out) throw IoError("write failed for " + path);
}

ProbMatrix load_prob_matrix(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  return read_prob_matrix(in);
}

std::string_view variant_name(EnsembleVariant v) {
  switch (v) {
    case EnsembleVariant::kAverage: return "average";
    case EnsembleVariant::kWeighted: return "weighted";
    case EnsembleVariant::kPower: return "power";
    case EnsembleVariant::kUnified: return "unified";
  }
  return "?";
}

EnsembleVariant parse_variant(std::string_view name) {
  for (auto v : {EnsembleVariant::kAverage, EnsembleVariant::kWeighted, EnsembleVariant::kPower,
                 EnsembleVariant::kUnified})
    if (variant_name(v) == name) return v;
  throw ValueError("unknown ensemble variant '" + std::string(name) +
                   "' (expected average, weighted, power or unified)");
}

void EnsembleSpec::validate() const {
  if (weights.empty()) throw ValueError("ensemble spec has no models");
  if (powers.size() != weights.size())
    throw ValueError("ensemble spec has " + std::to_string(weights.size()) + " weights but " +
                     std::to_string(powers.size()) + " powers");
  for (double w : weights)
    if (!(w > 0.0) || !std::isfinite(w)) throw ValueError("ensemble weights must be positive");
  for (double n : powers)
    if (!(n > 0.0) || !std::isfinite(n)) throw ValueError("ensemble powers must be positive");
  auto all_equal = [](const std::vector<double>& v) {
    return std::all_of(v.begin(), v.end(), [&](double x) { return x == v[0]; });
  };
  auto all_one = [](const std::vector<double>& v) {
    return std::all_of(v.begin(), v.end(), [](double x) { return x == 1.0; });
  };
  switch (variant) {
    case EnsembleVariant::kAverage:
      if (!all_equal(weights) || !all_one(powers))
        throw ValueError("average ensemble requires equal weights and unit powers");
      break;
    case EnsembleVariant::kWeighted:
      if (!all_one(powers)) throw ValueError("weighted ensemble requires unit powers");
      break;
    case EnsembleVariant::kPower:
      if (!all_equal(powers)) throw ValueError("power ensemble requires one shared power");
      break;
    case EnsembleVariant::kUnified: break;
  }
}

EnsembleSpec EnsembleSpec::average(std::size_t models) {
  if (models == 0) throw ValueError("ensemble needs at least one model");
  EnsembleSpec s;
  s.variant = EnsembleVariant::kAverage;
  s.weights.assign(models, 1.0 / static_cast<double>(models));
  s.powers.assign(models, 1.0);
  return s;
}

void write_spec(std::ostream& out, const EnsembleSpec& spec) {
  auto join = [](const std::vector<double>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + format_double(v[i]);
    return s;
  };
  out << "variant=" << variant_name(spec.variant) << '\n'
      << "models=" << spec.models() << '\n'
      << "weights=" << join(spec.weights) << '\n'
      << "powers=" << join(spec.powers) << '\n';
  if (!std::isnan(spec.f1)) out << "f1=" << format_double(spec.f1) << '\n';
}

EnsembleSpec read_spec(std::istream& in) {
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(in, line)) {
    const auto t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw FormatError("ensemble spec line without '=': " + t);
    kv[trim(std::string_view(t).substr(0, eq))] = trim(std::string_view(t).substr(eq + 1));
  }
  auto need = [&kv](const std::string& key) -> const std::string& {
    auto it = kv.find(key);
    if (it == kv.end()) throw FormatError("ensemble spec is missing '" + key + "'");
    return it->second;
  };
  auto numbers = [](const std::string& text, const std::string& key) {
    std::vector<double> v;
    for (const auto& cell : split(text, ',')) v.push_back(parse_double(cell, "ensemble spec " + key));
    return v;
  };
  EnsembleSpec s;
  s.variant = parse_variant(need("variant"));
  s.weights = numbers(need("weights"), "weights");
  s.powers = numbers(need("powers"), "powers");
  if (kv.count("models") &&
      parse_double(kv["models"], "ensemble spec models") != static_cast<double>(s.models()))
    throw FormatError("ensemble spec 'models' disagrees with the weight count");
  if (kv.count("f1")) s.f1 = parse_double(kv["f1"], "ensemble spec f1");
  s.validate();
  return s;
}

void save_spec(const std::string& path, const EnsembleSpec& spec) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  write_spec(out, spec);
}

EnsembleSpec load_spec(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  return read_spec(in);
}

std::vector<double> blend(std::span<const ProbMatrix> mats, const EnsembleSpec& spec) {
  check_aligned(mats);
  spec.validate();
  if (spec.models() != mats.size())
    throw DimensionError("ensemble spec covers " + std::to_string(spec.models()) +
                         " models but " + std::to_string(mats.size()) + " matrices were given");
  std::vector<double> scores(mats[0].values.size(), 0.0);
  for (std::size_t m = 0; m < mats.size(); ++m) {
    const double w = spec.weights[m], n = spec.powers[m];
    const auto& v = mats[m].values;
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double p = std::clamp(v[i], kProbFloor, 1.0);
      scores[i] += w * (n == 1.0 ? p : std::pow(p, n));
    }
  }
  return scores;
}

std::vector<int> argmax_rows(std::span<const double> scores) {
  if (scores.size() % kNumClasses != 0) throw DimensionError("score matrix is not [n×5]");
  std::vector<int> out(scores.size() / kNumClasses);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const auto r = scores.subspan(i * kNumClasses, kNumClasses);
    out[i] = static_cast<int>(std::max_element(r.begin(), r.end()) - r.begin());
  }
  return out;
}

namespace {

constexpr double kNegligibleWeight = 1e-9;

// Candidate evaluation with the powered matrices cached per exponent.
class Scorer {
 public:
  Scorer(std::span<const ProbMatrix> mats, std::span<const int> labels)
      : mats_(mats), labels_(labels), scores_(mats[0].values.size()), preds_(labels.size()) {}

  double f1(const std::vector<double>& weights, const std::vector<double>& powers) {
    std::fill(scores_.begin(), scores_.end(), 0.0);
    for (std::size_t m = 0; m < mats_.size(); ++m) {
      const auto& p = powered(m, powers[m]);
      const double w = weights[m];
      for (std::size_t i = 0; i < p.size(); ++i) scores_[i] += w * p[i];
    }
    for (std::size_t i = 0; i < preds_.size(); ++i) {
      const double* r = scores_.data() + i * kNumClasses;
      preds_[i] = static_cast<int>(std::max_element(r, r + kNumClasses) - r);
    }
    ++evaluations;
    return weighted_f1(confusion(preds_, labels_)).weighted;
  }

  std::size_t evaluations = 0;

 private:
  const std::vector<double>& powered(std::size_t m, double n) {
    auto& cache = cache_[{m, n}];
    if (cache.empty()) {
      const auto& v = mats_[m].values;
      cache.resize(v.size());
      for (std::size_t i = 0; i < v.size(); ++i) {
        const double p = std::clamp(v[i], kProbFloor, 1.0);
        cache[i] = n == 1.0 ? p : std::pow(p, n);
      }
      if (cache_.size() > 256) {
        auto keep = std::move(cache);
        cache_.clear();
        return cache_[{m, n}] = std::move(keep);
      }
    }
    return cache;
  }

  std::span<const ProbMatrix> mats_;
  std::span<const int> labels_;
  std::map<std::pair<std::size_t, double>, std::vector<double>> cache_;
  std::vector<double> scores_;
  std::vector<int> preds_;
};

struct Best {
  double f1 = -1.0;
  std::vector<double> weights, powers;

  // Higher F1 wins; ties go to the lexicographically smaller (weights, powers).
  bool offer(double f, const std::vector<double>& w, const std::vector<double>& n) {
    const bool better = f > f1 || (f == f1 && std::tie(w, n) < std::tie(weights, powers));
    if (better) {
      f1 = f;
      weights = w;
      powers = n;
    }
    return better;
  }
};

// Counts the grid points of a variant, saturating at `cap`.
std::size_t grid_size(EnsembleVariant v, std::size_t models, std::size_t cap) {
  std::size_t n = 1;
  auto times = [&](std::size_t k) { n = (n > cap / k) ? cap + 1 : n * k; };
  if (v == EnsembleVariant::kAverage) return 1;
  for (std::size_t m = 0; m < models; ++m) times(kWeightSteps);
  if (v == EnsembleVariant::kPower) times(kPowerGrid.size());
  if (v == EnsembleVariant::kUnified)
    for (std::size_t m = 0; m < models; ++m) times(kPowerGrid.size());
  return n;
}

// Decodes grid point `index` into (weights, powers); weights are the most
// significant digits so increasing indices follow lexicographic spec order.
void decode(EnsembleVariant v, std::size_t models, std::size_t index, std::vector<double>& w,
            std::vector<double>& n) {
  w.assign(models, 1.0);
  n.assign(models, 1.0);
  const std::size_t pw = kPowerGrid.size();
  if (v == EnsembleVariant::kUnified) {
    for (std::size_t m = models; m-- > 0;) {
      n[m] = kPowerGrid[index % pw];
      index /= pw;
    }
  } else if (v == EnsembleVariant::kPower) {
    std::fill(n.begin(), n.end(), kPowerGrid[index % pw]);
    index /= pw;
  }
  for (std::size_t m = models; m-- > 0;) {
    w[m] = weight_at(index % kWeightSteps);
    index /= kWeightSteps;
  }
}

Best search(Scorer& scorer, std::size_t models, EnsembleVariant v, std::size_t budget,
            std::size_t refine_steps, Rng& rng) {
  Best best;
  std::vector<double> w, n;
  if (v == EnsembleVariant::kAverage) {
    w.assign(models, 1.0 / static_cast<double>(models));
    n.assign(models, 1.0);
    best.offer(scorer.f1(w, n), w, n);
    return best;
  }
  const std::size_t grid_budget = budget > refine_steps ? budget - refine_steps : budget;
  const std::size_t size = grid_size(v, models, grid_budget);
  if (size <= grid_budget) {
    for (std::size_t i = 0; i < size; ++i) {
      decode(v, models, i, w, n);
      best.offer(scorer.f1(w, n), w, n);
    }
  } else {
    const std::size_t full = grid_size(v, models, std::numeric_limits<std::size_t>::max() / 2);
    for (std::size_t i = 0; i < grid_budget; ++i) {
      decode(v, models, rng.index(full), w, n);
      best.offer(scorer.f1(w, n), w, n);
    }
  }

  // Local random refinement around the incumbent.
  const std::size_t steps = std::min(refine_steps, budget > scorer.evaluations ? budget - scorer.evaluations : 0);
  for (std::size_t s = 0; s < steps; ++s) {
    w = best.weights;
    n = best.powers;
    for (auto& x : w) x = std::clamp(x + rng.uniform(-0.1, 0.1), 0.01, 1.0);
    if (v == EnsembleVariant::kUnified) {
      for (auto& x : n) x = std::clamp(x * std::exp2(rng.uniform(-0.5, 0.5)), 0.0625, 4.0);
    } else if (v == EnsembleVariant::kPower) {
      const double shared = std::clamp(n[0] * std::exp2(rng.uniform(-0.5, 0.5)), 0.0625, 4.0);
      std::fill(n.begin(), n.end(), shared);
    }
    best.offer(scorer.f1(w, n), w, n);
  }
  return best;
}

}  // namespace

EnsembleSpec tune(std::span<const ProbMatrix> mats, std::span<const int> labels,
                  EnsembleVariant variant, const TuneOptions& options) {
  check_aligned(mats);
  if (mats[0].rows() == 0) throw ValueError("cannot tune an ensemble on zero samples");
  if (labels.size() != mats[0].rows())
    throw DimensionError("tune: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(mats[0].rows()) + " samples");
  if (options.budget == 0) throw ValueError("tune budget must be positive");
  const std::size_t models = mats.size();

  Scorer scorer(mats, labels);
  Rng rng(mix_seed(options.seed, static_cast<std::uint64_t>(variant)));
  Best best = search(scorer, models, variant, options.budget, options.refine_steps, rng);

  if (variant == EnsembleVariant::kWeighted || variant == EnsembleVariant::kUnified) {
    // One model at full weight, the rest negligible: reproduces each single model.
    std::vector<double> w, n(models, 1.0);
    for (std::size_t m = 0; m < models; ++m) {
      w.assign(models, kNegligibleWeight);
      w[m] = 1.0;
      best.offer(scorer.f1(w, n), w, n);
    }
  }

  if (variant == EnsembleVariant::kUnified) {
    // Every reduced spec is also a unified spec.
    for (auto reduced : {EnsembleVariant::kAverage, EnsembleVariant::kWeighted, EnsembleVariant::kPower}) {
      Scorer sub_scorer(mats, labels);
      Rng sub_rng(mix_seed(options.seed, static_cast<std::uint64_t>(reduced)));
      auto r = search(sub_scorer, models, reduced, options.budget, options.refine_steps, sub_rng);
      best.offer(r.f1, r.weights, r.powers);
    }
  }

  EnsembleSpec spec;
  spec.variant = variant;
  spec.weights = best.weights;
  spec.powers = best.powers;
  spec.f1 = best.f1;
  spec.validate();
  return spec;
}

}  // namespace cofact
