#include <doctest.h>

#include <algorithm>
#include <numeric>
#include <sstream>

#include "cofact/error.hpp"
#include "cofact/metrics.hpp"
#include "cofact/random.hpp"
#include "metrics_cases.hpp"

using namespace cofact;

TEST_CASE("confusion tallies by (truth, predicted)") {
  // 20 pairs counted by hand.
  const std::vector<int> labels = {0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 3, 3, 3, 3, 3, 4, 4, 4, 4, 0};
  const std::vector<int> preds = {0, 1, 0, 1, 1, 2, 1, 2, 0, 2, 3, 3, 4, 3, 1, 4, 4, 3, 4, 0};
  const auto cm = confusion(preds, labels);
  const std::uint64_t expected[5][5] = {
      {3, 1, 0, 0, 0}, {0, 3, 1, 0, 0}, {1, 0, 2, 0, 0}, {0, 1, 0, 3, 1}, {0, 0, 0, 1, 3}};
  for (std::size_t t = 0; t < 5; ++t)
    for (std::size_t p = 0; p < 5; ++p) CHECK(cm.at(t, p) == expected[t][p]);
  CHECK(cm.total() == 20);
  CHECK(cm.support(3) == 5);
  CHECK(cm.predicted_count(4) == 4);

  SUBCASE("perfect predictions are diagonal") {
    const auto d = confusion(labels, labels);
    for (std::size_t t = 0; t < 5; ++t)
      for (std::size_t p = 0; p < 5; ++p) CHECK((d.at(t, p) != 0) == (t == p));
    CHECK(weighted_f1(d).weighted == 1.0);
  }
  SUBCASE("one predicted class gives one nonzero column") {
    const std::vector<int> twos(labels.size(), 2);
    const auto c = confusion(twos, labels);
    CHECK(c.predicted_count(2) == 20);
    for (std::size_t p : {0u, 1u, 3u, 4u}) CHECK(c.predicted_count(p) == 0);
  }
  SUBCASE("errors") {
    const std::vector<int> bad = {0, 5};
    const std::vector<int> two = {0, 1};
    CHECK_THROWS_AS(confusion(bad, two), ValueError);
    CHECK_THROWS_AS(confusion(two, bad), ValueError);
    CHECK_THROWS_AS(confusion(two, std::vector<int>{0}), DimensionError);
    CHECK_THROWS_AS(weighted_f1(ConfusionMatrix{}), ValueError);
  }
}

TEST_CASE("weighted F1 matches the reference implementation") {
  for (const auto& c : metrics_cases()) {
    CAPTURE(c.name);
    const auto report = weighted_f1(confusion(c.preds, c.labels, static_cast<std::size_t>(c.classes)));
    CHECK(std::abs(report.weighted - c.weighted_f1) < 1e-12);
    REQUIRE(report.per_class.size() == c.per_class.size());
    for (std::size_t k = 0; k < c.per_class.size(); ++k) CHECK(std::abs(report.per_class[k] - c.per_class[k]) < 1e-12);
  }
}

TEST_CASE("weighted F1 properties") {
  Rng rng(17);
  for (int trial = 0; trial < 25; ++trial) {
    const std::size_t n = 10 + rng.index(40);
    std::vector<int> labels(n), preds(n);
    for (std::size_t i = 0; i < n; ++i) {
      labels[i] = static_cast<int>(rng.index(5));
      preds[i] = rng.uniform() < 0.5 ? labels[i] : static_cast<int>(rng.index(5));
    }
    const auto r = weighted_f1(confusion(preds, labels));
    double lo = 1.0, hi = 0.0;
    for (std::size_t k = 0; k < 5; ++k) {
      CHECK(r.per_class[k] >= 0.0);
      CHECK(r.per_class[k] <= 1.0);
      if (r.support[k] > 0) {
        lo = std::min(lo, r.per_class[k]);
        hi = std::max(hi, r.per_class[k]);
      }
    }
    CHECK(r.weighted >= lo - 1e-15);
    CHECK(r.weighted <= hi + 1e-15);

    // Relabel the classes consistently.
    std::array<int, 5> perm = {0, 1, 2, 3, 4};
    for (std::size_t i = 4; i > 0; --i) std::swap(perm[i], perm[rng.index(i + 1)]);
    std::vector<int> pl(n), pp(n);
    for (std::size_t i = 0; i < n; ++i) {
      pl[i] = perm[static_cast<std::size_t>(labels[i])];
      pp[i] = perm[static_cast<std::size_t>(preds[i])];
    }
    CHECK(weighted_f1_score(pp, pl) == doctest::Approx(r.weighted).epsilon(1e-12));
  }
}

TEST_CASE("absent class contributes nothing") {
  const std::vector<int> labels = {0, 0, 1, 1};
  const std::vector<int> preds = {0, 4, 1, 1};
  const auto r = weighted_f1(confusion(preds, labels));
  CHECK(r.support[4] == 0);
  CHECK(r.per_class[4] == 0.0);
  // class 0: P=1, R=0.5 -> 2/3; class 1: P=R=1.
  CHECK(r.weighted == doctest::Approx((2.0 / 3.0 + 1.0) / 2.0).epsilon(1e-15));
}

TEST_CASE("reports") {
  const std::vector<int> labels = {0, 1, 2, 3, 4, 4};
  const std::vector<int> preds = {0, 1, 2, 3, 4, 3};
  const auto cm = confusion(preds, labels);
  const auto r = weighted_f1(cm);
  std::ostringstream csv, text;
  write_report_csv(csv, cm, r);
  write_report_text(text, cm, r);
  CHECK(csv.str().find("truth") != std::string::npos);
  CHECK(text.str().find("weighted") != std::string::npos);
  CHECK(text.str().find("Refute") != std::string::npos);
}
