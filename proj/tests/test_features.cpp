#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "cofact/features.hpp"
#include "feature_corpus.hpp"

using namespace cofact;
using namespace cofact::testing;

TEST_CASE("hand-built corpus matches the frozen tally exactly") {
  for (std::size_t i = 0; i < 10; ++i) {
    const auto v = raw_features(make_sample(kCorpus[i]));
    REQUIRE(v.size() == 32);
    for (std::size_t k = 0; k < 32; ++k) {
      INFO("sample " << i << " feature " << k);
      CHECK(v[k] == kExpected[i][k]);
    }
  }
}

TEST_CASE("field statistics") {
  SUBCASE("empty string") {
    const auto s = extract_field_features("");
    for (double x : s) CHECK(x == 0.0);
  }
  SUBCASE("mentions, URLs and punctuation") {
    const auto s = extract_field_features("Go @a http://b.c now!");
    CHECK(s[0] == 4);
    CHECK(s[1] == 21);
    CHECK(s[3] == 1);
    CHECK(s[4] == 1);
    CHECK(s[7] == 1);
  }
  SUBCASE("stopwords") { CHECK(extract_field_features("the of and")[2] == 3); }
  SUBCASE("appending a URL adds exactly one") {
    const auto a = extract_field_features("news at www.x.org today");
    const auto b = extract_field_features("news at www.x.org today https://y.z");
    CHECK(b[4] == a[4] + 1);
  }
  SUBCASE("bare @ is not a mention") {
    CHECK(extract_field_features("@ @@ @-x")[3] == 0);
    CHECK(extract_field_features("@_x @9")[3] == 2);
  }
}

TEST_CASE("normalize_text") {
  CHECK(normalize_text("") == "");
  CHECK(normalize_text("hi @john see http://x.y now") == "hi see now");
  CHECK(normalize_text("can't") == "cannot");
  CHECK(normalize_text("Can't stop, won't stop!") == "Cannot stop, will not stop!");
  CHECK(normalize_text("  spaced\t\tout  ") == "spaced out");
  CHECK(normalize_text("@only https://gone") == "");
  const std::string emoji = normalize_text("so happy \xF0\x9F\x98\x82");
  CHECK(emoji.rfind("so happy ", 0) == 0);
  CHECK(emoji.size() > std::string("so happy ").size());
  CHECK(emoji.find("\xF0") == std::string::npos);
}

TEST_CASE("output width is always 32 and extraction is deterministic") {
  RawSample empty;
  const auto v = raw_features(empty);
  CHECK(v.size() == kFeatureWidth);
  CHECK(kFeatureWidth == 32);
  for (double x : v) CHECK(x == 0.0);
  FeatureScaler scaler;
  for (const auto& f : kCorpus) {
    const auto a = extract(make_sample(f), scaler);
    const auto b = extract(make_sample(f), scaler);
    CHECK(a == b);
    for (double x : a) CHECK(std::isfinite(x));
  }
}

TEST_CASE("scaler fits log1p statistics and round-trips through a tensor") {
  std::vector<FeatureVector> raw;
  for (const auto& f : kCorpus) raw.push_back(raw_features(make_sample(f)));
  FeatureScaler scaler;
  scaler.fit(raw);
  CHECK(scaler.fitted());
  // Word count of the claim text (feature 0), recomputed by hand.
  double mean = 0.0, var = 0.0;
  for (const auto& r : raw) mean += std::log1p(r[0]);
  mean /= 10.0;
  for (const auto& r : raw) var += std::pow(std::log1p(r[0]) - mean, 2);
  const double sd = std::sqrt(var / 10.0);
  // Statistics are stored at float precision.
  CHECK(scaler.mean()[0] == static_cast<double>(static_cast<float>(mean)));
  CHECK(scaler.stddev()[0] == static_cast<double>(static_cast<float>(sd)));
  const auto t = scaler.transform(raw[0]);
  CHECK(t[0] == doctest::Approx((std::log1p(raw[0][0]) - mean) / sd).epsilon(1e-6));

  // Scaled columns have zero mean over the fitting set.
  for (std::size_t k = 0; k < kFeatureWidth; ++k) {
    double m = 0.0;
    for (const auto& r : raw) m += scaler.transform(r)[k];
    CHECK(std::abs(m / 10.0) < 1e-6);
  }

  auto restored = FeatureScaler::from_tensor(scaler.to_tensor());
  const auto a = scaler.transform(raw[3]);
  const auto b = restored.transform(raw[3]);
  for (std::size_t k = 0; k < kFeatureWidth; ++k) CHECK(a[k] == b[k]);
}

TEST_CASE("sample order does not change any vector") {
  std::vector<FeatureVector> forward, backward;
  for (std::size_t i = 0; i < 10; ++i) forward.push_back(raw_features(make_sample(kCorpus[i])));
  for (std::size_t i = 10; i-- > 0;) backward.push_back(raw_features(make_sample(kCorpus[i])));
  std::reverse(backward.begin(), backward.end());
  CHECK(forward == backward);
}

TEST_CASE("embedded stopword list is pinned") {
  CHECK(builtin_stopwords_checksum() == 0x2024cde651fbd52ULL);
  CHECK(TextResources::builtin().stopword_count() == 179);
  CHECK(TextResources::builtin().is_stopword("the"));
  CHECK_FALSE(TextResources::builtin().is_stopword("senate"));
}

TEST_CASE("resources parse from text") {
  auto res = TextResources::parse("foo\nbar\n", "brb\tbe right back\n", "1F600\tgrinning face\n");
  CHECK(res.is_stopword("foo"));
  CHECK(res.stopword_count() == 2);
  REQUIRE(res.expansion("brb") != nullptr);
  CHECK(*res.expansion("brb") == "be right back");
  REQUIRE(res.emoji_description(0x1F600) != nullptr);
  CHECK(normalize_text("brb \xF0\x9F\x98\x80", res) == "be right back grinning face");
}
