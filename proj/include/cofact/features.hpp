#pragma once

// Explicit text statistics for the four text fields of a sample.
//
// Per field, in this order:
//   0 word count            whitespace-delimited tokens
//   1 character count       Unicode code points of the raw string
//   2 stopword count        tokens (lowercased, edge punctuation stripped) in the stopword list
//   3 @mention count        tokens "@" + at least one word character
//   4 URL count             tokens starting with http://, https:// or www.
//   5 mean word length      code points per token
//   6 digit count           ASCII digits outside URL/@mention tokens
//   7 punctuation count     ASCII punctuation outside URL/@mention tokens
//
// Fields are concatenated as claim text, document text, claim OCR, document OCR.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "cofact/tensor.hpp"

namespace cofact {

constexpr std::size_t kStatsPerField = 8;
constexpr std::size_t kNumTextFields = 4;
constexpr std::size_t kFeatureWidth = kStatsPerField * kNumTextFields;

using FieldStats = std::array<double, kStatsPerField>;
using FeatureVector = std::array<double, kFeatureWidth>;

struct RawSample {
  std::string id;
  std::string claim_text;
  std::string claim_ocr;
  std::string doc_text;
  std::string doc_ocr;
  std::string claim_image_embedding_ref;
  std::string doc_image_embedding_ref;
  std::optional<std::string> claim_text_embedding_ref;
  std::optional<std::string> doc_text_embedding_ref;
  std::optional<int> label;
};

// Stopword list, abbreviation table and emoji descriptions.
class TextResources {
 public:
  // The tables compiled into the library from resources/.
  static const TextResources& builtin();
  // Stopwords: one per line. Abbreviations: "short<TAB>expansion" per line.
  // Emoji: "<hex code point><TAB>description" per line.
  static TextResources load(const std::filesystem::path& stopwords,
                            const std::filesystem::path& abbreviations,
                            const std::filesystem::path& emoji);
  static TextResources parse(std::string_view stopwords, std::string_view abbreviations,
                             std::string_view emoji);

  bool is_stopword(std::string_view lowered) const;
  const std::string* expansion(std::string_view lowered) const;
  const std::string* emoji_description(char32_t code_point) const;
  std::size_t stopword_count() const { return stopwords_.size(); }

 private:
  std::unordered_set<std::string> stopwords_;
  std::unordered_map<std::string, std::string> abbreviations_;
  std::unordered_map<char32_t, std::string> emoji_;
};

// FNV-1a 64 of the embedded stopword file, pinned in tests.
std::uint64_t builtin_stopwords_checksum();
std::string_view builtin_stopwords_text();

bool is_url_token(std::string_view token);
bool is_mention_token(std::string_view token);

// Emoji -> description, @mentions and URLs removed, abbreviations expanded,
// whitespace collapsed to single spaces.
std::string normalize_text(std::string_view raw,
                           const TextResources& resources = TextResources::builtin());

// Runs on the raw (pre-normalization) string.
FieldStats extract_field_features(std::string_view text,
                                  const TextResources& resources = TextResources::builtin());

// Unscaled concatenation of the four fields.
FeatureVector raw_features(const RawSample& sample,
                           const TextResources& resources = TextResources::builtin());

// log(1 + x) followed by a z-score whose statistics are fitted once on the
// training split and then frozen.
class FeatureScaler {
 public:
  FeatureScaler();

  void fit(std::span<const FeatureVector> raw_train);
  bool fitted() const { return fitted_; }
  FeatureVector transform(const FeatureVector& raw) const;

  const FeatureVector& mean() const { return mean_; }
  const FeatureVector& stddev() const { return std_; }

  // [2×32]: row 0 mean, row 1 standard deviation (of log1p values).
  Tensor to_tensor() const;
  static FeatureScaler from_tensor(const Tensor& tensor);

 private:
  FeatureVector mean_{};
  FeatureVector std_{};
  bool fitted_ = false;
};

// Scaled feature vector of one sample.
FeatureVector extract(const RawSample& sample, const FeatureScaler& scaler,
                      const TextResources& resources = TextResources::builtin());

}  // namespace cofact
