#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <string>
#include <string_view>

namespace cofact {

constexpr std::size_t kNumClasses = 5;

// Class indices used throughout: matrices, checkpoints and CSV columns.
enum class Category : int {
  kSupportText = 0,
  kSupportMultimodal = 1,
  kInsufficientText = 2,
  kInsufficientMultimodal = 3,
  kRefute = 4,
};

constexpr std::array<std::string_view, kNumClasses> kCategoryNames = {
    "Support_Text", "Support_Multimodal", "Insufficient_Text", "Insufficient_Multimodal",
    "Refute"};

inline std::string_view category_name(int label) {
  return label >= 0 && label < static_cast<int>(kNumClasses) ? kCategoryNames[label]
                                                              : std::string_view("?");
}

// Accepts the category name or its integer code.
inline std::optional<int> parse_category(std::string_view text) {
  for (std::size_t i = 0; i < kNumClasses; ++i)
    if (kCategoryNames[i] == text) return static_cast<int>(i);
  if (text.size() == 1 && text[0] >= '0' && text[0] < '0' + static_cast<int>(kNumClasses))
    return text[0] - '0';
  return std::nullopt;
}

}  // namespace cofact
