#pragma once

#include <string_view>

// Defined in the build-generated embedded_resources.cpp (see src/CMakeLists.txt).
namespace cofact::embedded {
extern const std::string_view kStopwords;
extern const std::string_view kAbbreviations;
extern const std::string_view kEmoji;
}  // namespace cofact::embedded
