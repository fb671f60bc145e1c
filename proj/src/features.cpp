#include "cofact/features.hpp"

#include <cctype>
#include <cmath>
#include <fstream>
#include <sstream>

#include "embedded_resources.hpp"

namespace cofact {

namespace {

bool is_space(unsigned char c) { return std::isspace(c) != 0; }
bool is_ascii_punct(unsigned char c) { return c < 128 && std::ispunct(c) != 0; }
bool is_word_char(unsigned char c) { return c < 128 && (std::isalnum(c) != 0 || c == '_'); }

std::string lower_ascii(std::string_view s) {
  std::string out(s);
  for (auto& c : out)
    if (static_cast<unsigned char>(c) < 128) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

bool starts_with_ci(std::string_view s, std::string_view prefix) {
  if (s.size() < prefix.size()) return false;
  for (std::size_t i = 0; i < prefix.size(); ++i)
    if (std::tolower(static_cast<unsigned char>(s[i])) != prefix[i]) return false;
  return true;
}

// Decodes one UTF-8 sequence at `pos`; malformed bytes decode as themselves.
char32_t decode_utf8(std::string_view s, std::size_t& pos) {
  const auto b0 = static_cast<unsigned char>(s[pos]);
  auto cont = [&](std::size_t i) {
    return pos + i < s.size() && (static_cast<unsigned char>(s[pos + i]) & 0xC0) == 0x80;
  };
  auto byte = [&](std::size_t i) { return static_cast<char32_t>(static_cast<unsigned char>(s[pos + i]) & 0x3F); };
  if (b0 < 0x80) {
    pos += 1;
    return b0;
  }
  if ((b0 & 0xE0) == 0xC0 && cont(1)) {
    const char32_t cp = (static_cast<char32_t>(b0 & 0x1F) << 6) | byte(1);
    pos += 2;
    return cp;
  }
  if ((b0 & 0xF0) == 0xE0 && cont(1) && cont(2)) {
    const char32_t cp = (static_cast<char32_t>(b0 & 0x0F) << 12) | (byte(1) << 6) | byte(2);
    pos += 3;
    return cp;
  }
  if ((b0 & 0xF8) == 0xF0 && cont(1) && cont(2) && cont(3)) {
    const char32_t cp = (static_cast<char32_t>(b0 & 0x07) << 18) | (byte(1) << 12) |
                        (byte(2) << 6) | byte(3);
    pos += 4;
    return cp;
  }
  pos += 1;
  return b0;
}

std::size_t code_point_count(std::string_view s) {
  std::size_t n = 0;
  for (std::size_t pos = 0; pos < s.size(); ++n) decode_utf8(s, pos);
  return n;
}

// Joiners, variation selectors, skin tones and keycap marks carry no text.
bool is_emoji_modifier(char32_t cp) {
  return cp == 0x200D || cp == 0xFE0E || cp == 0xFE0F || cp == 0x20E3 ||
         (cp >= 0x1F3FB && cp <= 0x1F3FF);
}

bool is_emoji_range(char32_t cp) {
  return (cp >= 0x1F000 && cp <= 0x1FAFF) || (cp >= 0x2600 && cp <= 0x27BF) ||
         (cp >= 0x2B00 && cp <= 0x2BFF);
}

std::vector<std::string_view> split_ws(std::string_view text) {
  std::vector<std::string_view> tokens;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && is_space(static_cast<unsigned char>(text[i]))) ++i;
    const std::size_t start = i;
    while (i < text.size() && !is_space(static_cast<unsigned char>(text[i]))) ++i;
    if (i > start) tokens.push_back(text.substr(start, i - start));
  }
  return tokens;
}

std::string_view strip_edges(std::string_view token, std::string_view chars) {
  while (!token.empty() && chars.find(token.front()) != std::string_view::npos) token.remove_prefix(1);
  while (!token.empty() && chars.find(token.back()) != std::string_view::npos) token.remove_suffix(1);
  return token;
}

std::string replace_curly_apostrophes(std::string_view s) {
  std::string out;
  out.reserve(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s.substr(i, 3) == "\xE2\x80\x99" || s.substr(i, 3) == "\xE2\x80\x98") {
      out += '\'';
      i += 2;
    } else {
      out += s[i];
    }
  }
  return out;
}

constexpr std::string_view kAsciiPunct = "!\"#$%&'()*+,-./:;<=>?@[\\]^_`{|}~";

std::vector<std::string_view> lines_of(std::string_view text) {
  std::vector<std::string_view> lines;
  std::size_t start = 0;
  while (start < text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    auto line = text.substr(start, end - start);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (!line.empty()) lines.push_back(line);
    start = end + 1;
  }
  return lines;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open resource file " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

}  // namespace

// ---- resources ----------------------------------------------------------------

TextResources TextResources::parse(std::string_view stopwords, std::string_view abbreviations,
                                   std::string_view emoji) {
  TextResources res;
  for (auto line : lines_of(stopwords)) res.stopwords_.insert(lower_ascii(line));
  for (auto line : lines_of(abbreviations)) {
    const auto tab = line.find('\t');
    if (tab == std::string_view::npos || tab == 0)
      throw FormatError("abbreviation line without TAB: " + std::string(line));
    res.abbreviations_[lower_ascii(line.substr(0, tab))] = std::string(line.substr(tab + 1));
  }
  for (auto line : lines_of(emoji)) {
    const auto tab = line.find('\t');
    if (tab == std::string_view::npos)
      throw FormatError("emoji line without TAB: " + std::string(line));
    char32_t cp = 0;
    try {
      cp = static_cast<char32_t>(std::stoul(std::string(line.substr(0, tab)), nullptr, 16));
    } catch (const std::exception&) {
      throw FormatError("bad emoji code point: " + std::string(line.substr(0, tab)));
    }
    res.emoji_[cp] = std::string(line.substr(tab + 1));
  }
  return res;
}

TextResources TextResources::load(const std::filesystem::path& stopwords,
                                  const std::filesystem::path& abbreviations,
                                  const std::filesystem::path& emoji) {
  return parse(read_file(stopwords), read_file(abbreviations), read_file(emoji));
}

const TextResources& TextResources::builtin() {
  static const TextResources res =
      parse(embedded::kStopwords, embedded::kAbbreviations, embedded::kEmoji);
  return res;
}

bool TextResources::is_stopword(std::string_view lowered) const {
  return stopwords_.count(std::string(lowered)) != 0;
}

const std::string* TextResources::expansion(std::string_view lowered) const {
  auto it = abbreviations_.find(std::string(lowered));
  return it == abbreviations_.end() ? nullptr : &it->second;
}

const std::string* TextResources::emoji_description(char32_t code_point) const {
  auto it = emoji_.find(code_point);
  return it == emoji_.end() ? nullptr : &it->second;
}

std::string_view builtin_stopwords_text() { return embedded::kStopwords; }

std::uint64_t builtin_stopwords_checksum() {
  std::uint64_t h = 14695981039346656037ULL;
  for (unsigned char c : embedded::kStopwords) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

// ---- token classes ---------------------------------------------------------------

bool is_url_token(std::string_view token) {
  return starts_with_ci(token, "http://") || starts_with_ci(token, "https://") ||
         starts_with_ci(token, "www.");
}

bool is_mention_token(std::string_view token) {
  return token.size() >= 2 && token[0] == '@' && is_word_char(static_cast<unsigned char>(token[1]));
}

// ---- normalization ---------------------------------------------------------------

std::string normalize_text(std::string_view raw, const TextResources& resources) {
  // Emoji to words.
  std::string demojized;
  demojized.reserve(raw.size());
  for (std::size_t pos = 0; pos < raw.size();) {
    const std::size_t start = pos;
    const char32_t cp = decode_utf8(raw, pos);
    if (const auto* desc = resources.emoji_description(cp)) {
      demojized += ' ';
      demojized += *desc;
      demojized += ' ';
    } else if (is_emoji_modifier(cp) || is_emoji_range(cp)) {
      demojized += ' ';
    } else {
      demojized.append(raw.substr(start, pos - start));
    }
  }
  const std::string text = replace_curly_apostrophes(demojized);

  std::string out;
  for (auto token : split_ws(text)) {
    if (is_mention_token(token) || is_url_token(token)) continue;
    const auto core = strip_edges(token, ".,!?;:\"()");
    std::string piece(token);
    if (!core.empty()) {
      if (const auto* exp = resources.expansion(lower_ascii(core))) {
        std::string replacement = *exp;
        if (std::isupper(static_cast<unsigned char>(core[0])) && !replacement.empty())
          replacement[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(replacement[0])));
        const auto lead = static_cast<std::size_t>(core.data() - token.data());
        piece = std::string(token.substr(0, lead)) + replacement +
                std::string(token.substr(lead + core.size()));
      }
    }
    if (!out.empty()) out += ' ';
    out += piece;
  }
  return out;
}

// ---- statistics ------------------------------------------------------------------

FieldStats extract_field_features(std::string_view text, const TextResources& resources) {
  FieldStats stats{};
  const auto tokens = split_ws(text);
  std::size_t word_chars = 0;
  std::size_t stopwords = 0, mentions = 0, urls = 0, digits = 0, punct = 0;
  for (auto token : tokens) {
    word_chars += code_point_count(token);
    const bool url = is_url_token(token);
    const bool mention = is_mention_token(token);
    urls += url ? 1 : 0;
    mentions += mention ? 1 : 0;
    if (!url && !mention) {
      for (unsigned char c : token) {
        if (c >= '0' && c <= '9') ++digits;
        if (is_ascii_punct(c)) ++punct;
      }
    }
    const auto core = strip_edges(token, kAsciiPunct);
    if (!core.empty() && resources.is_stopword(lower_ascii(replace_curly_apostrophes(core))))
      ++stopwords;
  }
  stats[0] = static_cast<double>(tokens.size());
  stats[1] = static_cast<double>(code_point_count(text));
  stats[2] = static_cast<double>(stopwords);
  stats[3] = static_cast<double>(mentions);
  stats[4] = static_cast<double>(urls);
  stats[5] = tokens.empty() ? 0.0 : static_cast<double>(word_chars) / static_cast<double>(tokens.size());
  stats[6] = static_cast<double>(digits);
  stats[7] = static_cast<double>(punct);
  return stats;
}

FeatureVector raw_features(const RawSample& sample, const TextResources& resources) {
  FeatureVector out{};
  const std::string* fields[kNumTextFields] = {&sample.claim_text, &sample.doc_text,
                                               &sample.claim_ocr, &sample.doc_ocr};
  for (std::size_t f = 0; f < kNumTextFields; ++f) {
    const auto stats = extract_field_features(*fields[f], resources);
    std::copy(stats.begin(), stats.end(), out.begin() + static_cast<std::ptrdiff_t>(f * kStatsPerField));
  }
  return out;
}

// ---- scaling ---------------------------------------------------------------------

FeatureScaler::FeatureScaler() {
  mean_.fill(0.0);
  std_.fill(1.0);
}

void FeatureScaler::fit(std::span<const FeatureVector> raw_train) {
  if (raw_train.empty()) throw ValueError("cannot fit feature scaler on an empty split");
  mean_.fill(0.0);
  std_.fill(0.0);
  const double n = static_cast<double>(raw_train.size());
  for (const auto& v : raw_train)
    for (std::size_t j = 0; j < kFeatureWidth; ++j) mean_[j] += std::log1p(v[j]) / n;
  for (const auto& v : raw_train)
    for (std::size_t j = 0; j < kFeatureWidth; ++j) {
      const double d = std::log1p(v[j]) - mean_[j];
      std_[j] += d * d / n;
    }
  for (auto& s : std_) s = s > 1e-12 ? std::sqrt(s) : 1.0;
  // Checkpoints hold float32; keep the fitted statistics at that precision so
  // a reloaded scaler transforms bit-identically.
  for (auto& m : mean_) m = static_cast<float>(m);
  for (auto& s : std_) s = static_cast<float>(s);
  fitted_ = true;
}

FeatureVector FeatureScaler::transform(const FeatureVector& raw) const {
  FeatureVector out{};
  for (std::size_t j = 0; j < kFeatureWidth; ++j)
    out[j] = (std::log1p(raw[j]) - mean_[j]) / std_[j];
  return out;
}

Tensor FeatureScaler::to_tensor() const {
  std::vector<float> values;
  for (double m : mean_) values.push_back(static_cast<float>(m));
  for (double s : std_) values.push_back(static_cast<float>(s));
  return Tensor::constant({2, kFeatureWidth}, std::move(values));
}

FeatureScaler FeatureScaler::from_tensor(const Tensor& tensor) {
  if (tensor.shape() != Shape{2, kFeatureWidth})
    throw DimensionError("feature scaler tensor must be [2x32], got " + shape_string(tensor.shape()));
  FeatureScaler scaler;
  const auto v = tensor.values();
  for (std::size_t j = 0; j < kFeatureWidth; ++j) {
    scaler.mean_[j] = v[j];
    scaler.std_[j] = v[kFeatureWidth + j];
    if (!(scaler.std_[j] > 0.0)) throw FormatError("non-positive scale in feature scaler");
  }
  scaler.fitted_ = true;
  return scaler;
}

FeatureVector extract(const RawSample& sample, const FeatureScaler& scaler,
                      const TextResources& resources) {
  return scaler.transform(raw_features(sample, resources));
}

}  // namespace cofact
