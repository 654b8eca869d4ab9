#pragma once

// Caption text pipeline, dataset manifests, binary feature/image files and the
// synthetic shapes dataset.

#include <algorithm>
#include <array>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "capkit/annotation.hpp"
#include "capkit/rng.hpp"
#include "json.hpp"

namespace capkit {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

using TokenId = std::size_t;

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Tokenization

namespace detail {
inline bool word_char(unsigned char c) { return std::isalnum(c) || c >= 0x80; }
}  // namespace detail

/// Lowercases, drops punctuation (apostrophes and hyphens survive only
/// between two word characters) and splits on whitespace.
inline std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> tokens;
  std::string current;
  auto flush = [&] {
    if (!current.empty()) tokens.push_back(std::move(current));
    current.clear();
  };
  for (std::size_t i = 0; i < text.size(); ++i) {
    const auto c = static_cast<unsigned char>(text[i]);
    if (std::isspace(c)) {
      flush();
    } else if (detail::word_char(c)) {
      current.push_back(c < 0x80 ? static_cast<char>(std::tolower(c)) : static_cast<char>(c));
    } else if ((c == '\'' || c == '-') && i > 0 && i + 1 < text.size() &&
               detail::word_char(static_cast<unsigned char>(text[i - 1])) &&
               detail::word_char(static_cast<unsigned char>(text[i + 1]))) {
      current.push_back(static_cast<char>(c));
    }
  }
  flush();
  return tokens;
}

inline std::string join(const std::vector<std::string>& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out.push_back(' ');
    out += tokens[i];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Vocabulary

class Vocabulary {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kStart = 1;
  static constexpr TokenId kEnd = 2;
  static constexpr TokenId kUnk = 3;
  static constexpr std::size_t kReserved = 4;

  Vocabulary() : tokens_{"<pad>", "<start>", "<end>", "<unk>"} {
    for (TokenId i = 0; i < tokens_.size(); ++i) ids_[tokens_[i]] = i;
  }

  /// Tokens with corpus frequency >= min_count, ordered by descending
  /// frequency then lexicographically, numbered from 4.
  static Vocabulary build(const std::vector<std::vector<std::string>>& captions, std::size_t min_count = 1) {
    if (min_count == 0) throw std::invalid_argument("min_count must be >= 1");
    std::map<std::string, std::size_t> freq;
    for (const auto& c : captions) {
      for (const auto& t : c) ++freq[t];
    }
    std::vector<std::pair<std::string, std::size_t>> kept;
    for (auto& [tok, n] : freq) {
      if (n >= min_count) kept.emplace_back(tok, n);
    }
    std::stable_sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    Vocabulary v;
    v.min_count_ = min_count;
    for (auto& [tok, n] : kept) v.push(tok);
    return v;
  }

  /// Restores a vocabulary from its id-ordered token list (reserved first).
  static Vocabulary from_tokens(const std::vector<std::string>& tokens) {
    Vocabulary v;
    if (tokens.size() < kReserved) throw FormatError("vocabulary lacks reserved tokens");
    for (std::size_t i = 0; i < kReserved; ++i) {
      if (tokens[i] != v.tokens_[i]) throw FormatError("vocabulary reserved tokens out of order");
    }
    for (std::size_t i = kReserved; i < tokens.size(); ++i) v.push(tokens[i]);
    return v;
  }

  std::size_t size() const { return tokens_.size(); }
  std::size_t min_count() const { return min_count_; }
  const std::vector<std::string>& tokens() const { return tokens_; }

  TokenId id(const std::string& token) const {
    auto it = ids_.find(token);
    return it == ids_.end() ? kUnk : it->second;
  }
  const std::string& token(TokenId id) const { return tokens_.at(id); }
  bool contains(const std::string& token) const { return ids_.count(token) > 0; }

  std::vector<TokenId> encode(const std::vector<std::string>& tokens) const {
    std::vector<TokenId> out;
    out.reserve(tokens.size());
    for (const auto& t : tokens) out.push_back(id(t));
    return out;
  }

  /// <start> ids... <end>
  std::vector<TokenId> encode_caption(const std::vector<std::string>& tokens) const {
    std::vector<TokenId> out{kStart};
    for (const auto& t : tokens) out.push_back(id(t));
    out.push_back(kEnd);
    return out;
  }

  /// Drops specials.
  std::vector<std::string> decode(const std::vector<TokenId>& ids) const {
    std::vector<std::string> out;
    for (auto i : ids) {
      if (i == kPad || i == kStart || i == kEnd) continue;
      out.push_back(token(i));
    }
    return out;
  }

 private:
  void push(const std::string& tok) {
    if (ids_.count(tok)) throw FormatError("duplicate vocabulary token: " + tok);
    ids_[tok] = tokens_.size();
    tokens_.push_back(tok);
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> ids_;
  std::size_t min_count_ = 1;
};

// ---------------------------------------------------------------------------
// Manifest

enum class Split { train, val, test };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

inline std::optional<Split> parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  return std::nullopt;
}

/// One manifest line.
struct ManifestLine {
  std::string image_id;
  Split split = Split::train;
  std::string caption;
  std::string image_path;
  std::string feature_path;
};

/// All manifest lines of one image, captions kept as raw text and tokens.
struct RawSample {
  std::string image_id;
  Split split = Split::train;
  std::string image_path;    // resolved against the manifest directory, may be empty
  std::string feature_path;  // likewise
  std::vector<std::string> captions;
  std::vector<std::vector<std::string>> caption_tokens;
};

struct Manifest {
  std::vector<RawSample> samples;
  std::size_t rejected_captions = 0;

  std::size_t count(Split s) const {
    return static_cast<std::size_t>(
        std::count_if(samples.begin(), samples.end(), [s](const RawSample& r) { return r.split == s; }));
  }

  std::vector<const RawSample*> split(Split s) const {
    std::vector<const RawSample*> out;
    for (const auto& r : samples) {
      if (r.split == s) out.push_back(&r);
    }
    return out;
  }
};

inline constexpr std::size_t kDefaultMaxCaptionTokens = 30;

inline nlohmann::json to_json(const ManifestLine& l) {
  nlohmann::json j{{"image_id", l.image_id}, {"split", split_name(l.split)}, {"caption", l.caption}};
  if (!l.image_path.empty()) j["image_path"] = l.image_path;
  if (!l.feature_path.empty()) j["feature_path"] = l.feature_path;
  return j;
}

inline void write_manifest(const std::filesystem::path& path, const std::vector<ManifestLine>& lines) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write manifest " + path.string());
  for (const auto& l : lines) out << to_json(l).dump() << '\n';
}

/// Parses a JSON Lines manifest and groups lines by image_id (first-seen
/// order). Captions longer than `max_tokens` are dropped with a warning.
inline Manifest load_manifest(const std::filesystem::path& path, std::size_t max_tokens = kDefaultMaxCaptionTokens,
                              std::ostream* warn = &std::cerr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open manifest " + path.string());
  const auto root = path.parent_path();
  Manifest m;
  std::unordered_map<std::string, std::size_t> index;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    const std::string where = path.string() + ":" + std::to_string(lineno);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(where + ": malformed JSON: " + e.what());
    }
    if (!j.is_object() || !j.contains("image_id") || !j["image_id"].is_string() || !j.contains("split") ||
        !j["split"].is_string() || !j.contains("caption") || !j["caption"].is_string()) {
      throw FormatError(where + ": expected string fields image_id, split, caption");
    }
    auto split = parse_split(j["split"].get<std::string>());
    if (!split) throw FormatError(where + ": unknown split '" + j["split"].get<std::string>() + "'");
    auto opt_path = [&](const char* key) -> std::string {
      if (!j.contains(key)) return {};
      if (!j[key].is_string()) throw FormatError(where + ": " + key + " must be a string");
      std::filesystem::path p = j[key].get<std::string>();
      return (p.is_absolute() ? p : root / p).string();
    };
    const auto id = j["image_id"].get<std::string>();
    auto [it, fresh] = index.emplace(id, m.samples.size());
    if (fresh) {
      RawSample s;
      s.image_id = id;
      s.split = *split;
      s.image_path = opt_path("image_path");
      s.feature_path = opt_path("feature_path");
      m.samples.push_back(std::move(s));
    }
    auto& sample = m.samples[it->second];
    if (sample.split != *split) throw FormatError(where + ": image " + id + " appears in two splits");
    auto caption = j["caption"].get<std::string>();
    auto tokens = tokenize(caption);
    if (tokens.size() > max_tokens) {
      ++m.rejected_captions;
      if (warn) *warn << "warning: " << where << ": caption of " << tokens.size() << " tokens exceeds " << max_tokens
                      << ", skipped\n";
      continue;
    }
    sample.captions.push_back(std::move(caption));
    sample.caption_tokens.push_back(std::move(tokens));
  }
  std::erase_if(m.samples, [](const RawSample& s) { return s.captions.empty(); });
  return m;
}

// ---------------------------------------------------------------------------
// Binary files

namespace detail {

inline void write_u32(std::ostream& out, std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); }

inline std::uint32_t read_u32(std::istream& in, const std::string& what) {
  std::uint32_t v = 0;
  if (!in.read(reinterpret_cast<char*>(&v), 4)) throw FormatError(what + ": truncated header");
  return v;
}

inline std::string read_all(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

}  // namespace detail

/// "CAPF", u32 P, u32 N, then P*N float32 little-endian, row-major.
inline void save_feature_file(const std::filesystem::path& path, const AnnotationGrid& grid) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write("CAPF", 4);
  detail::write_u32(out, static_cast<std::uint32_t>(grid.positions));
  detail::write_u32(out, static_cast<std::uint32_t>(grid.channels));
  for (double v : grid.values) {
    const float f = static_cast<float>(v);
    out.write(reinterpret_cast<const char*>(&f), 4);
  }
}

inline AnnotationGrid load_feature_file(const std::filesystem::path& path) {
  const std::string bytes = detail::read_all(path);
  const std::string what = path.string();
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "CAPF", 4) != 0) throw FormatError(what + ": bad magic bytes");
  std::uint32_t p = 0, n = 0;
  std::memcpy(&p, bytes.data() + 4, 4);
  std::memcpy(&n, bytes.data() + 8, 4);
  const std::size_t expected = static_cast<std::size_t>(p) * n * 4;
  if (p == 0 || n == 0 || bytes.size() - 12 != expected) {
    throw FormatError(what + ": header declares " + std::to_string(p) + "x" + std::to_string(n) + " (" +
                      std::to_string(expected) + " bytes) but payload has " + std::to_string(bytes.size() - 12));
  }
  std::vector<double> values(static_cast<std::size_t>(p) * n);
  for (std::size_t i = 0; i < values.size(); ++i) {
    float f;
    std::memcpy(&f, bytes.data() + 12 + 4 * i, 4);
    if (!std::isfinite(f)) throw FormatError(what + ": non-finite value at index " + std::to_string(i));
    values[i] = f;
  }
  return AnnotationGrid(p, n, std::move(values));
}

/// Channels-first RGB image with values in [0, 1].
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> values;  // 3 x H x W

  double& at(std::size_t c, std::size_t y, std::size_t x) { return values[(c * height + y) * width + x]; }
  double at(std::size_t c, std::size_t y, std::size_t x) const { return values[(c * height + y) * width + x]; }
};

/// "CAPI", u32 H, u32 W, then H*W interleaved RGB bytes.
inline void save_image(const std::filesystem::path& path, const Image& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write("CAPI", 4);
  detail::write_u32(out, static_cast<std::uint32_t>(img.height));
  detail::write_u32(out, static_cast<std::uint32_t>(img.width));
  std::vector<char> px(img.height * img.width * 3);
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = std::clamp(img.at(c, y, x), 0.0, 1.0);
        px[(y * img.width + x) * 3 + c] = static_cast<char>(static_cast<std::uint8_t>(std::lround(v * 255.0)));
      }
  out.write(px.data(), static_cast<std::streamsize>(px.size()));
}

inline Image load_image(const std::filesystem::path& path) {
  const std::string bytes = detail::read_all(path);
  const std::string what = path.string();
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "CAPI", 4) != 0) throw FormatError(what + ": bad magic bytes");
  std::uint32_t h = 0, w = 0;
  std::memcpy(&h, bytes.data() + 4, 4);
  std::memcpy(&w, bytes.data() + 8, 4);
  if (h == 0 || w == 0 || bytes.size() - 12 != static_cast<std::size_t>(h) * w * 3) {
    throw FormatError(what + ": image payload does not match header");
  }
  Image img{h, w, std::vector<double>(static_cast<std::size_t>(h) * w * 3)};
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        img.at(c, y, x) = static_cast<std::uint8_t>(bytes[12 + (y * w + x) * 3 + c]) / 255.0;
      }
  return img;
}

// ---------------------------------------------------------------------------
// Synthetic shapes dataset

namespace synthetic {

struct Color {
  const char* name;
  std::array<std::uint8_t, 3> rgb;
};

inline constexpr std::array<Color, 6> kColors{{{"red", {220, 40, 40}},
                                                {"green", {40, 170, 60}},
                                                {"blue", {40, 70, 220}},
                                                {"yellow", {235, 215, 40}},
                                                {"white", {245, 245, 245}},
                                                {"black", {20, 20, 20}}}};
inline constexpr std::array<const char*, 3> kShapes{"circle", "square", "triangle"};
inline constexpr std::size_t kSide = 32;

/// Every word the caption template can produce.
inline std::vector<std::string> template_words() {
  std::vector<std::string> w{"a", "on", "background"};
  for (const auto& c : kColors) w.emplace_back(c.name);
  for (const auto* s : kShapes) w.emplace_back(s);
  return w;
}

}  // namespace synthetic

struct SyntheticDataset {
  std::vector<ManifestLine> lines;
  std::vector<Image> images;  // parallel to lines
};

/// Deterministic dataset of 32x32 single-shape images captioned
/// "a <color> <shape> on a <color> background". Shape/color combinations are
/// drawn without replacement from a shuffled deck (90 combinations) so small
/// sets cover the vocabulary. The last count/10 images are test, the
/// count/10 before them val.
inline SyntheticDataset generate_synthetic_dataset(Rng& rng, std::size_t count) {
  using namespace synthetic;
  if (count == 0) throw std::invalid_argument("synthetic dataset needs count >= 1");
  struct Combo {
    std::size_t shape, fg, bg;
  };
  std::vector<Combo> all;
  for (std::size_t s = 0; s < kShapes.size(); ++s)
    for (std::size_t f = 0; f < kColors.size(); ++f)
      for (std::size_t b = 0; b < kColors.size(); ++b)
        if (f != b) all.push_back({s, f, b});
  std::vector<Combo> deck;
  const std::size_t n_val = count / 10, n_test = count / 10;
  const std::size_t n_train = count - n_val - n_test;
  SyntheticDataset ds;
  for (std::size_t i = 0; i < count; ++i) {
    if (deck.empty()) {
      deck = all;
      rng.shuffle(deck);
    }
    const Combo combo = deck.back();
    deck.pop_back();
    const double r = rng.uniform(6.0, 10.0);
    const double cx = rng.uniform(r, kSide - r), cy = rng.uniform(r, kSide - r);
    Image img{kSide, kSide, std::vector<double>(3 * kSide * kSide)};
    for (std::size_t y = 0; y < kSide; ++y) {
      for (std::size_t x = 0; x < kSide; ++x) {
        const double px = x + 0.5 - cx, py = y + 0.5 - cy;
        bool inside = false;
        switch (combo.shape) {
          case 0: inside = px * px + py * py <= r * r; break;
          case 1: inside = std::abs(px) <= r && std::abs(py) <= r; break;
          default: inside = py >= -r && py <= r && std::abs(px) <= (py + r) / 2.0; break;
        }
        const auto& rgb = kColors[inside ? combo.fg : combo.bg].rgb;
        for (std::size_t c = 0; c < 3; ++c) img.at(c, y, x) = rgb[c] / 255.0;
      }
    }
    char id[32];
    std::snprintf(id, sizeof id, "synth_%05zu", i);
    ManifestLine line;
    line.image_id = id;
    line.split = i < n_train ? Split::train : (i < n_train + n_val ? Split::val : Split::test);
    line.caption = std::string("a ") + kColors[combo.fg].name + " " + kShapes[combo.shape] + " on a " +
                   kColors[combo.bg].name + " background";
    line.image_path = std::string("images/") + id + ".rgb";
    ds.lines.push_back(std::move(line));
    ds.images.push_back(std::move(img));
  }
  return ds;
}

/// Writes manifest.jsonl and images/ under `dir`.
inline void write_dataset(const std::filesystem::path& dir, const SyntheticDataset& ds) {
  std::filesystem::create_directories(dir / "images");
  for (std::size_t i = 0; i < ds.lines.size(); ++i) save_image(dir / ds.lines[i].image_path, ds.images[i]);
  write_manifest(dir / "manifest.jsonl", ds.lines);
}

// ---------------------------------------------------------------------------
// Batching

/// One training example: an image index and one caption (<start> ... <end>).
struct CaptionPair {
  std::size_t sample = 0;
  std::vector<TokenId> tokens;
};

struct Batch {
  std::vector<std::size_t> samples;
  std::size_t steps = 0;         // T, the longest caption in the batch
  std::vector<TokenId> ids;      // B x T, right-padded with <pad>
  std::vector<std::size_t> lengths;

  std::size_t size() const { return samples.size(); }
  TokenId at(std::size_t b, std::size_t t) const { return ids[b * steps + t]; }
};

inline Batch make_batch(std::span<const CaptionPair> pairs) {
  if (pairs.empty()) throw std::invalid_argument("empty batch");
  Batch b;
  for (const auto& p : pairs) b.steps = std::max(b.steps, p.tokens.size());
  b.ids.assign(pairs.size() * b.steps, Vocabulary::kPad);
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    b.samples.push_back(pairs[i].sample);
    b.lengths.push_back(pairs[i].tokens.size());
    std::copy(pairs[i].tokens.begin(), pairs[i].tokens.end(), b.ids.begin() + i * b.steps);
  }
  return b;
}

inline std::vector<std::vector<TokenId>> unbatch(const Batch& b) {
  std::vector<std::vector<TokenId>> out;
  for (std::size_t i = 0; i < b.size(); ++i) {
    out.emplace_back(b.ids.begin() + i * b.steps, b.ids.begin() + i * b.steps + b.lengths[i]);
  }
  return out;
}

/// Shuffled mini-batches covering every pair exactly once.
inline std::vector<Batch> make_batches(std::vector<CaptionPair> pairs, std::size_t batch_size, Rng& rng) {
  if (batch_size == 0) throw std::invalid_argument("batch_size must be >= 1");
  rng.shuffle(pairs);
  std::vector<Batch> out;
  for (std::size_t i = 0; i < pairs.size(); i += batch_size) {
    const std::size_t n = std::min(batch_size, pairs.size() - i);
    out.push_back(make_batch(std::span<const CaptionPair>(pairs).subspan(i, n)));
  }
  return out;
}

}  // namespace capkit
