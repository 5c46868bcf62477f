#pragma once

// Encoders/decoders between raw modality values and vocabulary tokens.
//
// Vocabulary layout (33025 ids):
//   [0, 32000)      text subwords (the byte tokenizer uses [0, 256))
//   [0, 1024)       discrete values, sharing ids with low text; the stream
//                   schema says which one a token is
//   [32000, 33024)  uniform bins over [-1, 1] for continuous values
//   33024           observation/action separator

#include <algorithm>
#include <cmath>
#include <compare>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "seqpolicy/error.hpp"

namespace seqpolicy {

inline constexpr int32_t kTextVocabSize = 32000;
inline constexpr int32_t kDiscreteVocabSize = 1024;
inline constexpr int32_t kContinuousBase = 32000;
inline constexpr int32_t kNumBins = 1024;
inline constexpr int32_t kSeparatorToken = 33024;
inline constexpr int32_t kVocabSize = 33025;
inline constexpr int kPatchSize = 16;

class TokenId {
 public:
  constexpr TokenId() = default;
  constexpr explicit TokenId(int32_t value) : value_(value) {}

  constexpr int32_t value() const { return value_; }
  constexpr bool valid() const { return value_ >= 0 && value_ < kVocabSize; }
  constexpr bool is_continuous() const {
    return value_ >= kContinuousBase && value_ < kContinuousBase + kNumBins;
  }
  constexpr bool is_separator() const { return value_ == kSeparatorToken; }

  friend constexpr auto operator<=>(TokenId, TokenId) = default;

 private:
  int32_t value_ = 0;
};

inline constexpr TokenId kSeparator{kSeparatorToken};

enum class Modality : uint8_t { kText = 0, kImage = 1, kDiscrete = 2, kContinuous = 3 };

inline const char* to_string(Modality m) {
  switch (m) {
    case Modality::kText:
      return "text";
    case Modality::kImage:
      return "image";
    case Modality::kDiscrete:
      return "discrete";
    case Modality::kContinuous:
      return "continuous";
  }
  return "unknown";
}

// Per-stream metadata. For images the shape is {H, W, C}; text streams have
// an empty shape (length varies with the string).
struct TensorSchema {
  std::string key;
  std::vector<int64_t> shape;
  Modality modality = Modality::kContinuous;
  double low = -1.0;
  double high = 1.0;
  bool compand = false;
  bool is_action = false;

  // Companding is switched on exactly when the declared range leaves [-1, 1].
  static TensorSchema continuous(std::string key, std::vector<int64_t> shape, double low, double high,
                                 bool is_action = false) {
    TensorSchema s;
    s.key = std::move(key);
    s.shape = std::move(shape);
    s.modality = Modality::kContinuous;
    s.low = low;
    s.high = high;
    s.compand = low < -1.0 || high > 1.0;
    s.is_action = is_action;
    return s;
  }

  // `num_values` bounds the legal values for sampling; encoding accepts the
  // whole [0, 1024) range regardless.
  static TensorSchema discrete(std::string key, std::vector<int64_t> shape, bool is_action = false,
                               int num_values = kDiscreteVocabSize) {
    TensorSchema s;
    s.key = std::move(key);
    s.shape = std::move(shape);
    s.modality = Modality::kDiscrete;
    s.low = 0;
    s.high = num_values - 1;
    s.is_action = is_action;
    return s;
  }

  static TensorSchema text(std::string key) {
    TensorSchema s;
    s.key = std::move(key);
    s.modality = Modality::kText;
    s.low = 0;
    s.high = 0;
    return s;
  }

  static TensorSchema image(std::string key, int64_t height, int64_t width, int64_t channels) {
    TensorSchema s;
    s.key = std::move(key);
    s.shape = {height, width, channels};
    s.modality = Modality::kImage;
    s.low = 0;
    s.high = 255;
    return s;
  }

  size_t element_count() const {
    size_t n = 1;
    for (int64_t d : shape) n *= static_cast<size_t>(d);
    return n;
  }

  void validate() const {
    require(!key.empty(), ErrorCode::kSchema, "schema key must be non-empty");
    for (int64_t d : shape)
      if (!(d > 0)) fail(ErrorCode::kSchema, "schema '" + key + "' has a non-positive dimension");
    switch (modality) {
      case Modality::kContinuous:
        if (!(std::isfinite(low) && std::isfinite(high) && low < high))
          fail(ErrorCode::kSchema, "schema '" + key + "' needs a finite range with low < high");
        if (!(compand || (low >= -1.0 && high <= 1.0)))
          fail(ErrorCode::kSchema, "schema '" + key + "' range exceeds [-1, 1] without companding");
        break;
      case Modality::kImage:
        if (!(shape.size() == 3)) fail(ErrorCode::kSchema, "image schema '" + key + "' needs {H, W, C}");
        if (!(shape[0] % kPatchSize == 0 && shape[1] % kPatchSize == 0))
          fail(ErrorCode::kShape, "image schema '" + key + "' dimensions must be multiples of 16");
        require(!is_action, ErrorCode::kSchema, "images cannot be actions");
        break;
      case Modality::kText:
        if (!(shape.empty())) fail(ErrorCode::kSchema, "text schema '" + key + "' has no shape");
        require(!is_action, ErrorCode::kSchema, "text cannot be an action stream here");
        break;
      case Modality::kDiscrete:
        if (!(low == 0 && high >= 0 && high < kDiscreteVocabSize))
          fail(ErrorCode::kSchema, "discrete schema '" + key + "' must declare values within [0, 1024)");
        break;
    }
  }

  friend bool operator==(const TensorSchema&, const TensorSchema&) = default;
};

struct MuLawParams {
  double mu = 100.0;
  double M = 256.0;
};

// sgn(x) * log(|x| mu + 1) / log(M mu + 1). The result is not clipped.
inline double mu_law_compand(double x, const MuLawParams& p = {}) {
  require(std::isfinite(x), ErrorCode::kInvalidValue, "mu_law_compand on non-finite input");
  require(p.mu > 0 && p.M > 0, ErrorCode::kInvalidValue, "mu-law parameters must be positive");
  if (x == 0.0) return 0.0;
  const double magnitude = std::log1p(std::abs(x) * p.mu) / std::log1p(p.M * p.mu);
  return std::signbit(x) ? -magnitude : magnitude;
}

inline double mu_law_expand(double y, const MuLawParams& p = {}) {
  require(std::isfinite(y), ErrorCode::kInvalidValue, "mu_law_expand on non-finite input");
  require(std::abs(y) <= 1.0, ErrorCode::kRange, "mu_law_expand input outside [-1, 1]");
  require(p.mu > 0 && p.M > 0, ErrorCode::kInvalidValue, "mu-law parameters must be positive");
  if (y == 0.0) return 0.0;
  const double magnitude = std::expm1(std::abs(y) * std::log1p(p.M * p.mu)) / p.mu;
  return std::signbit(y) ? -magnitude : magnitude;
}

// Half-open bins of width 2/1024 over [-1, 1]; the top bin is closed.
inline TokenId bin_continuous(double v) {
  require(!std::isnan(v), ErrorCode::kInvalidValue, "bin_continuous on NaN");
  require(std::abs(v) <= 1.0, ErrorCode::kRange, "bin_continuous input outside [-1, 1]");
  const auto bin = static_cast<int32_t>(std::floor((v + 1.0) * (kNumBins / 2)));
  return TokenId(kContinuousBase + std::clamp(bin, 0, kNumBins - 1));
}

inline double unbin_continuous(TokenId t) {
  if (!(t.is_continuous()))
    fail(ErrorCode::kDomain, "token " + std::to_string(t.value()) + " is outside the continuous range");
  return ((t.value() - kContinuousBase) + 0.5) / kNumBins * 2.0 - 1.0;
}

inline void check_element_count(size_t count, const TensorSchema& s) {
  if (!(count == s.element_count()))
    fail(ErrorCode::kSchema, "stream '" + s.key + "' expects " + std::to_string(s.element_count()) +
                                 " values, got " + std::to_string(count));
}

inline std::vector<TokenId> encode_continuous(std::span<const double> values, const TensorSchema& s,
                                              const MuLawParams& p = {}) {
  if (!(s.modality == Modality::kContinuous))
    fail(ErrorCode::kSchema, "stream '" + s.key + "' is not continuous");
  check_element_count(values.size(), s);
  std::vector<TokenId> tokens;
  tokens.reserve(values.size());
  for (double x : values) {
    if (!(std::isfinite(x))) fail(ErrorCode::kInvalidValue, "non-finite value in stream '" + s.key + "'");
    const double y = s.compand ? mu_law_compand(x, p) : x;
    tokens.push_back(bin_continuous(std::clamp(y, -1.0, 1.0)));
  }
  return tokens;
}

inline std::vector<double> decode_continuous(std::span<const TokenId> tokens, const TensorSchema& s,
                                             const MuLawParams& p = {}) {
  check_element_count(tokens.size(), s);
  std::vector<double> values;
  values.reserve(tokens.size());
  for (TokenId t : tokens) {
    const double y = unbin_continuous(t);
    values.push_back(s.compand ? mu_law_expand(y, p) : y);
  }
  return values;
}

inline std::vector<TokenId> encode_discrete(std::span<const int32_t> values, const TensorSchema& s) {
  check_element_count(values.size(), s);
  std::vector<TokenId> tokens;
  tokens.reserve(values.size());
  for (int32_t v : values) {
    if (!(v >= 0 && v < kDiscreteVocabSize))
      fail(ErrorCode::kRange,
           "discrete value " + std::to_string(v) + " outside [0, 1024) in '" + s.key + "'");
    tokens.emplace_back(v);
  }
  return tokens;
}

inline std::vector<int32_t> decode_discrete(std::span<const TokenId> tokens, const TensorSchema& s) {
  check_element_count(tokens.size(), s);
  std::vector<int32_t> values;
  values.reserve(tokens.size());
  for (TokenId t : tokens) {
    if (!(t.value() >= 0 && t.value() < kDiscreteVocabSize))
      fail(ErrorCode::kDomain, "token " + std::to_string(t.value()) + " is not a discrete value");
    values.push_back(t.value());
  }
  return values;
}

// ---------------------------------------------------------------------------
// Text

class TextTokenizer {
 public:
  virtual ~TextTokenizer() = default;
  virtual std::vector<TokenId> encode(std::string_view text) const = 0;
  virtual std::string decode(std::span<const TokenId> tokens) const = 0;
};

// Byte b -> token b.
class ByteTokenizer final : public TextTokenizer {
 public:
  std::vector<TokenId> encode(std::string_view text) const override {
    std::vector<TokenId> tokens;
    tokens.reserve(text.size());
    for (unsigned char c : text) tokens.emplace_back(static_cast<int32_t>(c));
    return tokens;
  }

  std::string decode(std::span<const TokenId> tokens) const override {
    std::string text;
    text.reserve(tokens.size());
    for (TokenId t : tokens) {
      if (!(t.value() >= 0 && t.value() < 256))
        fail(ErrorCode::kDomain, "token " + std::to_string(t.value()) + " is not a byte");
      text.push_back(static_cast<char>(t.value()));
    }
    return text;
  }
};

inline const TextTokenizer& byte_tokenizer() {
  static const ByteTokenizer instance;
  return instance;
}

inline std::vector<TokenId> encode_text(std::string_view text,
                                        const TextTokenizer& tokenizer = byte_tokenizer()) {
  auto tokens = tokenizer.encode(text);
  for (TokenId t : tokens)
    if (!(t.value() >= 0 && t.value() < kTextVocabSize))
      fail(ErrorCode::kContract, "tokenizer emitted id " + std::to_string(t.value()) + " outside [0, 32000)");
  return tokens;
}

inline std::string decode_text(std::span<const TokenId> tokens,
                               const TextTokenizer& tokenizer = byte_tokenizer()) {
  return tokenizer.decode(tokens);
}

// ---------------------------------------------------------------------------
// Images

struct Interval {
  double lo = 0.0;
  double hi = 1.0;
  friend bool operator==(const Interval&, const Interval&) = default;
};

// Row-major H x W x C bytes.
struct Image {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<uint8_t> pixels;

  uint8_t at(int r, int c, int ch) const {
    return pixels[(static_cast<size_t>(r) * width + c) * channels + ch];
  }
  friend bool operator==(const Image&, const Image&) = default;
};

struct BytePatch {
  int channels = 0;
  std::vector<uint8_t> pixels;  // 16 x 16 x C
  Interval rows;
  Interval cols;
};

struct ImagePatch {
  int channels = 0;
  std::vector<float> pixels;  // 16 x 16 x C, each in [-0.25, 0.25]
  Interval rows;
  Interval cols;
};

inline void check_image(const Image& image) {
  require(image.height > 0 && image.width > 0 && image.channels > 0, ErrorCode::kShape,
          "image dimensions must be positive");
  require(image.pixels.size() == static_cast<size_t>(image.height) * image.width * image.channels,
          ErrorCode::kShape, "image pixel buffer does not match its dimensions");
  if (!(image.height % kPatchSize == 0 && image.width % kPatchSize == 0))
    fail(ErrorCode::kShape, "image " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                                " is not divisible into 16x16 patches");
}

// Non-overlapping 16x16 patches in raster order over the patch grid.
inline std::vector<BytePatch> split_patches(const Image& image) {
  check_image(image);
  const int grid_rows = image.height / kPatchSize;
  const int grid_cols = image.width / kPatchSize;
  std::vector<BytePatch> patches;
  patches.reserve(static_cast<size_t>(grid_rows) * grid_cols);
  for (int pr = 0; pr < grid_rows; ++pr) {
    for (int pc = 0; pc < grid_cols; ++pc) {
      BytePatch patch;
      patch.channels = image.channels;
      patch.pixels.reserve(static_cast<size_t>(kPatchSize) * kPatchSize * image.channels);
      for (int r = 0; r < kPatchSize; ++r)
        for (int c = 0; c < kPatchSize; ++c)
          for (int ch = 0; ch < image.channels; ++ch)
            patch.pixels.push_back(image.at(pr * kPatchSize + r, pc * kPatchSize + c, ch));
      patch.rows = {static_cast<double>(pr * kPatchSize) / image.height,
                    static_cast<double>((pr + 1) * kPatchSize) / image.height};
      patch.cols = {static_cast<double>(pc * kPatchSize) / image.width,
                    static_cast<double>((pc + 1) * kPatchSize) / image.width};
      patches.push_back(std::move(patch));
    }
  }
  return patches;
}

inline Image merge_patches(std::span<const BytePatch> patches, int height, int width, int channels) {
  Image image{height, width, channels, std::vector<uint8_t>(static_cast<size_t>(height) * width * channels)};
  check_image(image);
  const int grid_cols = width / kPatchSize;
  require(patches.size() == static_cast<size_t>(height / kPatchSize) * grid_cols, ErrorCode::kShape,
          "patch count does not match the image grid");
  for (size_t i = 0; i < patches.size(); ++i) {
    const int pr = static_cast<int>(i) / grid_cols;
    const int pc = static_cast<int>(i) % grid_cols;
    size_t src = 0;
    for (int r = 0; r < kPatchSize; ++r)
      for (int c = 0; c < kPatchSize; ++c)
        for (int ch = 0; ch < channels; ++ch)
          image.pixels[((static_cast<size_t>(pr) * kPatchSize + r) * width + pc * kPatchSize + c) * channels +
                       ch] = patches[i].pixels[src++];
  }
  return image;
}

// p -> (p / 127.5 - 1) / 4, i.e. [-1, 1] scaled by 1/sqrt(16).
inline float normalize_pixel(uint8_t p) { return static_cast<float>((p / 127.5 - 1.0) / 4.0); }

inline ImagePatch normalize_patch(const BytePatch& raw) {
  require(raw.pixels.size() == static_cast<size_t>(kPatchSize) * kPatchSize * raw.channels, ErrorCode::kShape,
          "patch buffer is not 16x16xC");
  ImagePatch patch;
  patch.channels = raw.channels;
  patch.rows = raw.rows;
  patch.cols = raw.cols;
  patch.pixels.reserve(raw.pixels.size());
  for (uint8_t p : raw.pixels) patch.pixels.push_back(normalize_pixel(p));
  return patch;
}

inline std::vector<ImagePatch> image_to_patches(const Image& image) {
  std::vector<ImagePatch> patches;
  for (const BytePatch& raw : split_patches(image)) patches.push_back(normalize_patch(raw));
  return patches;
}

// ---------------------------------------------------------------------------
// Raw stream values

struct TextValue {
  std::string text;
  friend bool operator==(const TextValue&, const TextValue&) = default;
};
struct DiscreteValue {
  std::vector<int32_t> values;  // row-major
  friend bool operator==(const DiscreteValue&, const DiscreteValue&) = default;
};
struct ContinuousValue {
  std::vector<double> values;  // row-major
  friend bool operator==(const ContinuousValue&, const ContinuousValue&) = default;
};

using Value = std::variant<TextValue, Image, DiscreteValue, ContinuousValue>;

inline Modality modality_of(const Value& v) { return static_cast<Modality>(v.index()); }

inline void check_value(const Value& v, const TensorSchema& s) {
  if (!(modality_of(v) == s.modality))
    fail(ErrorCode::kSchema, "value for '" + s.key + "' is " + to_string(modality_of(v)) + ", schema says " +
                                 to_string(s.modality));
  if (const auto* img = std::get_if<Image>(&v)) {
    check_image(*img);
    if (!(img->height == s.shape[0] && img->width == s.shape[1] && img->channels == s.shape[2]))
      fail(ErrorCode::kSchema, "image for '" + s.key + "' does not match its schema shape");
  } else if (const auto* d = std::get_if<DiscreteValue>(&v)) {
    check_element_count(d->values.size(), s);
  } else if (const auto* c = std::get_if<ContinuousValue>(&v)) {
    check_element_count(c->values.size(), s);
  }
}

// Token encoding of a non-image value.
inline std::vector<TokenId> encode_tokens(const Value& v, const TensorSchema& s,
                                          const TextTokenizer& tokenizer = byte_tokenizer()) {
  check_value(v, s);
  switch (s.modality) {
    case Modality::kText:
      return encode_text(std::get<TextValue>(v).text, tokenizer);
    case Modality::kDiscrete:
      return encode_discrete(std::get<DiscreteValue>(v).values, s);
    case Modality::kContinuous:
      return encode_continuous(std::get<ContinuousValue>(v).values, s);
    case Modality::kImage:
      break;
  }
  fail(ErrorCode::kSchema, "images are encoded as patches, not tokens");
}

// Inverse of encode_tokens for action-capable streams.
inline Value decode_tokens(std::span<const TokenId> tokens, const TensorSchema& s) {
  switch (s.modality) {
    case Modality::kDiscrete:
      return DiscreteValue{decode_discrete(tokens, s)};
    case Modality::kContinuous:
      return ContinuousValue{decode_continuous(tokens, s)};
    case Modality::kText:
      return TextValue{decode_text(tokens)};
    case Modality::kImage:
      break;
  }
  fail(ErrorCode::kSchema, "images cannot be decoded from tokens");
}

// Legal token range [lo, hi) for one element of a stream.
inline std::pair<int32_t, int32_t> legal_token_range(const TensorSchema& s) {
  switch (s.modality) {
    case Modality::kContinuous:
      return {kContinuousBase, kContinuousBase + kNumBins};
    case Modality::kDiscrete:
      return {0, static_cast<int32_t>(s.high) + 1};
    case Modality::kText:
      return {0, kTextVocabSize};
    case Modality::kImage:
      break;
  }
  fail(ErrorCode::kSchema, "images have no token range");
}

}  // namespace seqpolicy
