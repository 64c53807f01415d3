#pragma once

#include "dsgpt/autodiff.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace dsgpt {

/// Reserved ids. Task tokens <TASK_k> follow at kFirstTaskId + k.
namespace special {
inline constexpr TokenId kPad = 0;
inline constexpr TokenId kUnk = 1;
inline constexpr TokenId kBos = 2;
inline constexpr TokenId kSep = 3;
inline constexpr TokenId kEos = 4;
inline constexpr TokenId kFirstTaskId = 5;
inline constexpr std::size_t kFixedCount = 5;
}  // namespace special

inline constexpr std::size_t kDefaultTaskTokens = 4;

/// Rendered in place of UNK when decoding with specials stripped (U+FFFD).
inline constexpr std::string_view kUnkGlyph = "\xEF\xBF\xBD";

/// Malformed vocabulary input.
class VocabError : public Error {
 public:
  using Error::Error;
};

/// Splits UTF-8 text into code points. Invalid bytes become one-byte tokens.
std::vector<std::string_view> split_utf8(std::string_view text);

/// Character-level token ↔ id mapping with a reserved low id range for
/// PAD, UNK, BOS, SEP, EOS and the task tokens. Immutable after construction.
class Vocabulary {
 public:
  /// Specials only.
  explicit Vocabulary(std::size_t num_task_tokens = kDefaultTaskTokens);
  /// Specials followed by `content` in id order.
  Vocabulary(std::size_t num_task_tokens, const std::vector<std::string>& content);

  std::size_t size() const { return id_to_token_.size(); }
  std::size_t num_task_tokens() const { return num_task_tokens_; }
  std::size_t num_specials() const { return special::kFixedCount + num_task_tokens_; }

  TokenId task_id(std::size_t task) const;
  bool is_special(TokenId id) const { return id >= 0 && static_cast<std::size_t>(id) < num_specials(); }

  /// Ids the decoder never emits: PAD, BOS, SEP and task tokens.
  bool is_forbidden_output(TokenId id) const {
    return id == special::kPad || id == special::kBos || id == special::kSep ||
           (id >= special::kFirstTaskId && is_special(id));
  }

  std::optional<TokenId> find(std::string_view token) const;
  const std::string& token(TokenId id) const;

  /// One token per line in id order; newline, CR, tab and backslash escaped.
  std::string serialize() const;
  static Vocabulary deserialize(std::string_view text);

  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

  /// FNV-1a 64 of serialize(); checkpoints and datasets carry it.
  std::uint64_t hash() const;

  bool operator==(const Vocabulary& other) const { return id_to_token_ == other.id_to_token_; }

 private:
  std::size_t num_task_tokens_;
  std::vector<std::string> id_to_token_;
  std::unordered_map<std::string, TokenId> token_to_id_;
};

/// Every character with frequency ≥ min_freq, ranked by frequency then first
/// occurrence. max_size caps the total vocabulary size, specials included.
Vocabulary build_vocab(const std::vector<std::string>& corpus, std::size_t min_freq = 1,
                       std::optional<std::size_t> max_size = std::nullopt,
                       std::size_t num_task_tokens = kDefaultTaskTokens);

std::vector<TokenId> encode(std::string_view text, const Vocabulary& vocab);

std::string decode(std::span<const TokenId> ids, const Vocabulary& vocab, bool strip_specials = true);

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);

}  // namespace dsgpt
