#pragma once

#include "dsgpt/tokenizer.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace dsgpt {

/// Malformed dataset input or an example that cannot be formatted.
class DataError : public Error {
 public:
  using Error::Error;
};

struct RawExample {
  std::string source;
  std::string target;
  std::size_t task = 0;
  /// 1-based line in the originating file; 0 when generated in memory.
  std::size_t line = 0;

  bool operator==(const RawExample& o) const {
    return source == o.source && target == o.target && task == o.task;
  }
};

enum class LossMode { full_sequence, target_only };

std::string_view to_string(LossMode mode);
LossMode parse_loss_mode(std::string_view text);

/// [BOS, <TASK_k>, source…, SEP, target…, EOS], optionally followed by PAD.
struct SequenceExample {
  std::vector<TokenId> ids;
  /// Nonzero where the token at that position contributes to the loss.
  std::vector<std::uint8_t> loss_mask;
  /// Index of SEP in ids.
  std::size_t split_point = 0;
};

/// Formatted examples plus the hash of the vocabulary that produced them.
struct FormattedDataset {
  std::uint64_t vocab_hash = 0;
  std::vector<SequenceExample> examples;

  bool empty() const { return examples.empty(); }
  std::size_t size() const { return examples.size(); }
};

/// Parses UTF-8 JSONL with `source`, `target` and optional `task`. With
/// require_target off (prediction inputs), a missing target reads as empty
/// and an empty source is allowed.
std::vector<RawExample> load_jsonl(const std::filesystem::path& path, bool require_target = true);
std::vector<RawExample> parse_jsonl(std::string_view text, bool require_target = true);

void write_jsonl(const std::filesystem::path& path, const std::vector<RawExample>& examples);

/// Lays out one example. The source is cut from the right when the total
/// would exceed max_len; the target never is.
SequenceExample format_example(const RawExample& ex, const Vocabulary& vocab, std::size_t max_len, LossMode mode);

FormattedDataset format_dataset(const std::vector<RawExample>& examples, const Vocabulary& vocab,
                                std::size_t max_len, LossMode mode);

/// Appends PAD (mask 0) up to `length`.
void pad_to(SequenceExample& ex, std::size_t length);

/// Splits off the last 5% by line order (at least one example when n ≥ 2).
std::pair<std::vector<RawExample>, std::vector<RawExample>> split_validation(std::vector<RawExample> examples);

/// Desk-scale stand-ins for the pre-training corpus and the downstream
/// summarization tasks. All families draw from one shared alphabet.
enum class Family { A_compress, B_titlelike, C_reviewlike };

std::string_view to_string(Family family);
Family parse_family(std::string_view text);

/// Task index each family is tagged with.
std::size_t family_task(Family family);

struct SyntheticAlphabet {
  std::string lower = "abcdefghijklmnopqrstuvwx";
  std::string upper = "ABCDEFGHIJKL";
  std::string noise = "0123456789";
  /// Importance ranking for title attributes; earlier is more important.
  std::string attribute_priority = "qhaxmbtkcwlernfuodgpsvij";
  /// Lowercase tokens that act as sentiment markers in review-like data.
  std::string sentiment = "uvwx";
};

/// Deterministic per seed; sources within one call are distinct.
///   A_compress: letters with duplicate runs, repeats and digit noise →
///               distinct letters in first-occurrence order.
///   B_titlelike: one brand (upper) among attributes (lower) and digit
///               filler → brand, then the two highest-priority attributes
///               in source order.
///   C_reviewlike: one aspect (upper) and one sentiment marker among filler
///               → aspect, sentiment.
std::vector<RawExample> make_synthetic_family(Family family, std::size_t size, std::uint64_t seed,
                                              const SyntheticAlphabet& alphabet = {});

/// Target rule of A_compress, exposed for tests and tooling.
std::string compress_target(std::string_view source, const SyntheticAlphabet& alphabet = {});

}  // namespace dsgpt
