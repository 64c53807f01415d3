#pragma once

#include "dsgpt/tokenizer.hpp"

#include <string>
#include <utility>
#include <vector>

namespace dsgpt {

/// Percentages in [0, 100].
struct RougeScore {
  double precision = 0;
  double recall = 0;
  double f1 = 0;
};

struct RougeScores {
  RougeScore rouge1;
  RougeScore rouge2;
  RougeScore rougeL;
};

enum class RougeTokenization { char_level, vocab_tokens };

RougeTokenization parse_rouge_tokenization(std::string_view text);

using RougeTokens = std::vector<std::string>;

/// Clipped n-gram overlap.
RougeScore rouge_n(const RougeTokens& candidate, const RougeTokens& reference, std::size_t n);

/// Longest common subsequence over the whole sequence.
RougeScore rouge_l(const RougeTokens& candidate, const RougeTokens& reference);

std::size_t lcs_length(const RougeTokens& a, const RougeTokens& b);

RougeScores rouge_all(const RougeTokens& candidate, const RougeTokens& reference);

/// Splits text into scoring tokens: code points, or vocabulary tokens
/// (unknown characters collapse to UNK).
RougeTokens rouge_tokens(std::string_view text, RougeTokenization mode, const Vocabulary* vocab = nullptr);

/// Unweighted mean of per-pair precision, recall and F1.
RougeScores corpus_rouge(const std::vector<std::pair<std::string, std::string>>& pairs, RougeTokenization mode,
                         const Vocabulary* vocab = nullptr);

}  // namespace dsgpt
