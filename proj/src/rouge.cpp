#include "dsgpt/rouge.hpp"

#include <algorithm>
#include <map>

namespace dsgpt {

namespace {

RougeScore from_counts(double matches, double candidate_total, double reference_total) {
  RougeScore s;
  s.precision = candidate_total > 0 ? 100.0 * matches / candidate_total : 0.0;
  s.recall = reference_total > 0 ? 100.0 * matches / reference_total : 0.0;
  s.f1 = (s.precision + s.recall) > 0 ? 2.0 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
  return s;
}

std::map<RougeTokens, std::size_t> ngram_counts(const RougeTokens& tokens, std::size_t n) {
  std::map<RougeTokens, std::size_t> counts;
  if (tokens.size() < n) return counts;
  for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
    ++counts[RougeTokens(tokens.begin() + static_cast<std::ptrdiff_t>(i),
                         tokens.begin() + static_cast<std::ptrdiff_t>(i + n))];
  }
  return counts;
}

}  // namespace

RougeTokenization parse_rouge_tokenization(std::string_view text) {
  if (text == "char") return RougeTokenization::char_level;
  if (text == "vocab_tokens" || text == "vocab") return RougeTokenization::vocab_tokens;
  throw Error("unknown ROUGE tokenization '" + std::string(text) + "' (expected char or vocab_tokens)");
}

RougeScore rouge_n(const RougeTokens& candidate, const RougeTokens& reference, std::size_t n) {
  if (n == 0) throw Error("rouge_n needs n >= 1");
  const auto cand = ngram_counts(candidate, n);
  const auto ref = ngram_counts(reference, n);
  std::size_t matches = 0;
  for (const auto& [gram, count] : cand) {
    auto it = ref.find(gram);
    if (it != ref.end()) matches += std::min(count, it->second);
  }
  const auto total = [n](const RougeTokens& t) { return t.size() >= n ? static_cast<double>(t.size() - n + 1) : 0.0; };
  return from_counts(static_cast<double>(matches), total(candidate), total(reference));
}

std::size_t lcs_length(const RougeTokens& a, const RougeTokens& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

RougeScore rouge_l(const RougeTokens& candidate, const RougeTokens& reference) {
  return from_counts(static_cast<double>(lcs_length(candidate, reference)), static_cast<double>(candidate.size()),
                     static_cast<double>(reference.size()));
}

RougeScores rouge_all(const RougeTokens& candidate, const RougeTokens& reference) {
  return {rouge_n(candidate, reference, 1), rouge_n(candidate, reference, 2), rouge_l(candidate, reference)};
}

RougeTokens rouge_tokens(std::string_view text, RougeTokenization mode, const Vocabulary* vocab) {
  RougeTokens out;
  if (mode == RougeTokenization::char_level) {
    for (auto ch : split_utf8(text)) out.emplace_back(ch);
    return out;
  }
  if (!vocab) throw Error("vocab_tokens ROUGE needs a vocabulary");
  for (TokenId id : encode(text, *vocab)) out.push_back(vocab->token(id));
  return out;
}

RougeScores corpus_rouge(const std::vector<std::pair<std::string, std::string>>& pairs, RougeTokenization mode,
                         const Vocabulary* vocab) {
  if (pairs.empty()) throw Error("corpus ROUGE over an empty list");
  RougeScores sum;
  auto add = [](RougeScore& acc, const RougeScore& s) {
    acc.precision += s.precision;
    acc.recall += s.recall;
    acc.f1 += s.f1;
  };
  for (const auto& [cand, ref] : pairs) {
    const auto s = rouge_all(rouge_tokens(cand, mode, vocab), rouge_tokens(ref, mode, vocab));
    add(sum.rouge1, s.rouge1);
    add(sum.rouge2, s.rouge2);
    add(sum.rougeL, s.rougeL);
  }
  const double n = static_cast<double>(pairs.size());
  for (RougeScore* s : {&sum.rouge1, &sum.rouge2, &sum.rougeL}) {
    s->precision /= n;
    s->recall /= n;
    s->f1 /= n;
  }
  return sum;
}

}  // namespace dsgpt
