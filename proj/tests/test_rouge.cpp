#include "rouge_fixtures.hpp"
#include "support.hpp"

#include <gtest/gtest.h>

using namespace dsgpt;
using namespace dsgpt::testing;

namespace {

double round2(double x) { return std::round(x * 100.0) / 100.0; }

// Every sequence over {a, b, c} of length 0..max_len.
std::vector<RougeTokens> all_sequences(std::size_t max_len) {
  std::vector<RougeTokens> out{{}};
  std::vector<RougeTokens> frontier{{}};
  for (std::size_t len = 1; len <= max_len; ++len) {
    std::vector<RougeTokens> next;
    for (const auto& s : frontier) {
      for (const char* c : {"a", "b", "c"}) {
        auto t = s;
        t.emplace_back(c);
        next.push_back(t);
      }
    }
    out.insert(out.end(), next.begin(), next.end());
    frontier = std::move(next);
  }
  return out;
}

}  // namespace

TEST(RougeN, HandCountedFixtures) {
  for (const auto& f : rouge_n_fixtures()) {
    const auto s = rouge_n(chars(f.candidate), chars(f.reference), f.n);
    EXPECT_EQ(round2(s.precision), f.precision) << f.candidate << " / " << f.reference;
    EXPECT_EQ(round2(s.recall), f.recall) << f.candidate << " / " << f.reference;
    EXPECT_EQ(round2(s.f1), f.f1) << f.candidate << " / " << f.reference;
  }
  EXPECT_THROW(rouge_n(chars("a"), chars("a"), 0), Error);
}

TEST(RougeN, SwapExchangesPrecisionAndRecall) {
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<int> len(0, 10), sym(0, 3);
  for (int trial = 0; trial < 500; ++trial) {
    RougeTokens a, b;
    for (int i = len(rng); i > 0; --i) a.emplace_back(1, static_cast<char>('a' + sym(rng)));
    for (int i = len(rng); i > 0; --i) b.emplace_back(1, static_cast<char>('a' + sym(rng)));
    for (std::size_t n : {1u, 2u, 3u}) {
      const auto ab = rouge_n(a, b, n);
      const auto ba = rouge_n(b, a, n);
      EXPECT_DOUBLE_EQ(ab.precision, ba.recall);
      EXPECT_DOUBLE_EQ(ab.recall, ba.precision);
      EXPECT_DOUBLE_EQ(ab.f1, ba.f1);
      EXPECT_GE(ab.f1, 0.0);
      EXPECT_LE(ab.f1, 100.0);
    }
    const auto l1 = rouge_l(a, b), l2 = rouge_l(b, a);
    EXPECT_DOUBLE_EQ(l1.precision, l2.recall);
    EXPECT_DOUBLE_EQ(l1.f1, l2.f1);
  }
}

TEST(RougeL, HandExamples) {
  const auto s = rouge_l(chars("abcde"), chars("ace"));
  EXPECT_DOUBLE_EQ(s.precision, 60.0);
  EXPECT_DOUBLE_EQ(s.recall, 100.0);
  EXPECT_DOUBLE_EQ(s.f1, 75.0);
  const auto same = rouge_l(chars("xyz"), chars("xyz"));
  EXPECT_DOUBLE_EQ(same.f1, 100.0);
  const auto empty = rouge_l({}, chars("abc"));
  EXPECT_EQ(empty.precision, 0.0);
  EXPECT_EQ(empty.recall, 0.0);
  EXPECT_EQ(empty.f1, 0.0);
  EXPECT_EQ(rouge_l({}, {}).f1, 0.0);
}

TEST(RougeL, MatchesBruteForceOnShortSequences) {
  // Pairs up to length 6 here; the acceptance run covers length 8.
  const auto seqs = all_sequences(6);
  std::size_t checked = 0;
  for (std::size_t i = 0; i < seqs.size(); i += 7) {
    for (std::size_t j = 0; j < seqs.size(); j += 3) {
      ASSERT_EQ(lcs_length(seqs[i], seqs[j]), brute_force_lcs(seqs[i], seqs[j]));
      ++checked;
    }
  }
  EXPECT_GT(checked, 10000u);
}

TEST(RougeL, AppendingToReferenceBoundsLcsGrowth) {
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<int> len(1, 8), sym(0, 2);
  for (int trial = 0; trial < 500; ++trial) {
    RougeTokens c, r, extra;
    for (int i = len(rng); i > 0; --i) c.emplace_back(1, static_cast<char>('a' + sym(rng)));
    for (int i = len(rng); i > 0; --i) r.emplace_back(1, static_cast<char>('a' + sym(rng)));
    for (int i = len(rng); i > 0; --i) extra.emplace_back(1, static_cast<char>('a' + sym(rng)));
    // LCS never shrinks and grows by at most |extra|.
    auto longer = r;
    longer.insert(longer.end(), extra.begin(), extra.end());
    EXPECT_GE(lcs_length(c, longer), lcs_length(c, r));
    EXPECT_LE(lcs_length(c, longer), lcs_length(c, r) + extra.size());
  }
}

TEST(Tokens, CharAndVocabModes) {
  EXPECT_EQ(rouge_tokens("aé✓", RougeTokenization::char_level), (RougeTokens{"a", "é", "✓"}));
  const auto v = build_vocab({"ab"});
  EXPECT_EQ(rouge_tokens("abz", RougeTokenization::vocab_tokens, &v), (RougeTokens{"a", "b", "<UNK>"}));
  EXPECT_THROW(rouge_tokens("ab", RougeTokenization::vocab_tokens), Error);
  EXPECT_EQ(parse_rouge_tokenization("char"), RougeTokenization::char_level);
  EXPECT_THROW(parse_rouge_tokenization("words"), Error);
}

TEST(Corpus, UnweightedMean) {
  const auto same = corpus_rouge({{"abc", "abc"}, {"xy", "xy"}}, RougeTokenization::char_level);
  EXPECT_DOUBLE_EQ(same.rougeL.f1, 100.0);
  EXPECT_DOUBLE_EQ(same.rouge1.recall, 100.0);
  const auto half = corpus_rouge({{"abc", "abc"}, {"xyz", "abc"}}, RougeTokenization::char_level);
  EXPECT_DOUBLE_EQ(half.rouge1.f1, 50.0);
  EXPECT_DOUBLE_EQ(half.rougeL.precision, 50.0);
  // Unweighted: a long pair counts no more than a short one.
  const auto mixed = corpus_rouge({{"a", "a"}, {"abcdefgh", "zzzzzzzz"}}, RougeTokenization::char_level);
  EXPECT_DOUBLE_EQ(mixed.rougeL.f1, 50.0);
  const auto single = corpus_rouge({{"abcde", "ace"}}, RougeTokenization::char_level);
  EXPECT_DOUBLE_EQ(single.rougeL.f1, rouge_l(chars("abcde"), chars("ace")).f1);
  EXPECT_THROW(corpus_rouge({}, RougeTokenization::char_level), Error);
}
