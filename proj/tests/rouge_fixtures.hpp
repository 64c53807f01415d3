#pragma once

// Hand-counted clipped n-gram overlaps over character tokens. Scores are
// percentages rounded to two decimals.

#include <cstddef>
#include <string>
#include <vector>

namespace dsgpt::testing {

struct RougeNFixture {
  std::string candidate;
  std::string reference;
  std::size_t n;
  double precision, recall, f1;
};

inline const std::vector<RougeNFixture>& rouge_n_fixtures() {
  static const std::vector<RougeNFixture> table{
      {"abc", "abd", 1, 66.67, 66.67, 66.67},     // a, b match
      {"abc", "abc", 1, 100.00, 100.00, 100.00},  // identity
      {"abc", "xyz", 1, 0.00, 0.00, 0.00},        // disjoint
      {"aaa", "a", 1, 33.33, 100.00, 50.00},      // a clipped to 1
      {"a", "aaa", 1, 100.00, 33.33, 50.00},      // 1 match of 3
      {"abab", "ab", 2, 33.33, 100.00, 50.00},    // ab×2 clipped to 1 of 3 bigrams
      {"abcd", "bcda", 2, 66.67, 66.67, 66.67},   // bc, cd
      {"a", "ab", 2, 0.00, 0.00, 0.00},           // no candidate bigram
      {"", "abc", 1, 0.00, 0.00, 0.00},           // empty candidate
      {"abc", "", 1, 0.00, 0.00, 0.00},           // empty reference
      {"aab", "abb", 1, 66.67, 66.67, 66.67},     // min(2,1) + min(1,2)
      {"aabb", "ab", 1, 50.00, 100.00, 66.67},    // 2 of 4 vs 2 of 2
      {"abcde", "ace", 1, 60.00, 100.00, 75.00},  // 3 of 5 vs 3 of 3
      {"abcde", "ace", 2, 0.00, 0.00, 0.00},      // ab bc cd de vs ac ce
      {"xyzxy", "xy", 2, 25.00, 100.00, 40.00},   // xy×2 clipped to 1 of 4
      {"ab", "abcdef", 1, 100.00, 33.33, 50.00},  // 2 of 2 vs 2 of 6
      {"abcdef", "fedcba", 1, 100.00, 100.00, 100.00},
      {"abcdef", "fedcba", 2, 0.00, 0.00, 0.00},  // every bigram reversed
      {"aaaa", "aa", 2, 33.33, 100.00, 50.00},    // aa×3 clipped to 1
      {"abcab", "cabca", 3, 100.00, 100.00, 100.00},  // abc bca cab on both sides
  };
  return table;
}

}  // namespace dsgpt::testing
