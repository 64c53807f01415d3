#include "dsgpt/decoder.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace dsgpt {

std::string_view to_string(Strategy s) { return s == Strategy::greedy ? "greedy" : "beam"; }

Strategy parse_strategy(std::string_view text) {
  if (text == "greedy") return Strategy::greedy;
  if (text == "beam") return Strategy::beam;
  throw ConfigError("unknown strategy '" + std::string(text) + "' (expected greedy or beam)");
}

std::string_view to_string(StopReason r) {
  switch (r) {
    case StopReason::eos: return "eos";
    case StopReason::max_len: return "max_len";
    case StopReason::truncated: return "truncated";
  }
  return "?";
}

void GenerationConfig::validate() const {
  std::vector<std::string> problems;
  if (beam_width < 1) problems.push_back("beam_width must be >= 1");
  if (max_new_tokens < 0) problems.push_back("max_new_tokens must be >= 0");
  if (truncate_to && *truncate_to < 0) problems.push_back("truncate_to must be >= 0");
  if (!(eos_amplification >= 1.0) || !std::isfinite(eos_amplification)) {
    problems.push_back("eos_amplification must be a finite value >= 1");
  }
  if (problems.empty()) return;
  std::string msg = "invalid generation config:";
  for (const auto& p : problems) msg += " " + p + ";";
  throw ConfigError(msg);
}

std::size_t GenerationResult::length() const {
  return ids.size() - ((!ids.empty() && ids.back() == special::kEos) ? 1 : 0);
}

StepDistribution step_distribution(const LanguageModel& model, const Vocabulary& vocab,
                                   std::span<const TokenId> prefix, double eos_amplification) {
  if (prefix.empty()) throw Error("next-token distribution needs a nonempty prefix");
  if (!(eos_amplification >= 1.0)) throw ConfigError("eos_amplification must be >= 1");
  const Eigen::VectorXd logits = model.next_logits(prefix);
  if (static_cast<std::size_t>(logits.size()) != vocab.size()) {
    throw DimensionError("model emits " + std::to_string(logits.size()) + " logits for a vocabulary of " +
                         std::to_string(vocab.size()));
  }
  StepDistribution out;
  const double m = logits.maxCoeff();
  const double lse = m + std::log((logits.array() - m).exp().sum());
  out.model_log_probs = logits.array() - lse;
  out.weights = out.model_log_probs.array().exp();
  for (Eigen::Index v = 0; v < out.weights.size(); ++v) {
    if (vocab.is_forbidden_output(static_cast<TokenId>(v))) out.weights(v) = 0.0;
  }
  out.weights(special::kEos) *= eos_amplification;
  out.total = out.weights.sum();
  if (!(out.total > 0.0) || !std::isfinite(out.total)) {
    throw NumericError("no probability mass left on permitted tokens");
  }
  return out;
}

Eigen::VectorXd next_distribution(const LanguageModel& model, const Vocabulary& vocab,
                                  std::span<const TokenId> prefix, double eos_amplification) {
  auto d = step_distribution(model, vocab, prefix, eos_amplification);
  return d.weights / d.total;
}

namespace {

void check_context(const LanguageModel& model, std::span<const TokenId> prompt, const GenerationConfig& cfg) {
  cfg.validate();
  if (prompt.empty()) throw Error("generation needs a nonempty prompt");
  if (prompt.size() + static_cast<std::size_t>(cfg.max_new_tokens) > model.max_seq_len()) {
    throw Error("context overflow: prompt of " + std::to_string(prompt.size()) + " tokens plus " +
                std::to_string(cfg.max_new_tokens) + " new tokens exceeds max_seq_len " +
                std::to_string(model.max_seq_len()));
  }
}

GenerationResult finalize(GenerationResult r, const GenerationConfig& cfg, const Vocabulary& vocab) {
  if (cfg.truncate_to && r.length() > static_cast<std::size_t>(*cfg.truncate_to)) {
    const auto keep = static_cast<std::size_t>(*cfg.truncate_to);
    r.ids.resize(keep);
    r.token_log_probs.resize(keep);
    r.stop = StopReason::truncated;
  }
  r.log_prob = std::accumulate(r.token_log_probs.begin(), r.token_log_probs.end(), 0.0);
  r.text = decode(r.ids, vocab, true);
  return r;
}

struct Hypothesis {
  std::vector<TokenId> tokens;
  std::vector<double> model_log_probs;
  double score = 0;
  StopReason stop = StopReason::max_len;
};

}  // namespace

GenerationResult greedy(const LanguageModel& model, const Vocabulary& vocab, std::span<const TokenId> prompt,
                        const GenerationConfig& cfg) {
  check_context(model, prompt, cfg);
  std::vector<TokenId> seq(prompt.begin(), prompt.end());
  GenerationResult r;
  r.stop = StopReason::max_len;
  for (int step = 0; step < cfg.max_new_tokens; ++step) {
    const auto d = step_distribution(model, vocab, seq, cfg.eos_amplification);
    Eigen::Index best = 0;
    d.weights.maxCoeff(&best);  // first maximal index
    const auto id = static_cast<TokenId>(best);
    r.ids.push_back(id);
    r.token_log_probs.push_back(d.model_log_probs(best));
    if (id == special::kEos) {
      r.stop = StopReason::eos;
      break;
    }
    seq.push_back(id);
  }
  return finalize(std::move(r), cfg, vocab);
}

GenerationResult beam_search(const LanguageModel& model, const Vocabulary& vocab, std::span<const TokenId> prompt,
                             const GenerationConfig& cfg) {
  check_context(model, prompt, cfg);
  const auto width = static_cast<std::size_t>(cfg.beam_width);
  auto rank_score = [&](const Hypothesis& h) {
    return cfg.length_normalize_beam && !h.tokens.empty() ? h.score / static_cast<double>(h.tokens.size())
                                                          : h.score;
  };
  auto better = [&](const Hypothesis& a, const Hypothesis& b) {
    const double sa = rank_score(a);
    const double sb = rank_score(b);
    if (sa != sb) return sa > sb;
    return a.tokens < b.tokens;
  };

  std::vector<Hypothesis> live(1);
  std::vector<Hypothesis> pool;
  std::vector<TokenId> seq(prompt.begin(), prompt.end());
  int step = 0;
  for (; step < cfg.max_new_tokens && !live.empty(); ++step) {
    std::vector<Hypothesis> candidates;
    for (const auto& h : live) {
      seq.resize(prompt.size());
      seq.insert(seq.end(), h.tokens.begin(), h.tokens.end());
      const auto d = step_distribution(model, vocab, seq, cfg.eos_amplification);
      for (Eigen::Index v = 0; v < d.weights.size(); ++v) {
        if (d.weights(v) <= 0.0) continue;
        Hypothesis c = h;
        c.tokens.push_back(static_cast<TokenId>(v));
        c.model_log_probs.push_back(d.model_log_probs(v));
        c.score = h.score + std::log(d.weights(v) / d.total);
        candidates.push_back(std::move(c));
      }
    }
    const std::size_t keep = std::min(width, candidates.size());
    std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(keep), candidates.end(),
                      better);
    candidates.resize(keep);

    live.clear();
    for (auto& c : candidates) {
      if (c.tokens.back() == special::kEos) {
        c.stop = StopReason::eos;
        pool.push_back(std::move(c));
      } else {
        live.push_back(std::move(c));
      }
    }
    if (live.empty() || pool.empty()) continue;
    if (cfg.length_normalize_beam) {
      if (pool.size() >= width) live.clear();
    } else {
      // Unnormalized scores never increase, so a live hypothesis strictly
      // below the best finished one can never overtake it.
      const auto pool_best = std::min_element(pool.begin(), pool.end(), better);
      const auto live_best = std::min_element(live.begin(), live.end(), better);
      if (live_best->score < pool_best->score) live.clear();
    }
  }
  for (auto& h : live) {
    h.stop = StopReason::max_len;
    pool.push_back(std::move(h));
  }

  const auto& best = *std::min_element(pool.begin(), pool.end(), better);
  GenerationResult r;
  r.ids = best.tokens;
  r.token_log_probs = best.model_log_probs;
  r.stop = best.stop;
  return finalize(std::move(r), cfg, vocab);
}

std::vector<TokenId> build_prompt(std::string_view source, std::size_t task, const Vocabulary& vocab) {
  std::vector<TokenId> prompt{special::kBos, vocab.task_id(task)};
  const auto body = encode(source, vocab);
  prompt.insert(prompt.end(), body.begin(), body.end());
  prompt.push_back(special::kSep);
  return prompt;
}

GenerationResult generate(const LanguageModel& model, const Vocabulary& vocab, std::string_view source,
                          std::size_t task, const GenerationConfig& cfg) {
  const auto prompt = build_prompt(source, task, vocab);
  return cfg.strategy == Strategy::greedy ? greedy(model, vocab, prompt, cfg) : beam_search(model, vocab, prompt, cfg);
}

}  // namespace dsgpt
