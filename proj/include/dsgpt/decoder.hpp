#pragma once

#include "dsgpt/model.hpp"
#include "dsgpt/tokenizer.hpp"

#include <Eigen/Core>

#include <optional>
#include <span>
#include <string>
#include <vector>

namespace dsgpt {

enum class Strategy { greedy, beam };
enum class StopReason { eos, max_len, truncated };

std::string_view to_string(Strategy s);
Strategy parse_strategy(std::string_view text);
std::string_view to_string(StopReason r);

struct GenerationConfig {
  Strategy strategy = Strategy::beam;
  int beam_width = 5;
  int max_new_tokens = 32;
  /// Hard cut on content tokens, applied after decoding.
  std::optional<int> truncate_to;
  /// Factor on the end-token probability before renormalizing; 1 is a no-op.
  double eos_amplification = 1.0;
  bool length_normalize_beam = false;

  void validate() const;
  bool operator==(const GenerationConfig&) const = default;
};

struct GenerationResult {
  /// Generated ids after the prompt; ends with EOS when stop == eos.
  std::vector<TokenId> ids;
  std::string text;
  /// Per-token log-probabilities under the unamplified model.
  std::vector<double> token_log_probs;
  double log_prob = 0;
  StopReason stop = StopReason::max_len;

  /// Number of generated tokens other than EOS.
  std::size_t length() const;
};

/// Anything that maps a prefix to next-token logits.
class LanguageModel {
 public:
  virtual ~LanguageModel() = default;
  virtual std::size_t vocab_size() const = 0;
  virtual std::size_t max_seq_len() const = 0;
  virtual Eigen::VectorXd next_logits(std::span<const TokenId> prefix) const = 0;
};

/// Read-only view of a TransformerLM; the full prefix is recomputed per call.
template <typename Scalar>
class TransformerScorer final : public LanguageModel {
 public:
  explicit TransformerScorer(const TransformerLM<Scalar>& model) : model_(model) {}

  std::size_t vocab_size() const override { return static_cast<std::size_t>(model_.config().vocab_size); }
  std::size_t max_seq_len() const override { return static_cast<std::size_t>(model_.config().max_seq_len); }

  Eigen::VectorXd next_logits(std::span<const TokenId> prefix) const override {
    const auto logits = model_.logits(prefix);
    return logits.row(logits.rows() - 1).transpose().template cast<double>();
  }

 private:
  const TransformerLM<Scalar>& model_;
};

/// One decoding step's distributions over the vocabulary.
struct StepDistribution {
  /// log softmax of the raw logits.
  Eigen::VectorXd model_log_probs;
  /// Softmax with forbidden ids zeroed and EOS scaled by λ, not yet
  /// renormalized. Its argmax is the argmax of the decoding distribution.
  Eigen::VectorXd weights;
  /// Sum of weights.
  double total = 0;
};

StepDistribution step_distribution(const LanguageModel& model, const Vocabulary& vocab,
                                   std::span<const TokenId> prefix, double eos_amplification);

/// p = softmax(logits[last]); forbidden ids zeroed; p[EOS] *= λ; renormalized.
Eigen::VectorXd next_distribution(const LanguageModel& model, const Vocabulary& vocab,
                                  std::span<const TokenId> prefix, double eos_amplification);

/// Appends the highest-probability token (lowest id on ties) until EOS or
/// max_new_tokens.
GenerationResult greedy(const LanguageModel& model, const Vocabulary& vocab, std::span<const TokenId> prompt,
                        const GenerationConfig& cfg);

/// Beam search over summed log-probabilities of the amplified distribution.
/// EOS-terminated hypotheses retire to a pool. Ties rank the
/// lexicographically smaller id sequence first.
GenerationResult beam_search(const LanguageModel& model, const Vocabulary& vocab, std::span<const TokenId> prompt,
                             const GenerationConfig& cfg);

/// [BOS, <TASK_k>, source…, SEP] then the configured strategy.
std::vector<TokenId> build_prompt(std::string_view source, std::size_t task, const Vocabulary& vocab);

GenerationResult generate(const LanguageModel& model, const Vocabulary& vocab, std::string_view source,
                          std::size_t task, const GenerationConfig& cfg);

}  // namespace dsgpt
