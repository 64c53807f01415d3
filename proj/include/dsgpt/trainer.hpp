#pragma once

#include "dsgpt/checkpoint.hpp"
#include "dsgpt/data.hpp"
#include "dsgpt/model.hpp"

#include <cmath>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace dsgpt {

struct TrainConfig {
  int batch_size = 16;
  int steps = 300;
  double learning_rate = 1e-3;
  int warmup_steps = 20;
  double grad_clip_norm = 1.0;
  LossMode loss_mode = LossMode::full_sequence;
  std::uint64_t seed = 0;
  /// Save every N steps into checkpoint_dir; 0 disables periodic saves.
  int checkpoint_every = 0;
  /// Checkpoint to initialize from; empty trains the model as given.
  std::string init_from;
  /// Where periodic and final checkpoints go; empty writes none.
  std::string checkpoint_dir;
  /// Per-step JSONL log; the summary lands next to it as *.summary.json.
  std::string log_path;
  /// Evaluate train/held-out perplexity whenever an epoch completes.
  bool eval_each_epoch = true;

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

struct EpochRecord {
  std::size_t epoch = 0;
  std::size_t step = 0;
  double train_perplexity = 0;
  std::optional<double> heldout_perplexity;
};

struct TrainReport {
  std::vector<double> losses;
  std::vector<double> learning_rates;
  /// Global gradient norm before clipping.
  std::vector<double> grad_norms;
  std::vector<EpochRecord> epochs;
  std::string final_checkpoint;
  double wall_seconds = 0;
};

/// Rewrites an example's mask for `mode`, keeping PAD positions off.
void apply_loss_mode(SequenceExample& ex, LossMode mode);

/// Sum of masked next-token negative log-likelihoods for one example and
/// the number of positions it covers. Position t's logits predict ids[t+1],
/// so loss_mask[t+1] gates that term.
template <typename Scalar, typename Model>
Var<Scalar> sequence_nll(Model& model, Tape<Scalar>& tape, const SequenceExample& ex, ForwardMode mode,
                         std::mt19937_64* rng, std::size_t& count) {
  const std::size_t n = ex.ids.size();
  if (n < 2) throw DataError("training sequence needs at least two tokens");
  std::span<const TokenId> ids(ex.ids);
  std::span<const std::uint8_t> mask(ex.loss_mask);
  for (std::size_t i = 1; i < n; ++i) count += mask[i] ? 1 : 0;
  Var<Scalar> logits;
  if constexpr (std::is_const_v<Model>) {
    logits = model.forward(tape, ids.first(n - 1));
  } else {
    logits = model.forward(tape, ids.first(n - 1), mode, rng);
  }
  return cross_entropy(logits, ids.subspan(1), mask.subspan(1), Reduction::sum);
}

/// Token-weighted mean masked cross-entropy over a batch.
template <typename Scalar>
Var<Scalar> batch_loss(TransformerLM<Scalar>& model, Tape<Scalar>& tape, std::span<const SequenceExample> batch,
                       ForwardMode mode = ForwardMode::eval, std::mt19937_64* rng = nullptr) {
  if (batch.empty()) throw DataError("empty batch");
  std::vector<Var<Scalar>> terms;
  std::size_t count = 0;
  for (const auto& ex : batch) terms.push_back(sequence_nll<Scalar>(model, tape, ex, mode, rng, count));
  if (count == 0) throw DataError("batch has no loss-bearing positions");
  return scale(add_n<Scalar>(terms), Scalar(1) / Scalar(count));
}

/// exp of the token-weighted mean masked cross-entropy over `data`.
template <typename Scalar>
double perplexity(const TransformerLM<Scalar>& model, const FormattedDataset& data) {
  if (data.empty()) throw DataError("perplexity of an empty dataset");
  double total = 0;
  std::size_t count = 0;
  for (const auto& ex : data.examples) {
    Tape<Scalar> tape(GradMode::inference);
    total += static_cast<double>(sequence_nll<Scalar>(model, tape, ex, ForwardMode::eval, nullptr, count).item());
  }
  if (count == 0) throw DataError("dataset has no loss-bearing positions");
  return std::exp(total / static_cast<double>(count));
}

/// Scales gradients so their global L2 norm is at most max_norm. Returns
/// the norm before clipping.
double clip_grad_norm(TransformerLM<float>& model, double max_norm);

/// Learning rate at 0-based `step`: linear warmup, then constant.
double learning_rate_at(const TrainConfig& cfg, int step);

/// Adam (β1 0.9, β2 0.999, eps 1e-8) over `data`, in length-bucketed
/// batches. With cfg.init_from set, `model` is replaced by that checkpoint
/// first. Held-out perplexity is reported per epoch when given.
TrainReport train(TransformerLM<float>& model, const FormattedDataset& data, const TrainConfig& cfg,
                  const FormattedDataset* heldout = nullptr);

}  // namespace dsgpt
