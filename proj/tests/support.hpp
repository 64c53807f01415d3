#pragma once

// Independent reference implementations and fixtures shared by the unit
// tests and the acceptance binary. Nothing here calls the code under test
// to compute an expected value.

#include "dsgpt/decoder.hpp"
#include "dsgpt/rouge.hpp"
#include "dsgpt/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

namespace dsgpt::testing {

namespace fs = std::filesystem;

class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = fs::temp_directory_path() / ("dsgpt_" + tag + "_" + std::to_string(rd()) + std::to_string(rd()));
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& name) const { return path_ / name; }

 private:
  fs::path path_;
};

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

template <typename Scalar>
MatrixX<Scalar> triple_loop_matmul(const MatrixX<Scalar>& a, const MatrixX<Scalar>& b) {
  MatrixX<Scalar> c(a.rows(), b.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    for (Eigen::Index j = 0; j < b.cols(); ++j) {
      Scalar acc = 0;
      for (Eigen::Index k = 0; k < a.cols(); ++k) acc += a(i, k) * b(k, j);
      c(i, j) = acc;
    }
  }
  return c;
}

/// LCS by enumerating every subsequence of the shorter list.
inline std::size_t brute_force_lcs(const RougeTokens& a, const RougeTokens& b) {
  const RougeTokens& s = a.size() <= b.size() ? a : b;
  const RougeTokens& t = a.size() <= b.size() ? b : a;
  std::size_t best = 0;
  for (std::uint32_t bits = 0; bits < (1u << s.size()); ++bits) {
    RougeTokens sub;
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (bits & (1u << i)) sub.push_back(s[i]);
    }
    if (sub.size() <= best) continue;
    std::size_t j = 0;
    for (const auto& tok : t) {
      if (j < sub.size() && tok == sub[j]) ++j;
    }
    if (j == sub.size()) best = sub.size();
  }
  return best;
}

inline RougeTokens chars(const std::string& s) {
  RougeTokens out;
  for (char c : s) out.emplace_back(1, c);
  return out;
}

/// Language model whose logits are a fixed function of the prefix.
class FunctionModel final : public LanguageModel {
 public:
  using Fn = std::function<Eigen::VectorXd(std::span<const TokenId>)>;
  FunctionModel(std::size_t vocab_size, std::size_t max_len, Fn fn)
      : vocab_size_(vocab_size), max_len_(max_len), fn_(std::move(fn)) {}

  std::size_t vocab_size() const override { return vocab_size_; }
  std::size_t max_seq_len() const override { return max_len_; }
  Eigen::VectorXd next_logits(std::span<const TokenId> prefix) const override { return fn_(prefix); }

 private:
  std::size_t vocab_size_;
  std::size_t max_len_;
  Fn fn_;
};

/// Logits drawn from a normal distribution seeded by a hash of the prefix,
/// so every prefix gets its own arbitrary but reproducible distribution.
inline FunctionModel hashed_random_model(std::size_t vocab_size, std::uint64_t salt, double scale = 2.0,
                                         std::size_t max_len = 256) {
  return FunctionModel(vocab_size, max_len, [vocab_size, salt, scale](std::span<const TokenId> prefix) {
    std::uint64_t h = 1469598103934665603ULL ^ salt;
    for (TokenId id : prefix) h = (h ^ static_cast<std::uint64_t>(id + 1)) * 1099511628211ULL;
    std::mt19937_64 rng(h);
    std::normal_distribution<double> n(0.0, scale);
    Eigen::VectorXd v(static_cast<Eigen::Index>(vocab_size));
    for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = n(rng);
    return v;
  });
}

/// Exhaustive search over every continuation of at most max_new tokens.
/// A sequence either ends at its first EOS or has exactly max_new tokens.
/// Score is the sum of log p′ under amplified, renormalized, masked
/// distributions computed here from raw logits; ties go to the
/// lexicographically smaller id sequence.
struct BruteForceResult {
  std::vector<TokenId> ids;
  double score = -INFINITY;
  std::size_t candidates = 0;
};

inline BruteForceResult brute_force_best(const LanguageModel& model, const Vocabulary& vocab,
                                         const std::vector<TokenId>& prompt, int max_new, double lambda) {
  BruteForceResult best;
  std::vector<TokenId> tokens;
  std::function<void(double)> walk = [&](double score) {
    std::vector<TokenId> full = prompt;
    full.insert(full.end(), tokens.begin(), tokens.end());
    const Eigen::VectorXd logits = model.next_logits(full);
    std::vector<double> w(static_cast<std::size_t>(logits.size()));
    double mx = -INFINITY;
    for (double l : logits) mx = std::max(mx, l);
    double total = 0;
    for (std::size_t v = 0; v < w.size(); ++v) {
      const auto id = static_cast<TokenId>(v);
      const bool forbidden = id == special::kPad || id == special::kBos || id == special::kSep ||
                             (id >= special::kFirstTaskId && static_cast<std::size_t>(id) < vocab.num_specials());
      w[v] = forbidden ? 0.0 : std::exp(logits(static_cast<Eigen::Index>(v)) - mx);
      if (id == special::kEos) w[v] *= lambda;
      total += w[v];
    }
    for (std::size_t v = 0; v < w.size(); ++v) {
      if (w[v] == 0.0) continue;
      const double s = score + std::log(w[v] / total);
      tokens.push_back(static_cast<TokenId>(v));
      const bool done = v == static_cast<std::size_t>(special::kEos) || static_cast<int>(tokens.size()) == max_new;
      if (done) {
        ++best.candidates;
        if (s > best.score || (s == best.score && tokens < best.ids)) {
          best.score = s;
          best.ids = tokens;
        }
      } else {
        walk(s);
      }
      tokens.pop_back();
    }
  };
  if (max_new > 0) walk(0.0);
  return best;
}

/// Named parameter gradients of a batch loss via central differences.
struct GradientComparison {
  std::string name;
  // ‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂, kGradientNormFloor)
  double relative_error = 0;
  double max_abs_diff = 0;
  double analytic_norm = 0;
};

// Only matters for tensors whose true gradient is identically zero (the key
// bias: softmax ignores a per-row shift), where both sides are roundoff.
inline constexpr double kGradientNormFloor = 1e-6;

inline std::vector<GradientComparison> finite_difference_check(TransformerLM<double>& model,
                                                               const std::vector<SequenceExample>& batch,
                                                               double h = 1e-3) {
  auto loss_value = [&] {
    Tape<double> tape(GradMode::inference);
    return batch_loss<double>(model, tape, batch).item();
  };
  model.set_requires_grad(true);
  model.zero_grad();
  {
    Tape<double> tape;
    auto loss = batch_loss<double>(model, tape, batch);
    tape.backward(loss);
  }
  std::vector<GradientComparison> out;
  for (auto& [name, tensor] : model.parameters()) {
    Eigen::VectorXd numeric(static_cast<Eigen::Index>(tensor->size()));
    for (std::size_t i = 0; i < tensor->size(); ++i) {
      const double orig = (*tensor)[i];
      (*tensor)[i] = orig + h;
      const double up = loss_value();
      (*tensor)[i] = orig - h;
      const double down = loss_value();
      (*tensor)[i] = orig;
      numeric(static_cast<Eigen::Index>(i)) = (up - down) / (2 * h);
    }
    const Eigen::VectorXd analytic =
        Eigen::Map<const Eigen::VectorXd>(tensor->grad().data(), static_cast<Eigen::Index>(tensor->size()));
    GradientComparison c;
    c.name = name;
    c.analytic_norm = analytic.norm();
    const double denom = std::max({analytic.norm(), numeric.norm(), kGradientNormFloor});
    c.relative_error = (analytic - numeric).norm() / denom;
    c.max_abs_diff = (analytic - numeric).cwiseAbs().maxCoeff();
    out.push_back(c);
  }
  return out;
}

/// Small model configuration used by the gradient check.
inline ModelConfig gradient_check_config(int vocab_size) {
  ModelConfig c;
  c.n_layers = 2;
  c.d_model = 16;
  c.n_heads = 2;
  c.d_ff = 64;
  c.max_seq_len = 16;
  c.vocab_size = vocab_size;
  c.seed = 7;
  // Larger than the training init so activations, and hence the
  // gradients being checked, are far from the trivial near-uniform regime.
  c.init_std = 0.2;
  return c;
}

/// Result of overfitting the tiny preset on a single example.
struct MemorizationRun {
  Vocabulary vocab;
  RawExample example;
  TransformerLM<float> model;
  TrainReport report;
  double seconds = 0;
};

inline MemorizationRun memorize_one(int steps = 500, std::uint64_t seed = 0) {
  RawExample ex{"q7hhaxx2mb", "hax", 1, 0};
  auto vocab = build_vocab({ex.source, ex.target});
  auto cfg = model_preset("tiny", static_cast<int>(vocab.size()));
  cfg.seed = seed;
  TransformerLM<float> model(cfg);
  model.set_vocab_hash(vocab.hash());
  TrainConfig tc;
  tc.batch_size = 1;
  tc.steps = steps;
  tc.seed = seed;
  tc.loss_mode = LossMode::target_only;
  tc.eval_each_epoch = false;
  const auto data = format_dataset({ex}, vocab, static_cast<std::size_t>(cfg.max_seq_len), tc.loss_mode);
  const auto t0 = std::chrono::steady_clock::now();
  auto report = train(model, data, tc);
  return {vocab, ex, std::move(model), std::move(report), seconds_since(t0)};
}

}  // namespace dsgpt::testing
