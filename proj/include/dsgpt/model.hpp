#pragma once

#include "dsgpt/autodiff.hpp"

#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace dsgpt {

/// Invalid hyperparameters; the message lists every violated constraint.
class ConfigError : public Error {
 public:
  using Error::Error;
};

struct ModelConfig {
  int n_layers = 2;
  int n_heads = 4;
  int d_model = 64;
  int d_ff = 256;
  int max_seq_len = 64;
  int vocab_size = 0;
  double dropout_rate = 0.1;
  bool tie_embeddings = true;
  std::uint64_t seed = 0;
  /// Standard deviation of the normal weight init.
  double init_std = 0.02;

  void validate() const {
    std::vector<std::string> problems;
    if (n_layers < 1) problems.push_back("n_layers must be >= 1");
    if (n_heads < 1) problems.push_back("n_heads must be >= 1");
    if (d_model < 1) problems.push_back("d_model must be >= 1");
    if (n_heads >= 1 && d_model % n_heads != 0) problems.push_back("d_model must be a multiple of n_heads");
    if (d_ff < 1) problems.push_back("d_ff must be >= 1");
    if (max_seq_len < 1) problems.push_back("max_seq_len must be >= 1");
    if (vocab_size < 5) problems.push_back("vocab_size must cover the special tokens");
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) problems.push_back("dropout_rate must be in [0, 1)");
    if (!(init_std >= 0.0)) problems.push_back("init_std must be >= 0");
    if (problems.empty()) return;
    std::string msg = "invalid model config:";
    for (const auto& p : problems) msg += " " + p + ";";
    throw ConfigError(msg);
  }

  bool operator==(const ModelConfig&) const = default;
};

/// Named size presets. `tiny` is the desk-scale default; `dsgpt` and
/// `dsgpt_large` carry GPT-1 (12 layers, width 768) and BERT-large
/// (24 layers, width 1024) shapes.
inline ModelConfig model_preset(std::string_view name, int vocab_size) {
  ModelConfig c;
  c.vocab_size = vocab_size;
  if (name == "tiny") {
    c.n_layers = 2, c.d_model = 64, c.n_heads = 4, c.d_ff = 256, c.max_seq_len = 64;
  } else if (name == "dsgpt") {
    c.n_layers = 12, c.d_model = 768, c.n_heads = 12, c.d_ff = 3072, c.max_seq_len = 512;
  } else if (name == "dsgpt_large") {
    c.n_layers = 24, c.d_model = 1024, c.n_heads = 16, c.d_ff = 4096, c.max_seq_len = 512;
  } else {
    throw ConfigError("unknown model preset '" + std::string(name) + "'");
  }
  return c;
}

/// Parameters in one transformer block.
inline std::size_t block_param_count(const ModelConfig& c) {
  const std::size_t d = static_cast<std::size_t>(c.d_model);
  const std::size_t ff = static_cast<std::size_t>(c.d_ff);
  return 4 * d * d + 4 * d  // q, k, v, output projections
         + 2 * d * ff + ff + d  // feed-forward
         + 4 * d;  // two layer norms
}

/// Closed-form parameter count of the model `c` describes.
inline std::size_t num_params(const ModelConfig& c) {
  c.validate();
  const std::size_t d = static_cast<std::size_t>(c.d_model);
  const std::size_t v = static_cast<std::size_t>(c.vocab_size);
  std::size_t n = v * d + static_cast<std::size_t>(c.max_seq_len) * d;
  n += static_cast<std::size_t>(c.n_layers) * block_param_count(c);
  n += 2 * d;
  if (!c.tie_embeddings) n += v * d;
  return n;
}

enum class ForwardMode { eval, train };

/// Decoder-only transformer LM: token and learned position embeddings,
/// pre-norm blocks of causal multi-head attention and a GELU MLP with
/// residual connections, a final layer norm, and an output projection
/// (tied to the token embedding by default).
template <typename Scalar>
class TransformerLM {
 public:
  using TensorT = Tensor<Scalar>;
  using Matrix = MatrixX<Scalar>;

  explicit TransformerLM(ModelConfig config) : TransformerLM(std::move(config), true) {}

  const ModelConfig& config() const { return config_; }

  std::uint64_t vocab_hash() const { return vocab_hash_; }
  void set_vocab_hash(std::uint64_t h) { vocab_hash_ = h; }

  /// Optimizer steps applied so far; stored in checkpoints.
  std::uint64_t step() const { return step_; }
  void set_step(std::uint64_t s) { step_ = s; }

  std::vector<std::pair<std::string, TensorT*>> parameters() {
    std::vector<std::pair<std::string, TensorT*>> out;
    visit(*this, [&](const std::string& name, TensorT& t) { out.emplace_back(name, &t); });
    return out;
  }

  std::vector<std::pair<std::string, const TensorT*>> parameters() const {
    std::vector<std::pair<std::string, const TensorT*>> out;
    visit(*this, [&](const std::string& name, const TensorT& t) { out.emplace_back(name, &t); });
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : parameters()) n += t->size();
    return n;
  }

  void set_requires_grad(bool on) {
    for (auto& [name, t] : parameters()) t->set_requires_grad(on);
  }

  void zero_grad() {
    for (auto& [name, t] : parameters()) t->zero_grad();
  }

  /// Logits [T×V]; row t parameterizes the distribution of token t+1.
  /// Gradients reach parameters that require grad when the tape records.
  Var<Scalar> forward(Tape<Scalar>& tape, std::span<const TokenId> ids, ForwardMode mode = ForwardMode::eval,
                      std::mt19937_64* rng = nullptr) {
    return run(*this, tape, ids, mode, rng);
  }

  /// Eval-mode forward with parameters bound as constants.
  Var<Scalar> forward(Tape<Scalar>& tape, std::span<const TokenId> ids) const {
    return run(*this, tape, ids, ForwardMode::eval, nullptr);
  }

  Matrix logits(std::span<const TokenId> ids) const {
    Tape<Scalar> tape(GradMode::inference);
    return forward(tape, ids).value();
  }

  template <typename Other>
  TransformerLM<Other> cast() const {
    TransformerLM<Other> out(config_, false);
    auto dst = out.parameters();
    auto src = parameters();
    for (std::size_t i = 0; i < src.size(); ++i) *dst[i].second = src[i].second->template cast<Other>();
    out.set_vocab_hash(vocab_hash_);
    out.set_step(step_);
    return out;
  }

 private:
  template <typename>
  friend class TransformerLM;

  struct Block {
    TensorT ln1_gain, ln1_bias;
    TensorT w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o;
    TensorT ln2_gain, ln2_bias;
    TensorT w_fc, b_fc, w_proj, b_proj;
  };

  TransformerLM(ModelConfig config, bool initialize) : config_(std::move(config)) {
    config_.validate();
    const auto d = static_cast<std::size_t>(config_.d_model);
    const auto ff = static_cast<std::size_t>(config_.d_ff);
    const auto v = static_cast<std::size_t>(config_.vocab_size);
    const auto ones = [](std::size_t n) { return TensorT(Shape{n}, Matrix::Ones(1, static_cast<Eigen::Index>(n))); };

    token_embedding_ = TensorT({v, d});
    position_embedding_ = TensorT({static_cast<std::size_t>(config_.max_seq_len), d});
    for (int l = 0; l < config_.n_layers; ++l) {
      blocks_.push_back(Block{ones(d), TensorT({d}), TensorT({d, d}), TensorT({d}), TensorT({d, d}),
                              TensorT({d}), TensorT({d, d}), TensorT({d}), TensorT({d, d}), TensorT({d}),
                              ones(d), TensorT({d}), TensorT({d, ff}), TensorT({ff}), TensorT({ff, d}),
                              TensorT({d})});
    }
    final_gain_ = ones(d);
    final_bias_ = TensorT({d});
    if (!config_.tie_embeddings) output_ = TensorT({v, d});
    if (initialize) init_weights();
  }

  // Weights ~ N(0, init_std); biases stay zero and norm gains one.
  void init_weights() {
    std::mt19937_64 rng(config_.seed);
    std::normal_distribution<double> normal(0.0, config_.init_std);
    auto fill = [&](TensorT& t) {
      for (auto& x : t.data()) x = static_cast<Scalar>(normal(rng));
    };
    fill(token_embedding_);
    fill(position_embedding_);
    for (auto& b : blocks_) {
      fill(b.w_q), fill(b.w_k), fill(b.w_v), fill(b.w_o), fill(b.w_fc), fill(b.w_proj);
    }
    if (!config_.tie_embeddings) fill(output_);
  }

  template <typename Self, typename Fn>
  static void visit(Self& self, Fn&& fn) {
    fn("token_embedding", self.token_embedding_);
    fn("position_embedding", self.position_embedding_);
    for (std::size_t l = 0; l < self.blocks_.size(); ++l) {
      auto& b = self.blocks_[l];
      const std::string p = "blocks." + std::to_string(l) + ".";
      fn(p + "ln1.gain", b.ln1_gain), fn(p + "ln1.bias", b.ln1_bias);
      fn(p + "attn.w_q", b.w_q), fn(p + "attn.b_q", b.b_q);
      fn(p + "attn.w_k", b.w_k), fn(p + "attn.b_k", b.b_k);
      fn(p + "attn.w_v", b.w_v), fn(p + "attn.b_v", b.b_v);
      fn(p + "attn.w_o", b.w_o), fn(p + "attn.b_o", b.b_o);
      fn(p + "ln2.gain", b.ln2_gain), fn(p + "ln2.bias", b.ln2_bias);
      fn(p + "mlp.w_fc", b.w_fc), fn(p + "mlp.b_fc", b.b_fc);
      fn(p + "mlp.w_proj", b.w_proj), fn(p + "mlp.b_proj", b.b_proj);
    }
    fn("final_norm.gain", self.final_gain_);
    fn("final_norm.bias", self.final_bias_);
    if (!self.config_.tie_embeddings) fn("output_projection", self.output_);
  }

  // Self is `TransformerLM` or `const TransformerLM`; Tape::leaf picks
  // gradient-tracking or constant binding accordingly.
  template <typename Self>
  static Var<Scalar> run(Self& self, Tape<Scalar>& tape, std::span<const TokenId> ids, ForwardMode mode,
                         std::mt19937_64* rng) {
    const auto& c = self.config_;
    if (ids.empty() || ids.size() > static_cast<std::size_t>(c.max_seq_len)) {
      throw DimensionError("sequence length " + std::to_string(ids.size()) + " outside [1, " +
                           std::to_string(c.max_seq_len) + "]");
    }
    for (TokenId id : ids) {
      if (id < 0 || id >= c.vocab_size) {
        throw DimensionError("token id " + std::to_string(id) + " outside vocabulary of " +
                             std::to_string(c.vocab_size));
      }
    }
    const bool train = mode == ForwardMode::train && c.dropout_rate > 0.0;
    if (train && rng == nullptr) throw Error("train-mode forward with dropout needs an rng");
    auto drop = [&](const Var<Scalar>& x) { return train ? dropout(x, c.dropout_rate, *rng) : x; };

    std::vector<TokenId> positions(ids.size());
    for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<TokenId>(i);

    auto tok = tape.leaf(self.token_embedding_);
    auto x = embedding(tok, ids) + embedding(tape.leaf(self.position_embedding_), positions);
    x = drop(x);
    const auto heads = static_cast<std::size_t>(c.n_heads);
    for (auto& b : self.blocks_) {
      auto h = layer_norm(x, tape.leaf(b.ln1_gain), tape.leaf(b.ln1_bias));
      auto q = add_bias(matmul(h, tape.leaf(b.w_q)), tape.leaf(b.b_q));
      auto k = add_bias(matmul(h, tape.leaf(b.w_k)), tape.leaf(b.b_k));
      auto v = add_bias(matmul(h, tape.leaf(b.w_v)), tape.leaf(b.b_v));
      auto a = causal_self_attention(q, k, v, heads);
      a = add_bias(matmul(a, tape.leaf(b.w_o)), tape.leaf(b.b_o));
      x = x + drop(a);
      h = layer_norm(x, tape.leaf(b.ln2_gain), tape.leaf(b.ln2_bias));
      auto m = gelu(add_bias(matmul(h, tape.leaf(b.w_fc)), tape.leaf(b.b_fc)));
      m = add_bias(matmul(m, tape.leaf(b.w_proj)), tape.leaf(b.b_proj));
      x = x + drop(m);
    }
    x = layer_norm(x, tape.leaf(self.final_gain_), tape.leaf(self.final_bias_));
    return matmul_transposed(x, c.tie_embeddings ? tok : tape.leaf(self.output_));
  }

  ModelConfig config_;
  std::uint64_t vocab_hash_ = 0;
  std::uint64_t step_ = 0;
  TensorT token_embedding_;
  TensorT position_embedding_;
  std::vector<Block> blocks_;
  TensorT final_gain_;
  TensorT final_bias_;
  TensorT output_;
};

}  // namespace dsgpt
