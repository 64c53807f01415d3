#pragma once

// Define-by-run reverse-mode differentiation over Tensor values.
//
// A Tape records every op executed through the free functions below. Each
// op stores its output and a closure that maps the output gradient onto its
// inputs. Tape::backward walks the record in reverse exactly once.

#include "dsgpt/tensor.hpp"

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

namespace dsgpt {

using TokenId = std::int32_t;

template <typename Scalar>
class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the
/// tape is alive and has not run backward.
template <typename Scalar>
class Var {
 public:
  using Matrix = MatrixX<Scalar>;

  Var() = default;

  const Matrix& value() const { return tape_->value(*this); }
  const Shape& shape() const { return tape_->shape(*this); }
  Tape<Scalar>& tape() const { return *tape_; }
  std::uint32_t index() const { return index_; }
  bool valid() const { return tape_ != nullptr; }

  Scalar item() const {
    if (value().size() != 1) throw DimensionError("item() on non-scalar " + to_string(shape()));
    return value()(0, 0);
  }

 private:
  friend class Tape<Scalar>;
  Var(Tape<Scalar>* tape, std::uint32_t index) : tape_(tape), index_(index) {}

  Tape<Scalar>* tape_ = nullptr;
  std::uint32_t index_ = 0;
};

enum class GradMode { record, inference };

template <typename Scalar>
class Tape {
 public:
  using Matrix = MatrixX<Scalar>;
  using BackwardFn = std::function<void(Tape&, const Matrix& out_grad)>;

  explicit Tape(GradMode mode = GradMode::record) : mode_(mode) { nodes_.reserve(256); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return mode_ == GradMode::record; }
  std::size_t size() const { return nodes_.size(); }

  /// Binds a tensor by reference. When the tape records and the tensor
  /// requires grad, backward accumulates into tensor.grad().
  Var<Scalar> leaf(Tensor<Scalar>& t) {
    Node node;
    node.shape = t.shape();
    node.external = &t.value();
    if (recording() && t.requires_grad()) {
      node.sink = &t;
      node.needs_grad = true;
    }
    return push(std::move(node));
  }

  /// Binds a tensor by reference as a constant.
  Var<Scalar> leaf(const Tensor<Scalar>& t) {
    Node node;
    node.shape = t.shape();
    node.external = &t.value();
    return push(std::move(node));
  }

  Var<Scalar> constant(Matrix value, Shape shape) {
    Node node;
    node.shape = std::move(shape);
    node.owned = std::move(value);
    return push(std::move(node));
  }

  /// Records an op output. `fn` runs during backward when any input needs grad.
  Var<Scalar> record(std::string_view op, Matrix value, Shape shape,
                     std::initializer_list<Var<Scalar>> inputs, BackwardFn fn) {
    if (!value.allFinite()) throw NumericError(std::string(op) + " produced a non-finite value");
    Node node;
    node.shape = std::move(shape);
    node.owned = std::move(value);
    if (recording()) {
      for (const auto& in : inputs) {
        check_owner(in);
        if (nodes_[in.index_].needs_grad) node.needs_grad = true;
      }
      if (node.needs_grad) node.backward = std::move(fn);
    }
    return push(std::move(node));
  }

  const Matrix& value(const Var<Scalar>& v) const { return node(v).value(); }
  const Shape& shape(const Var<Scalar>& v) const { return node(v).shape; }
  bool needs_grad(const Var<Scalar>& v) const { return node(v).needs_grad; }

  /// Gradient accumulator for `v`, allocated on first use.
  Matrix& grad_buffer(const Var<Scalar>& v) {
    Node& n = nodes_[v.index_];
    if (n.grad.size() == 0) n.grad = Matrix::Zero(n.value().rows(), n.value().cols());
    return n.grad;
  }

  /// Propagates d(loss)/d(.) to every requires-grad leaf, then clears the tape.
  void backward(const Var<Scalar>& loss) {
    if (!recording()) throw Error("backward on an inference tape");
    check_owner(loss);
    if (value(loss).size() != 1) throw DimensionError("backward needs a scalar loss, got " + to_string(shape(loss)));
    if (nodes_[loss.index_].needs_grad) {
      grad_buffer(loss).setOnes();
      for (std::size_t i = loss.index_ + 1; i-- > 0;) {
        Node& n = nodes_[i];
        if (!n.needs_grad || n.grad.size() == 0) continue;
        if (n.backward) n.backward(*this, n.grad);
        if (n.sink) n.sink->grad() += n.grad;
      }
    }
    nodes_.clear();
    nodes_.shrink_to_fit();
    consumed_ = true;
  }

 private:
  struct Node {
    Shape shape;
    Matrix owned;
    const Matrix* external = nullptr;
    Tensor<Scalar>* sink = nullptr;
    bool needs_grad = false;
    Matrix grad;
    BackwardFn backward;

    const Matrix& value() const { return external ? *external : owned; }
  };

  void check_owner(const Var<Scalar>& v) const {
    if (consumed_) throw Error("tape already ran backward; record a new forward pass");
    if (v.tape_ != this || v.index_ >= nodes_.size()) throw Error("variable does not belong to this tape");
  }

  const Node& node(const Var<Scalar>& v) const {
    check_owner(v);
    return nodes_[v.index_];
  }

  Var<Scalar> push(Node node) {
    if (consumed_) throw Error("tape already ran backward; record a new forward pass");
    nodes_.push_back(std::move(node));
    return Var<Scalar>(this, static_cast<std::uint32_t>(nodes_.size() - 1));
  }

  GradMode mode_;
  bool consumed_ = false;
  std::vector<Node> nodes_;
};

namespace detail {

template <typename Scalar>
Tape<Scalar>& same_tape(const Var<Scalar>& a, const Var<Scalar>& b) {
  if (&a.tape() != &b.tape()) throw Error("operands live on different tapes");
  return a.tape();
}

inline Shape with_last(Shape shape, std::size_t last) {
  shape.back() = last;
  return shape;
}

template <typename Scalar>
void accumulate(Tape<Scalar>& t, const Var<Scalar>& v, const auto& expr) {
  if (t.needs_grad(v)) t.grad_buffer(v).noalias() += expr;
}

}  // namespace detail

/// C = A·B over the matrix view of A (leading axes flattened).
template <typename Scalar>
Var<Scalar> matmul(const Var<Scalar>& a, const Var<Scalar>& b) {
  auto& t = detail::same_tape(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  if (b.shape().size() != 2 || av.cols() != bv.rows()) {
    throw DimensionError("matmul shape mismatch: " + to_string(a.shape()) + " x " + to_string(b.shape()));
  }
  MatrixX<Scalar> out(av.rows(), bv.cols());
  out.noalias() = av * bv;
  return t.record("matmul", std::move(out), detail::with_last(a.shape(), bv.cols()), {a, b},
                  [a, b](Tape<Scalar>& tp, const MatrixX<Scalar>& g) {
                    detail::accumulate(tp, a, g * b.value().transpose());
                    detail::accumulate(tp, b, a.value().transpose() * g);
                  });
}

/// C = A·Bᵀ; b holds one row per output column.
template <typename Scalar>
Var<Scalar> matmul_transposed(const Var<Scalar>& a, const Var<Scalar>& b) {
  auto& t = detail::same_tape(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  if (b.shape().size() != 2 || av.cols() != bv.cols()) {
    throw DimensionError("matmul_transposed shape mismatch: " + to_string(a.shape()) + " x " +
                         to_string(b.shape()) + "^T");
  }
  MatrixX<Scalar> out(av.rows(), bv.rows());
  out.noalias() = av * bv.transpose();
  return t.record("matmul_transposed", std::move(out), detail::with_last(a.shape(), bv.rows()), {a, b},
                  [a, b](Tape<Scalar>& tp, const MatrixX<Scalar>& g) {
                    detail::accumulate(tp, a, g * b.value());
                    detail::accumulate(tp, b, g.transpose() * a.value());
                  });
}

template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b) {
  auto& t = detail::same_tape(a, b);
  if (a.shape() != b.shape()) {
    throw DimensionError("add shape mismatch: " + to_string(a.shape()) + " + " + to_string(b.shape()));
  }
  return t.record("add", a.value() + b.value(), a.shape(), {a, b},
                  [a, b](Tape<Scalar>& tp, const MatrixX<Scalar>& g) {
                    detail::accumulate(tp, a, g);
                    detail::accumulate(tp, b, g);
                  });
}

template <typename Scalar>
Var<Scalar> operator+(const Var<Scalar>& a, const Var<Scalar>& b) {
  return add(a, b);
}

/// x + bias, with bias broadcast over every row of x.
template <typename Scalar>
Var<Scalar> add_bias(const Var<Scalar>& x, const Var<Scalar>& bias) {
  auto& t = detail::same_tape(x, bias);
  if (bias.value().size() != x.value().cols()) {
    throw DimensionError("bias " + to_string(bias.shape()) + " does not match " + to_string(x.shape()));
  }
  MatrixX<Scalar> out = x.value();
  out.rowwise() += Eigen::Map<const Eigen::Matrix<Scalar, 1, Eigen::Dynamic>>(bias.value().data(), out.cols());
  return t.record("add_bias", std::move(out), x.shape(), {x, bias},
                  [x, bias](Tape<Scalar>& tp, const MatrixX<Scalar>& g) {
                    detail::accumulate(tp, x, g);
                    if (tp.needs_grad(bias)) {
                      auto& gb = tp.grad_buffer(bias);
                      Eigen::Map<Eigen::Matrix<Scalar, 1, Eigen::Dynamic>>(gb.data(), gb.size()) +=
                          g.colwise().sum();
                    }
                  });
}

/// Elementwise product.
template <typename Scalar>
Var<Scalar> mul(const Var<Scalar>& a, const Var<Scalar>& b) {
  auto& t = detail::same_tape(a, b);
  if (a.shape() != b.shape()) {
    throw DimensionError("mul shape mismatch: " + to_string(a.shape()) + " * " + to_string(b.shape()));
  }
  return t.record("mul", a.value().cwiseProduct(b.value()), a.shape(), {a, b},
                  [a, b](Tape<Scalar>& tp, const MatrixX<Scalar>& g) {
                    detail::accumulate(tp, a, g.cwiseProduct(b.value()));
                    detail::accumulate(tp, b, g.cwiseProduct(a.value()));
                  });
}

template <typename Scalar>
Var<Scalar> scale(const Var<Scalar>& x, Scalar factor) {
  return x.tape().record("scale", x.value() * factor, x.shape(), {x},
                         [x, factor](Tape<Scalar>& tp, const MatrixX<Scalar>& g) {
                           detail::accumulate(tp, x, g * factor);
                         });
}

/// Sum of all elements, as a scalar.
template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& x) {
  MatrixX<Scalar> out(1, 1);
  out(0, 0) = x.value().sum();
  return x.tape().record("sum", std::move(out), Shape{1}, {x},
                         [x](Tape<Scalar>& tp, const MatrixX<Scalar>& g) {
                           if (tp.needs_grad(x)) tp.grad_buffer(x).array() += g(0, 0);
                         });
}

/// Sum of same-shaped values.
template <typename Scalar>
Var<Scalar> add_n(std::span<const Var<Scalar>> terms) {
  if (terms.empty()) throw Error("add_n needs at least one term");
  Var<Scalar> acc = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) acc = add(acc, terms[i]);
  return acc;
}

/// GELU, tanh form: 0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³))).
template <typename Scalar>
Var<Scalar> gelu(const Var<Scalar>& x) {
  static constexpr Scalar kC = Scalar(0.7978845608028654);  // √(2/π)
  static constexpr Scalar kA = Scalar(0.044715);
  const auto& xv = x.value().array();
  MatrixX<Scalar> tanh_u = (kC * (xv + kA * xv.cube())).tanh().matrix();
  MatrixX<Scalar> out = (Scalar(0.5) * xv * (Scalar(1) + tanh_u.array())).matrix();
  return x.tape().record("gelu", std::move(out), x.shape(), {x},
                         [x, tanh_u = std::move(tanh_u)](Tape<Scalar>& tp, const MatrixX<Scalar>& g) {
                           if (!tp.needs_grad(x)) return;
                           const auto xa = x.value().array();
                           const auto th = tanh_u.array();
                           auto d = Scalar(0.5) * (Scalar(1) + th) +
                                    Scalar(0.5) * xa * (Scalar(1) - th.square()) * kC *
                                        (Scalar(1) + Scalar(3) * kA * xa.square());
                           tp.grad_buffer(x).array() += g.array() * d;
                         });
}

namespace detail {

template <typename Scalar>
MatrixX<Scalar> softmax_rows(const MatrixX<Scalar>& x) {
  MatrixX<Scalar> out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const Scalar m = x.row(r).maxCoeff();
    out.row(r) = (x.row(r).array() - m).exp().matrix();
    out.row(r) /= out.row(r).sum();
  }
  return out;
}

// dX = Y ⊙ (dY − rowsum(dY ⊙ Y))
template <typename Scalar, typename Out>
void softmax_rows_backward(const MatrixX<Scalar>& y, const MatrixX<Scalar>& dy, Out&& dx) {
  for (Eigen::Index r = 0; r < y.rows(); ++r) {
    const Scalar dot = dy.row(r).dot(y.row(r));
    dx.row(r).array() += y.row(r).array() * (dy.row(r).array() - dot);
  }
}

}  // namespace detail

/// Softmax along the last axis, stabilized by max subtraction.
template <typename Scalar>
Var<Scalar> softmax(const Var<Scalar>& x) {
  auto out = detail::softmax_rows<Scalar>(x.value());
  MatrixX<Scalar> y = out;
  return x.tape().record("softmax", std::move(out), x.shape(), {x},
                         [x, y = std::move(y)](Tape<Scalar>& tp, const MatrixX<Scalar>& g) {
                           if (tp.needs_grad(x)) detail::softmax_rows_backward<Scalar>(y, g, tp.grad_buffer(x));
                         });
}

inline constexpr double kLayerNormEps = 1e-5;

/// Per-row normalization to zero mean and unit variance, then gain·x̂ + bias.
template <typename Scalar>
Var<Scalar> layer_norm(const Var<Scalar>& x, const Var<Scalar>& gain, const Var<Scalar>& bias,
                       Scalar eps = Scalar(kLayerNormEps)) {
  auto& t = detail::same_tape(x, gain);
  detail::same_tape(x, bias);
  const auto& xv = x.value();
  const Eigen::Index d = xv.cols();
  if (gain.value().size() != d || bias.value().size() != d) {
    throw DimensionError("layer_norm parameters " + to_string(gain.shape()) + "/" + to_string(bias.shape()) +
                         " do not match " + to_string(x.shape()));
  }
  if (!(eps > Scalar(0))) throw Error("layer_norm eps must be positive");
  using Row = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;
  Eigen::Map<const Row> g(gain.value().data(), d);
  Eigen::Map<const Row> b(bias.value().data(), d);

  MatrixX<Scalar> xhat(xv.rows(), d);
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> inv_std(xv.rows());
  for (Eigen::Index r = 0; r < xv.rows(); ++r) {
    const Scalar mean = xv.row(r).mean();
    const Scalar var = (xv.row(r).array() - mean).square().mean();
    inv_std(r) = Scalar(1) / std::sqrt(var + eps);
    xhat.row(r) = (xv.row(r).array() - mean) * inv_std(r);
  }
  MatrixX<Scalar> out = xhat.array().rowwise() * g.array();
  out.rowwise() += b;

  return t.record("layer_norm", std::move(out), x.shape(), {x, gain, bias},
                  [x, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std)](
                      Tape<Scalar>& tp, const MatrixX<Scalar>& dy) {
                    const Eigen::Index dim = xhat.cols();
                    Eigen::Map<const Row> gv(gain.value().data(), dim);
                    if (tp.needs_grad(gain)) {
                      auto& gg = tp.grad_buffer(gain);
                      Eigen::Map<Row>(gg.data(), dim) += dy.cwiseProduct(xhat).colwise().sum();
                    }
                    if (tp.needs_grad(bias)) {
                      auto& gb = tp.grad_buffer(bias);
                      Eigen::Map<Row>(gb.data(), dim) += dy.colwise().sum();
                    }
                    if (tp.needs_grad(x)) {
                      auto& gx = tp.grad_buffer(x);
                      for (Eigen::Index r = 0; r < xhat.rows(); ++r) {
                        Row dxhat = dy.row(r).cwiseProduct(gv);
                        const Scalar mean_d = dxhat.mean();
                        const Scalar mean_dx = dxhat.dot(xhat.row(r)) / Scalar(dim);
                        gx.row(r).array() +=
                            inv_std(r) * (dxhat.array() - mean_d - xhat.row(r).array() * mean_dx);
                      }
                    }
                  });
}

/// Gathers rows of `table` ([N×d]) at `ids`, producing [T×d].
template <typename Scalar>
Var<Scalar> embedding(const Var<Scalar>& table, std::span<const TokenId> ids) {
  const auto& tv = table.value();
  if (ids.empty()) throw DimensionError("embedding needs at least one id");
  MatrixX<Scalar> out(static_cast<Eigen::Index>(ids.size()), tv.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= tv.rows()) {
      throw DimensionError("embedding id " + std::to_string(ids[i]) + " outside table " +
                           to_string(table.shape()));
    }
    out.row(static_cast<Eigen::Index>(i)) = tv.row(ids[i]);
  }
  std::vector<TokenId> rows(ids.begin(), ids.end());
  return table.tape().record("embedding", std::move(out), Shape{ids.size(), static_cast<std::size_t>(tv.cols())},
                             {table}, [table, rows = std::move(rows)](Tape<Scalar>& tp, const MatrixX<Scalar>& g) {
                               if (!tp.needs_grad(table)) return;
                               auto& gt = tp.grad_buffer(table);
                               for (std::size_t i = 0; i < rows.size(); ++i) {
                                 gt.row(rows[i]) += g.row(static_cast<Eigen::Index>(i));
                               }
                             });
}

/// Additive value placed on attention scores above the diagonal.
inline constexpr double kCausalMaskValue = -1e9;

/// Multi-head scaled dot-product attention with a causal mask.
/// q, k, v are [T×d]; head h owns columns [h·d/H, (h+1)·d/H).
template <typename Scalar>
Var<Scalar> causal_self_attention(const Var<Scalar>& q, const Var<Scalar>& k, const Var<Scalar>& v,
                                  std::size_t n_heads) {
  auto& t = detail::same_tape(q, k);
  detail::same_tape(q, v);
  const auto& qv = q.value();
  const auto& kv = k.value();
  const auto& vv = v.value();
  if (qv.rows() != kv.rows() || qv.rows() != vv.rows() || qv.cols() != kv.cols() || qv.cols() != vv.cols()) {
    throw DimensionError("attention operands disagree: " + to_string(q.shape()) + ", " + to_string(k.shape()) +
                         ", " + to_string(v.shape()));
  }
  const Eigen::Index d = qv.cols();
  const auto heads = static_cast<Eigen::Index>(n_heads);
  if (heads == 0 || d % heads != 0) {
    throw DimensionError("width " + std::to_string(d) + " not divisible by " + std::to_string(n_heads) + " heads");
  }
  const Eigen::Index dh = d / heads;
  const Eigen::Index T = qv.rows();
  const Scalar inv_sqrt = Scalar(1) / std::sqrt(Scalar(dh));
  const Scalar mask = Scalar(kCausalMaskValue);

  std::vector<MatrixX<Scalar>> probs(static_cast<std::size_t>(heads));
  MatrixX<Scalar> out(T, d);
  for (Eigen::Index h = 0; h < heads; ++h) {
    MatrixX<Scalar> scores(T, T);
    scores.noalias() = qv.middleCols(h * dh, dh) * kv.middleCols(h * dh, dh).transpose();
    scores *= inv_sqrt;
    for (Eigen::Index i = 0; i < T; ++i) {
      for (Eigen::Index j = i + 1; j < T; ++j) scores(i, j) += mask;
    }
    auto& p = probs[static_cast<std::size_t>(h)];
    p = detail::softmax_rows<Scalar>(scores);
    out.middleCols(h * dh, dh).noalias() = p * vv.middleCols(h * dh, dh);
  }

  return t.record("causal_self_attention", std::move(out), q.shape(), {q, k, v},
                  [q, k, v, probs = std::move(probs), heads, dh, inv_sqrt](Tape<Scalar>& tp,
                                                                           const MatrixX<Scalar>& g) {
                    const Eigen::Index rows = g.rows();
                    for (Eigen::Index h = 0; h < heads; ++h) {
                      const auto& p = probs[static_cast<std::size_t>(h)];
                      auto g_h = g.middleCols(h * dh, dh);
                      if (tp.needs_grad(v)) tp.grad_buffer(v).middleCols(h * dh, dh).noalias() += p.transpose() * g_h;
                      if (!tp.needs_grad(q) && !tp.needs_grad(k)) continue;
                      MatrixX<Scalar> dp(rows, rows);
                      dp.noalias() = g_h * v.value().middleCols(h * dh, dh).transpose();
                      MatrixX<Scalar> ds = MatrixX<Scalar>::Zero(rows, rows);
                      detail::softmax_rows_backward<Scalar>(p, dp, ds);
                      ds *= inv_sqrt;
                      if (tp.needs_grad(q)) {
                        tp.grad_buffer(q).middleCols(h * dh, dh).noalias() += ds * k.value().middleCols(h * dh, dh);
                      }
                      if (tp.needs_grad(k)) {
                        tp.grad_buffer(k).middleCols(h * dh, dh).noalias() +=
                            ds.transpose() * q.value().middleCols(h * dh, dh);
                      }
                    }
                  });
}

/// Inverted dropout; identity when rate is zero.
template <typename Scalar>
Var<Scalar> dropout(const Var<Scalar>& x, double rate, std::mt19937_64& rng) {
  if (rate <= 0.0) return x;
  if (rate >= 1.0) throw Error("dropout rate must be below 1");
  std::bernoulli_distribution keep(1.0 - rate);
  const Scalar factor = Scalar(1.0 / (1.0 - rate));
  MatrixX<Scalar> m(x.value().rows(), x.value().cols());
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = keep(rng) ? factor : Scalar(0);
  MatrixX<Scalar> out = x.value().cwiseProduct(m);
  return x.tape().record("dropout", std::move(out), x.shape(), {x},
                         [x, m = std::move(m)](Tape<Scalar>& tp, const MatrixX<Scalar>& g) {
                           detail::accumulate(tp, x, g.cwiseProduct(m));
                         });
}

enum class Reduction { mean, sum };

/// Negative log-likelihood of `targets` under softmax(logits) over the rows
/// where mask is nonzero; mean or sum over those rows.
template <typename Scalar>
Var<Scalar> cross_entropy(const Var<Scalar>& logits, std::span<const TokenId> targets,
                          std::span<const std::uint8_t> mask, Reduction reduction = Reduction::mean) {
  const auto& lv = logits.value();
  const auto T = static_cast<std::size_t>(lv.rows());
  if (targets.size() != T || mask.size() != T) {
    throw DimensionError("cross_entropy: logits " + to_string(logits.shape()) + " vs " +
                         std::to_string(targets.size()) + " targets and " + std::to_string(mask.size()) +
                         " mask entries");
  }
  std::size_t count = 0;
  for (std::size_t i = 0; i < T; ++i) {
    if (!mask[i]) continue;
    ++count;
    if (targets[i] < 0 || targets[i] >= lv.cols()) {
      throw DimensionError("cross_entropy target " + std::to_string(targets[i]) + " outside vocabulary of " +
                           std::to_string(lv.cols()));
    }
  }
  if (count == 0 && reduction == Reduction::mean) throw Error("cross_entropy: every position is masked");

  MatrixX<Scalar> probs = MatrixX<Scalar>::Zero(lv.rows(), lv.cols());
  Scalar total = 0;
  for (std::size_t i = 0; i < T; ++i) {
    if (!mask[i]) continue;
    const auto r = static_cast<Eigen::Index>(i);
    const Scalar m = lv.row(r).maxCoeff();
    const Scalar lse = m + std::log((lv.row(r).array() - m).exp().sum());
    total += lse - lv(r, targets[i]);
    probs.row(r) = (lv.row(r).array() - lse).exp().matrix();
  }
  const Scalar norm = reduction == Reduction::mean ? Scalar(1) / Scalar(count) : Scalar(1);
  MatrixX<Scalar> out(1, 1);
  out(0, 0) = total * norm;
  std::vector<TokenId> tgt(targets.begin(), targets.end());
  std::vector<std::uint8_t> msk(mask.begin(), mask.end());
  return logits.tape().record(
      "cross_entropy", std::move(out), Shape{1}, {logits},
      [logits, probs = std::move(probs), tgt = std::move(tgt), msk = std::move(msk), norm](
          Tape<Scalar>& tp, const MatrixX<Scalar>& g) {
        if (!tp.needs_grad(logits)) return;
        auto& gl = tp.grad_buffer(logits);
        const Scalar s = g(0, 0) * norm;
        for (std::size_t i = 0; i < tgt.size(); ++i) {
          if (!msk[i]) continue;
          const auto r = static_cast<Eigen::Index>(i);
          gl.row(r) += s * probs.row(r);
          gl(r, tgt[i]) -= s;
        }
      });
}

}  // namespace dsgpt
