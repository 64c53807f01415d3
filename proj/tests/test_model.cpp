#include "support.hpp"

#include <gtest/gtest.h>

using namespace dsgpt;
using namespace dsgpt::testing;

namespace {

ModelConfig hand_config() {
  ModelConfig c;
  c.vocab_size = 16;
  c.d_model = 8;
  c.max_seq_len = 16;
  c.n_layers = 1;
  c.n_heads = 1;
  c.d_ff = 32;
  c.tie_embeddings = true;
  return c;
}

std::vector<TokenId> random_ids(std::mt19937_64& rng, std::size_t n, int vocab) {
  std::uniform_int_distribution<TokenId> tok(0, vocab - 1);
  std::vector<TokenId> ids(n);
  for (auto& id : ids) id = tok(rng);
  return ids;
}

}  // namespace

TEST(ModelConfig, HandEnumeratedParameterCount) {
  // token 16·8 + position 16·8
  // block: ln1 8+8, q/k/v/o 4·(8·8+8), ln2 8+8, fc 8·32+32, proj 32·8+8
  // final norm 8+8; output projection tied
  const std::size_t want = 128 + 128 + 16 + 4 * 72 + 16 + 288 + 264 + 16;
  EXPECT_EQ(want, 1144u);
  EXPECT_EQ(num_params(hand_config()), want);
  EXPECT_EQ(TransformerLM<float>(hand_config()).parameter_count(), want);
}

TEST(ModelConfig, MaterializedCountMatchesClosedForm) {
  for (int layers : {1, 2, 3}) {
    for (bool tied : {true, false}) {
      auto c = hand_config();
      c.n_layers = layers;
      c.n_heads = 2;
      c.d_ff = 20;
      c.tie_embeddings = tied;
      EXPECT_EQ(TransformerLM<float>(c).parameter_count(), num_params(c));
    }
  }
}

TEST(ModelConfig, UntyingAddsOutputProjection) {
  auto c = hand_config();
  const auto tied = num_params(c);
  c.tie_embeddings = false;
  EXPECT_EQ(num_params(c) - tied, 16u * 8u);
}

TEST(ModelConfig, DoublingLayersAddsPerBlockCount) {
  auto c = model_preset("tiny", 40);
  const auto base = num_params(c);
  const auto per_block = block_param_count(c);
  c.n_layers *= 2;
  EXPECT_EQ(num_params(c) - base, 2u * per_block);
}

TEST(ModelConfig, InvalidConfigsListViolations) {
  auto c = hand_config();
  c.n_heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_THROW(TransformerLM<float>{c}, ConfigError);
  c = hand_config();
  c.vocab_size = 3;
  c.dropout_rate = 1.0;
  try {
    c.validate();
    FAIL();
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("vocab_size"), std::string::npos);
    EXPECT_NE(msg.find("dropout_rate"), std::string::npos);
  }
}

TEST(ModelConfig, PresetLayerCounts) {
  EXPECT_EQ(model_preset("dsgpt", 100).n_layers, 12);
  EXPECT_EQ(model_preset("dsgpt", 100).d_model, 768);
  EXPECT_EQ(model_preset("dsgpt_large", 100).n_layers, 24);
  EXPECT_EQ(model_preset("dsgpt_large", 100).d_model, 1024);
  const auto tiny = model_preset("tiny", 100);
  EXPECT_EQ(tiny.n_layers, 2);
  EXPECT_EQ(tiny.d_model, 64);
  EXPECT_EQ(tiny.n_heads, 4);
  EXPECT_THROW(model_preset("huge", 100), ConfigError);
  EXPECT_NO_THROW(model_preset("dsgpt_large", 100).validate());
}

TEST(ModelConfig, DsgptPresetIsConstructible) {
  const auto c = model_preset("dsgpt", 32);
  TransformerLM<float> model(c);
  EXPECT_EQ(model.parameter_count(), num_params(c));
  const std::vector<TokenId> ids{2, 5, 10, 3};
  const auto logits = model.logits(ids);
  EXPECT_EQ(logits.rows(), 4);
  EXPECT_EQ(logits.cols(), 32);
}

TEST(Init, SameSeedIsBitIdenticalAndStatisticsMatch) {
  auto c = model_preset("tiny", 30);
  TransformerLM<float> a(c), b(c);
  auto pa = a.parameters();
  auto pb = b.parameters();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(pa[i].second->value(), pb[i].second->value()) << pa[i].first;

  c.seed = 1;
  TransformerLM<float> other(c);
  EXPECT_NE(other.parameters()[0].second->value(), pa[0].second->value());

  for (const auto& [name, t] : pa) {
    const auto& v = t->value();
    if (name.ends_with("gain")) {
      EXPECT_TRUE((v.array() == 1.0f).all()) << name;
    } else if (name.ends_with("bias") || name.find(".b_") != std::string::npos) {
      EXPECT_TRUE((v.array() == 0.0f).all()) << name;
    } else {
      const double mean = v.template cast<double>().mean();
      const double sd = std::sqrt((v.template cast<double>().array() - mean).square().mean());
      EXPECT_NEAR(mean, 0.0, 0.004) << name;
      EXPECT_NEAR(sd, 0.02, 0.002) << name;
    }
  }
}

TEST(Forward, ShapeAndInputErrors) {
  const auto c = hand_config();
  TransformerLM<float> model(c);
  std::mt19937_64 rng(1);
  for (std::size_t T : {1u, 5u, 16u}) {
    const auto logits = model.logits(random_ids(rng, T, 16));
    EXPECT_EQ(logits.rows(), static_cast<Eigen::Index>(T));
    EXPECT_EQ(logits.cols(), 16);
  }
  EXPECT_THROW(model.logits(random_ids(rng, 17, 16)), DimensionError);
  EXPECT_THROW(model.logits(std::vector<TokenId>{}), DimensionError);
  EXPECT_THROW(model.logits(std::vector<TokenId>{1, 16}), DimensionError);
}

TEST(Forward, CausalityUnderSuffixEdits) {
  auto c = model_preset("tiny", 20);
  c.max_seq_len = 24;
  TransformerLM<float> model(c);
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<std::size_t> len(2, 24);
  std::uniform_int_distribution<TokenId> tok(0, 19);
  for (int trial = 0; trial < 100; ++trial) {
    auto ids = random_ids(rng, len(rng), 20);
    const std::size_t j = std::uniform_int_distribution<std::size_t>(1, ids.size() - 1)(rng);
    const auto before = model.logits(ids);
    for (std::size_t k = j; k < ids.size(); ++k) ids[k] = tok(rng);
    const auto after = model.logits(ids);
    EXPECT_EQ(before.topRows(static_cast<Eigen::Index>(j)), after.topRows(static_cast<Eigen::Index>(j)));
  }
}

TEST(Forward, DeterministicInEvalAndDropoutOnlyInTrain) {
  auto c = model_preset("tiny", 20);
  TransformerLM<float> model(c);
  const std::vector<TokenId> ids{2, 5, 9, 12, 3, 7};
  EXPECT_EQ(model.logits(ids), model.logits(ids));
  {
    Tape<float> tape(GradMode::inference);
    EXPECT_EQ(model.forward(tape, ids, ForwardMode::eval).value(), model.logits(ids));
  }
  std::mt19937_64 rng(3);
  Tape<float> tape(GradMode::inference);
  const auto train_logits = model.forward(tape, ids, ForwardMode::train, &rng).value();
  EXPECT_NE(train_logits, model.logits(ids));
  c.dropout_rate = 0.0;
  TransformerLM<float> no_dropout(c);
  Tape<float> t2(GradMode::inference);
  EXPECT_EQ(no_dropout.forward(t2, ids, ForwardMode::train, &rng).value(), no_dropout.logits(ids));
  Tape<float> t3(GradMode::inference);
  EXPECT_THROW(model.forward(t3, ids, ForwardMode::train, nullptr), Error);
}

TEST(Forward, FreshModelIsNearUniform) {
  const int V = 40;
  TransformerLM<float> model(model_preset("tiny", V));
  std::mt19937_64 rng(4);
  const Eigen::MatrixXd logits = model.logits(random_ids(rng, 32, V)).cast<double>();
  for (Eigen::Index t = 0; t < logits.rows(); ++t) {
    const Eigen::RowVectorXd row = logits.row(t);
    const Eigen::ArrayXd p = (row.array() - row.maxCoeff()).exp();
    const Eigen::ArrayXd q = p / p.sum();
    const double entropy = -(q * q.log()).sum();
    EXPECT_NEAR(entropy, std::log(V), 0.15 * std::log(V));
  }
}

TEST(Forward, UntiedModelUsesSeparateProjection) {
  auto c = hand_config();
  c.tie_embeddings = false;
  TransformerLM<double> model(c);
  const std::vector<TokenId> ids{1, 2, 3};
  const auto before = model.logits(ids);
  for (auto& [name, t] : model.parameters()) {
    if (name == "output_projection") t->value().setZero();
  }
  EXPECT_NE(model.logits(ids), before);
  EXPECT_TRUE(model.logits(ids).isZero(0.0));
}

TEST(Forward, CastToDoubleAgreesWithFloat) {
  TransformerLM<float> model(model_preset("tiny", 20));
  const auto m64 = model.cast<double>();
  const std::vector<TokenId> ids{2, 5, 9, 12, 3, 7};
  EXPECT_LE((model.logits(ids).cast<double>() - m64.logits(ids)).cwiseAbs().maxCoeff(), 1e-4);
}

TEST(Parameters, OrderedNamesAreStable) {
  TransformerLM<float> model(hand_config());
  const auto params = model.parameters();
  EXPECT_EQ(params.front().first, "token_embedding");
  EXPECT_EQ(params[1].first, "position_embedding");
  EXPECT_EQ(params.back().first, "final_norm.bias");
  std::set<std::string> names;
  for (const auto& [name, t] : params) EXPECT_TRUE(names.insert(name).second) << name;
}
