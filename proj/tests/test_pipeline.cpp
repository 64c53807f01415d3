#include "support.hpp"

#include "dsgpt/checkpoint.hpp"
#include "dsgpt/pipeline.hpp"

#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

using namespace dsgpt;
using namespace dsgpt::testing;
using nlohmann::json;

namespace {

std::string read_all(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::vector<json> read_jsonl(const fs::path& p) {
  std::vector<json> out;
  std::ifstream in(p);
  for (std::string line; std::getline(in, line);) {
    if (!line.empty()) out.push_back(json::parse(line));
  }
  return out;
}

ExperimentConfig small_config(const fs::path& root) {
  ExperimentConfig c;
  c.out_dir = (root / "out").string();
  c.pretrain.steps = 20;
  c.pretrain.batch_size = 8;
  c.pretrain.eval_each_epoch = false;
  c.finetune.steps = 10;
  c.finetune.batch_size = 8;
  c.finetune.eval_each_epoch = false;
  c.generation.max_new_tokens = 6;
  c.generation.beam_width = 2;
  c.model.n_layers = 1;
  c.model.d_model = 16;
  c.model.n_heads = 2;
  c.model.d_ff = 32;
  c.synthetic.pretrain_size = 120;
  c.synthetic.finetune_size = 40;
  c.synthetic.valid_size = 10;
  c.seeds = {0, 1};
  return c;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(DSGPT_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST(Config, JsonRoundTrip) {
  auto c = small_config("/tmp");
  c.synthetic.finetune_family = Family::C_reviewlike;
  c.generation.truncate_to = 5;
  c.length_control_lambda = 2.5;
  c.rouge_tokenization = RougeTokenization::vocab_tokens;
  c.data.vocab = "v.txt";
  EXPECT_EQ(experiment_config_from_json(to_json(c)), c);
  EXPECT_EQ(experiment_config_from_json(json::object()), ExperimentConfig{});

  TempDir dir("cfg");
  save_experiment_config(c, dir / "c.json");
  EXPECT_EQ(load_experiment_config(dir / "c.json"), c);
  EXPECT_THROW(load_experiment_config(dir / "missing.json"), ConfigError);
}

TEST(Config, UnknownKeysAndBadValuesAreRejected) {
  EXPECT_THROW(experiment_config_from_json(json{{"modle", json::object()}}), ConfigError);
  EXPECT_THROW(experiment_config_from_json(json{{"pretrain", {{"stepz", 3}}}}), ConfigError);
  EXPECT_THROW(experiment_config_from_json(json{{"pretrain", {{"steps", "many"}}}}), ConfigError);
  const auto preset = experiment_config_from_json(json{{"model", {{"preset", "dsgpt"}}}});
  EXPECT_EQ(preset.model.n_layers, 12);
  auto c = ExperimentConfig{};
  c.seeds.clear();
  EXPECT_THROW(validate(c), ConfigError);
  c = ExperimentConfig{};
  c.length_control_lambda = 0.5;
  EXPECT_THROW(validate(c), ConfigError);
}

TEST(Commands, MissingInputsFailBeforeCompute) {
  TempDir dir("missing");
  auto c = small_config(dir.path());
  c.data.pretrain_train = (dir / "nope.jsonl").string();
  const auto t0 = std::chrono::steady_clock::now();
  EXPECT_THROW(cmd_pretrain(c), Error);
  EXPECT_LT(seconds_since(t0), 1.0);
  EXPECT_FALSE(fs::exists(dir / "out" / "pretrain"));
  c.data.finetune_train = (dir / "nope.jsonl").string();
  EXPECT_THROW(cmd_finetune(c), Error);
  EXPECT_THROW(cmd_generate(dir / "a.ckpt", dir / "v.txt", dir / "in.jsonl", dir / "o.jsonl", GenerationConfig{}),
               Error);
  EXPECT_THROW(cmd_evaluate(dir / "c.jsonl", dir / "r.jsonl", RougeTokenization::char_level), Error);
}

TEST(Commands, PretrainReducesPerplexityAndIsReproducible) {
  TempDir dir("pretrain");
  write_jsonl(dir / "a.jsonl", make_synthetic_family(Family::A_compress, 2000, 1));
  write_jsonl(dir / "a_valid.jsonl", make_synthetic_family(Family::A_compress, 100, 2));
  ExperimentConfig c;
  c.out_dir = (dir / "run1").string();
  c.data.pretrain_train = (dir / "a.jsonl").string();
  c.data.pretrain_valid = (dir / "a_valid.jsonl").string();
  c.pretrain.steps = 300;
  const auto t0 = std::chrono::steady_clock::now();
  const auto outcome = cmd_pretrain(c);
  EXPECT_LT(seconds_since(t0), 120.0);
  ASSERT_TRUE(fs::exists(outcome.checkpoint));
  EXPECT_TRUE(fs::exists(outcome.vocab_path));
  EXPECT_TRUE(fs::exists(dir / "run1" / "config.effective.json"));
  EXPECT_TRUE(fs::exists(dir / "run1" / "pretrain" / "train_log.jsonl"));

  const auto vocab = Vocabulary::load(outcome.vocab_path);
  const auto trained = load_checkpoint(outcome.checkpoint);
  auto fresh_cfg = trained.config();
  TransformerLM<float> fresh(fresh_cfg);
  const auto valid = format_dataset(load_jsonl(dir / "a_valid.jsonl"), vocab, 64, LossMode::full_sequence);
  const double before = perplexity(fresh, valid);
  const double after = perplexity(trained, valid);
  EXPECT_LT(after, before * 0.5) << before << " -> " << after;
  // Epoch records fall at epoch boundaries, before the last partial epoch.
  const auto& epochs = outcome.report.epochs;
  ASSERT_GE(epochs.size(), 2u);
  ASSERT_TRUE(epochs.front().heldout_perplexity && epochs.back().heldout_perplexity);
  EXPECT_LT(*epochs.back().heldout_perplexity, *epochs.front().heldout_perplexity);
  EXPECT_LT(epochs.back().step, 300u);

  // Same config into another directory gives the same weights.
  c.out_dir = (dir / "run2").string();
  c.pretrain.steps = 30;
  const auto a = cmd_pretrain(c);
  c.out_dir = (dir / "run3").string();
  const auto b = cmd_pretrain(c);
  EXPECT_EQ(hash_file(a.checkpoint), hash_file(b.checkpoint));
}

TEST(Commands, FinetuneFromCheckpointOrScratch) {
  TempDir dir("finetune");
  write_jsonl(dir / "a.jsonl", make_synthetic_family(Family::A_compress, 200, 1));
  write_jsonl(dir / "b.jsonl", make_synthetic_family(Family::B_titlelike, 60, 2));
  auto c = small_config(dir.path());
  c.out_dir = (dir / "pre").string();
  c.data.pretrain_train = (dir / "a.jsonl").string();
  const auto pre = cmd_pretrain(c);

  // From a checkpoint without its vocabulary: refused up front.
  c.out_dir = (dir / "ft0").string();
  c.data.finetune_train = (dir / "b.jsonl").string();
  EXPECT_THROW(cmd_finetune(c, pre.checkpoint), ConfigError);

  // Zero steps reproduce the initial checkpoint's weights.
  c.data.vocab = pre.vocab_path;
  c.finetune.steps = 0;
  const auto zero = cmd_finetune(c, pre.checkpoint);
  const auto init = load_checkpoint(pre.checkpoint);
  const auto copy = load_checkpoint(zero.checkpoint);
  const std::vector<TokenId> ids{2, 5, 10, 11, 3};
  EXPECT_EQ(copy.logits(ids), init.logits(ids));

  // A vocabulary that differs from the checkpoint's is a typed error.
  build_vocab({"xyz"}).save(dir / "other_vocab.txt");
  c.data.vocab = (dir / "other_vocab.txt").string();
  c.out_dir = (dir / "ft1").string();
  EXPECT_THROW(cmd_finetune(c, pre.checkpoint), VocabMismatchError);

  // Without init_from a fresh model trains on its own vocabulary.
  c.data.vocab.clear();
  c.finetune.steps = 5;
  c.out_dir = (dir / "ft2").string();
  const auto scratch = cmd_finetune(c);
  EXPECT_EQ(scratch.report.losses.size(), 5u);
  EXPECT_TRUE(fs::exists(dir / "ft2" / "vocab.txt"));
}

TEST(Commands, GenerateAndEvaluateFormats) {
  TempDir dir("generate");
  const auto run = memorize_one(300);
  run.vocab.save(dir / "vocab.txt");
  save_checkpoint(run.model, 300, dir / "m.ckpt");
  std::ofstream(dir / "in.jsonl") << json{{"source", run.example.source}, {"task", run.example.task}}.dump() << '\n'
                                  << json{{"source", ""}, {"task", 0}}.dump() << '\n';
  GenerationConfig g;
  g.max_new_tokens = 8;
  cmd_generate(dir / "m.ckpt", dir / "vocab.txt", dir / "in.jsonl", dir / "out.jsonl", g);
  const auto rows = read_jsonl(dir / "out.jsonl");
  ASSERT_EQ(rows.size(), 2u);
  for (const char* key : {"source", "output", "log_prob", "stop_reason", "length"}) EXPECT_TRUE(rows[0].contains(key));
  EXPECT_EQ(rows[0]["output"], run.example.target);
  EXPECT_EQ(rows[0]["stop_reason"], "eos");
  EXPECT_EQ(rows[0]["length"], run.example.target.size());
  EXPECT_LE(rows[1]["length"].get<int>(), 8);

  // A vocabulary the checkpoint was not trained with is refused.
  build_vocab({"xyz"}).save(dir / "other.txt");
  EXPECT_THROW(cmd_generate(dir / "m.ckpt", dir / "other.txt", dir / "in.jsonl", dir / "o2.jsonl", g),
               VocabMismatchError);

  std::ofstream(dir / "refs.jsonl") << json{{"target", run.example.target}}.dump() << '\n'
                                    << json{{"target", "zzz"}}.dump() << '\n';
  const auto scores = cmd_evaluate(dir / "out.jsonl", dir / "refs.jsonl", RougeTokenization::char_level);
  const auto want = corpus_rouge({{rows[0]["output"], run.example.target}, {rows[1]["output"], "zzz"}},
                                 RougeTokenization::char_level);
  EXPECT_DOUBLE_EQ(scores.rougeL.f1, want.rougeL.f1);

  std::ofstream(dir / "pairs.jsonl") << R"({"candidate": "abc", "reference": "abd"})" << '\n';
  EXPECT_NEAR(cmd_evaluate(dir / "pairs.jsonl", "", RougeTokenization::char_level).rouge1.f1, 200.0 / 3, 1e-9);
  const auto j = to_json(scores);
  EXPECT_TRUE(j.contains("rouge1") && j.contains("rouge2") && j.contains("rougeL"));
}

TEST(Commands, LockedDirectoryIsRefused) {
  TempDir dir("lock");
  {
    DirectoryLock lock(dir.path());
    EXPECT_THROW(DirectoryLock{dir.path()}, Error);
    auto c = small_config(dir.path());
    c.out_dir = dir.path().string();
    EXPECT_THROW(cmd_experiment(c), Error);
  }
  EXPECT_NO_THROW(DirectoryLock{dir.path()});
}

TEST(Experiment, TableStructureAndResume) {
  TempDir dir("experiment");
  const auto c = small_config(dir.path());
  const auto r = cmd_experiment(c);
  // 2 seeds × 2 arms × 3 methods
  ASSERT_EQ(r.rows.size(), 12u);
  std::set<std::string> arms, methods;
  for (const auto& row : r.rows) {
    arms.insert(row.arm);
    methods.insert(row.method);
    EXPECT_GE(row.scores.rougeL.f1, 0.0);
    EXPECT_LE(row.scores.rougeL.f1, 100.0);
    EXPECT_GE(row.mean_length, 0.0);
  }
  EXPECT_EQ(arms, (std::set<std::string>{std::string(kArmScratch), std::string(kArmPretrained)}));
  EXPECT_EQ(methods, (std::set<std::string>{"beam", "greedy", "greedy+lambda"}));
  ASSERT_EQ(r.checks.size(), 2u);
  EXPECT_EQ(r.passed, r.checks[0].passed && r.checks[1].passed);

  const fs::path out = c.out_dir;
  const auto text = read_all(out / "results.txt");
  const auto j = json::parse(read_all(out / "results.json"));
  EXPECT_EQ(text, r.table_text);
  EXPECT_EQ(j, r.table_json);
  EXPECT_EQ(j["rows"].size(), 12u);
  EXPECT_NE(text.find(kArmPretrained), std::string::npos);
  EXPECT_NE(text.find("ROUGE-L"), std::string::npos);
  // No absolute paths leak into the tables.
  EXPECT_EQ(text.find(dir.path().string()), std::string::npos);
  EXPECT_EQ(j.dump().find(dir.path().string()), std::string::npos);
  EXPECT_TRUE(fs::exists(out / "seed_0" / std::string(kArmPretrained) / "beam.predictions.jsonl"));

  const auto resumed = cmd_experiment(c, true);
  EXPECT_EQ(resumed.table_text, r.table_text);
  EXPECT_EQ(read_all(out / "results.json"), j.dump(2) + '\n');
}

TEST(Cli, SubcommandsAndExitCodes) {
  TempDir dir("cli");
  const auto d = dir.path().string();
  EXPECT_EQ(run_cli("--help"), 0);
  EXPECT_EQ(run_cli("make-data --family A_compress --size 30 --seed 3 --out " + d + "/a.jsonl"), 0);
  EXPECT_EQ(load_jsonl(dir / "a.jsonl"), make_synthetic_family(Family::A_compress, 30, 3));
  EXPECT_EQ(run_cli("build-vocab --corpus " + d + "/a.jsonl --out " + d + "/v.txt --tasks 2"), 0);
  EXPECT_EQ(Vocabulary::load(dir / "v.txt").num_task_tokens(), 2u);
  std::ofstream(dir / "pairs.jsonl") << R"({"candidate": "abc", "reference": "abd"})" << '\n';
  EXPECT_EQ(run_cli("evaluate --candidates " + d + "/pairs.jsonl --out " + d + "/scores.json"), 0);
  const auto scores = json::parse(read_all(dir / "scores.json"));
  EXPECT_NEAR(scores["rouge1"]["f1"].get<double>(), 200.0 / 3, 1e-9);
  EXPECT_EQ(run_cli("experiment --config " + d + "/missing.json"), 2);
  EXPECT_EQ(run_cli("make-data --family Z --out " + d + "/z.jsonl"), 2);
  EXPECT_NE(run_cli("no-such-command"), 0);
}
