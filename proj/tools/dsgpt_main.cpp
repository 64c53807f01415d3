// Command-line front end: vocabulary, data, training, decoding, scoring and
// the full transfer experiment.

#include "dsgpt/pipeline.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iostream>

namespace fs = std::filesystem;
using namespace dsgpt;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string vocab;
};

ExperimentConfig resolve(const Common& c) {
  ExperimentConfig cfg = c.config.empty() ? ExperimentConfig{} : load_experiment_config(c.config);
  if (!c.out.empty()) cfg.out_dir = c.out;
  if (!c.vocab.empty()) cfg.data.vocab = c.vocab;
  if (c.seed) {
    cfg.seeds = {*c.seed};
    cfg.model.seed = *c.seed;
    cfg.pretrain.seed = *c.seed;
    cfg.finetune.seed = *c.seed;
  }
  return cfg;
}

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config, "JSON experiment config");
  sub->add_option("--seed", c.seed, "Override every seed");
  sub->add_option("--out", c.out, "Output directory");
}

void print_report(const TrainOutcome& o) {
  if (!o.report.losses.empty()) {
    std::cout << "steps " << o.report.losses.size() << ", final loss " << o.report.losses.back() << '\n';
  }
  for (const auto& e : o.report.epochs) {
    std::cout << "epoch " << e.epoch << " (step " << e.step << "): train ppl " << e.train_perplexity;
    if (e.heldout_perplexity) std::cout << ", held-out ppl " << *e.heldout_perplexity;
    std::cout << '\n';
  }
  std::cout << "checkpoint " << o.checkpoint << "\nvocabulary " << o.vocab_path << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Decoder-only transformer pre-training, fine-tuning and summarization"};
  app.require_subcommand(1);

  // build-vocab
  std::vector<std::string> corpora;
  std::string vocab_out;
  std::size_t min_freq = 1, num_tasks = kDefaultTaskTokens;
  std::optional<std::size_t> max_size;
  auto* bv = app.add_subcommand("build-vocab", "Character vocabulary from JSONL corpora");
  bv->add_option("--corpus", corpora, "JSONL files with source/target")->required()->check(CLI::ExistingFile);
  bv->add_option("--out", vocab_out, "Vocabulary file to write")->required();
  bv->add_option("--min-freq", min_freq, "Drop characters seen fewer times");
  bv->add_option("--max-size", max_size, "Cap on total size, specials included");
  bv->add_option("--tasks", num_tasks, "Number of task tokens");

  // make-data
  std::string family = "A_compress", data_out;
  std::size_t data_size = 2000;
  std::uint64_t data_seed = 0;
  auto* md = app.add_subcommand("make-data", "Write a synthetic dataset family as JSONL");
  md->add_option("--family", family, "A_compress, B_titlelike or C_reviewlike");
  md->add_option("--size", data_size, "Number of examples");
  md->add_option("--seed", data_seed, "Generator seed");
  md->add_option("--out", data_out, "JSONL file to write")->required();

  Common pre_c, ft_c, exp_c;
  std::string train_path, valid_path, init_from;
  auto* pt = app.add_subcommand("pretrain", "Train from scratch on a corpus");
  add_common(pt, pre_c);
  pt->add_option("--train", train_path, "Training JSONL (overrides data.pretrain_train)");
  pt->add_option("--valid", valid_path, "Held-out JSONL");
  pt->add_option("--vocab", pre_c.vocab, "Existing vocabulary");

  auto* ft = app.add_subcommand("finetune", "Fine-tune a checkpoint, or train from scratch without one");
  add_common(ft, ft_c);
  ft->add_option("--train", train_path, "Training JSONL (overrides data.finetune_train)");
  ft->add_option("--valid", valid_path, "Held-out JSONL");
  ft->add_option("--vocab", ft_c.vocab, "Vocabulary of the initial checkpoint");
  ft->add_option("--init-from", init_from, "Checkpoint to start from");

  // generate
  std::string checkpoint, gen_vocab, input, output, strategy;
  std::optional<int> beam, truncate, max_new;
  std::optional<double> lambda;
  std::string gen_config;
  auto* gn = app.add_subcommand("generate", "Decode summaries for JSONL {source, task}");
  gn->add_option("--config", gen_config, "JSON config whose generation section is used");
  gn->add_option("--checkpoint", checkpoint, "Model checkpoint")->required();
  gn->add_option("--vocab", gen_vocab, "Vocabulary file")->required();
  gn->add_option("--input", input, "JSONL inputs")->required();
  gn->add_option("--output", output, "JSONL predictions")->required();
  gn->add_option("--strategy", strategy, "greedy or beam");
  gn->add_option("--beam", beam, "Beam width");
  gn->add_option("--lambda", lambda, "End-token amplification (>= 1)");
  gn->add_option("--truncate", truncate, "Cut outputs to this many tokens");
  gn->add_option("--max-new", max_new, "Maximum generated tokens");

  // evaluate
  std::string candidates, references, tokenization = "char", eval_vocab, eval_out;
  auto* ev = app.add_subcommand("evaluate", "ROUGE-1/2/L of candidates against references");
  ev->add_option("--candidates", candidates, "JSONL {candidate, reference} or {output}")->required();
  ev->add_option("--references", references, "JSONL {reference} or {target}, zipped by line");
  ev->add_option("--tokenization", tokenization, "char or vocab_tokens");
  ev->add_option("--vocab", eval_vocab, "Vocabulary for vocab_tokens scoring");
  ev->add_option("--out", eval_out, "Also write the scores here");

  bool resume = false;
  auto* ex = app.add_subcommand("experiment", "Pre-train, fine-tune both arms, decode and score");
  add_common(ex, exp_c);
  ex->add_option("--vocab", exp_c.vocab, "Fixed vocabulary");
  ex->add_flag("--resume", resume, "Skip stages already completed with identical inputs");
  ex->add_option("--lambda", lambda, "End-token factor of the length-control arm");
  ex->add_option("--beam", beam, "Beam width");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*bv) {
      std::vector<std::string> texts;
      for (const auto& path : corpora) {
        for (const auto& e : load_jsonl(path, false)) {
          texts.push_back(e.source);
          texts.push_back(e.target);
        }
      }
      const auto vocab = build_vocab(texts, min_freq, max_size, num_tasks);
      vocab.save(vocab_out);
      std::cout << "vocabulary of " << vocab.size() << " tokens written to " << vocab_out << '\n';
    } else if (*md) {
      write_jsonl(data_out, make_synthetic_family(parse_family(family), data_size, data_seed));
      std::cout << data_size << " " << family << " examples written to " << data_out << '\n';
    } else if (*pt) {
      auto cfg = resolve(pre_c);
      if (!train_path.empty()) cfg.data.pretrain_train = train_path;
      if (!valid_path.empty()) cfg.data.pretrain_valid = valid_path;
      print_report(cmd_pretrain(cfg));
    } else if (*ft) {
      auto cfg = resolve(ft_c);
      if (!train_path.empty()) cfg.data.finetune_train = train_path;
      if (!valid_path.empty()) cfg.data.finetune_valid = valid_path;
      if (!init_from.empty()) cfg.finetune.init_from = init_from;
      print_report(cmd_finetune(cfg));
    } else if (*gn) {
      GenerationConfig gen = gen_config.empty() ? ExperimentConfig{}.generation
                                                : load_experiment_config(gen_config).generation;
      if (!strategy.empty()) gen.strategy = parse_strategy(strategy);
      if (beam) gen.beam_width = *beam;
      if (lambda) gen.eos_amplification = *lambda;
      if (truncate) gen.truncate_to = *truncate;
      if (max_new) gen.max_new_tokens = *max_new;
      cmd_generate(checkpoint, gen_vocab, input, output, gen);
      std::cout << "predictions written to " << output << '\n';
    } else if (*ev) {
      const auto mode = parse_rouge_tokenization(tokenization);
      std::optional<Vocabulary> vocab;
      if (!eval_vocab.empty()) vocab = Vocabulary::load(eval_vocab);
      const auto scores = cmd_evaluate(candidates, references, mode, vocab ? &*vocab : nullptr);
      const auto text = to_json(scores).dump(2);
      std::cout << text << '\n';
      if (!eval_out.empty()) std::ofstream(eval_out) << text << '\n';
    } else if (*ex) {
      auto cfg = resolve(exp_c);
      if (lambda) cfg.length_control_lambda = *lambda;
      if (beam) cfg.generation.beam_width = *beam;
      const auto result = cmd_experiment(cfg, resume);
      std::cout << result.table_text;
      return result.passed ? 0 : 1;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
