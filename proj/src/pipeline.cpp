#include "dsgpt/pipeline.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <cmath>
#include <cstdio>
#include <functional>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

namespace dsgpt {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Pulls known keys out of a JSON object and rejects anything left over, so
// a misspelled key fails loudly instead of silently keeping a default.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + " must be a JSON object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      out = it->get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(where_ + "." + key + ": " + e.what());
    }
  }

  template <typename Enum, typename Parse>
  void get_enum(const char* key, Enum& out, Parse parse) {
    std::string text;
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    get(key, text);
    try {
      out = parse(text);
    } catch (const Error& e) {
      throw ConfigError(where_ + "." + key + ": " + e.what());
    }
  }

  const json* sub(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void finish() const {
    for (const auto& item : j_.items()) {
      if (!seen_.count(item.key())) throw ConfigError("unknown config key " + where_ + "." + item.key());
    }
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

json model_to_json(const ModelConfig& m) {
  return {{"n_layers", m.n_layers},         {"n_heads", m.n_heads},
          {"d_model", m.d_model},           {"d_ff", m.d_ff},
          {"max_seq_len", m.max_seq_len},   {"vocab_size", m.vocab_size},
          {"dropout_rate", m.dropout_rate}, {"tie_embeddings", m.tie_embeddings},
          {"seed", m.seed},                 {"init_std", m.init_std}};
}

ModelConfig model_from_json(const json& j) {
  ObjectReader r(j, "model");
  ModelConfig m = model_preset("tiny", 0);
  std::string preset;
  r.get("preset", preset);
  if (!preset.empty()) {
    try {
      m = model_preset(preset, 0);
    } catch (const Error& e) {
      throw ConfigError(std::string("model.preset: ") + e.what());
    }
  }
  r.get("n_layers", m.n_layers);
  r.get("n_heads", m.n_heads);
  r.get("d_model", m.d_model);
  r.get("d_ff", m.d_ff);
  r.get("max_seq_len", m.max_seq_len);
  r.get("vocab_size", m.vocab_size);
  r.get("dropout_rate", m.dropout_rate);
  r.get("tie_embeddings", m.tie_embeddings);
  r.get("seed", m.seed);
  r.get("init_std", m.init_std);
  r.finish();
  return m;
}

json train_to_json(const TrainConfig& t) {
  return {{"batch_size", t.batch_size},
          {"steps", t.steps},
          {"learning_rate", t.learning_rate},
          {"warmup_steps", t.warmup_steps},
          {"grad_clip_norm", t.grad_clip_norm},
          {"loss_mode", std::string(to_string(t.loss_mode))},
          {"seed", t.seed},
          {"checkpoint_every", t.checkpoint_every},
          {"init_from", t.init_from},
          {"eval_each_epoch", t.eval_each_epoch}};
}

TrainConfig train_from_json(const json& j, TrainConfig t, const std::string& where) {
  ObjectReader r(j, where);
  r.get("batch_size", t.batch_size);
  r.get("steps", t.steps);
  r.get("learning_rate", t.learning_rate);
  r.get("warmup_steps", t.warmup_steps);
  r.get("grad_clip_norm", t.grad_clip_norm);
  r.get_enum("loss_mode", t.loss_mode, parse_loss_mode);
  r.get("seed", t.seed);
  r.get("checkpoint_every", t.checkpoint_every);
  r.get("init_from", t.init_from);
  r.get("eval_each_epoch", t.eval_each_epoch);
  r.finish();
  return t;
}

json generation_to_json(const GenerationConfig& g) {
  return {{"strategy", std::string(to_string(g.strategy))},
          {"beam_width", g.beam_width},
          {"max_new_tokens", g.max_new_tokens},
          {"truncate_to", g.truncate_to ? json(*g.truncate_to) : json(nullptr)},
          {"eos_amplification", g.eos_amplification},
          {"length_normalize_beam", g.length_normalize_beam}};
}

GenerationConfig generation_from_json(const json& j, GenerationConfig g) {
  ObjectReader r(j, "generation");
  r.get_enum("strategy", g.strategy, parse_strategy);
  r.get("beam_width", g.beam_width);
  r.get("max_new_tokens", g.max_new_tokens);
  if (const json* t = r.sub("truncate_to")) {
    if (t->is_null()) {
      g.truncate_to.reset();
    } else if (t->is_number_integer()) {
      g.truncate_to = t->get<int>();
    } else {
      throw ConfigError("generation.truncate_to must be an integer or null");
    }
  }
  r.get("eos_amplification", g.eos_amplification);
  r.get("length_normalize_beam", g.length_normalize_beam);
  r.finish();
  return g;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string fixed2(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
  if (!out) throw Error("write failed for " + path.string());
}

void require_file(const std::string& path, const std::string& what, std::vector<std::string>& problems) {
  if (path.empty()) {
    problems.push_back(what + " is not set");
  } else if (!fs::is_regular_file(path)) {
    problems.push_back(what + " '" + path + "' does not exist");
  }
}

void check_optional_file(const std::string& path, const std::string& what, std::vector<std::string>& problems) {
  if (!path.empty() && !fs::is_regular_file(path)) problems.push_back(what + " '" + path + "' does not exist");
}

void throw_problems(const std::vector<std::string>& problems) {
  if (problems.empty()) return;
  std::string msg = "invalid configuration:";
  for (const auto& p : problems) msg += " " + p + ";";
  throw ConfigError(msg);
}

std::vector<std::string> text_corpus(const std::vector<RawExample>& a, const std::vector<RawExample>& b = {}) {
  std::vector<std::string> corpus;
  for (const auto* set : {&a, &b}) {
    for (const auto& ex : *set) {
      corpus.push_back(ex.source);
      corpus.push_back(ex.target);
    }
  }
  return corpus;
}

ModelConfig resolve_model(const ModelConfig& base, const Vocabulary& vocab) {
  ModelConfig m = base;
  const int v = static_cast<int>(vocab.size());
  if (m.vocab_size == 0) {
    m.vocab_size = v;
  } else if (m.vocab_size != v) {
    throw ConfigError("model.vocab_size " + std::to_string(m.vocab_size) + " does not match the vocabulary size " +
                      std::to_string(v));
  }
  m.validate();
  return m;
}

std::pair<std::vector<RawExample>, std::vector<RawExample>> load_split(const std::string& train_path,
                                                                       const std::string& valid_path) {
  auto train = load_jsonl(train_path);
  if (!valid_path.empty()) return {std::move(train), load_jsonl(valid_path)};
  return split_validation(std::move(train));
}

// Vocabulary from data.vocab when set, else built from `corpus` and saved to out/vocab.txt.
std::pair<Vocabulary, std::string> resolve_vocab(const ExperimentConfig& cfg, const std::vector<std::string>& corpus,
                                                 const fs::path& out) {
  if (!cfg.data.vocab.empty()) return {Vocabulary::load(cfg.data.vocab), cfg.data.vocab};
  auto vocab = build_vocab(corpus, cfg.min_freq, std::nullopt, cfg.num_task_tokens);
  const auto path = out / "vocab.txt";
  vocab.save(path);
  return {std::move(vocab), path.string()};
}

TrainReport run_training(TransformerLM<float>& model, const Vocabulary& vocab, const std::vector<RawExample>& train_set,
                         const std::vector<RawExample>& valid_set, TrainConfig tc, const fs::path& stage_dir) {
  const auto max_len = static_cast<std::size_t>(model.config().max_seq_len);
  const auto data = format_dataset(train_set, vocab, max_len, tc.loss_mode);
  FormattedDataset heldout;
  if (!valid_set.empty()) heldout = format_dataset(valid_set, vocab, max_len, tc.loss_mode);
  fs::create_directories(stage_dir);
  tc.checkpoint_dir = stage_dir.string();
  tc.log_path = (stage_dir / "train_log.jsonl").string();
  return train(model, data, tc, heldout.empty() ? nullptr : &heldout);
}

struct PredictionStats {
  std::vector<std::pair<std::string, std::string>> pairs;
  double mean_length = 0;
};

void write_predictions(const TransformerLM<float>& model, const Vocabulary& vocab,
                       const std::vector<RawExample>& inputs, const GenerationConfig& gen, const fs::path& output) {
  gen.validate();
  if (model.vocab_hash() != vocab.hash()) {
    throw VocabMismatchError("checkpoint vocabulary hash " + hex64(model.vocab_hash()) +
                             " does not match the vocabulary file (" + hex64(vocab.hash()) + ")");
  }
  TransformerScorer<float> scorer(model);
  std::string text;
  for (const auto& ex : inputs) {
    const auto g = generate(scorer, vocab, ex.source, ex.task, gen);
    json line = {{"source", ex.source},
                 {"output", g.text},
                 {"log_prob", g.log_prob},
                 {"stop_reason", std::string(to_string(g.stop))},
                 {"length", g.length()}};
    text += line.dump() + '\n';
  }
  write_text(output, text);
}

PredictionStats read_predictions(const fs::path& path, const std::vector<RawExample>& references) {
  std::istringstream in(read_text(path));
  PredictionStats stats;
  std::string line;
  std::size_t i = 0;
  double total = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (i >= references.size()) throw DataError(path.string() + " has more lines than the reference set");
    const auto j = json::parse(line);
    stats.pairs.emplace_back(j.at("output").get<std::string>(), references[i].target);
    total += j.at("length").get<double>();
    ++i;
  }
  if (i != references.size()) throw DataError(path.string() + " has fewer lines than the reference set");
  stats.mean_length = i ? total / static_cast<double>(i) : 0.0;
  return stats;
}

// Runs `run` unless resuming and the marker records the same input key and
// every output is still present.
bool run_stage(const fs::path& marker, const std::string& key, const std::vector<fs::path>& outputs, bool resume,
               const std::function<void()>& run) {
  const std::string want = hex64(fnv1a64(key)) + '\n';
  if (resume && fs::exists(marker) && read_text(marker) == want) {
    bool complete = true;
    for (const auto& o : outputs) complete = complete && fs::exists(o);
    if (complete) {
      std::clog << "skip " << marker.stem().string() << " (" << marker.parent_path().filename().string() << ")\n";
      return false;
    }
  }
  fs::remove(marker);
  run();
  write_text(marker, want);
  return true;
}

std::string file_key(const fs::path& path) { return hex64(hash_file(path)); }

json scores_row_json(const ExperimentRow& r) {
  return {{"arm", r.arm},
          {"method", r.method},
          {"seed", r.seed},
          {"rouge1_f1", r.scores.rouge1.f1},
          {"rouge2_f1", r.scores.rouge2.f1},
          {"rougeL_f1", r.scores.rougeL.f1},
          {"mean_length", r.mean_length}};
}

}  // namespace

TrainConfig ExperimentConfig::default_pretrain() {
  TrainConfig t;
  t.steps = 600;
  t.loss_mode = LossMode::full_sequence;
  return t;
}

TrainConfig ExperimentConfig::default_finetune() {
  TrainConfig t;
  t.steps = 200;
  t.loss_mode = LossMode::target_only;
  return t;
}

GenerationConfig ExperimentConfig::default_generation() {
  GenerationConfig g;
  g.max_new_tokens = 24;
  return g;
}

json to_json(const ExperimentConfig& cfg) {
  json seeds = json::array();
  for (auto s : cfg.seeds) seeds.push_back(s);
  return {
      {"model", model_to_json(cfg.model)},
      {"pretrain", train_to_json(cfg.pretrain)},
      {"finetune", train_to_json(cfg.finetune)},
      {"generation", generation_to_json(cfg.generation)},
      {"data",
       {{"vocab", cfg.data.vocab},
        {"pretrain_train", cfg.data.pretrain_train},
        {"pretrain_valid", cfg.data.pretrain_valid},
        {"finetune_train", cfg.data.finetune_train},
        {"finetune_valid", cfg.data.finetune_valid}}},
      {"synthetic",
       {{"pretrain_family", std::string(to_string(cfg.synthetic.pretrain_family))},
        {"pretrain_size", cfg.synthetic.pretrain_size},
        {"finetune_family", std::string(to_string(cfg.synthetic.finetune_family))},
        {"finetune_size", cfg.synthetic.finetune_size},
        {"valid_size", cfg.synthetic.valid_size}}},
      {"vocab", {{"min_freq", cfg.min_freq}, {"num_task_tokens", cfg.num_task_tokens}}},
      {"rouge_tokenization", cfg.rouge_tokenization == RougeTokenization::char_level ? "char" : "vocab_tokens"},
      {"experiment",
       {{"seeds", seeds},
        {"length_control_lambda", cfg.length_control_lambda},
        {"min_win_fraction", cfg.min_win_fraction},
        {"out_dir", cfg.out_dir}}},
  };
}

ExperimentConfig experiment_config_from_json(const json& j) {
  ExperimentConfig cfg;
  ObjectReader r(j, "config");
  if (const json* m = r.sub("model")) cfg.model = model_from_json(*m);
  if (const json* t = r.sub("pretrain")) cfg.pretrain = train_from_json(*t, cfg.pretrain, "pretrain");
  if (const json* t = r.sub("finetune")) cfg.finetune = train_from_json(*t, cfg.finetune, "finetune");
  if (const json* g = r.sub("generation")) cfg.generation = generation_from_json(*g, cfg.generation);
  if (const json* d = r.sub("data")) {
    ObjectReader dr(*d, "data");
    dr.get("vocab", cfg.data.vocab);
    dr.get("pretrain_train", cfg.data.pretrain_train);
    dr.get("pretrain_valid", cfg.data.pretrain_valid);
    dr.get("finetune_train", cfg.data.finetune_train);
    dr.get("finetune_valid", cfg.data.finetune_valid);
    dr.finish();
  }
  if (const json* s = r.sub("synthetic")) {
    ObjectReader sr(*s, "synthetic");
    sr.get_enum("pretrain_family", cfg.synthetic.pretrain_family, parse_family);
    sr.get("pretrain_size", cfg.synthetic.pretrain_size);
    sr.get_enum("finetune_family", cfg.synthetic.finetune_family, parse_family);
    sr.get("finetune_size", cfg.synthetic.finetune_size);
    sr.get("valid_size", cfg.synthetic.valid_size);
    sr.finish();
  }
  if (const json* v = r.sub("vocab")) {
    ObjectReader vr(*v, "vocab");
    vr.get("min_freq", cfg.min_freq);
    vr.get("num_task_tokens", cfg.num_task_tokens);
    vr.finish();
  }
  r.get_enum("rouge_tokenization", cfg.rouge_tokenization, parse_rouge_tokenization);
  if (const json* e = r.sub("experiment")) {
    ObjectReader er(*e, "experiment");
    er.get("seeds", cfg.seeds);
    er.get("length_control_lambda", cfg.length_control_lambda);
    er.get("min_win_fraction", cfg.min_win_fraction);
    er.get("out_dir", cfg.out_dir);
    er.finish();
  }
  r.finish();
  return cfg;
}

ExperimentConfig load_experiment_config(const fs::path& path) {
  if (!fs::is_regular_file(path)) throw ConfigError("config file '" + path.string() + "' does not exist");
  json j;
  try {
    j = json::parse(read_text(path));
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return experiment_config_from_json(j);
}

void save_experiment_config(const ExperimentConfig& cfg, const fs::path& path) {
  write_text(path, to_json(cfg).dump(2) + '\n');
}

void validate(const ExperimentConfig& cfg) {
  std::vector<std::string> problems;
  auto collect = [&](auto&& fn) {
    try {
      fn();
    } catch (const ConfigError& e) {
      problems.push_back(e.what());
    }
  };
  collect([&] {
    ModelConfig m = cfg.model;
    if (m.vocab_size == 0) m.vocab_size = static_cast<int>(special::kFixedCount + cfg.num_task_tokens);
    m.validate();
  });
  collect([&] { cfg.pretrain.validate(); });
  collect([&] { cfg.finetune.validate(); });
  collect([&] { cfg.generation.validate(); });
  if (cfg.model.vocab_size < 0) problems.push_back("model.vocab_size must be >= 0");
  if (cfg.min_freq < 1) problems.push_back("vocab.min_freq must be >= 1");
  if (cfg.seeds.empty()) problems.push_back("experiment.seeds must not be empty");
  if (std::set<std::uint64_t>(cfg.seeds.begin(), cfg.seeds.end()).size() != cfg.seeds.size()) {
    problems.push_back("experiment.seeds must be distinct");
  }
  if (!(cfg.length_control_lambda >= 1.0) || !std::isfinite(cfg.length_control_lambda)) {
    problems.push_back("experiment.length_control_lambda must be a finite value >= 1");
  }
  if (!(cfg.min_win_fraction > 0.0 && cfg.min_win_fraction <= 1.0)) {
    problems.push_back("experiment.min_win_fraction must be in (0, 1]");
  }
  if (cfg.out_dir.empty()) problems.push_back("experiment.out_dir must be set");
  if (cfg.synthetic.finetune_size == 0 || cfg.synthetic.valid_size == 0 || cfg.synthetic.pretrain_size < 2) {
    problems.push_back("synthetic sizes must be positive (pretrain_size >= 2)");
  }
  throw_problems(problems);
}

json to_json(const RougeScores& s) {
  auto one = [](const RougeScore& r) { return json{{"precision", r.precision}, {"recall", r.recall}, {"f1", r.f1}}; };
  return {{"rouge1", one(s.rouge1)}, {"rouge2", one(s.rouge2)}, {"rougeL", one(s.rougeL)}};
}

DirectoryLock::DirectoryLock(const fs::path& dir) : path_(dir / ".lock") {
  fs::create_directories(dir);
  const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
  if (fd < 0) {
    throw Error("output directory " + dir.string() + " is locked by another run (remove " + path_.string() +
                " if that run is gone)");
  }
  const std::string pid = std::to_string(::getpid()) + '\n';
  [[maybe_unused]] auto n = ::write(fd, pid.data(), pid.size());
  ::close(fd);
}

DirectoryLock::~DirectoryLock() {
  std::error_code ec;
  fs::remove(path_, ec);
}

TrainOutcome cmd_pretrain(const ExperimentConfig& cfg) {
  validate(cfg);
  std::vector<std::string> problems;
  require_file(cfg.data.pretrain_train, "data.pretrain_train", problems);
  check_optional_file(cfg.data.pretrain_valid, "data.pretrain_valid", problems);
  check_optional_file(cfg.data.vocab, "data.vocab", problems);
  check_optional_file(cfg.pretrain.init_from, "pretrain.init_from", problems);
  throw_problems(problems);

  const fs::path out = cfg.out_dir;
  DirectoryLock lock(out);
  save_experiment_config(cfg, out / "config.effective.json");
  auto [train_set, valid_set] = load_split(cfg.data.pretrain_train, cfg.data.pretrain_valid);
  auto [vocab, vocab_path] = resolve_vocab(cfg, text_corpus(train_set), out);

  TransformerLM<float> model(resolve_model(cfg.model, vocab));
  model.set_vocab_hash(vocab.hash());
  TrainOutcome outcome;
  outcome.report = run_training(model, vocab, train_set, valid_set, cfg.pretrain, out / "pretrain");
  outcome.checkpoint = outcome.report.final_checkpoint;
  outcome.vocab_path = vocab_path;
  return outcome;
}

TrainOutcome cmd_finetune(const ExperimentConfig& cfg) {
  validate(cfg);
  std::vector<std::string> problems;
  require_file(cfg.data.finetune_train, "data.finetune_train", problems);
  check_optional_file(cfg.data.finetune_valid, "data.finetune_valid", problems);
  check_optional_file(cfg.data.vocab, "data.vocab", problems);
  check_optional_file(cfg.finetune.init_from, "finetune.init_from", problems);
  if (!cfg.finetune.init_from.empty() && cfg.data.vocab.empty()) {
    problems.push_back("fine-tuning from a checkpoint needs data.vocab (the vocabulary it was trained with)");
  }
  throw_problems(problems);

  const fs::path out = cfg.out_dir;
  DirectoryLock lock(out);
  save_experiment_config(cfg, out / "config.effective.json");
  auto [train_set, valid_set] = load_split(cfg.data.finetune_train, cfg.data.finetune_valid);
  auto [vocab, vocab_path] = resolve_vocab(cfg, text_corpus(train_set), out);

  TrainConfig tc = cfg.finetune;
  TransformerLM<float> model = [&] {
    if (!tc.init_from.empty()) return load_checkpoint(tc.init_from);
    TransformerLM<float> fresh(resolve_model(cfg.model, vocab));
    fresh.set_vocab_hash(vocab.hash());
    return fresh;
  }();
  tc.init_from.clear();
  TrainOutcome outcome;
  outcome.report = run_training(model, vocab, train_set, valid_set, tc, out / "finetune");
  outcome.checkpoint = outcome.report.final_checkpoint;
  outcome.vocab_path = vocab_path;
  return outcome;
}

TrainOutcome cmd_finetune(const ExperimentConfig& cfg, const std::string& init_from) {
  ExperimentConfig c = cfg;
  c.finetune.init_from = init_from;
  return cmd_finetune(c);
}

void cmd_generate(const fs::path& checkpoint, const fs::path& vocab_path, const fs::path& input,
                  const fs::path& output, const GenerationConfig& gen) {
  std::vector<std::string> problems;
  require_file(checkpoint.string(), "checkpoint", problems);
  require_file(vocab_path.string(), "vocabulary", problems);
  require_file(input.string(), "input", problems);
  throw_problems(problems);
  gen.validate();
  const auto model = load_checkpoint(checkpoint);
  const auto vocab = Vocabulary::load(vocab_path);
  write_predictions(model, vocab, load_jsonl(input, false), gen, output);
}

RougeScores cmd_evaluate(const fs::path& candidates, const fs::path& references, RougeTokenization mode,
                         const Vocabulary* vocab) {
  std::vector<std::string> problems;
  require_file(candidates.string(), "candidates", problems);
  if (!references.empty()) require_file(references.string(), "references", problems);
  throw_problems(problems);

  auto lines = [](const fs::path& path) {
    std::vector<json> out;
    std::istringstream in(read_text(path));
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
      ++n;
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      try {
        out.push_back(json::parse(line));
      } catch (const json::parse_error& e) {
        throw DataError(path.string() + ":" + std::to_string(n) + ": invalid JSON: " + e.what());
      }
    }
    return out;
  };
  auto field = [](const json& j, std::initializer_list<const char*> keys, const std::string& where) {
    for (const char* k : keys) {
      auto it = j.find(k);
      if (it != j.end() && it->is_string()) return it->get<std::string>();
    }
    throw DataError(where + ": missing field '" + std::string(*keys.begin()) + "'");
  };

  std::vector<std::pair<std::string, std::string>> pairs;
  const auto cand = lines(candidates);
  if (references.empty()) {
    for (std::size_t i = 0; i < cand.size(); ++i) {
      const auto where = candidates.string() + " record " + std::to_string(i + 1);
      pairs.emplace_back(field(cand[i], {"candidate", "output"}, where), field(cand[i], {"reference", "target"}, where));
    }
  } else {
    const auto refs = lines(references);
    if (refs.size() != cand.size()) {
      throw DataError("candidates has " + std::to_string(cand.size()) + " records but references has " +
                      std::to_string(refs.size()));
    }
    for (std::size_t i = 0; i < cand.size(); ++i) {
      pairs.emplace_back(field(cand[i], {"candidate", "output"}, candidates.string() + " record " + std::to_string(i + 1)),
                         field(refs[i], {"reference", "target"}, references.string() + " record " + std::to_string(i + 1)));
    }
  }
  return corpus_rouge(pairs, mode, vocab);
}

ExperimentResult cmd_experiment(const ExperimentConfig& cfg, bool resume) {
  validate(cfg);
  std::vector<std::string> problems;
  check_optional_file(cfg.data.vocab, "data.vocab", problems);
  check_optional_file(cfg.data.pretrain_train, "data.pretrain_train", problems);
  check_optional_file(cfg.data.pretrain_valid, "data.pretrain_valid", problems);
  check_optional_file(cfg.data.finetune_train, "data.finetune_train", problems);
  check_optional_file(cfg.data.finetune_valid, "data.finetune_valid", problems);
  if (!cfg.pretrain.init_from.empty() || !cfg.finetune.init_from.empty()) {
    problems.push_back("experiment runs manage init_from themselves; leave it empty");
  }
  throw_problems(problems);

  const fs::path out = cfg.out_dir;
  DirectoryLock lock(out);
  save_experiment_config(cfg, out / "config.effective.json");

  struct Method {
    std::string name;
    GenerationConfig gen;
  };
  std::vector<Method> methods;
  {
    GenerationConfig g = cfg.generation;
    g.eos_amplification = 1.0;
    g.strategy = Strategy::beam;
    methods.push_back({"beam", g});
    g.strategy = Strategy::greedy;
    methods.push_back({"greedy", g});
    g.eos_amplification = cfg.length_control_lambda;
    methods.push_back({"greedy+lambda", g});
  }
  const std::vector<std::string> arms{std::string(kArmScratch), std::string(kArmPretrained)};

  ExperimentResult result;
  for (const std::uint64_t seed : cfg.seeds) {
    const fs::path dir = out / ("seed_" + std::to_string(seed));
    const fs::path data_dir = dir / "data";
    const fs::path markers = dir / "stages";
    ModelConfig model_cfg = cfg.model;
    model_cfg.seed = seed;
    TrainConfig pre_cfg = cfg.pretrain;
    pre_cfg.seed = seed;
    TrainConfig ft_cfg = cfg.finetune;
    ft_cfg.seed = seed;

    const fs::path pre_train = data_dir / "pretrain_train.jsonl", pre_valid = data_dir / "pretrain_valid.jsonl";
    const fs::path ft_train = data_dir / "finetune_train.jsonl", ft_valid = data_dir / "finetune_valid.jsonl";
    json data_key = to_json(cfg)["data"];
    data_key["synthetic"] = to_json(cfg)["synthetic"];
    data_key["seed"] = seed;
    for (const char* k : {"pretrain_train", "pretrain_valid", "finetune_train", "finetune_valid"}) {
      const std::string p = data_key[k].get<std::string>();
      data_key[std::string(k) + "_hash"] = p.empty() ? "" : file_key(p);
    }
    run_stage(markers / "data.done", data_key.dump(), {pre_train, pre_valid, ft_train, ft_valid}, resume, [&] {
      std::vector<RawExample> ptr, pva, ftr, fva;
      if (cfg.data.pretrain_train.empty()) {
        std::tie(ptr, pva) = split_validation(
            make_synthetic_family(cfg.synthetic.pretrain_family, cfg.synthetic.pretrain_size, seed * 1000003 + 1));
      } else {
        std::tie(ptr, pva) = load_split(cfg.data.pretrain_train, cfg.data.pretrain_valid);
      }
      if (cfg.data.finetune_train.empty()) {
        auto all = make_synthetic_family(cfg.synthetic.finetune_family,
                                         cfg.synthetic.finetune_size + cfg.synthetic.valid_size, seed * 1000003 + 2);
        const auto cut = all.begin() + static_cast<std::ptrdiff_t>(cfg.synthetic.finetune_size);
        ftr.assign(all.begin(), cut);
        fva.assign(cut, all.end());
      } else {
        std::tie(ftr, fva) = load_split(cfg.data.finetune_train, cfg.data.finetune_valid);
      }
      fs::create_directories(data_dir);
      write_jsonl(pre_train, ptr);
      write_jsonl(pre_valid, pva);
      write_jsonl(ft_train, ftr);
      write_jsonl(ft_valid, fva);
    });
    const auto pretrain_train = load_jsonl(pre_train), pretrain_valid = load_jsonl(pre_valid);
    const auto finetune_train = load_jsonl(ft_train), finetune_valid = load_jsonl(ft_valid);
    const std::string data_hashes = file_key(pre_train) + file_key(pre_valid) + file_key(ft_train) + file_key(ft_valid);

    const fs::path vocab_path = dir / "vocab.txt";
    json vocab_key = {{"data", data_hashes},
                      {"vocab", cfg.data.vocab.empty() ? "" : file_key(cfg.data.vocab)},
                      {"min_freq", cfg.min_freq},
                      {"num_task_tokens", cfg.num_task_tokens}};
    run_stage(markers / "vocab.done", vocab_key.dump(), {vocab_path}, resume, [&] {
      if (!cfg.data.vocab.empty()) {
        Vocabulary::load(cfg.data.vocab).save(vocab_path);
      } else {
        build_vocab(text_corpus(pretrain_train, finetune_train), cfg.min_freq, std::nullopt, cfg.num_task_tokens)
            .save(vocab_path);
      }
    });
    const auto vocab = Vocabulary::load(vocab_path);
    const ModelConfig resolved = resolve_model(model_cfg, vocab);

    const fs::path pre_ckpt = dir / "pretrain" / "final.ckpt";
    json pre_key = {{"data", data_hashes},
                    {"vocab", file_key(vocab_path)},
                    {"model", model_to_json(resolved)},
                    {"train", train_to_json(pre_cfg)}};
    run_stage(markers / "pretrain.done", pre_key.dump(), {pre_ckpt}, resume, [&] {
      std::clog << "seed " << seed << ": pre-training (" << pre_cfg.steps << " steps)\n";
      TransformerLM<float> model(resolved);
      model.set_vocab_hash(vocab.hash());
      run_training(model, vocab, pretrain_train, pretrain_valid, pre_cfg, dir / "pretrain");
    });

    for (const auto& arm : arms) {
      const bool from_pretrained = arm == kArmPretrained;
      const fs::path arm_dir = dir / arm;
      const fs::path ckpt = arm_dir / "final.ckpt";
      json ft_key = {{"data", data_hashes},
                     {"vocab", file_key(vocab_path)},
                     {"model", model_to_json(resolved)},
                     {"init", from_pretrained ? file_key(pre_ckpt) : ""},
                     {"train", train_to_json(ft_cfg)}};
      run_stage(markers / (arm + ".done"), ft_key.dump(), {ckpt}, resume, [&] {
        std::clog << "seed " << seed << ": fine-tuning " << arm << " (" << ft_cfg.steps << " steps)\n";
        TransformerLM<float> model = from_pretrained ? load_checkpoint(pre_ckpt) : TransformerLM<float>(resolved);
        model.set_vocab_hash(vocab.hash());
        run_training(model, vocab, finetune_train, finetune_valid, ft_cfg, arm_dir);
      });

      std::optional<TransformerLM<float>> model;
      for (const auto& m : methods) {
        const fs::path preds = arm_dir / (m.name + ".predictions.jsonl");
        json gen_key = {{"checkpoint", file_key(ckpt)},
                        {"vocab", file_key(vocab_path)},
                        {"inputs", file_key(ft_valid)},
                        {"generation", generation_to_json(m.gen)}};
        run_stage(markers / (arm + "." + m.name + ".done"), gen_key.dump(), {preds}, resume, [&] {
          if (!model) model.emplace(load_checkpoint(ckpt));
          write_predictions(*model, vocab, finetune_valid, m.gen, preds);
        });
        const auto stats = read_predictions(preds, finetune_valid);
        ExperimentRow row;
        row.arm = arm;
        row.method = m.name;
        row.seed = seed;
        row.scores = corpus_rouge(stats.pairs, cfg.rouge_tokenization, &vocab);
        row.mean_length = stats.mean_length;
        result.rows.push_back(row);
      }
    }
  }

  auto find_row = [&](std::string_view arm, std::string_view method, std::uint64_t seed) -> const ExperimentRow& {
    for (const auto& r : result.rows) {
      if (r.arm == arm && r.method == method && r.seed == seed) return r;
    }
    throw Error("missing experiment row");
  };

  // Pre-trained arm against scratch on ROUGE-L under beam search.
  std::size_t wins = 0;
  double margin = 0;
  for (auto seed : cfg.seeds) {
    const double d = find_row(kArmPretrained, "beam", seed).scores.rougeL.f1 -
                     find_row(kArmScratch, "beam", seed).scores.rougeL.f1;
    wins += d > 0 ? 1 : 0;
    margin += d;
  }
  const auto n_seeds = static_cast<double>(cfg.seeds.size());
  margin /= n_seeds;
  const auto needed = static_cast<std::size_t>(std::ceil(cfg.min_win_fraction * n_seeds - 1e-9));
  result.checks.push_back({"transfer", wins >= needed && margin > 0,
                           "dsgpt-finetuned beats transformer-scratch on beam ROUGE-L in " + std::to_string(wins) +
                               "/" + std::to_string(cfg.seeds.size()) + " seeds (need " + std::to_string(needed) +
                               "), mean margin " + fixed2(margin)});

  double len_plain = 0, len_ctrl = 0;
  for (const auto& r : result.rows) {
    if (r.method == "greedy") len_plain += r.mean_length;
    if (r.method == "greedy+lambda") len_ctrl += r.mean_length;
  }
  const double pooled = n_seeds * static_cast<double>(arms.size());
  len_plain /= pooled;
  len_ctrl /= pooled;
  result.checks.push_back({"length_control", len_ctrl < len_plain,
                           "mean greedy length " + fixed2(len_plain) + " at lambda 1, " + fixed2(len_ctrl) +
                               " at lambda " + fixed2(cfg.length_control_lambda)});
  result.passed = true;
  for (const auto& c : result.checks) result.passed = result.passed && c.passed;

  // Per-seed rows, then means over seeds for each arm and method.
  std::vector<std::string> method_names;
  for (const auto& m : methods) method_names.push_back(m.name);
  std::ostringstream text;
  auto pad = [](std::string s, std::size_t w, bool left) {
    if (s.size() >= w) return s;
    return left ? s + std::string(w - s.size(), ' ') : std::string(w - s.size(), ' ') + s;
  };
  text << pad("arm", 21, true) << pad("method", 15, true) << pad("seed", 6, false) << pad("ROUGE-1", 9, false)
       << pad("ROUGE-2", 9, false) << pad("ROUGE-L", 9, false) << pad("length", 8, false) << '\n';
  auto emit = [&](const std::string& arm, const std::string& method, const std::string& seed, double r1, double r2,
                  double rl, double len) {
    text << pad(arm, 21, true) << pad(method, 15, true) << pad(seed, 6, false) << pad(fixed2(r1), 9, false)
         << pad(fixed2(r2), 9, false) << pad(fixed2(rl), 9, false) << pad(fixed2(len), 8, false) << '\n';
  };
  json rows = json::array(), means = json::array();
  for (const auto& r : result.rows) {
    emit(r.arm, r.method, std::to_string(r.seed), r.scores.rouge1.f1, r.scores.rouge2.f1, r.scores.rougeL.f1,
         r.mean_length);
    rows.push_back(scores_row_json(r));
  }
  for (const auto& arm : arms) {
    for (const auto& method : method_names) {
      double r1 = 0, r2 = 0, rl = 0, len = 0;
      for (auto seed : cfg.seeds) {
        const auto& r = find_row(arm, method, seed);
        r1 += r.scores.rouge1.f1;
        r2 += r.scores.rouge2.f1;
        rl += r.scores.rougeL.f1;
        len += r.mean_length;
      }
      emit(arm, method, "mean", r1 / n_seeds, r2 / n_seeds, rl / n_seeds, len / n_seeds);
      means.push_back({{"arm", arm},
                       {"method", method},
                       {"rouge1_f1", r1 / n_seeds},
                       {"rouge2_f1", r2 / n_seeds},
                       {"rougeL_f1", rl / n_seeds},
                       {"mean_length", len / n_seeds}});
    }
  }
  text << "\nF1 scores (" << (cfg.rouge_tokenization == RougeTokenization::char_level ? "character" : "token")
       << " level); greedy+lambda uses end-token factor " << fixed2(cfg.length_control_lambda) << "\n";
  json checks = json::array();
  for (const auto& c : result.checks) {
    text << (c.passed ? "[PASS] " : "[FAIL] ") << c.name << ": " << c.detail << '\n';
    checks.push_back({{"name", c.name}, {"passed", c.passed}, {"detail", c.detail}});
  }
  result.table_text = text.str();
  result.table_json = {{"rows", rows},
                       {"means", means},
                       {"checks", checks},
                       {"passed", result.passed},
                       {"length_control_lambda", cfg.length_control_lambda}};
  write_text(out / "results.txt", result.table_text);
  write_text(out / "results.json", result.table_json.dump(2) + '\n');
  return result;
}

}  // namespace dsgpt
