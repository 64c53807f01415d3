#pragma once

#include "dsgpt/decoder.hpp"
#include "dsgpt/rouge.hpp"
#include "dsgpt/trainer.hpp"

#include <json.hpp>

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace dsgpt {

struct DataPaths {
  /// Existing vocabulary; built from the training data when empty.
  std::string vocab;
  std::string pretrain_train;
  /// Held-out split; the last 5% of the train file when empty.
  std::string pretrain_valid;
  std::string finetune_train;
  std::string finetune_valid;

  bool operator==(const DataPaths&) const = default;
};

/// Synthetic datasets `experiment` draws per seed when no paths are given.
struct SyntheticPlan {
  Family pretrain_family = Family::A_compress;
  std::size_t pretrain_size = 2000;
  Family finetune_family = Family::B_titlelike;
  std::size_t finetune_size = 200;
  std::size_t valid_size = 100;

  bool operator==(const SyntheticPlan&) const = default;
};

struct ExperimentConfig {
  /// vocab_size 0 means "size of the vocabulary in use".
  ModelConfig model = model_preset("tiny", 0);
  TrainConfig pretrain = default_pretrain();
  TrainConfig finetune = default_finetune();
  GenerationConfig generation = default_generation();
  DataPaths data;
  SyntheticPlan synthetic;
  std::size_t min_freq = 1;
  std::size_t num_task_tokens = kDefaultTaskTokens;
  RougeTokenization rouge_tokenization = RougeTokenization::char_level;
  std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4};
  /// End-token factor of the automatic length-control arm.
  double length_control_lambda = 3.0;
  /// Share of seeds where the pre-trained arm must win on ROUGE-L.
  double min_win_fraction = 0.8;
  std::string out_dir = "runs/experiment";

  static TrainConfig default_pretrain();
  static TrainConfig default_finetune();
  static GenerationConfig default_generation();

  bool operator==(const ExperimentConfig&) const = default;
};

nlohmann::json to_json(const ExperimentConfig& cfg);
/// Missing keys keep their defaults; unknown keys are rejected.
ExperimentConfig experiment_config_from_json(const nlohmann::json& j);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);
/// Throws ConfigError listing every invalid field.
void validate(const ExperimentConfig& cfg);
void save_experiment_config(const ExperimentConfig& cfg, const std::filesystem::path& path);

nlohmann::json to_json(const RougeScores& s);

/// Exclusive claim on an output directory for the lifetime of the object.
class DirectoryLock {
 public:
  explicit DirectoryLock(const std::filesystem::path& dir);
  ~DirectoryLock();
  DirectoryLock(const DirectoryLock&) = delete;
  DirectoryLock& operator=(const DirectoryLock&) = delete;

 private:
  std::filesystem::path path_;
};

struct TrainOutcome {
  TrainReport report;
  std::string checkpoint;
  std::string vocab_path;
};

/// Pre-training on data.pretrain_train; artifacts land in out_dir.
TrainOutcome cmd_pretrain(const ExperimentConfig& cfg);

/// Fine-tuning on data.finetune_train, from finetune.init_from when set and
/// from a fresh model otherwise. Starting from a checkpoint needs data.vocab.
TrainOutcome cmd_finetune(const ExperimentConfig& cfg);
/// Same with finetune.init_from replaced; an empty path trains from scratch.
TrainOutcome cmd_finetune(const ExperimentConfig& cfg, const std::string& init_from);

/// Reads JSONL {source, task}; writes JSONL {source, output, log_prob, stop_reason, length}.
void cmd_generate(const std::filesystem::path& checkpoint, const std::filesystem::path& vocab_path,
                  const std::filesystem::path& input, const std::filesystem::path& output,
                  const GenerationConfig& gen);

/// Pairs come from {candidate, reference} lines, or from a candidates file
/// (candidate or output field) zipped line by line with a references file
/// (reference or target field).
RougeScores cmd_evaluate(const std::filesystem::path& candidates, const std::filesystem::path& references,
                         RougeTokenization mode, const Vocabulary* vocab = nullptr);

struct ExperimentRow {
  std::string arm;
  std::string method;
  std::uint64_t seed = 0;
  RougeScores scores;
  double mean_length = 0;
};

struct ExperimentCheck {
  std::string name;
  bool passed = false;
  std::string detail;
};

struct ExperimentResult {
  std::vector<ExperimentRow> rows;
  std::vector<ExperimentCheck> checks;
  bool passed = false;
  std::string table_text;
  nlohmann::json table_json;
};

inline constexpr std::string_view kArmScratch = "transformer-scratch";
inline constexpr std::string_view kArmPretrained = "dsgpt-finetuned";

/// Pre-train → {fine-tune from pre-trained, fine-tune from scratch} →
/// {beam, greedy, greedy+λ} → ROUGE per seed. Writes results.json and
/// results.txt under out_dir. With resume, stages whose input hash matches
/// a completed marker are skipped.
ExperimentResult cmd_experiment(const ExperimentConfig& cfg, bool resume = false);

}  // namespace dsgpt
