#include "dsgpt/trainer.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <deque>
#include <filesystem>
#include <fstream>

namespace dsgpt {

namespace {

constexpr double kBeta1 = 0.9;
constexpr double kBeta2 = 0.999;
constexpr double kAdamEps = 1e-8;
// Examples are sorted by length inside windows of this many batches.
constexpr std::size_t kBucketWindow = 4;

class BatchSchedule {
 public:
  BatchSchedule(const FormattedDataset& data, std::size_t batch_size, std::uint64_t seed)
      : data_(data), batch_size_(batch_size), rng_(seed) {}

  /// Next batch of example indices; sets epoch_done when it is the last of an epoch.
  std::vector<std::size_t> next(bool& epoch_done) {
    if (queue_.empty()) refill();
    auto batch = std::move(queue_.front());
    queue_.pop_front();
    epoch_done = queue_.empty();
    return batch;
  }

 private:
  void refill() {
    std::vector<std::size_t> order(data_.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), rng_);
    const std::size_t window = batch_size_ * kBucketWindow;
    for (std::size_t start = 0; start < order.size(); start += window) {
      auto first = order.begin() + static_cast<std::ptrdiff_t>(start);
      auto last = order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), start + window));
      std::stable_sort(first, last, [&](std::size_t a, std::size_t b) {
        return data_.examples[a].ids.size() < data_.examples[b].ids.size();
      });
    }
    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t start = 0; start < order.size(); start += batch_size_) {
      batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                           order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), start + batch_size_)));
    }
    std::shuffle(batches.begin(), batches.end(), rng_);
    queue_.assign(std::make_move_iterator(batches.begin()), std::make_move_iterator(batches.end()));
  }

  const FormattedDataset& data_;
  std::size_t batch_size_;
  std::mt19937_64 rng_;
  std::deque<std::vector<std::size_t>> queue_;
};

struct AdamState {
  MatrixX<float> m;
  MatrixX<float> v;
};

std::filesystem::path summary_path_for(const std::string& log_path) {
  return std::filesystem::path(log_path).replace_extension(".summary.json");
}

}  // namespace

void TrainConfig::validate() const {
  std::vector<std::string> problems;
  if (batch_size < 1) problems.push_back("batch_size must be >= 1");
  if (steps < 0) problems.push_back("steps must be >= 0");
  if (!(learning_rate >= 0.0)) problems.push_back("learning_rate must be >= 0");
  if (warmup_steps < 0) problems.push_back("warmup_steps must be >= 0");
  if (!(grad_clip_norm > 0.0)) problems.push_back("grad_clip_norm must be > 0");
  if (checkpoint_every < 0) problems.push_back("checkpoint_every must be >= 0");
  if (problems.empty()) return;
  std::string msg = "invalid train config:";
  for (const auto& p : problems) msg += " " + p + ";";
  throw ConfigError(msg);
}

void apply_loss_mode(SequenceExample& ex, LossMode mode) {
  const std::size_t first = mode == LossMode::full_sequence ? 1 : ex.split_point + 1;
  for (std::size_t i = 0; i < ex.ids.size(); ++i) {
    ex.loss_mask[i] = (i >= first && ex.ids[i] != special::kPad) ? 1 : 0;
  }
}

double clip_grad_norm(TransformerLM<float>& model, double max_norm) {
  double sq = 0;
  for (auto& [name, t] : model.parameters()) {
    if (t->has_grad()) sq += t->grad().cast<double>().squaredNorm();
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const auto factor = static_cast<float>(max_norm / norm);
    for (auto& [name, t] : model.parameters()) {
      if (t->has_grad()) t->grad() *= factor;
    }
  }
  return norm;
}

double learning_rate_at(const TrainConfig& cfg, int step) {
  if (cfg.warmup_steps <= 0 || step >= cfg.warmup_steps) return cfg.learning_rate;
  return cfg.learning_rate * static_cast<double>(step + 1) / static_cast<double>(cfg.warmup_steps);
}

TrainReport train(TransformerLM<float>& model, const FormattedDataset& data, const TrainConfig& cfg,
                  const FormattedDataset* heldout) {
  cfg.validate();
  if (data.empty()) throw DataError("training data is empty");
  const auto start = std::chrono::steady_clock::now();

  if (!cfg.init_from.empty()) model = load_checkpoint(cfg.init_from);
  if (data.vocab_hash != model.vocab_hash()) {
    throw VocabMismatchError("training data vocabulary does not match the model's vocabulary");
  }
  const auto max_len = static_cast<std::size_t>(model.config().max_seq_len);

  FormattedDataset train_data = data;
  for (auto& ex : train_data.examples) {
    if (ex.ids.size() > max_len) {
      throw DataError("example of length " + std::to_string(ex.ids.size()) + " exceeds max_seq_len " +
                      std::to_string(max_len));
    }
    apply_loss_mode(ex, cfg.loss_mode);
  }
  std::optional<FormattedDataset> eval_data;
  if (heldout && !heldout->empty()) {
    eval_data = *heldout;
    for (auto& ex : eval_data->examples) apply_loss_mode(ex, cfg.loss_mode);
  }

  std::ofstream log;
  if (!cfg.log_path.empty()) {
    log.open(cfg.log_path, std::ios::trunc);
    if (!log) throw Error("cannot write training log " + cfg.log_path);
  }
  if (!cfg.checkpoint_dir.empty()) std::filesystem::create_directories(cfg.checkpoint_dir);

  model.set_requires_grad(true);
  auto params = model.parameters();
  std::vector<AdamState> adam;
  for (auto& [name, t] : params) {
    adam.push_back({MatrixX<float>::Zero(t->value().rows(), t->value().cols()),
                    MatrixX<float>::Zero(t->value().rows(), t->value().cols())});
  }

  BatchSchedule schedule(train_data, static_cast<std::size_t>(cfg.batch_size), cfg.seed);
  std::mt19937_64 dropout_rng(cfg.seed ^ 0xD1B54A32D192ED03ULL);
  TrainReport report;
  std::size_t epoch = 0;

  for (int step = 0; step < cfg.steps; ++step) {
    bool epoch_done = false;
    const auto indices = schedule.next(epoch_done);
    std::vector<SequenceExample> batch;
    std::size_t longest = 0;
    for (auto i : indices) longest = std::max(longest, train_data.examples[i].ids.size());
    for (auto i : indices) {
      batch.push_back(train_data.examples[i]);
      pad_to(batch.back(), longest);
    }

    model.zero_grad();
    double loss = 0;
    {
      Tape<float> tape;
      auto l = batch_loss<float>(model, tape, batch, ForwardMode::train, &dropout_rng);
      loss = static_cast<double>(l.item());
      tape.backward(l);
    }
    const double grad_norm = clip_grad_norm(model, cfg.grad_clip_norm);
    const double lr = learning_rate_at(cfg, step);

    const double t = static_cast<double>(step + 1);
    const double bc1 = 1.0 - std::pow(kBeta1, t);
    const double bc2 = 1.0 - std::pow(kBeta2, t);
    const auto step_size = static_cast<float>(lr / bc1);
    const auto inv_bc2 = static_cast<float>(1.0 / bc2);
    for (std::size_t p = 0; p < params.size(); ++p) {
      auto& value = params[p].second->value();
      const auto& g = params[p].second->grad();
      auto& st = adam[p];
      st.m = static_cast<float>(kBeta1) * st.m + static_cast<float>(1.0 - kBeta1) * g;
      st.v = static_cast<float>(kBeta2) * st.v + static_cast<float>(1.0 - kBeta2) * g.cwiseProduct(g);
      value.array() -= step_size * st.m.array() / ((st.v.array() * inv_bc2).sqrt() + static_cast<float>(kAdamEps));
    }
    model.set_step(model.step() + 1);

    report.losses.push_back(loss);
    report.learning_rates.push_back(lr);
    report.grad_norms.push_back(grad_norm);
    if (log) {
      log << nlohmann::json{{"step", step + 1}, {"loss", loss}, {"lr", lr}, {"grad_norm", grad_norm}}.dump()
          << '\n';
    }

    if (epoch_done) {
      ++epoch;
      if (cfg.eval_each_epoch) {
        EpochRecord rec{epoch, static_cast<std::size_t>(step + 1), perplexity(model, train_data), std::nullopt};
        if (eval_data) rec.heldout_perplexity = perplexity(model, *eval_data);
        report.epochs.push_back(rec);
      }
    }
    if (!cfg.checkpoint_dir.empty() && cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0) {
      save_checkpoint(model, model.step(),
                      std::filesystem::path(cfg.checkpoint_dir) / ("step_" + std::to_string(model.step()) + ".ckpt"));
    }
  }
  model.set_requires_grad(false);

  if (!cfg.checkpoint_dir.empty()) {
    const auto path = std::filesystem::path(cfg.checkpoint_dir) / "final.ckpt";
    save_checkpoint(model, model.step(), path);
    report.final_checkpoint = path.string();
  }
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  if (log) {
    nlohmann::json epochs = nlohmann::json::array();
    for (const auto& e : report.epochs) {
      nlohmann::json rec = {{"epoch", e.epoch}, {"step", e.step}, {"train_perplexity", e.train_perplexity}};
      if (e.heldout_perplexity) rec["heldout_perplexity"] = *e.heldout_perplexity;
      epochs.push_back(rec);
    }
    nlohmann::json summary = {{"steps", cfg.steps},
                              {"final_loss", report.losses.empty() ? 0.0 : report.losses.back()},
                              {"epochs", epochs},
                              {"final_checkpoint", report.final_checkpoint},
                              {"wall_seconds", report.wall_seconds}};
    std::ofstream(summary_path_for(cfg.log_path), std::ios::trunc) << summary.dump(2) << '\n';
  }
  return report;
}

}  // namespace dsgpt
