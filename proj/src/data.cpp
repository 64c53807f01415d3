#include "dsgpt/data.hpp"

#include <json.hpp>

#include <algorithm>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

namespace dsgpt {

using json = nlohmann::json;

std::string_view to_string(LossMode mode) {
  return mode == LossMode::full_sequence ? "full_sequence" : "target_only";
}

LossMode parse_loss_mode(std::string_view text) {
  if (text == "full_sequence") return LossMode::full_sequence;
  if (text == "target_only") return LossMode::target_only;
  throw DataError("unknown loss mode '" + std::string(text) + "'");
}

std::vector<RawExample> parse_jsonl(std::string_view text, bool require_target) {
  std::vector<RawExample> out;
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start <= text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(start, end - start);
    start = end + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.find_first_not_of(" \t") == std::string_view::npos) continue;

    const std::string where = "line " + std::to_string(line_no);
    json obj;
    try {
      obj = json::parse(line);
    } catch (const json::parse_error& e) {
      throw DataError("malformed JSON on " + where + ": " + e.what());
    }
    if (!obj.is_object()) throw DataError("expected a JSON object on " + where);

    RawExample ex;
    ex.line = line_no;
    if (!obj.contains("source") || !obj["source"].is_string()) {
      throw DataError("missing string field 'source' on " + where);
    }
    ex.source = obj["source"].get<std::string>();
    if (require_target && ex.source.empty()) throw DataError("empty 'source' on " + where);
    if (obj.contains("target")) {
      if (!obj["target"].is_string()) throw DataError("field 'target' must be a string on " + where);
      ex.target = obj["target"].get<std::string>();
    } else if (require_target) {
      throw DataError("missing string field 'target' on " + where);
    }
    if (obj.contains("task")) {
      const auto& t = obj["task"];
      if (!t.is_number_integer() || t.get<long long>() < 0) {
        throw DataError("field 'task' must be a non-negative integer on " + where);
      }
      ex.task = t.get<std::size_t>();
    }
    out.push_back(std::move(ex));
    if (end == text.size()) break;
  }
  return out;
}

std::vector<RawExample> load_jsonl(const std::filesystem::path& path, bool require_target) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read dataset " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return parse_jsonl(ss.str(), require_target);
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

void write_jsonl(const std::filesystem::path& path, const std::vector<RawExample>& examples) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write dataset " + path.string());
  for (const auto& ex : examples) {
    json obj = {{"source", ex.source}, {"target", ex.target}, {"task", ex.task}};
    out << obj.dump() << '\n';
  }
  if (!out) throw DataError("failed writing dataset " + path.string());
}

SequenceExample format_example(const RawExample& ex, const Vocabulary& vocab, std::size_t max_len, LossMode mode) {
  auto source = encode(ex.source, vocab);
  const auto target = encode(ex.target, vocab);
  const std::size_t fixed = target.size() + 4;
  if (fixed > max_len) {
    throw DataError("target of " + std::to_string(target.size()) + " tokens does not fit max_len " +
                    std::to_string(max_len) + (ex.line ? " (line " + std::to_string(ex.line) + ")" : ""));
  }
  if (source.size() + fixed > max_len) source.resize(max_len - fixed);

  SequenceExample out;
  out.ids.reserve(source.size() + fixed);
  out.ids.push_back(special::kBos);
  out.ids.push_back(vocab.task_id(ex.task));
  out.ids.insert(out.ids.end(), source.begin(), source.end());
  out.split_point = out.ids.size();
  out.ids.push_back(special::kSep);
  out.ids.insert(out.ids.end(), target.begin(), target.end());
  out.ids.push_back(special::kEos);

  out.loss_mask.assign(out.ids.size(), 0);
  const std::size_t first = mode == LossMode::full_sequence ? 1 : out.split_point + 1;
  for (std::size_t i = first; i < out.ids.size(); ++i) out.loss_mask[i] = 1;
  return out;
}

FormattedDataset format_dataset(const std::vector<RawExample>& examples, const Vocabulary& vocab,
                                std::size_t max_len, LossMode mode) {
  FormattedDataset out;
  out.vocab_hash = vocab.hash();
  out.examples.reserve(examples.size());
  for (const auto& ex : examples) out.examples.push_back(format_example(ex, vocab, max_len, mode));
  return out;
}

void pad_to(SequenceExample& ex, std::size_t length) {
  if (ex.ids.size() >= length) return;
  ex.ids.resize(length, special::kPad);
  ex.loss_mask.resize(length, 0);
}

std::pair<std::vector<RawExample>, std::vector<RawExample>> split_validation(std::vector<RawExample> examples) {
  const std::size_t n = examples.size();
  const std::size_t n_valid = n < 2 ? 0 : std::max<std::size_t>(1, n / 20);
  std::vector<RawExample> valid(examples.end() - static_cast<std::ptrdiff_t>(n_valid), examples.end());
  examples.resize(n - n_valid);
  return {std::move(examples), std::move(valid)};
}

std::string_view to_string(Family family) {
  switch (family) {
    case Family::A_compress: return "A_compress";
    case Family::B_titlelike: return "B_titlelike";
    case Family::C_reviewlike: return "C_reviewlike";
  }
  return "?";
}

Family parse_family(std::string_view text) {
  if (text == "A_compress" || text == "A") return Family::A_compress;
  if (text == "B_titlelike" || text == "B") return Family::B_titlelike;
  if (text == "C_reviewlike" || text == "C") return Family::C_reviewlike;
  throw DataError("unknown synthetic family '" + std::string(text) + "'");
}

std::size_t family_task(Family family) {
  switch (family) {
    case Family::A_compress: return 0;
    case Family::B_titlelike: return 1;
    case Family::C_reviewlike: return 2;
  }
  return 0;
}

std::string compress_target(std::string_view source, const SyntheticAlphabet& alphabet) {
  std::string out;
  for (char c : source) {
    if (alphabet.noise.find(c) != std::string::npos) continue;
    if (out.find(c) == std::string::npos) out += c;
  }
  return out;
}

namespace {

using Rng = std::mt19937_64;

std::size_t uniform(Rng& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

bool coin(Rng& rng, double p) { return std::bernoulli_distribution(p)(rng); }

char pick(Rng& rng, std::string_view from) { return from[uniform(rng, 0, from.size() - 1)]; }

std::string distinct(Rng& rng, std::string pool, std::size_t n) {
  std::shuffle(pool.begin(), pool.end(), rng);
  return pool.substr(0, n);
}

RawExample make_compress(Rng& rng, const SyntheticAlphabet& a) {
  const std::string letters = distinct(rng, a.lower + a.upper, uniform(rng, 4, 8));
  std::string source;
  for (char c : letters) {
    if (!source.empty() && coin(rng, 0.2)) {
      // Repeat of an earlier letter, away from its first run.
      const std::string earlier = compress_target(source, a);
      source += earlier[uniform(rng, 0, earlier.size() - 1)];
    }
    source += c;
    if (coin(rng, 0.35)) source += c;
    if (coin(rng, 0.3)) {
      const std::size_t n = uniform(rng, 1, 2);
      for (std::size_t i = 0; i < n; ++i) source += pick(rng, a.noise);
    }
  }
  return {source, compress_target(source, a), family_task(Family::A_compress), 0};
}

RawExample make_title(Rng& rng, const SyntheticAlphabet& a) {
  const char brand = pick(rng, a.upper);
  const std::string attrs = distinct(rng, a.lower, uniform(rng, 3, 5));
  std::string body = attrs;
  const std::size_t fill = uniform(rng, 2, 6);
  for (std::size_t i = 0; i < fill; ++i) body.insert(uniform(rng, 0, body.size()), 1, pick(rng, a.noise));
  std::string source = body;
  source.insert(uniform(rng, 0, source.size()), 1, brand);

  auto rank = [&](char c) { return a.attribute_priority.find(c); };
  std::string top = attrs;
  std::sort(top.begin(), top.end(), [&](char x, char y) { return rank(x) < rank(y); });
  top.resize(2);
  std::string target(1, brand);
  for (char c : source) {
    if (top.find(c) != std::string::npos) target += c;
  }
  return {source, target, family_task(Family::B_titlelike), 0};
}

RawExample make_review(Rng& rng, const SyntheticAlphabet& a) {
  const char aspect = pick(rng, a.upper);
  const char sentiment = pick(rng, a.sentiment);
  std::string distractors;
  for (char c : a.lower) {
    if (a.sentiment.find(c) == std::string::npos) distractors += c;
  }
  std::string source{aspect, sentiment};
  const std::size_t fill = uniform(rng, 3, 8);
  for (std::size_t i = 0; i < fill; ++i) source += coin(rng, 0.5) ? pick(rng, a.noise) : pick(rng, distractors);
  std::shuffle(source.begin(), source.end(), rng);
  return {source, std::string{aspect, sentiment}, family_task(Family::C_reviewlike), 0};
}

}  // namespace

std::vector<RawExample> make_synthetic_family(Family family, std::size_t size, std::uint64_t seed,
                                              const SyntheticAlphabet& alphabet) {
  if (size == 0) throw DataError("synthetic dataset size must be >= 1");
  Rng rng(seed ^ (0x9E3779B97F4A7C15ULL * (static_cast<std::uint64_t>(family) + 1)));
  std::vector<RawExample> out;
  std::set<std::string> seen;
  std::size_t attempts = 0;
  while (out.size() < size) {
    if (++attempts > 1000 * size) throw DataError("could not draw enough distinct synthetic sources");
    RawExample ex;
    switch (family) {
      case Family::A_compress: ex = make_compress(rng, alphabet); break;
      case Family::B_titlelike: ex = make_title(rng, alphabet); break;
      case Family::C_reviewlike: ex = make_review(rng, alphabet); break;
    }
    if (seen.insert(ex.source).second) out.push_back(std::move(ex));
  }
  return out;
}

}  // namespace dsgpt
