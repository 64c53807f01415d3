#include "dsgpt/tokenizer.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

namespace dsgpt {

namespace {

std::size_t utf8_length(unsigned char lead) {
  if (lead < 0x80) return 1;
  if ((lead >> 5) == 0x6) return 2;
  if ((lead >> 4) == 0xE) return 3;
  if ((lead >> 3) == 0x1E) return 4;
  return 0;
}

std::vector<std::string> special_names(std::size_t num_task_tokens) {
  std::vector<std::string> names = {"<PAD>", "<UNK>", "<BOS>", "<SEP>", "<EOS>"};
  for (std::size_t k = 0; k < num_task_tokens; ++k) names.push_back("<TASK_" + std::to_string(k) + ">");
  return names;
}

std::string escape(std::string_view token) {
  std::string out;
  for (char c : token) {
    switch (c) {
      case '\\': out += "\\\\"; break;
      case '\n': out += "\\n"; break;
      case '\r': out += "\\r"; break;
      case '\t': out += "\\t"; break;
      default: out += c;
    }
  }
  return out;
}

std::string unescape(std::string_view line, std::size_t line_no) {
  std::string out;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (line[i] != '\\') {
      out += line[i];
      continue;
    }
    if (++i == line.size()) throw VocabError("dangling escape on vocabulary line " + std::to_string(line_no));
    switch (line[i]) {
      case '\\': out += '\\'; break;
      case 'n': out += '\n'; break;
      case 'r': out += '\r'; break;
      case 't': out += '\t'; break;
      default: throw VocabError("unknown escape on vocabulary line " + std::to_string(line_no));
    }
  }
  return out;
}

}  // namespace

std::vector<std::string_view> split_utf8(std::string_view text) {
  std::vector<std::string_view> out;
  out.reserve(text.size());
  std::size_t i = 0;
  while (i < text.size()) {
    std::size_t len = utf8_length(static_cast<unsigned char>(text[i]));
    if (len == 0 || i + len > text.size()) {
      len = 1;
    } else {
      for (std::size_t j = 1; j < len; ++j) {
        if ((static_cast<unsigned char>(text[i + j]) & 0xC0) != 0x80) {
          len = 1;
          break;
        }
      }
    }
    out.push_back(text.substr(i, len));
    i += len;
  }
  return out;
}

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t seed) {
  std::uint64_t h = seed;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

Vocabulary::Vocabulary(std::size_t num_task_tokens) : Vocabulary(num_task_tokens, {}) {}

Vocabulary::Vocabulary(std::size_t num_task_tokens, const std::vector<std::string>& content)
    : num_task_tokens_(num_task_tokens), id_to_token_(special_names(num_task_tokens)) {
  for (const auto& tok : content) {
    if (split_utf8(tok).size() != 1) throw VocabError("content token must be one character: '" + tok + "'");
    id_to_token_.push_back(tok);
  }
  for (std::size_t i = 0; i < id_to_token_.size(); ++i) {
    if (!token_to_id_.emplace(id_to_token_[i], static_cast<TokenId>(i)).second) {
      throw VocabError("duplicate vocabulary token '" + id_to_token_[i] + "'");
    }
  }
}

TokenId Vocabulary::task_id(std::size_t task) const {
  if (task >= num_task_tokens_) {
    throw VocabError("task " + std::to_string(task) + " outside the " + std::to_string(num_task_tokens_) +
                     " reserved task tokens");
  }
  return special::kFirstTaskId + static_cast<TokenId>(task);
}

std::optional<TokenId> Vocabulary::find(std::string_view token) const {
  auto it = token_to_id_.find(std::string(token));
  if (it == token_to_id_.end()) return std::nullopt;
  return it->second;
}

const std::string& Vocabulary::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= id_to_token_.size()) {
    throw VocabError("token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(size()));
  }
  return id_to_token_[static_cast<std::size_t>(id)];
}

std::string Vocabulary::serialize() const {
  std::string out;
  for (const auto& tok : id_to_token_) {
    out += escape(tok);
    out += '\n';
  }
  return out;
}

Vocabulary Vocabulary::deserialize(std::string_view text) {
  std::vector<std::string> lines;
  std::size_t start = 0;
  while (start < text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string_view::npos) throw VocabError("vocabulary text must end with a newline");
    lines.push_back(unescape(text.substr(start, end - start), lines.size() + 1));
    start = end + 1;
  }
  const auto fixed = special_names(0);
  if (lines.size() < fixed.size() || !std::equal(fixed.begin(), fixed.end(), lines.begin())) {
    throw VocabError("vocabulary does not start with the reserved special tokens");
  }
  std::size_t tasks = 0;
  while (fixed.size() + tasks < lines.size() &&
         lines[fixed.size() + tasks] == "<TASK_" + std::to_string(tasks) + ">") {
    ++tasks;
  }
  std::vector<std::string> content(lines.begin() + static_cast<std::ptrdiff_t>(fixed.size() + tasks), lines.end());
  return Vocabulary(tasks, content);
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw VocabError("cannot write vocabulary to " + path.string());
  out << serialize();
  if (!out) throw VocabError("failed writing vocabulary to " + path.string());
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw VocabError("cannot read vocabulary " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return deserialize(ss.str());
}

std::uint64_t Vocabulary::hash() const { return fnv1a64(serialize()); }

Vocabulary build_vocab(const std::vector<std::string>& corpus, std::size_t min_freq,
                       std::optional<std::size_t> max_size, std::size_t num_task_tokens) {
  if (corpus.empty()) throw VocabError("cannot build a vocabulary from an empty corpus");
  if (min_freq == 0) throw VocabError("min_freq must be positive");

  struct Stat {
    std::size_t count = 0;
    std::size_t first = 0;
  };
  std::unordered_map<std::string, Stat> stats;
  std::size_t position = 0;
  for (const auto& text : corpus) {
    for (auto ch : split_utf8(text)) {
      auto [it, fresh] = stats.try_emplace(std::string(ch), Stat{0, position});
      ++it->second.count;
      ++position;
    }
  }

  const Vocabulary specials_only(num_task_tokens);
  std::vector<std::pair<std::string, Stat>> ranked;
  for (auto& [tok, st] : stats) {
    if (st.count >= min_freq && !specials_only.find(tok)) ranked.emplace_back(tok, st);
  }
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second.count != b.second.count) return a.second.count > b.second.count;
    return a.second.first < b.second.first;
  });
  if (max_size) {
    const std::size_t room = *max_size > specials_only.size() ? *max_size - specials_only.size() : 0;
    if (ranked.size() > room) ranked.resize(room);
  }
  std::vector<std::string> content;
  content.reserve(ranked.size());
  for (auto& [tok, st] : ranked) content.push_back(tok);
  return Vocabulary(num_task_tokens, content);
}

std::vector<TokenId> encode(std::string_view text, const Vocabulary& vocab) {
  std::vector<TokenId> ids;
  for (auto ch : split_utf8(text)) {
    auto id = vocab.find(ch);
    // Specials are multi-character names, so a single character never hits
    // them, but stay explicit about it.
    ids.push_back(id && !vocab.is_special(*id) ? *id : special::kUnk);
  }
  return ids;
}

std::string decode(std::span<const TokenId> ids, const Vocabulary& vocab, bool strip_specials) {
  std::string out;
  for (TokenId id : ids) {
    const auto& tok = vocab.token(id);
    if (!strip_specials) {
      out += tok;
    } else if (id == special::kUnk) {
      out += kUnkGlyph;
    } else if (!vocab.is_special(id)) {
      out += tok;
    }
  }
  return out;
}

}  // namespace dsgpt
