#include "dsgpt/checkpoint.hpp"

#include "dsgpt/tokenizer.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

namespace dsgpt {

namespace {

class Writer {
 public:
  void bytes(std::string_view b) { out_ += b; }

  template <typename T>
  void le(T value) {
    using U = std::conditional_t<sizeof(T) == 8, std::uint64_t,
                                 std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint8_t>>;
    U bits;
    std::memcpy(&bits, &value, sizeof(T));
    for (std::size_t i = 0; i < sizeof(T); ++i) out_ += static_cast<char>((bits >> (8 * i)) & 0xFF);
  }

  std::string take() { return std::move(out_); }
  const std::string& view() const { return out_; }

 private:
  std::string out_;
};

class Reader {
 public:
  explicit Reader(std::string_view data) : data_(data) {}

  std::string_view bytes(std::size_t n) {
    need(n);
    auto out = data_.substr(pos_, n);
    pos_ += n;
    return out;
  }

  template <typename T>
  T le() {
    using U = std::conditional_t<sizeof(T) == 8, std::uint64_t,
                                 std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint8_t>>;
    need(sizeof(T));
    U bits = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      bits |= static_cast<U>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(T);
    T value;
    std::memcpy(&value, &bits, sizeof(T));
    return value;
  }

  std::size_t remaining() const { return data_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (data_.size() - pos_ < n) throw CorruptCheckpointError("checkpoint is truncated");
  }

  std::string_view data_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string serialize_checkpoint(const TransformerLM<float>& model, std::uint64_t step) {
  const auto& c = model.config();
  Writer w;
  w.bytes(kCheckpointMagic);
  w.le(kCheckpointVersion);
  w.le<std::int32_t>(c.n_layers);
  w.le<std::int32_t>(c.n_heads);
  w.le<std::int32_t>(c.d_model);
  w.le<std::int32_t>(c.d_ff);
  w.le<std::int32_t>(c.max_seq_len);
  w.le<std::int32_t>(c.vocab_size);
  w.le<double>(c.dropout_rate);
  w.le<std::uint8_t>(c.tie_embeddings ? 1 : 0);
  w.le<std::uint64_t>(c.seed);
  w.le<double>(c.init_std);
  w.le<std::uint64_t>(model.vocab_hash());
  w.le<std::uint64_t>(step);

  const auto params = model.parameters();
  w.le<std::uint32_t>(static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, t] : params) {
    w.le<std::uint32_t>(static_cast<std::uint32_t>(name.size()));
    w.bytes(name);
    w.le<std::uint32_t>(static_cast<std::uint32_t>(t->rank()));
    for (auto extent : t->shape()) w.le<std::uint32_t>(static_cast<std::uint32_t>(extent));
    for (float x : t->data()) w.le<float>(x);
  }
  w.le<std::uint64_t>(fnv1a64(w.view()));
  return w.take();
}

TransformerLM<float> parse_checkpoint(std::string_view bytes) {
  Reader r(bytes);
  if (r.remaining() < kCheckpointMagic.size() || r.bytes(kCheckpointMagic.size()) != kCheckpointMagic) {
    throw CorruptCheckpointError("not a checkpoint (bad magic)");
  }
  const auto version = r.le<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw CheckpointVersionError("checkpoint format version " + std::to_string(version) + ", expected " +
                                 std::to_string(kCheckpointVersion));
  }
  if (bytes.size() < 8) throw CorruptCheckpointError("checkpoint is truncated");
  Reader tail(bytes.substr(bytes.size() - 8));
  if (tail.le<std::uint64_t>() != fnv1a64(bytes.substr(0, bytes.size() - 8))) {
    throw CorruptCheckpointError("checkpoint checksum mismatch (truncated or modified)");
  }

  ModelConfig c;
  c.n_layers = r.le<std::int32_t>();
  c.n_heads = r.le<std::int32_t>();
  c.d_model = r.le<std::int32_t>();
  c.d_ff = r.le<std::int32_t>();
  c.max_seq_len = r.le<std::int32_t>();
  c.vocab_size = r.le<std::int32_t>();
  c.dropout_rate = r.le<double>();
  c.tie_embeddings = r.le<std::uint8_t>() != 0;
  c.seed = r.le<std::uint64_t>();
  c.init_std = r.le<double>();
  const auto vocab_hash = r.le<std::uint64_t>();
  const auto step = r.le<std::uint64_t>();
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw CorruptCheckpointError(std::string("checkpoint header: ") + e.what());
  }

  TransformerLM<float> model(c);
  auto params = model.parameters();
  const auto count = r.le<std::uint32_t>();
  if (count != params.size()) {
    throw CorruptCheckpointError("checkpoint has " + std::to_string(count) + " parameter blocks, config implies " +
                                 std::to_string(params.size()));
  }
  for (auto& [name, t] : params) {
    const auto name_len = r.le<std::uint32_t>();
    if (r.bytes(name_len) != name) throw CorruptCheckpointError("unexpected parameter block, wanted " + name);
    const auto rank = r.le<std::uint32_t>();
    Shape shape;
    for (std::uint32_t i = 0; i < rank && i < 8; ++i) shape.push_back(r.le<std::uint32_t>());
    if (shape != t->shape()) {
      throw CorruptCheckpointError("parameter " + name + " has shape " + to_string(shape) + ", expected " +
                                   to_string(t->shape()));
    }
    for (auto& x : t->data()) x = r.le<float>();
  }
  if (r.remaining() != 8) throw CorruptCheckpointError("trailing bytes after parameter blocks");
  model.set_vocab_hash(vocab_hash);
  model.set_step(step);
  return model;
}

void save_checkpoint(const TransformerLM<float>& model, std::uint64_t step, const std::filesystem::path& path) {
  const auto bytes = serialize_checkpoint(model, step);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointIoError("cannot write checkpoint " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointIoError("failed writing checkpoint " + path.string());
}

TransformerLM<float> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointIoError("cannot read checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_checkpoint(ss.str());
}

std::uint64_t hash_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return fnv1a64(ss.str());
}

}  // namespace dsgpt
