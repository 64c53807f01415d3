#pragma once

#include "dsgpt/model.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

namespace dsgpt {

class CheckpointError : public Error {
 public:
  using Error::Error;
};

/// File missing or unwritable.
class CheckpointIoError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

/// Written by an incompatible format version.
class CheckpointVersionError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

/// Truncated, bit-flipped or structurally invalid file.
class CorruptCheckpointError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

/// Checkpoint and dataset were built from different vocabularies.
class VocabMismatchError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::string_view kCheckpointMagic = "DSGPTCKP";

// Layout, all integers and floats little-endian:
//   magic[8] "DSGPTCKP", u32 version
//   i32 n_layers, n_heads, d_model, d_ff, max_seq_len, vocab_size
//   f64 dropout_rate, u8 tie_embeddings, u64 seed, f64 init_std
//   u64 vocab_hash, u64 step, u32 block_count
//   per block: u32 name_len, name bytes, u32 rank, u32 dims[rank], f32 values[prod(dims)]
//   u64 FNV-1a of every preceding byte

std::string serialize_checkpoint(const TransformerLM<float>& model, std::uint64_t step);
TransformerLM<float> parse_checkpoint(std::string_view bytes);

void save_checkpoint(const TransformerLM<float>& model, std::uint64_t step, const std::filesystem::path& path);
TransformerLM<float> load_checkpoint(const std::filesystem::path& path);

/// FNV-1a 64 of a file's bytes.
std::uint64_t hash_file(const std::filesystem::path& path);

}  // namespace dsgpt
