// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "scmoe/model.hpp"

namespace scmoe {

// ---------------------------------------------------------------------------
// Byte-level tokenizer: ids 0-255 are raw bytes.

inline constexpr int kBos = 256;
inline constexpr int kEos = 257;
inline constexpr int kPad = 258;
inline constexpr int kReservedToken = 259;
inline constexpr int kByteVocabSize = 260;

/// [BOS, bytes...].
std::vector<int> encode(std::string_view text);

/// Inverse of encode. BOS/EOS/PAD are dropped; any other id outside the byte
/// range becomes U+FFFD.
std::string decode(std::span<const int> ids);

/// Printable label for one token (bytes as-is, specials as <bos> etc.).
std::string token_label(int id);

// ---------------------------------------------------------------------------
// Checkpoints.
//
// Layout (all integers little-endian):
//   "SCMX" | u32 version | u32 config_len | config JSON
//   u32 tensor_count | per tensor: u32 name_len, name, u32 rank, u64 dims[rank], u64 offset
//   payload: float32 LE, row-major; offsets are relative to the payload start.

inline constexpr std::uint32_t kCheckpointVersion = 1;

std::string config_to_json(const ModelConfig& config);
ModelConfig config_from_json(std::string_view text);
ModelConfig load_config_file(const std::filesystem::path& path);

/// Weights ~ N(0, 1/fan_in) from a seeded source; norm gains are 1.
Model generate_random_model(const ModelConfig& config, std::uint64_t seed);

std::vector<std::uint8_t> serialize_checkpoint(const Model& model);
Model deserialize_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const Model& model, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Corpus.

struct CorpusEntry {
  std::string id;
  std::string prompt;
  std::string reference;
  std::optional<std::string> answer;
  int line = 0;
};

struct CorpusLoad {
  std::vector<CorpusEntry> entries;
  /// Set in lenient mode when a line failed; entries hold every valid line
  /// before it.
  std::optional<std::string> error;
};

/// JSON-lines, one {"id","prompt","reference","answer"?} object per line.
/// Blank lines are skipped. Strict mode throws Errc::kParse naming the line.
std::vector<CorpusEntry> load_corpus(const std::filesystem::path& path);
CorpusLoad load_corpus_lenient(const std::filesystem::path& path);
std::vector<CorpusEntry> parse_corpus(std::string_view text);

std::string read_text_file(const std::filesystem::path& path);

}  // namespace scmoe
