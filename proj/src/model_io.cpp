// SPDX-License-Identifier: Apache-2.0
#include "scmoe/model_io.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <functional>
#include <iterator>
#include <map>
#include <sstream>

#include "json.hpp"
#include "scmoe/error.hpp"

namespace scmoe {
namespace {

using nlohmann::json;

constexpr char kMagic[4] = {'S', 'C', 'M', 'X'};

// ---------------------------------------------------------------------------
// Tensor directory shared by save, load and random generation.

struct TensorSlot {
  std::string name;
  std::vector<std::uint64_t> dims;
  std::vector<float>* data;
  std::size_t fan_in;  // 0 for norm gains (initialised to 1)
};

void add_matrix(std::vector<TensorSlot>& out, std::string name, Matrix& m, std::size_t rows,
                std::size_t cols, std::size_t fan_in) {
  m.rows = rows;
  m.cols = cols;
  out.push_back({std::move(name), {rows, cols}, &m.data, fan_in});
}

void add_vector(std::vector<TensorSlot>& out, std::string name, std::vector<float>& v,
                std::size_t n) {
  out.push_back({std::move(name), {n}, &v, 0});
}

/// Shapes `weights` for `config` and lists every tensor in file order.
std::vector<TensorSlot> tensor_slots(const ModelConfig& config, ModelWeights& weights) {
  const auto d = static_cast<std::size_t>(config.d_model);
  const auto ff = static_cast<std::size_t>(config.d_ff);
  const auto vocab = static_cast<std::size_t>(config.vocab_size);
  std::vector<TensorSlot> slots;
  add_matrix(slots, "tok_embeddings", weights.tok_embeddings, vocab, d, 1);
  weights.layers.resize(static_cast<std::size_t>(config.n_layers));
  for (std::size_t l = 0; l < weights.layers.size(); ++l) {
    LayerWeights& lw = weights.layers[l];
    const std::string p = "layers." + std::to_string(l) + ".";
    add_vector(slots, p + "attn_norm", lw.attn_norm, d);
    add_matrix(slots, p + "wq", lw.wq, d, d, d);
    add_matrix(slots, p + "wk", lw.wk, d, d, d);
    add_matrix(slots, p + "wv", lw.wv, d, d, d);
    add_matrix(slots, p + "wo", lw.wo, d, d, d);
    add_vector(slots, p + "ffn_norm", lw.ffn_norm, d);
    const bool moe = config.is_moe_layer(static_cast<int>(l));
    const std::size_t n_exp = moe ? static_cast<std::size_t>(config.n_experts) : 1;
    if (moe) add_matrix(slots, p + "router", lw.router, n_exp, d, d);
    lw.experts.resize(n_exp);
    for (std::size_t e = 0; e < n_exp; ++e) {
      const std::string ep = p + "experts." + std::to_string(e) + ".";
      add_matrix(slots, ep + "gate", lw.experts[e].gate, ff, d, d);
      add_matrix(slots, ep + "up", lw.experts[e].up, ff, d, d);
      add_matrix(slots, ep + "down", lw.experts[e].down, d, ff, ff);
    }
  }
  add_vector(slots, "final_norm", weights.final_norm, d);
  add_matrix(slots, "output", weights.output, vocab, d, d);
  return slots;
}

std::uint64_t element_count(const std::vector<std::uint64_t>& dims) {
  std::uint64_t n = 1;
  for (auto v : dims) n *= v;
  return n;
}

// ---------------------------------------------------------------------------
// Little-endian primitives.

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::span<const std::uint8_t> take(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) {
      throw Error(Errc::kTruncatedPayload,
                  std::string("truncated payload: checkpoint ends inside ") + what);
    }
    auto out = bytes_.subspan(pos_, n);
    pos_ += n;
    return out;
  }

  std::uint32_t u32(const char* what) {
    auto b = take(4, what);
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | b[static_cast<std::size_t>(i)];
    return v;
  }

  std::uint64_t u64(const char* what) {
    auto b = take(8, what);
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | b[static_cast<std::size_t>(i)];
    return v;
  }

  [[nodiscard]] std::span<const std::uint8_t> rest() const { return bytes_.subspan(pos_); }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

template <class T>
void read_field(const json& j, const char* key, T& field) {
  if (j.contains(key)) field = j.at(key).get<T>();
}

}  // namespace

// ---------------------------------------------------------------------------
// Tokenizer

std::vector<int> encode(std::string_view text) {
  std::vector<int> ids;
  ids.reserve(text.size() + 1);
  ids.push_back(kBos);
  for (char c : text) ids.push_back(static_cast<unsigned char>(c));
  return ids;
}

std::string decode(std::span<const int> ids) {
  std::string out;
  out.reserve(ids.size());
  for (int id : ids) {
    if (id >= 0 && id < 256) {
      out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
    } else if (id == kBos || id == kEos || id == kPad) {
      continue;
    } else {
      out += "\xEF\xBF\xBD";
    }
  }
  return out;
}

std::string token_label(int id) {
  switch (id) {
    case kBos: return "<bos>";
    case kEos: return "<eos>";
    case kPad: return "<pad>";
    default: break;
  }
  if (id >= 0 && id < 256) return std::string(1, static_cast<char>(static_cast<unsigned char>(id)));
  return "<unk:" + std::to_string(id) + ">";
}

// ---------------------------------------------------------------------------
// Config

std::string config_to_json(const ModelConfig& c) {
  json j = {
      {"n_layers", c.n_layers},       {"d_model", c.d_model},
      {"n_heads", c.n_heads},         {"n_experts", c.n_experts},
      {"n_shared_experts", c.n_shared_experts},
      {"d_ff", c.d_ff},               {"vocab_size", c.vocab_size},
      {"max_seq_len", c.max_seq_len}, {"moe_every", c.moe_every},
      {"rope_theta", c.rope_theta},   {"norm_eps", c.norm_eps},
      {"rng_seed", c.rng_seed},
  };
  return j.dump();
}

ModelConfig config_from_json(std::string_view text) {
  ModelConfig c;
  try {
    const json j = json::parse(text);
    if (!j.is_object()) throw Error(Errc::kParse, "model config must be a JSON object");
    read_field(j, "n_layers", c.n_layers);
    read_field(j, "d_model", c.d_model);
    read_field(j, "n_heads", c.n_heads);
    read_field(j, "n_experts", c.n_experts);
    read_field(j, "n_shared_experts", c.n_shared_experts);
    read_field(j, "d_ff", c.d_ff);
    read_field(j, "vocab_size", c.vocab_size);
    read_field(j, "max_seq_len", c.max_seq_len);
    read_field(j, "moe_every", c.moe_every);
    read_field(j, "rope_theta", c.rope_theta);
    read_field(j, "norm_eps", c.norm_eps);
    read_field(j, "rng_seed", c.rng_seed);
  } catch (const json::exception& e) {
    throw Error(Errc::kParse, std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

ModelConfig load_config_file(const std::filesystem::path& path) {
  return config_from_json(read_text_file(path));
}

// ---------------------------------------------------------------------------
// Random models and checkpoints

Model generate_random_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  ModelConfig stored = config;
  stored.rng_seed = seed;
  ModelWeights weights;
  Rng rng(seed);
  for (TensorSlot& slot : tensor_slots(stored, weights)) {
    const std::uint64_t n = element_count(slot.dims);
    slot.data->resize(n);
    if (slot.fan_in == 0) {
      std::fill(slot.data->begin(), slot.data->end(), 1.0f);
      continue;
    }
    const double scale = 1.0 / std::sqrt(static_cast<double>(slot.fan_in));
    for (float& v : *slot.data) v = static_cast<float>(rng.normal() * scale);
  }
  return Model(stored, std::move(weights));
}

std::vector<std::uint8_t> serialize_checkpoint(const Model& model) {
  ModelWeights copy = model.weights();
  const std::vector<TensorSlot> slots = tensor_slots(model.config(), copy);

  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  put_u32(out, kCheckpointVersion);
  const std::string cfg = config_to_json(model.config());
  put_u32(out, static_cast<std::uint32_t>(cfg.size()));
  out.insert(out.end(), cfg.begin(), cfg.end());
  put_u32(out, static_cast<std::uint32_t>(slots.size()));
  std::uint64_t offset = 0;
  for (const TensorSlot& s : slots) {
    put_u32(out, static_cast<std::uint32_t>(s.name.size()));
    out.insert(out.end(), s.name.begin(), s.name.end());
    put_u32(out, static_cast<std::uint32_t>(s.dims.size()));
    for (auto dim : s.dims) put_u64(out, dim);
    put_u64(out, offset);
    offset += element_count(s.dims) * 4;
  }
  out.reserve(out.size() + offset);
  for (const TensorSlot& s : slots) {
    for (float v : *s.data) put_u32(out, std::bit_cast<std::uint32_t>(v));
  }
  return out;
}

Model deserialize_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw Error(Errc::kBadMagic, "bad magic: not an SCMX checkpoint");
  }
  Reader r(bytes.subspan(4));
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion) {
    throw Error(Errc::kVersionMismatch, "version mismatch: checkpoint v" +
                                            std::to_string(version) + ", reader v" +
                                            std::to_string(kCheckpointVersion));
  }
  const std::uint32_t cfg_len = r.u32("config length");
  const auto cfg_bytes = r.take(cfg_len, "config");
  const ModelConfig config =
      config_from_json(std::string_view(reinterpret_cast<const char*>(cfg_bytes.data()), cfg_len));

  ModelWeights weights;
  std::vector<TensorSlot> expected = tensor_slots(config, weights);
  std::map<std::string, TensorSlot*> by_name;
  for (TensorSlot& s : expected) by_name.emplace(s.name, &s);

  struct Entry {
    TensorSlot* slot;
    std::uint64_t offset;
  };
  std::vector<Entry> directory;
  const std::uint32_t count = r.u32("tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t name_len = r.u32("tensor name length");
    const auto name_bytes = r.take(name_len, "tensor name");
    std::string name(reinterpret_cast<const char*>(name_bytes.data()), name_len);
    const std::uint32_t rank = r.u32("tensor rank");
    if (rank > 8) throw Error(Errc::kShapeMismatch, "shape mismatch: tensor " + name + " rank " + std::to_string(rank));
    std::vector<std::uint64_t> dims(rank);
    for (auto& dim : dims) dim = r.u64("tensor dims");
    const std::uint64_t offset = r.u64("tensor offset");
    auto it = by_name.find(name);
    if (it == by_name.end()) {
      throw Error(Errc::kShapeMismatch, "shape mismatch: unexpected tensor '" + name + "'");
    }
    if (it->second->dims != dims) {
      throw Error(Errc::kShapeMismatch, "shape mismatch: tensor '" + name + "' disagrees with config");
    }
    directory.push_back({it->second, offset});
    by_name.erase(it);
  }
  if (!by_name.empty()) {
    throw Error(Errc::kShapeMismatch, "shape mismatch: missing tensor '" + by_name.begin()->first + "'");
  }

  const auto payload = r.rest();
  std::uint64_t expected_bytes = 0;
  for (const Entry& e : directory) {
    const std::uint64_t size = element_count(e.slot->dims) * 4;
    expected_bytes += size;
    if (e.offset > payload.size() || payload.size() - e.offset < size) {
      throw Error(Errc::kTruncatedPayload, "truncated payload: tensor '" + e.slot->name +
                                               "' extends past end of file");
    }
    e.slot->data->resize(element_count(e.slot->dims));
    const std::uint8_t* src = payload.data() + e.offset;
    for (float& v : *e.slot->data) {
      const std::uint32_t bits = static_cast<std::uint32_t>(src[0]) |
                                 (static_cast<std::uint32_t>(src[1]) << 8) |
                                 (static_cast<std::uint32_t>(src[2]) << 16) |
                                 (static_cast<std::uint32_t>(src[3]) << 24);
      v = std::bit_cast<float>(bits);
      src += 4;
    }
  }
  if (expected_bytes != payload.size()) {
    throw Error(Errc::kTruncatedPayload,
                "truncated payload: directory describes " + std::to_string(expected_bytes) +
                    " bytes, file holds " + std::to_string(payload.size()));
  }
  return Model(config, std::move(weights));
}

void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  const auto bytes = serialize_checkpoint(model);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error(Errc::kIo, "cannot open '" + path.string() + "' for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw Error(Errc::kIo, "write failed for '" + path.string() + "'");
}

Model load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error(Errc::kIo, "cannot open checkpoint '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

// ---------------------------------------------------------------------------
// Corpus

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error(Errc::kIo, "cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

namespace {

CorpusLoad parse_corpus_impl(std::string_view text, bool lenient) {
  CorpusLoad result;
  int line_no = 0;
  std::size_t start = 0;
  while (start <= text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(start, end - start);
    ++line_no;
    start = end + 1;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.find_first_not_of(" \t") == std::string_view::npos) {
      if (end == text.size()) break;
      continue;
    }
    try {
      const json j = json::parse(line);
      auto need = [&](const char* key) -> std::string {
        if (!j.is_object() || !j.contains(key) || !j.at(key).is_string()) {
          throw Error(Errc::kParse, std::string("missing string field \"") + key + "\"");
        }
        return j.at(key).get<std::string>();
      };
      CorpusEntry e;
      e.id = need("id");
      e.prompt = need("prompt");
      e.reference = need("reference");
      if (e.prompt.empty() || e.reference.empty()) {
        throw Error(Errc::kParse, "prompt and reference must be non-empty");
      }
      if (j.contains("answer") && !j.at("answer").is_null()) {
        const json& a = j.at("answer");
        e.answer = a.is_string() ? a.get<std::string>() : a.dump();
      }
      e.line = line_no;
      result.entries.push_back(std::move(e));
    } catch (const std::exception& ex) {
      std::string msg = "corpus line " + std::to_string(line_no) + ": " + ex.what();
      if (!lenient) throw Error(Errc::kParse, msg);
      result.error = std::move(msg);
      return result;
    }
    if (end == text.size()) break;
  }
  return result;
}

}  // namespace

std::vector<CorpusEntry> parse_corpus(std::string_view text) {
  return parse_corpus_impl(text, false).entries;
}

std::vector<CorpusEntry> load_corpus(const std::filesystem::path& path) {
  return parse_corpus(read_text_file(path));
}

CorpusLoad load_corpus_lenient(const std::filesystem::path& path) {
  return parse_corpus_impl(read_text_file(path), true);
}

}  // namespace scmoe
