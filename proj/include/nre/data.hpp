#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "nre/tensor.hpp"
#include "nre/tokenize.hpp"

namespace nre {

// ---- relation map -------------------------------------------------------------

// Bijective name <-> id map with the NA relation pinned to id 0.
class RelationMap {
 public:
  explicit RelationMap(std::string na_name = "NA");

  // Validates density, uniqueness and the NA position.
  static RelationMap from_json(const nlohmann::json& j, const std::string& na_name = "NA");
  // NA first, then the remaining names in order of first appearance.
  static RelationMap from_names(const std::vector<std::string>& names, const std::string& na_name = "NA");

  std::size_t id(std::string_view name) const;  // kData for unknown names
  bool contains(std::string_view name) const;
  const std::string& name(std::size_t id) const;
  std::size_t size() const { return names_.size(); }
  const std::string& na_name() const { return names_.front(); }
  static constexpr std::size_t kNa = 0;

  nlohmann::json to_json() const;
  bool operator==(const RelationMap& other) const { return names_ == other.names_; }

 private:
  std::vector<std::string> names_;
  std::unordered_map<std::string, std::size_t> ids_;
};

RelationMap load_relation_map(const std::string& path, const std::string& na_name = "NA");

// ---- datasets ----------------------------------------------------------------

struct DatasetLoad {
  std::vector<Instance> instances;
  std::vector<std::size_t> line_numbers;  // 1-based source line per instance
  std::size_t skipped = 0;                // malformed lines
  std::vector<std::size_t> skipped_lines;
};

// One JSON object per line:
//   {"token": [...] | "text": "...",
//    "h": {"name": s, "id": s, "pos": [start, end]}, "t": {...}, "relation": s}
// With "text", positions are code point offsets and are mapped onto the
// word tokenization. Malformed lines are skipped and counted; a relation
// missing from `relations` (when given) is a data error.
DatasetLoad load_jsonl_dataset(const std::string& path, const RelationMap* relations = nullptr);
DatasetLoad parse_jsonl_dataset(std::istream& in, const RelationMap* relations = nullptr);

Instance instance_from_json(const nlohmann::json& j);
nlohmann::json instance_to_json(const Instance& inst);
void write_jsonl_dataset(const std::string& path, const std::vector<Instance>& instances);

// Code point span -> covering token span [start, end).
std::pair<std::size_t, std::size_t> char_span_to_tokens(const std::vector<TextToken>& tokens, std::size_t begin,
                                                        std::size_t end);

// relation -> instances; accepts our instance schema or FewRel-style
// {"tokens": [...], "h": [name, id, [[i, ...]]], ...} entries.
std::map<std::string, std::vector<Instance>> load_fewshot_dataset(const std::string& path);
std::map<std::string, std::vector<Instance>> parse_fewshot_dataset(const nlohmann::json& j);

// ---- pretrained embeddings ------------------------------------------------------

struct EmbeddingCoverage {
  std::size_t matched = 0;
  std::size_t vocab_size = 0;
  std::size_t dim = 0;
  double fraction() const { return vocab_size ? static_cast<double>(matched) / static_cast<double>(vocab_size) : 0.0; }
};

// Text rows "token v1 ... vd" (an optional "count dim" header is skipped).
// Rows for in-vocabulary tokens overwrite `table`; others keep their values.
EmbeddingCoverage load_pretrained_embeddings(const std::string& path, const Vocab& vocab, Tensor& table);
EmbeddingCoverage load_pretrained_embeddings(std::istream& in, const Vocab& vocab, Tensor& table);

// ---- checkpoints -------------------------------------------------------------------

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct ParameterBlock {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

// Binary layout (all integers little-endian):
//   "NREC" | u32 version | u64 metadata length | metadata (UTF-8 JSON)
//   then per block: u16 name length | name | u8 dtype (0 = f32) | u8 rank |
//                   rank x u64 dims | f32 values
// Metadata holds "architecture", "vocab", "vocab_hash" and "relations".
struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  nlohmann::json metadata;
  std::vector<ParameterBlock> blocks;

  const ParameterBlock& block(const std::string& name) const;
  std::vector<std::string> vocab() const;
};

std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint parse_checkpoint(std::string_view bytes);
void write_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint read_checkpoint(const std::string& path);
// Also rejects a checkpoint whose vocabulary hash differs from `expected`.
Checkpoint read_checkpoint(const std::string& path, const std::vector<std::string>& expected_vocab);

std::string hash_hex(std::uint64_t h);

std::string read_file(const std::string& path);

}  // namespace nre
