#include "nre/data.hpp"

#include <cstring>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include "nre/error.hpp"

namespace nre {

// ---- relation map ------------------------------------------------------------------

RelationMap::RelationMap(std::string na_name) {
  names_.push_back(na_name);
  ids_.emplace(std::move(na_name), 0);
}

RelationMap RelationMap::from_json(const nlohmann::json& j, const std::string& na_name) {
  if (!j.is_object()) fail(ErrorCode::kFormat, "relation map must be a JSON object");
  std::map<std::size_t, std::string> by_id;
  for (const auto& [name, value] : j.items()) {
    if (!value.is_number_integer() || value.get<long long>() < 0) {
      fail(ErrorCode::kFormat, "relation '" + name + "' needs a non-negative integer id");
    }
    const auto id = value.get<std::size_t>();
    if (!by_id.emplace(id, name).second) {
      fail(ErrorCode::kDuplicateId, "id " + std::to_string(id) + " used by '" + by_id[id] + "' and '" + name + "'");
    }
  }
  std::size_t expected = 0;
  for (const auto& [id, name] : by_id) {
    if (id != expected) fail(ErrorCode::kIdGap, "relation ids skip " + std::to_string(expected));
    ++expected;
  }
  auto na = j.find(na_name);
  if (na == j.end() || na->get<std::size_t>() != 0) {
    fail(ErrorCode::kNaPosition, "'" + na_name + "' must map to id 0");
  }
  RelationMap m(na_name);
  for (const auto& [id, name] : by_id) {
    if (id == 0) continue;
    m.ids_.emplace(name, m.names_.size());
    m.names_.push_back(name);
  }
  return m;
}

RelationMap RelationMap::from_names(const std::vector<std::string>& names, const std::string& na_name) {
  RelationMap m(na_name);
  for (const auto& n : names) {
    if (m.ids_.count(n)) continue;
    m.ids_.emplace(n, m.names_.size());
    m.names_.push_back(n);
  }
  return m;
}

std::size_t RelationMap::id(std::string_view name) const {
  auto it = ids_.find(std::string(name));
  if (it == ids_.end()) fail(ErrorCode::kData, "unknown relation '" + std::string(name) + "'");
  return it->second;
}

bool RelationMap::contains(std::string_view name) const { return ids_.count(std::string(name)) > 0; }

const std::string& RelationMap::name(std::size_t id) const {
  if (id >= names_.size()) fail(ErrorCode::kIndex, "relation id " + std::to_string(id));
  return names_[id];
}

nlohmann::json RelationMap::to_json() const {
  nlohmann::json j = nlohmann::json::object();
  for (std::size_t i = 0; i < names_.size(); ++i) j[names_[i]] = i;
  return j;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::kIo, "cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

RelationMap load_relation_map(const std::string& path, const std::string& na_name) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    fail(ErrorCode::kFormat, "relation map '" + path + "': " + e.what());
  }
  return RelationMap::from_json(j, na_name);
}

// ---- datasets ------------------------------------------------------------------------

std::pair<std::size_t, std::size_t> char_span_to_tokens(const std::vector<TextToken>& tokens, std::size_t begin,
                                                        std::size_t end) {
  std::size_t first = SIZE_MAX, last = 0;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i].end > begin && tokens[i].begin < end) {
      first = std::min(first, i);
      last = i + 1;
    }
  }
  if (begin >= end || first == SIZE_MAX) {
    fail(ErrorCode::kInvalidSpan,
         "character span [" + std::to_string(begin) + ", " + std::to_string(end) + ") covers no token");
  }
  return {first, last};
}

namespace {

EntityMention entity_from_json(const nlohmann::json& j) {
  EntityMention e;
  e.name = j.value("name", std::string());
  if (j.contains("id") && !j["id"].is_null()) e.id = j["id"].get<std::string>();
  const auto& pos = j.at("pos");
  if (!pos.is_array() || pos.size() != 2) fail(ErrorCode::kFormat, "entity pos must be [start, end]");
  e.start = pos[0].get<std::size_t>();
  e.end = pos[1].get<std::size_t>();
  return e;
}

}  // namespace

Instance instance_from_json(const nlohmann::json& j) {
  Instance inst;
  inst.head = entity_from_json(j.at("h"));
  inst.tail = entity_from_json(j.at("t"));
  inst.relation = j.value("relation", std::string());
  if (j.contains("token")) {
    inst.tokens = j["token"].get<std::vector<std::string>>();
  } else if (j.contains("text")) {
    const auto text = j["text"].get<std::string>();
    const auto toks = word_tokenize_with_offsets(text);
    for (auto* e : {&inst.head, &inst.tail}) {
      const auto [s, t] = char_span_to_tokens(toks, e->start, e->end);
      if (e->name.empty()) e->name = utf8_slice(text, e->start, e->end);
      e->start = s;
      e->end = t;
    }
    for (const auto& t : toks) inst.tokens.push_back(t.text);
  } else {
    fail(ErrorCode::kFormat, "instance needs \"token\" or \"text\"");
  }
  validate_instance(inst);
  return inst;
}

nlohmann::json instance_to_json(const Instance& inst) {
  auto entity = [](const EntityMention& e) {
    nlohmann::json j = {{"name", e.name}, {"pos", {e.start, e.end}}};
    if (!e.id.empty()) j["id"] = e.id;
    return j;
  };
  return {{"token", inst.tokens}, {"h", entity(inst.head)}, {"t", entity(inst.tail)}, {"relation", inst.relation}};
}

DatasetLoad parse_jsonl_dataset(std::istream& in, const RelationMap* relations) {
  DatasetLoad out;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    Instance inst;
    try {
      inst = instance_from_json(nlohmann::json::parse(line));
    } catch (const nlohmann::json::exception&) {
      ++out.skipped;
      out.skipped_lines.push_back(number);
      continue;
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kFormat && e.code() != ErrorCode::kInvalidSpan) throw;
      ++out.skipped;
      out.skipped_lines.push_back(number);
      continue;
    }
    if (relations && !relations->contains(inst.relation)) {
      fail(ErrorCode::kData, "line " + std::to_string(number) + ": unknown relation '" + inst.relation + "'");
    }
    out.instances.push_back(std::move(inst));
    out.line_numbers.push_back(number);
  }
  return out;
}

DatasetLoad load_jsonl_dataset(const std::string& path, const RelationMap* relations) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::kIo, "cannot open dataset '" + path + "'");
  return parse_jsonl_dataset(in, relations);
}

void write_jsonl_dataset(const std::string& path, const std::vector<Instance>& instances) {
  std::ofstream out(path);
  if (!out) fail(ErrorCode::kIo, "cannot write '" + path + "'");
  for (const auto& inst : instances) out << instance_to_json(inst).dump() << '\n';
}

namespace {

// FewRel entity: [name, id, [[token indices], ...]]; the first occurrence
// becomes the span.
EntityMention fewrel_entity(const nlohmann::json& j) {
  EntityMention e;
  e.name = j.at(0).get<std::string>();
  e.id = j.at(1).is_null() ? std::string() : j.at(1).get<std::string>();
  const auto idx = j.at(2).at(0).get<std::vector<std::size_t>>();
  if (idx.empty()) fail(ErrorCode::kFormat, "FewRel entity without positions");
  e.start = idx.front();
  e.end = idx.back() + 1;
  return e;
}

}  // namespace

std::map<std::string, std::vector<Instance>> parse_fewshot_dataset(const nlohmann::json& j) {
  if (!j.is_object()) fail(ErrorCode::kFormat, "few-shot dataset must map relation -> instance list");
  std::map<std::string, std::vector<Instance>> out;
  for (const auto& [relation, items] : j.items()) {
    auto& list = out[relation];
    for (const auto& item : items) {
      Instance inst;
      if (item.contains("tokens") && item.at("h").is_array()) {
        inst.tokens = item["tokens"].get<std::vector<std::string>>();
        inst.head = fewrel_entity(item["h"]);
        inst.tail = fewrel_entity(item["t"]);
        validate_instance(inst);
      } else {
        inst = instance_from_json(item);
      }
      inst.relation = relation;
      list.push_back(std::move(inst));
    }
  }
  return out;
}

std::map<std::string, std::vector<Instance>> load_fewshot_dataset(const std::string& path) {
  try {
    return parse_fewshot_dataset(nlohmann::json::parse(read_file(path)));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kFormat, "few-shot dataset '" + path + "': " + e.what());
  }
}

// ---- embeddings ---------------------------------------------------------------------------

EmbeddingCoverage load_pretrained_embeddings(std::istream& in, const Vocab& vocab, Tensor& table) {
  if (table.rank() != 2 || table.rows() != vocab.size()) {
    fail(ErrorCode::kDimension, "embedding table does not match the vocabulary");
  }
  const std::size_t dim = table.cols();
  auto data = table.mutable_data();
  std::set<std::size_t> matched;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    std::istringstream fields(line);
    std::string token;
    if (!(fields >> token)) continue;
    std::vector<double> values;
    double v;
    while (fields >> v) values.push_back(v);
    if (!fields.eof()) fail(ErrorCode::kFormat, "line " + std::to_string(number) + ": non-numeric value");
    if (number == 1 && values.size() == 1) continue;  // "count dim" header
    if (values.size() != dim) {
      fail(ErrorCode::kFormat, "line " + std::to_string(number) + ": " + std::to_string(values.size()) +
                                   " values, expected " + std::to_string(dim));
    }
    const std::string norm = normalize_token(token);
    if (!vocab.contains(norm)) continue;
    const std::size_t id = vocab.id(norm);
    std::copy(values.begin(), values.end(), data.begin() + static_cast<std::ptrdiff_t>(id * dim));
    matched.insert(id);
  }
  return {matched.size(), vocab.size(), dim};
}

EmbeddingCoverage load_pretrained_embeddings(const std::string& path, const Vocab& vocab, Tensor& table) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::kIo, "cannot open embeddings '" + path + "'");
  return load_pretrained_embeddings(in, vocab, table);
}

// ---- checkpoints --------------------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'N', 'R', 'E', 'C'};

template <typename T>
void put_le(std::string& out, T value) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out += static_cast<char>((static_cast<std::uint64_t>(value) >> (8 * i)) & 0xFF);
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  template <typename T>
  T get(const char* what) {
    need(sizeof(T), what);
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += sizeof(T);
    return static_cast<T>(v);
  }

  std::string_view take(std::size_t n, const char* what) {
    need(n, what);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) fail(ErrorCode::kTruncated, std::string("checkpoint truncated in ") + what);
  }

  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string hash_hex(std::uint64_t h) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

const ParameterBlock& Checkpoint::block(const std::string& name) const {
  for (const auto& b : blocks) {
    if (b.name == name) return b;
  }
  fail(ErrorCode::kFormat, "checkpoint has no parameter block '" + name + "'");
}

std::vector<std::string> Checkpoint::vocab() const { return metadata.at("vocab").get<std::vector<std::string>>(); }

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  std::string out(kMagic, 4);
  put_le<std::uint32_t>(out, ckpt.version);
  const std::string meta = ckpt.metadata.dump();
  put_le<std::uint64_t>(out, meta.size());
  out += meta;
  for (const auto& b : ckpt.blocks) {
    if (b.name.size() > 0xFFFF) fail(ErrorCode::kFormat, "parameter name too long");
    if (b.shape.size() > 0xFF) fail(ErrorCode::kFormat, "parameter rank too large");
    if (shape_numel(b.shape) != b.values.size()) fail(ErrorCode::kFormat, "block '" + b.name + "' size mismatch");
    put_le<std::uint16_t>(out, static_cast<std::uint16_t>(b.name.size()));
    out += b.name;
    put_le<std::uint8_t>(out, 0);
    put_le<std::uint8_t>(out, static_cast<std::uint8_t>(b.shape.size()));
    for (auto d : b.shape) put_le<std::uint64_t>(out, d);
    for (float f : b.values) {
      std::uint32_t bits;
      std::memcpy(&bits, &f, sizeof bits);
      put_le<std::uint32_t>(out, bits);
    }
  }
  return out;
}

Checkpoint parse_checkpoint(std::string_view bytes) {
  Reader r(bytes);
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    fail(ErrorCode::kBadMagic, "not a checkpoint (magic bytes differ)");
  }
  r.take(4, "magic");
  Checkpoint ckpt;
  ckpt.version = r.get<std::uint32_t>("version");
  if (ckpt.version != kCheckpointVersion) {
    fail(ErrorCode::kBadVersion, "checkpoint version " + std::to_string(ckpt.version) + " is not supported");
  }
  const auto meta_len = r.get<std::uint64_t>("metadata length");
  const auto meta = r.take(meta_len, "metadata");
  try {
    ckpt.metadata = nlohmann::json::parse(meta);
  } catch (const nlohmann::json::parse_error& e) {
    fail(ErrorCode::kFormat, std::string("checkpoint metadata: ") + e.what());
  }
  while (!r.done()) {
    ParameterBlock b;
    const auto name_len = r.get<std::uint16_t>("block name length");
    b.name = std::string(r.take(name_len, "block name"));
    const auto dtype = r.get<std::uint8_t>("dtype");
    if (dtype != 0) fail(ErrorCode::kFormat, "block '" + b.name + "' has unknown dtype " + std::to_string(dtype));
    const auto rank = r.get<std::uint8_t>("rank");
    for (std::uint8_t i = 0; i < rank; ++i) b.shape.push_back(r.get<std::uint64_t>("dims"));
    const std::size_t n = shape_numel(b.shape);
    b.values.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      const auto bits = r.get<std::uint32_t>("values");
      std::memcpy(&b.values[i], &bits, sizeof bits);
    }
    ckpt.blocks.push_back(std::move(b));
  }
  if (ckpt.metadata.contains("vocab")) {
    const auto stored = ckpt.metadata.value("vocab_hash", std::string());
    if (stored != hash_hex(token_list_hash(ckpt.vocab()))) {
      fail(ErrorCode::kVocabHashMismatch, "stored vocabulary does not match its hash");
    }
  }
  return ckpt;
}

void write_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  const std::string bytes = serialize_checkpoint(ckpt);
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::kIo, "cannot write checkpoint '" + path + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

Checkpoint read_checkpoint(const std::string& path) { return parse_checkpoint(read_file(path)); }

Checkpoint read_checkpoint(const std::string& path, const std::vector<std::string>& expected_vocab) {
  Checkpoint ckpt = read_checkpoint(path);
  const auto expected = hash_hex(token_list_hash(expected_vocab));
  if (ckpt.metadata.value("vocab_hash", std::string()) != expected) {
    fail(ErrorCode::kVocabHashMismatch, "checkpoint vocabulary hash " + ckpt.metadata.value("vocab_hash", std::string()) +
                                            " differs from " + expected);
  }
  return ckpt;
}

}  // namespace nre
