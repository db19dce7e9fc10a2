#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace nre {

// ---- text utilities ---------------------------------------------------------

// Decodes UTF-8 into code points; invalid bytes decode as U+FFFD.
std::vector<char32_t> utf8_decode(std::string_view text);
std::string utf8_encode(char32_t cp);
// Byte offset of every code point plus a final entry for the end.
std::vector<std::size_t> utf8_offsets(std::string_view text);
// Substring by code point range [begin, end).
std::string utf8_slice(std::string_view text, std::size_t begin, std::size_t end);
std::size_t utf8_length(std::string_view text);

// ASCII lowercase; other code points pass through.
std::string normalize_token(std::string_view token);

struct TextToken {
  std::string text;   // normalized
  std::string raw;    // as written
  std::size_t begin;  // code point offsets into the source text
  std::size_t end;
};

// Lowercases, splits on whitespace and turns every ASCII punctuation
// character into its own token.
std::vector<std::string> word_tokenize(std::string_view text);
std::vector<TextToken> word_tokenize_with_offsets(std::string_view text);

// ---- word vocabulary ----------------------------------------------------------

class Vocab {
 public:
  static constexpr std::size_t kPad = 0;
  static constexpr std::size_t kUnk = 1;
  static constexpr std::size_t kBlank = 2;
  static constexpr std::size_t kReserved = 3;

  Vocab();
  // Tokens in id order; the first three must be the reserved tokens.
  static Vocab from_tokens(const std::vector<std::string>& tokens);

  // Appends a token (if new) and returns its id; frozen vocabularies only
  // look up.
  std::size_t add(std::string_view token);
  std::size_t id(std::string_view token) const;
  bool contains(std::string_view token) const;
  const std::string& token(std::size_t id) const;
  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  void freeze() { frozen_ = true; }
  bool frozen() const { return frozen_; }

  // 64-bit FNV-1a over the tokens joined by '\n' in id order.
  std::uint64_t content_hash() const;

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::size_t> index_;
  bool frozen_ = false;
};

std::uint64_t fnv1a64(std::string_view bytes);
std::uint64_t token_list_hash(const std::vector<std::string>& tokens);

// ---- instances ------------------------------------------------------------------

struct EntityMention {
  std::string name;
  std::string id;     // knowledge-base id; empty when unknown
  std::size_t start;  // token span [start, end)
  std::size_t end;

  bool operator==(const EntityMention&) const = default;
};

struct Instance {
  std::vector<std::string> tokens;
  EntityMention head;
  EntityMention tail;
  std::string relation;

  bool operator==(const Instance&) const = default;
};

// Throws kInvalidSpan unless both spans lie inside the tokens and differ.
void validate_instance(const Instance& inst);

struct EncodedInstance {
  std::vector<std::size_t> token_ids;
  std::vector<std::size_t> pos1_ids;
  std::vector<std::size_t> pos2_ids;
  std::vector<int> segment_ids;  // 0 pad, 1..3 pieces
  std::vector<int> attention_mask;
  std::size_t length = 0;  // real tokens before padding
};

struct EncodeOptions {
  std::size_t max_length = 128;
  std::size_t max_pos = 100;
};

// Token counts over the instances' (normalized) tokens; ids are assigned by
// frequency descending then lexicographically. Returns a frozen vocabulary.
Vocab build_vocab(const std::vector<Instance>& corpus, std::size_t min_count);

EncodedInstance encode_instance(const Instance& inst, const Vocab& vocab, const EncodeOptions& options = {});

// Three-piece segmentation: entities ordered by start; [0, b1) -> 1,
// [b1, b2) -> 2, [b2, len) -> 3 where b1/b2 are the entity ends.
std::vector<int> piece_segments(const Instance& inst, std::size_t length);

// ---- subwords -------------------------------------------------------------------

class SubwordVocab {
 public:
  static constexpr std::string_view kContinuation = "##";
  static const std::vector<std::string>& special_tokens();

  // Specials first (ids 0..7 in special_tokens() order), then `pieces`.
  static SubwordVocab from_pieces(const std::vector<std::string>& pieces);
  // Specials, every character seen (bare and as a continuation) and whole
  // words with frequency >= min_count.
  static SubwordVocab from_corpus(const std::vector<std::string>& words, std::size_t min_count);

  std::size_t id(std::string_view piece) const;
  bool contains(std::string_view piece) const;
  const std::string& piece(std::size_t id) const { return pieces_[id]; }
  std::size_t size() const { return pieces_.size(); }
  const std::vector<std::string>& pieces() const { return pieces_; }

  std::size_t pad() const { return 0; }
  std::size_t unk() const { return 1; }
  std::size_t cls() const { return 2; }
  std::size_t sep() const { return 3; }
  std::size_t head_open() const { return 4; }
  std::size_t head_close() const { return 5; }
  std::size_t tail_open() const { return 6; }
  std::size_t tail_close() const { return 7; }

 private:
  std::vector<std::string> pieces_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Greedy longest-match-first per whitespace word. A word containing a
// character the vocabulary cannot match becomes a single "[UNK]".
std::vector<std::string> wordpiece_tokenize(std::string_view text, const SubwordVocab& vocab);

struct MarkedSequence {
  std::vector<std::size_t> ids;
  std::size_t head_marker = 0;  // index of [HEAD]
  std::size_t tail_marker = 0;  // index of [TAIL]
};

// [CLS] ... [HEAD] head [/HEAD] ... [TAIL] tail [/TAIL] ... [SEP]
// with markers placed in text order.
MarkedSequence insert_entity_markers(const Instance& inst, const SubwordVocab& vocab);

}  // namespace nre
