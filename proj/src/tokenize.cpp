#include "nre/tokenize.hpp"

#include <algorithm>
#include <map>
#include <set>

#include "nre/error.hpp"

namespace nre {

// ---- UTF-8 -------------------------------------------------------------------

namespace {

// Returns (code point, byte length) of the sequence starting at text[i].
std::pair<char32_t, std::size_t> decode_one(std::string_view text, std::size_t i) {
  const auto b0 = static_cast<unsigned char>(text[i]);
  auto cont = [&](std::size_t k) -> int {
    if (i + k >= text.size()) return -1;
    const auto b = static_cast<unsigned char>(text[i + k]);
    return (b & 0xC0) == 0x80 ? (b & 0x3F) : -1;
  };
  if (b0 < 0x80) return {b0, 1};
  if ((b0 & 0xE0) == 0xC0) {
    const int c1 = cont(1);
    if (c1 >= 0) return {static_cast<char32_t>(((b0 & 0x1F) << 6) | c1), 2};
  } else if ((b0 & 0xF0) == 0xE0) {
    const int c1 = cont(1), c2 = cont(2);
    if (c1 >= 0 && c2 >= 0) return {static_cast<char32_t>(((b0 & 0x0F) << 12) | (c1 << 6) | c2), 3};
  } else if ((b0 & 0xF8) == 0xF0) {
    const int c1 = cont(1), c2 = cont(2), c3 = cont(3);
    if (c1 >= 0 && c2 >= 0 && c3 >= 0)
      return {static_cast<char32_t>(((b0 & 0x07) << 18) | (c1 << 12) | (c2 << 6) | c3), 4};
  }
  return {U'�', 1};
}

bool is_space(char32_t c) { return c == U' ' || c == U'\t' || c == U'\n' || c == U'\r' || c == U'\v' || c == U'\f'; }

bool is_ascii_punct(char32_t c) {
  return (c >= 33 && c <= 47) || (c >= 58 && c <= 64) || (c >= 91 && c <= 96) || (c >= 123 && c <= 126);
}

}  // namespace

std::vector<char32_t> utf8_decode(std::string_view text) {
  std::vector<char32_t> out;
  for (std::size_t i = 0; i < text.size();) {
    auto [cp, len] = decode_one(text, i);
    out.push_back(cp);
    i += len;
  }
  return out;
}

std::string utf8_encode(char32_t cp) {
  std::string out;
  if (cp < 0x80) {
    out += static_cast<char>(cp);
  } else if (cp < 0x800) {
    out += static_cast<char>(0xC0 | (cp >> 6));
    out += static_cast<char>(0x80 | (cp & 0x3F));
  } else if (cp < 0x10000) {
    out += static_cast<char>(0xE0 | (cp >> 12));
    out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
    out += static_cast<char>(0x80 | (cp & 0x3F));
  } else {
    out += static_cast<char>(0xF0 | (cp >> 18));
    out += static_cast<char>(0x80 | ((cp >> 12) & 0x3F));
    out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
    out += static_cast<char>(0x80 | (cp & 0x3F));
  }
  return out;
}

std::vector<std::size_t> utf8_offsets(std::string_view text) {
  std::vector<std::size_t> offsets;
  std::size_t i = 0;
  while (i < text.size()) {
    offsets.push_back(i);
    i += decode_one(text, i).second;
  }
  offsets.push_back(text.size());
  return offsets;
}

std::string utf8_slice(std::string_view text, std::size_t begin, std::size_t end) {
  const auto offsets = utf8_offsets(text);
  const std::size_t n = offsets.size() - 1;
  if (begin > end || end > n) {
    fail(ErrorCode::kInvalidSpan, "character range [" + std::to_string(begin) + ", " + std::to_string(end) +
                                      ") outside text of length " + std::to_string(n));
  }
  return std::string(text.substr(offsets[begin], offsets[end] - offsets[begin]));
}

std::size_t utf8_length(std::string_view text) { return utf8_offsets(text).size() - 1; }

std::string normalize_token(std::string_view token) {
  std::string out(token);
  for (char& c : out) {
    if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
  }
  return out;
}

// ---- word tokenization ------------------------------------------------------------

std::vector<TextToken> word_tokenize_with_offsets(std::string_view text) {
  std::vector<TextToken> out;
  std::string current;
  std::size_t start = 0;
  std::size_t index = 0;
  auto flush = [&](std::size_t end) {
    if (current.empty()) return;
    out.push_back({normalize_token(current), current, start, end});
    current.clear();
  };
  for (std::size_t i = 0; i < text.size(); ++index) {
    auto [cp, len] = decode_one(text, i);
    if (is_space(cp)) {
      flush(index);
    } else if (is_ascii_punct(cp)) {
      flush(index);
      std::string p(1, static_cast<char>(cp));
      out.push_back({p, p, index, index + 1});
    } else {
      if (current.empty()) start = index;
      current.append(text.substr(i, len));
    }
    i += len;
  }
  flush(index);
  return out;
}

std::vector<std::string> word_tokenize(std::string_view text) {
  std::vector<std::string> out;
  for (auto& t : word_tokenize_with_offsets(text)) out.push_back(std::move(t.text));
  return out;
}

// ---- Vocab --------------------------------------------------------------------------

Vocab::Vocab() {
  for (const char* t : {"[PAD]", "[UNK]", "[BLANK]"}) add(t);
}

Vocab Vocab::from_tokens(const std::vector<std::string>& tokens) {
  if (tokens.size() < kReserved || tokens[0] != "[PAD]" || tokens[1] != "[UNK]" || tokens[2] != "[BLANK]") {
    fail(ErrorCode::kFormat, "vocabulary must start with [PAD], [UNK], [BLANK]");
  }
  Vocab v;
  for (std::size_t i = kReserved; i < tokens.size(); ++i) {
    if (v.contains(tokens[i])) fail(ErrorCode::kFormat, "duplicate vocabulary token '" + tokens[i] + "'");
    v.add(tokens[i]);
  }
  v.freeze();
  return v;
}

std::size_t Vocab::add(std::string_view token) {
  auto it = index_.find(std::string(token));
  if (it != index_.end()) return it->second;
  if (frozen_) return kUnk;
  const std::size_t id = tokens_.size();
  tokens_.emplace_back(token);
  index_.emplace(tokens_.back(), id);
  return id;
}

std::size_t Vocab::id(std::string_view token) const {
  auto it = index_.find(std::string(token));
  return it == index_.end() ? kUnk : it->second;
}

bool Vocab::contains(std::string_view token) const { return index_.count(std::string(token)) > 0; }

const std::string& Vocab::token(std::size_t id) const {
  if (id >= tokens_.size()) fail(ErrorCode::kIndex, "vocabulary id " + std::to_string(id));
  return tokens_[id];
}

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t token_list_hash(const std::vector<std::string>& tokens) {
  std::string joined;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) joined += '\n';
    joined += tokens[i];
  }
  return fnv1a64(joined);
}

std::uint64_t Vocab::content_hash() const { return token_list_hash(tokens_); }

Vocab build_vocab(const std::vector<Instance>& corpus, std::size_t min_count) {
  if (min_count < 1) fail(ErrorCode::kConfig, "build_vocab: min_count must be >= 1");
  std::map<std::string, std::size_t> counts;
  for (const auto& inst : corpus)
    for (const auto& t : inst.tokens) ++counts[normalize_token(t)];
  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  Vocab v;
  for (const auto& [tok, n] : ranked) {
    if (n >= min_count) v.add(tok);
  }
  v.freeze();
  return v;
}

// ---- encoding -------------------------------------------------------------------------

void validate_instance(const Instance& inst) {
  const std::size_t n = inst.tokens.size();
  for (const auto* e : {&inst.head, &inst.tail}) {
    if (e->start >= e->end || e->end > n) {
      fail(ErrorCode::kInvalidSpan, "entity '" + e->name + "' span [" + std::to_string(e->start) + ", " +
                                        std::to_string(e->end) + ") invalid for " + std::to_string(n) + " tokens");
    }
  }
  if (inst.head.start == inst.tail.start && inst.head.end == inst.tail.end) {
    fail(ErrorCode::kInvalidSpan, "head and tail share the span [" + std::to_string(inst.head.start) + ", " +
                                      std::to_string(inst.head.end) + ")");
  }
}

std::vector<int> piece_segments(const Instance& inst, std::size_t length) {
  const EntityMention* first = &inst.head;
  const EntityMention* second = &inst.tail;
  if (second->start < first->start || (second->start == first->start && second->end < first->end)) {
    std::swap(first, second);
  }
  const std::size_t b1 = std::min(first->end, length);
  const std::size_t b2 = std::min(std::max(first->end, second->end), length);
  std::vector<int> seg(length);
  for (std::size_t i = 0; i < length; ++i) seg[i] = i < b1 ? 1 : (i < b2 ? 2 : 3);
  return seg;
}

EncodedInstance encode_instance(const Instance& inst, const Vocab& vocab, const EncodeOptions& options) {
  validate_instance(inst);
  const std::size_t L = options.max_length;
  if (L == 0) fail(ErrorCode::kConfig, "max_length must be positive");
  if (inst.head.end > L || inst.tail.end > L) {
    fail(ErrorCode::kSpanTruncated, "entity span ends past max_length " + std::to_string(L));
  }
  const std::size_t n = std::min(inst.tokens.size(), L);
  const auto max_pos = static_cast<long>(options.max_pos);
  EncodedInstance e;
  e.length = n;
  e.token_ids.resize(L);
  e.pos1_ids.resize(L);
  e.pos2_ids.resize(L);
  e.attention_mask.assign(L, 0);
  e.segment_ids.assign(L, 0);
  const auto pieces = piece_segments(inst, n);
  for (std::size_t i = 0; i < L; ++i) {
    const bool real = i < n;
    e.token_ids[i] = real ? vocab.id(normalize_token(inst.tokens[i])) : Vocab::kPad;
    const long i_l = static_cast<long>(i);
    e.pos1_ids[i] = static_cast<std::size_t>(std::clamp(i_l - static_cast<long>(inst.head.start), -max_pos, max_pos) + max_pos);
    e.pos2_ids[i] = static_cast<std::size_t>(std::clamp(i_l - static_cast<long>(inst.tail.start), -max_pos, max_pos) + max_pos);
    if (real) {
      e.attention_mask[i] = 1;
      e.segment_ids[i] = pieces[i];
    }
  }
  return e;
}

// ---- subwords ------------------------------------------------------------------------

const std::vector<std::string>& SubwordVocab::special_tokens() {
  static const std::vector<std::string> kSpecials = {"[PAD]",  "[UNK]",   "[CLS]",  "[SEP]",
                                                     "[HEAD]", "[/HEAD]", "[TAIL]", "[/TAIL]"};
  return kSpecials;
}

SubwordVocab SubwordVocab::from_pieces(const std::vector<std::string>& pieces) {
  SubwordVocab v;
  auto push = [&v](const std::string& p) {
    if (v.index_.count(p)) return;
    v.index_.emplace(p, v.pieces_.size());
    v.pieces_.push_back(p);
  };
  for (const auto& s : special_tokens()) push(s);
  for (const auto& p : pieces) push(p);
  return v;
}

SubwordVocab SubwordVocab::from_corpus(const std::vector<std::string>& words, std::size_t min_count) {
  std::set<std::string> pieces;
  std::map<std::string, std::size_t> counts;
  for (const auto& w : words) {
    const std::string norm = normalize_token(w);
    for (char32_t cp : utf8_decode(norm)) {
      if (is_space(cp)) continue;
      const std::string c = utf8_encode(cp);
      pieces.insert(c);
      pieces.insert(std::string(kContinuation) + c);
    }
    ++counts[norm];
  }
  for (const auto& [w, n] : counts) {
    if (n >= min_count && !w.empty()) pieces.insert(w);
  }
  return from_pieces(std::vector<std::string>(pieces.begin(), pieces.end()));
}

std::size_t SubwordVocab::id(std::string_view piece) const {
  auto it = index_.find(std::string(piece));
  return it == index_.end() ? unk() : it->second;
}

bool SubwordVocab::contains(std::string_view piece) const { return index_.count(std::string(piece)) > 0; }

namespace {

constexpr std::size_t kMaxWordChars = 200;

void wordpiece_word(const std::string& raw, const SubwordVocab& vocab, std::vector<std::string>& out) {
  for (const auto& s : SubwordVocab::special_tokens()) {
    if (raw == s) {
      out.push_back(raw);
      return;
    }
  }
  const std::string word = normalize_token(raw);
  const auto offsets = utf8_offsets(word);
  const std::size_t n = offsets.size() - 1;
  if (n > kMaxWordChars) {
    out.emplace_back("[UNK]");
    return;
  }
  std::vector<std::string> pieces;
  std::size_t start = 0;
  while (start < n) {
    std::size_t end = n;
    std::string match;
    while (end > start) {
      std::string cand = word.substr(offsets[start], offsets[end] - offsets[start]);
      if (start > 0) cand = std::string(SubwordVocab::kContinuation) + cand;
      if (vocab.contains(cand)) {
        match = std::move(cand);
        break;
      }
      --end;
    }
    if (match.empty()) {
      out.emplace_back("[UNK]");
      return;
    }
    pieces.push_back(std::move(match));
    start = end;
  }
  out.insert(out.end(), pieces.begin(), pieces.end());
}

}  // namespace

std::vector<std::string> wordpiece_tokenize(std::string_view text, const SubwordVocab& vocab) {
  std::vector<std::string> out;
  std::string current;
  for (std::size_t i = 0; i <= text.size(); ++i) {
    const bool boundary = i == text.size() || is_space(static_cast<unsigned char>(text[i]));
    if (!boundary) {
      current += text[i];
    } else if (!current.empty()) {
      wordpiece_word(current, vocab, out);
      current.clear();
    }
  }
  return out;
}

MarkedSequence insert_entity_markers(const Instance& inst, const SubwordVocab& vocab) {
  validate_instance(inst);
  if (inst.head.start < inst.tail.end && inst.tail.start < inst.head.end) {
    fail(ErrorCode::kInvalidSpan, "head and tail spans overlap");
  }
  MarkedSequence seq;
  seq.ids.push_back(vocab.cls());
  for (std::size_t i = 0; i < inst.tokens.size(); ++i) {
    if (i == inst.head.start) {
      seq.head_marker = seq.ids.size();
      seq.ids.push_back(vocab.head_open());
    }
    if (i == inst.tail.start) {
      seq.tail_marker = seq.ids.size();
      seq.ids.push_back(vocab.tail_open());
    }
    for (const auto& p : wordpiece_tokenize(inst.tokens[i], vocab)) seq.ids.push_back(vocab.id(p));
    if (i + 1 == inst.head.end) seq.ids.push_back(vocab.head_close());
    if (i + 1 == inst.tail.end) seq.ids.push_back(vocab.tail_close());
  }
  seq.ids.push_back(vocab.sep());
  return seq;
}

}  // namespace nre
