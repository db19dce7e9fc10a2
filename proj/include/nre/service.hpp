#pragma once

#include <cstddef>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "nre/model.hpp"

namespace httplib {
class Server;
}

namespace nre {

// Code point span [begin, end) with an optional knowledge-base id that is
// echoed back untouched.
struct TextSpan {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::string id;

  bool operator==(const TextSpan&) const = default;
};

struct ExtractionRequest {
  std::string text;
  std::optional<TextSpan> head;
  std::optional<TextSpan> tail;
  std::size_t top_k = 1;

  // {"text": s, "h": {"pos": [a, b], "id": s} | [a, b], "t": ..., "top_k": n}
  static ExtractionRequest from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
  // Both spans or neither; in bounds; non-empty; non-overlapping.
  void validate() const;
};

struct Mention {
  std::string name;  // the text slice
  TextSpan span;
};

struct ExtractedFact {
  Mention head;
  Mention tail;
  std::string relation;
  double score = 0.0;
};

struct ExtractionResult {
  std::vector<ExtractedFact> facts;

  // {"results": [{"head": {"name", "pos", "id"?}, "tail": ..., "relation", "score"}]}
  nlohmann::json to_json() const;
};

// Maximal runs of capitalized tokens. A run made of a single stopword at
// the start of a sentence is dropped.
std::vector<Mention> detect_mentions(std::string_view text);

// Inference over one immutable sentence-level model; safe to share across
// threads.
class Extractor {
 public:
  explicit Extractor(std::shared_ptr<const RelationModel> model);

  ExtractionResult extract(const ExtractionRequest& request) const;
  // Probabilities for one head/tail pair, in relation id order.
  std::vector<double> classify(const std::string& text, const TextSpan& head, const TextSpan& tail) const;
  nlohmann::json health() const;
  const RelationModel& model() const { return *model_; }

 private:
  std::shared_ptr<const RelationModel> model_;
};

// HTTP front end: POST /extract, GET /health and, optionally, static files.
class Service {
 public:
  // A null model makes /extract answer 503.
  Service(std::shared_ptr<const RelationModel> model, std::string static_dir = {});
  ~Service();

  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  // Binds to `port` (0 picks a free one) and returns the bound port.
  int bind(const std::string& host, int port);
  // Blocks until stop().
  bool listen();
  void wait_until_ready() const;
  void stop();

 private:
  std::unique_ptr<Extractor> extractor_;
  std::unique_ptr<httplib::Server> server_;
};

}  // namespace nre
