#include "nre/service.hpp"

#include <algorithm>
#include <numeric>
#include <set>

#include "httplib.h"
#include "nre/data.hpp"
#include "nre/error.hpp"
#include "nre/fewshot.hpp"
#include "nre/tokenize.hpp"

namespace nre {

using nlohmann::json;

// ---- requests ----------------------------------------------------------------

namespace {

TextSpan span_from_json(const json& j, const char* field) {
  TextSpan s;
  const json* pos = &j;
  if (j.is_object()) {
    if (!j.contains("pos")) fail(ErrorCode::kInvalidSpan, std::string(field) + " needs \"pos\"");
    pos = &j.at("pos");
    if (j.contains("id")) s.id = j.at("id").get<std::string>();
  }
  const auto offset = [](const json& v) { return v.is_number_integer() && v.get<long long>() >= 0; };
  if (!pos->is_array() || pos->size() != 2 || !offset((*pos)[0]) || !offset((*pos)[1])) {
    fail(ErrorCode::kInvalidSpan, std::string(field) + " span must be [begin, end] with non-negative integers");
  }
  s.begin = (*pos)[0].get<std::size_t>();
  s.end = (*pos)[1].get<std::size_t>();
  return s;
}

json span_to_json(const TextSpan& s) {
  json j = {{"pos", {s.begin, s.end}}};
  if (!s.id.empty()) j["id"] = s.id;
  return j;
}

json mention_to_json(const Mention& m) {
  json j = span_to_json(m.span);
  j["name"] = m.name;
  return j;
}

}  // namespace

ExtractionRequest ExtractionRequest::from_json(const json& j) {
  if (!j.is_object()) fail(ErrorCode::kFormat, "request must be an object");
  ExtractionRequest r;
  try {
    if (!j.contains("text") || !j.at("text").is_string()) fail(ErrorCode::kFormat, "request needs a \"text\" string");
    r.text = j.at("text").get<std::string>();
    if (j.contains("h") && !j.at("h").is_null()) r.head = span_from_json(j.at("h"), "h");
    if (j.contains("t") && !j.at("t").is_null()) r.tail = span_from_json(j.at("t"), "t");
    if (j.contains("top_k")) {
      if (!j.at("top_k").is_number_integer() || j.at("top_k").get<long long>() < 1) {
        fail(ErrorCode::kFormat, "top_k must be an integer >= 1");
      }
      r.top_k = j.at("top_k").get<std::size_t>();
    }
  } catch (const json::exception& e) {
    fail(ErrorCode::kFormat, e.what());
  }
  r.validate();
  return r;
}

json ExtractionRequest::to_json() const {
  json j = {{"text", text}, {"top_k", top_k}};
  if (head) j["h"] = span_to_json(*head);
  if (tail) j["t"] = span_to_json(*tail);
  return j;
}

void ExtractionRequest::validate() const {
  if (top_k < 1) fail(ErrorCode::kFormat, "top_k must be >= 1");
  if (head.has_value() != tail.has_value()) fail(ErrorCode::kInvalidSpan, "give both h and t spans or neither");
  if (!head) return;
  const std::size_t length = utf8_length(text);
  for (const TextSpan* s : {&*head, &*tail}) {
    if (s->begin >= s->end) fail(ErrorCode::kInvalidSpan, "span must be non-empty");
    if (s->end > length) {
      fail(ErrorCode::kInvalidSpan, "span [" + std::to_string(s->begin) + ", " + std::to_string(s->end) +
                                        ") exceeds text length " + std::to_string(length));
    }
  }
  if (head->begin < tail->end && tail->begin < head->end) fail(ErrorCode::kInvalidSpan, "h and t spans overlap");
}

json ExtractionResult::to_json() const {
  json results = json::array();
  for (const auto& f : facts) {
    results.push_back(
        {{"head", mention_to_json(f.head)}, {"tail", mention_to_json(f.tail)}, {"relation", f.relation}, {"score", f.score}});
  }
  return {{"results", results}};
}

// ---- mentions ------------------------------------------------------------------

namespace {

bool capitalized(const std::string& raw) { return !raw.empty() && raw[0] >= 'A' && raw[0] <= 'Z'; }

const std::set<std::string>& stopwords() {
  static const std::set<std::string> words = {
      "a",   "an",  "the",  "this", "that", "these", "those", "it",    "its",  "he",  "she",   "they",
      "we",  "i",   "you",  "his",  "her",  "their", "our",   "my",    "in",   "on",  "at",    "of",
      "for", "to",  "from", "by",   "with", "and",   "but",   "or",    "if",   "when", "while", "after",
      "before", "as", "there", "here", "what", "which", "who", "where", "how",  "is",  "was",   "are"};
  return words;
}

bool sentence_end(const std::string& raw) { return raw == "." || raw == "!" || raw == "?"; }

}  // namespace

std::vector<Mention> detect_mentions(std::string_view text) {
  const auto tokens = word_tokenize_with_offsets(text);
  std::vector<Mention> out;
  std::size_t i = 0;
  while (i < tokens.size()) {
    if (!capitalized(tokens[i].raw)) {
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j < tokens.size() && capitalized(tokens[j].raw)) ++j;
    const bool sentence_initial = i == 0 || sentence_end(tokens[i - 1].raw);
    const bool lone_stopword = j - i == 1 && sentence_initial && stopwords().count(tokens[i].text);
    if (!lone_stopword) {
      Mention m;
      m.span = {tokens[i].begin, tokens[j - 1].end, {}};
      m.name = utf8_slice(text, m.span.begin, m.span.end);
      out.push_back(std::move(m));
    }
    i = j;
  }
  return out;
}

// ---- extractor ----------------------------------------------------------------

Extractor::Extractor(std::shared_ptr<const RelationModel> model) : model_(std::move(model)) {
  if (!model_) fail(ErrorCode::kModelNotLoaded, "no model");
  if (model_->architecture().mode != Mode::kSentence) {
    fail(ErrorCode::kConfig, "the service serves sentence-level models only");
  }
}

std::vector<double> Extractor::classify(const std::string& text, const TextSpan& head, const TextSpan& tail) const {
  const auto tokens = word_tokenize_with_offsets(text);
  Instance inst;
  for (const auto& t : tokens) inst.tokens.push_back(t.text);
  const auto [hs, he] = char_span_to_tokens(tokens, head.begin, head.end);
  const auto [ts, te] = char_span_to_tokens(tokens, tail.begin, tail.end);
  inst.head = {utf8_slice(text, head.begin, head.end), head.id, hs, he};
  inst.tail = {utf8_slice(text, tail.begin, tail.end), tail.id, ts, te};
  validate_instance(inst);
  const ModelInput input = model_->prepare(inst);
  const ModelInput* ptr = &input;
  return model_->predict_proba(std::span<const ModelInput* const>(&ptr, 1)).front();
}

ExtractionResult Extractor::extract(const ExtractionRequest& request) const {
  request.validate();
  const RelationMap& relations = model_->relations();
  ExtractionResult result;
  auto add_pair = [&](const Mention& h, const Mention& t, bool suppress_na) {
    const auto probs = classify(request.text, h.span, t.span);
    std::vector<std::size_t> order(probs.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return probs[a] > probs[b]; });
    if (suppress_na && order.front() == RelationMap::kNa) return;
    const std::size_t k = std::min(request.top_k, order.size());
    for (std::size_t i = 0; i < k; ++i) result.facts.push_back({h, t, relations.name(order[i]), probs[order[i]]});
  };
  if (request.head) {
    const auto mention = [&](const TextSpan& s) { return Mention{utf8_slice(request.text, s.begin, s.end), s}; };
    add_pair(mention(*request.head), mention(*request.tail), false);
    return result;
  }
  const auto mentions = detect_mentions(request.text);
  for (std::size_t a = 0; a < mentions.size(); ++a)
    for (std::size_t b = 0; b < mentions.size(); ++b)
      if (a != b) add_pair(mentions[a], mentions[b], true);
  return result;
}

json Extractor::health() const { return {{"status", "ok"}, {"model", model_->architecture().to_json().dump()}}; }

// ---- HTTP -----------------------------------------------------------------------

namespace {

void send_error(httplib::Response& res, int status, const std::string& code, const std::string& message) {
  res.status = status;
  res.set_content(json{{"error", message}, {"code", code}}.dump(), "application/json");
}

}  // namespace

Service::Service(std::shared_ptr<const RelationModel> model, std::string static_dir)
    : server_(std::make_unique<httplib::Server>()) {
  if (model) extractor_ = std::make_unique<Extractor>(std::move(model));
  server_->Get("/health", [this](const httplib::Request&, httplib::Response& res) {
    if (!extractor_) {
      res.status = 503;
      res.set_content(json{{"status", "unavailable"}, {"model", nullptr}}.dump(), "application/json");
      return;
    }
    res.set_content(extractor_->health().dump(), "application/json");
  });
  server_->Post("/extract", [this](const httplib::Request& req, httplib::Response& res) {
    if (!extractor_) return send_error(res, 503, error_code_name(ErrorCode::kModelNotLoaded), "no model loaded");
    try {
      const json body = json::parse(req.body);
      const ExtractionRequest request = ExtractionRequest::from_json(body);
      res.set_content(extractor_->extract(request).to_json().dump(), "application/json");
    } catch (const json::exception& e) {
      send_error(res, 400, error_code_name(ErrorCode::kFormat), e.what());
    } catch (const Error& e) {
      switch (e.code()) {
        case ErrorCode::kInvalidSpan:
        case ErrorCode::kFormat:
        case ErrorCode::kSpanTruncated:
          send_error(res, 400, error_code_name(e.code()), e.what());
          break;
        default:
          send_error(res, 500, error_code_name(e.code()), e.what());
      }
    }
  });
  if (!static_dir.empty() && !server_->set_mount_point("/", static_dir)) {
    fail(ErrorCode::kIo, "static directory not found: " + static_dir);
  }
}

Service::~Service() { stop(); }

int Service::bind(const std::string& host, int port) {
  if (port == 0) return server_->bind_to_any_port(host);
  if (!server_->bind_to_port(host, port)) fail(ErrorCode::kIo, "cannot bind " + host + ":" + std::to_string(port));
  return port;
}

bool Service::listen() { return server_->listen_after_bind(); }

void Service::wait_until_ready() const { server_->wait_until_ready(); }

void Service::stop() {
  if (server_ && server_->is_running()) server_->stop();
}

}  // namespace nre
