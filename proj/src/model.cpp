#include "nre/model.hpp"

#include <cmath>

#include "nre/error.hpp"

namespace nre {

RelationClassifier::RelationClassifier(std::size_t relations, std::size_t dim, Rng& rng) {
  weight = xavier_uniform(relations, dim, rng);
  bias = Tensor::zeros({relations}, true);
}

Tensor RelationClassifier::logits(const Tensor& reps) const {
  if (reps.rank() != 2 || reps.cols() != dim()) {
    fail(ErrorCode::kDimension, "classifier expects [n x " + std::to_string(dim()) + "], got " +
                                    shape_string(reps.shape()));
  }
  return add_bias(matmul(reps, transpose(weight)), bias);
}

std::vector<double> classify_softmax(const Tensor& rep, const RelationClassifier& classifier) {
  NoGradGuard guard;
  if (rep.numel() != classifier.dim()) {
    fail(ErrorCode::kDimension, "representation of size " + std::to_string(rep.numel()) + " for classifier width " +
                                    std::to_string(classifier.dim()));
  }
  Tensor probs = softmax_rows(classifier.logits(reshape(rep, {1, rep.numel()})));
  return {probs.data().begin(), probs.data().end()};
}

// ---- bags ---------------------------------------------------------------------------

void BagBatch::validate() const {
  if (scopes.empty()) fail(ErrorCode::kContract, "bag batch without bags");
  if (labels.size() != scopes.size()) fail(ErrorCode::kContract, "one label per bag required");
  std::size_t next = 0;
  for (const auto& [b, e] : scopes) {
    if (b != next || e <= b) fail(ErrorCode::kContract, "bag scopes must partition the instance list");
    next = e;
  }
  if (next != instances.size()) fail(ErrorCode::kContract, "bag scopes do not cover every instance");
}

namespace {

void check_scopes(std::span<const BagScope> scopes, const Tensor& reps) {
  if (scopes.empty()) fail(ErrorCode::kContract, "no bags");
  std::size_t next = 0;
  for (const auto& [b, e] : scopes) {
    if (e <= b) fail(ErrorCode::kContract, "empty bag");
    if (b != next) fail(ErrorCode::kContract, "bag scopes must partition the representation rows");
    next = e;
  }
  if (next != reps.rows()) fail(ErrorCode::kContract, "bag scopes do not cover every representation row");
}

}  // namespace

BagAggregation bag_attention_aggregate(std::span<const BagScope> scopes, const Tensor& reps,
                                       std::span<const std::size_t> queries, const RelationClassifier& classifier) {
  check_scopes(scopes, reps);
  if (queries.size() != scopes.size()) fail(ErrorCode::kContract, "one attention query per bag required");
  if (reps.cols() != classifier.dim()) fail(ErrorCode::kDimension, "representation width differs from classifier");
  BagAggregation out;
  std::vector<Tensor> rows;
  for (std::size_t k = 0; k < scopes.size(); ++k) {
    const auto [b, e] = scopes[k];
    Tensor bag = slice_rows(reps, b, e);
    const std::size_t q = queries[k];
    Tensor query = embedding_gather(classifier.weight, std::span<const std::size_t>(&q, 1));
    Tensor scores = reshape(matmul(bag, transpose(query)), {1, e - b});
    Tensor alpha = softmax_rows(scores);
    rows.push_back(matmul(alpha, bag));
    out.weights.emplace_back(alpha.data().begin(), alpha.data().end());
  }
  out.bag_reps = rows.size() == 1 ? rows.front() : concat(rows, 0);
  return out;
}

Tensor bag_average_aggregate(std::span<const BagScope> scopes, const Tensor& reps) {
  check_scopes(scopes, reps);
  std::vector<Tensor> rows;
  for (const auto& [b, e] : scopes) {
    const std::size_t n = e - b;
    Tensor weights = Tensor::full({1, n}, 1.0 / static_cast<double>(n));
    rows.push_back(matmul(weights, slice_rows(reps, b, e)));
  }
  return rows.size() == 1 ? rows.front() : concat(rows, 0);
}

Tensor bag_attention_scores(std::span<const BagScope> scopes, const Tensor& reps,
                            const RelationClassifier& classifier) {
  NoGradGuard guard;
  check_scopes(scopes, reps);
  const std::size_t R = classifier.relations();
  std::vector<double> out;
  out.reserve(scopes.size() * R);
  Tensor queries_t = transpose(classifier.weight);
  for (const auto& [b, e] : scopes) {
    Tensor bag = slice_rows(reps, b, e);
    // Column r of bag * M^T holds the scores under query r.
    Tensor alpha = softmax_rows(transpose(matmul(bag, queries_t)));  // [R x n]
    Tensor probs = softmax_rows(classifier.logits(matmul(alpha, bag)));  // [R x R]
    for (std::size_t r = 0; r < R; ++r) out.push_back(probs.at(r, r));
  }
  return Tensor::from_vector({scopes.size(), R}, std::move(out));
}

std::vector<double> adversarial_perturbation(std::span<const double> grad, double epsilon) {
  double sq = 0.0;
  for (double g : grad) sq += g * g;
  const double denom = std::max(std::sqrt(sq), 1e-12);
  std::vector<double> v(grad.size());
  for (std::size_t i = 0; i < grad.size(); ++i) v[i] = epsilon * grad[i] / denom;
  return v;
}

Tensor adversarial_perturbation(const Tensor& grad, double epsilon) {
  return Tensor::from_vector(grad.shape(), adversarial_perturbation(grad.data(), epsilon));
}

// ---- enums ------------------------------------------------------------------------------

Mode parse_mode(const std::string& name) {
  if (name == "sentence") return Mode::kSentence;
  if (name == "bag") return Mode::kBag;
  if (name == "fewshot") return Mode::kFewshot;
  fail(ErrorCode::kConfig, "unknown mode '" + name + "'");
}

std::string mode_name(Mode mode) {
  switch (mode) {
    case Mode::kSentence:
      return "sentence";
    case Mode::kBag:
      return "bag";
    case Mode::kFewshot:
      return "fewshot";
  }
  return "unknown";
}

Aggregator parse_aggregator(const std::string& name) {
  if (name == "none") return Aggregator::kNone;
  if (name == "att") return Aggregator::kAttention;
  if (name == "avg") return Aggregator::kAverage;
  fail(ErrorCode::kConfig, "unknown aggregator '" + name + "'");
}

std::string aggregator_name(Aggregator aggregator) {
  switch (aggregator) {
    case Aggregator::kNone:
      return "none";
    case Aggregator::kAttention:
      return "att";
    case Aggregator::kAverage:
      return "avg";
  }
  return "unknown";
}

nlohmann::json ModelArchitecture::to_json() const {
  return {{"mode", mode_name(mode)},
          {"encoder", encoder},
          {"aggregator", aggregator_name(aggregator)},
          {"dropout", dropout},
          {"max_length", max_length}};
}

ModelArchitecture ModelArchitecture::from_json(const nlohmann::json& j) {
  ModelArchitecture a;
  a.mode = parse_mode(j.at("mode").get<std::string>());
  a.encoder = j.at("encoder");
  a.aggregator = parse_aggregator(j.value("aggregator", std::string("none")));
  a.dropout = j.value("dropout", 0.0);
  a.max_length = j.value("max_length", a.max_length);
  return a;
}

// ---- RelationModel ---------------------------------------------------------------------

RelationModel::RelationModel(ModelArchitecture arch, Vocab vocab, SubwordVocab subwords, RelationMap relations,
                             Rng& rng)
    : arch_(std::move(arch)), vocab_(std::move(vocab)), subwords_(std::move(subwords)), relations_(std::move(relations)) {
  const EncoderKind kind = parse_encoder_kind(arch_.encoder.at("kind").get<std::string>());
  arch_.encoder["vocab_size"] = kind == EncoderKind::kTransformer ? subwords_.size() : vocab_.size();
  if (kind == EncoderKind::kTransformer && subwords_.size() == 0) {
    fail(ErrorCode::kConfig, "transformer encoder needs a subword vocabulary");
  }
  if (arch_.mode == Mode::kBag && arch_.aggregator == Aggregator::kNone) {
    fail(ErrorCode::kConfig, "bag mode needs an aggregator (att or avg)");
  }
  encoder_ = make_encoder(arch_.encoder, rng);
  arch_.encoder = encoder_->describe();
  if (arch_.mode != Mode::kFewshot) classifier_ = RelationClassifier(relations_.size(), encoder_->output_dim(), rng);
}

std::vector<std::string> RelationModel::vocab_tokens() const {
  return uses_subwords() ? subwords_.pieces() : vocab_.tokens();
}

ModelInput RelationModel::prepare(const Instance& inst) const {
  ModelInput in;
  if (uses_subwords()) {
    in.marked = insert_entity_markers(inst, subwords_);
    const std::size_t limit = arch_.encoder.at("max_positions").get<std::size_t>();
    if (in.marked.ids.size() > limit) {
      fail(ErrorCode::kSpanTruncated, "marked sequence of " + std::to_string(in.marked.ids.size()) +
                                          " pieces exceeds " + std::to_string(limit) + " positions");
    }
  } else {
    EncodeOptions opts;
    opts.max_length = arch_.max_length;
    opts.max_pos = arch_.encoder.at("max_pos").get<std::size_t>();
    in.words = encode_instance(inst, vocab_, opts);
  }
  return in;
}

std::vector<NamedParameter> RelationModel::parameters() const {
  auto params = encoder_->parameters();
  if (classifier_.weight.defined()) {
    params.push_back({"classifier.weight", classifier_.weight});
    params.push_back({"classifier.bias", classifier_.bias});
  }
  return params;
}

std::vector<Tensor> RelationModel::trainable() const {
  std::vector<Tensor> out;
  for (auto& p : parameters()) out.push_back(p.tensor);
  return out;
}

EncoderOutput RelationModel::encode(std::span<const ModelInput* const> batch, const ForwardContext& ctx) const {
  EncoderOutput out = encoder_->forward(batch, ctx);
  if (ctx.training && arch_.dropout > 0.0) {
    if (!ctx.rng) fail(ErrorCode::kContract, "training forward needs a random source for dropout");
    out.reps = dropout(out.reps, arch_.dropout, *ctx.rng, true);
  }
  return out;
}

EncoderOutput RelationModel::sentence_forward(std::span<const ModelInput* const> batch, const ForwardContext& ctx,
                                              Tensor& logits) const {
  if (!classifier_.weight.defined()) fail(ErrorCode::kConfig, "model has no classifier head");
  EncoderOutput out = encode(batch, ctx);
  logits = classifier_.logits(out.reps);
  return out;
}

std::vector<std::vector<double>> RelationModel::predict_proba(std::span<const ModelInput* const> batch) const {
  NoGradGuard guard;
  Tensor logits;
  sentence_forward(batch, {}, logits);
  Tensor probs = softmax_rows(logits);
  std::vector<std::vector<double>> out(probs.rows());
  for (std::size_t i = 0; i < probs.rows(); ++i) {
    auto row = probs.data().subspan(i * probs.cols(), probs.cols());
    out[i].assign(row.begin(), row.end());
  }
  return out;
}

BagForward RelationModel::bag_forward(const BagBatch& batch, const ForwardContext& ctx) const {
  batch.validate();
  // Dropout goes on the bag representation, not on instances.
  ForwardContext enc_ctx = ctx;
  enc_ctx.training = false;
  EncoderOutput enc = encoder_->forward(batch.instances, enc_ctx);
  BagForward out;
  out.word_embeddings = enc.word_embeddings;
  Tensor bag_reps;
  if (arch_.aggregator == Aggregator::kAttention) {
    auto agg = bag_attention_aggregate(batch.scopes, enc.reps, batch.labels, classifier_);
    bag_reps = agg.bag_reps;
    out.weights = std::move(agg.weights);
  } else {
    bag_reps = bag_average_aggregate(batch.scopes, enc.reps);
  }
  if (ctx.training && arch_.dropout > 0.0) {
    if (!ctx.rng) fail(ErrorCode::kContract, "training forward needs a random source for dropout");
    bag_reps = dropout(bag_reps, arch_.dropout, *ctx.rng, true);
  }
  out.logits = classifier_.logits(bag_reps);
  return out;
}

Tensor RelationModel::bag_scores(const BagBatch& batch) const {
  NoGradGuard guard;
  batch.validate();
  Tensor reps = encoder_->forward(batch.instances, {}).reps;
  if (arch_.aggregator == Aggregator::kAttention) return bag_attention_scores(batch.scopes, reps, classifier_);
  return softmax_rows(classifier_.logits(bag_average_aggregate(batch.scopes, reps)));
}

std::vector<std::vector<double>> RelationModel::snapshot() const {
  std::vector<std::vector<double>> out;
  for (const auto& p : parameters()) out.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
  return out;
}

void RelationModel::restore(const std::vector<std::vector<double>>& values) {
  auto params = parameters();
  if (values.size() != params.size()) fail(ErrorCode::kContract, "snapshot does not match the model");
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto dst = params[i].tensor.mutable_data();
    if (dst.size() != values[i].size()) fail(ErrorCode::kContract, "snapshot does not match the model");
    std::copy(values[i].begin(), values[i].end(), dst.begin());
  }
}

Checkpoint RelationModel::to_checkpoint() const {
  Checkpoint ckpt;
  const auto tokens = vocab_tokens();
  ckpt.metadata = {{"architecture", arch_.to_json()},
                   {"vocab", tokens},
                   {"vocab_kind", uses_subwords() ? "subword" : "word"},
                   {"vocab_hash", hash_hex(token_list_hash(tokens))},
                   {"relations", relations_.to_json()},
                   {"na_name", relations_.na_name()}};
  for (const auto& p : parameters()) {
    ParameterBlock b;
    b.name = p.name;
    b.shape = p.tensor.shape();
    b.values.reserve(p.tensor.numel());
    for (double v : p.tensor.data()) b.values.push_back(static_cast<float>(v));
    ckpt.blocks.push_back(std::move(b));
  }
  return ckpt;
}

RelationModel RelationModel::from_checkpoint(const Checkpoint& ckpt) {
  const auto& meta = ckpt.metadata;
  try {
    const auto arch = ModelArchitecture::from_json(meta.at("architecture"));
    const auto tokens = meta.at("vocab").get<std::vector<std::string>>();
    const bool subword = meta.value("vocab_kind", std::string("word")) == "subword";
    const RelationMap relations =
        RelationMap::from_json(meta.at("relations"), meta.value("na_name", std::string("NA")));
    Rng rng(0);
    RelationModel model(arch, subword ? Vocab() : Vocab::from_tokens(tokens),
                        subword ? SubwordVocab::from_pieces(tokens) : SubwordVocab(), relations, rng);
    for (auto& p : model.parameters()) {
      const ParameterBlock& b = ckpt.block(p.name);
      if (b.shape != p.tensor.shape()) {
        fail(ErrorCode::kFormat, "block '" + p.name + "' has shape " + shape_string(b.shape) + ", model expects " +
                                     shape_string(p.tensor.shape()));
      }
      auto dst = p.tensor.mutable_data();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<double>(b.values[i]);
    }
    return model;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kFormat, std::string("checkpoint metadata: ") + e.what());
  }
}

void save_checkpoint(const RelationModel& model, const std::string& path) { write_checkpoint(model.to_checkpoint(), path); }

RelationModel load_checkpoint(const std::string& path) { return RelationModel::from_checkpoint(read_checkpoint(path)); }

RelationModel load_checkpoint(const std::string& path, const std::vector<std::string>& expected_vocab) {
  return RelationModel::from_checkpoint(read_checkpoint(path, expected_vocab));
}

}  // namespace nre
