#include "nre/framework.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <ostream>

#include "nre/error.hpp"

namespace nre {

using nlohmann::json;

// ---- configuration ----------------------------------------------------------------

EncoderKind TrainConfig::encoder_kind() const { return parse_encoder_kind(encoder.at("kind").get<std::string>()); }

void TrainConfig::validate() const {
  const EncoderKind kind = encoder_kind();
  if (mode == Mode::kBag && aggregator == Aggregator::kNone) fail(ErrorCode::kConfig, "bag mode needs an aggregator");
  if (mode != Mode::kBag && aggregator != Aggregator::kNone) {
    fail(ErrorCode::kConfig, "aggregator is only valid in bag mode");
  }
  const bool episodic = n > 0 || k > 0 || q > 0;
  if (mode == Mode::kFewshot && (n == 0 || k == 0 || q == 0)) fail(ErrorCode::kConfig, "fewshot mode needs n, k and q");
  if (mode != Mode::kFewshot && episodic) fail(ErrorCode::kConfig, "n, k and q are only valid in fewshot mode");
  if (adversarial_epsilon) {
    if (mode == Mode::kFewshot) fail(ErrorCode::kConfig, "adversarial training is not available in fewshot mode");
    if (kind == EncoderKind::kTransformer) fail(ErrorCode::kConfig, "adversarial training needs a word-level encoder");
    if (!(*adversarial_epsilon > 0.0)) fail(ErrorCode::kConfig, "adversarial epsilon must be positive");
  }
  if (batch_size == 0) fail(ErrorCode::kConfig, "batch_size must be positive");
  if (max_epochs == 0) fail(ErrorCode::kConfig, "max_epochs must be positive");
  if (!(lr > 0.0)) fail(ErrorCode::kConfig, "lr must be positive");
  if (weight_decay < 0.0) fail(ErrorCode::kConfig, "weight_decay must be non-negative");
  if (dropout < 0.0 || dropout >= 1.0) fail(ErrorCode::kConfig, "dropout must lie in [0, 1)");
  if (mode == Mode::kFewshot && (episodes_per_epoch == 0 || eval_episodes == 0)) {
    fail(ErrorCode::kConfig, "episode counts must be positive");
  }
}

json TrainConfig::to_json() const {
  json j = {{"mode", mode_name(mode)},
            {"encoder", encoder},
            {"optimizer", optimizer_kind_name(optimizer)},
            {"lr", lr},
            {"weight_decay", weight_decay},
            {"batch_size", batch_size},
            {"max_epochs", max_epochs},
            {"patience", patience},
            {"dropout", dropout},
            {"seed", seed},
            {"max_length", max_length},
            {"min_count", min_count},
            {"na_name", na_name}};
  if (aggregator != Aggregator::kNone) j["aggregator"] = aggregator_name(aggregator);
  if (adversarial_epsilon) j["adversarial_epsilon"] = *adversarial_epsilon;
  if (mode == Mode::kFewshot) {
    j["n"] = n;
    j["k"] = k;
    j["q"] = q;
    j["episodes_per_epoch"] = episodes_per_epoch;
    j["eval_episodes"] = eval_episodes;
  }
  const std::pair<const char*, const std::string*> paths[] = {
      {"train", &train_path},           {"val", &val_path},       {"relations", &relations_path},
      {"embeddings", &embeddings_path}, {"output", &output_path}, {"log", &log_path}};
  for (const auto& [key, value] : paths)
    if (!value->empty()) j[key] = *value;
  return j;
}

TrainConfig TrainConfig::from_json(const json& j) {
  if (!j.is_object()) fail(ErrorCode::kConfig, "config must be an object");
  static const std::set<std::string> known = {
      "mode",       "encoder",   "aggregator", "optimizer",          "lr",            "weight_decay",
      "batch_size", "max_epochs", "patience",  "dropout",            "adversarial_epsilon", "seed",
      "max_length", "min_count",  "na_name",   "n",                  "k",             "q",
      "episodes_per_epoch",       "eval_episodes", "train",          "val",           "relations",
      "embeddings", "output",    "log"};
  for (const auto& [key, value] : j.items()) {
    if (!known.count(key)) fail(ErrorCode::kConfig, "unknown config field '" + key + "'");
  }
  if (!j.contains("seed")) fail(ErrorCode::kConfig, "config needs a seed");
  TrainConfig c;
  try {
    c.mode = parse_mode(j.value("mode", std::string("sentence")));
    if (j.contains("encoder")) {
      c.encoder = j.at("encoder").is_string() ? json{{"kind", j.at("encoder")}} : j.at("encoder");
    }
    if (!c.encoder.is_object() || !c.encoder.contains("kind")) fail(ErrorCode::kConfig, "encoder needs a kind");
    const bool transformer = c.encoder_kind() == EncoderKind::kTransformer;
    if (transformer) {
      c.optimizer = OptimizerKind::kAdam;
      c.lr = 1e-3;
      c.weight_decay = 0.0;
      c.batch_size = 16;
      c.dropout = 0.1;
    }
    if (j.contains("aggregator")) c.aggregator = parse_aggregator(j.at("aggregator").get<std::string>());
    if (j.contains("optimizer")) c.optimizer = parse_optimizer_kind(j.at("optimizer").get<std::string>());
    c.lr = j.value("lr", c.lr);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.max_epochs = j.value("max_epochs", c.max_epochs);
    c.patience = j.value("patience", c.patience);
    c.dropout = j.value("dropout", c.dropout);
    if (j.contains("adversarial_epsilon") && !j.at("adversarial_epsilon").is_null()) {
      c.adversarial_epsilon = j.at("adversarial_epsilon").get<double>();
    }
    c.seed = j.at("seed").get<std::uint64_t>();
    c.max_length = j.value("max_length", c.max_length);
    c.min_count = j.value("min_count", c.min_count);
    c.na_name = j.value("na_name", c.na_name);
    c.n = j.value("n", std::size_t{0});
    c.k = j.value("k", std::size_t{0});
    c.q = j.value("q", std::size_t{0});
    c.episodes_per_epoch = j.value("episodes_per_epoch", c.episodes_per_epoch);
    c.eval_episodes = j.value("eval_episodes", c.eval_episodes);
    c.train_path = j.value("train", std::string());
    c.val_path = j.value("val", std::string());
    c.relations_path = j.value("relations", std::string());
    c.embeddings_path = j.value("embeddings", std::string());
    c.output_path = j.value("output", std::string());
    c.log_path = j.value("log", std::string());
  } catch (const json::exception& e) {
    fail(ErrorCode::kConfig, e.what());
  }
  c.validate();
  return c;
}

void apply_seed_override(TrainConfig& cfg) {
  const char* env = std::getenv("NRE_SEED");
  if (!env || !*env) return;
  char* end = nullptr;
  const unsigned long long v = std::strtoull(env, &end, 10);
  if (*end != '\0') fail(ErrorCode::kConfig, std::string("NRE_SEED is not an integer: ") + env);
  cfg.seed = v;
}

TrainConfig load_train_config(const std::string& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::exception& e) {
    fail(ErrorCode::kConfig, path + ": " + e.what());
  }
  TrainConfig cfg = TrainConfig::from_json(j);
  apply_seed_override(cfg);
  return cfg;
}

// ---- bags -----------------------------------------------------------------------

std::string Bag::key() const {
  std::string k = head_id + '\t' + tail_id;
  if (!relation.empty()) k += '\t' + relation;
  return k;
}

std::vector<Bag> group_into_bags(const std::vector<Instance>& instances, BagKeying keying, const std::string& na_name,
                                 std::span<const std::size_t> line_numbers) {
  std::map<std::string, Bag> bags;
  for (std::size_t i = 0; i < instances.size(); ++i) {
    const Instance& inst = instances[i];
    if (inst.head.id.empty() || inst.tail.id.empty()) {
      const std::size_t line = i < line_numbers.size() ? line_numbers[i] : i + 1;
      fail(ErrorCode::kData, "line " + std::to_string(line) + ": missing entity id");
    }
    Bag proto{inst.head.id, inst.tail.id, keying == BagKeying::kTraining ? inst.relation : std::string(), {}, {}};
    auto [it, inserted] = bags.try_emplace(proto.key(), std::move(proto));
    Bag& bag = it->second;
    bag.members.push_back(i);
    if (keying == BagKeying::kEvaluation && inst.relation != na_name &&
        std::find(bag.gold.begin(), bag.gold.end(), inst.relation) == bag.gold.end()) {
      bag.gold.push_back(inst.relation);
    }
  }
  std::vector<Bag> out;
  out.reserve(bags.size());
  for (auto& [key, bag] : bags) {
    std::sort(bag.gold.begin(), bag.gold.end());
    out.push_back(std::move(bag));
  }
  return out;
}

// ---- metrics --------------------------------------------------------------------

namespace {

void check_lengths(std::span<const std::size_t> preds, std::span<const std::size_t> golds) {
  if (preds.size() != golds.size()) {
    fail(ErrorCode::kMetric, "length mismatch: " + std::to_string(preds.size()) + " predictions, " +
                                 std::to_string(golds.size()) + " gold labels");
  }
  if (preds.empty()) fail(ErrorCode::kMetric, "no predictions");
}

}  // namespace

double evaluate_accuracy(std::span<const std::size_t> preds, std::span<const std::size_t> golds) {
  check_lengths(preds, golds);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) hits += preds[i] == golds[i];
  return static_cast<double>(hits) / static_cast<double>(preds.size());
}

double evaluate_micro_f1(std::span<const std::size_t> preds, std::span<const std::size_t> golds, std::size_t na_id) {
  check_lengths(preds, golds);
  std::size_t tp = 0, predicted = 0, actual = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    predicted += preds[i] != na_id;
    actual += golds[i] != na_id;
    tp += preds[i] == golds[i] && golds[i] != na_id;
  }
  if (tp == 0) return 0.0;
  const double p = static_cast<double>(tp) / static_cast<double>(predicted);
  const double r = static_cast<double>(tp) / static_cast<double>(actual);
  return 2.0 * p * r / (p + r);
}

PrCurve evaluate_pr_auc(std::span<const ScoredFact> facts, const std::set<Fact>& gold, std::size_t na_id) {
  if (gold.empty()) fail(ErrorCode::kMetric, "empty gold fact set");
  std::vector<const ScoredFact*> order;
  for (const auto& f : facts) {
    if (!std::isfinite(f.score)) fail(ErrorCode::kMetric, "non-finite score for bag " + f.bag);
    if (f.relation == na_id) fail(ErrorCode::kMetric, "NA facts are not ranked");
    order.push_back(&f);
  }
  std::sort(order.begin(), order.end(), [](const ScoredFact* a, const ScoredFact* b) {
    if (a->score != b->score) return a->score > b->score;
    if (a->bag != b->bag) return a->bag < b->bag;
    return a->relation < b->relation;
  });
  PrCurve curve;
  const double total = static_cast<double>(gold.size());
  std::size_t hits = 0;
  double ap = 0.0;
  for (std::size_t i = 0; i < order.size(); ++i) {
    const bool hit = gold.count({order[i]->bag, order[i]->relation}) > 0;
    hits += hit;
    const double precision = static_cast<double>(hits) / static_cast<double>(i + 1);
    const double recall = static_cast<double>(hits) / total;
    if (hit) ap += precision;
    curve.points.push_back({recall, precision});
    if (precision + recall > 0.0) curve.max_f1 = std::max(curve.max_f1, 2.0 * precision * recall / (precision + recall));
  }
  curve.auc = ap / total;
  return curve;
}

void write_pr_curve(std::ostream& out, const PrCurve& curve) {
  char buf[64];
  for (const auto& p : curve.points) {
    std::snprintf(buf, sizeof buf, "%.6f %.6f\n", p.recall, p.precision);
    out << buf;
  }
}

json EvalReport::to_json() const {
  json j = {{"metric", metric}, {"value", value}};
  if (!per_class.empty()) j["per_class"] = per_class;
  if (curve) {
    j["max_f1"] = curve->max_f1;
    j["points"] = curve->points.size();
  }
  return j;
}

// ---- evaluation helpers -----------------------------------------------------------

namespace {

// Inputs for every encodable instance; `kept` maps back to instance indices.
struct PreparedSet {
  std::vector<ModelInput> inputs;
  std::vector<std::size_t> kept;
  std::vector<std::ptrdiff_t> slot;  // instance -> input index or -1
};

PreparedSet prepare_all(const RelationModel& model, const std::vector<Instance>& instances) {
  PreparedSet p;
  p.slot.assign(instances.size(), -1);
  for (std::size_t i = 0; i < instances.size(); ++i) {
    try {
      p.inputs.push_back(model.prepare(instances[i]));
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kSpanTruncated) throw;
      continue;
    }
    p.slot[i] = static_cast<std::ptrdiff_t>(p.kept.size());
    p.kept.push_back(i);
  }
  return p;
}

std::vector<std::size_t> gold_ids(const RelationModel& model, const std::vector<Instance>& instances) {
  std::vector<std::size_t> out;
  out.reserve(instances.size());
  for (const auto& inst : instances) out.push_back(model.relations().id(inst.relation));
  return out;
}

// Evaluation batch over bags; bags with no encodable member are dropped.
BagBatch make_bag_batch(const std::vector<Bag>& bags, std::span<const std::size_t> which, const PreparedSet& prepared,
                        std::span<const std::size_t> labels, std::vector<std::size_t>* used = nullptr) {
  BagBatch batch;
  for (std::size_t w = 0; w < which.size(); ++w) {
    const Bag& bag = bags[which[w]];
    const std::size_t begin = batch.instances.size();
    for (std::size_t m : bag.members) {
      if (prepared.slot[m] >= 0) batch.instances.push_back(&prepared.inputs[prepared.slot[m]]);
    }
    if (batch.instances.size() == begin) continue;
    batch.scopes.push_back({begin, batch.instances.size()});
    batch.labels.push_back(labels.empty() ? 0 : labels[w]);
    if (used) used->push_back(which[w]);
  }
  return batch;
}

}  // namespace

std::vector<std::size_t> predict_relations(const RelationModel& model, const std::vector<Instance>& instances,
                                           std::size_t batch_size) {
  const PreparedSet prepared = prepare_all(model, instances);
  std::vector<std::size_t> preds(instances.size(), RelationMap::kNa);
  for (std::size_t start = 0; start < prepared.inputs.size(); start += batch_size) {
    const std::size_t end = std::min(prepared.inputs.size(), start + batch_size);
    std::vector<const ModelInput*> ptrs;
    for (std::size_t i = start; i < end; ++i) ptrs.push_back(&prepared.inputs[i]);
    const auto probs = model.predict_proba(ptrs);
    for (std::size_t i = 0; i < probs.size(); ++i) preds[prepared.kept[start + i]] = argmax(probs[i]);
  }
  return preds;
}

EvalReport evaluate_bags(const RelationModel& model, const std::vector<Instance>& instances) {
  if (model.architecture().mode != Mode::kBag) fail(ErrorCode::kConfig, "auc needs a bag-level model");
  const auto bags = group_into_bags(instances, BagKeying::kEvaluation, model.relations().na_name());
  const PreparedSet prepared = prepare_all(model, instances);
  std::set<Fact> gold;
  for (const auto& bag : bags)
    for (const auto& rel : bag.gold) gold.insert({bag.key(), model.relations().id(rel)});
  std::vector<ScoredFact> facts;
  constexpr std::size_t kChunk = 64;
  for (std::size_t start = 0; start < bags.size(); start += kChunk) {
    std::vector<std::size_t> which(std::min(kChunk, bags.size() - start));
    std::iota(which.begin(), which.end(), start);
    std::vector<std::size_t> used;
    const BagBatch batch = make_bag_batch(bags, which, prepared, {}, &used);
    if (batch.scopes.empty()) continue;
    const Tensor scores = model.bag_scores(batch);
    for (std::size_t b = 0; b < used.size(); ++b)
      for (std::size_t r = 1; r < scores.cols(); ++r) facts.push_back({bags[used[b]].key(), r, scores.at(b, r)});
  }
  EvalReport report;
  report.metric = "auc";
  report.curve = evaluate_pr_auc(facts, gold);
  report.value = report.curve->auc;
  return report;
}

EvalReport evaluate_dataset(const RelationModel& model, const std::vector<Instance>& instances,
                            const std::string& metric) {
  if (metric == "auc") return evaluate_bags(model, instances);
  if (metric != "acc" && metric != "f1") fail(ErrorCode::kConfig, "unknown metric '" + metric + "'");
  const auto preds = predict_relations(model, instances);
  const auto golds = gold_ids(model, instances);
  EvalReport report;
  report.metric = metric;
  report.value = metric == "acc" ? evaluate_accuracy(preds, golds) : evaluate_micro_f1(preds, golds);
  for (std::size_t r = 0; r < model.relations().size(); ++r) {
    std::size_t total = 0, hits = 0;
    for (std::size_t i = 0; i < golds.size(); ++i) {
      if (golds[i] != r) continue;
      ++total;
      hits += preds[i] == r;
    }
    if (total) report.per_class[model.relations().name(r)] = static_cast<double>(hits) / static_cast<double>(total);
  }
  return report;
}

namespace {

// Every instance of a few-shot dataset prepared once, addressed by
// (relation, index).
struct EpisodeInputs {
  std::vector<std::vector<ModelInput>> inputs;

  EpisodeInputs(const RelationModel& model, const FewshotDataset& data) {
    for (const auto& group : data.instances) {
      std::vector<ModelInput> row;
      for (const auto& inst : group) row.push_back(model.prepare(inst));
      inputs.push_back(std::move(row));
    }
  }

  std::vector<const ModelInput*> gather(std::span<const EpisodeItem> items) const {
    std::vector<const ModelInput*> out;
    for (const auto& it : items) out.push_back(&inputs[it.relation][it.index]);
    return out;
  }
};

}  // namespace

double evaluate_fewshot(const RelationModel& model, const FewshotDataset& data, std::size_t n, std::size_t k,
                        std::size_t q, std::size_t episodes, std::uint64_t seed) {
  if (episodes == 0) fail(ErrorCode::kConfig, "no evaluation episodes");
  NoGradGuard guard;
  const EpisodeInputs inputs(model, data);
  // Every instance is encoded once; episodes then gather rows.
  std::vector<std::size_t> offset;
  std::vector<const ModelInput*> all;
  for (const auto& row : inputs.inputs) {
    offset.push_back(all.size());
    for (const auto& in : row) all.push_back(&in);
  }
  std::vector<Tensor> chunks;
  constexpr std::size_t kChunk = 128;
  for (std::size_t s = 0; s < all.size(); s += kChunk) {
    const std::size_t e = std::min(all.size(), s + kChunk);
    chunks.push_back(model.encode(std::span<const ModelInput* const>(all.data() + s, e - s), {}).reps);
  }
  const Tensor table = chunks.size() == 1 ? chunks.front() : concat(chunks, 0);
  const RepFn lookup = [&](std::span<const EpisodeItem> items) {
    std::vector<std::size_t> rows;
    for (const auto& it : items) rows.push_back(offset[it.relation] + it.index);
    return embedding_gather(table, rows);
  };
  Rng rng(seed);
  double total = 0.0;
  for (std::size_t e = 0; e < episodes; ++e) {
    const Episode ep = sample_episode(data, n, k, q, rng);
    total += episode_accuracy(proto_scores(ep, lookup), ep.query_labels);
  }
  return total / static_cast<double>(episodes);
}

// ---- training -----------------------------------------------------------------

std::string EpochRecord::line() const {
  char buf[160];
  std::snprintf(buf, sizeof buf, "epoch=%zu loss=%.6f val_%s=%.6f", epoch, loss, metric.c_str(), value);
  return buf;
}

RelationModel build_model(const TrainConfig& cfg, const std::vector<Instance>& train, const RelationMap& relations,
                          Rng& rng) {
  ModelArchitecture arch;
  arch.mode = cfg.mode;
  arch.encoder = cfg.encoder;
  arch.aggregator = cfg.aggregator;
  arch.dropout = cfg.dropout;
  arch.max_length = cfg.max_length;
  Vocab vocab = build_vocab(train, cfg.min_count);
  SubwordVocab subwords;
  if (cfg.encoder_kind() == EncoderKind::kTransformer) {
    std::vector<std::string> words;
    for (const auto& inst : train)
      for (const auto& t : inst.tokens) words.push_back(normalize_token(t));
    subwords = SubwordVocab::from_corpus(words, std::max<std::size_t>(cfg.min_count, 2));
  }
  RelationModel model(std::move(arch), std::move(vocab), std::move(subwords), relations, rng);
  if (!cfg.embeddings_path.empty()) {
    if (model.uses_subwords()) fail(ErrorCode::kConfig, "pretrained embeddings need a word-level encoder");
    auto& cnn = dynamic_cast<CnnEncoder&>(model.encoder());
    load_pretrained_embeddings(cfg.embeddings_path, model.vocab(), cnn.word_embeddings());
  }
  return model;
}

namespace {

void check_finite(double loss, std::size_t epoch, std::size_t batch) {
  if (!std::isfinite(loss)) {
    fail(ErrorCode::kDiverged, "non-finite loss at epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch));
  }
}

// Forward with an optional word-embedding perturbation; returns the loss and
// the word embeddings it looked up.
using LossFn = std::function<std::pair<Tensor, Tensor>(const Tensor* perturbation)>;

// Backpropagates loss(x) and, with adversarial training, loss(x + v) for
// v = eps * g / ||g|| built from the first pass. Returns the summed loss.
double accumulate_gradients(const LossFn& loss_fn, const std::optional<double>& epsilon) {
  auto [loss, words] = loss_fn(nullptr);
  loss.backward();
  double total = loss.item();
  if (epsilon) {
    const Tensor v = adversarial_perturbation(Tensor::from_vector(words.shape(), std::vector<double>(
                                                                                      words.grad().begin(), words.grad().end())),
                                              *epsilon);
    auto [adv_loss, unused] = loss_fn(&v);
    adv_loss.backward();
    total += adv_loss.item();
  }
  return total;
}

struct EarlyStopper {
  explicit EarlyStopper(std::size_t p) : patience(p) {}

  std::size_t patience;
  std::size_t best_epoch = 0;
  double best_value = -1.0;
  std::vector<std::vector<double>> best;

  // True when training should stop after this epoch.
  bool update(const RelationModel& model, std::size_t epoch, double value) {
    if (best_epoch == 0 || value > best_value) {
      best_epoch = epoch;
      best_value = value;
      best = model.snapshot();
    }
    return epoch - best_epoch >= patience;
  }
};

void emit(std::ostream* log, std::vector<EpochRecord>& records, EpochRecord rec) {
  if (log) *log << rec.line() << '\n' << std::flush;
  records.push_back(std::move(rec));
}

}  // namespace

TrainingResult run_training(const TrainConfig& cfg, const std::vector<Instance>& train,
                            const std::vector<Instance>& val, const RelationMap& relations, std::ostream* log) {
  cfg.validate();
  if (cfg.mode == Mode::kFewshot) fail(ErrorCode::kConfig, "use run_fewshot_training for fewshot mode");
  if (train.empty()) fail(ErrorCode::kConfig, "empty training data");
  if (val.empty()) fail(ErrorCode::kConfig, "empty validation data");
  Rng rng(cfg.seed);
  RelationModel model = build_model(cfg, train, relations, rng);
  Optimizer opt(cfg.optimizer, model.trainable(), cfg.lr, cfg.weight_decay);
  const PreparedSet prepared = prepare_all(model, train);
  if (prepared.inputs.empty()) fail(ErrorCode::kConfig, "no encodable training instances");
  const auto golds = gold_ids(model, train);

  // Units of one mini-batch: instances (sentence) or training bags (bag).
  std::vector<Bag> bags;
  std::vector<std::size_t> bag_labels;
  std::size_t units = prepared.inputs.size();
  if (cfg.mode == Mode::kBag) {
    bags = group_into_bags(train, BagKeying::kTraining, relations.na_name());
    for (const auto& bag : bags) bag_labels.push_back(relations.id(bag.relation));
    units = bags.size();
  }

  TrainingResult result{model, {}, 0, 0.0, train.size() - prepared.inputs.size()};
  EarlyStopper stopper(cfg.patience);
  std::vector<std::size_t> order(units);
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < units; start += cfg.batch_size) {
      const std::span<const std::size_t> chunk(order.data() + start, std::min(cfg.batch_size, units - start));
      LossFn loss_fn;
      std::vector<const ModelInput*> ptrs;
      std::vector<std::size_t> labels;
      BagBatch batch;
      if (cfg.mode == Mode::kSentence) {
        for (std::size_t u : chunk) {
          ptrs.push_back(&prepared.inputs[u]);
          labels.push_back(golds[prepared.kept[u]]);
        }
        loss_fn = [&](const Tensor* v) {
          ForwardContext ctx{true, &rng, v};
          Tensor logits;
          EncoderOutput out = model.sentence_forward(ptrs, ctx, logits);
          return std::pair{cross_entropy(logits, labels), out.word_embeddings};
        };
      } else {
        std::vector<std::size_t> chunk_labels;
        for (std::size_t u : chunk) chunk_labels.push_back(bag_labels[u]);
        batch = make_bag_batch(bags, chunk, prepared, chunk_labels);
        if (batch.scopes.empty()) continue;
        loss_fn = [&](const Tensor* v) {
          ForwardContext ctx{true, &rng, v};
          BagForward out = model.bag_forward(batch, ctx);
          return std::pair{cross_entropy(out.logits, batch.labels), out.word_embeddings};
        };
      }
      opt.zero_grad();
      const double loss = accumulate_gradients(loss_fn, cfg.adversarial_epsilon);
      check_finite(loss, epoch, batches);
      opt.step();
      loss_sum += loss;
      ++batches;
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.loss = batches ? loss_sum / static_cast<double>(batches) : 0.0;
    if (cfg.mode == Mode::kSentence) {
      rec.metric = "acc";
      rec.value = evaluate_dataset(model, val, "acc").value;
    } else {
      rec.metric = "auc";
      rec.value = evaluate_bags(model, val).value;
    }
    const bool stop = stopper.update(model, epoch, rec.value);
    emit(log, result.log, rec);
    if (stop) break;
  }
  model.restore(stopper.best);
  result.best_epoch = stopper.best_epoch;
  result.best_value = stopper.best_value;
  return result;
}

TrainingResult run_fewshot_training(const TrainConfig& cfg, const FewshotDataset& train, const FewshotDataset& val,
                                    std::ostream* log) {
  cfg.validate();
  if (cfg.mode != Mode::kFewshot) fail(ErrorCode::kConfig, "run_fewshot_training needs fewshot mode");
  if (train.size() == 0 || val.size() == 0) fail(ErrorCode::kConfig, "empty few-shot data");
  std::vector<Instance> corpus;
  for (const auto& group : train.instances) corpus.insert(corpus.end(), group.begin(), group.end());
  Rng rng(cfg.seed);
  RelationModel model = build_model(cfg, corpus, RelationMap::from_names({cfg.na_name}, cfg.na_name), rng);
  Optimizer opt(cfg.optimizer, model.trainable(), cfg.lr, cfg.weight_decay);
  const EpisodeInputs inputs(model, train);
  TrainingResult result{model, {}, 0, 0.0, 0};
  EarlyStopper stopper(cfg.patience);
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    double loss_sum = 0.0;
    for (std::size_t step = 0; step < cfg.episodes_per_epoch; ++step) {
      const Episode ep = sample_episode(train, cfg.n, cfg.k, cfg.q, rng);
      const RepFn encode = [&](std::span<const EpisodeItem> items) {
        return model.encode(inputs.gather(items), ForwardContext{true, &rng, nullptr}).reps;
      };
      opt.zero_grad();
      Tensor loss = cross_entropy(proto_scores(ep, encode), ep.query_labels);
      loss.backward();
      check_finite(loss.item(), epoch, step);
      opt.step();
      loss_sum += loss.item();
    }
    EpochRecord rec{epoch, loss_sum / static_cast<double>(cfg.episodes_per_epoch), "acc",
                    evaluate_fewshot(model, val, cfg.n, cfg.k, cfg.q, cfg.eval_episodes, cfg.seed + 1)};
    const bool stop = stopper.update(model, epoch, rec.value);
    emit(log, result.log, rec);
    if (stop) break;
  }
  model.restore(stopper.best);
  result.best_epoch = stopper.best_epoch;
  result.best_value = stopper.best_value;
  return result;
}

TrainingResult train_from_config(const TrainConfig& cfg, std::ostream* fallback_log) {
  if (cfg.train_path.empty() || cfg.val_path.empty()) fail(ErrorCode::kConfig, "config needs train and val paths");
  std::ofstream log_file;
  std::ostream* log = fallback_log;
  if (!cfg.log_path.empty()) {
    log_file.open(cfg.log_path);
    if (!log_file) fail(ErrorCode::kIo, "cannot write " + cfg.log_path);
    log = &log_file;
  }
  std::optional<TrainingResult> result;
  if (cfg.mode == Mode::kFewshot) {
    result.emplace(run_fewshot_training(cfg, FewshotDataset::from_map(load_fewshot_dataset(cfg.train_path)),
                                        FewshotDataset::from_map(load_fewshot_dataset(cfg.val_path)), log));
  } else {
    std::optional<RelationMap> relations;
    if (!cfg.relations_path.empty()) relations = load_relation_map(cfg.relations_path, cfg.na_name);
    const RelationMap* rel_ptr = relations ? &*relations : nullptr;
    DatasetLoad train = load_jsonl_dataset(cfg.train_path, rel_ptr);
    DatasetLoad val = load_jsonl_dataset(cfg.val_path, rel_ptr);
    if (!relations) {
      std::vector<std::string> names{cfg.na_name};
      for (const auto& inst : train.instances) names.push_back(inst.relation);
      relations = RelationMap::from_names(names, cfg.na_name);
      for (const auto& inst : val.instances) relations->id(inst.relation);
    }
    if (cfg.mode == Mode::kBag) {
      // Surface missing entity ids with their source line.
      group_into_bags(train.instances, BagKeying::kTraining, cfg.na_name, train.line_numbers);
      group_into_bags(val.instances, BagKeying::kEvaluation, cfg.na_name, val.line_numbers);
    }
    result.emplace(run_training(cfg, train.instances, val.instances, *relations, log));
  }
  if (!cfg.output_path.empty()) save_checkpoint(result->model, cfg.output_path);
  return std::move(*result);
}

}  // namespace nre
