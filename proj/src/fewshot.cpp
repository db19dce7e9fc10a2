#include "nre/fewshot.hpp"

#include <algorithm>
#include <numeric>

#include "nre/error.hpp"

namespace nre {

FewshotDataset FewshotDataset::from_map(const std::map<std::string, std::vector<Instance>>& grouped) {
  FewshotDataset d;
  for (const auto& [name, items] : grouped) {
    d.relations.push_back(name);
    d.instances.push_back(items);
  }
  return d;
}

namespace {

// First `count` entries of a partial Fisher-Yates shuffle of [0, n).
std::vector<std::size_t> choose(std::size_t n, std::size_t count, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t i = 0; i < count; ++i) std::swap(idx[i], idx[i + rng.below(n - i)]);
  idx.resize(count);
  return idx;
}

}  // namespace

Episode sample_episode(const FewshotDataset& data, std::size_t n, std::size_t k, std::size_t q, Rng& rng) {
  if (n == 0 || k == 0 || q == 0) fail(ErrorCode::kSampling, "N, K and Q must be positive");
  if (n > data.size()) {
    fail(ErrorCode::kSampling, std::to_string(n) + "-way episode from " + std::to_string(data.size()) + " relations");
  }
  for (std::size_t r = 0; r < data.size(); ++r) {
    if (data.instances[r].size() < k + q) {
      fail(ErrorCode::kSampling, "relation '" + data.relations[r] + "' has " +
                                     std::to_string(data.instances[r].size()) + " instances, needs " +
                                     std::to_string(k + q));
    }
  }
  Episode ep;
  ep.relations = choose(data.size(), n, rng);
  std::vector<std::pair<EpisodeItem, std::size_t>> queries;
  for (std::size_t w = 0; w < n; ++w) {
    const std::size_t rel = ep.relations[w];
    const auto picked = choose(data.instances[rel].size(), k + q, rng);
    std::vector<EpisodeItem> support;
    for (std::size_t i = 0; i < k; ++i) support.push_back({rel, picked[i]});
    ep.support.push_back(std::move(support));
    for (std::size_t i = k; i < k + q; ++i) queries.push_back({{rel, picked[i]}, w});
  }
  rng.shuffle(queries);
  for (const auto& [item, label] : queries) {
    ep.query.push_back(item);
    ep.query_labels.push_back(label);
  }
  return ep;
}

Tensor proto_scores(const Episode& episode, const RepFn& encode) {
  const std::size_t n = episode.ways();
  const std::size_t k = episode.shots();
  if (n == 0 || k == 0 || episode.query.empty()) fail(ErrorCode::kContract, "empty episode");
  std::vector<EpisodeItem> support;
  for (const auto& group : episode.support) {
    if (group.size() != k) fail(ErrorCode::kContract, "support sets differ in size");
    auto sorted = group;
    std::sort(sorted.begin(), sorted.end(), [](const EpisodeItem& a, const EpisodeItem& b) {
      return a.relation != b.relation ? a.relation < b.relation : a.index < b.index;
    });
    support.insert(support.end(), sorted.begin(), sorted.end());
  }
  Tensor support_reps = encode(support);
  Tensor query_reps = encode(episode.query);
  // Row w of `averaging` holds 1/K over relation w's support rows.
  std::vector<double> averaging(n * n * k, 0.0);
  for (std::size_t w = 0; w < n; ++w)
    for (std::size_t i = 0; i < k; ++i) averaging[w * n * k + w * k + i] = 1.0 / static_cast<double>(k);
  Tensor prototypes = matmul(Tensor::from_vector({n, n * k}, std::move(averaging)), support_reps);
  return neg_sq_distance(query_reps, prototypes);
}

std::vector<std::vector<double>> pair_scores(const Episode& episode, const PairFn& pair_probability) {
  std::vector<std::vector<double>> out;
  for (const auto& q : episode.query) {
    std::vector<double> row;
    for (const auto& group : episode.support) {
      double s = 0.0;
      for (const auto& sup : group) s += pair_probability(q, sup);
      row.push_back(s / static_cast<double>(group.size()));
    }
    out.push_back(std::move(row));
  }
  return out;
}

std::size_t argmax(std::span<const double> values) {
  if (values.empty()) fail(ErrorCode::kContract, "argmax of an empty list");
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i)
    if (values[i] > values[best]) best = i;
  return best;
}

double episode_accuracy(const Tensor& logits, std::span<const std::size_t> labels) {
  if (logits.rows() != labels.size()) fail(ErrorCode::kDimension, "one label per query row required");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (argmax(logits.data().subspan(i * logits.cols(), logits.cols())) == labels[i]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

double episode_accuracy(const std::vector<std::vector<double>>& scores, std::span<const std::size_t> labels) {
  if (scores.size() != labels.size()) fail(ErrorCode::kDimension, "one label per query row required");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (argmax(scores[i]) == labels[i]) ++hits;
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

// ---- pair model ---------------------------------------------------------------------

namespace {

TransformerConfig cls_config(TransformerConfig c, std::size_t vocab_size) {
  c.pooling = PoolingMode::kCls;
  c.vocab_size = vocab_size;
  return c;
}

}  // namespace

PairModel::PairModel(const TransformerConfig& config, SubwordVocab vocab, Rng& rng)
    : vocab_(std::move(vocab)), encoder_(cls_config(config, vocab_.size()), rng), head_(2, config.d_model, rng) {}

MarkedSequence PairModel::join(const Instance& query, const Instance& support) const {
  MarkedSequence seq = insert_entity_markers(query, vocab_);
  const MarkedSequence second = insert_entity_markers(support, vocab_);
  seq.ids.insert(seq.ids.end(), second.ids.begin() + 1, second.ids.end());
  return seq;
}

Tensor PairModel::logits(std::span<const MarkedSequence> pairs) const {
  std::vector<ModelInput> inputs(pairs.size());
  std::vector<const ModelInput*> ptrs;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    inputs[i].marked = pairs[i];
    ptrs.push_back(&inputs[i]);
  }
  return head_.logits(encoder_.forward(ptrs, {}).reps);
}

double PairModel::probability(const Instance& query, const Instance& support) const {
  NoGradGuard guard;
  const MarkedSequence seq = join(query, support);
  Tensor probs = softmax_rows(logits(std::span<const MarkedSequence>(&seq, 1)));
  return probs.at(0, 1);
}

std::vector<Tensor> PairModel::trainable() const {
  std::vector<Tensor> out;
  for (auto& p : encoder_.parameters()) out.push_back(p.tensor);
  out.push_back(head_.weight);
  out.push_back(head_.bias);
  return out;
}

}  // namespace nre
