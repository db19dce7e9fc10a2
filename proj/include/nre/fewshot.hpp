#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "nre/encoder.hpp"
#include "nre/model.hpp"
#include "nre/rng.hpp"
#include "nre/tensor.hpp"
#include "nre/tokenize.hpp"

namespace nre {

// Instances grouped by relation, relations in name order.
struct FewshotDataset {
  std::vector<std::string> relations;
  std::vector<std::vector<Instance>> instances;

  static FewshotDataset from_map(const std::map<std::string, std::vector<Instance>>& grouped);
  std::size_t size() const { return relations.size(); }
};

// (relation index, instance index) into a FewshotDataset.
struct EpisodeItem {
  std::size_t relation = 0;
  std::size_t index = 0;

  bool operator==(const EpisodeItem&) const = default;
};

struct Episode {
  std::vector<std::size_t> relations;             // N dataset relation indices
  std::vector<std::vector<EpisodeItem>> support;  // [N][K]
  std::vector<EpisodeItem> query;                 // N * Q, shuffled
  std::vector<std::size_t> query_labels;          // episode-local gold in [0, N)

  std::size_t ways() const { return relations.size(); }
  std::size_t shots() const { return support.empty() ? 0 : support.front().size(); }
};

// Uniform relations, then uniform instances without replacement. Every
// relation must hold at least K + Q instances.
Episode sample_episode(const FewshotDataset& data, std::size_t n, std::size_t k, std::size_t q, Rng& rng);

// Representations [items x D] for a list of episode items.
using RepFn = std::function<Tensor(std::span<const EpisodeItem>)>;

// Prototypical scores [N*Q x N]: logit(q, n) = -||f(q) - c_n||^2 with c_n the
// mean support representation of relation n. Support items are reduced in
// ascending instance order.
Tensor proto_scores(const Episode& episode, const RepFn& encode);

// Probability that a query and a support instance share a relation.
using PairFn = std::function<double(const EpisodeItem& query, const EpisodeItem& support)>;

// score(q, n) = mean pair probability over relation n's support set.
std::vector<std::vector<double>> pair_scores(const Episode& episode, const PairFn& pair_probability);

// Lowest index wins ties.
std::size_t argmax(std::span<const double> values);
double episode_accuracy(const Tensor& logits, std::span<const std::size_t> labels);
double episode_accuracy(const std::vector<std::vector<double>>& scores, std::span<const std::size_t> labels);

// Sequence-pair classifier: [CLS] query [SEP] support [SEP] (both with
// entity markers) through a CLS-pooled transformer and a 2-way head.
class PairModel {
 public:
  PairModel(const TransformerConfig& config, SubwordVocab vocab, Rng& rng);

  MarkedSequence join(const Instance& query, const Instance& support) const;
  // [pairs x 2] logits; class 1 means "same relation".
  Tensor logits(std::span<const MarkedSequence> pairs) const;
  double probability(const Instance& query, const Instance& support) const;

  std::vector<Tensor> trainable() const;
  const SubwordVocab& vocab() const { return vocab_; }

 private:
  SubwordVocab vocab_;
  TransformerEncoder encoder_;
  RelationClassifier head_;
};

}  // namespace nre
