#pragma once

#include <cstddef>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "nre/data.hpp"
#include "nre/encoder.hpp"
#include "nre/tensor.hpp"
#include "nre/tokenize.hpp"

namespace nre {

// Softmax head: logits = reps * weight^T + bias. Row r of `weight` doubles as
// the attention query for relation r.
struct RelationClassifier {
  Tensor weight;  // [R x D]
  Tensor bias;    // [R]

  RelationClassifier() = default;
  RelationClassifier(std::size_t relations, std::size_t dim, Rng& rng);

  std::size_t relations() const { return weight.rows(); }
  std::size_t dim() const { return weight.cols(); }
  Tensor logits(const Tensor& reps) const;
};

std::vector<double> classify_softmax(const Tensor& rep, const RelationClassifier& classifier);

// ---- bags ---------------------------------------------------------------------------

using BagScope = std::pair<std::size_t, std::size_t>;  // [begin, end) into the flat list

struct BagBatch {
  std::vector<const ModelInput*> instances;
  std::vector<BagScope> scopes;
  std::vector<std::size_t> labels;

  // Scopes must partition `instances` in order with no empty bag.
  void validate() const;
};

struct BagAggregation {
  Tensor bag_reps;                            // [bags x D]
  std::vector<std::vector<double>> weights;   // per bag attention weights
};

// Per bag: e_i = rep_i . M[query]; alpha = softmax(e); bag rep = sum alpha_i rep_i.
BagAggregation bag_attention_aggregate(std::span<const BagScope> scopes, const Tensor& reps,
                                       std::span<const std::size_t> queries, const RelationClassifier& classifier);
// Unweighted mean, computed as uniform weights through the same path.
Tensor bag_average_aggregate(std::span<const BagScope> scopes, const Tensor& reps);

// Inference scores [bags x R]: entry (b, r) is relation r's probability when
// bag b is aggregated with query r. Rows need not sum to 1.
Tensor bag_attention_scores(std::span<const BagScope> scopes, const Tensor& reps,
                            const RelationClassifier& classifier);

// v = epsilon * g / max(||g||, 1e-12); carries no history.
Tensor adversarial_perturbation(const Tensor& grad, double epsilon);
std::vector<double> adversarial_perturbation(std::span<const double> grad, double epsilon);

// ---- full model -----------------------------------------------------------------------

enum class Mode { kSentence, kBag, kFewshot };
enum class Aggregator { kNone, kAttention, kAverage };

Mode parse_mode(const std::string& name);
std::string mode_name(Mode mode);
Aggregator parse_aggregator(const std::string& name);
std::string aggregator_name(Aggregator aggregator);

struct ModelArchitecture {
  Mode mode = Mode::kSentence;
  nlohmann::json encoder;  // Encoder::describe() form; vocab_size is filled in
  Aggregator aggregator = Aggregator::kNone;
  double dropout = 0.0;
  std::size_t max_length = 128;

  nlohmann::json to_json() const;
  static ModelArchitecture from_json(const nlohmann::json& j);
};

struct BagForward {
  Tensor logits;  // [bags x R]
  Tensor word_embeddings;
  std::vector<std::vector<double>> weights;
};

// Encoder plus the mode's head, together with the vocabulary and relation
// map it was built for. Parameters are shared handles: copies of a model
// alias the same weights.
class RelationModel {
 public:
  RelationModel(ModelArchitecture arch, Vocab vocab, SubwordVocab subwords, RelationMap relations, Rng& rng);

  const ModelArchitecture& architecture() const { return arch_; }
  const Encoder& encoder() const { return *encoder_; }
  Encoder& encoder() { return *encoder_; }
  const RelationClassifier& classifier() const { return classifier_; }
  const Vocab& vocab() const { return vocab_; }
  const SubwordVocab& subwords() const { return subwords_; }
  const RelationMap& relations() const { return relations_; }
  bool uses_subwords() const { return encoder_->kind() == EncoderKind::kTransformer; }
  std::vector<std::string> vocab_tokens() const;

  ModelInput prepare(const Instance& inst) const;

  std::vector<NamedParameter> parameters() const;
  std::vector<Tensor> trainable() const;

  // Representations with dropout applied when ctx.training.
  EncoderOutput encode(std::span<const ModelInput* const> batch, const ForwardContext& ctx) const;

  EncoderOutput sentence_forward(std::span<const ModelInput* const> batch, const ForwardContext& ctx,
                                 Tensor& logits) const;
  // Row-wise softmax probabilities in evaluation mode.
  std::vector<std::vector<double>> predict_proba(std::span<const ModelInput* const> batch) const;

  // Training forward: attention queries use the gold labels.
  BagForward bag_forward(const BagBatch& batch, const ForwardContext& ctx) const;
  // Evaluation scores [bags x R].
  Tensor bag_scores(const BagBatch& batch) const;

  // Values copied out / back in, used for best-epoch snapshots.
  std::vector<std::vector<double>> snapshot() const;
  void restore(const std::vector<std::vector<double>>& values);

  Checkpoint to_checkpoint() const;
  static RelationModel from_checkpoint(const Checkpoint& ckpt);

 private:
  ModelArchitecture arch_;
  Vocab vocab_;
  SubwordVocab subwords_;
  RelationMap relations_;
  std::shared_ptr<Encoder> encoder_;
  RelationClassifier classifier_;
};

void save_checkpoint(const RelationModel& model, const std::string& path);
RelationModel load_checkpoint(const std::string& path);
// Rejects checkpoints built for a different vocabulary.
RelationModel load_checkpoint(const std::string& path, const std::vector<std::string>& expected_vocab);

}  // namespace nre
