#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "nre/data.hpp"
#include "nre/fewshot.hpp"
#include "nre/model.hpp"
#include "nre/optim.hpp"

namespace nre {

// ---- configuration ----------------------------------------------------------------

struct TrainConfig {
  Mode mode = Mode::kSentence;
  nlohmann::json encoder = {{"kind", "cnn"}};  // "kind" plus optional dimension overrides
  Aggregator aggregator = Aggregator::kNone;   // bag mode only
  OptimizerKind optimizer = OptimizerKind::kSgd;
  double lr = 0.1;
  double weight_decay = 1e-5;
  std::size_t batch_size = 160;
  std::size_t max_epochs = 100;
  std::size_t patience = 5;
  double dropout = 0.5;
  std::optional<double> adversarial_epsilon;
  std::uint64_t seed = 0;
  std::size_t max_length = 128;
  std::size_t min_count = 1;
  std::string na_name = "NA";

  // Few-shot only.
  std::size_t n = 0, k = 0, q = 0;
  std::size_t episodes_per_epoch = 100;
  std::size_t eval_episodes = 1000;

  // Paths used by the command line driver.
  std::string train_path, val_path, relations_path, embeddings_path, output_path, log_path;

  EncoderKind encoder_kind() const;
  void validate() const;
  nlohmann::json to_json() const;
  // Absent optimizer fields take the encoder's defaults: SGD lr 0.1,
  // weight decay 1e-5, batch 160, dropout 0.5 for CNN/PCNN; Adam lr 1e-3,
  // no decay, batch 16, dropout 0.1 for the transformer.
  static TrainConfig from_json(const nlohmann::json& j);
};

// Reads a JSON config; NRE_SEED, when set, replaces the seed.
TrainConfig load_train_config(const std::string& path);
void apply_seed_override(TrainConfig& cfg);

// ---- bags -----------------------------------------------------------------------

enum class BagKeying { kTraining, kEvaluation };

struct Bag {
  std::string head_id;
  std::string tail_id;
  std::string relation;               // training keying only
  std::vector<std::size_t> members;   // indices into the instance list
  std::vector<std::string> gold;      // evaluation keying: non-NA relations, sorted

  std::string key() const;
};

// Training key (head id, tail id, relation); evaluation key (head id,
// tail id). Bags come out sorted by key. `line_numbers` (if given) is used
// for error messages.
std::vector<Bag> group_into_bags(const std::vector<Instance>& instances, BagKeying keying,
                                 const std::string& na_name = "NA", std::span<const std::size_t> line_numbers = {});

// ---- metrics --------------------------------------------------------------------

double evaluate_accuracy(std::span<const std::size_t> preds, std::span<const std::size_t> golds);
double evaluate_micro_f1(std::span<const std::size_t> preds, std::span<const std::size_t> golds,
                         std::size_t na_id = 0);

struct ScoredFact {
  std::string bag;
  std::size_t relation = 0;
  double score = 0.0;
};

using Fact = std::pair<std::string, std::size_t>;

struct PrPoint {
  double recall = 0.0;
  double precision = 0.0;
};

struct PrCurve {
  double auc = 0.0;     // average precision
  double max_f1 = 0.0;
  std::vector<PrPoint> points;  // one per ranked prefix
};

// Facts ranked by score descending, ties by (bag, relation) ascending.
PrCurve evaluate_pr_auc(std::span<const ScoredFact> facts, const std::set<Fact>& gold, std::size_t na_id = 0);
void write_pr_curve(std::ostream& out, const PrCurve& curve);

struct EvalReport {
  std::string metric;
  double value = 0.0;
  std::map<std::string, double> per_class;  // optional
  std::optional<PrCurve> curve;

  nlohmann::json to_json() const;
};

// ---- evaluation helpers -----------------------------------------------------------

// Argmax relation per instance (lowest id on ties). Instances that cannot
// be encoded (entity beyond max_length) are predicted NA.
std::vector<std::size_t> predict_relations(const RelationModel& model, const std::vector<Instance>& instances,
                                           std::size_t batch_size = 64);

// "acc" or "f1" on sentence predictions; "auc" on evaluation bags.
EvalReport evaluate_dataset(const RelationModel& model, const std::vector<Instance>& instances,
                            const std::string& metric);
EvalReport evaluate_bags(const RelationModel& model, const std::vector<Instance>& instances);

// Mean accuracy over a seeded bank of `episodes` N-way K-shot episodes.
double evaluate_fewshot(const RelationModel& model, const FewshotDataset& data, std::size_t n, std::size_t k,
                        std::size_t q, std::size_t episodes, std::uint64_t seed);

// ---- training -----------------------------------------------------------------

struct EpochRecord {
  std::size_t epoch = 0;
  double loss = 0.0;
  std::string metric;
  double value = 0.0;

  // "epoch=<n> loss=<f> val_<metric>=<f>"
  std::string line() const;
};

struct TrainingResult {
  RelationModel model;
  std::vector<EpochRecord> log;
  std::size_t best_epoch = 0;
  double best_value = 0.0;
  std::size_t skipped_instances = 0;  // could not be encoded
};

// Builds an untrained model whose vocabulary comes from `train`.
RelationModel build_model(const TrainConfig& cfg, const std::vector<Instance>& train, const RelationMap& relations,
                          Rng& rng);

// Sentence or bag mode. The returned model holds the best validation epoch.
TrainingResult run_training(const TrainConfig& cfg, const std::vector<Instance>& train,
                            const std::vector<Instance>& val, const RelationMap& relations,
                            std::ostream* log = nullptr);

TrainingResult run_fewshot_training(const TrainConfig& cfg, const FewshotDataset& train, const FewshotDataset& val,
                                    std::ostream* log = nullptr);

// Reads data paths from the config, trains, writes the checkpoint and log
// (to `fallback_log` when the config names no log file).
TrainingResult train_from_config(const TrainConfig& cfg, std::ostream* fallback_log = nullptr);

}  // namespace nre
