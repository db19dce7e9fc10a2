#include <cmath>

#include "doctest.h"
#include "gradcheck.hpp"
#include "nre/error.hpp"
#include "nre/framework.hpp"
#include "nre/model.hpp"
#include "oracles.hpp"
#include "suites.hpp"
#include "synthetic.hpp"

using namespace nre;
using nre::testing::random_tensor;

namespace {

std::vector<double> vals(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

std::vector<double> row(const Tensor& t, std::size_t r) {
  return {t.data().begin() + static_cast<long>(r * t.cols()), t.data().begin() + static_cast<long>((r + 1) * t.cols())};
}

RelationClassifier random_classifier(std::size_t r, std::size_t d, Rng& rng) {
  RelationClassifier c(r, d, rng);
  for (double& v : c.bias.mutable_data()) v = rng.uniform(-1.0, 1.0);
  return c;
}

TrainConfig small_config(Mode mode) {
  TrainConfig c;
  c.mode = mode;
  c.encoder = {{"kind", "pcnn"}, {"word_dim", 8}, {"pos_dim", 2}, {"hidden", 6}, {"max_pos", 20}};
  if (mode == Mode::kBag) c.aggregator = Aggregator::kAttention;
  c.dropout = 0.0;
  c.max_length = 24;
  c.seed = 1;
  return c;
}

}  // namespace

TEST_CASE("classify_softmax examples") {
  Rng rng(1);
  RelationClassifier c(4, 3, rng);
  for (double& v : c.weight.mutable_data()) v = 0.0;
  const Tensor rep = random_tensor({3}, rng);
  for (double p : classify_softmax(rep, c)) CHECK(p == doctest::Approx(0.25));
  c.bias.mutable_data()[2] = 40.0;
  const auto p = classify_softmax(rep, c);
  CHECK(std::max_element(p.begin(), p.end()) - p.begin() == 2);
  CHECK_THROWS_AS(classify_softmax(random_tensor({5}, rng), c), Error);
}

TEST_CASE("classify_softmax matches matmul plus softmax and ignores a shared bias shift") {
  Rng rng(2);
  for (int t = 0; t < 50; ++t) {
    const std::size_t r = 2 + rng.below(5), d = 1 + rng.below(6);
    RelationClassifier c = random_classifier(r, d, rng);
    const Tensor rep = random_tensor({d}, rng);
    std::vector<double> logits;
    for (std::size_t k = 0; k < r; ++k) {
      double s = c.bias.at(k);
      for (std::size_t j = 0; j < d; ++j) s += c.weight.at(k, j) * rep.at(j);
      logits.push_back(s);
    }
    const auto expect = oracle::softmax(logits);
    const auto got = classify_softmax(rep, c);
    double total = 0;
    for (std::size_t k = 0; k < r; ++k) {
      CHECK(got[k] == doctest::Approx(expect[k]).epsilon(1e-12));
      total += got[k];
    }
    CHECK(std::abs(total - 1.0) < 1e-12);
    const auto before = std::max_element(got.begin(), got.end()) - got.begin();
    for (double& b : c.bias.mutable_data()) b += 7.5;
    const auto shifted = classify_softmax(rep, c);
    CHECK(std::max_element(shifted.begin(), shifted.end()) - shifted.begin() == before);
  }
}

TEST_CASE("bag attention examples") {
  Rng rng(3);
  const RelationClassifier c = random_classifier(3, 4, rng);
  const Tensor single = random_tensor({1, 4}, rng);
  const BagScope one[] = {{0, 1}};
  const std::size_t q[] = {1};
  const auto a = bag_attention_aggregate(one, single, q, c);
  CHECK(a.weights[0] == std::vector<double>{1.0});
  CHECK(vals(a.bag_reps) == vals(single));

  const Tensor twin = concat({single, single}, 0);
  const BagScope two[] = {{0, 2}};
  const auto b = bag_attention_aggregate(two, twin, q, c);
  CHECK(b.weights[0] == std::vector<double>{0.5, 0.5});
}

TEST_CASE("bag attention and relation scores match the oracle") {
  for (const auto& check : nre::testing::oracle_checks(100)) {
    if (check.name != "bag_attention") continue;
    const auto out = check.run();
    INFO(out.detail);
    CHECK(out.worst < 1e-9);
  }
}

TEST_CASE("attention weights are positive and normalized") {
  Rng rng(4);
  for (int t = 0; t < 50; ++t) {
    const std::size_t d = 1 + rng.below(5), size = 1 + rng.below(9);
    const RelationClassifier c = random_classifier(3, d, rng);
    const Tensor reps = random_tensor({size, d}, rng, -3.0, 3.0);
    const BagScope s[] = {{0, size}};
    const std::size_t q[] = {rng.below(3)};
    const auto a = bag_attention_aggregate(s, reps, q, c);
    double total = 0;
    for (double w : a.weights[0]) {
      CHECK(w > 0.0);
      total += w;
    }
    CHECK(std::abs(total - 1.0) < 1e-9);
  }
}

TEST_CASE("zeroed query degenerates to the average exactly") {
  Rng rng(5);
  for (int t = 0; t < 30; ++t) {
    const std::size_t d = 1 + rng.below(5), size = 1 + rng.below(7);
    RelationClassifier c = random_classifier(3, d, rng);
    const std::size_t query = rng.below(3);
    for (std::size_t j = 0; j < d; ++j) c.weight.mutable_data()[query * d + j] = 0.0;
    const Tensor reps = random_tensor({size, d}, rng);
    const BagScope s[] = {{0, size}};
    const std::size_t q[] = {query};
    CHECK(vals(bag_attention_aggregate(s, reps, q, c).bag_reps) == vals(bag_average_aggregate(s, reps)));
  }
}

TEST_CASE("bag average examples") {
  Rng rng(6);
  const Tensor x = random_tensor({1, 3}, rng);
  const BagScope one[] = {{0, 1}};
  CHECK(vals(bag_average_aggregate(one, x)) == vals(x));
  const BagScope two[] = {{0, 2}};
  const Tensor cancel = bag_average_aggregate(two, concat({x, scale(x, -1.0)}, 0));
  for (double v : cancel.data()) CHECK(v == 0.0);
  for (int t = 0; t < 30; ++t) {
    const std::size_t d = 1 + rng.below(4), size = 1 + rng.below(6);
    const Tensor reps = random_tensor({size + 2, d}, rng);
    const BagScope s[] = {{0, 2}, {2, size + 2}};
    const Tensor avg = bag_average_aggregate(s, reps);
    for (std::size_t j = 0; j < d; ++j) {
      double m = 0;
      for (std::size_t i = 2; i < size + 2; ++i) m += reps.at(i, j);
      CHECK(avg.at(1, j) == doctest::Approx(m / static_cast<double>(size)).epsilon(1e-12));
    }
  }
}

TEST_CASE("bag scopes must partition the batch") {
  Rng rng(7);
  const Tensor reps = random_tensor({3, 2}, rng);
  const BagScope gap[] = {{0, 1}, {2, 3}};
  CHECK_THROWS_AS(bag_average_aggregate(gap, reps), Error);
  const BagScope empty[] = {{0, 0}, {0, 3}};
  CHECK_THROWS_AS(bag_average_aggregate(empty, reps), Error);
}

TEST_CASE("adversarial perturbation examples") {
  const std::vector<double> zero(5, 0.0);
  for (double v : adversarial_perturbation(zero, 0.05)) CHECK(v == 0.0);
  Rng rng(8);
  for (int t = 0; t < 30; ++t) {
    std::vector<double> g(1 + rng.below(10));
    for (double& v : g) v = rng.uniform(-2.0, 2.0);
    const double eps = rng.uniform(0.01, 1.0);
    const auto v = adversarial_perturbation(g, eps);
    double norm = 0;
    for (double x : v) norm += x * x;
    CHECK(std::sqrt(norm) == doctest::Approx(eps).epsilon(1e-12));
    std::vector<double> g10 = g;
    for (double& x : g10) x *= 10.0;
    const auto v10 = adversarial_perturbation(g10, eps);
    for (std::size_t i = 0; i < v.size(); ++i) CHECK(v10[i] == doctest::Approx(v[i]).epsilon(1e-12));
  }
}

TEST_CASE("a small adversarial step raises the loss") {
  Rng data_rng(9);
  const auto train = nre::testing::planted_sentences(4, 30, data_rng);
  const RelationMap rel = nre::testing::numbered_relations(4);
  Rng rng(10);
  const RelationModel model = build_model(small_config(Mode::kSentence), train, rel, rng);
  std::size_t raised = 0;
  for (const auto& inst : train) {
    const ModelInput in = model.prepare(inst);
    const ModelInput* ptr = &in;
    const std::size_t label[] = {rel.id(inst.relation)};
    Tensor logits;
    const EncoderOutput out = model.sentence_forward({&ptr, 1}, {}, logits);
    const Tensor loss = cross_entropy(logits, label);
    loss.backward();
    const Tensor g = Tensor::from_vector(out.word_embeddings.shape(), std::vector<double>(
                                                                         out.word_embeddings.grad().begin(),
                                                                         out.word_embeddings.grad().end()));
    const Tensor v = adversarial_perturbation(g, 1e-3);
    Tensor adv_logits;
    ForwardContext ctx;
    ctx.word_perturbation = &v;
    model.sentence_forward({&ptr, 1}, ctx, adv_logits);
    raised += cross_entropy(adv_logits, label).item() >= loss.item();
  }
  CHECK(static_cast<double>(raised) >= 0.95 * static_cast<double>(train.size()));
}

TEST_CASE("model bag scores agree with the oracle on encoder outputs") {
  Rng data_rng(11);
  nre::testing::BagOptions opt;
  opt.relations = 3;
  const auto insts = nre::testing::synthetic_bags(6, data_rng, opt, "b");
  const RelationMap rel = nre::testing::numbered_relations(3);
  Rng rng(12);
  const RelationModel model = build_model(small_config(Mode::kBag), insts, rel, rng);
  const auto bags = group_into_bags(insts, BagKeying::kEvaluation);
  std::vector<ModelInput> inputs;
  for (const auto& inst : insts) inputs.push_back(model.prepare(inst));
  BagBatch batch;
  for (const auto& bag : bags) {
    const std::size_t begin = batch.instances.size();
    for (auto m : bag.members) batch.instances.push_back(&inputs[m]);
    batch.scopes.push_back({begin, batch.instances.size()});
    batch.labels.push_back(0);
  }
  const Tensor scores = model.bag_scores(batch);
  const Tensor reps = model.encode(batch.instances, {}).reps;
  const auto all = oracle::to_matrix(vals(reps), reps.rows(), reps.cols());
  const auto weight = oracle::to_matrix(vals(model.classifier().weight), rel.size(), reps.cols());
  for (std::size_t b = 0; b < bags.size(); ++b) {
    const oracle::Matrix members(all.begin() + static_cast<long>(batch.scopes[b].first),
                                 all.begin() + static_cast<long>(batch.scopes[b].second));
    const auto expect = oracle::bag_relation_scores(members, weight, vals(model.classifier().bias));
    const auto got = row(scores, b);
    for (std::size_t r = 0; r < rel.size(); ++r) CHECK(got[r] == doctest::Approx(expect[r]).epsilon(1e-9));
  }
}

TEST_CASE("bag training loss gradients match finite differences") {
  Rng data_rng(13);
  nre::testing::BagOptions opt;
  opt.relations = 2;
  opt.max_bag = 3;
  const auto insts = nre::testing::synthetic_bags(3, data_rng, opt, "g");
  const RelationMap rel = nre::testing::numbered_relations(2);
  Rng rng(14);
  TrainConfig cfg = small_config(Mode::kBag);
  cfg.encoder = {{"kind", "cnn"}, {"word_dim", 3}, {"pos_dim", 1}, {"hidden", 3}, {"max_pos", 20}};
  const RelationModel model = build_model(cfg, insts, rel, rng);
  std::vector<ModelInput> inputs;
  for (const auto& inst : insts) inputs.push_back(model.prepare(inst));
  const auto bags = group_into_bags(insts, BagKeying::kTraining);
  BagBatch batch;
  for (const auto& bag : bags) {
    const std::size_t begin = batch.instances.size();
    for (auto m : bag.members) batch.instances.push_back(&inputs[m]);
    batch.scopes.push_back({begin, batch.instances.size()});
    batch.labels.push_back(rel.id(bag.relation));
  }
  std::vector<Tensor> params;
  for (const auto& p : model.parameters())
    if (p.name != "encoder.word") params.push_back(p.tensor);
  const auto res = nre::testing::check_gradients(params, [&](const std::vector<Tensor>&) {
    return cross_entropy(model.bag_forward(batch, {}).logits, batch.labels);
  });
  INFO(res.where);
  CHECK(res.worst < 1e-4);
}

TEST_CASE("snapshot and restore") {
  Rng data_rng(15);
  const auto train = nre::testing::planted_sentences(2, 5, data_rng);
  Rng rng(16);
  RelationModel model = build_model(small_config(Mode::kSentence), train, nre::testing::numbered_relations(2), rng);
  const auto saved = model.snapshot();
  for (auto& p : model.parameters())
    for (double& v : p.tensor.mutable_data()) v += 1.0;
  CHECK(model.snapshot() != saved);
  model.restore(saved);
  CHECK(model.snapshot() == saved);
}

TEST_CASE("architecture descriptor round trips") {
  ModelArchitecture a;
  a.mode = Mode::kBag;
  a.encoder = {{"kind", "pcnn"}, {"hidden", 7}, {"vocab_size", 11}};
  a.aggregator = Aggregator::kAverage;
  a.dropout = 0.25;
  a.max_length = 40;
  CHECK(ModelArchitecture::from_json(a.to_json()).to_json() == a.to_json());
  CHECK(parse_mode("bag") == Mode::kBag);
  CHECK(aggregator_name(parse_aggregator("att")) == "att");
  CHECK_THROWS_AS(parse_mode("document"), Error);
}
