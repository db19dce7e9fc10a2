#include <cmath>

#include "doctest.h"
#include "nre/encoder.hpp"
#include "nre/error.hpp"
#include "nre/tokenize.hpp"
#include "oracles.hpp"
#include "suites.hpp"

using namespace nre;

namespace {

CnnConfig small_config(std::size_t vocab) {
  CnnConfig c;
  c.vocab_size = vocab;
  c.word_dim = 4;
  c.pos_dim = 2;
  c.hidden = 5;
  c.window = 3;
  c.max_pos = 10;
  return c;
}

Instance make(std::vector<std::string> tokens, std::size_t hs, std::size_t he, std::size_t ts, std::size_t te) {
  Instance inst;
  inst.tokens = std::move(tokens);
  inst.head = {"h", "", hs, he};
  inst.tail = {"t", "", ts, te};
  return inst;
}

std::vector<double> row(const Tensor& t, std::size_t r) {
  return {t.data().begin() + static_cast<long>(r * t.cols()), t.data().begin() + static_cast<long>((r + 1) * t.cols())};
}

// Feature of position i, or the padding feature outside the real tokens.
std::vector<double> feature(const CnnEncoder& enc, const EncodedInstance& e, long i) {
  const bool real = i >= 0 && i < static_cast<long>(e.length);
  const auto w = row(enc.word_embeddings(), real ? e.token_ids[i] : Vocab::kPad);
  const auto p1 = row(enc.pos1_embeddings(), real ? e.pos1_ids[i] : 0);
  const auto p2 = row(enc.pos2_embeddings(), real ? e.pos2_ids[i] : 0);
  std::vector<double> f = w;
  f.insert(f.end(), p1.begin(), p1.end());
  f.insert(f.end(), p2.begin(), p2.end());
  return f;
}

// Filter response of the window centered at real position t.
std::vector<double> window_response(const CnnEncoder& enc, const EncodedInstance& e, std::size_t t) {
  const std::size_t H = enc.config().hidden, w = enc.config().window;
  const long half = static_cast<long>(w / 2);
  std::vector<double> out(H);
  for (std::size_t h = 0; h < H; ++h) {
    double s = enc.bias().at(h);
    for (std::size_t k = 0; k < w; ++k) {
      const auto f = feature(enc, e, static_cast<long>(t) + static_cast<long>(k) - half);
      for (std::size_t c = 0; c < f.size(); ++c) s += f[c] * enc.filters().at(k * f.size() + c, h);
    }
    out[h] = s;
  }
  return out;
}

std::vector<double> sliding_oracle(const CnnEncoder& enc, const EncodedInstance& e, bool piecewise) {
  oracle::Matrix responses;
  std::vector<int> segs;
  for (std::size_t t = 0; t < e.length; ++t) {
    responses.push_back(window_response(enc, e, t));
    segs.push_back(piecewise ? e.segment_ids[t] : 1);
  }
  auto pooled = oracle::piecewise_max_pool(responses, segs);
  if (!piecewise) pooled.resize(enc.config().hidden);
  for (double& v : pooled) v = std::tanh(v);
  return pooled;
}

std::vector<double> vals(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

double max_diff(const std::vector<double>& a, const std::vector<double>& b) {
  REQUIRE(a.size() == b.size());
  double w = 0;
  for (std::size_t i = 0; i < a.size(); ++i) w = std::max(w, std::abs(a[i] - b[i]));
  return w;
}

}  // namespace

TEST_CASE("cnn and pcnn agree with a sliding-window oracle") {
  Rng rng(1);
  for (int t = 0; t < 40; ++t) {
    const std::size_t len = 2 + rng.below(12);
    std::vector<std::string> tokens(len);
    for (auto& tok : tokens) tok = "w" + std::to_string(rng.below(6));
    std::size_t hs = rng.below(len), ts = rng.below(len);
    while (ts == hs) ts = rng.below(len);
    const Instance inst = make(tokens, hs, hs + 1, ts, ts + 1);
    const Vocab vocab = build_vocab({inst}, 1);
    const EncodedInstance e = encode_instance(inst, vocab, {len + rng.below(5), 10});
    const CnnEncoder cnn(EncoderKind::kCnn, small_config(vocab.size()), rng);
    const CnnEncoder pcnn(EncoderKind::kPcnn, small_config(vocab.size()), rng);
    CHECK(max_diff(vals(cnn_encode(e, cnn)), sliding_oracle(cnn, e, false)) < 1e-12);
    CHECK(max_diff(vals(pcnn_encode(e, pcnn)), sliding_oracle(pcnn, e, true)) < 1e-12);
    CHECK(pcnn.output_dim() == 3 * cnn.output_dim());
  }
}

TEST_CASE("padding contents do not change the output") {
  Rng rng(2);
  const Instance inst = make({"a", "b", "c", "d"}, 0, 1, 2, 3);
  const Vocab vocab = build_vocab({inst, make({"x", "y"}, 0, 1, 1, 2)}, 1);
  const EncodedInstance e = encode_instance(inst, vocab, {10, 10});
  EncodedInstance junk = e;
  for (std::size_t i = e.length; i < junk.token_ids.size(); ++i) {
    junk.token_ids[i] = vocab.id("x");
    junk.pos1_ids[i] = 3;
    junk.pos2_ids[i] = 7;
  }
  for (auto kind : {EncoderKind::kCnn, EncoderKind::kPcnn}) {
    const CnnEncoder enc(kind, small_config(vocab.size()), rng);
    CHECK(vals(enc.encode(e)) == vals(enc.encode(junk)));
  }
}

TEST_CASE("batched forward equals per-instance encoding") {
  Rng rng(3);
  std::vector<Instance> insts{make({"a", "b", "c"}, 0, 1, 2, 3), make({"a", "b", "c", "d", "e", "f"}, 4, 5, 1, 3)};
  const Vocab vocab = build_vocab(insts, 1);
  const CnnEncoder enc(EncoderKind::kPcnn, small_config(vocab.size()), rng);
  std::vector<ModelInput> inputs;
  for (const auto& i : insts) inputs.push_back({encode_instance(i, vocab, {12, 10}), {}});
  std::vector<const ModelInput*> ptrs{&inputs[0], &inputs[1]};
  const Tensor reps = enc.forward(ptrs, {}).reps;
  for (std::size_t b = 0; b < 2; ++b) CHECK(max_diff(row(reps, b), vals(enc.encode(inputs[b].words))) < 1e-12);
}

TEST_CASE("single real token gives tanh of one window") {
  Rng rng(4);
  Vocab vocab;
  vocab.add("solo");
  vocab.add("other");
  vocab.freeze();
  EncodedInstance e;
  e.token_ids = {3, 0, 0, 0};
  e.pos1_ids = {10, 0, 0, 0};
  e.pos2_ids = {9, 0, 0, 0};
  e.segment_ids = {1, 0, 0, 0};
  e.attention_mask = {1, 0, 0, 0};
  e.length = 1;
  const CnnEncoder enc(EncoderKind::kCnn, small_config(vocab.size()), rng);
  const auto out = vals(enc.encode(e));
  // [pad, solo, pad] feature rows against the filter bank.
  const std::size_t H = 5, F = 8;
  for (std::size_t h = 0; h < H; ++h) {
    double s = enc.bias().at(h);
    for (std::size_t k = 0; k < 3; ++k) {
      std::vector<double> f;
      const bool mid = k == 1;
      for (std::size_t c = 0; c < 4; ++c) f.push_back(enc.word_embeddings().at(mid ? 3 : 0, c));
      for (std::size_t c = 0; c < 2; ++c) f.push_back(enc.pos1_embeddings().at(mid ? 10 : 0, c));
      for (std::size_t c = 0; c < 2; ++c) f.push_back(enc.pos2_embeddings().at(mid ? 9 : 0, c));
      for (std::size_t c = 0; c < F; ++c) s += f[c] * enc.filters().at(k * F + c, h);
    }
    CHECK(out[h] == doctest::Approx(std::tanh(s)).epsilon(1e-12));
  }
}

TEST_CASE("pcnn pieces") {
  Rng rng(5);
  SUBCASE("one token per piece") {
    const Instance inst = make({"a", "b", "c"}, 0, 1, 1, 2);
    const Vocab vocab = build_vocab({inst}, 1);
    const EncodedInstance e = encode_instance(inst, vocab, {3, 10});
    REQUIRE(e.segment_ids == std::vector<int>{1, 2, 3});
    const CnnEncoder enc(EncoderKind::kPcnn, small_config(vocab.size()), rng);
    std::vector<double> expect;
    for (std::size_t t = 0; t < 3; ++t)
      for (double v : window_response(enc, e, t)) expect.push_back(std::tanh(v));
    CHECK(max_diff(vals(enc.encode(e)), expect) < 1e-12);
  }
  SUBCASE("empty third piece saturates") {
    const Instance inst = make({"a", "b", "c"}, 0, 1, 2, 3);
    const Vocab vocab = build_vocab({inst}, 1);
    const CnnEncoder enc(EncoderKind::kPcnn, small_config(vocab.size()), rng);
    const auto out = vals(enc.encode(encode_instance(inst, vocab, {5, 10})));
    for (std::size_t h = 10; h < 15; ++h) CHECK(out[h] == doctest::Approx(std::tanh(-100.0)));
  }
  SUBCASE("first block ignores tokens whose windows miss piece 1") {
    const Instance inst = make({"a", "b", "c", "d", "e", "f", "g"}, 0, 2, 3, 4);
    const Vocab vocab = build_vocab({inst}, 1);
    const EncodedInstance e = encode_instance(inst, vocab, {7, 10});
    REQUIRE(e.segment_ids == std::vector<int>{1, 1, 2, 2, 3, 3, 3});
    const CnnEncoder enc(EncoderKind::kPcnn, small_config(vocab.size()), rng);
    EncodedInstance changed = e;
    for (std::size_t i = 3; i < 7; ++i) changed.token_ids[i] = vocab.id("a");
    const auto a = vals(enc.encode(e)), b = vals(enc.encode(changed));
    for (std::size_t h = 0; h < 5; ++h) CHECK(a[h] == b[h]);
  }
}

TEST_CASE("out-of-range ids raise index errors") {
  Rng rng(6);
  const Instance inst = make({"a", "b"}, 0, 1, 1, 2);
  const Vocab vocab = build_vocab({inst}, 1);
  EncodedInstance e = encode_instance(inst, vocab, {4, 10});
  const CnnEncoder enc(EncoderKind::kCnn, small_config(vocab.size()), rng);
  e.token_ids[0] = 99;
  CHECK_THROWS_AS(enc.encode(e), Error);
  e = encode_instance(inst, vocab, {4, 10});
  e.pos1_ids[1] = 21;
  CHECK_THROWS_AS(enc.encode(e), Error);
}

TEST_CASE("gradients reach exactly the used embedding rows") {
  Rng rng(7);
  const Instance inst = make({"a", "b", "c"}, 0, 1, 2, 3);
  const Vocab vocab = build_vocab({inst, make({"u", "v", "z"}, 0, 1, 1, 2)}, 1);
  const CnnEncoder enc(EncoderKind::kCnn, small_config(vocab.size()), rng);
  const EncodedInstance e = encode_instance(inst, vocab, {6, 10});
  sum(enc.encode(e)).backward();
  const Tensor& table = enc.word_embeddings();
  for (std::size_t r = 0; r < vocab.size(); ++r) {
    double mag = 0;
    for (std::size_t c = 0; c < table.cols(); ++c) mag += std::abs(table.grad()[r * table.cols() + c]);
    const bool used = r == Vocab::kPad || r == vocab.id("a") || r == vocab.id("b") || r == vocab.id("c");
    INFO("row " << r);
    CHECK((mag > 0) == used);
  }
  double pos_mag = 0;
  for (double g : enc.pos1_embeddings().grad()) pos_mag += std::abs(g);
  CHECK(pos_mag > 0);
}

TEST_CASE("xavier init stays within its bound") {
  Rng rng(8);
  const Tensor w = xavier_uniform(30, 20, rng);
  const double bound = std::sqrt(6.0 / 50.0);
  for (double v : w.data()) CHECK(std::abs(v) <= bound);
}

TEST_CASE("describe rebuilds an identically shaped encoder") {
  Rng rng(9);
  const CnnEncoder enc(EncoderKind::kPcnn, small_config(12), rng);
  const auto copy = make_encoder(enc.describe(), rng);
  CHECK(copy->kind() == EncoderKind::kPcnn);
  CHECK(copy->parameter_count() == enc.parameter_count());
  CHECK(enc.parameter_count() == 12 * 4 + 2 * 21 * 2 + 3 * 8 * 5 + 5);
}

// ---- transformer -----------------------------------------------------------------

namespace {

TransformerConfig toy(const SubwordVocab& v, PoolingMode mode) {
  TransformerConfig c;
  c.vocab_size = v.size();
  c.d_model = 8;
  c.heads = 2;
  c.layers = 2;
  c.d_ff = 12;
  c.max_positions = 32;
  c.pooling = mode;
  return c;
}

MarkedSequence sample_sequence(const SubwordVocab& v) {
  return insert_entity_markers(make({"a", "b", "c", "a"}, 2, 3, 0, 1), v);
}

}  // namespace

TEST_CASE("transformer output shapes") {
  Rng rng(10);
  const SubwordVocab v = SubwordVocab::from_pieces({"a", "b", "c"});
  const TransformerEncoder cls(toy(v, PoolingMode::kCls), rng);
  const TransformerEncoder ent(toy(v, PoolingMode::kEntityStart), rng);
  const auto seq = sample_sequence(v);
  CHECK(transformer_encode(seq, cls).shape() == Shape{8});
  CHECK(transformer_encode(seq, ent).shape() == Shape{16});
  CHECK(cls.output_dim() == 8);
  CHECK(ent.output_dim() == 16);
  MarkedSequence bad = seq;
  bad.tail_marker = seq.ids.size();
  CHECK_THROWS_AS(ent.encode(bad), Error);
}

TEST_CASE("zero weights and identity norms pass embeddings through") {
  Rng rng(11);
  const SubwordVocab v = SubwordVocab::from_pieces({"a", "b", "c"});
  auto cfg = toy(v, PoolingMode::kEntityStart);
  cfg.layer_norm = false;
  TransformerEncoder enc(cfg, rng);
  for (auto& layer : enc.layers()) {
    for (Tensor* t : {&layer.wq, &layer.bq, &layer.wk, &layer.bk, &layer.wv, &layer.bv, &layer.wo, &layer.bo,
                      &layer.w1, &layer.b1, &layer.w2, &layer.b2}) {
      for (double& x : t->mutable_data()) x = 0.0;
    }
  }
  const auto seq = sample_sequence(v);
  const auto out = vals(enc.encode(seq));
  std::size_t k = 0;
  for (std::size_t at : {seq.head_marker, seq.tail_marker}) {
    for (std::size_t c = 0; c < 8; ++c, ++k) {
      const double expect = enc.token_embeddings().at(seq.ids[at], c) + enc.position_embeddings().at(at, c);
      CHECK(out[k] == doctest::Approx(expect).epsilon(1e-12));
    }
  }
}

TEST_CASE("attention rows sum to one in every layer and head") {
  Rng rng(12);
  const SubwordVocab v = SubwordVocab::from_pieces({"a", "b", "c"});
  const TransformerEncoder enc(toy(v, PoolingMode::kCls), rng);
  const auto trace = enc.trace(sample_sequence(v));
  REQUIRE(trace.attention.size() == 2);
  for (const auto& layer : trace.attention) {
    REQUIRE(layer.size() == 2);
    for (const auto& a : layer) {
      for (std::size_t i = 0; i < a.rows(); ++i) {
        double s = 0;
        for (std::size_t j = 0; j < a.cols(); ++j) s += a.at(i, j);
        CHECK(std::abs(s - 1.0) < 1e-9);
      }
    }
  }
  for (double x : trace.output.data()) CHECK(std::isfinite(x));
}

TEST_CASE("transformer parameter gradients match finite differences") {
  const auto out = nre::testing::transformer_gradient_check(4);
  INFO(out.detail);
  CHECK(out.worst < 1e-4);
}
