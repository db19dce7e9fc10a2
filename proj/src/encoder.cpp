#include "nre/encoder.hpp"

#include <cmath>

#include "nre/error.hpp"

namespace nre {

EncoderKind parse_encoder_kind(const std::string& name) {
  if (name == "cnn") return EncoderKind::kCnn;
  if (name == "pcnn") return EncoderKind::kPcnn;
  if (name == "transformer") return EncoderKind::kTransformer;
  fail(ErrorCode::kConfig, "unknown encoder kind '" + name + "'");
}

std::string encoder_kind_name(EncoderKind kind) {
  switch (kind) {
    case EncoderKind::kCnn:
      return "cnn";
    case EncoderKind::kPcnn:
      return "pcnn";
    case EncoderKind::kTransformer:
      return "transformer";
  }
  return "unknown";
}

std::size_t Encoder::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.tensor.numel();
  return n;
}

Tensor xavier_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::vector<double> w(fan_in * fan_out);
  for (double& v : w) v = rng.uniform(-bound, bound);
  return Tensor::from_vector({fan_in, fan_out}, std::move(w), true);
}

Tensor uniform_table(std::size_t rows, std::size_t cols, double bound, Rng& rng) {
  std::vector<double> w(rows * cols);
  for (double& v : w) v = rng.uniform(-bound, bound);
  return Tensor::from_vector({rows, cols}, std::move(w), true);
}

// ---- CNN / PCNN -------------------------------------------------------------------

nlohmann::json CnnConfig::to_json() const {
  return {{"vocab_size", vocab_size}, {"word_dim", word_dim}, {"pos_dim", pos_dim},
          {"hidden", hidden},         {"window", window},     {"max_pos", max_pos}};
}

CnnConfig CnnConfig::from_json(const nlohmann::json& j) {
  CnnConfig c;
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.word_dim = j.value("word_dim", c.word_dim);
  c.pos_dim = j.value("pos_dim", c.pos_dim);
  c.hidden = j.value("hidden", c.hidden);
  c.window = j.value("window", c.window);
  c.max_pos = j.value("max_pos", c.max_pos);
  return c;
}

CnnEncoder::CnnEncoder(EncoderKind kind, const CnnConfig& config, Rng& rng) : kind_(kind), config_(config) {
  if (kind == EncoderKind::kTransformer) fail(ErrorCode::kConfig, "CnnEncoder needs kind cnn or pcnn");
  if (config.hidden == 0) fail(ErrorCode::kConfig, "hidden size must be positive");
  if (config.window % 2 == 0) fail(ErrorCode::kConfig, "convolution window must be odd");
  if (config.vocab_size < Vocab::kReserved) fail(ErrorCode::kConfig, "vocabulary too small");
  const std::size_t positions = 2 * config.max_pos + 1;
  const std::size_t features = config.word_dim + 2 * config.pos_dim;
  word_ = uniform_table(config.vocab_size, config.word_dim, 0.1, rng);
  pos1_ = uniform_table(positions, config.pos_dim, 0.1, rng);
  pos2_ = uniform_table(positions, config.pos_dim, 0.1, rng);
  filters_ = xavier_uniform(config.window * features, config.hidden, rng);
  bias_ = Tensor::zeros({config.hidden}, true);
}

std::size_t CnnEncoder::output_dim() const {
  return kind_ == EncoderKind::kPcnn ? 3 * config_.hidden : config_.hidden;
}

EncoderOutput CnnEncoder::forward(std::span<const ModelInput* const> batch, const ForwardContext& ctx) const {
  if (batch.empty()) fail(ErrorCode::kContract, "encoder forward on an empty batch");
  const std::size_t full = batch.front()->words.token_ids.size();
  // Trailing positions masked in every sequence look exactly like the
  // window extension, so the batch is cut after its last real token.
  std::size_t L = 0;
  for (const ModelInput* in : batch) {
    const auto& mask = in->words.attention_mask;
    for (std::size_t i = std::min(mask.size(), full); i > L; --i) {
      if (mask[i - 1] == 1) {
        L = i;
        break;
      }
    }
  }
  if (L == 0) L = full;
  const std::size_t half = config_.window / 2;
  const std::size_t padded = L + 2 * half;
  const std::size_t positions = 2 * config_.max_pos + 1;

  std::vector<std::size_t> tok, p1, p2;
  std::vector<int> pool_ids;
  tok.reserve(batch.size() * padded);
  for (const ModelInput* in : batch) {
    const EncodedInstance& e = in->words;
    if (e.token_ids.size() != full || e.pos1_ids.size() != full || e.pos2_ids.size() != full ||
        e.attention_mask.size() != full || e.segment_ids.size() != full) {
      fail(ErrorCode::kDimension, "encoder batch mixes sequence lengths");
    }
    for (std::size_t t = 0; t < padded; ++t) {
      const bool inside = t >= half && t < half + L;
      const std::size_t i = t - half;
      if (inside && e.attention_mask[i] == 1) {
        if (e.pos1_ids[i] >= positions || e.pos2_ids[i] >= positions) {
          fail(ErrorCode::kIndex, "position id outside the position table");
        }
        tok.push_back(e.token_ids[i]);
        p1.push_back(e.pos1_ids[i]);
        p2.push_back(e.pos2_ids[i]);
      } else {
        tok.push_back(Vocab::kPad);
        p1.push_back(0);
        p2.push_back(0);
      }
    }
    for (std::size_t i = 0; i < L; ++i) {
      pool_ids.push_back(kind_ == EncoderKind::kPcnn ? e.segment_ids[i] : e.attention_mask[i]);
    }
  }

  Tensor words = embedding_gather(word_, tok);
  Tensor used = ctx.word_perturbation ? add(words, *ctx.word_perturbation) : words;
  Tensor x = concat({used, embedding_gather(pos1_, p1), embedding_gather(pos2_, p2)}, 1);
  Tensor conv = conv1d_window(x, filters_, bias_, config_.window, padded);
  const std::size_t pieces = kind_ == EncoderKind::kPcnn ? 3 : 1;
  Tensor pooled = segment_max_pool(conv, pool_ids, pieces, L);
  return {tanh(pooled), words};
}

Tensor CnnEncoder::encode(const EncodedInstance& e) const {
  ModelInput in{e, {}};
  const ModelInput* ptr = &in;
  Tensor reps = forward(std::span<const ModelInput* const>(&ptr, 1), {}).reps;
  return reshape(reps, {output_dim()});
}

std::vector<NamedParameter> CnnEncoder::parameters() const {
  return {{"encoder.word", word_},
          {"encoder.pos1", pos1_},
          {"encoder.pos2", pos2_},
          {"encoder.filters", filters_},
          {"encoder.bias", bias_}};
}

nlohmann::json CnnEncoder::describe() const {
  auto j = config_.to_json();
  j["kind"] = encoder_kind_name(kind_);
  return j;
}

Tensor cnn_encode(const EncodedInstance& e, const CnnEncoder& encoder) {
  if (encoder.kind() != EncoderKind::kCnn) fail(ErrorCode::kConfig, "cnn_encode needs a cnn encoder");
  return encoder.encode(e);
}

Tensor pcnn_encode(const EncodedInstance& e, const CnnEncoder& encoder) {
  if (encoder.kind() != EncoderKind::kPcnn) fail(ErrorCode::kConfig, "pcnn_encode needs a pcnn encoder");
  return encoder.encode(e);
}

// ---- transformer ------------------------------------------------------------------

nlohmann::json TransformerConfig::to_json() const {
  return {{"vocab_size", vocab_size},
          {"d_model", d_model},
          {"heads", heads},
          {"layers", layers},
          {"d_ff", d_ff},
          {"max_positions", max_positions},
          {"pooling", pooling == PoolingMode::kCls ? "cls" : "entity_start"},
          {"layer_norm", layer_norm}};
}

TransformerConfig TransformerConfig::from_json(const nlohmann::json& j) {
  TransformerConfig c;
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.d_model = j.value("d_model", c.d_model);
  c.heads = j.value("heads", c.heads);
  c.layers = j.value("layers", c.layers);
  c.d_ff = j.value("d_ff", c.d_ff);
  c.max_positions = j.value("max_positions", c.max_positions);
  const std::string pooling = j.value("pooling", std::string("cls"));
  if (pooling == "cls") {
    c.pooling = PoolingMode::kCls;
  } else if (pooling == "entity_start") {
    c.pooling = PoolingMode::kEntityStart;
  } else {
    fail(ErrorCode::kConfig, "unknown pooling mode '" + pooling + "'");
  }
  c.layer_norm = j.value("layer_norm", true);
  return c;
}

TransformerEncoder::TransformerEncoder(const TransformerConfig& config, Rng& rng) : config_(config) {
  if (config.layers < 1) fail(ErrorCode::kConfig, "transformer needs at least one layer");
  if (config.heads == 0 || config.d_model % config.heads != 0) {
    fail(ErrorCode::kConfig, "d_model must be divisible by the head count");
  }
  const std::size_t d = config.d_model;
  tokens_ = uniform_table(config.vocab_size, d, 0.1, rng);
  positions_ = uniform_table(config.max_positions, d, 0.1, rng);
  for (std::size_t l = 0; l < config.layers; ++l) {
    TransformerLayer layer;
    layer.wq = xavier_uniform(d, d, rng);
    layer.wk = xavier_uniform(d, d, rng);
    layer.wv = xavier_uniform(d, d, rng);
    layer.wo = xavier_uniform(d, d, rng);
    layer.w1 = xavier_uniform(d, config.d_ff, rng);
    layer.w2 = xavier_uniform(config.d_ff, d, rng);
    layer.bq = Tensor::zeros({d}, true);
    layer.bk = Tensor::zeros({d}, true);
    layer.bv = Tensor::zeros({d}, true);
    layer.bo = Tensor::zeros({d}, true);
    layer.b1 = Tensor::zeros({config.d_ff}, true);
    layer.b2 = Tensor::zeros({d}, true);
    layer.ln1_gamma = Tensor::full({d}, 1.0, true);
    layer.ln1_beta = Tensor::zeros({d}, true);
    layer.ln2_gamma = Tensor::full({d}, 1.0, true);
    layer.ln2_beta = Tensor::zeros({d}, true);
    layers_.push_back(std::move(layer));
  }
}

std::size_t TransformerEncoder::output_dim() const {
  return config_.pooling == PoolingMode::kCls ? config_.d_model : 2 * config_.d_model;
}

TransformerTrace TransformerEncoder::run(const MarkedSequence& seq, bool keep_attention) const {
  const std::size_t n = seq.ids.size();
  if (n == 0) fail(ErrorCode::kContract, "empty subword sequence");
  if (n > config_.max_positions) {
    fail(ErrorCode::kIndex, "sequence of " + std::to_string(n) + " exceeds " +
                                std::to_string(config_.max_positions) + " positions");
  }
  if (config_.pooling == PoolingMode::kEntityStart && (seq.head_marker >= n || seq.tail_marker >= n)) {
    fail(ErrorCode::kIndex, "entity marker index outside the sequence");
  }
  std::vector<std::size_t> pos(n);
  for (std::size_t i = 0; i < n; ++i) pos[i] = i;
  Tensor x = add(embedding_gather(tokens_, seq.ids), embedding_gather(positions_, pos));

  const std::size_t dh = config_.d_model / config_.heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  TransformerTrace trace;
  for (const auto& layer : layers_) {
    Tensor q = add_bias(matmul(x, layer.wq), layer.bq);
    Tensor k = add_bias(matmul(x, layer.wk), layer.bk);
    Tensor v = add_bias(matmul(x, layer.wv), layer.bv);
    std::vector<Tensor> heads;
    std::vector<Tensor> weights;
    for (std::size_t h = 0; h < config_.heads; ++h) {
      Tensor qh = slice_cols(q, h * dh, (h + 1) * dh);
      Tensor kh = slice_cols(k, h * dh, (h + 1) * dh);
      Tensor vh = slice_cols(v, h * dh, (h + 1) * dh);
      Tensor a = softmax_rows(scale(matmul(qh, transpose(kh)), inv_sqrt));
      heads.push_back(matmul(a, vh));
      if (keep_attention) weights.push_back(a);
    }
    Tensor attn = add_bias(matmul(concat(heads, 1), layer.wo), layer.bo);
    x = add(x, attn);
    if (config_.layer_norm) x = layer_norm(x, layer.ln1_gamma, layer.ln1_beta);
    Tensor ff = add_bias(matmul(relu(add_bias(matmul(x, layer.w1), layer.b1)), layer.w2), layer.b2);
    x = add(x, ff);
    if (config_.layer_norm) x = layer_norm(x, layer.ln2_gamma, layer.ln2_beta);
    if (keep_attention) trace.attention.push_back(std::move(weights));
  }
  if (keep_attention) trace.hidden = x;
  if (config_.pooling == PoolingMode::kCls) {
    trace.output = slice_rows(x, 0, 1);
  } else {
    trace.output = concat({slice_rows(x, seq.head_marker, seq.head_marker + 1),
                           slice_rows(x, seq.tail_marker, seq.tail_marker + 1)},
                          1);
  }
  return trace;
}

EncoderOutput TransformerEncoder::forward(std::span<const ModelInput* const> batch, const ForwardContext& ctx) const {
  if (batch.empty()) fail(ErrorCode::kContract, "encoder forward on an empty batch");
  if (ctx.word_perturbation) fail(ErrorCode::kConfig, "transformer encoder does not take word perturbations");
  std::vector<Tensor> rows;
  rows.reserve(batch.size());
  for (const ModelInput* in : batch) rows.push_back(run(in->marked, false).output);
  return {rows.size() == 1 ? rows.front() : concat(rows, 0), Tensor()};
}

Tensor TransformerEncoder::encode(const MarkedSequence& seq) const {
  return reshape(run(seq, false).output, {output_dim()});
}

TransformerTrace TransformerEncoder::trace(const MarkedSequence& seq) const { return run(seq, true); }

std::vector<NamedParameter> TransformerEncoder::parameters() const {
  std::vector<NamedParameter> out = {{"encoder.tokens", tokens_}, {"encoder.positions", positions_}};
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const auto& L = layers_[l];
    const std::string p = "encoder.layer" + std::to_string(l) + ".";
    for (const auto& [name, t] : std::vector<std::pair<const char*, const Tensor*>>{
             {"wq", &L.wq},   {"bq", &L.bq},   {"wk", &L.wk},   {"bk", &L.bk},
             {"wv", &L.wv},   {"bv", &L.bv},   {"wo", &L.wo},   {"bo", &L.bo},
             {"w1", &L.w1},   {"b1", &L.b1},   {"w2", &L.w2},   {"b2", &L.b2},
             {"ln1_gamma", &L.ln1_gamma},      {"ln1_beta", &L.ln1_beta},
             {"ln2_gamma", &L.ln2_gamma},      {"ln2_beta", &L.ln2_beta}}) {
      out.push_back({p + name, *t});
    }
  }
  return out;
}

nlohmann::json TransformerEncoder::describe() const {
  auto j = config_.to_json();
  j["kind"] = "transformer";
  return j;
}

Tensor transformer_encode(const MarkedSequence& seq, const TransformerEncoder& encoder) { return encoder.encode(seq); }

std::unique_ptr<Encoder> make_encoder(const nlohmann::json& descriptor, Rng& rng) {
  const EncoderKind kind = parse_encoder_kind(descriptor.at("kind").get<std::string>());
  if (kind == EncoderKind::kTransformer) {
    return std::make_unique<TransformerEncoder>(TransformerConfig::from_json(descriptor), rng);
  }
  return std::make_unique<CnnEncoder>(kind, CnnConfig::from_json(descriptor), rng);
}

}  // namespace nre
