#pragma once

#include <cstddef>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "nre/rng.hpp"
#include "nre/tensor.hpp"
#include "nre/tokenize.hpp"

namespace nre {

enum class EncoderKind { kCnn, kPcnn, kTransformer };

EncoderKind parse_encoder_kind(const std::string& name);
std::string encoder_kind_name(EncoderKind kind);

struct NamedParameter {
  std::string name;
  Tensor tensor;
};

// One encoder input. Word-level encoders read `words`; the transformer reads
// `marked`.
struct ModelInput {
  EncodedInstance words;
  MarkedSequence marked;
};

struct ForwardContext {
  bool training = false;
  Rng* rng = nullptr;
  // Added to the looked-up word embeddings (same shape as
  // EncoderOutput::word_embeddings); used by adversarial training.
  const Tensor* word_perturbation = nullptr;
};

struct EncoderOutput {
  Tensor reps;             // [batch x output_dim]
  Tensor word_embeddings;  // looked-up word vectors before perturbation
};

class Encoder {
 public:
  virtual ~Encoder() = default;

  virtual EncoderKind kind() const = 0;
  virtual std::size_t output_dim() const = 0;
  virtual EncoderOutput forward(std::span<const ModelInput* const> batch, const ForwardContext& ctx) const = 0;
  virtual std::vector<NamedParameter> parameters() const = 0;
  // Architecture descriptor; enough to rebuild an identically shaped encoder.
  virtual nlohmann::json describe() const = 0;

  std::size_t parameter_count() const;
};

// Draws from uniform(-sqrt(6/(fan_in+fan_out)), +sqrt(6/(fan_in+fan_out))).
Tensor xavier_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng);
Tensor uniform_table(std::size_t rows, std::size_t cols, double bound, Rng& rng);

// ---- convolutional ------------------------------------------------------------

struct CnnConfig {
  std::size_t vocab_size = 0;
  std::size_t word_dim = 50;
  std::size_t pos_dim = 5;
  std::size_t hidden = 230;
  std::size_t window = 3;
  std::size_t max_pos = 100;

  nlohmann::json to_json() const;
  static CnnConfig from_json(const nlohmann::json& j);
};

// Word + two position embeddings, windowed convolution, masked max pooling
// (one piece for CNN, three entity-delimited pieces for PCNN), tanh.
//
// Sequences are padded by window/2 positions on both sides; every padding
// position (outside the sequence or masked out) carries the feature of
// (PAD token, position id 0, position id 0), so outputs do not depend on
// what the padding region holds.
class CnnEncoder final : public Encoder {
 public:
  CnnEncoder(EncoderKind kind, const CnnConfig& config, Rng& rng);

  EncoderKind kind() const override { return kind_; }
  std::size_t output_dim() const override;
  EncoderOutput forward(std::span<const ModelInput* const> batch, const ForwardContext& ctx) const override;
  std::vector<NamedParameter> parameters() const override;
  nlohmann::json describe() const override;

  // Single instance: [hidden] (CNN) or [3 * hidden] (PCNN).
  Tensor encode(const EncodedInstance& e) const;

  const CnnConfig& config() const { return config_; }
  const Tensor& word_embeddings() const { return word_; }
  Tensor& word_embeddings() { return word_; }
  const Tensor& pos1_embeddings() const { return pos1_; }
  const Tensor& pos2_embeddings() const { return pos2_; }
  const Tensor& filters() const { return filters_; }
  const Tensor& bias() const { return bias_; }

 private:
  EncoderKind kind_;
  CnnConfig config_;
  Tensor word_;
  Tensor pos1_;
  Tensor pos2_;
  Tensor filters_;  // [window * feature_dim x hidden]
  Tensor bias_;     // [hidden]
};

Tensor cnn_encode(const EncodedInstance& e, const CnnEncoder& encoder);
Tensor pcnn_encode(const EncodedInstance& e, const CnnEncoder& encoder);

// ---- transformer ----------------------------------------------------------------

enum class PoolingMode { kCls, kEntityStart };

struct TransformerConfig {
  std::size_t vocab_size = 0;
  std::size_t d_model = 64;
  std::size_t heads = 4;
  std::size_t layers = 2;
  std::size_t d_ff = 128;
  std::size_t max_positions = 128;
  PoolingMode pooling = PoolingMode::kCls;
  bool layer_norm = true;  // false makes both norms the identity

  nlohmann::json to_json() const;
  static TransformerConfig from_json(const nlohmann::json& j);
};

struct TransformerLayer {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor w1, b1, w2, b2;
  Tensor ln1_gamma, ln1_beta, ln2_gamma, ln2_beta;
};

struct TransformerTrace {
  Tensor output;
  Tensor hidden;  // [n x d_model] final token states
  // Per layer, per head: [n x n] attention weights.
  std::vector<std::vector<Tensor>> attention;
};

// Post-norm transformer stack over a marker-annotated subword sequence.
class TransformerEncoder final : public Encoder {
 public:
  TransformerEncoder(const TransformerConfig& config, Rng& rng);

  EncoderKind kind() const override { return EncoderKind::kTransformer; }
  std::size_t output_dim() const override;
  EncoderOutput forward(std::span<const ModelInput* const> batch, const ForwardContext& ctx) const override;
  std::vector<NamedParameter> parameters() const override;
  nlohmann::json describe() const override;

  // Pooled representation, [d_model] or [2 * d_model].
  Tensor encode(const MarkedSequence& seq) const;
  TransformerTrace trace(const MarkedSequence& seq) const;

  const TransformerConfig& config() const { return config_; }
  std::vector<TransformerLayer>& layers() { return layers_; }
  const Tensor& token_embeddings() const { return tokens_; }
  const Tensor& position_embeddings() const { return positions_; }

 private:
  TransformerTrace run(const MarkedSequence& seq, bool keep_attention) const;

  TransformerConfig config_;
  Tensor tokens_;
  Tensor positions_;
  std::vector<TransformerLayer> layers_;
};

Tensor transformer_encode(const MarkedSequence& seq, const TransformerEncoder& encoder);

// Rebuilds an encoder from describe() output with freshly initialized weights.
std::unique_ptr<Encoder> make_encoder(const nlohmann::json& descriptor, Rng& rng);

}  // namespace nre
