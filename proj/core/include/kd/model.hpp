#pragma once

#include <map>
#include <string>
#include <vector>

#include "kd/tensor.hpp"

namespace kd {

/// Architecture hyperparameters. ffn_dim of 0 means 4 * hidden_dim.
struct ModelConfig {
  int num_layers = 2;
  int hidden_dim = 128;
  int num_heads = 2;
  int ffn_dim = 0;
  int vocab_size = 30522;
  int max_seq_len = 512;
  int num_labels = 2;
  bool regression = false;
  Activation act = Activation::gelu;
  bool separate_mlm_decoder = false;

  int head_dim() const { return hidden_dim / num_heads; }
  int ffn() const { return ffn_dim > 0 ? ffn_dim : 4 * hidden_dim; }
  int labels() const { return regression ? 1 : num_labels; }
  void validate() const;
};

struct ParamCount {
  int64_t embedding = 0;
  int64_t encoder = 0;
  int64_t head = 0;
  int64_t total = 0;
};

/// Exact scalar counts implied by the fixed parameter-name set.
ParamCount count_parameters(const ModelConfig& cfg);

/// Forward-pass flop estimate for the encoder stack at sequence length n,
/// counted as 2x multiply-adds:
///   per layer  8*n*d^2 (Q/K/V/O projections)
///            + 4*n^2*d (attention scores + context)
///            + 4*n*d*d_ff (FFN)
double estimate_flops(const ModelConfig& cfg, int seq_len);

struct LayerTrace {
  std::vector<Tensor> attention;  // per head, n x n rows summing to 1
  std::vector<Tensor> queries;    // per head, n x d_k
  std::vector<Tensor> keys;
  std::vector<Tensor> values;
  Tensor hidden;  // n x d, post-FFN layer norm
};

/// Everything the distillation losses consume from one forward pass.
struct FeatureTrace {
  Tensor embeddings;  // n x d, H_0
  std::vector<LayerTrace> layers;
  Tensor pooled;  // 1 x d
  Tensor logits;  // 1 x num_labels

  /// Hidden state of layer l, with l == 0 meaning the embedding output.
  const Tensor& hidden(int l) const {
    return l == 0 ? embeddings : layers[static_cast<size_t>(l - 1)].hidden;
  }
  int num_layers() const { return static_cast<int>(layers.size()); }
};

struct AttentionOutput {
  Tensor output;  // n x d
  std::vector<Tensor> attention, queries, keys, values;
};

/// BERT-style encoder with post-layer-norm residual ordering. Parameters
/// live in a name -> tensor map whose key set is a pure function of the
/// config. A model built without a tape is a frozen teacher: nothing it
/// produces carries gradients.
class TransformerModel {
 public:
  explicit TransformerModel(ModelConfig cfg, Tape* tape = nullptr);

  const ModelConfig& config() const { return cfg_; }
  Tape* tape() const { return tape_; }

  std::map<std::string, Tensor>& params() { return params_; }
  const std::map<std::string, Tensor>& params() const { return params_; }
  Tensor& param(const std::string& name);
  const Tensor& param(const std::string& name) const;

  FeatureTrace forward(const std::vector<int>& token_ids) const;

  AttentionOutput multi_head_attention(const Tensor& x, int layer) const;
  Tensor feed_forward(const Tensor& x, int layer) const;

  /// Per-token vocabulary logits from a final hidden state [n x d]; uses
  /// the tied token embedding table unless a separate decoder is configured.
  Tensor mlm_logits(const Tensor& hidden) const;

  /// Copies values from another model with identical parameter shapes.
  void copy_params_from(const TransformerModel& other);

  int64_t num_scalars() const;

 private:
  ModelConfig cfg_;
  Tape* tape_ = nullptr;
  std::map<std::string, Tensor> params_;
};

}  // namespace kd
