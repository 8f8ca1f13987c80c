#include "kd/model.hpp"

#include <cmath>

namespace kd {

void ModelConfig::validate() const {
  std::string errs;
  auto fail = [&errs](const std::string& m) {
    if (!errs.empty()) errs += "; ";
    errs += m;
  };
  if (num_layers < 1) fail("num_layers must be >= 1");
  if (hidden_dim < 1) fail("hidden_dim must be >= 1");
  if (num_heads < 1) fail("num_heads must be >= 1");
  if (num_heads >= 1 && hidden_dim % num_heads != 0)
    fail("hidden_dim " + std::to_string(hidden_dim) +
         " not divisible by num_heads " + std::to_string(num_heads));
  if (vocab_size < 1) fail("vocab_size must be >= 1");
  if (max_seq_len < 1) fail("max_seq_len must be >= 1");
  if (!regression && num_labels < 1) fail("num_labels must be >= 1");
  if (!errs.empty()) throw ConfigError(errs);
}

ParamCount count_parameters(const ModelConfig& cfg) {
  cfg.validate();
  const int64_t d = cfg.hidden_dim;
  const int64_t f = cfg.ffn();
  const int64_t labels = cfg.labels();
  ParamCount c;
  c.embedding = static_cast<int64_t>(cfg.vocab_size) * d +
                static_cast<int64_t>(cfg.max_seq_len) * d + 2 * d + 2 * d;
  const int64_t per_layer = 4 * (d * d + d)    // attention projections
                            + 2 * 2 * d        // two layer norms
                            + d * f + f        // FFN in
                            + f * d + d;       // FFN out
  c.encoder = cfg.num_layers * per_layer;
  c.head = d * d + d + d * labels + labels;
  if (cfg.separate_mlm_decoder) c.head += d * cfg.vocab_size;
  c.total = c.embedding + c.encoder + c.head;
  return c;
}

double estimate_flops(const ModelConfig& cfg, int seq_len) {
  if (seq_len < 1) throw ValueError("sequence length must be >= 1");
  const double n = seq_len;
  const double d = cfg.hidden_dim;
  const double f = cfg.ffn();
  const double per_layer = 8.0 * n * d * d + 4.0 * n * n * d + 4.0 * n * d * f;
  return cfg.num_layers * per_layer;
}

namespace {

Tensor alloc_param(const Shape& shape, double fill, Tape* tape) {
  Tensor t = Tensor::full(shape, fill, tape);
  t.mark_param();
  return t;
}

}  // namespace

TransformerModel::TransformerModel(ModelConfig cfg, Tape* tape)
    : cfg_(std::move(cfg)), tape_(tape) {
  cfg_.validate();
  const int d = cfg_.hidden_dim;
  const int f = cfg_.ffn();
  auto weight = [&](const std::string& name, Shape shape) {
    params_.emplace(name, alloc_param(shape, 0.0, tape_));
  };
  auto gain = [&](const std::string& name) {
    params_.emplace(name, alloc_param({d}, 1.0, tape_));
  };
  weight("embeddings.token", {cfg_.vocab_size, d});
  weight("embeddings.position", {cfg_.max_seq_len, d});
  weight("embeddings.segment", {2, d});
  gain("embeddings.ln.gamma");
  weight("embeddings.ln.beta", {d});
  for (int l = 0; l < cfg_.num_layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    weight(p + "attn.wq", {d, d});
    weight(p + "attn.bq", {d});
    weight(p + "attn.wk", {d, d});
    weight(p + "attn.bk", {d});
    weight(p + "attn.wv", {d, d});
    weight(p + "attn.bv", {d});
    weight(p + "attn.wo", {d, d});
    weight(p + "attn.bo", {d});
    gain(p + "ln1.gamma");
    weight(p + "ln1.beta", {d});
    weight(p + "ffn.w1", {d, f});
    weight(p + "ffn.b1", {f});
    weight(p + "ffn.w2", {f, d});
    weight(p + "ffn.b2", {d});
    gain(p + "ln2.gamma");
    weight(p + "ln2.beta", {d});
  }
  weight("pooler.w", {d, d});
  weight("pooler.b", {d});
  weight("head.w", {d, cfg_.labels()});
  weight("head.b", {cfg_.labels()});
  if (cfg_.separate_mlm_decoder) weight("mlm.decoder", {d, cfg_.vocab_size});
}

Tensor& TransformerModel::param(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw ConfigError("unknown parameter " + name);
  return it->second;
}

const Tensor& TransformerModel::param(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw ConfigError("unknown parameter " + name);
  return it->second;
}

AttentionOutput TransformerModel::multi_head_attention(const Tensor& x,
                                                       int layer) const {
  const int n = x.dim(0);
  if (n > cfg_.max_seq_len)
    throw ValueError("sequence length " + std::to_string(n) +
                     " exceeds max_seq_len " + std::to_string(cfg_.max_seq_len));
  const std::string p = "layers." + std::to_string(layer) + ".";
  const int d = cfg_.hidden_dim;
  const int dk = cfg_.head_dim();
  Tensor q = add_row_broadcast(matmul(x, param(p + "attn.wq")), param(p + "attn.bq"));
  Tensor k = add_row_broadcast(matmul(x, param(p + "attn.wk")), param(p + "attn.bk"));
  Tensor v = add_row_broadcast(matmul(x, param(p + "attn.wv")), param(p + "attn.bv"));
  AttentionOutput out;
  std::vector<Tensor> contexts;
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));
  for (int h = 0; h < cfg_.num_heads; ++h) {
    Tensor qh = slice_cols(q, h * dk, dk);
    Tensor kh = slice_cols(k, h * dk, dk);
    Tensor vh = slice_cols(v, h * dk, dk);
    Tensor scores = scale(matmul(qh, transpose(kh)), inv_sqrt_dk);
    Tensor attn = softmax_rows(scores);
    contexts.push_back(matmul(attn, vh));
    out.attention.push_back(attn);
    out.queries.push_back(std::move(qh));
    out.keys.push_back(std::move(kh));
    out.values.push_back(std::move(vh));
  }
  Tensor merged = cfg_.num_heads == 1 ? contexts[0] : concat_cols(contexts);
  (void)d;
  out.output =
      add_row_broadcast(matmul(merged, param(p + "attn.wo")), param(p + "attn.bo"));
  return out;
}

Tensor TransformerModel::feed_forward(const Tensor& x, int layer) const {
  const std::string p = "layers." + std::to_string(layer) + ".";
  Tensor h = add_row_broadcast(matmul(x, param(p + "ffn.w1")), param(p + "ffn.b1"));
  h = activation(h, cfg_.act);
  return add_row_broadcast(matmul(h, param(p + "ffn.w2")), param(p + "ffn.b2"));
}

FeatureTrace TransformerModel::forward(const std::vector<int>& token_ids) const {
  const int n = static_cast<int>(token_ids.size());
  if (n < 1) throw ValueError("empty input sequence");
  if (n > cfg_.max_seq_len)
    throw ValueError("sequence length " + std::to_string(n) +
                     " exceeds max_seq_len " + std::to_string(cfg_.max_seq_len));
  for (int id : token_ids)
    if (id < 0 || id >= cfg_.vocab_size)
      throw ValueError("token id " + std::to_string(id) +
                       " out of vocabulary of size " +
                       std::to_string(cfg_.vocab_size));
  std::vector<int> positions(token_ids.size());
  for (int i = 0; i < n; ++i) positions[static_cast<size_t>(i)] = i;
  const std::vector<int> segments(token_ids.size(), 0);

  Tensor emb = add(gather_rows(param("embeddings.token"), token_ids),
                   gather_rows(param("embeddings.position"), positions));
  emb = add(emb, gather_rows(param("embeddings.segment"), segments));
  FeatureTrace trace;
  trace.embeddings = layer_norm(emb, param("embeddings.ln.gamma"),
                                param("embeddings.ln.beta"));

  Tensor h = trace.embeddings;
  for (int l = 0; l < cfg_.num_layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    AttentionOutput attn = multi_head_attention(h, l);
    Tensor mid = layer_norm(add(h, attn.output), param(p + "ln1.gamma"),
                            param(p + "ln1.beta"));
    Tensor ffn = feed_forward(mid, l);
    h = layer_norm(add(mid, ffn), param(p + "ln2.gamma"), param(p + "ln2.beta"));
    LayerTrace lt;
    lt.attention = std::move(attn.attention);
    lt.queries = std::move(attn.queries);
    lt.keys = std::move(attn.keys);
    lt.values = std::move(attn.values);
    lt.hidden = h;
    trace.layers.push_back(std::move(lt));
  }
  Tensor first = slice_rows(h, 0, 1);
  trace.pooled = tanh(
      add_row_broadcast(matmul(first, param("pooler.w")), param("pooler.b")));
  trace.logits =
      add_row_broadcast(matmul(trace.pooled, param("head.w")), param("head.b"));
  return trace;
}

Tensor TransformerModel::mlm_logits(const Tensor& hidden) const {
  if (cfg_.separate_mlm_decoder) return matmul(hidden, param("mlm.decoder"));
  return matmul(hidden, transpose(param("embeddings.token")));
}

void TransformerModel::copy_params_from(const TransformerModel& other) {
  for (auto& [name, t] : params_) {
    const Tensor& src = other.param(name);
    if (src.shape() != t.shape())
      throw ConfigError("parameter " + name + " shape mismatch: " +
                        shape_str(src.shape()) + " vs " + shape_str(t.shape()));
    t.values() = src.values();
  }
}

int64_t TransformerModel::num_scalars() const {
  int64_t n = 0;
  for (const auto& [name, t] : params_) n += t.numel();
  return n;
}

}  // namespace kd
