#include "kd/init.hpp"

#include <cmath>
#include <random>

#include "trainer_util.hpp"

namespace kd {

using internal::BatchSampler;
using internal::mix_seed;

namespace {

bool is_ln_gain(const std::string& name) {
  return name.size() >= 6 && name.ends_with(".gamma");
}

void fill_truncated_normal(Tensor& t, std::mt19937_64& rng, double stddev) {
  if (stddev == 0.0) {
    std::fill(t.values().begin(), t.values().end(), 0.0);
    return;
  }
  // Three-sigma truncation keeps the sample variance within a few percent
  // of stddev^2 while still bounding outliers.
  std::normal_distribution<double> dist(0.0, stddev);
  for (double& x : t.values()) {
    double s = dist(rng);
    while (std::fabs(s) > 3.0 * stddev) s = dist(rng);
    x = s;
  }
}

void init_param(const std::string& name, Tensor& t, std::mt19937_64& rng,
                double stddev) {
  if (t.rank() >= 2) {
    fill_truncated_normal(t, rng, stddev);
  } else if (is_ln_gain(name)) {
    std::fill(t.values().begin(), t.values().end(), 1.0);
  } else {
    std::fill(t.values().begin(), t.values().end(), 0.0);
  }
}

/// Pooled MLM cross entropy over all masked positions of a batch of
/// already-masked examples. Zero masked positions yields a constant zero.
Tensor mlm_batch_loss(const TransformerModel& model,
                      const std::vector<MaskedExample>& batch,
                      std::vector<FeatureTrace>* traces_out) {
  std::vector<Tensor> selected;
  std::vector<int> targets;
  for (const MaskedExample& ex : batch) {
    FeatureTrace trace = model.forward(ex.ids);
    Tensor logits = model.mlm_logits(trace.hidden(trace.num_layers()));
    std::vector<int> positions;
    for (size_t i = 0; i < ex.targets.size(); ++i)
      if (ex.targets[i] >= 0) {
        positions.push_back(static_cast<int>(i));
        targets.push_back(ex.targets[i]);
      }
    if (!positions.empty())
      selected.push_back(gather_rows(logits, positions));
    if (traces_out) traces_out->push_back(std::move(trace));
  }
  if (selected.empty()) return Tensor::scalar(0.0);
  Tensor rows = concat_rows(selected);
  const int m = rows.dim(0), v = rows.dim(1);
  Tensor onehot = Tensor::zeros({m, v});
  for (int i = 0; i < m; ++i)
    onehot.values()[static_cast<size_t>(i) * v + targets[static_cast<size_t>(i)]] = 1.0;
  Tensor logp = log_clamped(softmax_rows(rows));
  return scale(reduce_sum(mul(onehot, logp)), -1.0 / m);
}

std::vector<MaskedExample> mask_batch(const TaskDataset& corpus,
                                      const std::vector<size_t>& indices,
                                      uint64_t seed, int step) {
  std::vector<MaskedExample> out;
  out.reserve(indices.size());
  for (size_t i = 0; i < indices.size(); ++i)
    out.push_back(mask_tokens(
        corpus.train[indices[i]].ids,
        mix_seed(seed, mix_seed(static_cast<uint64_t>(step), i)),
        corpus.vocab_size));
  return out;
}

void check_corpus(const TaskDataset& corpus, const TrainSchedule& schedule) {
  if (corpus.kind != TaskKind::lm_stream)
    throw ConfigError("MLM training expects an lm-stream corpus, got task \"" +
                      corpus.name + "\"");
  if (static_cast<int>(corpus.train.size()) < schedule.batch_size)
    throw ValueError("corpus has " + std::to_string(corpus.train.size()) +
                     " sequences, shorter than one batch of " +
                     std::to_string(schedule.batch_size));
}

}  // namespace

void init_random(TransformerModel& student, uint64_t seed, double stddev) {
  if (stddev < 0.0) throw ValueError("stddev must be non-negative");
  std::mt19937_64 rng(seed);
  for (auto& [name, t] : student.params()) init_param(name, t, rng, stddev);
}

std::vector<double> pretrain_mlm(TransformerModel& student,
                                 const TaskDataset& corpus,
                                 const TrainSchedule& schedule) {
  if (!student.tape()) throw ConfigError("pretrain_mlm needs a taped model");
  check_corpus(corpus, schedule);
  AdamW optim(schedule.optim);
  optim.add_params(student.params());
  BatchSampler sampler(corpus.train.size(), schedule.batch_size,
                       schedule.seed);
  std::vector<double> history;
  for (int step = 0; step < schedule.steps; ++step) {
    student.tape()->clear();
    optim.zero_grad();
    auto batch = mask_batch(corpus, sampler.next(), schedule.seed, step);
    Tensor loss = mlm_batch_loss(student, batch, nullptr);
    const double value = loss.item();
    if (!std::isfinite(value))
      throw DivergenceError("non-finite MLM loss at step " +
                            std::to_string(step + 1));
    if (loss.tracked()) student.tape()->backward(loss);
    optim.step(lr_schedule_scale(step, schedule.steps, schedule.warmup_frac));
    history.push_back(value);
  }
  student.tape()->clear();
  return history;
}

std::vector<double> general_distill(TransformerModel& student,
                                    const TransformerModel& teacher,
                                    const TaskDataset& corpus,
                                    const TrainSchedule& schedule,
                                    const DistillObjective& objective,
                                    ProjectionBank& bank) {
  if (!student.tape()) throw ConfigError("general_distill needs a taped model");
  if (teacher.tape()) throw ConfigError("teacher must be frozen");
  if (teacher.config().vocab_size != student.config().vocab_size)
    throw ConfigError("teacher and student must share the vocabulary");
  check_corpus(corpus, schedule);
  objective.validate(teacher.config(), student.config());

  for (const LossTerm& term : objective.terms)
    if (kind_needs_projection(term.kind))
      bank.get(term.pair.student, term.pair.teacher,
               teacher.config().hidden_dim, student.config().hidden_dim);
  AdamW optim(schedule.optim);
  optim.add_params(student.params());
  for (auto& [pair, w] : bank.projections()) optim.add_param(w);

  BatchSampler sampler(corpus.train.size(), schedule.batch_size,
                       schedule.seed);
  std::vector<double> history;
  for (int step = 0; step < schedule.steps; ++step) {
    student.tape()->clear();
    optim.zero_grad();
    auto batch = mask_batch(corpus, sampler.next(), schedule.seed, step);

    std::vector<FeatureTrace> s_traces;
    Tensor mlm = mlm_batch_loss(student, batch, &s_traces);
    Tensor total = scale(mlm, objective.hard_weight);

    std::vector<FeatureTrace> t_traces;
    t_traces.reserve(batch.size());
    for (const MaskedExample& ex : batch)
      t_traces.push_back(teacher.forward(ex.ids));

    if (objective.response_weight > 0.0) {
      // Soft targets over vocabulary logits at the masked positions.
      std::vector<Tensor> parts;
      for (size_t b = 0; b < batch.size(); ++b) {
        std::vector<int> positions;
        for (size_t i = 0; i < batch[b].targets.size(); ++i)
          if (batch[b].targets[i] >= 0) positions.push_back(static_cast<int>(i));
        if (positions.empty()) continue;
        Tensor zs = gather_rows(
            student.mlm_logits(s_traces[b].hidden(s_traces[b].num_layers())),
            positions);
        Tensor zt = gather_rows(
            teacher.mlm_logits(t_traces[b].hidden(t_traces[b].num_layers())),
            positions);
        parts.push_back(soft_target_loss(zt, zs, objective.temperature));
      }
      if (!parts.empty()) {
        Tensor res = parts[0];
        for (size_t i = 1; i < parts.size(); ++i) res = add(res, parts[i]);
        total = add(total, scale(res, objective.response_weight /
                                          static_cast<double>(parts.size())));
      }
    }
    for (const LossTerm& term : objective.terms) {
      std::vector<Tensor> parts;
      for (size_t b = 0; b < batch.size(); ++b)
        parts.push_back(knowledge_loss(term.kind, t_traces[b], s_traces[b],
                                       term.pair, bank, objective.temperature,
                                       false, objective.relation_pair));
      Tensor value = parts[0];
      for (size_t i = 1; i < parts.size(); ++i) value = add(value, parts[i]);
      total = add(total, scale(value, term.weight /
                                          static_cast<double>(parts.size())));
    }
    const double value = total.item();
    if (!std::isfinite(value))
      throw DivergenceError("non-finite general-distillation loss at step " +
                            std::to_string(step + 1));
    if (total.tracked()) student.tape()->backward(total);
    optim.step(lr_schedule_scale(step, schedule.steps, schedule.warmup_frac));
    history.push_back(value);
  }
  student.tape()->clear();
  return history;
}

void preload(TransformerModel& student, const TransformerModel& teacher,
             const LayerPairPlan& plan, uint64_t head_seed, bool copy_head) {
  const ModelConfig& sc = student.config();
  const ModelConfig& tc = teacher.config();
  if (sc.hidden_dim != tc.hidden_dim)
    throw ConfigError("preload requires equal hidden dimensions, got " +
                      std::to_string(tc.hidden_dim) + " vs " +
                      std::to_string(sc.hidden_dim));
  if (sc.num_heads != tc.num_heads)
    throw ConfigError("preload requires equal head counts");
  if (sc.ffn() != tc.ffn())
    throw ConfigError("preload requires equal FFN dimensions");
  if (sc.vocab_size != tc.vocab_size || sc.max_seq_len > tc.max_seq_len)
    throw ConfigError("preload requires a shared vocabulary and a student "
                      "max_seq_len within the teacher's");

  auto copy_exact = [&](const std::string& name) {
    student.param(name).values() = teacher.param(name).values();
  };
  // Embedding tables may be truncated when the student context is shorter.
  for (const char* name :
       {"embeddings.token", "embeddings.segment", "embeddings.ln.gamma",
        "embeddings.ln.beta"})
    copy_exact(name);
  {
    Tensor& dst = student.param("embeddings.position");
    const Tensor& src = teacher.param("embeddings.position");
    std::copy_n(src.values().begin(), dst.values().size(),
                dst.values().begin());
  }
  for (const LayerPair& pair : plan.pairs) {
    if (pair.student == 0) continue;  // embeddings handled above
    if (pair.student < 1 || pair.student > sc.num_layers ||
        pair.teacher < 1 || pair.teacher > tc.num_layers)
      throw ConfigError("preload plan pair (" + std::to_string(pair.student) +
                        "," + std::to_string(pair.teacher) + ") out of range");
    const std::string sp = "layers." + std::to_string(pair.student - 1) + ".";
    const std::string tp = "layers." + std::to_string(pair.teacher - 1) + ".";
    for (const char* leaf :
         {"attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv",
          "attn.wo", "attn.bo", "ln1.gamma", "ln1.beta", "ffn.w1", "ffn.b1",
          "ffn.w2", "ffn.b2", "ln2.gamma", "ln2.beta"})
      student.param(sp + leaf).values() = teacher.param(tp + leaf).values();
  }
  std::vector<std::string> head_names = {"pooler.w", "pooler.b", "head.w",
                                         "head.b"};
  if (sc.separate_mlm_decoder) head_names.push_back("mlm.decoder");
  if (copy_head) {
    for (const std::string& name : head_names) {
      const Tensor& src = teacher.param(name);
      Tensor& dst = student.param(name);
      if (src.shape() != dst.shape())
        throw ConfigError("copy_head requires matching head shapes for " +
                          name);
      dst.values() = src.values();
    }
  } else {
    std::mt19937_64 rng(head_seed);
    for (const std::string& name : head_names) {
      Tensor& t = student.param(name);
      init_param(name, t, rng, 0.02);
    }
  }
}

}  // namespace kd
