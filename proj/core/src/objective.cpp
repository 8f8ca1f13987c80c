#include "kd/objective.hpp"

#include <algorithm>
#include <cmath>

#include "trainer_util.hpp"

namespace kd {

using internal::BatchSampler;
using internal::format_value;

std::string LossTerm::label() const {
  return kind_name(kind) + "@" + std::to_string(pair.student) + "-" +
         std::to_string(pair.teacher);
}

void DistillObjective::validate(const ModelConfig& teacher,
                                const ModelConfig& student) const {
  std::vector<std::string> errs;
  if (!(temperature > 0.0)) errs.push_back("temperature must be positive");
  if (hard_weight < 0.0) errs.push_back("hard_weight must be non-negative");
  if (response_weight < 0.0)
    errs.push_back("response_weight must be non-negative");
  if (student.num_layers > teacher.num_layers)
    errs.push_back("student must not be deeper than the teacher");
  for (const LossTerm& term : terms) {
    const std::string where = "term " + term.label();
    if (term.kind == KnowledgeKind::soft_target)
      errs.push_back(where + ": soft_target is the standing response loss and "
                             "may not appear as a term");
    if (term.weight < 0.0) errs.push_back(where + ": negative weight");
    const bool embeddings_ok = term.kind == KnowledgeKind::hidden_mse ||
                               term.kind == KnowledgeKind::cos ||
                               term.kind == KnowledgeKind::pkd ||
                               term.kind == KnowledgeKind::mmd ||
                               term.kind == KnowledgeKind::gram;
    const int lo = embeddings_ok ? 0 : 1;
    if (term.pair.student < lo || term.pair.student > student.num_layers)
      errs.push_back(where + ": student layer out of range");
    if (term.pair.teacher < lo || term.pair.teacher > teacher.num_layers)
      errs.push_back(where + ": teacher layer out of range");
    if (kind_needs_equal_heads(term.kind) &&
        teacher.num_heads != student.num_heads)
      errs.push_back(where + ": q/k/v relations need equal head counts (" +
                     std::to_string(teacher.num_heads) + " vs " +
                     std::to_string(student.num_heads) + ")");
  }
  if (!errs.empty()) {
    std::string all;
    for (size_t i = 0; i < errs.size(); ++i) {
      if (i) all += "; ";
      all += errs[i];
    }
    throw ConfigError(all);
  }
}

namespace {

Tensor batch_mean(std::vector<Tensor>& parts) {
  Tensor acc = parts[0];
  for (size_t i = 1; i < parts.size(); ++i) acc = add(acc, parts[i]);
  return scale(acc, 1.0 / static_cast<double>(parts.size()));
}

Tensor hard_label_loss(const FeatureTrace& trace, const BatchLabels& labels,
                       size_t index, bool regression) {
  if (regression) {
    Tensor diff = affine(trace.logits, 1.0, -labels.values[index]);
    return reduce_mean(mul(diff, diff));
  }
  const int classes = trace.logits.dim(1);
  const int y = labels.classes[index];
  if (y < 0 || y >= classes)
    throw ValueError("label " + std::to_string(y) + " out of range for " +
                     std::to_string(classes) + " classes");
  Tensor onehot = Tensor::zeros({1, classes});
  onehot.values()[static_cast<size_t>(y)] = 1.0;
  Tensor logp = log_clamped(softmax_rows(trace.logits));
  return scale(reduce_sum(mul(onehot, logp)), -1.0);
}

}  // namespace

Tensor total_loss(const std::vector<FeatureTrace>& teacher_traces,
                  const std::vector<FeatureTrace>& student_traces,
                  const BatchLabels& labels, const DistillObjective& objective,
                  ProjectionBank& bank, bool regression,
                  LossBreakdown* breakdown) {
  if (teacher_traces.size() != student_traces.size() || teacher_traces.empty())
    throw ValueError("teacher/student trace batches must match and be non-empty");
  const size_t batch = teacher_traces.size();

  std::vector<Tensor> res_parts, hard_parts;
  res_parts.reserve(batch);
  for (size_t i = 0; i < batch; ++i) {
    res_parts.push_back(soft_target_loss(teacher_traces[i].logits,
                                         student_traces[i].logits,
                                         objective.temperature, regression));
    hard_parts.push_back(
        hard_label_loss(student_traces[i], labels, i, regression));
  }
  Tensor l_res = batch_mean(res_parts);
  Tensor l_hard = batch_mean(hard_parts);

  Tensor total = add(scale(l_res, objective.response_weight),
                     scale(l_hard, objective.hard_weight));
  std::vector<double> term_values;
  for (const LossTerm& term : objective.terms) {
    std::vector<Tensor> parts;
    parts.reserve(batch);
    for (size_t i = 0; i < batch; ++i)
      parts.push_back(knowledge_loss(term.kind, teacher_traces[i],
                                     student_traces[i], term.pair, bank,
                                     objective.temperature, regression,
                                     objective.relation_pair));
    Tensor value = batch_mean(parts);
    term_values.push_back(value.item());
    total = add(total, scale(value, term.weight));
  }
  if (breakdown) {
    breakdown->total = total.item();
    breakdown->l_res = l_res.item();
    breakdown->l_hard = l_hard.item();
    breakdown->term_values = std::move(term_values);
  }
  return total;
}

void AdamW::add_param(Tensor t) {
  Slot s;
  s.m.assign(t.values().size(), 0.0);
  s.v.assign(t.values().size(), 0.0);
  s.param = std::move(t);
  slots_.push_back(std::move(s));
}

void AdamW::add_params(std::map<std::string, Tensor>& params) {
  for (auto& [name, t] : params) add_param(t);
}

void AdamW::step(double lr_scale) {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  const double lr = cfg_.lr * lr_scale;
  for (Slot& s : slots_) {
    std::vector<double>& theta = s.param.values();
    const bool has_grad = s.param.has_grad();
    const std::vector<double>* g = has_grad ? &s.param.grad() : nullptr;
    for (size_t i = 0; i < theta.size(); ++i) {
      const double gi = g ? (*g)[i] : 0.0;
      s.m[i] = cfg_.beta1 * s.m[i] + (1.0 - cfg_.beta1) * gi;
      s.v[i] = cfg_.beta2 * s.v[i] + (1.0 - cfg_.beta2) * gi * gi;
      const double mhat = s.m[i] / bc1;
      const double vhat = s.v[i] / bc2;
      theta[i] -= lr * (mhat / (std::sqrt(vhat) + cfg_.eps) +
                        cfg_.weight_decay * theta[i]);
    }
  }
}

void AdamW::zero_grad() {
  for (Slot& s : slots_) s.param.zero_grad();
}

double lr_schedule_scale(int step, int total_steps, double warmup_frac) {
  const int warmup = std::max(
      1, static_cast<int>(std::ceil(total_steps * warmup_frac)));
  if (step < warmup) return static_cast<double>(step + 1) / warmup;
  const int decay_span = std::max(1, total_steps - warmup);
  return static_cast<double>(total_steps - step) / decay_span;
}

double evaluate(const TransformerModel& model, const TaskDataset& data,
                const std::vector<TokenizedExample>& split) {
  if (data.metric == Metric::none || split.empty()) return 0.0;
  if (data.metric == Metric::accuracy) {
    std::vector<int> preds, labels;
    preds.reserve(split.size());
    for (const TokenizedExample& ex : split) {
      FeatureTrace trace = model.forward(ex.ids);
      const std::vector<double>& z = trace.logits.values();
      preds.push_back(static_cast<int>(
          std::max_element(z.begin(), z.end()) - z.begin()));
      labels.push_back(ex.label_class);
    }
    return accuracy(preds, labels);
  }
  std::vector<double> preds, labels;
  preds.reserve(split.size());
  for (const TokenizedExample& ex : split) {
    preds.push_back(model.forward(ex.ids).logits.values()[0]);
    labels.push_back(ex.label_value);
  }
  return pearson(preds, labels);
}

namespace {

void write_csv_row(std::ostream& os, const StepMetrics& m) {
  os << m.step << ',' << format_value(m.losses.total) << ','
     << format_value(m.losses.l_res) << ',' << format_value(m.losses.l_hard);
  for (double v : m.losses.term_values) os << ',' << format_value(v);
  os << ',' << format_value(m.eval_metric) << '\n';
}

void check_finite_or_diverged(const LossBreakdown& b,
                              const DistillObjective& objective, int step) {
  auto bad = [step](const std::string& name) {
    throw DivergenceError("non-finite loss in " + name + " at step " +
                          std::to_string(step));
  };
  if (!std::isfinite(b.l_res)) bad("soft_target");
  if (!std::isfinite(b.l_hard)) bad("hard_label");
  for (size_t i = 0; i < b.term_values.size(); ++i)
    if (!std::isfinite(b.term_values[i])) bad(objective.terms[i].label());
  if (!std::isfinite(b.total)) bad("total");
}

}  // namespace

std::string metrics_csv_header(const DistillObjective& objective) {
  std::string h = "step,total,l_res,l_hard";
  for (const LossTerm& term : objective.terms) h += "," + term.label();
  h += ",eval_metric";
  return h;
}

TrainResult train_supervised(TransformerModel& model, const TaskDataset& data,
                             const TrainSchedule& schedule, std::ostream* csv) {
  if (!model.tape())
    throw ConfigError("train_supervised needs a taped (trainable) model");
  if (data.train.empty()) throw ValueError("empty training split");
  const bool regression = data.kind == TaskKind::regression;
  DistillObjective hard_only;
  hard_only.response_weight = 0.0;
  hard_only.hard_weight = 1.0;
  if (csv) *csv << metrics_csv_header(hard_only) << '\n';

  AdamW optim(schedule.optim);
  optim.add_params(model.params());
  BatchSampler sampler(data.train.size(), schedule.batch_size, schedule.seed);
  ProjectionBank bank;
  BatchLabels labels;
  TrainResult result;
  for (int step = 0; step < schedule.steps; ++step) {
    model.tape()->clear();
    optim.zero_grad();
    std::vector<FeatureTrace> traces;
    labels.classes.clear();
    labels.values.clear();
    for (size_t idx : sampler.next()) {
      const TokenizedExample& ex = data.train[idx];
      traces.push_back(model.forward(ex.ids));
      labels.classes.push_back(ex.label_class);
      labels.values.push_back(ex.label_value);
    }
    LossBreakdown breakdown;
    Tensor loss = total_loss(traces, traces, labels, hard_only, bank,
                             regression, &breakdown);
    check_finite_or_diverged(breakdown, hard_only, step + 1);
    model.tape()->backward(loss);
    optim.step(lr_schedule_scale(step, schedule.steps, schedule.warmup_frac));

    StepMetrics m;
    m.step = step + 1;
    m.losses = breakdown;
    const bool eval_now =
        (schedule.eval_every > 0 && (step + 1) % schedule.eval_every == 0) ||
        step + 1 == schedule.steps;
    m.eval_metric = eval_now ? evaluate(model, data, data.dev)
                             : (result.history.empty()
                                    ? 0.0
                                    : result.history.back().eval_metric);
    if (csv) write_csv_row(*csv, m);
    result.history.push_back(std::move(m));
  }
  model.tape()->clear();
  result.final_eval = result.history.empty()
                          ? evaluate(model, data, data.dev)
                          : result.history.back().eval_metric;
  return result;
}

TrainResult distill(const TransformerModel& teacher, TransformerModel& student,
                    const TaskDataset& data, const DistillObjective& objective,
                    const TrainSchedule& schedule, ProjectionBank& bank,
                    std::ostream* csv) {
  if (!student.tape())
    throw ConfigError("distill needs a taped (trainable) student");
  if (teacher.tape())
    throw ConfigError("teacher must be frozen (built without a tape)");
  if (data.train.empty()) throw ValueError("empty training split");
  objective.validate(teacher.config(), student.config());
  const bool regression = data.kind == TaskKind::regression;
  if (csv) *csv << metrics_csv_header(objective) << '\n';

  // Projections are created up front so the optimizer sees them all.
  for (const LossTerm& term : objective.terms)
    if (kind_needs_projection(term.kind))
      bank.get(term.pair.student, term.pair.teacher,
               teacher.config().hidden_dim, student.config().hidden_dim);

  AdamW optim(schedule.optim);
  optim.add_params(student.params());
  for (auto& [pair, w] : bank.projections()) optim.add_param(w);

  // The teacher is frozen, so its trace per training example never changes.
  std::vector<FeatureTrace> teacher_cache;
  teacher_cache.reserve(data.train.size());
  for (const TokenizedExample& ex : data.train)
    teacher_cache.push_back(teacher.forward(ex.ids));

  BatchSampler sampler(data.train.size(), schedule.batch_size, schedule.seed);
  BatchLabels labels;
  TrainResult result;
  for (int step = 0; step < schedule.steps; ++step) {
    student.tape()->clear();
    optim.zero_grad();
    std::vector<FeatureTrace> t_traces, s_traces;
    labels.classes.clear();
    labels.values.clear();
    for (size_t idx : sampler.next()) {
      const TokenizedExample& ex = data.train[idx];
      t_traces.push_back(teacher_cache[idx]);
      s_traces.push_back(student.forward(ex.ids));
      labels.classes.push_back(ex.label_class);
      labels.values.push_back(ex.label_value);
    }
    LossBreakdown breakdown;
    Tensor loss = total_loss(t_traces, s_traces, labels, objective, bank,
                             regression, &breakdown);
    check_finite_or_diverged(breakdown, objective, step + 1);
    student.tape()->backward(loss);
    optim.step(lr_schedule_scale(step, schedule.steps, schedule.warmup_frac));

    StepMetrics m;
    m.step = step + 1;
    m.losses = breakdown;
    const bool eval_now =
        (schedule.eval_every > 0 && (step + 1) % schedule.eval_every == 0) ||
        step + 1 == schedule.steps;
    m.eval_metric = eval_now ? evaluate(student, data, data.dev)
                             : (result.history.empty()
                                    ? 0.0
                                    : result.history.back().eval_metric);
    if (csv) write_csv_row(*csv, m);
    result.history.push_back(std::move(m));
  }
  student.tape()->clear();
  result.final_eval = result.history.empty()
                          ? evaluate(student, data, data.dev)
                          : result.history.back().eval_metric;
  return result;
}

}  // namespace kd
