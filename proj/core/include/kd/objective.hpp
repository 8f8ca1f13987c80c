#pragma once

#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "kd/losses.hpp"
#include "kd/model.hpp"
#include "kd/tasks.hpp"

namespace kd {

struct LossTerm {
  KnowledgeKind kind = KnowledgeKind::hidden_mse;
  LayerPair pair;
  double weight = 1.0;
  std::string label() const;
};

/// The combined objective: response loss (fixed coefficient 1 unless
/// response_weight overrides it), weighted hard-label loss, and weighted
/// feature/relation terms. soft_target never appears in terms.
struct DistillObjective {
  double temperature = 1.0;
  double hard_weight = 0.0;
  double response_weight = 1.0;
  std::vector<LossTerm> terms;
  RelationPairConfig relation_pair;

  /// Cross-field validation against the two architectures; throws
  /// ConfigError listing every problem at once.
  void validate(const ModelConfig& teacher, const ModelConfig& student) const;
};

struct LossBreakdown {
  double total = 0.0;
  double l_res = 0.0;
  double l_hard = 0.0;
  std::vector<double> term_values;  // aligned with objective.terms
};

/// Labels for one batch; class labels for classification, values for
/// regression, per-token MLM targets when distilling at the MLM head.
struct BatchLabels {
  std::vector<int> classes;
  std::vector<double> values;
};

/// Eq-style total over a batch of paired traces; every component is
/// mean-reduced over the batch.
Tensor total_loss(const std::vector<FeatureTrace>& teacher_traces,
                  const std::vector<FeatureTrace>& student_traces,
                  const BatchLabels& labels, const DistillObjective& objective,
                  ProjectionBank& bank, bool regression,
                  LossBreakdown* breakdown = nullptr);

struct AdamWConfig {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

/// AdamW with decoupled weight decay:
///   m <- b1 m + (1-b1) g ; v <- b2 v + (1-b2) g^2
///   theta <- theta - lr (m_hat / (sqrt(v_hat) + eps) + lambda theta)
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg) : cfg_(cfg) {}

  void add_param(Tensor t);
  void add_params(std::map<std::string, Tensor>& params);

  /// One update; lr_scale multiplies the configured learning rate
  /// (warmup/decay schedules). Missing gradients count as zero.
  void step(double lr_scale = 1.0);
  void zero_grad();
  int64_t step_count() const { return t_; }
  const AdamWConfig& config() const { return cfg_; }

 private:
  struct Slot {
    Tensor param;
    std::vector<double> m, v;
  };
  AdamWConfig cfg_;
  std::vector<Slot> slots_;
  int64_t t_ = 0;
};

/// Linear warmup over the first warmup_frac of steps, then linear decay
/// to zero. step is 0-based.
double lr_schedule_scale(int step, int total_steps, double warmup_frac);

struct TrainSchedule {
  int steps = 200;
  int batch_size = 8;
  AdamWConfig optim;
  double warmup_frac = 0.1;
  uint64_t seed = 0;
  int eval_every = 50;
};

struct StepMetrics {
  int step = 0;
  LossBreakdown losses;
  double eval_metric = 0.0;
};

struct TrainResult {
  std::vector<StepMetrics> history;
  double final_eval = 0.0;
};

/// Evaluates a model on a labeled split with the dataset's metric.
double evaluate(const TransformerModel& model, const TaskDataset& data,
                const std::vector<TokenizedExample>& split);

/// Plain supervised training on hard labels (teacher training and the
/// hard-label-only baseline).
TrainResult train_supervised(TransformerModel& model, const TaskDataset& data,
                             const TrainSchedule& schedule,
                             std::ostream* csv = nullptr);

/// Downstream distillation of a frozen teacher into the student. Teacher
/// traces are precomputed once per training example. Projections train
/// jointly with the student. Deterministic given the schedule seed.
TrainResult distill(const TransformerModel& teacher, TransformerModel& student,
                    const TaskDataset& data, const DistillObjective& objective,
                    const TrainSchedule& schedule, ProjectionBank& bank,
                    std::ostream* csv = nullptr);

/// CSV header matching the per-step rows emitted by the trainers.
std::string metrics_csv_header(const DistillObjective& objective);

}  // namespace kd
