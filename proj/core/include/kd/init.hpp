#pragma once

#include <vector>

#include "kd/matching.hpp"
#include "kd/model.hpp"
#include "kd/objective.hpp"
#include "kd/tasks.hpp"

namespace kd {

/// Truncated-normal(0, stddev) weights (resampled beyond three sigma),
/// zero biases, unit layer-norm gains.
void init_random(TransformerModel& student, uint64_t seed, double stddev);

/// Masked-LM pre-training on an lm-stream corpus. Returns the per-step
/// MLM loss history.
std::vector<double> pretrain_mlm(TransformerModel& student,
                                 const TaskDataset& corpus,
                                 const TrainSchedule& schedule);

/// MLM plus distillation terms on unlabeled batches: masked tokens act as
/// hard labels, the response loss matches vocabulary logits at masked
/// positions. Returns the combined per-step loss history.
std::vector<double> general_distill(TransformerModel& student,
                                    const TransformerModel& teacher,
                                    const TaskDataset& corpus,
                                    const TrainSchedule& schedule,
                                    const DistillObjective& objective,
                                    ProjectionBank& bank);

/// Copies teacher weights into the student: embeddings always, and for
/// every plan pair (s, r) the whole teacher layer r into student layer s.
/// Pooler and head are re-initialized from head_seed unless copy_head is
/// set (which requires identical head shapes).
void preload(TransformerModel& student, const TransformerModel& teacher,
             const LayerPairPlan& plan, uint64_t head_seed,
             bool copy_head = false);

}  // namespace kd
