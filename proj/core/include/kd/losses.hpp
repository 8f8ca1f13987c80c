#pragma once

#include <map>
#include <string>
#include <utility>

#include "kd/matching.hpp"
#include "kd/model.hpp"
#include "kd/tensor.hpp"

namespace kd {

enum class KnowledgeKind {
  soft_target,
  attention_mse,
  attention_ce,
  hidden_mse,
  cos,
  pkd,
  mmd,
  gram,
  query_relation,
  key_relation,
  value_relation,
};

inline constexpr KnowledgeKind kAllKnowledgeKinds[] = {
    KnowledgeKind::soft_target,    KnowledgeKind::attention_mse,
    KnowledgeKind::attention_ce,   KnowledgeKind::hidden_mse,
    KnowledgeKind::cos,            KnowledgeKind::pkd,
    KnowledgeKind::mmd,            KnowledgeKind::gram,
    KnowledgeKind::query_relation, KnowledgeKind::key_relation,
    KnowledgeKind::value_relation,
};

KnowledgeKind parse_kind(const std::string& name);
std::string kind_name(KnowledgeKind k);
bool kind_needs_projection(KnowledgeKind k);
/// q/k/v relations require equal head counts between teacher and student.
bool kind_needs_equal_heads(KnowledgeKind k);

/// Lazily created trainable projections W_lr [d_T x d_S], one per used
/// (student layer, teacher layer) pair. Square projections start as the
/// identity, rectangular ones as seeded normal noise.
class ProjectionBank {
 public:
  explicit ProjectionBank(Tape* tape = nullptr, uint64_t seed = 0)
      : tape_(tape), seed_(seed) {}

  Tensor& get(int student_layer, int teacher_layer, int teacher_dim,
              int student_dim);

  std::map<std::pair<int, int>, Tensor>& projections() { return proj_; }
  const std::map<std::pair<int, int>, Tensor>& projections() const {
    return proj_;
  }

 private:
  Tape* tape_ = nullptr;
  uint64_t seed_ = 0;
  std::map<std::pair<int, int>, Tensor> proj_;
};

/// Which two hidden states feed the mmd/gram similarity products.
/// Default is the matched layer against itself; previous_and_current uses
/// (layer-1, layer) on both sides.
struct RelationPairConfig {
  bool previous_and_current = false;
};

/// T^2-scaled cross entropy between temperature-softened logits, teacher
/// as target. Regression tasks use plain MSE and ignore the temperature.
Tensor soft_target_loss(const Tensor& teacher_logits,
                        const Tensor& student_logits, double temperature,
                        bool regression = false);

enum class AttentionVariant { mse, ce };
Tensor attention_feature_loss(const FeatureTrace& teacher,
                              const FeatureTrace& student, LayerPair pair,
                              AttentionVariant variant);

enum class HiddenVariant { hidden_mse, cos, pkd };
Tensor hidden_feature_loss(const FeatureTrace& teacher,
                           const FeatureTrace& student, LayerPair pair,
                           ProjectionBank& bank, HiddenVariant variant);

enum class RelationVariant { mmd, gram, query, key, value };
Tensor relation_loss(const FeatureTrace& teacher, const FeatureTrace& student,
                     LayerPair pair, ProjectionBank& bank,
                     RelationVariant variant,
                     const RelationPairConfig& rel = {});

/// Uniform dispatch over every knowledge kind. temperature is only read
/// by soft_target.
Tensor knowledge_loss(KnowledgeKind kind, const FeatureTrace& teacher,
                      const FeatureTrace& student, LayerPair pair,
                      ProjectionBank& bank, double temperature = 1.0,
                      bool regression = false,
                      const RelationPairConfig& rel = {});

}  // namespace kd
