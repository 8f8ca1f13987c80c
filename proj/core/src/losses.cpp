#include "kd/losses.hpp"

#include <cmath>
#include <random>

namespace kd {

KnowledgeKind parse_kind(const std::string& name) {
  for (KnowledgeKind k : kAllKnowledgeKinds)
    if (kind_name(k) == name) return k;
  throw ConfigError("unknown knowledge kind \"" + name + "\"");
}

std::string kind_name(KnowledgeKind k) {
  switch (k) {
    case KnowledgeKind::soft_target: return "soft_target";
    case KnowledgeKind::attention_mse: return "attention_mse";
    case KnowledgeKind::attention_ce: return "attention_ce";
    case KnowledgeKind::hidden_mse: return "hidden_mse";
    case KnowledgeKind::cos: return "cos";
    case KnowledgeKind::pkd: return "pkd";
    case KnowledgeKind::mmd: return "mmd";
    case KnowledgeKind::gram: return "gram";
    case KnowledgeKind::query_relation: return "query_relation";
    case KnowledgeKind::key_relation: return "key_relation";
    case KnowledgeKind::value_relation: return "value_relation";
  }
  throw ConfigError("invalid knowledge kind value");
}

bool kind_needs_projection(KnowledgeKind k) {
  switch (k) {
    case KnowledgeKind::hidden_mse:
    case KnowledgeKind::cos:
    case KnowledgeKind::pkd:
    case KnowledgeKind::gram:
      return true;
    default:
      return false;
  }
}

bool kind_needs_equal_heads(KnowledgeKind k) {
  return k == KnowledgeKind::query_relation ||
         k == KnowledgeKind::key_relation ||
         k == KnowledgeKind::value_relation;
}

Tensor& ProjectionBank::get(int student_layer, int teacher_layer,
                            int teacher_dim, int student_dim) {
  const auto key = std::make_pair(student_layer, teacher_layer);
  auto it = proj_.find(key);
  if (it != proj_.end()) {
    const Tensor& w = it->second;
    if (w.dim(0) != teacher_dim || w.dim(1) != student_dim)
      throw ConfigError("projection for pair (" + std::to_string(student_layer) +
                        "," + std::to_string(teacher_layer) +
                        ") already exists with shape " + shape_str(w.shape()));
    return it->second;
  }
  std::vector<double> v(static_cast<size_t>(teacher_dim) * student_dim, 0.0);
  if (teacher_dim == student_dim) {
    for (int i = 0; i < teacher_dim; ++i)
      v[static_cast<size_t>(i) * student_dim + i] = 1.0;
  } else {
    std::mt19937_64 rng(seed_ ^ (static_cast<uint64_t>(student_layer) << 32) ^
                        static_cast<uint64_t>(teacher_layer));
    std::normal_distribution<double> dist(0.0, 0.02);
    for (double& x : v) x = dist(rng);
  }
  Tensor w({teacher_dim, student_dim}, std::move(v), tape_);
  if (tape_) w.mark_param();
  return proj_.emplace(key, std::move(w)).first->second;
}

namespace {

constexpr double kNormEps = 1e-8;

Tensor mse(const Tensor& a, const Tensor& b) {
  Tensor d = sub(a, b);
  return reduce_mean(mul(d, d));
}

/// Mean over rows of -sum_j target * log(pred); target carries no gradient.
Tensor ce_rows(const Tensor& target, const Tensor& pred) {
  const int rows = target.dim(0);
  return scale(reduce_sum(mul(target, log_clamped(pred))), -1.0 / rows);
}

Tensor row_l2_normalize(const Tensor& x) {
  Tensor norms = sqrt(affine(row_sums(mul(x, x)), 1.0, kNormEps));
  return mul_rows(x, reciprocal(norms));
}

Tensor sum_heads(const std::vector<Tensor>& heads) {
  Tensor acc = heads[0];
  for (size_t i = 1; i < heads.size(); ++i) acc = add(acc, heads[i]);
  return acc;
}

void check_seq_len(const FeatureTrace& teacher, const FeatureTrace& student) {
  if (teacher.embeddings.dim(0) != student.embeddings.dim(0))
    throw ValueError("sequence-length mismatch: teacher n=" +
                     std::to_string(teacher.embeddings.dim(0)) + ", student n=" +
                     std::to_string(student.embeddings.dim(0)));
}

void check_layer(int layer, int depth, bool embeddings_ok, const char* side) {
  const int lo = embeddings_ok ? 0 : 1;
  if (layer < lo || layer > depth)
    throw ConfigError(std::string(side) + " layer " + std::to_string(layer) +
                      " out of range [" + std::to_string(lo) + ", " +
                      std::to_string(depth) + "]");
}

const LayerTrace& layer_of(const FeatureTrace& t, int layer) {
  return t.layers[static_cast<size_t>(layer - 1)];
}

}  // namespace

Tensor soft_target_loss(const Tensor& teacher_logits,
                        const Tensor& student_logits, double temperature,
                        bool regression) {
  if (teacher_logits.numel() != student_logits.numel())
    throw ShapeError("logit length mismatch: " +
                     shape_str(teacher_logits.shape()) + " vs " +
                     shape_str(student_logits.shape()));
  if (regression) return mse(teacher_logits, student_logits);
  if (!(temperature > 0.0))
    throw ValueError("temperature must be positive, got " +
                     std::to_string(temperature));
  Tensor pt = softmax_rows(teacher_logits, temperature);
  Tensor ps = softmax_rows(student_logits, temperature);
  const int rows =
      static_cast<int>(teacher_logits.numel() / teacher_logits.shape().back());
  return scale(reduce_sum(mul(pt, log_clamped(ps))),
               -temperature * temperature / rows);
}

Tensor attention_feature_loss(const FeatureTrace& teacher,
                              const FeatureTrace& student, LayerPair pair,
                              AttentionVariant variant) {
  check_seq_len(teacher, student);
  check_layer(pair.student, student.num_layers(), false, "student");
  check_layer(pair.teacher, teacher.num_layers(), false, "teacher");
  const LayerTrace& lt = layer_of(teacher, pair.teacher);
  const LayerTrace& ls = layer_of(student, pair.student);
  if (variant == AttentionVariant::mse)
    return mse(sum_heads(ls.attention), sum_heads(lt.attention));
  Tensor mean_t = scale(sum_heads(lt.attention),
                        1.0 / static_cast<double>(lt.attention.size()));
  Tensor mean_s = scale(sum_heads(ls.attention),
                        1.0 / static_cast<double>(ls.attention.size()));
  return ce_rows(mean_t, mean_s);
}

Tensor hidden_feature_loss(const FeatureTrace& teacher,
                           const FeatureTrace& student, LayerPair pair,
                           ProjectionBank& bank, HiddenVariant variant) {
  check_seq_len(teacher, student);
  check_layer(pair.student, student.num_layers(), true, "student");
  check_layer(pair.teacher, teacher.num_layers(), true, "teacher");
  const Tensor& hs = student.hidden(pair.student);
  const Tensor& ht = teacher.hidden(pair.teacher);
  Tensor w = bank.get(pair.student, pair.teacher, ht.dim(1), hs.dim(1));
  Tensor ht_proj = matmul(ht, w);
  switch (variant) {
    case HiddenVariant::hidden_mse:
      return mse(hs, ht_proj);
    case HiddenVariant::pkd:
      return mse(row_l2_normalize(hs), row_l2_normalize(ht_proj));
    case HiddenVariant::cos: {
      Tensor cos_sum =
          reduce_sum(mul(row_l2_normalize(hs), row_l2_normalize(ht_proj)));
      return affine(cos_sum, -1.0 / hs.dim(0), 1.0);
    }
  }
  throw ConfigError("invalid hidden loss variant");
}

namespace {

Tensor qkv_relation(const FeatureTrace& teacher, const FeatureTrace& student,
                    LayerPair pair, RelationVariant variant) {
  const LayerTrace& lt = layer_of(teacher, pair.teacher);
  const LayerTrace& ls = layer_of(student, pair.student);
  auto pick = [variant](const LayerTrace& l) -> const std::vector<Tensor>& {
    switch (variant) {
      case RelationVariant::query: return l.queries;
      case RelationVariant::key: return l.keys;
      default: return l.values;
    }
  };
  const std::vector<Tensor>& xt = pick(lt);
  const std::vector<Tensor>& xs = pick(ls);
  if (xt.size() != xs.size())
    throw ConfigError("q/k/v relation requires equal head counts, got teacher " +
                      std::to_string(xt.size()) + " vs student " +
                      std::to_string(xs.size()));
  const int heads = static_cast<int>(xt.size());
  Tensor total;
  for (int a = 0; a < heads; ++a) {
    const int n = xt[static_cast<size_t>(a)].dim(0);
    auto rel = [](const Tensor& x) {
      const double inv = 1.0 / std::sqrt(static_cast<double>(x.dim(1)));
      return softmax_rows(scale(matmul(x, transpose(x)), inv));
    };
    Tensor rt = rel(xt[static_cast<size_t>(a)]);
    Tensor rs = rel(xs[static_cast<size_t>(a)]);
    Tensor kl = scale(
        reduce_sum(mul(rt, sub(log_clamped(rt), log_clamped(rs)))), 1.0 / n);
    total = total.defined() ? add(total, kl) : kl;
  }
  return scale(total, 1.0 / heads);
}

}  // namespace

Tensor relation_loss(const FeatureTrace& teacher, const FeatureTrace& student,
                     LayerPair pair, ProjectionBank& bank,
                     RelationVariant variant, const RelationPairConfig& rel) {
  check_seq_len(teacher, student);
  const bool hidden_based =
      variant == RelationVariant::mmd || variant == RelationVariant::gram;
  check_layer(pair.student, student.num_layers(), hidden_based, "student");
  check_layer(pair.teacher, teacher.num_layers(), hidden_based, "teacher");
  if (!hidden_based) return qkv_relation(teacher, student, pair, variant);

  const int s1 = rel.previous_and_current ? pair.student - 1 : pair.student;
  const int t1 = rel.previous_and_current ? pair.teacher - 1 : pair.teacher;
  if (s1 < 0 || t1 < 0)
    throw ConfigError("previous_and_current relation pair needs layer >= 1");
  const Tensor& hs1 = student.hidden(s1);
  const Tensor& hs2 = student.hidden(pair.student);
  const Tensor& ht1 = teacher.hidden(t1);
  const Tensor& ht2 = teacher.hidden(pair.teacher);
  if (variant == RelationVariant::mmd) {
    Tensor sim_t = matmul(ht1, transpose(ht2));
    Tensor sim_s = matmul(hs1, transpose(hs2));
    return mse(sim_s, sim_t);
  }
  // gram: teacher hiddens projected into the student width first, so the
  // d x d products are comparable.
  Tensor w = bank.get(pair.student, pair.teacher, ht2.dim(1), hs2.dim(1));
  Tensor gt = matmul(transpose(matmul(ht1, w)), matmul(ht2, w));
  Tensor gs = matmul(transpose(hs1), hs2);
  return mse(gs, gt);
}

Tensor knowledge_loss(KnowledgeKind kind, const FeatureTrace& teacher,
                      const FeatureTrace& student, LayerPair pair,
                      ProjectionBank& bank, double temperature,
                      bool regression, const RelationPairConfig& rel) {
  switch (kind) {
    case KnowledgeKind::soft_target:
      return soft_target_loss(teacher.logits, student.logits, temperature,
                              regression);
    case KnowledgeKind::attention_mse:
      return attention_feature_loss(teacher, student, pair,
                                    AttentionVariant::mse);
    case KnowledgeKind::attention_ce:
      return attention_feature_loss(teacher, student, pair,
                                    AttentionVariant::ce);
    case KnowledgeKind::hidden_mse:
      return hidden_feature_loss(teacher, student, pair, bank,
                                 HiddenVariant::hidden_mse);
    case KnowledgeKind::cos:
      return hidden_feature_loss(teacher, student, pair, bank,
                                 HiddenVariant::cos);
    case KnowledgeKind::pkd:
      return hidden_feature_loss(teacher, student, pair, bank,
                                 HiddenVariant::pkd);
    case KnowledgeKind::mmd:
      return relation_loss(teacher, student, pair, bank, RelationVariant::mmd,
                           rel);
    case KnowledgeKind::gram:
      return relation_loss(teacher, student, pair, bank, RelationVariant::gram,
                           rel);
    case KnowledgeKind::query_relation:
      return relation_loss(teacher, student, pair, bank,
                           RelationVariant::query, rel);
    case KnowledgeKind::key_relation:
      return relation_loss(teacher, student, pair, bank, RelationVariant::key,
                           rel);
    case KnowledgeKind::value_relation:
      return relation_loss(teacher, student, pair, bank,
                           RelationVariant::value, rel);
  }
  throw ConfigError("invalid knowledge kind value");
}

}  // namespace kd
