#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "kd/gradcheck.hpp"
#include "kd/init.hpp"
#include "kd/losses.hpp"
#include "test_util.hpp"

using namespace kd;
using kdtest::random_tensor;

namespace {

/// Trace assembled from leaf tensors: attention comes from softmaxed score
/// leaves so it stays row-stochastic under finite-difference perturbation.
struct LeafTrace {
  Tensor emb;
  std::vector<std::vector<Tensor>> scores, q, k, v;  // [layer][head]
  std::vector<Tensor> hidden;
  Tensor pooled, logits;

  FeatureTrace build() const {
    FeatureTrace t;
    t.embeddings = emb;
    for (size_t l = 0; l < hidden.size(); ++l) {
      LayerTrace lt;
      for (size_t h = 0; h < scores[l].size(); ++h) {
        lt.attention.push_back(softmax_rows(scores[l][h]));
        lt.queries.push_back(q[l][h]);
        lt.keys.push_back(k[l][h]);
        lt.values.push_back(v[l][h]);
      }
      lt.hidden = hidden[l];
      t.layers.push_back(std::move(lt));
    }
    t.pooled = pooled;
    t.logits = logits;
    return t;
  }
};

LeafTrace random_leaves(Tape* tape, std::mt19937_64& rng, int layers, int n,
                        int d, int heads, int labels) {
  const int dk = d / heads;
  LeafTrace lt;
  lt.emb = random_tensor({n, d}, rng, tape);
  lt.scores.resize(size_t(layers));
  lt.q.resize(size_t(layers));
  lt.k.resize(size_t(layers));
  lt.v.resize(size_t(layers));
  for (int l = 0; l < layers; ++l) {
    for (int h = 0; h < heads; ++h) {
      lt.scores[size_t(l)].push_back(random_tensor({n, n}, rng, tape));
      lt.q[size_t(l)].push_back(random_tensor({n, dk}, rng, tape));
      lt.k[size_t(l)].push_back(random_tensor({n, dk}, rng, tape));
      lt.v[size_t(l)].push_back(random_tensor({n, dk}, rng, tape));
    }
    lt.hidden.push_back(random_tensor({n, d}, rng, tape));
  }
  lt.pooled = random_tensor({1, d}, rng, tape);
  lt.logits = random_tensor({1, labels}, rng, tape);
  return lt;
}

/// Deep value copy of every leaf, detached from any tape (a "teacher"
/// clone of the same trace).
LeafTrace detach_clone(const LeafTrace& src) {
  LeafTrace out;
  out.emb = src.emb.detached_copy();
  out.scores.resize(src.scores.size());
  out.q.resize(src.q.size());
  out.k.resize(src.k.size());
  out.v.resize(src.v.size());
  for (size_t l = 0; l < src.hidden.size(); ++l) {
    for (size_t h = 0; h < src.scores[l].size(); ++h) {
      out.scores[l].push_back(src.scores[l][h].detached_copy());
      out.q[l].push_back(src.q[l][h].detached_copy());
      out.k[l].push_back(src.k[l][h].detached_copy());
      out.v[l].push_back(src.v[l][h].detached_copy());
    }
    out.hidden.push_back(src.hidden[l].detached_copy());
  }
  out.pooled = src.pooled.detached_copy();
  out.logits = src.logits.detached_copy();
  return out;
}

double entropy_of_mean_attention(const FeatureTrace& t, int layer) {
  Tensor mean = t.layers[size_t(layer - 1)].attention[0];
  const auto& heads = t.layers[size_t(layer - 1)].attention;
  std::vector<double> m(mean.values().size(), 0.0);
  for (const Tensor& a : heads)
    for (size_t i = 0; i < m.size(); ++i) m[i] += a.values()[i];
  const int n = mean.dim(0);
  double h = 0;
  for (double& x : m) x /= double(heads.size());
  for (double x : m) h -= x * std::log(std::max(x, 1e-12));
  return h / n;
}

}  // namespace

TEST_CASE("soft target closed forms and matched-distribution gradient") {
  Tensor zt({1, 2}, {2.0, 0.0});
  Tensor zs0({1, 2}, {0.0, 0.0});
  const double p1 = std::exp(2.0) / (std::exp(2.0) + 1.0);
  const double expected = -(p1 * std::log(0.5) + (1 - p1) * std::log(0.5));
  CHECK(soft_target_loss(zt, zs0, 1.0).item() ==
        doctest::Approx(expected).epsilon(1e-10));
  CHECK(expected == doctest::Approx(std::log(2.0)).epsilon(1e-12));

  // Identical logits: loss is the teacher entropy, gradient w.r.t. student
  // logits is the zero vector.
  Tape tape;
  Tensor zs({1, 3}, {1.0, -0.5, 0.25}, &tape);
  Tensor zt2 = zs.detached_copy();
  for (double t : {1.0, 2.0, 8.0}) {
    tape.clear();
    zs.zero_grad();
    Tensor loss = soft_target_loss(zt2, zs, t);
    std::vector<double> p(3);
    {
      Tensor sm = softmax_rows(zt2, t);
      p = sm.values();
    }
    double entropy = 0;
    for (double x : p) entropy -= x * std::log(x);
    CHECK(loss.item() == doctest::Approx(t * t * entropy).epsilon(1e-9));
    tape.backward(loss);
    for (double g : zs.grad()) CHECK(std::fabs(g) < 1e-12);
  }

  CHECK_THROWS_AS(soft_target_loss(zt, zs0, 0.0), ValueError);
  CHECK_THROWS_AS(
      soft_target_loss(Tensor({1, 3}, {1, 2, 3}), zs0, 1.0), ShapeError);
}

TEST_CASE("soft target regression variant is plain MSE ignoring T") {
  Tensor zt({1, 1}, {0.7});
  Tensor zs({1, 1}, {0.2});
  for (double t : {1.0, 4.0})
    CHECK(soft_target_loss(zt, zs, t, true).item() ==
          doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("T-squared compensation keeps small-logit gradients T-invariant") {
  Tape tape;
  const double eps = 1e-4;
  Tensor zt({1, 3}, {2.0 * eps, -1.0 * eps, 0.5 * eps});
  Tensor zs({1, 3}, {-1.0 * eps, 0.5 * eps, 2.0 * eps}, &tape);
  std::vector<std::vector<double>> grads;
  for (double t : {1.0, 2.0, 4.0, 8.0}) {
    tape.clear();
    zs.zero_grad();
    Tensor loss = soft_target_loss(zt, zs, t);
    tape.backward(loss);
    grads.push_back(zs.grad());
  }
  for (size_t i = 1; i < grads.size(); ++i)
    for (size_t j = 0; j < grads[i].size(); ++j)
      CHECK(std::fabs(grads[i][j] - grads[0][j]) < 1e-6);
}

TEST_CASE("attention losses: self-match, hand case, head collapse") {
  std::mt19937_64 rng(1);
  Tape tape;
  LeafTrace leaves = random_leaves(&tape, rng, 2, 3, 8, 2, 3);
  FeatureTrace s = leaves.build();
  FeatureTrace t = detach_clone(leaves).build();
  ProjectionBank bank;
  const LayerPair pair{2, 2};
  CHECK(attention_feature_loss(t, s, pair, AttentionVariant::mse).item() ==
        doctest::Approx(0.0).epsilon(1e-12));
  CHECK(attention_feature_loss(t, s, pair, AttentionVariant::ce).item() ==
        doctest::Approx(entropy_of_mean_attention(t, 2)).epsilon(1e-9));

  // Hand case: n=2 single head, identity vs uniform attention.
  FeatureTrace hs, ht;
  hs.embeddings = Tensor({2, 2}, {0, 0, 0, 0});
  ht.embeddings = hs.embeddings;
  LayerTrace ls_l, lt_l;
  ls_l.attention = {Tensor({2, 2}, {1, 0, 0, 1})};
  ls_l.hidden = Tensor({2, 2}, {0, 0, 0, 0});
  lt_l.attention = {Tensor({2, 2}, {0.5, 0.5, 0.5, 0.5})};
  lt_l.hidden = ls_l.hidden;
  hs.layers.push_back(ls_l);
  ht.layers.push_back(lt_l);
  CHECK(attention_feature_loss(ht, hs, {1, 1}, AttentionVariant::mse).item() ==
        doctest::Approx(0.25).epsilon(1e-12));

  // Differing head counts are collapsed by the sum/mean, not rejected.
  std::mt19937_64 rng2(2);
  LeafTrace wide = random_leaves(nullptr, rng2, 2, 3, 8, 4, 3);
  FeatureTrace teacher4 = wide.build();
  CHECK_NOTHROW(
      attention_feature_loss(teacher4, s, pair, AttentionVariant::mse));
  CHECK_NOTHROW(
      attention_feature_loss(teacher4, s, pair, AttentionVariant::ce));

  // Sequence mismatch is an input error.
  std::mt19937_64 rng3(3);
  LeafTrace longer = random_leaves(nullptr, rng3, 2, 4, 8, 2, 3);
  FeatureTrace tl = longer.build();
  CHECK_THROWS_AS(attention_feature_loss(tl, s, pair, AttentionVariant::mse),
                  ValueError);
}

TEST_CASE("hidden losses: self-match, cosine scale invariance, pkd two-path") {
  std::mt19937_64 rng(5);
  Tape tape;
  LeafTrace leaves = random_leaves(&tape, rng, 2, 3, 6, 2, 3);
  FeatureTrace s = leaves.build();
  FeatureTrace t = detach_clone(leaves).build();
  ProjectionBank bank(&tape, 0);
  const LayerPair pair{1, 1};
  CHECK(hidden_feature_loss(t, s, pair, bank, HiddenVariant::hidden_mse)
            .item() == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(hidden_feature_loss(t, s, pair, bank, HiddenVariant::pkd).item() ==
        doctest::Approx(0.0).epsilon(1e-10));
  CHECK(hidden_feature_loss(t, s, pair, bank, HiddenVariant::cos).item() ==
        doctest::Approx(0.0).epsilon(1e-8));

  // cos is invariant to positive rescaling of the student side.
  FeatureTrace s2 = s;
  s2.layers[0].hidden = scale(s.layers[0].hidden, 2.0);
  CHECK(hidden_feature_loss(t, s2, pair, bank, HiddenVariant::cos).item() ==
        doctest::Approx(0.0).epsilon(1e-7));

  // pkd equals hidden_mse on explicitly pre-normalized hidden states.
  std::mt19937_64 rng2(6);
  LeafTrace a = random_leaves(nullptr, rng2, 1, 3, 6, 2, 3);
  LeafTrace b = random_leaves(nullptr, rng2, 1, 3, 6, 2, 3);
  FeatureTrace ta = a.build(), tb = b.build();
  ProjectionBank bank2;
  const double pkd =
      hidden_feature_loss(ta, tb, {1, 1}, bank2, HiddenVariant::pkd).item();
  auto normalize = [](FeatureTrace& tr) {
    Tensor& h = tr.layers[0].hidden;
    for (int r = 0; r < h.dim(0); ++r) {
      double sum = 1e-8;
      for (int c = 0; c < h.dim(1); ++c) sum += h.at(r, c) * h.at(r, c);
      const double inv = 1.0 / std::sqrt(sum);
      for (int c = 0; c < h.dim(1); ++c)
        h.values()[size_t(r) * h.dim(1) + c] *= inv;
    }
  };
  normalize(ta);
  normalize(tb);
  ProjectionBank bank3;
  const double mse_pre =
      hidden_feature_loss(ta, tb, {1, 1}, bank3, HiddenVariant::hidden_mse)
          .item();
  CHECK(std::fabs(pkd - mse_pre) < 1e-10);
}

TEST_CASE("projection bank is lazy, unique per pair, identity when square") {
  Tape tape;
  ProjectionBank bank(&tape, 3);
  CHECK(bank.projections().empty());
  Tensor& w = bank.get(1, 2, 4, 4);
  CHECK(w.shape() == Shape{4, 4});
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j)
      CHECK(w.at(i, j) == (i == j ? 1.0 : 0.0));
  Tensor& again = bank.get(1, 2, 4, 4);
  CHECK(w.same_storage(again));
  CHECK(bank.projections().size() == 1);

  Tensor& rect = bank.get(2, 4, 6, 4);
  CHECK(rect.shape() == Shape{6, 4});
  bool nonzero = false;
  for (double v : rect.values())
    if (v != 0.0) nonzero = true;
  CHECK(nonzero);
  CHECK_THROWS_AS(bank.get(1, 2, 6, 4), ConfigError);
}

TEST_CASE("relation losses: self-match, hand mmd, single token, rotations") {
  std::mt19937_64 rng(7);
  Tape tape;
  LeafTrace leaves = random_leaves(&tape, rng, 2, 3, 6, 2, 3);
  FeatureTrace s = leaves.build();
  FeatureTrace t = detach_clone(leaves).build();
  ProjectionBank bank(&tape, 0);
  for (RelationVariant v :
       {RelationVariant::mmd, RelationVariant::gram, RelationVariant::query,
        RelationVariant::key, RelationVariant::value})
    CHECK(relation_loss(t, s, {2, 2}, bank, v).item() ==
          doctest::Approx(0.0).epsilon(1e-9));

  // Hand mmd: teacher hidden identity, student upper-triangular.
  FeatureTrace ht, hs;
  ht.embeddings = Tensor({2, 2}, {0, 0, 0, 0});
  hs.embeddings = ht.embeddings;
  LayerTrace lt_l, ls_l;
  lt_l.hidden = Tensor({2, 2}, {1, 0, 0, 1});
  ls_l.hidden = Tensor({2, 2}, {1, 1, 0, 1});
  ht.layers.push_back(lt_l);
  hs.layers.push_back(ls_l);
  ProjectionBank bank2;
  // sim_t = I, sim_s = [[2,1],[1,1]]; squared diffs {1,1,1,0} -> mean 0.75
  CHECK(relation_loss(ht, hs, {1, 1}, bank2, RelationVariant::mmd).item() ==
        doctest::Approx(0.75).epsilon(1e-12));

  // Single-token value relation is 0 regardless of content.
  std::mt19937_64 rng2(8);
  LeafTrace one_s = random_leaves(nullptr, rng2, 1, 1, 4, 2, 3);
  LeafTrace one_t = random_leaves(nullptr, rng2, 1, 1, 4, 2, 3);
  FeatureTrace os = one_s.build(), ot = one_t.build();
  ProjectionBank bank3;
  CHECK(relation_loss(ot, os, {1, 1}, bank3, RelationVariant::value).item() ==
        doctest::Approx(0.0).epsilon(1e-12));

  // Orthogonal rotation of per-head features leaves X X^T unchanged.
  std::mt19937_64 rng3(9);
  const double c = std::cos(0.83), sn = std::sin(0.83);
  Tensor rot({3, 3}, {c, -sn, 0, sn, c, 0, 0, 0, 1});
  LeafTrace ls2 = random_leaves(nullptr, rng3, 1, 4, 6, 2, 3);
  LeafTrace lt2 = random_leaves(nullptr, rng3, 1, 4, 6, 2, 3);
  FeatureTrace base_s = ls2.build(), base_t = lt2.build();
  ProjectionBank bank4;
  for (RelationVariant v :
       {RelationVariant::query, RelationVariant::key, RelationVariant::value}) {
    const double before =
        relation_loss(base_t, base_s, {1, 1}, bank4, v).item();
    LeafTrace rotated = ls2;
    for (size_t h = 0; h < rotated.q[0].size(); ++h) {
      rotated.q[0][h] = matmul(ls2.q[0][h], rot);
      rotated.k[0][h] = matmul(ls2.k[0][h], rot);
      rotated.v[0][h] = matmul(ls2.v[0][h], rot);
    }
    FeatureTrace rs = rotated.build();
    const double after = relation_loss(base_t, rs, {1, 1}, bank4, v).item();
    CHECK(std::fabs(before - after) < 1e-8);
  }

  // Head-count mismatch is an explicit configuration error.
  std::mt19937_64 rng4(10);
  LeafTrace three = random_leaves(nullptr, rng4, 1, 4, 6, 3, 3);
  FeatureTrace t3 = three.build();
  CHECK_THROWS_AS(
      relation_loss(t3, base_s, {1, 1}, bank4, RelationVariant::value),
      ConfigError);
}

TEST_CASE("mmd/gram support the previous-and-current layer pair") {
  std::mt19937_64 rng(11);
  LeafTrace ls = random_leaves(nullptr, rng, 2, 3, 6, 2, 3);
  LeafTrace lt = random_leaves(nullptr, rng, 2, 3, 6, 2, 3);
  FeatureTrace s = ls.build(), t = lt.build();
  ProjectionBank bank;
  RelationPairConfig rel;
  rel.previous_and_current = true;
  const double self_pair =
      relation_loss(t, s, {1, 1}, bank, RelationVariant::mmd).item();
  const double prev_pair =
      relation_loss(t, s, {1, 1}, bank, RelationVariant::mmd, rel).item();
  CHECK(self_pair != doctest::Approx(prev_pair).epsilon(1e-12));
  CHECK(prev_pair >= 0.0);
}

TEST_CASE("non-negativity and cosine range over random traces") {
  for (uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed);
    LeafTrace ls = random_leaves(nullptr, rng, 2, 3, 6, 2, 3);
    LeafTrace lt = random_leaves(nullptr, rng, 2, 3, 6, 2, 3);
    FeatureTrace s = ls.build(), t = lt.build();
    ProjectionBank bank;
    for (KnowledgeKind k : kAllKnowledgeKinds) {
      const double v = knowledge_loss(k, t, s, {2, 2}, bank, 2.0).item();
      CHECK(v >= 0.0);
      if (k == KnowledgeKind::cos) {
        CHECK(v <= 2.0);
      }
    }
  }
}

TEST_CASE("every knowledge kind passes finite-difference gradient checks") {
  for (KnowledgeKind kind : kAllKnowledgeKinds) {
    for (uint64_t seed = 0; seed < 20; ++seed) {
      std::mt19937_64 rng(seed * 31 + 1);
      Tape tape;
      LeafTrace ls = random_leaves(&tape, rng, 2, 3, 6, 2, 4);
      LeafTrace lt_leaves = random_leaves(nullptr, rng, 2, 3, 6, 2, 4);
      FeatureTrace t = lt_leaves.build();
      ProjectionBank bank(&tape, seed);
      const LayerPair pair{2, 2};
      auto f = [&] {
        tape.clear();
        FeatureTrace s = ls.build();
        return knowledge_loss(kind, t, s, pair, bank, 2.0).item();
      };
      // Leaf the loss actually reads on the student side.
      Tensor leaf;
      switch (kind) {
        case KnowledgeKind::soft_target: leaf = ls.logits; break;
        case KnowledgeKind::attention_mse:
        case KnowledgeKind::attention_ce: leaf = ls.scores[1][0]; break;
        case KnowledgeKind::query_relation: leaf = ls.q[1][1]; break;
        case KnowledgeKind::key_relation: leaf = ls.k[1][1]; break;
        case KnowledgeKind::value_relation: leaf = ls.v[1][1]; break;
        default: leaf = ls.hidden[1]; break;
      }
      f();
      tape.clear();
      leaf.zero_grad();
      FeatureTrace s = ls.build();
      Tensor loss = knowledge_loss(kind, t, s, pair, bank, 2.0);
      tape.backward(loss);
      INFO("kind ", kind_name(kind), " seed ", seed);
      REQUIRE(leaf.has_grad());
      CHECK(max_rel_error(leaf.grad(), finite_difference_gradient(f, leaf)) <
            1e-4);
      if (kind_needs_projection(kind)) {
        Tensor w = bank.get(pair.student, pair.teacher, 6, 6);
        w.zero_grad();
        tape.clear();
        FeatureTrace s2 = ls.build();
        tape.backward(knowledge_loss(kind, t, s2, pair, bank, 2.0));
        CHECK(max_rel_error(w.grad(), finite_difference_gradient(f, w)) <
              1e-4);
      }
    }
  }
}

TEST_CASE("teacher parameters receive no gradients from any loss") {
  Tape tape;
  ModelConfig cfg = kdtest::small_config(2, 8, 2);
  TransformerModel teacher(cfg, nullptr);  // frozen: not on any tape
  kdtest::randomize_params(teacher, 1);
  TransformerModel student(cfg, &tape);
  init_random(student, 2, 0.2);
  std::mt19937_64 rng(3);
  auto ids = kdtest::random_ids(5, cfg.vocab_size, rng);
  FeatureTrace t = teacher.forward(ids);
  ProjectionBank bank(&tape, 0);
  for (KnowledgeKind k : kAllKnowledgeKinds) {
    tape.clear();
    FeatureTrace s = student.forward(ids);
    Tensor loss = knowledge_loss(k, t, s, {2, 2}, bank, 2.0);
    REQUIRE(loss.tracked());
    tape.backward(loss);
    for (auto& [name, p] : teacher.params()) {
      CHECK(p.tape() == nullptr);
      CHECK_FALSE(p.has_grad());
    }
  }
}

TEST_CASE("projection alone can fit hidden_mse by gradient descent") {
  std::mt19937_64 rng(13);
  Tape tape;
  LeafTrace ls = random_leaves(nullptr, rng, 1, 4, 4, 2, 3);
  LeafTrace lt = random_leaves(nullptr, rng, 1, 4, 6, 2, 3);
  FeatureTrace s = ls.build(), t = lt.build();
  ProjectionBank bank(&tape, 5);
  Tensor w = bank.get(1, 1, 6, 4);  // rectangular: noise init
  double prev = 1e300;
  for (int step = 0; step < 50; ++step) {
    tape.clear();
    w.zero_grad();
    Tensor loss = hidden_feature_loss(t, s, {1, 1}, bank,
                                      HiddenVariant::hidden_mse);
    const double value = loss.item();
    CHECK(value < prev);  // strict decrease every step
    prev = value;
    tape.backward(loss);
    for (size_t i = 0; i < w.values().size(); ++i)
      w.values()[i] -= 0.1 * w.grad()[i];
  }
}

TEST_CASE("kind names roundtrip through config spellings") {
  for (KnowledgeKind k : kAllKnowledgeKinds)
    CHECK(parse_kind(kind_name(k)) == k);
  CHECK_THROWS_AS(parse_kind("dark_knowledge"), ConfigError);
}
