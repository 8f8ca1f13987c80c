#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <sstream>

#include "kd/gradcheck.hpp"
#include "kd/init.hpp"
#include "kd/objective.hpp"
#include "test_util.hpp"

using namespace kd;
using kdtest::random_ids;
using kdtest::randomize_params;
using kdtest::small_config;

namespace {

struct Setup {
  Tape tape;
  ModelConfig teacher_cfg, student_cfg;
  TransformerModel teacher, student;
  std::vector<std::vector<int>> inputs;
  BatchLabels labels;

  Setup(int batch = 3, int t_layers = 2, int s_layers = 2, int t_dim = 8,
        int s_dim = 8)
      : teacher_cfg(small_config(t_layers, t_dim, 2, 3)),
        student_cfg(small_config(s_layers, s_dim, 2, 3)),
        teacher(teacher_cfg, nullptr),
        student(student_cfg, &tape) {
    randomize_params(teacher, 11);
    init_random(student, 12, 0.2);
    std::mt19937_64 rng(13);
    for (int i = 0; i < batch; ++i) {
      inputs.push_back(random_ids(5, teacher_cfg.vocab_size, rng));
      labels.classes.push_back(int(rng() % 3));
      labels.values.push_back(0.0);
    }
  }

  std::vector<FeatureTrace> teacher_traces() const {
    std::vector<FeatureTrace> out;
    for (const auto& ids : inputs) out.push_back(teacher.forward(ids));
    return out;
  }
  std::vector<FeatureTrace> student_traces() const {
    std::vector<FeatureTrace> out;
    for (const auto& ids : inputs) out.push_back(student.forward(ids));
    return out;
  }
};

}  // namespace

TEST_CASE("objective validation collects every problem at once") {
  ModelConfig t = small_config(4, 8, 2, 3);
  ModelConfig s = small_config(2, 8, 4, 3);
  DistillObjective o;
  o.temperature = -1.0;
  o.hard_weight = -0.5;
  o.terms.push_back({KnowledgeKind::soft_target, {1, 1}, 1.0});
  o.terms.push_back({KnowledgeKind::hidden_mse, {3, 2}, 1.0});
  o.terms.push_back({KnowledgeKind::attention_mse, {1, 9}, 1.0});
  o.terms.push_back({KnowledgeKind::value_relation, {2, 4}, 1.0});
  try {
    o.validate(t, s);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("temperature") != std::string::npos);
    CHECK(msg.find("hard_weight") != std::string::npos);
    CHECK(msg.find("soft_target") != std::string::npos);
    CHECK(msg.find("student layer out of range") != std::string::npos);
    CHECK(msg.find("teacher layer out of range") != std::string::npos);
    CHECK(msg.find("equal head counts") != std::string::npos);
  }
  DistillObjective ok;
  ok.terms.push_back({KnowledgeKind::hidden_mse, {0, 0}, 1.0});  // embeddings
  CHECK_NOTHROW(ok.validate(t, s));
  DistillObjective bad_attn;
  bad_attn.terms.push_back({KnowledgeKind::attention_mse, {0, 0}, 1.0});
  CHECK_THROWS_AS(bad_attn.validate(t, s), ConfigError);
}

TEST_CASE("alpha zero with no terms reduces to the soft-target loss") {
  Setup su;
  DistillObjective o;
  o.temperature = 2.0;
  ProjectionBank bank(&su.tape, 0);
  auto tt = su.teacher_traces();
  auto st = su.student_traces();
  LossBreakdown b;
  Tensor total = total_loss(tt, st, su.labels, o, bank, false, &b);
  double expected = 0.0;
  for (size_t i = 0; i < tt.size(); ++i)
    expected +=
        soft_target_loss(tt[i].logits, st[i].logits, 2.0).item() / tt.size();
  CHECK(total.item() == doctest::Approx(expected).epsilon(1e-12));
  CHECK(b.l_res == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("breakdown sums to the total and doubling betas is linear") {
  Setup su;
  DistillObjective o;
  o.temperature = 2.0;
  o.hard_weight = 0.7;
  o.terms.push_back({KnowledgeKind::hidden_mse, {1, 1}, 0.4});
  o.terms.push_back({KnowledgeKind::attention_mse, {2, 2}, 1.3});
  o.terms.push_back({KnowledgeKind::mmd, {2, 2}, 0.9});
  ProjectionBank bank(&su.tape, 0);
  auto tt = su.teacher_traces();
  auto st = su.student_traces();
  LossBreakdown b;
  Tensor total = total_loss(tt, st, su.labels, o, bank, false, &b);
  double sum = b.l_res + o.hard_weight * b.l_hard;
  for (size_t i = 0; i < o.terms.size(); ++i)
    sum += o.terms[i].weight * b.term_values[i];
  CHECK(std::fabs(total.item() - sum) < 1e-9);
  CHECK(std::fabs(b.total - total.item()) < 1e-15);

  DistillObjective doubled = o;
  for (LossTerm& term : doubled.terms) term.weight *= 2.0;
  LossBreakdown b2;
  su.tape.clear();
  Tensor total2 = total_loss(tt, su.student_traces(), su.labels, doubled, bank,
                             false, &b2);
  const double feature = total.item() - b.l_res - o.hard_weight * b.l_hard;
  const double feature2 =
      total2.item() - b2.l_res - doubled.hard_weight * b2.l_hard;
  CHECK(feature2 == doctest::Approx(2.0 * feature).epsilon(1e-9));
}

TEST_CASE("self-match total is the teacher-entropy constant") {
  // Wider hidden states keep the epsilon-guarded cosine residual
  // comfortably below the 1e-9 budget.
  Setup su(3, 2, 2, 32, 32);
  su.student.copy_params_from(su.teacher);
  DistillObjective o;
  o.temperature = 3.0;
  for (KnowledgeKind k : kAllKnowledgeKinds)
    if (k != KnowledgeKind::soft_target)
      o.terms.push_back({k, {2, 2}, 1.0});
  ProjectionBank bank(&su.tape, 0);
  auto tt = su.teacher_traces();
  LossBreakdown b;
  total_loss(tt, su.student_traces(), su.labels, o, bank, false, &b);
  // Feature and relation terms vanish; mse-style exactly, ce/kl to rounding.
  for (size_t i = 0; i < o.terms.size(); ++i) {
    INFO("term ", o.terms[i].label());
    if (o.terms[i].kind == KnowledgeKind::attention_ce) continue;  // entropy
    CHECK(std::fabs(b.term_values[i]) < 1e-9);
  }
  double entropy = 0.0;
  for (const FeatureTrace& t : tt) {
    Tensor p = softmax_rows(t.logits, 3.0);
    for (double x : p.values()) entropy -= x * std::log(x);
  }
  entropy *= 9.0 / double(tt.size());
  CHECK(b.l_res == doctest::Approx(entropy).epsilon(1e-9));
}

TEST_CASE("total_loss gradients match finite differences on a tiny model") {
  Setup su(2, 1, 1, 8, 8);
  DistillObjective o;
  o.temperature = 2.0;
  o.hard_weight = 0.5;
  o.terms.push_back({KnowledgeKind::hidden_mse, {1, 1}, 0.7});
  o.terms.push_back({KnowledgeKind::attention_ce, {1, 1}, 0.3});
  o.terms.push_back({KnowledgeKind::value_relation, {1, 1}, 0.4});
  ProjectionBank bank(&su.tape, 0);
  auto tt = su.teacher_traces();
  auto f = [&] {
    su.tape.clear();
    return total_loss(tt, su.student_traces(), su.labels, o, bank, false)
        .item();
  };
  f();
  for (const char* name :
       {"layers.0.attn.wq", "layers.0.ffn.w1", "head.w", "embeddings.token"}) {
    Tensor& p = su.student.param(name);
    su.tape.clear();
    p.zero_grad();
    Tensor loss =
        total_loss(tt, su.student_traces(), su.labels, o, bank, false);
    su.tape.backward(loss);
    INFO("param ", name);
    CHECK(max_rel_error(p.grad(), finite_difference_gradient(f, p)) < 1e-4);
  }
}

TEST_CASE("AdamW hand-evaluated updates") {
  AdamWConfig cfg;
  cfg.lr = 0.1;
  cfg.weight_decay = 0.0;
  Tape tape;

  // Zero gradient, zero decay: parameters unchanged.
  Tensor a = make_param({1, 1}, {0.5}, tape);
  AdamW opt1(cfg);
  opt1.add_param(a);
  opt1.step();
  CHECK(a.values()[0] == 0.5);

  // Single scalar, g=1, t=1: bias-corrected update is lr within eps.
  Tensor b = make_param({1, 1}, {0.5}, tape);
  b.grad()[0] = 1.0;
  AdamW opt2(cfg);
  opt2.add_param(b);
  opt2.step();
  CHECK(b.values()[0] == doctest::Approx(0.4).epsilon(1e-6));

  // Decoupled decay with zero gradient: pure multiplicative shrink.
  AdamWConfig decay = cfg;
  decay.weight_decay = 0.2;
  Tensor c = make_param({1, 1}, {2.0}, tape);
  AdamW opt3(decay);
  opt3.add_param(c);
  opt3.step();
  CHECK(c.values()[0] == doctest::Approx(2.0 * (1.0 - 0.1 * 0.2)).epsilon(1e-12));
}

TEST_CASE("learning-rate schedule: linear warmup then linear decay") {
  CHECK(lr_schedule_scale(0, 100, 0.1) == doctest::Approx(0.1));
  CHECK(lr_schedule_scale(9, 100, 0.1) == doctest::Approx(1.0));
  CHECK(lr_schedule_scale(10, 100, 0.1) == doctest::Approx(1.0));
  CHECK(lr_schedule_scale(99, 100, 0.1) == doctest::Approx(1.0 / 90.0));
  for (int s = 1; s < 100; ++s)
    if (s >= 10) CHECK(lr_schedule_scale(s, 100, 0.1) <=
                       lr_schedule_scale(s - 1, 100, 0.1) + 1e-12);
}

TEST_CASE("distill: zero steps, frozen teacher, determinism") {
  TaskSpec spec;
  spec.name = "patterns";
  spec.seed = 4;
  spec.train_size = 32;
  spec.dev_size = 16;
  TaskDataset data = generate_task(spec);

  ModelConfig tcfg = small_config(2, 16, 2, 4);
  tcfg.vocab_size = spec.vocab_size;
  tcfg.max_seq_len = spec.seq_len;
  ModelConfig scfg = tcfg;
  TransformerModel teacher(tcfg, nullptr);
  randomize_params(teacher, 21);
  const auto teacher_before = teacher.param("layers.0.attn.wq").values();

  DistillObjective o;
  o.temperature = 2.0;
  o.hard_weight = 0.5;
  o.terms.push_back({KnowledgeKind::hidden_mse, {2, 2}, 1.0});

  TrainSchedule schedule;
  schedule.steps = 0;
  schedule.seed = 7;
  {
    Tape tape;
    TransformerModel student(scfg, &tape);
    init_random(student, 5, 0.02);
    const auto before = student.param("head.w").values();
    ProjectionBank bank(&tape, 0);
    distill(teacher, student, data, o, schedule, bank);
    CHECK(student.param("head.w").values() == before);  // zero steps: no-op
  }

  schedule.steps = 12;
  auto run = [&](uint64_t seed) {
    Tape tape;
    TransformerModel student(scfg, &tape);
    init_random(student, 5, 0.02);
    ProjectionBank bank(&tape, 0);
    TrainSchedule s2 = schedule;
    s2.seed = seed;
    distill(teacher, student, data, o, s2, bank);
    std::vector<double> flat;
    for (auto& [name, p] : student.params())
      flat.insert(flat.end(), p.values().begin(), p.values().end());
    return flat;
  };
  const auto r1 = run(7), r2 = run(7), r3 = run(8);
  CHECK(r1 == r2);  // bitwise deterministic
  CHECK(r1 != r3);
  CHECK(teacher.param("layers.0.attn.wq").values() == teacher_before);
}

TEST_CASE("distilling into a teacher clone with lr 0 keeps its metrics") {
  TaskSpec spec;
  spec.name = "patterns";
  spec.seed = 6;
  spec.train_size = 32;
  spec.dev_size = 16;
  TaskDataset data = generate_task(spec);
  ModelConfig cfg = small_config(2, 16, 2, 4);
  cfg.vocab_size = spec.vocab_size;
  cfg.max_seq_len = spec.seq_len;
  TransformerModel teacher(cfg, nullptr);
  randomize_params(teacher, 31);
  const double teacher_acc = evaluate(teacher, data, data.dev);

  Tape tape;
  TransformerModel student(cfg, &tape);
  student.copy_params_from(teacher);
  DistillObjective o;
  o.temperature = 1.0;
  TrainSchedule schedule;
  schedule.steps = 5;
  schedule.optim.lr = 0.0;
  ProjectionBank bank(&tape, 0);
  TrainResult r = distill(teacher, student, data, o, schedule, bank);
  CHECK(r.final_eval == doctest::Approx(teacher_acc).epsilon(1e-12));
}

TEST_CASE("training reduces the loss across seeds") {
  TaskSpec spec;
  spec.name = "patterns";
  spec.seed = 17;
  spec.train_size = 64;
  spec.dev_size = 8;
  TaskDataset data = generate_task(spec);
  ModelConfig tcfg = small_config(2, 16, 2, 4);
  tcfg.vocab_size = spec.vocab_size;
  tcfg.max_seq_len = spec.seq_len;
  TransformerModel teacher(tcfg, nullptr);
  {
    Tape tape;
    TransformerModel tt(tcfg, &tape);
    init_random(tt, 1, 0.02);
    TrainSchedule s;
    s.steps = 120;
    s.batch_size = 8;
    s.optim.lr = 1e-3;
    s.seed = 1;
    s.eval_every = 0;
    train_supervised(tt, data, s);
    teacher.copy_params_from(tt);
  }
  DistillObjective o;
  o.temperature = 2.0;
  o.hard_weight = 0.5;
  for (uint64_t seed = 0; seed < 20; ++seed) {
    Tape tape;
    ModelConfig scfg = small_config(2, 8, 2, 4);
    scfg.vocab_size = spec.vocab_size;
    scfg.max_seq_len = spec.seq_len;
    TransformerModel student(scfg, &tape);
    init_random(student, seed, 0.02);
    ProjectionBank bank(&tape, seed);
    TrainSchedule s;
    s.steps = 200;
    s.batch_size = 8;
    s.optim.lr = 5e-3;
    s.seed = seed;
    s.eval_every = 0;
    TrainResult r = distill(teacher, student, data, o, s, bank);
    INFO("seed ", seed);
    // Batch noise makes single-step comparisons flaky; compare the mean of
    // the first and last ten steps.
    double head = 0.0, tail = 0.0;
    for (size_t i = 0; i < 10; ++i) {
      head += r.history[i].losses.total;
      tail += r.history[r.history.size() - 1 - i].losses.total;
    }
    CHECK(tail < head);
  }
}

TEST_CASE("divergence aborts with a diagnostic naming the term") {
  TaskSpec spec;
  spec.name = "patterns";
  spec.seed = 3;
  spec.train_size = 16;
  spec.dev_size = 8;
  TaskDataset data = generate_task(spec);
  ModelConfig cfg = small_config(1, 8, 2, 4);
  cfg.vocab_size = spec.vocab_size;
  cfg.max_seq_len = spec.seq_len;
  TransformerModel teacher(cfg, nullptr);
  randomize_params(teacher, 41);
  teacher.param("head.w").values()[0] = std::nan("");

  Tape tape;
  TransformerModel student(cfg, &tape);
  init_random(student, 1, 0.02);
  DistillObjective o;
  TrainSchedule s;
  s.steps = 3;
  ProjectionBank bank(&tape, 0);
  try {
    distill(teacher, student, data, o, s, bank);
    FAIL("expected DivergenceError");
  } catch (const DivergenceError& e) {
    CHECK(std::string(e.what()).find("soft_target") != std::string::npos);
  }
}

TEST_CASE("metrics CSV layout follows the objective term labels") {
  DistillObjective o;
  o.terms.push_back({KnowledgeKind::hidden_mse, {1, 3}, 1.0});
  o.terms.push_back({KnowledgeKind::mmd, {2, 4}, 1.0});
  CHECK(metrics_csv_header(o) ==
        "step,total,l_res,l_hard,hidden_mse@1-3,mmd@2-4,eval_metric");
  CHECK(LossTerm{KnowledgeKind::value_relation, {2, 6}, 1.0}.label() ==
        "value_relation@2-6");
}
