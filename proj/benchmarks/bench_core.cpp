#include <benchmark/benchmark.h>

#include <random>

#include "kd/init.hpp"
#include "kd/losses.hpp"
#include "kd/model.hpp"
#include "kd/tensor.hpp"

namespace {

kd::Tensor random_matrix(int rows, int cols, uint64_t seed) {
  kd::Tensor t = kd::Tensor::zeros({rows, cols});
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, 1.0);
  for (double& x : t.values()) x = dist(rng);
  return t;
}

void BM_Matmul(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  kd::Tensor a = random_matrix(n, n, 1);
  kd::Tensor b = random_matrix(n, n, 2);
  for (auto _ : state) {
    kd::Tensor c = kd::matmul(a, b);
    benchmark::DoNotOptimize(c.values().data());
  }
  state.SetItemsProcessed(state.iterations() * 2LL * n * n * n);
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(128)->Arg(256);

kd::TransformerModel make_model(int layers, int dim, kd::Tape* tape) {
  kd::ModelConfig cfg;
  cfg.num_layers = layers;
  cfg.hidden_dim = dim;
  cfg.num_heads = 2;
  cfg.vocab_size = 64;
  cfg.max_seq_len = 16;
  cfg.num_labels = 4;
  kd::TransformerModel model(cfg, tape);
  kd::init_random(model, 7, 0.02);
  return model;
}

std::vector<int> sample_ids() {
  std::vector<int> ids(16, kd::kFirstContentId);
  ids[0] = kd::kClsId;
  for (size_t i = 1; i < ids.size(); ++i)
    ids[i] = kd::kFirstContentId + static_cast<int>(i % 32);
  return ids;
}

void BM_Forward(benchmark::State& state) {
  kd::TransformerModel model =
      make_model(static_cast<int>(state.range(0)), 128, nullptr);
  const std::vector<int> ids = sample_ids();
  for (auto _ : state) {
    kd::FeatureTrace trace = model.forward(ids);
    benchmark::DoNotOptimize(trace.logits.values().data());
  }
}
BENCHMARK(BM_Forward)->Arg(2)->Arg(4)->Arg(8);

void BM_ForwardBackward(benchmark::State& state) {
  kd::Tape tape;
  kd::TransformerModel model =
      make_model(static_cast<int>(state.range(0)), 128, &tape);
  const std::vector<int> ids = sample_ids();
  for (auto _ : state) {
    tape.clear();
    kd::FeatureTrace trace = model.forward(ids);
    kd::Tensor loss = kd::reduce_sum(kd::mul(trace.logits, trace.logits));
    tape.backward(loss);
    benchmark::DoNotOptimize(loss.item());
  }
}
BENCHMARK(BM_ForwardBackward)->Arg(2)->Arg(4);

void BM_KnowledgeLoss(benchmark::State& state) {
  const kd::KnowledgeKind kind =
      kd::kAllKnowledgeKinds[static_cast<size_t>(state.range(0))];
  kd::TransformerModel teacher = make_model(4, 128, nullptr);
  kd::TransformerModel student = make_model(2, 128, nullptr);
  const std::vector<int> ids = sample_ids();
  const kd::FeatureTrace t = teacher.forward(ids);
  const kd::FeatureTrace s = student.forward(ids);
  kd::ProjectionBank bank(nullptr, 0);
  const kd::LayerPair pair{2, 4};
  for (auto _ : state) {
    kd::Tensor loss = kd::knowledge_loss(kind, t, s, pair, bank, 2.0);
    benchmark::DoNotOptimize(loss.item());
  }
  state.SetLabel(kd::kind_name(kind));
}
BENCHMARK(BM_KnowledgeLoss)->DenseRange(0, 10);

}  // namespace

BENCHMARK_MAIN();
