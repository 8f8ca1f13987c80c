#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <vector>

#include "doctest.h"
#include "kd/sizing.hpp"
#include "test_util.hpp"

using namespace kd;

namespace {

ModelConfig bert_base_like() {
  ModelConfig base;
  base.vocab_size = 30522;
  base.max_seq_len = 512;
  base.num_labels = 2;
  return base;
}

std::vector<int> width_grid(int lo = 64, int hi = 512, int step = 8) {
  std::vector<int> out;
  for (int w = lo; w <= hi; w += step) out.push_back(w);
  return out;
}

}  // namespace

TEST_CASE("head assignment targets d/64 snapped to a divisor") {
  CHECK(heads_for_width(64) == 2);
  CHECK(heads_for_width(128) == 2);
  CHECK(heads_for_width(144) == 2);
  CHECK(heads_for_width(160) == 2);
  CHECK(heads_for_width(176) == 2);
  CHECK(heads_for_width(256) == 4);
  CHECK(heads_for_width(384) == 6);
  CHECK(heads_for_width(512) == 8);
  // 224 = 32*7: target 3.5 is closer to divisor 4 than to 2.
  CHECK(heads_for_width(224) == 4);

  for (int w = 8; w <= 512; w += 8) {
    const int h = heads_for_width(w);
    CHECK(h >= 2);
    CHECK(w % h == 0);
  }
}

TEST_CASE("6.2M parameter budget reproduces the published width ladder") {
  SizingBudget budget;
  budget.kind = SizingBudget::Kind::params;
  budget.budget = 6.2e6;
  const std::vector<int> depths = {2, 3, 4, 8, 12};
  const std::vector<int> expected = {176, 168, 160, 144, 128};

  auto configs =
      configs_at_budget(budget, depths, width_grid(), bert_base_like());
  REQUIRE(configs.size() == depths.size());
  for (size_t i = 0; i < configs.size(); ++i) {
    CHECK(configs[i].num_layers == depths[i]);
    CHECK(std::abs(configs[i].hidden_dim - expected[i]) <= 8);
  }
}

TEST_CASE("budget below the embedding table yields an empty set") {
  SizingBudget budget;
  budget.budget = 1e6;  // 30522 * 64 already exceeds this
  auto configs =
      configs_at_budget(budget, {2, 4}, width_grid(), bert_base_like());
  CHECK(configs.empty());
}

TEST_CASE("feasible width is non-increasing in depth") {
  for (double b : {4e6, 6.2e6, 9e6, 14e6}) {
    SizingBudget budget;
    budget.budget = b;
    auto configs = configs_at_budget(budget, {2, 3, 4, 6, 8, 10, 12},
                                     width_grid(), bert_base_like());
    for (size_t i = 1; i < configs.size(); ++i)
      CHECK(configs[i].hidden_dim <= configs[i - 1].hidden_dim);
  }
}

TEST_CASE("returned configs satisfy the budget and are maximal") {
  SizingBudget budget;
  budget.budget = 6.2e6;
  auto configs =
      configs_at_budget(budget, {2, 4, 8, 12}, width_grid(), bert_base_like());
  REQUIRE_FALSE(configs.empty());
  const double cap = budget.budget * (1.0 + budget.slack);
  for (const ModelConfig& cfg : configs) {
    CHECK(static_cast<double>(count_parameters(cfg).total) <= cap);
    CHECK(cfg.hidden_dim % cfg.num_heads == 0);
    CHECK(cfg.num_heads == heads_for_width(cfg.hidden_dim));
    CHECK(cfg.vocab_size == 30522);
    if (cfg.hidden_dim + 8 <= 512) {
      ModelConfig wider = cfg;
      wider.hidden_dim += 8;
      wider.num_heads = heads_for_width(wider.hidden_dim);
      CHECK(static_cast<double>(count_parameters(wider).total) > cap);
    }
  }
}

TEST_CASE("flops budgets use the forward-pass estimate") {
  ModelConfig anchor = bert_base_like();
  anchor.num_layers = 4;
  anchor.hidden_dim = 160;
  anchor.num_heads = heads_for_width(160);

  SizingBudget budget;
  budget.kind = SizingBudget::Kind::flops;
  budget.seq_len = 128;
  budget.budget = estimate_flops(anchor, budget.seq_len);

  auto configs = configs_at_budget(budget, {2, 4, 8}, width_grid(),
                                   bert_base_like());
  REQUIRE(configs.size() == 3);
  const double cap = budget.budget * (1.0 + budget.slack);
  for (const ModelConfig& cfg : configs)
    CHECK(estimate_flops(cfg, budget.seq_len) <= cap);
  // The anchor itself must be feasible at its own depth.
  auto at4 = std::find_if(configs.begin(), configs.end(), [](const auto& c) {
    return c.num_layers == 4;
  });
  REQUIRE(at4 != configs.end());
  CHECK(at4->hidden_dim >= 160);
  CHECK(configs[0].hidden_dim > configs[2].hidden_dim);
}
