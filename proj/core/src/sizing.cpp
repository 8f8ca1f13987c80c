#include "kd/sizing.hpp"

#include <algorithm>
#include <cmath>

namespace kd {

int heads_for_width(int hidden_dim) {
  if (hidden_dim < 2) return 1;
  const double target = std::max(2.0, hidden_dim / 64.0);
  int best = 1;
  double best_dist = std::abs(1.0 - target);
  for (int h = 2; h <= hidden_dim; ++h) {
    if (hidden_dim % h != 0) continue;
    const double dist = std::abs(h - target);
    if (dist < best_dist - 1e-12) {
      best = h;
      best_dist = dist;
    }
  }
  return best;
}

std::vector<ModelConfig> configs_at_budget(const SizingBudget& budget,
                                           const std::vector<int>& depths,
                                           const std::vector<int>& widths,
                                           const ModelConfig& base) {
  if (depths.empty() || widths.empty())
    throw ConfigError("configs_at_budget needs non-empty depth/width ranges");
  std::vector<int> sorted_widths = widths;
  std::sort(sorted_widths.begin(), sorted_widths.end());
  const double limit = budget.budget * (1.0 + budget.slack);
  std::vector<ModelConfig> out;
  for (int depth : depths) {
    ModelConfig best;
    bool found = false;
    for (int width : sorted_widths) {
      ModelConfig cfg = base;
      cfg.num_layers = depth;
      cfg.hidden_dim = width;
      cfg.ffn_dim = 0;  // 4 * width
      cfg.num_heads = heads_for_width(width);
      const double value =
          budget.kind == SizingBudget::Kind::params
              ? static_cast<double>(count_parameters(cfg).total)
              : estimate_flops(cfg, budget.seq_len);
      if (value <= limit) {
        best = cfg;
        found = true;
      }
    }
    if (found) out.push_back(best);
  }
  return out;
}

}  // namespace kd
