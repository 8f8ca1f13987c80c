#pragma once

#include <vector>

#include "kd/model.hpp"

namespace kd {

/// Head count for a given width: target d/64 (at least 2), snapped to the
/// nearest divisor of d, smaller on ties.
int heads_for_width(int hidden_dim);

struct SizingBudget {
  enum class Kind { params, flops } kind = Kind::params;
  double budget = 0.0;
  int seq_len = 128;      // flops budgets only
  double slack = 0.05;    // a config fits if value <= budget * (1 + slack)
};

/// For each depth, the widest width from the candidate list that fits the
/// budget. Depths with no feasible width are omitted; the result may be
/// empty. base supplies vocab/max_seq_len/label settings.
std::vector<ModelConfig> configs_at_budget(const SizingBudget& budget,
                                           const std::vector<int>& depths,
                                           const std::vector<int>& widths,
                                           const ModelConfig& base);

}  // namespace kd
