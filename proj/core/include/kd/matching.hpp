#pragma once

#include <string>
#include <vector>

#include "kd/tensor.hpp"

namespace kd {

/// One (student layer, teacher layer) assignment, 1-based.
struct LayerPair {
  int student = 0;
  int teacher = 0;
  friend bool operator==(const LayerPair&, const LayerPair&) = default;
};

enum class MatchStrategy { first_k, last_k, dilatation, first_1, last_1 };

/// Strategy names as they appear in config files.
MatchStrategy parse_strategy(const std::string& name);
std::string strategy_name(MatchStrategy s);

struct LayerPairPlan {
  std::vector<LayerPair> pairs;  // monotone in both coordinates
};

/// Builds the layer assignment for a (teacher depth, student depth) pair.
/// first_k: (i,i) for i=1..k; last_k aligns the tails; dilatation spreads
/// all student layers evenly with ceiling rounding, so the last layers
/// always align. k is ignored by dilatation/first_1/last_1.
LayerPairPlan build_plan(int teacher_layers, int student_layers,
                         MatchStrategy strategy, int k);

}  // namespace kd
