#include "kd/matching.hpp"

namespace kd {

MatchStrategy parse_strategy(const std::string& name) {
  if (name == "first") return MatchStrategy::first_k;
  if (name == "last") return MatchStrategy::last_k;
  if (name == "dilatation") return MatchStrategy::dilatation;
  if (name == "first_1") return MatchStrategy::first_1;
  if (name == "last_1") return MatchStrategy::last_1;
  throw ConfigError("unknown matching strategy \"" + name + "\"");
}

std::string strategy_name(MatchStrategy s) {
  switch (s) {
    case MatchStrategy::first_k: return "first";
    case MatchStrategy::last_k: return "last";
    case MatchStrategy::dilatation: return "dilatation";
    case MatchStrategy::first_1: return "first_1";
    case MatchStrategy::last_1: return "last_1";
  }
  throw ConfigError("invalid strategy value");
}

LayerPairPlan build_plan(int teacher_layers, int student_layers,
                         MatchStrategy strategy, int k) {
  if (student_layers < 1 || teacher_layers < student_layers)
    throw ConfigError("invalid depths: need 1 <= L_S <= L_T, got L_S=" +
                      std::to_string(student_layers) +
                      " L_T=" + std::to_string(teacher_layers));
  const bool uses_k =
      strategy == MatchStrategy::first_k || strategy == MatchStrategy::last_k;
  if (uses_k && (k < 1 || k > student_layers))
    throw ConfigError("invalid k=" + std::to_string(k) +
                      " for L_S=" + std::to_string(student_layers));
  LayerPairPlan plan;
  switch (strategy) {
    case MatchStrategy::first_k:
      for (int i = 1; i <= k; ++i) plan.pairs.push_back({i, i});
      break;
    case MatchStrategy::last_k:
      for (int i = 1; i <= k; ++i)
        plan.pairs.push_back({student_layers - k + i, teacher_layers - k + i});
      break;
    case MatchStrategy::dilatation:
      for (int i = 1; i <= student_layers; ++i) {
        const int r = (i * teacher_layers + student_layers - 1) / student_layers;
        plan.pairs.push_back({i, r});
      }
      break;
    case MatchStrategy::first_1:
      plan.pairs.push_back({1, 1});
      break;
    case MatchStrategy::last_1:
      plan.pairs.push_back({student_layers, teacher_layers});
      break;
  }
  return plan;
}

}  // namespace kd
