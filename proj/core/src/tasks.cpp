#include "kd/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <random>

namespace kd {

namespace {

constexpr int kMarkerA = kFirstContentId;      // 4
constexpr int kMarkerB = kFirstContentId + 1;  // 5
constexpr int kFillerStart = kFirstContentId + 2;

int random_filler(std::mt19937_64& rng, int vocab_size) {
  std::uniform_int_distribution<int> dist(kFillerStart, vocab_size - 1);
  return dist(rng);
}

TokenizedExample make_pattern_example(std::mt19937_64& rng, int label,
                                      int seq_len, int vocab_size) {
  TokenizedExample ex;
  ex.label_class = label;
  ex.ids.assign(static_cast<size_t>(seq_len), 0);
  ex.ids[0] = kClsId;
  for (int i = 1; i < seq_len; ++i) ex.ids[static_cast<size_t>(i)] = random_filler(rng, vocab_size);
  std::uniform_int_distribution<int> pos_dist(1, seq_len - 1);
  int p1 = pos_dist(rng);
  int p2 = pos_dist(rng);
  while (p2 == p1) p2 = pos_dist(rng);
  const int lo = std::min(p1, p2), hi = std::max(p1, p2);
  switch (label) {
    case 0:  // A before B
      ex.ids[static_cast<size_t>(lo)] = kMarkerA;
      ex.ids[static_cast<size_t>(hi)] = kMarkerB;
      break;
    case 1:  // B before A
      ex.ids[static_cast<size_t>(lo)] = kMarkerB;
      ex.ids[static_cast<size_t>(hi)] = kMarkerA;
      break;
    case 2:  // only A, planted twice
      ex.ids[static_cast<size_t>(lo)] = kMarkerA;
      ex.ids[static_cast<size_t>(hi)] = kMarkerA;
      break;
    default:  // only B, planted twice
      ex.ids[static_cast<size_t>(lo)] = kMarkerB;
      ex.ids[static_cast<size_t>(hi)] = kMarkerB;
      break;
  }
  return ex;
}

TokenizedExample make_score_example(std::mt19937_64& rng, int seq_len,
                                    int vocab_size) {
  TokenizedExample ex;
  ex.ids.assign(static_cast<size_t>(seq_len), 0);
  ex.ids[0] = kClsId;
  std::uniform_int_distribution<int> dist(kFirstContentId, vocab_size - 1);
  int up = 0, down = 0;
  for (int i = 1; i < seq_len; ++i) {
    const int t = dist(rng);
    ex.ids[static_cast<size_t>(i)] = t;
    // two small disjoint token groups pull the score in opposite directions
    if (t >= kFirstContentId && t < kFirstContentId + 4) ++up;
    if (t >= kFirstContentId + 4 && t < kFirstContentId + 8) ++down;
  }
  ex.label_value = std::tanh((up - down) / 2.0);
  return ex;
}

TokenizedExample make_lm_example(std::mt19937_64& rng, int seq_len,
                                 int vocab_size) {
  TokenizedExample ex;
  ex.ids.assign(static_cast<size_t>(seq_len), 0);
  ex.ids[0] = kClsId;
  const int content = vocab_size - kFirstContentId;
  std::uniform_int_distribution<int> start(0, content - 1);
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  int prev = start(rng);
  ex.ids[1] = kFirstContentId + prev;
  for (int i = 2; i < seq_len; ++i) {
    // mostly-successor stream: learnable local structure for MLM
    if (coin(rng) < 0.85) {
      prev = (prev + 1) % content;
    } else {
      prev = start(rng);
    }
    ex.ids[static_cast<size_t>(i)] = kFirstContentId + prev;
  }
  return ex;
}

}  // namespace

TaskDataset generate_task(const TaskSpec& spec) {
  if (spec.seq_len < 4) throw ConfigError("seq_len must be >= 4");
  if (spec.vocab_size < kFillerStart + 8)
    throw ConfigError("vocab_size must be >= " + std::to_string(kFillerStart + 8));
  if (spec.train_size < 1 || spec.dev_size < 0)
    throw ConfigError("train_size must be positive and dev_size non-negative");
  TaskDataset data;
  data.name = spec.name;
  data.vocab_size = spec.vocab_size;
  data.seq_len = spec.seq_len;
  std::mt19937_64 rng(spec.seed);
  auto fill = [&](std::vector<TokenizedExample>& out, int count, int offset) {
    out.reserve(static_cast<size_t>(count));
    for (int i = 0; i < count; ++i) {
      if (spec.name == "patterns") {
        out.push_back(make_pattern_example(rng, (offset + i) % 4, spec.seq_len,
                                           spec.vocab_size));
      } else if (spec.name == "score") {
        out.push_back(make_score_example(rng, spec.seq_len, spec.vocab_size));
      } else {
        out.push_back(make_lm_example(rng, spec.seq_len, spec.vocab_size));
      }
    }
  };
  if (spec.name == "patterns") {
    data.kind = TaskKind::classification;
    data.metric = Metric::accuracy;
    data.num_labels = 4;
  } else if (spec.name == "score") {
    data.kind = TaskKind::regression;
    data.metric = Metric::pearson;
    data.num_labels = 1;
  } else if (spec.name == "lm-stream") {
    data.kind = TaskKind::lm_stream;
    data.metric = Metric::none;
    data.num_labels = 0;
  } else {
    throw ConfigError("unknown task \"" + spec.name +
                      "\" (expected patterns, score, or lm-stream)");
  }
  fill(data.train, spec.train_size, 0);
  fill(data.dev, spec.dev_size, spec.train_size);
  return data;
}

double accuracy(const std::vector<int>& preds, const std::vector<int>& labels) {
  if (preds.size() != labels.size() || preds.empty())
    throw ValueError("accuracy needs equal-length non-empty inputs");
  size_t hits = 0;
  for (size_t i = 0; i < preds.size(); ++i)
    if (preds[i] == labels[i]) ++hits;
  return static_cast<double>(hits) / static_cast<double>(preds.size());
}

double pearson(const std::vector<double>& preds,
               const std::vector<double>& labels) {
  if (preds.size() != labels.size() || preds.size() < 2)
    throw ValueError("pearson needs equal-length inputs of size >= 2");
  const double n = static_cast<double>(preds.size());
  double ma = 0.0, mb = 0.0;
  for (size_t i = 0; i < preds.size(); ++i) {
    ma += preds[i];
    mb += labels[i];
  }
  ma /= n;
  mb /= n;
  double cov = 0.0, va = 0.0, vb = 0.0;
  for (size_t i = 0; i < preds.size(); ++i) {
    const double da = preds[i] - ma, db = labels[i] - mb;
    cov += da * db;
    va += da * da;
    vb += db * db;
  }
  if (va == 0.0 || vb == 0.0) {
    std::cerr << "warning: pearson on zero-variance input, returning 0\n";
    return 0.0;
  }
  return cov / std::sqrt(va * vb);
}

MaskedExample mask_tokens(const std::vector<int>& ids, uint64_t seed,
                          int vocab_size) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  std::uniform_int_distribution<int> random_id(kFirstContentId, vocab_size - 1);
  MaskedExample out;
  out.ids = ids;
  out.targets.assign(ids.size(), -1);
  for (size_t i = 0; i < ids.size(); ++i) {
    const int id = ids[i];
    if (id == kPadId || id == kClsId || id == kSepId) continue;
    if (coin(rng) >= 0.15) continue;
    out.targets[i] = id;
    const double r = coin(rng);
    if (r < 0.8) {
      out.ids[i] = kMaskId;
    } else if (r < 0.9) {
      out.ids[i] = random_id(rng);
    }  // else keep the original token
  }
  return out;
}

void export_dataset(const std::string& path, const TaskDataset& data) {
  std::ofstream os(path);
  if (!os) throw ValueError("cannot open " + path + " for writing");
  auto dump = [&](const std::vector<TokenizedExample>& split) {
    for (const TokenizedExample& ex : split) {
      for (size_t i = 0; i < ex.ids.size(); ++i) {
        if (i) os << ' ';
        os << ex.ids[i];
      }
      os << '\t';
      if (data.kind == TaskKind::regression)
        os << ex.label_value;
      else
        os << ex.label_class;
      os << '\n';
    }
  };
  dump(data.train);
  dump(data.dev);
}

}  // namespace kd
