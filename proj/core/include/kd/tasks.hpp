#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "kd/tensor.hpp"

namespace kd {

// Reserved token ids shared by every desk task.
inline constexpr int kPadId = 0;
inline constexpr int kClsId = 1;
inline constexpr int kSepId = 2;
inline constexpr int kMaskId = 3;
inline constexpr int kFirstContentId = 4;

enum class TaskKind { classification, regression, lm_stream };
enum class Metric { accuracy, pearson, none };

struct TokenizedExample {
  std::vector<int> ids;  // begins with cls, fixed length per task
  int label_class = 0;
  double label_value = 0.0;
};

struct TaskSpec {
  std::string name = "patterns";  // patterns | score | lm-stream
  uint64_t seed = 1;
  int train_size = 512;
  int dev_size = 128;
  int vocab_size = 64;
  int seq_len = 16;
};

struct TaskDataset {
  std::string name;
  TaskKind kind = TaskKind::classification;
  Metric metric = Metric::accuracy;
  int vocab_size = 64;
  int seq_len = 16;
  int num_labels = 4;
  std::vector<TokenizedExample> train;
  std::vector<TokenizedExample> dev;
};

/// Deterministic synthetic datasets, a pure function of (spec, seed).
///  patterns  - 4-way classification on the presence and order of two
///              planted marker tokens; labels exactly balanced.
///  score     - regression; label is a smooth function of token counts.
///  lm-stream - unlabeled successor-structured corpus for MLM.
TaskDataset generate_task(const TaskSpec& spec);

double accuracy(const std::vector<int>& preds, const std::vector<int>& labels);
/// Sample Pearson correlation; zero-variance input yields 0 with a warning
/// on stderr.
double pearson(const std::vector<double>& preds,
               const std::vector<double>& labels);

struct MaskedExample {
  std::vector<int> ids;
  std::vector<int> targets;  // original id at masked positions, -1 elsewhere
};

/// BERT-style masking: 15% of non-reserved positions, of which 80% become
/// the mask id, 10% a random content id, 10% stay unchanged.
MaskedExample mask_tokens(const std::vector<int>& ids, uint64_t seed,
                          int vocab_size);

/// Line-delimited export: tab-separated token ids, then the label.
void export_dataset(const std::string& path, const TaskDataset& data);

}  // namespace kd
