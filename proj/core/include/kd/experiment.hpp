#pragma once

#include <ostream>
#include <string>
#include <vector>

#include "kd/matching.hpp"
#include "kd/objective.hpp"
#include "kd/sizing.hpp"
#include "kd/tasks.hpp"

namespace kd {

struct SizeSpec {
  SizingBudget budget;
  std::vector<int> depths;
  std::vector<int> widths;
  ModelConfig base;
};

struct SweepSpec {
  enum class Kind { none, grid, single_match } kind = Kind::none;
  // grid axes
  std::vector<double> temperatures;
  std::vector<double> hard_weights;
  // single-match axes
  std::vector<KnowledgeKind> kinds;
  std::vector<MatchStrategy> strategies;
};

/// Fully validated experiment description; the parse step reports every
/// problem at once before any compute starts.
struct ExperimentConfig {
  TaskSpec task;
  ModelConfig teacher_config;
  std::string teacher_checkpoint;
  TrainSchedule teacher_train;  // used by train-teacher / checkpoint-less runs
  ModelConfig student_config;
  std::string student_checkpoint;

  std::string init_scheme = "random";  // random | pretrain |
                                       // general_distillation | preload
  uint64_t init_seed = 7;
  double init_stddev = 0.02;
  TrainSchedule init_train;
  MatchStrategy preload_strategy = MatchStrategy::dilatation;
  bool preload_copy_head = false;
  TaskSpec corpus;  // lm-stream spec for pretrain / general distillation
  DistillObjective init_objective;

  DistillObjective objective;
  TrainSchedule train;
  uint64_t seed = 1;
  std::string output_dir = "out";
  SweepSpec sweep;
  SizeSpec size;

  std::string echo_json;  // normalized config, written next to every run
};

ExperimentConfig parse_experiment_json(const std::string& text);
ExperimentConfig load_experiment_file(const std::string& path);

/// Replaces the top-level seed and every schedule seed (command-line
/// --seed override); refreshes the config echo.
void override_seed(ExperimentConfig& cfg, uint64_t seed);

struct RunSummary {
  int index = 0;
  double temperature = 1.0;
  double hard_weight = 0.0;
  std::string kind = "-";
  std::string strategy = "-";
  double final_total = 0.0;
  double final_l_res = 0.0;
  double final_l_hard = 0.0;
  double eval_metric = 0.0;
  uint64_t seed = 0;
};

std::string summary_csv_header();
std::string summary_csv_row(const RunSummary& s);

/// Trains the teacher on the task with hard labels; writes teacher.ckpt,
/// metrics.csv and config.json under out_dir.
void run_train_teacher(const ExperimentConfig& cfg, const std::string& out_dir);

/// Builds the student, applies the configured init scheme, writes
/// student_init.ckpt and config.json.
void run_init_student(const ExperimentConfig& cfg, const std::string& out_dir);

/// One downstream distillation run: metrics.csv, student.ckpt, summary.csv
/// (a single row) and config.json under out_dir.
RunSummary run_distill_experiment(const ExperimentConfig& cfg,
                                  const std::string& out_dir);

/// Expands the sweep axes into cells, runs each in its own training
/// context (jobs in parallel), and writes a summary.csv with one row per
/// cell in config-index order regardless of completion order.
void run_sweep(const ExperimentConfig& cfg, const std::string& out_dir,
               int jobs);

/// Width-depth budget sweep as CSV: dimension,layers,params,flops.
void run_size_report(const SizingBudget& budget, const std::vector<int>& depths,
                     const std::vector<int>& widths, const ModelConfig& base,
                     std::ostream& os);

/// Human-readable digest of a sweep summary CSV (best cell first).
std::string report_summary(const std::string& summary_csv_path);

}  // namespace kd
