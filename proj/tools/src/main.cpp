#include <cstdint>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "kd/experiment.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitError = 1;
constexpr int kExitInvalidConfig = 2;
constexpr int kExitDivergence = 3;

struct CommonArgs {
  std::string config_path;
  std::string out_dir;
  uint64_t seed = 0;
  bool has_seed = false;
  int jobs = 1;
};

void add_common(CLI::App* cmd, CommonArgs& args, bool jobs_flag = false) {
  cmd->add_option("--config", args.config_path, "Experiment config (JSON)")
      ->required();
  cmd->add_option("--out", args.out_dir,
                  "Output directory (default: config output_dir)");
  cmd->add_option("--seed", args.seed,
                  "Override every seed in the config")
      ->each([&args](const std::string&) { args.has_seed = true; });
  if (jobs_flag)
    cmd->add_option("--jobs", args.jobs, "Parallel experiment contexts")
        ->check(CLI::PositiveNumber);
}

kd::ExperimentConfig load(const CommonArgs& args) {
  kd::ExperimentConfig cfg = kd::load_experiment_file(args.config_path);
  if (args.has_seed) kd::override_seed(cfg, args.seed);
  return cfg;
}

std::string out_dir(const CommonArgs& args, const kd::ExperimentConfig& cfg) {
  return args.out_dir.empty() ? cfg.output_dir : args.out_dir;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Knowledge distillation toolkit for transformer encoders"};
  app.require_subcommand(1);

  CommonArgs args;
  CLI::App* train_teacher = app.add_subcommand(
      "train-teacher", "Train the teacher on the task with hard labels");
  CLI::App* init_student = app.add_subcommand(
      "init-student", "Initialize a student (random/pretrain/"
                      "general_distillation/preload) and save it");
  CLI::App* distill = app.add_subcommand(
      "distill", "Distill the teacher into the student on the task");
  CLI::App* sweep = app.add_subcommand(
      "sweep", "Run a grid or single-match sweep of distillation runs");
  CLI::App* size = app.add_subcommand(
      "size", "Enumerate architectures fitting a parameter or flop budget");
  CLI::App* report = app.add_subcommand(
      "report", "Summarize a sweep summary CSV");

  add_common(train_teacher, args);
  add_common(init_student, args);
  add_common(distill, args);
  add_common(sweep, args, /*jobs_flag=*/true);
  add_common(size, args);
  std::string summary_path;
  report->add_option("--summary", summary_path, "summary.csv to digest")
      ->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (report->parsed()) {
      std::cout << kd::report_summary(summary_path);
      return kExitOk;
    }
    const kd::ExperimentConfig cfg = load(args);
    if (train_teacher->parsed()) {
      kd::run_train_teacher(cfg, out_dir(args, cfg));
    } else if (init_student->parsed()) {
      kd::run_init_student(cfg, out_dir(args, cfg));
    } else if (distill->parsed()) {
      const kd::RunSummary s =
          kd::run_distill_experiment(cfg, out_dir(args, cfg));
      std::cout << kd::summary_csv_header() << kd::summary_csv_row(s);
    } else if (sweep->parsed()) {
      kd::run_sweep(cfg, out_dir(args, cfg), args.jobs);
    } else if (size->parsed()) {
      kd::run_size_report(cfg.size.budget, cfg.size.depths, cfg.size.widths,
                          cfg.size.base, std::cout);
    }
    return kExitOk;
  } catch (const kd::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInvalidConfig;
  } catch (const kd::DivergenceError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitDivergence;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitError;
  }
}
