#include "kd/experiment.hpp"

#include <atomic>
#include <exception>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "kd/checkpoint.hpp"
#include "kd/init.hpp"
#include "trainer_util.hpp"

namespace kd {

namespace fs = std::filesystem;
using nlohmann::json;
using internal::format_value;

namespace {

// ---------------------------------------------------------------------------
// Parsing. Every problem is collected and reported in one ConfigError so a
// bad config never fails one field at a time.
// ---------------------------------------------------------------------------

struct ErrorSink {
  std::vector<std::string> messages;
  void add(const std::string& m) { messages.push_back(m); }
  void raise_if_any() const {
    if (messages.empty()) return;
    std::string joined = "invalid configuration:";
    for (const std::string& m : messages) joined += "\n  - " + m;
    throw ConfigError(joined);
  }
};

bool expect_object(const json& j, const std::string& where, ErrorSink& errs) {
  if (j.is_object()) return true;
  errs.add(where + " must be an object");
  return false;
}

template <typename T>
T get_or(const json& j, const char* key, T def, const std::string& where,
         ErrorSink& errs) {
  if (!j.is_object() || !j.contains(key)) return def;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    errs.add(where + "." + key + " has the wrong type");
    return def;
  }
}

TaskSpec parse_task(const json& j, const std::string& where, ErrorSink& errs,
                    const TaskSpec& def = {}) {
  TaskSpec t = def;
  if (!expect_object(j, where, errs)) return t;
  t.name = get_or<std::string>(j, "name", t.name, where, errs);
  t.seed = get_or<uint64_t>(j, "seed", t.seed, where, errs);
  t.train_size = get_or<int>(j, "train_size", t.train_size, where, errs);
  t.dev_size = get_or<int>(j, "dev_size", t.dev_size, where, errs);
  t.vocab_size = get_or<int>(j, "vocab_size", t.vocab_size, where, errs);
  t.seq_len = get_or<int>(j, "seq_len", t.seq_len, where, errs);
  if (t.name != "patterns" && t.name != "score" && t.name != "lm-stream")
    errs.add(where + ".name: unknown task \"" + t.name + "\"");
  if (t.train_size <= 0 || t.dev_size < 0)
    errs.add(where + ": train_size must be positive, dev_size non-negative");
  if (t.seq_len < 4 || t.vocab_size <= kFirstContentId)
    errs.add(where + ": seq_len must be at least 4 and vocab_size larger "
                     "than the reserved id range");
  return t;
}

/// Labels/metric implied by the task; lm-stream models carry a dummy
/// 2-way head that MLM never touches.
void apply_task_to_model(ModelConfig& m, const TaskSpec& task) {
  if (task.name == "score") {
    m.regression = true;
    m.num_labels = 1;
  } else if (task.name == "patterns") {
    m.regression = false;
    m.num_labels = 4;
  } else {
    m.regression = false;
    m.num_labels = 2;
  }
}

ModelConfig parse_model(const json& j, const std::string& where,
                        const TaskSpec& task, ErrorSink& errs) {
  ModelConfig m;
  m.vocab_size = task.vocab_size;
  m.max_seq_len = task.seq_len;
  apply_task_to_model(m, task);
  if (!expect_object(j, where, errs)) return m;
  m.num_layers = get_or<int>(j, "layers", m.num_layers, where, errs);
  m.hidden_dim = get_or<int>(j, "hidden_dim", m.hidden_dim, where, errs);
  m.num_heads = get_or<int>(j, "heads", m.num_heads, where, errs);
  m.ffn_dim = get_or<int>(j, "ffn_dim", m.ffn_dim, where, errs);
  m.vocab_size = get_or<int>(j, "vocab_size", m.vocab_size, where, errs);
  m.max_seq_len = get_or<int>(j, "max_seq_len", m.max_seq_len, where, errs);
  m.separate_mlm_decoder = get_or<bool>(j, "separate_mlm_decoder",
                                        m.separate_mlm_decoder, where, errs);
  const std::string act =
      get_or<std::string>(j, "activation", "gelu", where, errs);
  if (act == "gelu") {
    m.act = Activation::gelu;
  } else if (act == "relu") {
    m.act = Activation::relu;
  } else {
    errs.add(where + ".activation: expected \"gelu\" or \"relu\", got \"" +
             act + "\"");
  }
  try {
    m.validate();
  } catch (const ConfigError& e) {
    errs.add(where + ": " + e.what());
  }
  return m;
}

TrainSchedule parse_schedule(const json& j, const std::string& where,
                             uint64_t default_seed, ErrorSink& errs,
                             const TrainSchedule& def = {}) {
  TrainSchedule s = def;
  s.seed = default_seed;
  if (j.is_null()) return s;
  if (!expect_object(j, where, errs)) return s;
  s.steps = get_or<int>(j, "steps", s.steps, where, errs);
  s.batch_size = get_or<int>(j, "batch_size", s.batch_size, where, errs);
  s.optim.lr = get_or<double>(j, "lr", s.optim.lr, where, errs);
  s.optim.beta1 = get_or<double>(j, "beta1", s.optim.beta1, where, errs);
  s.optim.beta2 = get_or<double>(j, "beta2", s.optim.beta2, where, errs);
  s.optim.eps = get_or<double>(j, "eps", s.optim.eps, where, errs);
  s.optim.weight_decay =
      get_or<double>(j, "weight_decay", s.optim.weight_decay, where, errs);
  s.warmup_frac = get_or<double>(j, "warmup_frac", s.warmup_frac, where, errs);
  s.seed = get_or<uint64_t>(j, "seed", s.seed, where, errs);
  s.eval_every = get_or<int>(j, "eval_every", s.eval_every, where, errs);
  if (s.steps < 0 || s.batch_size <= 0)
    errs.add(where + ": steps must be non-negative, batch_size positive");
  if (s.warmup_frac < 0.0 || s.warmup_frac > 1.0)
    errs.add(where + ".warmup_frac must lie in [0, 1]");
  return s;
}

MatchStrategy parse_strategy_checked(const std::string& name,
                                     const std::string& where,
                                     ErrorSink& errs) {
  try {
    return parse_strategy(name);
  } catch (const ConfigError& e) {
    errs.add(where + ": " + e.what());
    return MatchStrategy::dilatation;
  }
}

std::vector<LossTerm> parse_terms(const json& arr, const ModelConfig& teacher,
                                  const ModelConfig& student,
                                  const std::string& where, ErrorSink& errs) {
  std::vector<LossTerm> terms;
  if (!arr.is_array()) {
    errs.add(where + " must be an array of term objects");
    return terms;
  }
  for (size_t i = 0; i < arr.size(); ++i) {
    const json& j = arr[i];
    const std::string at = where + "[" + std::to_string(i) + "]";
    if (!expect_object(j, at, errs)) continue;
    LossTerm base;
    const std::string kind = get_or<std::string>(j, "kind", "", at, errs);
    try {
      base.kind = parse_kind(kind);
    } catch (const ConfigError& e) {
      errs.add(at + ": " + e.what());
      continue;
    }
    base.weight = get_or<double>(j, "weight", 1.0, at, errs);
    if (base.kind == KnowledgeKind::soft_target) {
      errs.add(at + ": soft_target is the response loss, not a feature term");
      continue;
    }
    if (j.contains("strategy")) {
      const MatchStrategy strategy = parse_strategy_checked(
          get_or<std::string>(j, "strategy", "", at, errs), at, errs);
      const int k = get_or<int>(j, "k", student.num_layers, at, errs);
      try {
        for (const LayerPair& pair :
             build_plan(teacher.num_layers, student.num_layers, strategy, k)
                 .pairs) {
          LossTerm t = base;
          t.pair = pair;
          terms.push_back(t);
        }
      } catch (const ConfigError& e) {
        errs.add(at + ": " + e.what());
      }
    } else {
      base.pair.student = get_or<int>(j, "student_layer", 0, at, errs);
      base.pair.teacher = get_or<int>(j, "teacher_layer", 0, at, errs);
      if (!j.contains("student_layer") || !j.contains("teacher_layer"))
        errs.add(at + ": give either strategy or an explicit "
                      "student_layer/teacher_layer pair");
      terms.push_back(base);
    }
  }
  return terms;
}

DistillObjective parse_objective(const json& j, const ModelConfig& teacher,
                                 const ModelConfig& student,
                                 const std::string& where, ErrorSink& errs) {
  DistillObjective o;
  if (j.is_null()) return o;
  if (!expect_object(j, where, errs)) return o;
  o.temperature = get_or<double>(j, "temperature", o.temperature, where, errs);
  o.hard_weight = get_or<double>(j, "hard_weight", o.hard_weight, where, errs);
  o.response_weight =
      get_or<double>(j, "response_weight", o.response_weight, where, errs);
  o.relation_pair.previous_and_current =
      get_or<bool>(j, "relation_previous_and_current", false, where, errs);
  if (j.contains("terms"))
    o.terms = parse_terms(j.at("terms"), teacher, student, where + ".terms",
                          errs);
  try {
    o.validate(teacher, student);
  } catch (const ConfigError& e) {
    errs.add(where + ": " + e.what());
  }
  return o;
}

SweepSpec parse_sweep(const json& j, const std::string& where,
                      ErrorSink& errs) {
  SweepSpec s;
  if (j.is_null()) return s;
  if (!expect_object(j, where, errs)) return s;
  const std::string kind = get_or<std::string>(j, "kind", "grid", where, errs);
  if (kind == "grid") {
    s.kind = SweepSpec::Kind::grid;
    s.temperatures = get_or<std::vector<double>>(
        j, "temperatures", {1.0, 2.0, 4.0, 8.0}, where, errs);
    s.hard_weights = get_or<std::vector<double>>(
        j, "hard_weights", {0.1, 0.2, 0.5, 1.0, 2.0, 5.0}, where, errs);
    if (s.temperatures.empty() || s.hard_weights.empty())
      errs.add(where + ": grid axes must be non-empty");
    for (double t : s.temperatures)
      if (t <= 0.0) errs.add(where + ".temperatures must be positive");
  } else if (kind == "single_match") {
    s.kind = SweepSpec::Kind::single_match;
    if (j.contains("kinds")) {
      for (const auto& name :
           get_or<std::vector<std::string>>(j, "kinds", {}, where, errs)) {
        try {
          s.kinds.push_back(parse_kind(name));
        } catch (const ConfigError& e) {
          errs.add(where + ".kinds: " + e.what());
        }
      }
    } else {
      s.kinds.assign(std::begin(kAllKnowledgeKinds),
                     std::end(kAllKnowledgeKinds));
    }
    if (j.contains("strategies")) {
      for (const auto& name :
           get_or<std::vector<std::string>>(j, "strategies", {}, where, errs))
        s.strategies.push_back(parse_strategy_checked(name, where, errs));
    } else {
      s.strategies = {MatchStrategy::first_k, MatchStrategy::last_k,
                      MatchStrategy::dilatation, MatchStrategy::first_1,
                      MatchStrategy::last_1};
    }
    if (s.kinds.empty() || s.strategies.empty())
      errs.add(where + ": single_match axes must be non-empty");
  } else {
    errs.add(where + ".kind: expected \"grid\" or \"single_match\", got \"" +
             kind + "\"");
  }
  return s;
}

SizeSpec parse_size(const json& j, const std::string& where, ErrorSink& errs) {
  SizeSpec s;
  s.budget.kind = SizingBudget::Kind::params;
  s.budget.budget = 6.2e6;
  s.depths = {2, 3, 4, 8, 12};
  for (int w = 64; w <= 512; w += 8) s.widths.push_back(w);
  s.base.vocab_size = 30522;
  s.base.max_seq_len = 512;
  s.base.num_labels = 2;
  if (j.is_null()) return s;
  if (!expect_object(j, where, errs)) return s;
  const std::string kind =
      get_or<std::string>(j, "budget_kind", "params", where, errs);
  if (kind == "params") {
    s.budget.kind = SizingBudget::Kind::params;
  } else if (kind == "flops") {
    s.budget.kind = SizingBudget::Kind::flops;
  } else {
    errs.add(where + ".budget_kind: expected \"params\" or \"flops\"");
  }
  s.budget.budget = get_or<double>(j, "budget", s.budget.budget, where, errs);
  s.budget.seq_len = get_or<int>(j, "seq_len", s.budget.seq_len, where, errs);
  s.budget.slack = get_or<double>(j, "slack", s.budget.slack, where, errs);
  s.depths = get_or<std::vector<int>>(j, "depths", s.depths, where, errs);
  s.widths = get_or<std::vector<int>>(j, "widths", s.widths, where, errs);
  s.base.vocab_size =
      get_or<int>(j, "vocab_size", s.base.vocab_size, where, errs);
  s.base.max_seq_len =
      get_or<int>(j, "max_seq_len", s.base.max_seq_len, where, errs);
  if (s.budget.budget <= 0.0) errs.add(where + ".budget must be positive");
  return s;
}

json schedule_to_json(const TrainSchedule& s) {
  return json{{"steps", s.steps},
              {"batch_size", s.batch_size},
              {"lr", s.optim.lr},
              {"beta1", s.optim.beta1},
              {"beta2", s.optim.beta2},
              {"eps", s.optim.eps},
              {"weight_decay", s.optim.weight_decay},
              {"warmup_frac", s.warmup_frac},
              {"seed", s.seed},
              {"eval_every", s.eval_every}};
}

json model_to_json(const ModelConfig& m) {
  return json{{"layers", m.num_layers},
              {"hidden_dim", m.hidden_dim},
              {"heads", m.num_heads},
              {"ffn_dim", m.ffn_dim},
              {"vocab_size", m.vocab_size},
              {"max_seq_len", m.max_seq_len},
              {"activation", m.act == Activation::gelu ? "gelu" : "relu"},
              {"separate_mlm_decoder", m.separate_mlm_decoder}};
}

json task_to_json(const TaskSpec& t) {
  return json{{"name", t.name},         {"seed", t.seed},
              {"train_size", t.train_size}, {"dev_size", t.dev_size},
              {"vocab_size", t.vocab_size}, {"seq_len", t.seq_len}};
}

json objective_to_json(const DistillObjective& o) {
  json terms = json::array();
  for (const LossTerm& t : o.terms)
    terms.push_back(json{{"kind", kind_name(t.kind)},
                         {"student_layer", t.pair.student},
                         {"teacher_layer", t.pair.teacher},
                         {"weight", t.weight}});
  return json{{"temperature", o.temperature},
              {"hard_weight", o.hard_weight},
              {"response_weight", o.response_weight},
              {"relation_previous_and_current",
               o.relation_pair.previous_and_current},
              {"terms", terms}};
}

/// Re-serializes the parsed config (defaults filled in, strategies
/// expanded to explicit layer pairs) so the echo file alone reproduces
/// the run.
std::string normalized_json(const ExperimentConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["output_dir"] = c.output_dir;
  j["task"] = task_to_json(c.task);
  j["teacher"] = model_to_json(c.teacher_config);
  j["teacher"]["checkpoint"] = c.teacher_checkpoint;
  j["teacher"]["train"] = schedule_to_json(c.teacher_train);
  j["student"] = model_to_json(c.student_config);
  j["student"]["checkpoint"] = c.student_checkpoint;
  j["init"] = json{{"scheme", c.init_scheme},
                   {"seed", c.init_seed},
                   {"stddev", c.init_stddev},
                   {"strategy", strategy_name(c.preload_strategy)},
                   {"copy_head", c.preload_copy_head},
                   {"corpus", task_to_json(c.corpus)},
                   {"train", schedule_to_json(c.init_train)},
                   {"objective", objective_to_json(c.init_objective)}};
  j["objective"] = objective_to_json(c.objective);
  j["train"] = schedule_to_json(c.train);
  if (c.sweep.kind != SweepSpec::Kind::none) {
    json s;
    if (c.sweep.kind == SweepSpec::Kind::grid) {
      s["kind"] = "grid";
      s["temperatures"] = c.sweep.temperatures;
      s["hard_weights"] = c.sweep.hard_weights;
    } else {
      s["kind"] = "single_match";
      json kinds = json::array(), strategies = json::array();
      for (KnowledgeKind k : c.sweep.kinds) kinds.push_back(kind_name(k));
      for (MatchStrategy m : c.sweep.strategies)
        strategies.push_back(strategy_name(m));
      s["kinds"] = kinds;
      s["strategies"] = strategies;
    }
    j["sweep"] = s;
  }
  j["size"] = json{
      {"budget_kind",
       c.size.budget.kind == SizingBudget::Kind::params ? "params" : "flops"},
      {"budget", c.size.budget.budget},
      {"seq_len", c.size.budget.seq_len},
      {"slack", c.size.budget.slack},
      {"depths", c.size.depths},
      {"widths", c.size.widths},
      {"vocab_size", c.size.base.vocab_size},
      {"max_seq_len", c.size.base.max_seq_len}};
  return j.dump(2) + "\n";
}

// ---------------------------------------------------------------------------
// Run helpers.
// ---------------------------------------------------------------------------

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ValueError("cannot write " + path.string());
  os << text;
}

void write_config_echo(const ExperimentConfig& cfg, const fs::path& dir) {
  write_file(dir / "config.json", cfg.echo_json);
}

fs::path make_out_dir(const std::string& out_dir) {
  fs::path dir(out_dir);
  fs::create_directories(dir);
  return dir;
}

/// A frozen (tape-less) teacher, from the configured checkpoint or, when
/// no checkpoint is given, trained in a throwaway context on the task.
TransformerModel make_teacher(const ExperimentConfig& cfg,
                              const TaskDataset& data) {
  TransformerModel teacher(cfg.teacher_config, nullptr);
  if (!cfg.teacher_checkpoint.empty()) {
    load_checkpoint_into(cfg.teacher_checkpoint, teacher.params());
    return teacher;
  }
  Tape tape;
  TransformerModel trained(cfg.teacher_config, &tape);
  init_random(trained, cfg.teacher_train.seed, 0.02);
  train_supervised(trained, data, cfg.teacher_train);
  teacher.copy_params_from(trained);
  return teacher;
}

/// Applies the configured init scheme (or a student checkpoint, which
/// wins over any scheme).
void apply_init(const ExperimentConfig& cfg, TransformerModel& student,
                const TransformerModel* teacher) {
  if (!cfg.student_checkpoint.empty()) {
    load_checkpoint_into(cfg.student_checkpoint, student.params());
    return;
  }
  if (cfg.init_scheme == "random") {
    init_random(student, cfg.init_seed, cfg.init_stddev);
    return;
  }
  if (cfg.init_scheme == "pretrain") {
    init_random(student, cfg.init_seed, cfg.init_stddev);
    pretrain_mlm(student, generate_task(cfg.corpus), cfg.init_train);
    return;
  }
  if (cfg.init_scheme == "general_distillation") {
    if (!teacher) throw ConfigError("general_distillation needs a teacher");
    init_random(student, cfg.init_seed, cfg.init_stddev);
    ProjectionBank bank(student.tape(), cfg.init_seed);
    general_distill(student, *teacher, generate_task(cfg.corpus),
                    cfg.init_train, cfg.init_objective, bank);
    return;
  }
  if (cfg.init_scheme == "preload") {
    if (!teacher) throw ConfigError("preload needs a teacher");
    init_random(student, cfg.init_seed, cfg.init_stddev);
    const LayerPairPlan plan =
        build_plan(cfg.teacher_config.num_layers, cfg.student_config.num_layers,
                   cfg.preload_strategy, cfg.student_config.num_layers);
    preload(student, *teacher, plan, cfg.init_seed, cfg.preload_copy_head);
    return;
  }
  throw ConfigError("unknown init scheme \"" + cfg.init_scheme + "\"");
}

RunSummary run_one(const ExperimentConfig& cfg, const TransformerModel& teacher,
                   const TaskDataset& data, const fs::path& dir,
                   RunSummary summary) {
  fs::create_directories(dir);
  write_config_echo(cfg, dir);

  Tape tape;
  TransformerModel student(cfg.student_config, &tape);
  apply_init(cfg, student, &teacher);
  ProjectionBank bank(&tape, cfg.seed);

  std::ofstream csv(dir / "metrics.csv", std::ios::binary);
  TrainResult result =
      distill(teacher, student, data, cfg.objective, cfg.train, bank, &csv);
  csv.close();
  save_checkpoint((dir / "student.ckpt").string(), student.params());

  summary.temperature = cfg.objective.temperature;
  summary.hard_weight = cfg.objective.hard_weight;
  summary.seed = cfg.train.seed;
  summary.eval_metric = result.final_eval;
  if (!result.history.empty()) {
    const LossBreakdown& last = result.history.back().losses;
    summary.final_total = last.total;
    summary.final_l_res = last.l_res;
    summary.final_l_hard = last.l_hard;
  }
  write_file(dir / "summary.csv",
             summary_csv_header() + summary_csv_row(summary));
  return summary;
}

/// Sweep cells in declaration order; index is the row index in the
/// summary CSV.
std::vector<std::pair<ExperimentConfig, RunSummary>> expand_sweep(
    const ExperimentConfig& base) {
  std::vector<std::pair<ExperimentConfig, RunSummary>> cells;
  int index = 0;
  if (base.sweep.kind == SweepSpec::Kind::grid) {
    for (double t : base.sweep.temperatures) {
      for (double a : base.sweep.hard_weights) {
        ExperimentConfig c = base;
        c.objective.temperature = t;
        c.objective.hard_weight = a;
        c.echo_json = normalized_json(c);
        RunSummary s;
        s.index = index++;
        cells.emplace_back(std::move(c), s);
      }
    }
    return cells;
  }
  if (base.sweep.kind == SweepSpec::Kind::single_match) {
    for (MatchStrategy strategy : base.sweep.strategies) {
      for (KnowledgeKind kind : base.sweep.kinds) {
        ExperimentConfig c = base;
        c.objective.terms.clear();
        if (kind == KnowledgeKind::soft_target) {
          c.objective.response_weight = 1.0;
        } else {
          c.objective.response_weight = 0.0;
          for (const LayerPair& pair :
               build_plan(base.teacher_config.num_layers,
                          base.student_config.num_layers, strategy,
                          base.student_config.num_layers)
                   .pairs)
            c.objective.terms.push_back(LossTerm{kind, pair, 1.0});
        }
        c.objective.validate(base.teacher_config, base.student_config);
        c.echo_json = normalized_json(c);
        RunSummary s;
        s.index = index++;
        s.kind = kind_name(kind);
        s.strategy = strategy_name(strategy);
        cells.emplace_back(std::move(c), s);
      }
    }
    return cells;
  }
  throw ConfigError("sweep requires a sweep section in the config");
}

std::string cell_dir_name(int index) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "cell_%03d", index);
  return buf;
}

}  // namespace

ExperimentConfig parse_experiment_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  ErrorSink errs;
  if (!j.is_object()) {
    errs.add("top level must be an object");
    errs.raise_if_any();
  }

  ExperimentConfig c;
  c.seed = get_or<uint64_t>(j, "seed", c.seed, "top level", errs);
  c.output_dir =
      get_or<std::string>(j, "output_dir", c.output_dir, "top level", errs);
  c.task = parse_task(j.value("task", json::object()), "task", errs);

  c.teacher_config =
      parse_model(j.value("teacher", json::object()), "teacher", c.task, errs);
  const json teacher_j = j.value("teacher", json::object());
  c.teacher_checkpoint =
      get_or<std::string>(teacher_j, "checkpoint", "", "teacher", errs);
  c.teacher_train = parse_schedule(teacher_j.value("train", json()),
                                   "teacher.train", c.seed, errs);

  c.student_config =
      parse_model(j.value("student", json::object()), "student", c.task, errs);
  const json student_j = j.value("student", json::object());
  c.student_checkpoint =
      get_or<std::string>(student_j, "checkpoint", "", "student", errs);

  const json init_j = j.value("init", json());
  if (!init_j.is_null() && init_j.is_object()) {
    c.init_scheme =
        get_or<std::string>(init_j, "scheme", c.init_scheme, "init", errs);
    c.init_seed = get_or<uint64_t>(init_j, "seed", c.seed, "init", errs);
    c.init_stddev =
        get_or<double>(init_j, "stddev", c.init_stddev, "init", errs);
    if (init_j.contains("strategy"))
      c.preload_strategy = parse_strategy_checked(
          get_or<std::string>(init_j, "strategy", "", "init", errs),
          "init.strategy", errs);
    c.preload_copy_head =
        get_or<bool>(init_j, "copy_head", false, "init", errs);
    TaskSpec corpus_default;
    corpus_default.name = "lm-stream";
    corpus_default.seed = c.init_seed;
    corpus_default.vocab_size = c.task.vocab_size;
    corpus_default.seq_len = c.task.seq_len;
    corpus_default.dev_size = 0;
    c.corpus = init_j.contains("corpus")
                   ? parse_task(init_j.at("corpus"), "init.corpus", errs,
                                corpus_default)
                   : corpus_default;
    c.init_train = parse_schedule(init_j.value("train", json()), "init.train",
                                  c.init_seed, errs);
    c.init_objective =
        parse_objective(init_j.value("objective", json()), c.teacher_config,
                        c.student_config, "init.objective", errs);
    if (c.init_scheme != "random" && c.init_scheme != "pretrain" &&
        c.init_scheme != "general_distillation" && c.init_scheme != "preload")
      errs.add("init.scheme: unknown scheme \"" + c.init_scheme + "\"");
  } else if (!init_j.is_null()) {
    errs.add("init must be an object");
  } else {
    c.init_seed = c.seed;
    c.corpus.name = "lm-stream";
    c.corpus.seed = c.seed;
    c.corpus.vocab_size = c.task.vocab_size;
    c.corpus.seq_len = c.task.seq_len;
    c.corpus.dev_size = 0;
    c.init_train.seed = c.seed;
  }

  c.objective = parse_objective(j.value("objective", json()), c.teacher_config,
                                c.student_config, "objective", errs);
  c.train = parse_schedule(j.value("train", json()), "train", c.seed, errs);
  c.sweep = parse_sweep(j.value("sweep", json()), "sweep", errs);
  c.size = parse_size(j.value("size", json()), "size", errs);

  errs.raise_if_any();
  c.echo_json = normalized_json(c);
  return c;
}

ExperimentConfig load_experiment_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot read config file " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse_experiment_json(ss.str());
}

void override_seed(ExperimentConfig& cfg, uint64_t seed) {
  cfg.seed = seed;
  cfg.train.seed = seed;
  cfg.teacher_train.seed = seed;
  cfg.init_seed = seed;
  cfg.init_train.seed = seed;
  cfg.echo_json = normalized_json(cfg);
}

std::string summary_csv_header() {
  return "index,temperature,hard_weight,kind,strategy,total,l_res,l_hard,"
         "eval_metric,seed\n";
}

std::string summary_csv_row(const RunSummary& s) {
  std::string row = std::to_string(s.index);
  row += "," + format_value(s.temperature);
  row += "," + format_value(s.hard_weight);
  row += "," + s.kind;
  row += "," + s.strategy;
  row += "," + format_value(s.final_total);
  row += "," + format_value(s.final_l_res);
  row += "," + format_value(s.final_l_hard);
  row += "," + format_value(s.eval_metric);
  row += "," + std::to_string(s.seed);
  return row + "\n";
}

void run_train_teacher(const ExperimentConfig& cfg,
                       const std::string& out_dir) {
  const fs::path dir = make_out_dir(out_dir);
  write_config_echo(cfg, dir);
  const TaskDataset data = generate_task(cfg.task);

  Tape tape;
  TransformerModel teacher(cfg.teacher_config, &tape);
  init_random(teacher, cfg.teacher_train.seed, 0.02);
  std::ofstream csv(dir / "metrics.csv", std::ios::binary);
  TrainResult result = train_supervised(teacher, data, cfg.teacher_train, &csv);
  csv.close();
  save_checkpoint((dir / "teacher.ckpt").string(), teacher.params());

  RunSummary s;
  s.hard_weight = 1.0;
  s.seed = cfg.teacher_train.seed;
  s.eval_metric = result.final_eval;
  if (!result.history.empty()) {
    s.final_total = result.history.back().losses.total;
    s.final_l_hard = result.history.back().losses.l_hard;
  }
  write_file(dir / "summary.csv", summary_csv_header() + summary_csv_row(s));
}

void run_init_student(const ExperimentConfig& cfg, const std::string& out_dir) {
  const fs::path dir = make_out_dir(out_dir);
  write_config_echo(cfg, dir);

  Tape tape;
  TransformerModel student(cfg.student_config, &tape);
  const bool needs_teacher = cfg.student_checkpoint.empty() &&
                             (cfg.init_scheme == "general_distillation" ||
                              cfg.init_scheme == "preload");
  if (needs_teacher) {
    const TaskDataset data = generate_task(cfg.task);
    const TransformerModel teacher = make_teacher(cfg, data);
    apply_init(cfg, student, &teacher);
  } else {
    apply_init(cfg, student, nullptr);
  }
  save_checkpoint((dir / "student_init.ckpt").string(), student.params());
}

RunSummary run_distill_experiment(const ExperimentConfig& cfg,
                                  const std::string& out_dir) {
  const fs::path dir = make_out_dir(out_dir);
  const TaskDataset data = generate_task(cfg.task);
  const TransformerModel teacher = make_teacher(cfg, data);
  return run_one(cfg, teacher, data, dir, RunSummary{});
}

void run_sweep(const ExperimentConfig& cfg, const std::string& out_dir,
               int jobs) {
  const fs::path dir = make_out_dir(out_dir);
  write_config_echo(cfg, dir);
  const TaskDataset data = generate_task(cfg.task);
  const TransformerModel teacher = make_teacher(cfg, data);

  auto cells = expand_sweep(cfg);
  std::vector<RunSummary> rows(cells.size());
  std::atomic<size_t> next{0};
  std::mutex error_mutex;
  std::exception_ptr first_error;

  auto worker = [&]() {
    for (;;) {
      const size_t i = next.fetch_add(1);
      if (i >= cells.size()) return;
      {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (first_error) return;
      }
      try {
        rows[i] = run_one(cells[i].first, teacher, data,
                          dir / cell_dir_name(cells[i].second.index),
                          cells[i].second);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!first_error) first_error = std::current_exception();
        return;
      }
    }
  };

  const int n_threads =
      std::max(1, std::min<int>(jobs, static_cast<int>(cells.size())));
  std::vector<std::thread> pool;
  pool.reserve(static_cast<size_t>(n_threads));
  for (int i = 0; i < n_threads; ++i) pool.emplace_back(worker);
  for (std::thread& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);

  std::string csv = summary_csv_header();
  for (const RunSummary& row : rows) csv += summary_csv_row(row);
  write_file(dir / "summary.csv", csv);
}

void run_size_report(const SizingBudget& budget, const std::vector<int>& depths,
                     const std::vector<int>& widths, const ModelConfig& base,
                     std::ostream& os) {
  os << "dimension,layers,params,flops\n";
  for (const ModelConfig& cfg : configs_at_budget(budget, depths, widths,
                                                  base)) {
    os << cfg.hidden_dim << ',' << cfg.num_layers << ','
       << count_parameters(cfg).total << ','
       << format_value(estimate_flops(cfg, budget.seq_len)) << '\n';
  }
}

std::string report_summary(const std::string& summary_csv_path) {
  std::ifstream is(summary_csv_path, std::ios::binary);
  if (!is) throw ValueError("cannot read " + summary_csv_path);
  std::string line;
  if (!std::getline(is, line))
    throw ValueError(summary_csv_path + " is empty");

  struct Row {
    RunSummary s;
    std::string raw;
  };
  std::vector<Row> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) fields.push_back(field);
    if (fields.size() != 10)
      throw ValueError("malformed summary row: " + line);
    Row r;
    r.raw = line;
    r.s.index = std::stoi(fields[0]);
    r.s.temperature = std::stod(fields[1]);
    r.s.hard_weight = std::stod(fields[2]);
    r.s.kind = fields[3];
    r.s.strategy = fields[4];
    r.s.final_total = std::stod(fields[5]);
    r.s.eval_metric = std::stod(fields[8]);
    rows.push_back(std::move(r));
  }
  if (rows.empty()) throw ValueError(summary_csv_path + " has no data rows");

  std::stable_sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) {
    return a.s.eval_metric > b.s.eval_metric;
  });
  double mean = 0.0;
  for (const Row& r : rows) mean += r.s.eval_metric;
  mean /= static_cast<double>(rows.size());

  std::string out;
  out += "runs: " + std::to_string(rows.size()) + "\n";
  out += "mean eval_metric: " + format_value(mean) + "\n";
  const RunSummary& best = rows.front().s;
  out += "best: index=" + std::to_string(best.index) +
         " kind=" + best.kind + " strategy=" + best.strategy +
         " temperature=" + format_value(best.temperature) +
         " hard_weight=" + format_value(best.hard_weight) +
         " eval_metric=" + format_value(best.eval_metric) + "\n";
  out += "ranking (best first):\n";
  out += summary_csv_header();
  for (const Row& r : rows) out += r.raw + "\n";
  return out;
}

}  // namespace kd
