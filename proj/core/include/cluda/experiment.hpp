#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cluda/data.hpp"
#include "cluda/engine.hpp"
#include "cluda/metrics.hpp"

namespace cluda {

struct DataGenConfig {
  DomainSpec spec = DomainSpec::desk_default();
  int source_count = 200;
  int target_count = 200;
};

struct RunSettings {
  std::uint64_t seed = 1;
  std::string out_dir = "runs/run";
  std::string dataset_dir = "data/desk";
  int eval_interval = 200;
  int eval_holdout = 40;
  int checkpoint_interval = 0;   // 0 = final checkpoint only
  std::string resume_from;       // checkpoint directory; empty = fresh start
};

struct ExperimentConfig {
  DataGenConfig data;
  TrainConfig train;
  RunSettings run;

  void validate() const;
};

// CPU-sized defaults: the standard 200+200 64x64 corpus with a slim model
// profile and a 2000-iteration schedule, the base configuration of the
// ablation presets.
ExperimentConfig desk_default_experiment();

// Sectioned key=value config text. Unknown sections or keys are rejected
// with the offending name; every field round-trips through
// serialize_config/parse_config unchanged.
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig parse_config_file(const std::string& path);
std::string serialize_config(const ExperimentConfig& config);

// Procedurally generates the source/target corpus and writes it with its
// manifest.
DatasetManifest generate_dataset(const DataGenConfig& config, const std::string& directory);

struct EvalResult {
  IouReport iou;
  std::vector<std::string> class_names;
  std::int64_t pixels = 0;
};

// Student forward over the held-out target samples (labels read here, for
// evaluation only).
EvalResult evaluate_model(const ModelParams<float>& model, const std::string& dataset_dir,
                          const DatasetManifest& manifest, int eval_holdout);

struct RunResult {
  double final_miou = 0.0;
  std::vector<double> per_class_iou;
  std::string out_dir;
  std::vector<StepMetrics> metrics;
};

// Full training run: generates the dataset when absent, trains per config,
// evaluates every eval_interval iterations, writes metrics.csv / eval.csv /
// report.txt plus checkpoints, all byte-deterministic per seed.
RunResult run_experiment(const ExperimentConfig& config);

struct AblationRun {
  std::string config_name;
  std::uint64_t seed = 0;
  double miou = 0.0;
};

struct AblationSummary {
  std::string preset;
  std::vector<AblationRun> runs;
  std::vector<std::string> config_order;
  std::vector<double> mean_miou;
  std::vector<double> std_miou;
  std::vector<std::string> ordering_checks;  // "name: PASS/FAIL" lines
  bool all_orderings_hold = true;
};

// Presets: table4a (no-CL / unweighted / weighted), table4b (all-pairs /
// stuff-only / stuff+thing), multires (baseline / lr_only / lr_hr / weighted),
// embed (256/512/768/1024). Runs every (config, seed) pair, in parallel up to
// CLUDA_THREADS workers, and flags the expected orderings.
AblationSummary ablate(const std::string& preset, const ExperimentConfig& base,
                       const std::vector<std::uint64_t>& seeds);

// Configuration names of one preset, in run order.
std::vector<std::string> ablation_preset_configs(const std::string& preset);

// Worker cap: CLUDA_THREADS when set, else the hardware concurrency.
int worker_limit();

}  // namespace cluda
