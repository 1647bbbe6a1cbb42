#include "cluda/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <future>
#include <sstream>
#include <thread>

#include "cluda/error.hpp"

namespace fs = std::filesystem;

namespace cluda {

namespace {

std::string sample_id(const char* prefix, int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s_%05d", prefix, index);
  return buf;
}

std::string fmt_metric(double v) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

}  // namespace

ExperimentConfig desk_default_experiment() {
  ExperimentConfig c;
  c.train.model.stage_channels = {8, 16, 32, 64};
  c.train.model.embed_dim = 32;
  c.train.model.num_classes = c.data.spec.taxonomy.num_classes();
  // Desk-scale schedule: the paper's warmup fraction and learning rates are
  // rescaled to a 2000-iteration run on a small model.
  c.train.schedule.total_iters = 2000;
  c.train.schedule.warmup_iters = 100;
  c.train.schedule.lr_encoder = 1e-3;
  c.train.schedule.lr_decoder = 1e-3;
  // A small model on 64x64 scenes saturates its softmax far below the
  // full-scale 0.968 threshold; 0.65 puts the confidence gate in the
  // regime the teacher actually traverses here.
  c.train.cl.beta = 0.65;
  c.run.eval_interval = 250;
  c.run.eval_holdout = 40;
  c.run.dataset_dir = "data/desk";
  c.run.out_dir = "runs/desk";
  return c;
}

DatasetManifest generate_dataset(const DataGenConfig& config, const std::string& directory) {
  config.spec.validate();
  std::vector<SegSample> samples;
  samples.reserve(static_cast<std::size_t>(config.source_count + config.target_count));
  for (int i = 0; i < config.source_count; ++i) {
    SegSample s = generate_scene(config.spec, static_cast<std::uint64_t>(i));
    s.id = sample_id("src", i);
    samples.push_back(std::move(s));
  }
  for (int i = 0; i < config.target_count; ++i) {
    const std::uint64_t scene_seed = static_cast<std::uint64_t>(config.source_count + i);
    SegSample t = apply_domain_shift(generate_scene(config.spec, scene_seed), config.spec,
                                     scene_seed);
    t.id = sample_id("tgt", i);
    samples.push_back(std::move(t));
  }
  return write_dataset(directory, samples, config.spec.taxonomy);
}

EvalResult evaluate_model(const ModelParams<float>& model, const std::string& dataset_dir,
                          const DatasetManifest& manifest, int eval_holdout) {
  std::vector<const ManifestEntry*> targets;
  for (const auto& e : manifest.samples)
    if (e.domain == Domain::Target) targets.push_back(&e);
  if (eval_holdout < 1 || eval_holdout > static_cast<int>(targets.size()))
    fail(ErrorKind::InvalidArgument, "eval holdout outside the target sample count");
  ConfusionMatrix cm(manifest.taxonomy.num_classes());
  for (std::size_t i = targets.size() - static_cast<std::size_t>(eval_holdout);
       i < targets.size(); ++i) {
    const SegSample s = load_sample(dataset_dir, *targets[i], /*with_label=*/true);
    const PseudoLabel pred = pseudo_label_from_probs(model_probs(model, s.image));
    cm.accumulate(pred.labels, s.label);
  }
  EvalResult r;
  r.iou = miou(cm);
  r.class_names = manifest.taxonomy.names;
  r.pixels = cm.total();
  return r;
}

RunResult run_experiment(const ExperimentConfig& config) {
  config.validate();
  std::error_code ec;
  fs::create_directories(config.run.out_dir, ec);
  if (ec) fail(ErrorKind::IoFailure, "cannot create output directory " + config.run.out_dir);

  if (!fs::exists(fs::path(config.run.dataset_dir) / "manifest.txt"))
    generate_dataset(config.data, config.run.dataset_dir);
  const DatasetManifest manifest = read_manifest(config.run.dataset_dir);
  if (manifest.taxonomy.names != config.data.spec.taxonomy.names)
    fail(ErrorKind::ConfigError, "dataset taxonomy does not match the configuration");

  {
    std::ofstream cfg_out(fs::path(config.run.out_dir) / "config.txt");
    cfg_out << serialize_config(config);
  }

  const TrainingData data =
      load_training_data(config.run.dataset_dir, manifest, config.run.eval_holdout);
  TrainerState state =
      config.run.resume_from.empty()
          ? TrainerState::init(config.train.model, config.run.seed)
          : load_checkpoint(config.run.resume_from, config.train.model);
  if (state.iteration > config.train.schedule.total_iters)
    fail(ErrorKind::CheckpointMismatch, "checkpoint iteration exceeds the schedule");
  std::vector<const LabelMap*> source_labels;
  for (const SegSample& s : data.source) source_labels.push_back(&s.label);
  const RcsSampler rcs(manifest.source_freq, config.train.rcs_temperature, source_labels);

  std::ofstream metrics_csv(fs::path(config.run.out_dir) / "metrics.csv");
  std::ofstream eval_csv(fs::path(config.run.out_dir) / "eval.csv");
  if (!metrics_csv || !eval_csv)
    fail(ErrorKind::IoFailure, "cannot open csv outputs in " + config.run.out_dir);
  metrics_csv << "iteration,l_ce_s,l_ce_t,l_cl_s,l_cl_m,l_fd,total,gamma,conf_frac,lr_enc,lr_dec\n";
  eval_csv << "iteration";
  for (const std::string& n : manifest.taxonomy.names) eval_csv << ",iou_" << n;
  eval_csv << ",miou\n";

  RunResult result;
  result.out_dir = config.run.out_dir;

  auto run_eval = [&](std::int64_t iteration) {
    const EvalResult ev =
        evaluate_model(state.student, config.run.dataset_dir, manifest, config.run.eval_holdout);
    eval_csv << iteration;
    for (std::size_t c = 0; c < ev.iou.per_class.size(); ++c)
      eval_csv << "," << fmt_metric(ev.iou.per_class[c]);
    eval_csv << "," << fmt_metric(ev.iou.miou) << "\n";
    result.final_miou = ev.iou.miou;
    result.per_class_iou = ev.iou.per_class;
  };

  const int total = config.train.schedule.total_iters;
  if (total == 0 || state.iteration == total) run_eval(state.iteration);
  for (std::int64_t it = state.iteration; it < total; ++it) {
    const StepMetrics m = train_step(state, data, rcs, config.train);
    metrics_csv << m.iteration << "," << fmt_metric(m.l_ce_s) << "," << fmt_metric(m.l_ce_t) << ","
                << fmt_metric(m.l_cl_s) << "," << fmt_metric(m.l_cl_m) << ","
                << fmt_metric(m.l_fd) << "," << fmt_metric(m.total) << "," << fmt_metric(m.gamma)
                << "," << fmt_metric(m.conf_frac) << "," << fmt_metric(m.lr_enc) << ","
                << fmt_metric(m.lr_dec) << "\n";
    result.metrics.push_back(m);
    const bool last = it + 1 == total;
    if ((it + 1) % config.run.eval_interval == 0 || last) run_eval(m.iteration);
    if (config.run.checkpoint_interval > 0 && (it + 1) % config.run.checkpoint_interval == 0)
      save_checkpoint(
          (fs::path(config.run.out_dir) / ("checkpoint-" + std::to_string(m.iteration))).string(),
          state);
  }
  save_checkpoint((fs::path(config.run.out_dir) / "checkpoint-final").string(), state);

  std::ofstream report(fs::path(config.run.out_dir) / "report.txt");
  report << "final_miou " << fmt_metric(result.final_miou) << "\n";
  for (std::size_t c = 0; c < result.per_class_iou.size(); ++c)
    report << "iou " << manifest.taxonomy.names[c] << " " << fmt_metric(result.per_class_iou[c])
           << "\n";
  return result;
}

int worker_limit() {
  if (const char* env = std::getenv("CLUDA_THREADS")) {
    const int v = std::atoi(env);
    if (v > 0) return v;
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw > 0 ? static_cast<int>(hw) : 1;
}

namespace {

struct AblationVariant {
  std::string name;
  ExperimentConfig config;
};

std::vector<AblationVariant> preset_variants(const std::string& preset,
                                             const ExperimentConfig& base);

}  // namespace

std::vector<std::string> ablation_preset_configs(const std::string& preset) {
  std::vector<std::string> names;
  for (const AblationVariant& v : preset_variants(preset, ExperimentConfig{}))
    names.push_back(v.name);
  return names;
}

namespace {

std::vector<AblationVariant> preset_variants(const std::string& preset,
                                             const ExperimentConfig& base) {
  std::vector<AblationVariant> out;
  auto variant = [&](const std::string& name, auto&& mutate) {
    ExperimentConfig c = base;
    mutate(c);
    out.push_back({name, std::move(c)});
  };
  if (preset == "table4a") {
    variant("no_cl", [](ExperimentConfig& c) { c.train.cl_enabled = false; });
    variant("unweighted_cl", [](ExperimentConfig& c) {
      c.train.cl_enabled = true;
      c.train.cl_weighted = false;
    });
    variant("weighted_cl", [](ExperimentConfig& c) {
      c.train.cl_enabled = true;
      c.train.cl_weighted = true;
    });
  } else if (preset == "table4b") {
    variant("all_pairs", [](ExperimentConfig& c) {
      c.train.cl.stuff_thing_masking = false;
      c.train.cl.stuff_only = false;
    });
    variant("stuff_only", [](ExperimentConfig& c) {
      c.train.cl.stuff_thing_masking = true;
      c.train.cl.stuff_only = true;
    });
    variant("stuff_thing", [](ExperimentConfig& c) {
      c.train.cl.stuff_thing_masking = true;
      c.train.cl.stuff_only = false;
    });
  } else if (preset == "multires") {
    variant("baseline", [](ExperimentConfig& c) {
      c.train.cl_enabled = false;
      c.train.multires = MultiResMode::LrOnly;
    });
    variant("lr_only", [](ExperimentConfig& c) { c.train.multires = MultiResMode::LrOnly; });
    variant("lr_hr", [](ExperimentConfig& c) { c.train.multires = MultiResMode::LrHrSum; });
    variant("weighted_lr_hr",
            [](ExperimentConfig& c) { c.train.multires = MultiResMode::LrHrWeighted; });
  } else if (preset == "embed") {
    for (int dim : {256, 512, 768, 1024})
      variant("embed_" + std::to_string(dim),
              [dim](ExperimentConfig& c) { c.train.model.embed_dim = dim; });
  } else {
    fail(ErrorKind::InvalidArgument,
         "unknown ablation preset '" + preset + "' (table4a, table4b, multires, embed)");
  }
  return out;
}

}  // namespace

AblationSummary ablate(const std::string& preset, const ExperimentConfig& base,
                       const std::vector<std::uint64_t>& seeds) {
  if (seeds.empty()) fail(ErrorKind::InvalidArgument, "ablate needs at least one seed");
  const std::vector<AblationVariant> variants = preset_variants(preset, base);

  // The corpus is shared by every run; build it before going parallel.
  if (!fs::exists(fs::path(base.run.dataset_dir) / "manifest.txt"))
    generate_dataset(base.data, base.run.dataset_dir);

  struct Job {
    ExperimentConfig config;
    std::string name;
    std::uint64_t seed;
  };
  std::vector<Job> jobs;
  for (const AblationVariant& v : variants)
    for (std::uint64_t seed : seeds) {
      Job j{v.config, v.name, seed};
      j.config.run.seed = seed;
      j.config.train.seed = seed;
      j.config.run.out_dir = (fs::path(base.run.out_dir) / preset / v.name /
                              ("seed-" + std::to_string(seed)))
                                 .string();
      jobs.push_back(std::move(j));
    }

  std::vector<double> mious(jobs.size(), 0.0);
  const int workers = std::max(1, worker_limit());
  std::size_t next = 0;
  while (next < jobs.size()) {
    std::vector<std::pair<std::size_t, std::future<double>>> wave;
    for (int k = 0; k < workers && next < jobs.size(); ++k, ++next) {
      const std::size_t idx = next;
      wave.emplace_back(idx, std::async(std::launch::async, [&jobs, idx] {
                          return run_experiment(jobs[idx].config).final_miou;
                        }));
    }
    for (auto& [idx, fut] : wave) mious[idx] = fut.get();
  }

  AblationSummary summary;
  summary.preset = preset;
  for (std::size_t j = 0; j < jobs.size(); ++j)
    summary.runs.push_back({jobs[j].name, jobs[j].seed, mious[j]});

  auto stats_of = [&](const std::string& name) {
    double sum = 0.0, sum2 = 0.0;
    int n = 0;
    for (const AblationRun& r : summary.runs)
      if (r.config_name == name) {
        sum += r.miou;
        sum2 += r.miou * r.miou;
        ++n;
      }
    const double mean = sum / n;
    const double var = std::max(0.0, sum2 / n - mean * mean);
    return std::pair<double, double>(mean, std::sqrt(var));
  };
  for (const AblationVariant& v : variants) {
    summary.config_order.push_back(v.name);
    const auto [mean, sd] = stats_of(v.name);
    summary.mean_miou.push_back(mean);
    summary.std_miou.push_back(sd);
  }

  auto mean_of = [&](const std::string& name) {
    for (std::size_t i = 0; i < summary.config_order.size(); ++i)
      if (summary.config_order[i] == name) return summary.mean_miou[i];
    fail(ErrorKind::InvalidArgument, "missing ablation config " + name);
  };
  auto check = [&](const std::string& label, bool ok) {
    summary.ordering_checks.push_back(label + ": " + (ok ? "PASS" : "FAIL"));
    summary.all_orderings_hold = summary.all_orderings_hold && ok;
  };
  if (preset == "table4a") {
    check("weighted_cl > unweighted_cl", mean_of("weighted_cl") > mean_of("unweighted_cl"));
    check("weighted_cl > no_cl", mean_of("weighted_cl") > mean_of("no_cl"));
  } else if (preset == "table4b") {
    check("stuff_thing >= all_pairs", mean_of("stuff_thing") >= mean_of("all_pairs"));
  } else if (preset == "multires") {
    check("weighted_lr_hr >= lr_only", mean_of("weighted_lr_hr") >= mean_of("lr_only"));
  }

  // Summary artifact.
  std::error_code ec;
  fs::create_directories(fs::path(base.run.out_dir) / preset, ec);
  std::ofstream out(fs::path(base.run.out_dir) / preset / "summary.csv");
  out << "config,seed,miou\n";
  for (const AblationRun& r : summary.runs)
    out << r.config_name << "," << r.seed << "," << fmt_metric(r.miou) << "\n";
  out << "\nconfig,mean_miou,std_miou\n";
  for (std::size_t i = 0; i < summary.config_order.size(); ++i)
    out << summary.config_order[i] << "," << fmt_metric(summary.mean_miou[i]) << ","
        << fmt_metric(summary.std_miou[i]) << "\n";
  for (const std::string& line : summary.ordering_checks) out << line << "\n";
  return summary;
}

}  // namespace cluda
