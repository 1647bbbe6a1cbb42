#include <benchmark/benchmark.h>

#include "cluda/engine.hpp"
#include "cluda/experiment.hpp"

namespace {

struct PipelineFixture {
  cluda::TrainingData data;
  cluda::TrainConfig cfg;
  std::vector<const cluda::LabelMap*> labels;

  PipelineFixture() {
    cluda::ExperimentConfig e = cluda::desk_default_experiment();
    e.data.source_count = 12;
    e.data.target_count = 12;
    cluda::DomainSpec spec = e.data.spec;
    std::vector<double> freq(static_cast<std::size_t>(spec.taxonomy.num_classes()), 0.0);
    for (int i = 0; i < e.data.source_count; ++i) {
      data.source.push_back(cluda::generate_scene(spec, static_cast<std::uint64_t>(i)));
      for (std::uint8_t v : data.source.back().label.v)
        if (v != cluda::kIgnoreLabel) freq[v] += 1.0;
    }
    double total = 0.0;
    for (double f : freq) total += f;
    for (double& f : freq) f /= total;
    for (int i = 0; i < e.data.target_count; ++i)
      data.target_images.push_back(
          cluda::apply_domain_shift(cluda::generate_scene(spec, 100 + i), spec, 100 + i).image);
    data.taxonomy = spec.taxonomy;
    data.source_freq = freq;
    for (const auto& s : data.source) labels.push_back(&s.label);
    cfg = e.train;
  }
};

void BM_TrainStepSingleRes(benchmark::State& state) {
  PipelineFixture fx;
  cluda::TrainerState trainer = cluda::TrainerState::init(fx.cfg.model, 1);
  const cluda::RcsSampler rcs(fx.data.source_freq, fx.cfg.rcs_temperature, fx.labels);
  for (auto _ : state) {
    if (trainer.iteration >= fx.cfg.schedule.total_iters)
      trainer = cluda::TrainerState::init(fx.cfg.model, 1);
    benchmark::DoNotOptimize(cluda::train_step(trainer, fx.data, rcs, fx.cfg).total);
  }
}
BENCHMARK(BM_TrainStepSingleRes)->Unit(benchmark::kMillisecond);

void BM_TrainStepMultiRes(benchmark::State& state) {
  PipelineFixture fx;
  fx.cfg.multires = cluda::MultiResMode::LrHrWeighted;
  fx.cfg.entropy_cropping = true;
  cluda::TrainerState trainer = cluda::TrainerState::init(fx.cfg.model, 1);
  const cluda::RcsSampler rcs(fx.data.source_freq, fx.cfg.rcs_temperature, fx.labels);
  for (auto _ : state) {
    if (trainer.iteration >= fx.cfg.schedule.total_iters)
      trainer = cluda::TrainerState::init(fx.cfg.model, 1);
    benchmark::DoNotOptimize(cluda::train_step(trainer, fx.data, rcs, fx.cfg).total);
  }
}
BENCHMARK(BM_TrainStepMultiRes)->Unit(benchmark::kMillisecond);

void BM_SceneGeneration(benchmark::State& state) {
  const cluda::DomainSpec spec = cluda::DomainSpec::desk_default();
  std::uint64_t seed = 0;
  for (auto _ : state)
    benchmark::DoNotOptimize(cluda::generate_scene(spec, seed++).image.data.data());
}
BENCHMARK(BM_SceneGeneration);

}  // namespace
