#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "cluda/data.hpp"
#include "cluda/losses.hpp"
#include "cluda/multires.hpp"
#include "cluda/network.hpp"
#include "cluda/pairs.hpp"
#include "cluda/pseudo.hpp"

namespace cluda {

// ---------------------------------------------------------------------------
// ClassMix and pixel augmentation
// ---------------------------------------------------------------------------

struct MixResult {
  TensorF image;
  LabelMap label;
  std::vector<std::uint8_t> origin;  // 1 = source pixel
  std::vector<int> selected_classes;
};

// Overlays source pixels of the selected classes onto the target image;
// labels compose from source ground truth and target pseudo-labels.
MixResult classmix_with_classes(const SegSample& source, const TensorF& target_image,
                                const PseudoLabel& pseudo, std::vector<int> selected);

// Selects ceil(n/2) of the classes present in the source labels uniformly
// without replacement.
MixResult classmix(const SegSample& source, const TensorF& target_image,
                   const PseudoLabel& pseudo, Rng& rng);

struct AugmentParams {
  double jitter_strength = 0.2;
  double jitter_prob = 0.8;
  double blur_sigma_min = 0.1;
  double blur_sigma_max = 1.0;
  double blur_prob = 0.5;

  static AugmentParams none() { return {0.0, 0.0, 0.0, 0.0, 0.0}; }
};

// Brightness/contrast/saturation jitter plus optional Gaussian blur, output
// clamped to [0,1]. Zero-strength parameters are a bitwise identity.
TensorF augment(const TensorF& image, const AugmentParams& params, Rng& rng);

// ---------------------------------------------------------------------------
// Teacher update, schedule, optimizer
// ---------------------------------------------------------------------------

// theta_T <- alpha * theta_T + (1 - alpha) * theta_S, elementwise.
template <typename T>
void ema_update(ModelParams<T>& teacher, const ModelParams<T>& student, double alpha);

struct ScheduleConfig {
  double lr_encoder = 6e-5;
  double lr_decoder = 6e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 0.01;
  int batch_size = 2;
  double ema_alpha = 0.999;
  int warmup_iters = 1500;
  double warmup_floor = 1e-6;  // lr scale at iteration 0
  double poly_power = 1.0;
  int total_iters = 2000;

  void validate() const;
};

// Linear warmup from warmup_floor * base to base, then polynomial decay to 0
// at total_iters. Returns (encoder lr, decoder lr).
std::pair<double, double> lr_at(std::int64_t iteration, const ScheduleConfig& schedule);

struct AdamState {
  std::map<std::string, TensorF> m;
  std::map<std::string, TensorF> v;
  std::int64_t step = 0;
};

// Decoupled-weight-decay adaptive-moment update with bias correction and
// epsilon 1e-8. Parameters without a gradient entry update as zero-gradient.
void adamw_step(ModelParams<float>& params, const std::map<std::string, TensorF>& grads,
                AdamState& state, const std::function<double(const std::string&)>& lr_of,
                double beta1, double beta2, double weight_decay);

// ---------------------------------------------------------------------------
// The training loop
// ---------------------------------------------------------------------------

enum class MultiResMode { Off, LrOnly, LrHrSum, LrHrWeighted };

struct TrainConfig {
  ModelConfig model;
  CLConfig cl;
  ScheduleConfig schedule;
  AugmentParams augment;
  bool cl_enabled = true;
  bool cl_weighted = true;  // gamma-weighting of target-anchor terms
  MultiResMode multires = MultiResMode::Off;
  bool entropy_cropping = false;
  double lr_scale = 0.5;  // LR stream downscale in multi-resolution mode
  int hr_crop = 32;       // HR crop side, also the sliding-inference window
  double rcs_temperature = 0.01;
  std::uint64_t seed = 1;

  void validate(int image_h, int image_w) const;
};

struct TrainerState {
  ModelParams<float> student;
  ModelParams<float> teacher;
  ModelParams<float> reference;  // frozen feature-distance target
  AdamState opt;
  std::int64_t iteration = 0;
  std::uint64_t run_seed = 1;

  // Reference features per source image; the reference is frozen, so these
  // are pure derived state (never checkpointed).
  std::map<std::uint64_t, TensorF> reference_cache;

  // Student, teacher and reference all start from the same seeded init.
  static TrainerState init(const ModelConfig& config, std::uint64_t seed);
};

// In-memory training split. Target labels are intentionally absent: the
// training path has no access to them.
struct TrainingData {
  std::vector<SegSample> source;      // with labels
  std::vector<TensorF> target_images;
  ClassTaxonomy taxonomy;
  std::vector<double> source_freq;
};

// Loads every source sample (with labels) and all target images except the
// trailing eval_holdout ones, which are reserved for evaluation.
TrainingData load_training_data(const std::string& directory, const DatasetManifest& manifest,
                                int eval_holdout);

struct StepMetrics {
  std::int64_t iteration = 0;
  double l_ce_s = 0, l_ce_t = 0, l_cl_s = 0, l_cl_m = 0, l_fd = 0, total = 0;
  double gamma = 0, conf_frac = 0;
  double lr_enc = 0, lr_dec = 0;
};

StepMetrics train_step(TrainerState& state, const TrainingData& data, const RcsSampler& rcs,
                       const TrainConfig& cfg);

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

void save_checkpoint(const std::string& directory, const TrainerState& state);
TrainerState load_checkpoint(const std::string& directory);

// Loads and validates against an expected configuration; mismatching shapes
// or missing tensors raise CheckpointMismatch.
TrainerState load_checkpoint(const std::string& directory, const ModelConfig& expected);

}  // namespace cluda
