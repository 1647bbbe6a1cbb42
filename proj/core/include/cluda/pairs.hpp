#pragma once

#include <cstdint>
#include <vector>

#include "cluda/data.hpp"
#include "cluda/rng.hpp"

namespace cluda {

enum class Origin : std::uint8_t { Source = 0, Target = 1 };
enum class Resolution : std::uint8_t { LR = 0, HR = 1 };

// One anchor pixel with its class-consistent positive pool and
// class-disjoint negative pool. Positive/negative indices always refer to
// the LR feature store: high-resolution anchors compare against
// low-resolution pools only, so no pair joins two HR vectors.
struct PairAnchor {
  int pixel = 0;  // flat cell index in the anchor's own grid
  std::uint8_t class_id = 0;
  Origin origin = Origin::Source;
  Resolution resolution = Resolution::LR;
  std::vector<int> positives;
  std::vector<int> negatives;
};

struct PairSet {
  std::vector<PairAnchor> anchors;
  int grid_h = 0;  // dims of the grid the anchors live on
  int grid_w = 0;

  bool empty() const { return anchors.empty(); }
};

// Pair-sampling and loss hyperparameters (Eq. 2/4/6 knobs).
struct CLConfig {
  double tau = 0.1;
  int max_anchors_per_class = 32;
  int max_positives = 16;
  int max_negatives = 64;
  bool stuff_thing_masking = true;
  // Restrict anchors and pools to stuff classes (the S-S ablation arm).
  bool stuff_only = false;
  // Alternative reading of the mixed loss where source anchors also draw
  // pairs from target-origin pixels; off follows the equation's subscripts.
  bool mixed_prose_pools = false;
  double beta = 0.968;
  double lambda_fd = 0.005;

  void validate() const;
};

// Per-class anchor subsampling with capped positive/negative pools over one
// CL grid. origins may be empty, meaning every cell is source-origin.
// An image with fewer than two usable classes yields an empty PairSet.
PairSet sample_pairs(const LabelMap& grid_labels, const std::vector<Origin>& origins,
                     const ClassTaxonomy& taxonomy, const CLConfig& cfg, Rng& rng,
                     Resolution resolution = Resolution::LR);

// Nearest-cell label downsampling onto the CL grid.
LabelMap downsample_labels(const LabelMap& labels, int grid_h, int grid_w);

// Nearest-cell origin downsampling (true = source pixel).
std::vector<Origin> downsample_origins(const std::vector<std::uint8_t>& origin_mask, int h, int w,
                                       int grid_h, int grid_w);

}  // namespace cluda
