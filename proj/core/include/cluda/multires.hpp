#pragma once

#include <cstdint>
#include <vector>

#include "cluda/data.hpp"
#include "cluda/pseudo.hpp"
#include "cluda/rng.hpp"
#include "cluda/tensor.hpp"

namespace cluda {

struct CropBox {
  int top = 0;
  int left = 0;
  int height = 0;
  int width = 0;
};

// Low-resolution full view plus a full-resolution crop of one image.
struct MultiResBundle {
  TensorF lr_image;
  TensorF hr_image;
  CropBox box;
};

// Plain (non-differentiable) half-pixel bilinear resize for images.
TensorF resize_image(const TensorF& image, int out_h, int out_w);

TensorF crop_image(const TensorF& image, const CropBox& box);
LabelMap crop_labels(const LabelMap& labels, const CropBox& box);

// LR = bilinear downscale of the whole image, HR = random crop at full
// resolution. Crop dims must be divisible by 16 (encoder constraint).
MultiResBundle make_crops(const TensorF& image, double lr_scale, int hr_h, int hr_w, Rng& rng);

// Same construction with a caller-chosen box (entropy cropping).
MultiResBundle crops_at(const TensorF& image, double lr_scale, const CropBox& box);

// Per-pixel prediction entropy, -sum_k p_k log p_k with 0 log 0 = 0.
template <typename T>
TensorD entropy_map(const TensorData<T>& probs);

// Sliding-window position with maximum mean entropy; windows step by the
// stride and always include the right/bottom-flush final positions. Ties go
// to the first window in row-major order.
CropBox entropy_crop(const TensorD& entropy, int crop_h, int crop_w, int stride_y, int stride_x);

// Teacher inference over overlapping windows: per-window logits accumulate
// on a full-image canvas with overlap counts, are averaged, then softmaxed.
TensorF sliding_probs(const ModelParams<float>& teacher, const TensorF& image, int window_h,
                      int window_w, int stride_y, int stride_x);

PseudoLabel sliding_pseudo_label(const ModelParams<float>& teacher, const TensorF& image,
                                 int window_h, int window_w, int stride_y, int stride_x);

// How Eq.-7 weights attach to anchors: LR cells inside the crop footprint use
// the learned delta, LR cells outside keep weight 1, and each HR cell maps to
// the LR cell its image location falls in.
struct DeltaAlignment {
  int lr_grid_h = 0, lr_grid_w = 0;
  int hr_grid_h = 0, hr_grid_w = 0;
  std::vector<std::uint8_t> lr_in_footprint;  // per LR cell
  std::vector<int> hr_to_lr_cell;             // per HR cell

  bool has_hr() const { return !hr_to_lr_cell.empty(); }
};

DeltaAlignment align_delta(int lr_grid_h, int lr_grid_w, int hr_grid_h, int hr_grid_w,
                           const CropBox& box, int image_h, int image_w);

// Degenerate alignment for runs with the HR stream disabled: every LR weight
// is 1.
DeltaAlignment align_delta_no_crop(int lr_grid_h, int lr_grid_w);

}  // namespace cluda
