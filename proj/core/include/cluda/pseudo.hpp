#pragma once

#include "cluda/data.hpp"
#include "cluda/network.hpp"
#include "cluda/tensor.hpp"

namespace cluda {

// Teacher argmax labels with per-pixel max-softmax confidence.
struct PseudoLabel {
  LabelMap labels;
  TensorF confidence;  // HxW
};

// Argmax/max over the class axis; ties break toward the lowest class id.
PseudoLabel pseudo_label_from_probs(const TensorF& probs);

// Full-resolution softmax probabilities from a gradient-free forward pass.
TensorF model_probs(const ModelParams<float>& params, const TensorF& image);

// Raw (pre-softmax) logits from a gradient-free forward pass.
TensorF model_logits(const ModelParams<float>& params, const TensorF& image);

// Fused feature map (stride-4 grid) from a gradient-free forward pass; the
// reference-feature source for the feature-distance regularizer.
TensorF model_fused(const ModelParams<float>& params, const TensorF& image);

PseudoLabel pseudo_label(const ModelParams<float>& teacher, const TensorF& image);

}  // namespace cluda
