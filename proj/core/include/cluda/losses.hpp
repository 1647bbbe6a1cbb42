#pragma once

#include <cstdint>
#include <vector>

#include "cluda/graph.hpp"
#include "cluda/multires.hpp"
#include "cluda/network.hpp"
#include "cluda/pairs.hpp"

namespace cluda {

// Mean over non-ignore pixels of -log softmax(logits)[label]. Probabilities
// are clamped before the log. Errors when every pixel is ignored.
template <typename T>
Ref<T> cross_entropy(Graph<T>& g, Ref<T> logits, const LabelMap& labels);

// Flattened, l2-normalized [A, embed_dim] pixel-feature matrix of a CL-grid
// fused map; the store every pair index refers to.
template <typename T>
Ref<T> feature_store(Graph<T>& g, const FusedMap<T>& fused_cl);

// Mean over anchors of the per-anchor InfoNCE term. Anchors accumulate in a
// canonical sorted order, so the value is independent of anchor permutation.
// An empty pair set contributes exactly 0. Rejects unnormalized features.
template <typename T>
Ref<T> info_nce(Graph<T>& g, const PairSet& pairs, Ref<T> store, double tau);

// (1/A) * sum over source anchors of InfoNCE.
template <typename T>
Ref<T> source_cl(Graph<T>& g, const PairSet& pairs, Ref<T> store, double tau, int normalizer);

struct ConfidenceWeight {
  double gamma = 0.0;
  std::int64_t confident = 0;
  std::int64_t total = 0;
};

// Fraction of pixels whose max softmax probability strictly exceeds beta.
template <typename T>
ConfidenceWeight confidence_weight(const TensorData<T>& probs, double beta);

// (1/A) * [ sum_{source anchors} NCE + gamma * sum_{target anchors} NCE ].
template <typename T>
Ref<T> mixed_cl(Graph<T>& g, const PairSet& pairs, Ref<T> store, double tau, int normalizer,
                double gamma);

// Mean Euclidean distance between student and reference pixel features over
// the masked (source) pixels; empty mask selects every pixel.
template <typename T>
Ref<T> feature_distance(Graph<T>& g, Ref<T> student_features, Ref<T> reference_features,
                        std::vector<std::uint8_t> source_mask);

// l_ce_s + l_ce_t + l_cl_s + l_cl_m + lambda * l_fd.
template <typename T>
Ref<T> total_loss(Graph<T>& g, Ref<T> ce_s, Ref<T> ce_t, Ref<T> cl_s, Ref<T> cl_m, Ref<T> fd,
                  double lambda);

// Multi-resolution contrastive loss. LR anchors inside the crop footprint
// weigh by delta, outside by 1; HR anchors weigh by (1 - delta) of the LR
// cell they map to; target anchors additionally scale by gamma. With
// learned_weights = false both streams get weight 1 (the plain LR+HR sum).
// delta_map must lie in [0,1].
template <typename T>
Ref<T> multires_cl(Graph<T>& g, const PairSet& lr_pairs, const PairSet& hr_pairs, Ref<T> lr_store,
                   Ref<T> hr_store, Ref<T> delta_map, const DeltaAlignment& align, double gamma,
                   double tau, int normalizer, bool learned_weights = true);

}  // namespace cluda
