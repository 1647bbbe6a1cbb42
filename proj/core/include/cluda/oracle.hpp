#pragma once

#include <cstdint>
#include <vector>

#include "cluda/data.hpp"
#include "cluda/multires.hpp"
#include "cluda/pairs.hpp"

namespace cluda::oracle {

// Straight-formula reference evaluations, written against plain numbers with
// none of the graph machinery. They exist to cross-check the differentiable
// implementations and are deliberately naive.

using FeatureRows = std::vector<std::vector<double>>;

// One anchor's contrastive term: (1/|P|) sum_p -log(e^{s_p/tau} /
// (e^{s_p/tau} + sum_n e^{s_n/tau})), cosine similarities by direct dot
// product of the given rows.
double nce_anchor(const std::vector<double>& anchor, const FeatureRows& pool,
                  const std::vector<int>& positives, const std::vector<int>& negatives,
                  double tau);

// Mean over anchors (the plain InfoNCE value over a pair set).
double info_nce(const PairSet& pairs, const FeatureRows& features, double tau);

// (1/A) sum over anchors.
double source_cl(const PairSet& pairs, const FeatureRows& features, double tau, int normalizer);

// (1/A) [ sum_source + gamma * sum_target ].
double mixed_cl(const PairSet& pairs, const FeatureRows& features, double tau, int normalizer,
                double gamma);

// Eq.-7 evaluation with explicit per-anchor weights from the alignment.
double multires_cl(const PairSet& lr_pairs, const PairSet& hr_pairs, const FeatureRows& lr_feats,
                   const FeatureRows& hr_feats, const std::vector<double>& delta,
                   const DeltaAlignment& align, double gamma, double tau, int normalizer,
                   bool learned_weights);

// Mean over non-ignore pixels of -log softmax(logits)[label].
double cross_entropy(const std::vector<double>& logits, int classes, const LabelMap& labels);

// Confident-pixel count by direct enumeration.
std::int64_t count_confident(const std::vector<double>& max_probs, double beta);

// Exhaustive window search (independent of the sliding implementation).
CropBox entropy_crop_exhaustive(const TensorD& entropy, int crop_h, int crop_w, int stride_y,
                                int stride_x);

// Per-class IoU by direct set intersection/union counting over label maps.
std::vector<double> iou_by_sets(const LabelMap& pred, const LabelMap& gt, int classes,
                                std::vector<bool>& valid_out);
double miou_by_sets(const LabelMap& pred, const LabelMap& gt, int classes);

// l2-normalized copies of arbitrary feature rows.
FeatureRows normalize_rows(const FeatureRows& rows);

}  // namespace cluda::oracle
