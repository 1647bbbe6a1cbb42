#include "cluda/oracle.hpp"

#include <cmath>

#include "cluda/error.hpp"

namespace cluda::oracle {

namespace {

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double anchor_sum(const PairSet& pairs, const FeatureRows& anchor_feats,
                  const FeatureRows& pool_feats, double tau, Origin origin,
                  const std::vector<double>* weights) {
  double total = 0.0;
  for (std::size_t i = 0; i < pairs.anchors.size(); ++i) {
    const PairAnchor& a = pairs.anchors[i];
    if (a.origin != origin) continue;
    double term = nce_anchor(anchor_feats[static_cast<std::size_t>(a.pixel)], pool_feats,
                             a.positives, a.negatives, tau);
    if (weights) term *= (*weights)[i];
    total += term;
  }
  return total;
}

}  // namespace

double nce_anchor(const std::vector<double>& anchor, const FeatureRows& pool,
                  const std::vector<int>& positives, const std::vector<int>& negatives,
                  double tau) {
  if (positives.empty()) fail(ErrorKind::EmptyInput, "oracle anchor without positives");
  double neg_sum = 0.0;
  for (int n : negatives)
    neg_sum += std::exp(dot(anchor, pool[static_cast<std::size_t>(n)]) / tau);
  double loss = 0.0;
  for (int p : positives) {
    const double e = std::exp(dot(anchor, pool[static_cast<std::size_t>(p)]) / tau);
    loss += -std::log(e / (e + neg_sum));
  }
  return loss / static_cast<double>(positives.size());
}

double info_nce(const PairSet& pairs, const FeatureRows& features, double tau) {
  if (pairs.empty()) return 0.0;
  double total = 0.0;
  for (const PairAnchor& a : pairs.anchors)
    total += nce_anchor(features[static_cast<std::size_t>(a.pixel)], features, a.positives,
                        a.negatives, tau);
  return total / static_cast<double>(pairs.anchors.size());
}

double source_cl(const PairSet& pairs, const FeatureRows& features, double tau, int normalizer) {
  if (pairs.empty()) return 0.0;
  return anchor_sum(pairs, features, features, tau, Origin::Source, nullptr) / normalizer;
}

double mixed_cl(const PairSet& pairs, const FeatureRows& features, double tau, int normalizer,
                double gamma) {
  if (pairs.empty()) return 0.0;
  const double src = anchor_sum(pairs, features, features, tau, Origin::Source, nullptr);
  const double tgt = anchor_sum(pairs, features, features, tau, Origin::Target, nullptr);
  return (src + gamma * tgt) / normalizer;
}

double multires_cl(const PairSet& lr_pairs, const PairSet& hr_pairs, const FeatureRows& lr_feats,
                   const FeatureRows& hr_feats, const std::vector<double>& delta,
                   const DeltaAlignment& align, double gamma, double tau, int normalizer,
                   bool learned_weights) {
  std::vector<double> lr_w(lr_pairs.anchors.size(), 1.0);
  for (std::size_t i = 0; i < lr_pairs.anchors.size(); ++i) {
    const int cell = lr_pairs.anchors[i].pixel;
    if (learned_weights && align.lr_in_footprint[static_cast<std::size_t>(cell)])
      lr_w[i] = delta[static_cast<std::size_t>(cell)];
  }
  std::vector<double> hr_w(hr_pairs.anchors.size(), 1.0);
  for (std::size_t i = 0; i < hr_pairs.anchors.size(); ++i) {
    if (!learned_weights) continue;
    const int cell = align.hr_to_lr_cell[static_cast<std::size_t>(hr_pairs.anchors[i].pixel)];
    hr_w[i] = 1.0 - delta[static_cast<std::size_t>(cell)];
  }
  double src = anchor_sum(lr_pairs, lr_feats, lr_feats, tau, Origin::Source, &lr_w) +
               anchor_sum(hr_pairs, hr_feats, lr_feats, tau, Origin::Source, &hr_w);
  double tgt = anchor_sum(lr_pairs, lr_feats, lr_feats, tau, Origin::Target, &lr_w) +
               anchor_sum(hr_pairs, hr_feats, lr_feats, tau, Origin::Target, &hr_w);
  return (src + gamma * tgt) / normalizer;
}

double cross_entropy(const std::vector<double>& logits, int classes, const LabelMap& labels) {
  const std::int64_t pixels = labels.size();
  double total = 0.0;
  std::int64_t valid = 0;
  for (std::int64_t i = 0; i < pixels; ++i) {
    const std::uint8_t y = labels.v[static_cast<std::size_t>(i)];
    if (y == kIgnoreLabel) continue;
    const double* row = logits.data() + static_cast<std::size_t>(i) * classes;
    double mx = row[0];
    for (int c = 1; c < classes; ++c) mx = std::max(mx, row[c]);
    double z = 0.0;
    for (int c = 0; c < classes; ++c) z += std::exp(row[c] - mx);
    total += -(row[y] - mx - std::log(z));
    ++valid;
  }
  if (valid == 0) fail(ErrorKind::EmptyInput, "oracle cross entropy with no valid pixels");
  return total / static_cast<double>(valid);
}

std::int64_t count_confident(const std::vector<double>& max_probs, double beta) {
  std::int64_t n = 0;
  for (double p : max_probs)
    if (p > beta) ++n;
  return n;
}

CropBox entropy_crop_exhaustive(const TensorD& entropy, int crop_h, int crop_w, int stride_y,
                                int stride_x) {
  const int h = entropy.shape[0], w = entropy.shape[1];
  auto positions = [](int full, int window, int stride) {
    std::vector<int> out;
    for (int s = 0; s + window <= full; s += stride) out.push_back(s);
    if (out.empty() || out.back() != full - window) out.push_back(full - window);
    return out;
  };
  CropBox best{0, 0, crop_h, crop_w};
  double best_mean = -1.0;
  for (int ty : positions(h, crop_h, stride_y))
    for (int tx : positions(w, crop_w, stride_x)) {
      double acc = 0.0;
      for (int y = ty; y < ty + crop_h; ++y)
        for (int x = tx; x < tx + crop_w; ++x)
          acc += entropy.data[static_cast<std::size_t>(y) * w + x];
      const double mean = acc / (static_cast<double>(crop_h) * crop_w);
      if (mean > best_mean) {
        best_mean = mean;
        best.top = ty;
        best.left = tx;
      }
    }
  return best;
}

std::vector<double> iou_by_sets(const LabelMap& pred, const LabelMap& gt, int classes,
                                std::vector<bool>& valid_out) {
  std::vector<double> iou(static_cast<std::size_t>(classes), 0.0);
  valid_out.assign(static_cast<std::size_t>(classes), false);
  for (int c = 0; c < classes; ++c) {
    std::int64_t inter = 0, uni = 0;
    for (std::int64_t i = 0; i < gt.size(); ++i) {
      if (gt.v[static_cast<std::size_t>(i)] == kIgnoreLabel) continue;
      const bool in_pred = pred.v[static_cast<std::size_t>(i)] == c;
      const bool in_gt = gt.v[static_cast<std::size_t>(i)] == c;
      if (in_pred && in_gt) ++inter;
      if (in_pred || in_gt) ++uni;
    }
    if (uni > 0) {
      iou[static_cast<std::size_t>(c)] = static_cast<double>(inter) / static_cast<double>(uni);
      valid_out[static_cast<std::size_t>(c)] = true;
    }
  }
  return iou;
}

double miou_by_sets(const LabelMap& pred, const LabelMap& gt, int classes) {
  std::vector<bool> valid;
  const std::vector<double> iou = iou_by_sets(pred, gt, classes, valid);
  double sum = 0.0;
  int n = 0;
  for (int c = 0; c < classes; ++c)
    if (valid[static_cast<std::size_t>(c)]) {
      sum += iou[static_cast<std::size_t>(c)];
      ++n;
    }
  if (n == 0) fail(ErrorKind::EmptyInput, "oracle miou with no populated class");
  return sum / n;
}

FeatureRows normalize_rows(const FeatureRows& rows) {
  FeatureRows out = rows;
  for (auto& r : out) {
    double n2 = 0.0;
    for (double v : r) n2 += v * v;
    const double inv = 1.0 / std::sqrt(n2 + 1e-30);
    for (double& v : r) v *= inv;
  }
  return out;
}

}  // namespace cluda::oracle
