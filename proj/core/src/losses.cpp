#include "cluda/losses.hpp"

#include <algorithm>
#include <cmath>
#include <functional>

#include "cluda/error.hpp"

namespace cluda {

namespace {

template <typename T>
Ref<T> zero_scalar(Graph<T>& g) {
  return g.constant(TensorData<T>::scalar(T(0)));
}

// Canonical anchor evaluation order; makes the accumulated loss independent
// of the order anchors arrive in.
std::vector<std::size_t> sorted_anchor_order(const PairSet& pairs) {
  std::vector<std::size_t> order(pairs.anchors.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const PairAnchor& x = pairs.anchors[a];
    const PairAnchor& y = pairs.anchors[b];
    if (x.resolution != y.resolution) return x.resolution < y.resolution;
    if (x.origin != y.origin) return x.origin < y.origin;
    if (x.class_id != y.class_id) return x.class_id < y.class_id;
    return x.pixel < y.pixel;
  });
  return order;
}

template <typename T>
void check_store(Graph<T>& g, Ref<T> store) {
  const Shape& s = g.value(store).shape;
  if (s.size() != 2)
    fail(ErrorKind::ShapeMismatch, "feature store must be [pixels, embed], got " + shape_str(s));
}

template <typename T>
void check_normalized_rows(Graph<T>& g, Ref<T> store, const std::vector<std::uint8_t>& used) {
  const TensorData<T>& s = g.value(store);
  const int cols = s.shape[1];
  for (std::size_t r = 0; r < used.size(); ++r) {
    if (!used[r]) continue;
    double n2 = 0.0;
    for (int c = 0; c < cols; ++c) {
      const double v = s.data[r * static_cast<std::size_t>(cols) + c];
      n2 += v * v;
    }
    if (std::abs(std::sqrt(n2) - 1.0) > 1e-4)
      fail(ErrorKind::InvalidArgument,
           "contrastive features must be l2-normalized (row " + std::to_string(r) + " has norm " +
               std::to_string(std::sqrt(n2)) + ")");
  }
}

template <typename T>
using AnchorWeightFn = std::function<Ref<T>(const PairAnchor&)>;

template <typename T>
struct NceSums {
  Ref<T> source;  // invalid when no anchors of that origin exist
  Ref<T> target;
  int source_count = 0;
  int target_count = 0;

  int count() const { return source_count + target_count; }
};

template <typename T>
NceSums<T> nce_sums(Graph<T>& g, const PairSet& pairs, Ref<T> anchor_store, Ref<T> pool_store,
                    double tau, const AnchorWeightFn<T>* weight_fn) {
  check_store(g, anchor_store);
  check_store(g, pool_store);
  const int anchor_rows = g.value(anchor_store).shape[0];
  const int pool_rows = g.value(pool_store).shape[0];
  const int embed = g.value(pool_store).shape[1];
  std::vector<std::uint8_t> used_anchor(static_cast<std::size_t>(anchor_rows), 0);
  std::vector<std::uint8_t> used_pool(static_cast<std::size_t>(pool_rows), 0);
  for (const PairAnchor& a : pairs.anchors) {
    if (a.pixel < 0 || a.pixel >= anchor_rows)
      fail(ErrorKind::InvalidArgument, "anchor pixel index out of range");
    used_anchor[static_cast<std::size_t>(a.pixel)] = 1;
    if (a.positives.empty())
      fail(ErrorKind::InvalidArgument, "anchor retained without any positive");
    for (int p : a.positives) used_pool.at(static_cast<std::size_t>(p)) = 1;
    for (int n : a.negatives) used_pool.at(static_cast<std::size_t>(n)) = 1;
  }
  check_normalized_rows(g, anchor_store, used_anchor);
  check_normalized_rows(g, pool_store, used_pool);

  NceSums<T> sums;
  for (std::size_t idx : sorted_anchor_order(pairs)) {
    const PairAnchor& a = pairs.anchors[idx];
    Ref<T> anchor_col = g.reshape(g.gather_rows(anchor_store, {a.pixel}), {embed, 1});
    Ref<T> pos_sims = g.matmul(g.gather_rows(pool_store, a.positives), anchor_col);
    Ref<T> neg_sims = g.matmul(g.gather_rows(pool_store, a.negatives), anchor_col);
    Ref<T> term = g.nce_from_sims(g.reshape(pos_sims, {static_cast<int>(a.positives.size())}),
                                  g.reshape(neg_sims, {static_cast<int>(a.negatives.size())}), tau);
    if (weight_fn) {
      Ref<T> w = (*weight_fn)(a);
      if (w.valid()) term = g.mul(term, w);
    }
    if (a.origin == Origin::Source) {
      sums.source = sums.source.valid() ? g.add(sums.source, term) : term;
      ++sums.source_count;
    } else {
      sums.target = sums.target.valid() ? g.add(sums.target, term) : term;
      ++sums.target_count;
    }
  }
  return sums;
}

}  // namespace

template <typename T>
Ref<T> cross_entropy(Graph<T>& g, Ref<T> logits, const LabelMap& labels) {
  const Shape& s = g.value(logits).shape;
  if (s.size() != 3 || s[0] != labels.h || s[1] != labels.w)
    fail(ErrorKind::ShapeMismatch,
         "cross_entropy logits " + shape_str(s) + " do not match label map " +
             std::to_string(labels.h) + "x" + std::to_string(labels.w));
  const int classes = s[2];
  std::int64_t valid = 0;
  TensorData<T> onehot = TensorData<T>::zeros(s);
  for (std::int64_t i = 0; i < labels.size(); ++i) {
    const std::uint8_t y = labels.v[static_cast<std::size_t>(i)];
    if (y == kIgnoreLabel) continue;
    if (y >= classes)
      fail(ErrorKind::InvalidArgument, "label value " + std::to_string(y) + " out of range");
    onehot.data[static_cast<std::size_t>(i) * classes + y] = T(1);
    ++valid;
  }
  if (valid == 0) fail(ErrorKind::EmptyInput, "cross_entropy: every pixel is ignored");
  Ref<T> log_probs = g.log(g.clamp_probs(g.softmax_last(logits)));
  Ref<T> picked = g.mul(log_probs, g.constant(std::move(onehot)));
  return g.scale(g.sum_all(picked), -1.0 / static_cast<double>(valid));
}

template <typename T>
Ref<T> feature_store(Graph<T>& g, const FusedMap<T>& fused_cl) {
  const Shape& s = g.value(fused_cl.features).shape;
  if (s.size() != 3) fail(ErrorKind::ShapeMismatch, "fused map must be HxWxE");
  return g.l2_normalize_last(g.reshape(fused_cl.features, {s[0] * s[1], s[2]}));
}

template <typename T>
Ref<T> info_nce(Graph<T>& g, const PairSet& pairs, Ref<T> store, double tau) {
  if (pairs.empty()) return zero_scalar(g);
  NceSums<T> sums = nce_sums<T>(g, pairs, store, store, tau, nullptr);
  Ref<T> total = sums.source.valid()
                     ? (sums.target.valid() ? g.add(sums.source, sums.target) : sums.source)
                     : sums.target;
  return g.scale(total, 1.0 / static_cast<double>(sums.count()));
}

template <typename T>
Ref<T> source_cl(Graph<T>& g, const PairSet& pairs, Ref<T> store, double tau, int normalizer) {
  if (normalizer < 1) fail(ErrorKind::InvalidArgument, "normalizer A must be positive");
  if (pairs.empty()) return zero_scalar(g);
  for (const PairAnchor& a : pairs.anchors)
    if (a.origin != Origin::Source)
      fail(ErrorKind::InvalidArgument, "source_cl received a target-origin anchor");
  NceSums<T> sums = nce_sums<T>(g, pairs, store, store, tau, nullptr);
  return g.scale(sums.source, 1.0 / static_cast<double>(normalizer));
}

template <typename T>
ConfidenceWeight confidence_weight(const TensorData<T>& probs, double beta) {
  if (probs.shape.empty() || probs.size() == 0)
    fail(ErrorKind::EmptyInput, "confidence_weight needs a non-empty probability map");
  if (beta <= 0.0 || beta >= 1.0) fail(ErrorKind::InvalidArgument, "beta must lie in (0,1)");
  const int classes = probs.shape.back();
  const std::int64_t rows = probs.size() / classes;
  ConfidenceWeight out;
  out.total = rows;
  for (std::int64_t r = 0; r < rows; ++r) {
    T best = probs.data[static_cast<std::size_t>(r) * classes];
    for (int c = 1; c < classes; ++c)
      best = std::max(best, probs.data[static_cast<std::size_t>(r) * classes + c]);
    if (static_cast<double>(best) > beta) ++out.confident;
  }
  out.gamma = static_cast<double>(out.confident) / static_cast<double>(out.total);
  return out;
}

template <typename T>
Ref<T> mixed_cl(Graph<T>& g, const PairSet& pairs, Ref<T> store, double tau, int normalizer,
                double gamma) {
  if (normalizer < 1) fail(ErrorKind::InvalidArgument, "normalizer A must be positive");
  if (pairs.empty()) return zero_scalar(g);
  NceSums<T> sums = nce_sums<T>(g, pairs, store, store, tau, nullptr);
  Ref<T> total;
  if (sums.source.valid()) total = sums.source;
  if (sums.target.valid()) {
    Ref<T> weighted = g.scale(sums.target, gamma);
    total = total.valid() ? g.add(total, weighted) : weighted;
  }
  return g.scale(total, 1.0 / static_cast<double>(normalizer));
}

template <typename T>
Ref<T> feature_distance(Graph<T>& g, Ref<T> student_features, Ref<T> reference_features,
                        std::vector<std::uint8_t> source_mask) {
  return g.masked_feature_distance(student_features, reference_features, std::move(source_mask));
}

template <typename T>
Ref<T> total_loss(Graph<T>& g, Ref<T> ce_s, Ref<T> ce_t, Ref<T> cl_s, Ref<T> cl_m, Ref<T> fd,
                  double lambda) {
  Ref<T> ce = g.add(ce_s, ce_t);
  Ref<T> cl = g.add(cl_s, cl_m);
  return g.add(g.add(ce, cl), g.scale(fd, lambda));
}

template <typename T>
Ref<T> multires_cl(Graph<T>& g, const PairSet& lr_pairs, const PairSet& hr_pairs, Ref<T> lr_store,
                   Ref<T> hr_store, Ref<T> delta_map, const DeltaAlignment& align, double gamma,
                   double tau, int normalizer, bool learned_weights) {
  if (normalizer < 1) fail(ErrorKind::InvalidArgument, "normalizer A must be positive");
  const std::int64_t lr_cells = static_cast<std::int64_t>(align.lr_in_footprint.size());
  if (!lr_pairs.empty() &&
      static_cast<std::int64_t>(lr_pairs.grid_h) * lr_pairs.grid_w != lr_cells)
    fail(ErrorKind::ShapeMismatch, "LR pair grid does not match the delta alignment");
  if (!hr_pairs.empty() && static_cast<std::size_t>(hr_pairs.grid_h) * hr_pairs.grid_w !=
                               align.hr_to_lr_cell.size())
    fail(ErrorKind::ShapeMismatch, "HR pair grid does not match the delta alignment");

  Ref<T> delta_flat;
  Ref<T> one;
  if (learned_weights) {
    const TensorData<T>& d = g.value(delta_map);
    if (d.size() != lr_cells)
      fail(ErrorKind::ShapeMismatch, "delta map does not cover the LR grid");
    for (T v : d.data)
      if (v < T(0) || v > T(1))
        fail(ErrorKind::InvalidArgument, "delta weights must lie in [0,1]");
    delta_flat = g.reshape(delta_map, {static_cast<int>(lr_cells), 1});
    one = g.constant(TensorData<T>::scalar(T(1)));
  }

  auto delta_at = [&](int cell) {
    return g.reshape(g.gather_rows(delta_flat, {cell}), Shape{});
  };
  AnchorWeightFn<T> lr_weight = [&](const PairAnchor& a) -> Ref<T> {
    if (!learned_weights || !align.lr_in_footprint[static_cast<std::size_t>(a.pixel)])
      return Ref<T>{};  // weight 1 outside the crop footprint
    return delta_at(a.pixel);
  };
  AnchorWeightFn<T> hr_weight = [&](const PairAnchor& a) -> Ref<T> {
    if (!learned_weights) return Ref<T>{};
    const int cell = align.hr_to_lr_cell[static_cast<std::size_t>(a.pixel)];
    return g.add(one, g.scale(delta_at(cell), -1.0));
  };

  Ref<T> src_total, tgt_total;
  auto fold = [&](const NceSums<T>& sums) {
    if (sums.source.valid())
      src_total = src_total.valid() ? g.add(src_total, sums.source) : sums.source;
    if (sums.target.valid())
      tgt_total = tgt_total.valid() ? g.add(tgt_total, sums.target) : sums.target;
  };
  if (!lr_pairs.empty()) fold(nce_sums<T>(g, lr_pairs, lr_store, lr_store, tau, &lr_weight));
  if (!hr_pairs.empty()) {
    if (!align.has_hr()) fail(ErrorKind::ShapeMismatch, "HR anchors need an HR crop alignment");
    fold(nce_sums<T>(g, hr_pairs, hr_store, lr_store, tau, &hr_weight));
  }

  Ref<T> total;
  if (src_total.valid()) total = src_total;
  if (tgt_total.valid()) {
    Ref<T> weighted = g.scale(tgt_total, gamma);
    total = total.valid() ? g.add(total, weighted) : weighted;
  }
  if (!total.valid()) return zero_scalar(g);
  return g.scale(total, 1.0 / static_cast<double>(normalizer));
}

#define CLUDA_INSTANTIATE_LOSSES(T)                                                            \
  template Ref<T> cross_entropy(Graph<T>&, Ref<T>, const LabelMap&);                           \
  template Ref<T> feature_store(Graph<T>&, const FusedMap<T>&);                                \
  template Ref<T> info_nce(Graph<T>&, const PairSet&, Ref<T>, double);                         \
  template Ref<T> source_cl(Graph<T>&, const PairSet&, Ref<T>, double, int);                   \
  template ConfidenceWeight confidence_weight(const TensorData<T>&, double);                   \
  template Ref<T> mixed_cl(Graph<T>&, const PairSet&, Ref<T>, double, int, double);            \
  template Ref<T> feature_distance(Graph<T>&, Ref<T>, Ref<T>, std::vector<std::uint8_t>);      \
  template Ref<T> total_loss(Graph<T>&, Ref<T>, Ref<T>, Ref<T>, Ref<T>, Ref<T>, double);       \
  template Ref<T> multires_cl(Graph<T>&, const PairSet&, const PairSet&, Ref<T>, Ref<T>,       \
                              Ref<T>, const DeltaAlignment&, double, double, int, bool)

CLUDA_INSTANTIATE_LOSSES(float);
CLUDA_INSTANTIATE_LOSSES(double);

}  // namespace cluda
