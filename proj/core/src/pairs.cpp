#include "cluda/pairs.hpp"

#include <algorithm>

#include "cluda/error.hpp"

namespace cluda {

void CLConfig::validate() const {
  if (tau <= 0.0) fail(ErrorKind::InvalidArgument, "cl temperature must be positive");
  if (beta <= 0.0 || beta >= 1.0) fail(ErrorKind::InvalidArgument, "beta must lie in (0,1)");
  if (max_anchors_per_class < 1 || max_positives < 1 || max_negatives < 1)
    fail(ErrorKind::InvalidArgument, "pair budget caps must be at least 1");
  if (lambda_fd < 0.0) fail(ErrorKind::InvalidArgument, "lambda_fd must be non-negative");
}

namespace {

int nearest_cell(int g, int grid, int full) {
  const int src = static_cast<int>((g + 0.5) * static_cast<double>(full) / grid);
  return std::min(src, full - 1);
}

template <typename Pool>
std::vector<int> pick_from(const Pool& pool, int cap, Rng& rng) {
  const int n = static_cast<int>(pool.size());
  if (n <= cap) return std::vector<int>(pool.begin(), pool.end());
  std::vector<int> chosen = rng.sample_without_replacement(n, cap);
  for (int& c : chosen) c = pool[static_cast<std::size_t>(c)];
  return chosen;
}

}  // namespace

LabelMap downsample_labels(const LabelMap& labels, int grid_h, int grid_w) {
  LabelMap out(grid_h, grid_w);
  for (int gy = 0; gy < grid_h; ++gy)
    for (int gx = 0; gx < grid_w; ++gx)
      out.at(gy, gx) = labels.at(nearest_cell(gy, grid_h, labels.h),
                                 nearest_cell(gx, grid_w, labels.w));
  return out;
}

std::vector<Origin> downsample_origins(const std::vector<std::uint8_t>& origin_mask, int h, int w,
                                       int grid_h, int grid_w) {
  std::vector<Origin> out(static_cast<std::size_t>(grid_h) * grid_w, Origin::Target);
  for (int gy = 0; gy < grid_h; ++gy)
    for (int gx = 0; gx < grid_w; ++gx) {
      const int sy = nearest_cell(gy, grid_h, h);
      const int sx = nearest_cell(gx, grid_w, w);
      out[static_cast<std::size_t>(gy) * grid_w + gx] =
          origin_mask[static_cast<std::size_t>(sy) * w + sx] ? Origin::Source : Origin::Target;
    }
  return out;
}

PairSet sample_pairs(const LabelMap& grid_labels, const std::vector<Origin>& origins,
                     const ClassTaxonomy& taxonomy, const CLConfig& cfg, Rng& rng,
                     Resolution resolution) {
  cfg.validate();
  const int cells = grid_labels.h * grid_labels.w;
  if (!origins.empty() && static_cast<int>(origins.size()) != cells)
    fail(ErrorKind::ShapeMismatch, "origin map does not match the CL grid");
  const int num_classes = taxonomy.num_classes();

  auto origin_of = [&](int i) {
    return origins.empty() ? Origin::Source : origins[static_cast<std::size_t>(i)];
  };
  auto usable = [&](int cls) {
    if (cls >= num_classes) return false;
    return !cfg.stuff_only || taxonomy.is_stuff(cls);
  };

  // Cells per class, split by origin, in ascending cell order.
  std::vector<std::vector<int>> cells_src(static_cast<std::size_t>(num_classes));
  std::vector<std::vector<int>> cells_tgt(static_cast<std::size_t>(num_classes));
  for (int i = 0; i < cells; ++i) {
    const std::uint8_t cls = grid_labels.v[static_cast<std::size_t>(i)];
    if (cls == kIgnoreLabel || !usable(cls)) continue;
    (origin_of(i) == Origin::Source ? cells_src : cells_tgt)[cls].push_back(i);
  }

  std::vector<int> present;
  for (int c = 0; c < num_classes; ++c)
    if (!cells_src[static_cast<std::size_t>(c)].empty() ||
        !cells_tgt[static_cast<std::size_t>(c)].empty())
      present.push_back(c);

  PairSet out;
  out.grid_h = grid_labels.h;
  out.grid_w = grid_labels.w;
  if (present.size() < 2) return out;  // no negatives can exist

  // Negative pools per class are shared by all of that class's anchors.
  auto negatives_for = [&](int cls, bool source_only) {
    std::vector<int> pool;
    for (int c : present) {
      if (c == cls) continue;
      if (cfg.stuff_thing_masking && taxonomy.is_stuff(c) != taxonomy.is_stuff(cls)) continue;
      const auto& src = cells_src[static_cast<std::size_t>(c)];
      pool.insert(pool.end(), src.begin(), src.end());
      if (!source_only) {
        const auto& tgt = cells_tgt[static_cast<std::size_t>(c)];
        pool.insert(pool.end(), tgt.begin(), tgt.end());
      }
    }
    std::sort(pool.begin(), pool.end());
    return pool;
  };

  for (int cls : present) {
    std::vector<int> anchor_pool = cells_src[static_cast<std::size_t>(cls)];
    anchor_pool.insert(anchor_pool.end(), cells_tgt[static_cast<std::size_t>(cls)].begin(),
                       cells_tgt[static_cast<std::size_t>(cls)].end());
    std::sort(anchor_pool.begin(), anchor_pool.end());
    const std::vector<int> anchors = pick_from(anchor_pool, cfg.max_anchors_per_class, rng);

    const std::vector<int> neg_any = negatives_for(cls, false);
    const std::vector<int> neg_src =
        cfg.mixed_prose_pools ? neg_any : negatives_for(cls, true);

    for (int cell : anchors) {
      PairAnchor a;
      a.pixel = cell;
      a.class_id = static_cast<std::uint8_t>(cls);
      a.origin = origin_of(cell);
      a.resolution = resolution;

      const bool source_only = a.origin == Origin::Source && !cfg.mixed_prose_pools;
      std::vector<int> pos_pool = cells_src[static_cast<std::size_t>(cls)];
      if (!source_only)
        pos_pool.insert(pos_pool.end(), cells_tgt[static_cast<std::size_t>(cls)].begin(),
                        cells_tgt[static_cast<std::size_t>(cls)].end());
      std::sort(pos_pool.begin(), pos_pool.end());
      if (resolution == Resolution::LR) {
        // An LR anchor lives in the pool grid; it cannot be its own positive.
        pos_pool.erase(std::remove(pos_pool.begin(), pos_pool.end(), cell), pos_pool.end());
      }
      a.positives = pick_from(pos_pool, cfg.max_positives, rng);
      if (a.positives.empty()) continue;
      a.negatives = pick_from(source_only ? neg_src : neg_any, cfg.max_negatives, rng);
      out.anchors.push_back(std::move(a));
    }
  }
  return out;
}

}  // namespace cluda
