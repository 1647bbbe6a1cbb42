#pragma once

#include <cstdint>
#include <vector>

#include "cluda/data.hpp"
#include "cluda/pseudo.hpp"

namespace cluda {

// Row = ground truth, column = prediction; ignore pixels excluded.
struct ConfusionMatrix {
  int num_classes = 0;
  std::vector<std::int64_t> counts;

  explicit ConfusionMatrix(int classes = 0)
      : num_classes(classes),
        counts(static_cast<std::size_t>(classes) * static_cast<std::size_t>(classes), 0) {}

  std::int64_t& at(int gt, int pred) {
    return counts[static_cast<std::size_t>(gt) * num_classes + pred];
  }
  std::int64_t at(int gt, int pred) const {
    return counts[static_cast<std::size_t>(gt) * num_classes + pred];
  }
  std::int64_t total() const;

  void accumulate(const LabelMap& pred, const LabelMap& gt);
};

ConfusionMatrix confusion(const LabelMap& pred, const LabelMap& gt, int num_classes);

struct IouReport {
  std::vector<double> per_class;  // 0 for classes with empty union
  std::vector<bool> valid;        // union > 0
  double miou = 0.0;              // mean over valid classes
};

// IoU_c = TP / (TP + FP + FN); classes with zero union are excluded from the
// mean. Errors when every class is empty.
IouReport miou(const ConfusionMatrix& cm);

// Fraction of pixels whose pseudo-label confidence strictly exceeds beta.
double confidence_fraction(const PseudoLabel& pseudo, double beta);

}  // namespace cluda
