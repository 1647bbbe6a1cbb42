#include "cluda/metrics.hpp"

#include "cluda/error.hpp"

namespace cluda {

std::int64_t ConfusionMatrix::total() const {
  std::int64_t t = 0;
  for (std::int64_t c : counts) t += c;
  return t;
}

void ConfusionMatrix::accumulate(const LabelMap& pred, const LabelMap& gt) {
  if (pred.h != gt.h || pred.w != gt.w)
    fail(ErrorKind::ShapeMismatch, "prediction and ground truth dims differ");
  for (std::int64_t i = 0; i < gt.size(); ++i) {
    const std::uint8_t y = gt.v[static_cast<std::size_t>(i)];
    if (y == kIgnoreLabel) continue;
    const std::uint8_t p = pred.v[static_cast<std::size_t>(i)];
    if (y >= num_classes || p >= num_classes)
      fail(ErrorKind::InvalidArgument,
           "label " + std::to_string(std::max(y, p)) + " outside [0," +
               std::to_string(num_classes) + ")");
    at(y, p) += 1;
  }
}

ConfusionMatrix confusion(const LabelMap& pred, const LabelMap& gt, int num_classes) {
  if (num_classes < 1) fail(ErrorKind::InvalidArgument, "confusion needs at least one class");
  ConfusionMatrix cm(num_classes);
  cm.accumulate(pred, gt);
  return cm;
}

IouReport miou(const ConfusionMatrix& cm) {
  if (cm.num_classes < 1) fail(ErrorKind::InvalidArgument, "empty confusion matrix");
  IouReport r;
  r.per_class.assign(static_cast<std::size_t>(cm.num_classes), 0.0);
  r.valid.assign(static_cast<std::size_t>(cm.num_classes), false);
  double sum = 0.0;
  int valid_count = 0;
  for (int c = 0; c < cm.num_classes; ++c) {
    const std::int64_t tp = cm.at(c, c);
    std::int64_t fp = 0, fn = 0;
    for (int o = 0; o < cm.num_classes; ++o) {
      if (o == c) continue;
      fp += cm.at(o, c);
      fn += cm.at(c, o);
    }
    const std::int64_t uni = tp + fp + fn;
    if (uni == 0) continue;
    r.per_class[static_cast<std::size_t>(c)] =
        static_cast<double>(tp) / static_cast<double>(uni);
    r.valid[static_cast<std::size_t>(c)] = true;
    sum += r.per_class[static_cast<std::size_t>(c)];
    ++valid_count;
  }
  if (valid_count == 0)
    fail(ErrorKind::EmptyInput, "mIoU undefined: no class appears in prediction or ground truth");
  r.miou = sum / valid_count;
  return r;
}

double confidence_fraction(const PseudoLabel& pseudo, double beta) {
  if (pseudo.confidence.size() == 0)
    fail(ErrorKind::EmptyInput, "confidence_fraction needs a non-empty pseudo-label");
  std::int64_t confident = 0;
  for (float v : pseudo.confidence.data)
    if (static_cast<double>(v) > beta) ++confident;
  return static_cast<double>(confident) / static_cast<double>(pseudo.confidence.size());
}

}  // namespace cluda
