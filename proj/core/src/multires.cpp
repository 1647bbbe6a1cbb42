#include "cluda/multires.hpp"

#include <algorithm>
#include <cmath>

#include "cluda/error.hpp"
#include "cluda/graph.hpp"

namespace cluda {

TensorF resize_image(const TensorF& image, int out_h, int out_w) {
  // Route through the graph kernel so every resize in the project shares one
  // sampling convention.
  Graph<float> g(/*recording=*/false);
  return g.value(g.bilinear_resize(g.constant(image), out_h, out_w));
}

TensorF crop_image(const TensorF& image, const CropBox& box) {
  if (image.shape.size() != 3) fail(ErrorKind::ShapeMismatch, "crop_image expects HxWxC");
  const int h = image.shape[0], w = image.shape[1], ch = image.shape[2];
  if (box.top < 0 || box.left < 0 || box.height < 1 || box.width < 1 ||
      box.top + box.height > h || box.left + box.width > w)
    fail(ErrorKind::InvalidArgument, "crop box exceeds the image");
  TensorF out = TensorF::zeros({box.height, box.width, ch});
  for (int y = 0; y < box.height; ++y)
    std::copy_n(image.data.data() + ((static_cast<std::size_t>(box.top + y) * w) + box.left) * ch,
                static_cast<std::size_t>(box.width) * ch,
                out.data.data() + static_cast<std::size_t>(y) * box.width * ch);
  return out;
}

LabelMap crop_labels(const LabelMap& labels, const CropBox& box) {
  if (box.top < 0 || box.left < 0 || box.top + box.height > labels.h ||
      box.left + box.width > labels.w)
    fail(ErrorKind::InvalidArgument, "crop box exceeds the label map");
  LabelMap out(box.height, box.width);
  for (int y = 0; y < box.height; ++y)
    for (int x = 0; x < box.width; ++x) out.at(y, x) = labels.at(box.top + y, box.left + x);
  return out;
}

namespace {

void check_crop_geometry(const TensorF& image, double lr_scale, int hr_h, int hr_w) {
  if (image.shape.size() != 3) fail(ErrorKind::ShapeMismatch, "crops expect an HxWxC image");
  if (lr_scale <= 0.0 || lr_scale > 1.0)
    fail(ErrorKind::InvalidArgument, "lr_scale must lie in (0,1]");
  const int h = image.shape[0], w = image.shape[1];
  if (hr_h > h || hr_w > w)
    fail(ErrorKind::InvalidArgument, "hr crop " + std::to_string(hr_h) + "x" +
                                         std::to_string(hr_w) + " does not fit in " +
                                         shape_str(image.shape));
  if (hr_h % 16 != 0 || hr_w % 16 != 0 || hr_h < 16 || hr_w < 16)
    fail(ErrorKind::InvalidArgument, "hr crop dims must be positive multiples of 16");
  const int lh = static_cast<int>(std::lround(h * lr_scale));
  const int lw = static_cast<int>(std::lround(w * lr_scale));
  if (lh % 16 != 0 || lw % 16 != 0 || lh < 16 || lw < 16)
    fail(ErrorKind::InvalidArgument,
         "lr_scale produces dims not divisible by 16: " + std::to_string(lh) + "x" +
             std::to_string(lw));
}

}  // namespace

MultiResBundle make_crops(const TensorF& image, double lr_scale, int hr_h, int hr_w, Rng& rng) {
  check_crop_geometry(image, lr_scale, hr_h, hr_w);
  const int h = image.shape[0], w = image.shape[1];
  CropBox box;
  box.top = static_cast<int>(rng.uniform_index(static_cast<std::size_t>(h - hr_h + 1)));
  box.left = static_cast<int>(rng.uniform_index(static_cast<std::size_t>(w - hr_w + 1)));
  box.height = hr_h;
  box.width = hr_w;
  return crops_at(image, lr_scale, box);
}

MultiResBundle crops_at(const TensorF& image, double lr_scale, const CropBox& box) {
  check_crop_geometry(image, lr_scale, box.height, box.width);
  const int h = image.shape[0], w = image.shape[1];
  const int lh = static_cast<int>(std::lround(h * lr_scale));
  const int lw = static_cast<int>(std::lround(w * lr_scale));
  MultiResBundle out;
  out.lr_image = (lh == h && lw == w) ? image : resize_image(image, lh, lw);
  out.box = box;
  out.hr_image = crop_image(image, box);
  return out;
}

template <typename T>
TensorD entropy_map(const TensorData<T>& probs) {
  if (probs.shape.size() != 3) fail(ErrorKind::ShapeMismatch, "entropy_map expects HxWxC probs");
  const int h = probs.shape[0], w = probs.shape[1], classes = probs.shape[2];
  TensorD out = TensorD::zeros({h, w});
  for (int i = 0; i < h * w; ++i) {
    const T* row = probs.data.data() + static_cast<std::size_t>(i) * classes;
    double sum = 0.0, e = 0.0;
    for (int c = 0; c < classes; ++c) {
      const double p = static_cast<double>(row[c]);
      sum += p;
      if (p > 0.0) e -= p * std::log(p);
    }
    if (std::abs(sum - 1.0) > 1e-4)
      fail(ErrorKind::InvalidArgument,
           "entropy_map needs normalized probabilities (pixel sum " + std::to_string(sum) + ")");
    out.data[static_cast<std::size_t>(i)] = e;
  }
  return out;
}

template TensorD entropy_map(const TensorData<float>&);
template TensorD entropy_map(const TensorData<double>&);

namespace {

// Window start offsets: multiples of the stride plus a flush final position.
std::vector<int> window_starts(int full, int window, int stride) {
  std::vector<int> starts;
  for (int s = 0; s + window <= full; s += stride) starts.push_back(s);
  if (starts.empty() || starts.back() != full - window) starts.push_back(full - window);
  return starts;
}

}  // namespace

CropBox entropy_crop(const TensorD& entropy, int crop_h, int crop_w, int stride_y, int stride_x) {
  if (entropy.shape.size() != 2) fail(ErrorKind::ShapeMismatch, "entropy map must be HxW");
  const int h = entropy.shape[0], w = entropy.shape[1];
  if (crop_h > h || crop_w > w)
    fail(ErrorKind::InvalidArgument, "entropy crop larger than the map");
  if (crop_h < 1 || crop_w < 1 || stride_y < 1 || stride_x < 1)
    fail(ErrorKind::InvalidArgument, "entropy crop and stride must be positive");
  CropBox best{0, 0, crop_h, crop_w};
  double best_mean = -1.0;
  for (int ty : window_starts(h, crop_h, stride_y)) {
    for (int tx : window_starts(w, crop_w, stride_x)) {
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
  }
  return best;
}

TensorF sliding_probs(const ModelParams<float>& teacher, const TensorF& image, int window_h,
                      int window_w, int stride_y, int stride_x) {
  if (image.shape.size() != 3) fail(ErrorKind::ShapeMismatch, "image must be HxWxC");
  const int h = image.shape[0], w = image.shape[1];
  if (window_h > h || window_w > w)
    fail(ErrorKind::InvalidArgument, "sliding window larger than the image");
  if (stride_y < 1 || stride_x < 1) fail(ErrorKind::InvalidArgument, "stride must be positive");
  const int classes = teacher.config.num_classes;
  std::vector<float> canvas(static_cast<std::size_t>(h) * w * classes, 0.0f);
  std::vector<int> counts(static_cast<std::size_t>(h) * w, 0);
  for (int ty : window_starts(h, window_h, stride_y)) {
    for (int tx : window_starts(w, window_w, stride_x)) {
      CropBox box{ty, tx, window_h, window_w};
      const TensorF logits = model_logits(teacher, crop_image(image, box));
      for (int y = 0; y < window_h; ++y)
        for (int x = 0; x < window_w; ++x) {
          const std::size_t dst = (static_cast<std::size_t>(ty + y) * w + tx + x);
          counts[dst] += 1;
          for (int c = 0; c < classes; ++c)
            canvas[dst * classes + c] +=
                logits.data[(static_cast<std::size_t>(y) * window_w + x) * classes + c];
        }
    }
  }
  TensorF avg = TensorF::zeros({h, w, classes});
  for (std::size_t i = 0; i < counts.size(); ++i) {
    if (counts[i] < 1) fail(ErrorKind::InvalidArgument, "sliding windows left a pixel uncovered");
    for (int c = 0; c < classes; ++c)
      avg.data[i * classes + c] = canvas[i * classes + c] / static_cast<float>(counts[i]);
  }
  Graph<float> g(/*recording=*/false);
  return g.value(g.softmax_last(g.constant(avg)));
}

PseudoLabel sliding_pseudo_label(const ModelParams<float>& teacher, const TensorF& image,
                                 int window_h, int window_w, int stride_y, int stride_x) {
  return pseudo_label_from_probs(
      sliding_probs(teacher, image, window_h, window_w, stride_y, stride_x));
}

DeltaAlignment align_delta(int lr_grid_h, int lr_grid_w, int hr_grid_h, int hr_grid_w,
                           const CropBox& box, int image_h, int image_w) {
  if (lr_grid_h < 1 || lr_grid_w < 1 || hr_grid_h < 1 || hr_grid_w < 1)
    fail(ErrorKind::InvalidArgument, "alignment grids must be positive");
  if (box.top < 0 || box.left < 0 || box.height < 1 || box.width < 1 ||
      box.top + box.height > image_h || box.left + box.width > image_w)
    fail(ErrorKind::InvalidArgument, "crop box does not fit the image");
  DeltaAlignment a;
  a.lr_grid_h = lr_grid_h;
  a.lr_grid_w = lr_grid_w;
  a.hr_grid_h = hr_grid_h;
  a.hr_grid_w = hr_grid_w;
  a.lr_in_footprint.assign(static_cast<std::size_t>(lr_grid_h) * lr_grid_w, 0);
  for (int r = 0; r < lr_grid_h; ++r) {
    const double y = (r + 0.5) * static_cast<double>(image_h) / lr_grid_h;
    for (int c = 0; c < lr_grid_w; ++c) {
      const double x = (c + 0.5) * static_cast<double>(image_w) / lr_grid_w;
      const bool inside = y >= box.top && y < box.top + box.height && x >= box.left &&
                          x < box.left + box.width;
      a.lr_in_footprint[static_cast<std::size_t>(r) * lr_grid_w + c] = inside ? 1 : 0;
    }
  }
  a.hr_to_lr_cell.assign(static_cast<std::size_t>(hr_grid_h) * hr_grid_w, 0);
  for (int r = 0; r < hr_grid_h; ++r) {
    const double y = box.top + (r + 0.5) * static_cast<double>(box.height) / hr_grid_h;
    const int lr_r = std::clamp(static_cast<int>(y * lr_grid_h / image_h), 0, lr_grid_h - 1);
    for (int c = 0; c < hr_grid_w; ++c) {
      const double x = box.left + (c + 0.5) * static_cast<double>(box.width) / hr_grid_w;
      const int lr_c = std::clamp(static_cast<int>(x * lr_grid_w / image_w), 0, lr_grid_w - 1);
      a.hr_to_lr_cell[static_cast<std::size_t>(r) * hr_grid_w + c] = lr_r * lr_grid_w + lr_c;
    }
  }
  return a;
}

DeltaAlignment align_delta_no_crop(int lr_grid_h, int lr_grid_w) {
  DeltaAlignment a;
  a.lr_grid_h = lr_grid_h;
  a.lr_grid_w = lr_grid_w;
  a.lr_in_footprint.assign(static_cast<std::size_t>(lr_grid_h) * lr_grid_w, 0);
  return a;
}

}  // namespace cluda
