#include "cluda/graph.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace cluda {

std::string shape_str(const Shape& shape) {
  if (shape.empty()) return "scalar";
  std::string s;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s;
}

namespace {

struct KernelNameEntry {
  Kernel kind;
  std::string_view name;
};

constexpr KernelNameEntry kKernelNames[] = {
    {Kernel::Conv2d3x3, "conv2d3x3"},
    {Kernel::Dense, "dense"},
    {Kernel::Matmul, "matmul"},
    {Kernel::Relu, "relu"},
    {Kernel::Add, "add"},
    {Kernel::Mul, "mul"},
    {Kernel::Scale, "scale"},
    {Kernel::ConcatChannels, "concat"},
    {Kernel::SoftmaxLast, "softmax"},
    {Kernel::Log, "log"},
    {Kernel::Exp, "exp"},
    {Kernel::ClampProbs, "clamp-probs"},
    {Kernel::L2NormalizeLast, "l2-normalize"},
    {Kernel::BilinearResize, "bilinear-resize"},
    {Kernel::MeanAll, "mean"},
    {Kernel::SumAll, "sum"},
    {Kernel::GatherRows, "gather"},
    {Kernel::Sigmoid, "sigmoid"},
    {Kernel::MaxPool2x2, "maxpool2x2"},
    {Kernel::Reshape, "reshape"},
    {Kernel::NceFromSims, "nce-from-sims"},
    {Kernel::MaskedFeatureDistance, "masked-feature-distance"},
    {Kernel::OverlayAdd, "overlay-add"},
};

[[noreturn]] void shape_fail(Kernel kind, const std::string& detail) {
  fail(ErrorKind::ShapeMismatch, std::string(kernel_name(kind)) + ": " + detail);
}

// Dense row-major matrix products. Serial with fixed accumulation order, so
// results are bit-reproducible. The a==0 skips add exactly nothing (inputs
// are finite-checked) and pay off on post-relu activations.

template <typename T>
void gemm_nn(int m, int n, int k, const T* a, const T* b, T* c) {
  for (int i = 0; i < m; ++i) {
    T* ci = c + static_cast<std::size_t>(i) * n;
    std::fill(ci, ci + n, T(0));
    const T* ai = a + static_cast<std::size_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      const T av = ai[p];
      if (av == T(0)) continue;
      const T* bp = b + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// c (k x n) += a^T b with a (m x k), b (m x n); c must be pre-zeroed by caller.
template <typename T>
void gemm_tn_acc(int m, int n, int k, const T* a, const T* b, T* c) {
  for (int i = 0; i < m; ++i) {
    const T* ai = a + static_cast<std::size_t>(i) * k;
    const T* bi = b + static_cast<std::size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const T av = ai[p];
      if (av == T(0)) continue;
      T* cp = c + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) cp[j] += av * bi[j];
    }
  }
}

// c (m x k) = a b^T with a (m x n), b (k x n).
template <typename T>
void gemm_nt(int m, int n, int k, const T* a, const T* b, T* c) {
  for (int i = 0; i < m; ++i) {
    const T* ai = a + static_cast<std::size_t>(i) * n;
    T* ci = c + static_cast<std::size_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      const T* bp = b + static_cast<std::size_t>(p) * n;
      T s = T(0);
      for (int j = 0; j < n; ++j) s += ai[j] * bp[j];
      ci[p] = s;
    }
  }
}

struct ConvDims {
  int h, w, cin, cout, stride, oh, ow;
};

template <typename T>
ConvDims conv_dims(const TensorData<T>& x, const TensorData<T>& w, const TensorData<T>& b,
                   int stride) {
  if (x.shape.size() != 3)
    shape_fail(Kernel::Conv2d3x3, "input must be HxWxC, got " + shape_str(x.shape));
  if (w.shape.size() != 4 || w.shape[0] != 3 || w.shape[1] != 3)
    shape_fail(Kernel::Conv2d3x3, "weight must be 3x3xCinxCout, got " + shape_str(w.shape));
  if (b.shape.size() != 1 || b.shape[0] != w.shape[3])
    shape_fail(Kernel::Conv2d3x3, "bias " + shape_str(b.shape) + " does not match weight " +
                                      shape_str(w.shape));
  if (x.shape[2] != w.shape[2])
    shape_fail(Kernel::Conv2d3x3, "input channels " + std::to_string(x.shape[2]) +
                                      " do not match weight channels " + std::to_string(w.shape[2]));
  if (stride != 1 && stride != 2)
    shape_fail(Kernel::Conv2d3x3, "stride must be 1 or 2, got " + std::to_string(stride));
  ConvDims d;
  d.h = x.shape[0];
  d.w = x.shape[1];
  d.cin = x.shape[2];
  d.cout = w.shape[3];
  d.stride = stride;
  if (d.h < 1 || d.w < 1) shape_fail(Kernel::Conv2d3x3, "empty input " + shape_str(x.shape));
  d.oh = (d.h - 1) / stride + 1;
  d.ow = (d.w - 1) / stride + 1;
  return d;
}

// Patch matrix for a 3x3, pad-1 convolution: rows = output pixels, columns
// indexed (ky,kx,c). Matches the row-major layout of a 3x3xCinxCout weight.
template <typename T>
std::vector<T> im2col(const TensorData<T>& x, const ConvDims& d) {
  const int k9 = 9 * d.cin;
  std::vector<T> p(static_cast<std::size_t>(d.oh) * d.ow * k9, T(0));
  const T* src = x.data.data();
  for (int oy = 0; oy < d.oh; ++oy) {
    for (int ox = 0; ox < d.ow; ++ox) {
      T* row = p.data() + (static_cast<std::size_t>(oy) * d.ow + ox) * k9;
      for (int ky = 0; ky < 3; ++ky) {
        const int iy = oy * d.stride - 1 + ky;
        if (iy < 0 || iy >= d.h) continue;
        for (int kx = 0; kx < 3; ++kx) {
          const int ix = ox * d.stride - 1 + kx;
          if (ix < 0 || ix >= d.w) continue;
          std::memcpy(row + (ky * 3 + kx) * d.cin,
                      src + (static_cast<std::size_t>(iy) * d.w + ix) * d.cin,
                      sizeof(T) * static_cast<std::size_t>(d.cin));
        }
      }
    }
  }
  return p;
}

template <typename T>
void col2im_acc(const std::vector<T>& p, const ConvDims& d, T* dx) {
  const int k9 = 9 * d.cin;
  for (int oy = 0; oy < d.oh; ++oy) {
    for (int ox = 0; ox < d.ow; ++ox) {
      const T* row = p.data() + (static_cast<std::size_t>(oy) * d.ow + ox) * k9;
      for (int ky = 0; ky < 3; ++ky) {
        const int iy = oy * d.stride - 1 + ky;
        if (iy < 0 || iy >= d.h) continue;
        for (int kx = 0; kx < 3; ++kx) {
          const int ix = ox * d.stride - 1 + kx;
          if (ix < 0 || ix >= d.w) continue;
          T* dst = dx + (static_cast<std::size_t>(iy) * d.w + ix) * d.cin;
          const T* s = row + (ky * 3 + kx) * d.cin;
          for (int c = 0; c < d.cin; ++c) dst[c] += s[c];
        }
      }
    }
  }
}

template <typename T>
struct RowSplit {
  std::int64_t rows;
  int cols;
};

template <typename T>
RowSplit<T> last_dim_rows(Kernel kind, const TensorData<T>& x) {
  if (x.shape.empty() || x.size() == 0)
    shape_fail(kind, "needs a non-empty tensor with a last axis, got " + shape_str(x.shape));
  const int cols = x.shape.back();
  return {x.size() / cols, cols};
}

struct ResizeTap {
  int lo, hi;
  double w_hi;
};

// Half-pixel-center source coordinate for one output index.
inline ResizeTap resize_tap(int out_index, int in_size, int out_size) {
  const double src = (out_index + 0.5) * (static_cast<double>(in_size) / out_size) - 0.5;
  const double clamped = std::min(std::max(src, 0.0), static_cast<double>(in_size - 1));
  ResizeTap t;
  t.lo = static_cast<int>(std::floor(clamped));
  t.hi = std::min(t.lo + 1, in_size - 1);
  t.w_hi = clamped - t.lo;
  return t;
}

}  // namespace

Kernel kernel_from_string(std::string_view id) {
  for (const auto& e : kKernelNames)
    if (e.name == id) return e.kind;
  fail(ErrorKind::UnknownKernel, "unknown kernel id '" + std::string(id) + "'");
}

std::string_view kernel_name(Kernel kind) {
  for (const auto& e : kKernelNames)
    if (e.kind == kind) return e.name;
  return "?";
}

const std::vector<Kernel>& kernel_catalog() {
  static const std::vector<Kernel> catalog = [] {
    std::vector<Kernel> v;
    for (const auto& e : kKernelNames) v.push_back(e.kind);
    return v;
  }();
  return catalog;
}

template <typename T>
Ref<T> Graph<T>::leaf(TensorData<T> value, bool requires_grad, std::string name) {
  if (check_finite_ && !value.finite())
    fail(ErrorKind::NonFinite, "leaf '" + name + "' holds non-finite values");
  Slot s;
  s.value = std::move(value);
  s.requires_grad = requires_grad;
  s.needs_grad = requires_grad && recording_;
  s.name = std::move(name);
  slots_.push_back(std::move(s));
  return Ref<T>{static_cast<int>(slots_.size()) - 1};
}

template <typename T>
const typename Graph<T>::Slot& Graph<T>::slot(Ref<T> r) const {
  if (!r.valid() || r.id >= static_cast<int>(slots_.size()))
    fail(ErrorKind::InvalidArgument, "dangling value reference");
  return slots_[static_cast<std::size_t>(r.id)];
}

template <typename T>
typename Graph<T>::Slot& Graph<T>::slot(Ref<T> r) {
  return const_cast<Slot&>(static_cast<const Graph<T>*>(this)->slot(r));
}

template <typename T>
const TensorData<T>& Graph<T>::value(Ref<T> r) const {
  return slot(r).value;
}

template <typename T>
bool Graph<T>::has_grad(Ref<T> r) const {
  return slot(r).grad_present;
}

template <typename T>
const std::vector<T>& Graph<T>::grad(Ref<T> r) const {
  const Slot& s = slot(r);
  if (!s.grad_present) fail(ErrorKind::NoRecord, "no gradient present for value");
  return s.grad;
}

template <typename T>
TensorData<T> Graph<T>::grad_tensor(Ref<T> r) const {
  return TensorData<T>(slot(r).value.shape, grad(r));
}

template <typename T>
std::map<std::string, TensorData<T>> Graph<T>::named_gradients() const {
  std::map<std::string, TensorData<T>> out;
  for (const Slot& s : slots_)
    if (s.requires_grad && s.grad_present && !s.name.empty())
      out.emplace(s.name, TensorData<T>(s.value.shape, s.grad));
  return out;
}

template <typename T>
std::vector<T>& Graph<T>::ensure_grad(int id) {
  Slot& s = slots_[static_cast<std::size_t>(id)];
  if (!s.grad_present) {
    s.grad.assign(s.value.data.size(), T(0));
    s.grad_present = true;
  }
  return s.grad;
}

template <typename T>
void Graph<T>::accumulate(int id, const std::vector<T>& g) {
  std::vector<T>& dst = ensure_grad(id);
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i];
}

template <typename T>
Ref<T> Graph<T>::apply(std::string_view kernel_id, const std::vector<Ref<T>>& inputs,
                       const KernelAttrs& attrs) {
  return apply(kernel_from_string(kernel_id), inputs, attrs);
}

template <typename T>
Ref<T> Graph<T>::apply(Kernel kind, const std::vector<Ref<T>>& inputs, const KernelAttrs& attrs) {
  std::vector<int> ids;
  ids.reserve(inputs.size());
  bool needs = false;
  for (Ref<T> r : inputs) {
    const Slot& s = slot(r);
    needs = needs || s.needs_grad;
    ids.push_back(r.id);
  }
  TensorData<T> out = run_forward(kind, ids, attrs);
  if (check_finite_ && !out.finite())
    fail(ErrorKind::NonFinite,
         std::string(kernel_name(kind)) + " produced non-finite values");
  Slot s;
  s.value = std::move(out);
  s.needs_grad = needs && recording_;
  slots_.push_back(std::move(s));
  const int out_id = static_cast<int>(slots_.size()) - 1;
  if (recording_) {
    slots_.back().producer = static_cast<int>(nodes_.size());
    nodes_.push_back(Node{kind, std::move(ids), out_id, attrs});
  }
  return Ref<T>{out_id};
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

template <typename T>
TensorData<T> Graph<T>::run_forward(Kernel kind, const std::vector<int>& inputs,
                                    const KernelAttrs& attrs) const {
  auto arity = [&](std::size_t n) {
    if (inputs.size() != n)
      shape_fail(kind, "expects " + std::to_string(n) + " inputs, got " +
                           std::to_string(inputs.size()));
  };
  auto in = [&](std::size_t i) -> const TensorData<T>& {
    return slots_[static_cast<std::size_t>(inputs[i])].value;
  };

  switch (kind) {
    case Kernel::Conv2d3x3: {
      arity(3);
      const auto& x = in(0);
      const auto& w = in(1);
      const auto& b = in(2);
      const ConvDims d = conv_dims(x, w, b, attrs.stride);
      const std::vector<T> p = im2col(x, d);
      TensorData<T> out = TensorData<T>::zeros({d.oh, d.ow, d.cout});
      gemm_nn(d.oh * d.ow, d.cout, 9 * d.cin, p.data(), w.data.data(), out.data.data());
      T* o = out.data.data();
      for (int r = 0; r < d.oh * d.ow; ++r)
        for (int c = 0; c < d.cout; ++c) o[static_cast<std::size_t>(r) * d.cout + c] += b.data[c];
      return out;
    }
    case Kernel::Dense:
    case Kernel::Matmul: {
      const bool biased = kind == Kernel::Dense;
      arity(biased ? 3 : 2);
      const auto& x = in(0);
      const auto& w = in(1);
      if (x.shape.size() != 2 || w.shape.size() != 2 || x.shape[1] != w.shape[0])
        shape_fail(kind, "needs MxK and KxN operands, got " + shape_str(x.shape) + " and " +
                             shape_str(w.shape));
      const int m = x.shape[0], k = x.shape[1], n = w.shape[1];
      TensorData<T> out = TensorData<T>::zeros({m, n});
      gemm_nn(m, n, k, x.data.data(), w.data.data(), out.data.data());
      if (biased) {
        const auto& b = in(2);
        if (b.shape.size() != 1 || b.shape[0] != n)
          shape_fail(kind, "bias " + shape_str(b.shape) + " does not match output width " +
                               std::to_string(n));
        for (int r = 0; r < m; ++r)
          for (int c = 0; c < n; ++c) out.data[static_cast<std::size_t>(r) * n + c] += b.data[c];
      }
      return out;
    }
    case Kernel::Relu: {
      arity(1);
      TensorData<T> out = in(0);
      for (T& v : out.data) v = v > T(0) ? v : T(0);
      return out;
    }
    case Kernel::Add:
    case Kernel::Mul: {
      arity(2);
      const auto& a = in(0);
      const auto& b = in(1);
      if (!same_shape(a.shape, b.shape))
        shape_fail(kind, "operand shapes differ: " + shape_str(a.shape) + " vs " +
                             shape_str(b.shape));
      TensorData<T> out = a;
      if (kind == Kernel::Add)
        for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += b.data[i];
      else
        for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= b.data[i];
      return out;
    }
    case Kernel::Scale: {
      arity(1);
      TensorData<T> out = in(0);
      const T c = static_cast<T>(attrs.scalar);
      for (T& v : out.data) v *= c;
      return out;
    }
    case Kernel::ConcatChannels: {
      if (inputs.empty()) shape_fail(kind, "needs at least one input");
      const Shape& first = in(0).shape;
      if (first.empty()) shape_fail(kind, "inputs must have a channel axis");
      Shape out_shape = first;
      int total = 0;
      for (std::size_t i = 0; i < inputs.size(); ++i) {
        const Shape& s = in(i).shape;
        if (s.size() != first.size() ||
            !std::equal(s.begin(), s.end() - 1, first.begin(), first.end() - 1))
          shape_fail(kind, "leading dims differ: " + shape_str(first) + " vs " + shape_str(s));
        total += s.back();
      }
      out_shape.back() = total;
      TensorData<T> out = TensorData<T>::zeros(out_shape);
      const std::int64_t rows = numel(out_shape) / total;
      int offset = 0;
      for (std::size_t i = 0; i < inputs.size(); ++i) {
        const auto& x = in(i);
        const int c = x.shape.back();
        for (std::int64_t r = 0; r < rows; ++r)
          std::memcpy(out.data.data() + r * total + offset, x.data.data() + r * c,
                      sizeof(T) * static_cast<std::size_t>(c));
        offset += c;
      }
      return out;
    }
    case Kernel::SoftmaxLast: {
      arity(1);
      const auto& x = in(0);
      const auto rc = last_dim_rows(kind, x);
      TensorData<T> out = x;
      for (std::int64_t r = 0; r < rc.rows; ++r) {
        T* row = out.data.data() + r * rc.cols;
        T mx = row[0];
        for (int c = 1; c < rc.cols; ++c) mx = std::max(mx, row[c]);
        double sum = 0.0;
        for (int c = 0; c < rc.cols; ++c) {
          row[c] = std::exp(row[c] - mx);
          sum += static_cast<double>(row[c]);
        }
        const T inv = static_cast<T>(1.0 / sum);
        for (int c = 0; c < rc.cols; ++c) row[c] *= inv;
      }
      return out;
    }
    case Kernel::Log: {
      arity(1);
      TensorData<T> out = in(0);
      for (T& v : out.data) v = std::log(v);
      return out;
    }
    case Kernel::Exp: {
      arity(1);
      TensorData<T> out = in(0);
      for (T& v : out.data) v = std::exp(v);
      return out;
    }
    case Kernel::ClampProbs: {
      arity(1);
      TensorData<T> out = in(0);
      const T lo = static_cast<T>(1e-12);
      const T hi = static_cast<T>(1.0 - 1e-12);
      for (T& v : out.data) v = std::min(std::max(v, lo), hi);
      return out;
    }
    case Kernel::L2NormalizeLast: {
      arity(1);
      const auto& x = in(0);
      const auto rc = last_dim_rows(kind, x);
      TensorData<T> out = x;
      for (std::int64_t r = 0; r < rc.rows; ++r) {
        T* row = out.data.data() + r * rc.cols;
        double s = 0.0;
        for (int c = 0; c < rc.cols; ++c) s += static_cast<double>(row[c]) * row[c];
        const T inv = static_cast<T>(1.0 / std::sqrt(s + 1e-30));
        for (int c = 0; c < rc.cols; ++c) row[c] *= inv;
      }
      return out;
    }
    case Kernel::BilinearResize: {
      arity(1);
      const auto& x = in(0);
      if (x.shape.size() != 3) shape_fail(kind, "input must be HxWxC, got " + shape_str(x.shape));
      const int h = x.shape[0], w = x.shape[1], ch = x.shape[2];
      if (h < 1 || w < 1 || ch < 1) shape_fail(kind, "zero-sized input " + shape_str(x.shape));
      if (attrs.out_h < 1 || attrs.out_w < 1)
        shape_fail(kind, "output size must be positive, got " + std::to_string(attrs.out_h) + "x" +
                             std::to_string(attrs.out_w));
      if (attrs.out_h == h && attrs.out_w == w) return x;
      TensorData<T> out = TensorData<T>::zeros({attrs.out_h, attrs.out_w, ch});
      for (int oy = 0; oy < attrs.out_h; ++oy) {
        const ResizeTap ty = resize_tap(oy, h, attrs.out_h);
        for (int ox = 0; ox < attrs.out_w; ++ox) {
          const ResizeTap tx = resize_tap(ox, w, attrs.out_w);
          const T* p00 = x.data.data() + (static_cast<std::size_t>(ty.lo) * w + tx.lo) * ch;
          const T* p01 = x.data.data() + (static_cast<std::size_t>(ty.lo) * w + tx.hi) * ch;
          const T* p10 = x.data.data() + (static_cast<std::size_t>(ty.hi) * w + tx.lo) * ch;
          const T* p11 = x.data.data() + (static_cast<std::size_t>(ty.hi) * w + tx.hi) * ch;
          const double w00 = (1.0 - ty.w_hi) * (1.0 - tx.w_hi);
          const double w01 = (1.0 - ty.w_hi) * tx.w_hi;
          const double w10 = ty.w_hi * (1.0 - tx.w_hi);
          const double w11 = ty.w_hi * tx.w_hi;
          T* o = out.data.data() + (static_cast<std::size_t>(oy) * attrs.out_w + ox) * ch;
          for (int c = 0; c < ch; ++c)
            o[c] = static_cast<T>(w00 * p00[c] + w01 * p01[c] + w10 * p10[c] + w11 * p11[c]);
        }
      }
      return out;
    }
    case Kernel::MeanAll:
    case Kernel::SumAll: {
      arity(1);
      const auto& x = in(0);
      if (x.size() == 0) fail(ErrorKind::EmptyInput, "reduction over an empty tensor");
      double s = 0.0;
      for (T v : x.data) s += static_cast<double>(v);
      if (kind == Kernel::MeanAll) s /= static_cast<double>(x.size());
      return TensorData<T>::scalar(static_cast<T>(s));
    }
    case Kernel::GatherRows: {
      arity(1);
      const auto& x = in(0);
      if (x.shape.empty()) shape_fail(kind, "input must have a row axis");
      const int n = x.shape[0];
      const std::int64_t row = x.size() / std::max(n, 1);
      Shape out_shape = x.shape;
      out_shape[0] = static_cast<int>(attrs.indices.size());
      TensorData<T> out = TensorData<T>::zeros(out_shape);
      for (std::size_t i = 0; i < attrs.indices.size(); ++i) {
        const int idx = attrs.indices[i];
        if (idx < 0 || idx >= n)
          fail(ErrorKind::InvalidArgument,
               "gather index " + std::to_string(idx) + " out of range [0," + std::to_string(n) + ")");
        std::memcpy(out.data.data() + static_cast<std::int64_t>(i) * row, x.data.data() + idx * row,
                    sizeof(T) * static_cast<std::size_t>(row));
      }
      return out;
    }
    case Kernel::Sigmoid: {
      arity(1);
      TensorData<T> out = in(0);
      for (T& v : out.data) {
        if (v >= T(0)) {
          v = T(1) / (T(1) + std::exp(-v));
        } else {
          const T e = std::exp(v);
          v = e / (T(1) + e);
        }
      }
      return out;
    }
    case Kernel::MaxPool2x2: {
      arity(1);
      const auto& x = in(0);
      if (x.shape.size() != 3 || x.shape[0] % 2 != 0 || x.shape[1] % 2 != 0)
        shape_fail(kind, "input must be HxWxC with even H,W, got " + shape_str(x.shape));
      const int h = x.shape[0], w = x.shape[1], ch = x.shape[2];
      TensorData<T> out = TensorData<T>::zeros({h / 2, w / 2, ch});
      for (int oy = 0; oy < h / 2; ++oy)
        for (int ox = 0; ox < w / 2; ++ox)
          for (int c = 0; c < ch; ++c) {
            T best = x.data[(static_cast<std::size_t>(2 * oy) * w + 2 * ox) * ch + c];
            for (int dy = 0; dy < 2; ++dy)
              for (int dx = 0; dx < 2; ++dx) {
                const T v =
                    x.data[(static_cast<std::size_t>(2 * oy + dy) * w + 2 * ox + dx) * ch + c];
                if (v > best) best = v;
              }
            out.data[(static_cast<std::size_t>(oy) * (w / 2) + ox) * ch + c] = best;
          }
      return out;
    }
    case Kernel::Reshape: {
      arity(1);
      const auto& x = in(0);
      if (numel(attrs.target_shape) != x.size())
        shape_fail(kind, "cannot reshape " + shape_str(x.shape) + " to " +
                             shape_str(attrs.target_shape));
      return TensorData<T>(attrs.target_shape, x.data);
    }
    case Kernel::NceFromSims: {
      arity(2);
      const auto& pos = in(0);
      const auto& neg = in(1);
      if (pos.size() < 1) fail(ErrorKind::EmptyInput, "nce-from-sims needs at least one positive");
      if (attrs.tau <= 0.0)
        fail(ErrorKind::InvalidArgument, "nce-from-sims temperature must be positive");
      const double inv_tau = 1.0 / attrs.tau;
      double m = static_cast<double>(pos.data[0]) * inv_tau;
      for (T v : pos.data) m = std::max(m, static_cast<double>(v) * inv_tau);
      for (T v : neg.data) m = std::max(m, static_cast<double>(v) * inv_tau);
      double neg_sum = 0.0;
      for (T v : neg.data) neg_sum += std::exp(static_cast<double>(v) * inv_tau - m);
      double loss = 0.0;
      for (T v : pos.data) {
        const double a = static_cast<double>(v) * inv_tau - m;
        loss += std::log(std::exp(a) + neg_sum) - a;
      }
      loss /= static_cast<double>(pos.size());
      return TensorData<T>::scalar(static_cast<T>(loss));
    }
    case Kernel::MaskedFeatureDistance: {
      arity(2);
      const auto& s = in(0);
      const auto& r = in(1);
      if (!same_shape(s.shape, r.shape))
        shape_fail(kind, "operand shapes differ: " + shape_str(s.shape) + " vs " +
                             shape_str(r.shape));
      const auto rc = last_dim_rows(kind, s);
      if (!attrs.mask.empty() && static_cast<std::int64_t>(attrs.mask.size()) != rc.rows)
        shape_fail(kind, "mask length " + std::to_string(attrs.mask.size()) +
                             " does not match " + std::to_string(rc.rows) + " pixels");
      std::int64_t count = 0;
      double total = 0.0;
      for (std::int64_t i = 0; i < rc.rows; ++i) {
        if (!attrs.mask.empty() && attrs.mask[static_cast<std::size_t>(i)] == 0) continue;
        ++count;
        double d2 = 0.0;
        for (int c = 0; c < rc.cols; ++c) {
          const double d = static_cast<double>(s.data[i * rc.cols + c]) -
                           static_cast<double>(r.data[i * rc.cols + c]);
          d2 += d * d;
        }
        total += std::sqrt(d2);
      }
      if (count == 0) fail(ErrorKind::EmptyInput, "masked-feature-distance mask selects no pixels");
      return TensorData<T>::scalar(static_cast<T>(total / static_cast<double>(count)));
    }
    case Kernel::OverlayAdd: {
      arity(2);
      const auto& base = in(0);
      const auto& patch = in(1);
      if (base.shape.size() != 3 || patch.shape.size() != 3 || base.shape[2] != patch.shape[2])
        shape_fail(kind, "needs HxWxC base and hxwxC patch, got " + shape_str(base.shape) +
                             " and " + shape_str(patch.shape));
      const int ph = patch.shape[0], pw = patch.shape[1], ch = base.shape[2];
      if (attrs.top < 0 || attrs.left < 0 || attrs.top + ph > base.shape[0] ||
          attrs.left + pw > base.shape[1])
        shape_fail(kind, "patch " + shape_str(patch.shape) + " at (" + std::to_string(attrs.top) +
                             "," + std::to_string(attrs.left) + ") exceeds base " +
                             shape_str(base.shape));
      TensorData<T> out = base;
      const T bw = static_cast<T>(attrs.base_weight);
      const T pwt = static_cast<T>(attrs.patch_weight);
      for (int y = 0; y < ph; ++y)
        for (int x = 0; x < pw; ++x) {
          T* o = out.data.data() +
                 (static_cast<std::size_t>(attrs.top + y) * base.shape[1] + attrs.left + x) * ch;
          const T* p = patch.data.data() + (static_cast<std::size_t>(y) * pw + x) * ch;
          for (int c = 0; c < ch; ++c) o[c] = bw * o[c] + pwt * p[c];
        }
      return out;
    }
  }
  fail(ErrorKind::UnknownKernel, "unhandled kernel");
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

template <typename T>
void Graph<T>::run_backward(const Node& node) {
  const Slot& out = slots_[static_cast<std::size_t>(node.output)];
  const std::vector<T>& g = out.grad;
  auto needs = [&](std::size_t i) {
    return slots_[static_cast<std::size_t>(node.inputs[i])].needs_grad;
  };
  auto in = [&](std::size_t i) -> const TensorData<T>& {
    return slots_[static_cast<std::size_t>(node.inputs[i])].value;
  };
  auto gin = [&](std::size_t i) -> std::vector<T>& { return ensure_grad(node.inputs[i]); };

  switch (node.kind) {
    case Kernel::Conv2d3x3: {
      const auto& x = in(0);
      const auto& w = in(1);
      const ConvDims d = conv_dims(x, w, in(2), node.attrs.stride);
      const int rows = d.oh * d.ow;
      const int k9 = 9 * d.cin;
      if (needs(2)) {
        std::vector<T>& db = gin(2);
        for (int r = 0; r < rows; ++r)
          for (int c = 0; c < d.cout; ++c) db[c] += g[static_cast<std::size_t>(r) * d.cout + c];
      }
      if (needs(1)) {
        const std::vector<T> p = im2col(x, d);
        gemm_tn_acc(rows, d.cout, k9, p.data(), g.data(), gin(1).data());
      }
      if (needs(0)) {
        std::vector<T> dp(static_cast<std::size_t>(rows) * k9);
        gemm_nt(rows, d.cout, k9, g.data(), w.data.data(), dp.data());
        col2im_acc(dp, d, gin(0).data());
      }
      break;
    }
    case Kernel::Dense:
    case Kernel::Matmul: {
      const auto& x = in(0);
      const auto& w = in(1);
      const int m = x.shape[0], k = x.shape[1], n = w.shape[1];
      if (node.kind == Kernel::Dense && needs(2)) {
        std::vector<T>& db = gin(2);
        for (int r = 0; r < m; ++r)
          for (int c = 0; c < n; ++c) db[c] += g[static_cast<std::size_t>(r) * n + c];
      }
      if (needs(1)) gemm_tn_acc(m, n, k, x.data.data(), g.data(), gin(1).data());
      if (needs(0)) {
        std::vector<T> dx(static_cast<std::size_t>(m) * k);
        gemm_nt(m, n, k, g.data(), w.data.data(), dx.data());
        std::vector<T>& dst = gin(0);
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += dx[i];
      }
      break;
    }
    case Kernel::Relu: {
      if (!needs(0)) break;
      const auto& x = in(0);
      std::vector<T>& dx = gin(0);
      for (std::size_t i = 0; i < dx.size(); ++i)
        if (x.data[i] > T(0)) dx[i] += g[i];
      break;
    }
    case Kernel::Add: {
      for (std::size_t s = 0; s < 2; ++s)
        if (needs(s)) {
          std::vector<T>& d = gin(s);
          for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i];
        }
      break;
    }
    case Kernel::Mul: {
      if (needs(0)) {
        const auto& b = in(1);
        std::vector<T>& da = gin(0);
        for (std::size_t i = 0; i < da.size(); ++i) da[i] += g[i] * b.data[i];
      }
      if (needs(1)) {
        const auto& a = in(0);
        std::vector<T>& db = gin(1);
        for (std::size_t i = 0; i < db.size(); ++i) db[i] += g[i] * a.data[i];
      }
      break;
    }
    case Kernel::Scale: {
      if (!needs(0)) break;
      const T c = static_cast<T>(node.attrs.scalar);
      std::vector<T>& dx = gin(0);
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += c * g[i];
      break;
    }
    case Kernel::ConcatChannels: {
      const int total = out.value.shape.back();
      const std::int64_t rows = out.value.size() / total;
      int offset = 0;
      for (std::size_t s = 0; s < node.inputs.size(); ++s) {
        const int c = in(s).shape.back();
        if (needs(s)) {
          std::vector<T>& d = gin(s);
          for (std::int64_t r = 0; r < rows; ++r)
            for (int j = 0; j < c; ++j) d[r * c + j] += g[r * total + offset + j];
        }
        offset += c;
      }
      break;
    }
    case Kernel::SoftmaxLast: {
      if (!needs(0)) break;
      const auto rc = last_dim_rows(node.kind, out.value);
      const std::vector<T>& y = out.value.data;
      std::vector<T>& dx = gin(0);
      for (std::int64_t r = 0; r < rc.rows; ++r) {
        double dot = 0.0;
        for (int c = 0; c < rc.cols; ++c)
          dot += static_cast<double>(g[r * rc.cols + c]) * y[r * rc.cols + c];
        for (int c = 0; c < rc.cols; ++c)
          dx[r * rc.cols + c] += y[r * rc.cols + c] *
                                 (g[r * rc.cols + c] - static_cast<T>(dot));
      }
      break;
    }
    case Kernel::Log: {
      if (!needs(0)) break;
      const auto& x = in(0);
      std::vector<T>& dx = gin(0);
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += g[i] / x.data[i];
      break;
    }
    case Kernel::Exp: {
      if (!needs(0)) break;
      const std::vector<T>& y = out.value.data;
      std::vector<T>& dx = gin(0);
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += g[i] * y[i];
      break;
    }
    case Kernel::ClampProbs: {
      if (!needs(0)) break;
      const auto& x = in(0);
      const T lo = static_cast<T>(1e-12);
      const T hi = static_cast<T>(1.0 - 1e-12);
      std::vector<T>& dx = gin(0);
      for (std::size_t i = 0; i < dx.size(); ++i)
        if (x.data[i] >= lo && x.data[i] <= hi) dx[i] += g[i];
      break;
    }
    case Kernel::L2NormalizeLast: {
      if (!needs(0)) break;
      const auto& x = in(0);
      const auto rc = last_dim_rows(node.kind, x);
      std::vector<T>& dx = gin(0);
      for (std::int64_t r = 0; r < rc.rows; ++r) {
        const T* v = x.data.data() + r * rc.cols;
        const T* gr = g.data() + r * rc.cols;
        double s = 0.0, dot = 0.0;
        for (int c = 0; c < rc.cols; ++c) {
          s += static_cast<double>(v[c]) * v[c];
          dot += static_cast<double>(gr[c]) * v[c];
        }
        const double n2 = s + 1e-30;
        const double inv = 1.0 / std::sqrt(n2);
        const double inv3 = inv / n2;
        for (int c = 0; c < rc.cols; ++c)
          dx[r * rc.cols + c] += static_cast<T>(gr[c] * inv - v[c] * dot * inv3);
      }
      break;
    }
    case Kernel::BilinearResize: {
      if (!needs(0)) break;
      const auto& x = in(0);
      const int h = x.shape[0], w = x.shape[1], ch = x.shape[2];
      const int oh = out.value.shape[0], ow = out.value.shape[1];
      std::vector<T>& dx = gin(0);
      if (oh == h && ow == w) {
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += g[i];
        break;
      }
      for (int oy = 0; oy < oh; ++oy) {
        const ResizeTap ty = resize_tap(oy, h, oh);
        for (int ox = 0; ox < ow; ++ox) {
          const ResizeTap tx = resize_tap(ox, w, ow);
          const double w00 = (1.0 - ty.w_hi) * (1.0 - tx.w_hi);
          const double w01 = (1.0 - ty.w_hi) * tx.w_hi;
          const double w10 = ty.w_hi * (1.0 - tx.w_hi);
          const double w11 = ty.w_hi * tx.w_hi;
          const T* go = g.data() + (static_cast<std::size_t>(oy) * ow + ox) * ch;
          for (int c = 0; c < ch; ++c) {
            dx[(static_cast<std::size_t>(ty.lo) * w + tx.lo) * ch + c] += static_cast<T>(w00 * go[c]);
            dx[(static_cast<std::size_t>(ty.lo) * w + tx.hi) * ch + c] += static_cast<T>(w01 * go[c]);
            dx[(static_cast<std::size_t>(ty.hi) * w + tx.lo) * ch + c] += static_cast<T>(w10 * go[c]);
            dx[(static_cast<std::size_t>(ty.hi) * w + tx.hi) * ch + c] += static_cast<T>(w11 * go[c]);
          }
        }
      }
      break;
    }
    case Kernel::MeanAll:
    case Kernel::SumAll: {
      if (!needs(0)) break;
      const auto& x = in(0);
      const T g0 = g[0];
      const T per = node.kind == Kernel::MeanAll
                        ? static_cast<T>(static_cast<double>(g0) / static_cast<double>(x.size()))
                        : g0;
      std::vector<T>& dx = gin(0);
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += per;
      break;
    }
    case Kernel::GatherRows: {
      if (!needs(0)) break;
      const auto& x = in(0);
      const std::int64_t row = x.size() / std::max(x.shape[0], 1);
      std::vector<T>& dx = gin(0);
      for (std::size_t i = 0; i < node.attrs.indices.size(); ++i) {
        const int idx = node.attrs.indices[i];
        for (std::int64_t c = 0; c < row; ++c)
          dx[idx * row + c] += g[static_cast<std::int64_t>(i) * row + c];
      }
      break;
    }
    case Kernel::Sigmoid: {
      if (!needs(0)) break;
      const std::vector<T>& y = out.value.data;
      std::vector<T>& dx = gin(0);
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += g[i] * y[i] * (T(1) - y[i]);
      break;
    }
    case Kernel::MaxPool2x2: {
      if (!needs(0)) break;
      const auto& x = in(0);
      const int h = x.shape[0], w = x.shape[1], ch = x.shape[2];
      std::vector<T>& dx = gin(0);
      for (int oy = 0; oy < h / 2; ++oy)
        for (int ox = 0; ox < w / 2; ++ox)
          for (int c = 0; c < ch; ++c) {
            // First strict maximum in scan order, matching the forward pass.
            int by = 0, bx = 0;
            T best = x.data[(static_cast<std::size_t>(2 * oy) * w + 2 * ox) * ch + c];
            for (int dy = 0; dy < 2; ++dy)
              for (int dxx = 0; dxx < 2; ++dxx) {
                const T v =
                    x.data[(static_cast<std::size_t>(2 * oy + dy) * w + 2 * ox + dxx) * ch + c];
                if (v > best) {
                  best = v;
                  by = dy;
                  bx = dxx;
                }
              }
            dx[(static_cast<std::size_t>(2 * oy + by) * w + 2 * ox + bx) * ch + c] +=
                g[(static_cast<std::size_t>(oy) * (w / 2) + ox) * ch + c];
          }
      break;
    }
    case Kernel::Reshape: {
      if (!needs(0)) break;
      std::vector<T>& dx = gin(0);
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += g[i];
      break;
    }
    case Kernel::NceFromSims: {
      const auto& pos = in(0);
      const auto& neg = in(1);
      const double inv_tau = 1.0 / node.attrs.tau;
      const double gp = static_cast<double>(g[0]) / static_cast<double>(pos.size());
      double m = static_cast<double>(pos.data[0]) * inv_tau;
      for (T v : pos.data) m = std::max(m, static_cast<double>(v) * inv_tau);
      for (T v : neg.data) m = std::max(m, static_cast<double>(v) * inv_tau);
      double neg_sum = 0.0;
      std::vector<double> en(neg.data.size());
      for (std::size_t k = 0; k < neg.data.size(); ++k) {
        en[k] = std::exp(static_cast<double>(neg.data[k]) * inv_tau - m);
        neg_sum += en[k];
      }
      double inv_denom_sum = 0.0;
      if (needs(0)) {
        std::vector<T>& dp = gin(0);
        for (std::size_t j = 0; j < pos.data.size(); ++j) {
          const double ea = std::exp(static_cast<double>(pos.data[j]) * inv_tau - m);
          const double denom = ea + neg_sum;
          inv_denom_sum += 1.0 / denom;
          dp[j] += static_cast<T>(gp * inv_tau * (ea / denom - 1.0));
        }
      } else if (needs(1)) {
        for (std::size_t j = 0; j < pos.data.size(); ++j) {
          const double ea = std::exp(static_cast<double>(pos.data[j]) * inv_tau - m);
          inv_denom_sum += 1.0 / (ea + neg_sum);
        }
      }
      if (needs(1)) {
        std::vector<T>& dn = gin(1);
        for (std::size_t k = 0; k < neg.data.size(); ++k)
          dn[k] += static_cast<T>(gp * inv_tau * en[k] * inv_denom_sum);
      }
      break;
    }
    case Kernel::MaskedFeatureDistance: {
      if (!needs(0) && !needs(1)) break;
      const auto& s = in(0);
      const auto& r = in(1);
      const auto rc = last_dim_rows(node.kind, s);
      std::int64_t count = 0;
      for (std::int64_t i = 0; i < rc.rows; ++i)
        if (node.attrs.mask.empty() || node.attrs.mask[static_cast<std::size_t>(i)] != 0) ++count;
      const double g0 = static_cast<double>(g[0]) / static_cast<double>(count);
      for (std::int64_t i = 0; i < rc.rows; ++i) {
        if (!node.attrs.mask.empty() && node.attrs.mask[static_cast<std::size_t>(i)] == 0) continue;
        double d2 = 0.0;
        for (int c = 0; c < rc.cols; ++c) {
          const double d = static_cast<double>(s.data[i * rc.cols + c]) -
                           static_cast<double>(r.data[i * rc.cols + c]);
          d2 += d * d;
        }
        const double norm = std::sqrt(d2);
        if (norm == 0.0) continue;  // subgradient 0 at coincident features
        for (int c = 0; c < rc.cols; ++c) {
          const double d = static_cast<double>(s.data[i * rc.cols + c]) -
                           static_cast<double>(r.data[i * rc.cols + c]);
          const T dv = static_cast<T>(g0 * d / norm);
          if (needs(0)) gin(0)[i * rc.cols + c] += dv;
          if (needs(1)) gin(1)[i * rc.cols + c] -= dv;
        }
      }
      break;
    }
    case Kernel::OverlayAdd: {
      const auto& base = in(0);
      const auto& patch = in(1);
      const int bw_cols = base.shape[1], ch = base.shape[2];
      const int ph = patch.shape[0], pw = patch.shape[1];
      const T bwt = static_cast<T>(node.attrs.base_weight);
      const T pwt = static_cast<T>(node.attrs.patch_weight);
      if (needs(0)) {
        std::vector<T>& db = gin(0);
        for (std::size_t i = 0; i < db.size(); ++i) db[i] += g[i];
        // region contributions were scaled by base_weight
        for (int y = 0; y < ph; ++y)
          for (int x = 0; x < pw; ++x) {
            const std::size_t o =
                (static_cast<std::size_t>(node.attrs.top + y) * bw_cols + node.attrs.left + x) * ch;
            for (int c = 0; c < ch; ++c) db[o + c] += (bwt - T(1)) * g[o + c];
          }
      }
      if (needs(1)) {
        std::vector<T>& dp = gin(1);
        for (int y = 0; y < ph; ++y)
          for (int x = 0; x < pw; ++x) {
            const std::size_t o =
                (static_cast<std::size_t>(node.attrs.top + y) * bw_cols + node.attrs.left + x) * ch;
            const std::size_t q = (static_cast<std::size_t>(y) * pw + x) * ch;
            for (int c = 0; c < ch; ++c) dp[q + c] += pwt * g[o + c];
          }
      }
      break;
    }
  }
}

template <typename T>
void Graph<T>::backward(Ref<T> loss) {
  if (!recording_ || nodes_.empty())
    fail(ErrorKind::NoRecord, "backward without a recorded forward computation");
  if (consumed_) fail(ErrorKind::RecordConsumed, "backward already consumed this record");
  const Slot& ls = slot(loss);
  if (ls.value.size() != 1)
    fail(ErrorKind::NonScalarLoss,
         "backward needs a scalar loss, got shape " + shape_str(ls.value.shape));
  if (ls.producer < 0)
    fail(ErrorKind::NoRecord, "loss value was not produced by a recorded computation");
  consumed_ = true;
  ensure_grad(loss.id)[0] = T(1);
  for (std::size_t i = nodes_.size(); i-- > 0;) {
    const Node& node = nodes_[i];
    if (!slots_[static_cast<std::size_t>(node.output)].grad_present) continue;
    run_backward(node);
  }
}

// ---------------------------------------------------------------------------
// Typed wrappers
// ---------------------------------------------------------------------------

template <typename T>
Ref<T> Graph<T>::conv2d3x3(Ref<T> x, Ref<T> w, Ref<T> b, int stride) {
  KernelAttrs a;
  a.stride = stride;
  return apply(Kernel::Conv2d3x3, {x, w, b}, a);
}

template <typename T>
Ref<T> Graph<T>::dense(Ref<T> x, Ref<T> w, Ref<T> b) {
  return apply(Kernel::Dense, {x, w, b});
}

template <typename T>
Ref<T> Graph<T>::matmul(Ref<T> a, Ref<T> b) {
  return apply(Kernel::Matmul, {a, b});
}

template <typename T>
Ref<T> Graph<T>::scale(Ref<T> x, double c) {
  KernelAttrs a;
  a.scalar = c;
  return apply(Kernel::Scale, {x}, a);
}

template <typename T>
Ref<T> Graph<T>::bilinear_resize(Ref<T> x, int out_h, int out_w) {
  KernelAttrs a;
  a.out_h = out_h;
  a.out_w = out_w;
  return apply(Kernel::BilinearResize, {x}, a);
}

template <typename T>
Ref<T> Graph<T>::gather_rows(Ref<T> x, std::vector<int> indices) {
  KernelAttrs a;
  a.indices = std::move(indices);
  return apply(Kernel::GatherRows, {x}, a);
}

template <typename T>
Ref<T> Graph<T>::reshape(Ref<T> x, Shape target) {
  KernelAttrs a;
  a.target_shape = std::move(target);
  return apply(Kernel::Reshape, {x}, a);
}

template <typename T>
Ref<T> Graph<T>::nce_from_sims(Ref<T> pos_sims, Ref<T> neg_sims, double tau) {
  KernelAttrs a;
  a.tau = tau;
  return apply(Kernel::NceFromSims, {pos_sims, neg_sims}, a);
}

template <typename T>
Ref<T> Graph<T>::masked_feature_distance(Ref<T> student, Ref<T> reference,
                                         std::vector<std::uint8_t> mask) {
  KernelAttrs a;
  a.mask = std::move(mask);
  return apply(Kernel::MaskedFeatureDistance, {student, reference}, a);
}

template <typename T>
Ref<T> Graph<T>::overlay_add(Ref<T> base, Ref<T> patch, int top, int left, double base_weight,
                             double patch_weight) {
  KernelAttrs a;
  a.top = top;
  a.left = left;
  a.base_weight = base_weight;
  a.patch_weight = patch_weight;
  return apply(Kernel::OverlayAdd, {base, patch}, a);
}

template class Graph<float>;
template class Graph<double>;

}  // namespace cluda
