#pragma once

#include <cstdint>
#include <deque>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "cluda/tensor.hpp"

namespace cluda {

// The fixed kernel catalog. Forward math and the matching backward rule for
// every kind live in graph.cpp; anything differentiable in the project is
// composed from these.
enum class Kernel {
  Conv2d3x3,
  Dense,
  Matmul,
  Relu,
  Add,
  Mul,
  Scale,
  ConcatChannels,
  SoftmaxLast,
  Log,
  Exp,
  ClampProbs,
  L2NormalizeLast,
  BilinearResize,
  MeanAll,
  SumAll,
  GatherRows,
  Sigmoid,
  MaxPool2x2,
  Reshape,
  NceFromSims,
  MaskedFeatureDistance,
  OverlayAdd,
};

Kernel kernel_from_string(std::string_view id);
std::string_view kernel_name(Kernel kind);
const std::vector<Kernel>& kernel_catalog();

struct KernelAttrs {
  int stride = 1;                  // conv2d3x3: 1 or 2
  int out_h = 0;                   // bilinear_resize
  int out_w = 0;
  double scalar = 1.0;             // scale
  double tau = 0.1;                // nce_from_sims temperature
  Shape target_shape;              // reshape
  std::vector<int> indices;        // gather_rows
  std::vector<std::uint8_t> mask;  // masked_feature_distance; empty = all rows
  int top = 0;                     // overlay_add placement
  int left = 0;
  double base_weight = 0.5;        // overlay_add blend inside the patch region
  double patch_weight = 0.5;
};

template <typename T>
struct Ref {
  int id = -1;
  bool valid() const { return id >= 0; }
};

// A recorded computation: leaves plus an append-ordered node list (appending
// keeps the record topologically sorted). backward() replays the record in
// reverse exactly once; a record is single-consumption.
template <typename T>
class Graph {
 public:
  explicit Graph(bool recording = true) : recording_(recording) {}

  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Ref<T> leaf(TensorData<T> value, bool requires_grad = false, std::string name = {});
  Ref<T> constant(TensorData<T> value) { return leaf(std::move(value), false); }

  Ref<T> apply(Kernel kind, const std::vector<Ref<T>>& inputs, const KernelAttrs& attrs = {});
  Ref<T> apply(std::string_view kernel_id, const std::vector<Ref<T>>& inputs,
               const KernelAttrs& attrs = {});

  Ref<T> conv2d3x3(Ref<T> x, Ref<T> w, Ref<T> b, int stride = 1);
  Ref<T> dense(Ref<T> x, Ref<T> w, Ref<T> b);
  Ref<T> matmul(Ref<T> a, Ref<T> b);
  Ref<T> relu(Ref<T> x) { return apply(Kernel::Relu, {x}); }
  Ref<T> add(Ref<T> a, Ref<T> b) { return apply(Kernel::Add, {a, b}); }
  Ref<T> mul(Ref<T> a, Ref<T> b) { return apply(Kernel::Mul, {a, b}); }
  Ref<T> scale(Ref<T> x, double c);
  Ref<T> concat_channels(const std::vector<Ref<T>>& xs) { return apply(Kernel::ConcatChannels, xs); }
  Ref<T> softmax_last(Ref<T> x) { return apply(Kernel::SoftmaxLast, {x}); }
  Ref<T> log(Ref<T> x) { return apply(Kernel::Log, {x}); }
  Ref<T> exp(Ref<T> x) { return apply(Kernel::Exp, {x}); }
  Ref<T> clamp_probs(Ref<T> x) { return apply(Kernel::ClampProbs, {x}); }
  Ref<T> l2_normalize_last(Ref<T> x) { return apply(Kernel::L2NormalizeLast, {x}); }
  Ref<T> bilinear_resize(Ref<T> x, int out_h, int out_w);
  Ref<T> mean_all(Ref<T> x) { return apply(Kernel::MeanAll, {x}); }
  Ref<T> sum_all(Ref<T> x) { return apply(Kernel::SumAll, {x}); }
  Ref<T> gather_rows(Ref<T> x, std::vector<int> indices);
  Ref<T> sigmoid(Ref<T> x) { return apply(Kernel::Sigmoid, {x}); }
  Ref<T> maxpool2x2(Ref<T> x) { return apply(Kernel::MaxPool2x2, {x}); }
  Ref<T> reshape(Ref<T> x, Shape target);
  Ref<T> nce_from_sims(Ref<T> pos_sims, Ref<T> neg_sims, double tau);
  Ref<T> masked_feature_distance(Ref<T> student, Ref<T> reference, std::vector<std::uint8_t> mask);
  Ref<T> overlay_add(Ref<T> base, Ref<T> patch, int top, int left, double base_weight,
                     double patch_weight);

  // Reverse-mode sweep from a scalar loss. Fills grad buffers of every
  // requires_grad leaf and marks the record consumed.
  void backward(Ref<T> loss);

  const TensorData<T>& value(Ref<T> r) const;
  bool has_grad(Ref<T> r) const;
  const std::vector<T>& grad(Ref<T> r) const;
  TensorData<T> grad_tensor(Ref<T> r) const;

  // Gradients of all named requires_grad leaves, keyed by leaf name.
  std::map<std::string, TensorData<T>> named_gradients() const;

  bool recording() const { return recording_; }
  bool consumed() const { return consumed_; }
  std::size_t node_count() const { return nodes_.size(); }
  std::size_t value_count() const { return slots_.size(); }

  // NaN/Inf detection after every forward op; on by default.
  void set_check_finite(bool check) { check_finite_ = check; }

 private:
  struct Slot {
    TensorData<T> value;
    std::vector<T> grad;
    bool requires_grad = false;
    bool needs_grad = false;
    bool grad_present = false;
    int producer = -1;
    std::string name;
  };
  struct Node {
    Kernel kind;
    std::vector<int> inputs;
    int output = -1;
    KernelAttrs attrs;
  };

  const Slot& slot(Ref<T> r) const;
  Slot& slot(Ref<T> r);
  std::vector<T>& ensure_grad(int id);
  void accumulate(int id, const std::vector<T>& g);
  TensorData<T> run_forward(Kernel kind, const std::vector<int>& inputs,
                            const KernelAttrs& attrs) const;
  void run_backward(const Node& node);

  // Deques keep references to values/grads stable while new ops append.
  std::deque<Slot> slots_;
  std::deque<Node> nodes_;
  bool recording_ = true;
  bool consumed_ = false;
  bool check_finite_ = true;
};

extern template class Graph<float>;
extern template class Graph<double>;

}  // namespace cluda
