#pragma once

#include <array>
#include <map>
#include <string>
#include <vector>

#include "cluda/graph.hpp"
#include "cluda/tensor.hpp"

namespace cluda {

// Student/teacher architecture: a 4-stage strided conv encoder producing
// hierarchical feature maps, a fusion block that aligns and mixes them into
// one embedding map, a pixel classifier, and the scalar weight head used by
// multi-resolution contrastive training.
struct ModelConfig {
  int in_channels = 3;
  std::array<int, 4> stage_channels{32, 64, 128, 256};
  int embed_dim = 512;
  int num_classes = 8;
  int cl_grid_h = 16;
  int cl_grid_w = 16;

  void validate() const;
};

template <typename T>
struct ModelParams {
  ModelConfig config;
  std::map<std::string, TensorData<T>> tensors;

  static ModelParams seeded_init(const ModelConfig& config, std::uint64_t seed);

  template <typename U>
  ModelParams<U> cast() const {
    ModelParams<U> out;
    out.config = config;
    for (const auto& [name, t] : tensors) out.tensors.emplace(name, t.template cast<U>());
    return out;
  }

  bool same_structure(const ModelParams& other) const;
};

using ModelParamsF = ModelParams<float>;

// Leaf references for one forward pass over a graph.
template <typename T>
struct ParamRefs {
  std::map<std::string, Ref<T>> refs;

  Ref<T> at(const std::string& name) const;
};

template <typename T>
ParamRefs<T> bind_params(Graph<T>& g, const ModelParams<T>& params, bool requires_grad);

template <typename T>
struct FusedMap {
  Ref<T> features;  // grid_h x grid_w x embed_dim
  int mu = 4;       // image-to-grid downscale factor
  int grid_h = 0;
  int grid_w = 0;

  int pixel_count() const { return grid_h * grid_w; }  // the normalizer A
};

// Four feature maps at strides 2,4,8,16; H and W must be divisible by 16.
template <typename T>
std::vector<Ref<T>> encode(Graph<T>& g, Ref<T> image, const ParamRefs<T>& p,
                           const ModelConfig& cfg);

// Projects every level to embed_dim, resizes to the stride-4 grid,
// concatenates and mixes with a 3x3 conv.
template <typename T>
FusedMap<T> fuse(Graph<T>& g, const std::vector<Ref<T>>& stages, const ParamRefs<T>& p,
                 const ModelConfig& cfg);

// Bilinear resize of the fused map onto the contrastive-learning grid.
template <typename T>
FusedMap<T> resize_for_cl(Graph<T>& g, const FusedMap<T>& fused, const ModelConfig& cfg);

// Per-pixel class logits on the fused grid, upsampled to out_h x out_w.
template <typename T>
Ref<T> classify(Graph<T>& g, const FusedMap<T>& fused, const ParamRefs<T>& p,
                const ModelConfig& cfg, int out_h, int out_w);

// Sigmoid-activated single-channel map on the CL grid.
template <typename T>
Ref<T> predict_weight_map(Graph<T>& g, const FusedMap<T>& fused_cl, const ParamRefs<T>& p,
                          const ModelConfig& cfg);

template <typename T>
struct ModelOutputs {
  std::vector<Ref<T>> stages;
  FusedMap<T> fused;     // stride-4 grid
  FusedMap<T> fused_cl;  // CL grid
  Ref<T> logits;         // full resolution
};

template <typename T>
ModelOutputs<T> forward_model(Graph<T>& g, Ref<T> image, const ParamRefs<T>& p,
                              const ModelConfig& cfg, bool with_logits = true);

}  // namespace cluda
