#include "cluda/network.hpp"

#include <cmath>

#include "cluda/error.hpp"
#include "cluda/rng.hpp"

namespace cluda {

void ModelConfig::validate() const {
  if (in_channels < 1) fail(ErrorKind::InvalidArgument, "in_channels must be positive");
  for (int c : stage_channels)
    if (c < 1) fail(ErrorKind::InvalidArgument, "stage channels must be positive");
  if (embed_dim < 1) fail(ErrorKind::InvalidArgument, "embed_dim must be positive");
  if (num_classes < 2) fail(ErrorKind::InvalidArgument, "num_classes must be at least 2");
  if (cl_grid_h < 1 || cl_grid_w < 1) fail(ErrorKind::InvalidArgument, "cl grid must be positive");
}

namespace {

template <typename T>
TensorData<T> uniform_init(Shape shape, int fan_in, Rng& rng) {
  const double bound = std::sqrt(1.0 / fan_in);
  TensorData<T> t = TensorData<T>::zeros(std::move(shape));
  for (T& v : t.data) v = static_cast<T>(rng.uniform(-bound, bound));
  return t;
}

}  // namespace

template <typename T>
ModelParams<T> ModelParams<T>::seeded_init(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  ModelParams<T> p;
  p.config = config;
  std::uint64_t stream = 0;
  auto next_rng = [&] { return Rng(Rng::derive(seed, stream++)); };
  auto weight = [&](const std::string& name, Shape shape, int fan_in) {
    Rng rng = next_rng();
    p.tensors.emplace(name, uniform_init<T>(std::move(shape), fan_in, rng));
  };
  auto bias = [&](const std::string& name, int n) {
    p.tensors.emplace(name, TensorData<T>::zeros({n}));
  };

  int cin = config.in_channels;
  for (int s = 0; s < 4; ++s) {
    const int cout = config.stage_channels[static_cast<std::size_t>(s)];
    const std::string base = "encoder.stage" + std::to_string(s + 1);
    weight(base + ".conv1.weight", {3, 3, cin, cout}, 9 * cin);
    bias(base + ".conv1.bias", cout);
    weight(base + ".conv2.weight", {3, 3, cout, cout}, 9 * cout);
    bias(base + ".conv2.bias", cout);
    cin = cout;
  }
  const int e = config.embed_dim;
  for (int s = 0; s < 4; ++s) {
    const int c = config.stage_channels[static_cast<std::size_t>(s)];
    const std::string base = "decoder.fuse.proj" + std::to_string(s + 1);
    weight(base + ".weight", {c, e}, c);
    bias(base + ".bias", e);
  }
  weight("decoder.fuse.mix.weight", {3, 3, 4 * e, e}, 9 * 4 * e);
  bias("decoder.fuse.mix.bias", e);
  weight("decoder.classifier.weight", {e, config.num_classes}, e);
  bias("decoder.classifier.bias", config.num_classes);
  weight("decoder.weight_head.weight", {e, 1}, e);
  bias("decoder.weight_head.bias", 1);
  return p;
}

template <typename T>
bool ModelParams<T>::same_structure(const ModelParams& other) const {
  if (tensors.size() != other.tensors.size()) return false;
  auto a = tensors.begin();
  auto b = other.tensors.begin();
  for (; a != tensors.end(); ++a, ++b)
    if (a->first != b->first || !same_shape(a->second.shape, b->second.shape)) return false;
  return true;
}

template <typename T>
Ref<T> ParamRefs<T>::at(const std::string& name) const {
  auto it = refs.find(name);
  if (it == refs.end()) fail(ErrorKind::InvalidArgument, "unknown parameter '" + name + "'");
  return it->second;
}

template <typename T>
ParamRefs<T> bind_params(Graph<T>& g, const ModelParams<T>& params, bool requires_grad) {
  ParamRefs<T> out;
  for (const auto& [name, tensor] : params.tensors)
    out.refs.emplace(name, g.leaf(tensor, requires_grad, name));
  return out;
}

template <typename T>
std::vector<Ref<T>> encode(Graph<T>& g, Ref<T> image, const ParamRefs<T>& p,
                           const ModelConfig& cfg) {
  const Shape& s = g.value(image).shape;
  if (s.size() != 3 || s[2] != cfg.in_channels)
    fail(ErrorKind::ShapeMismatch, "encode expects HxWx" + std::to_string(cfg.in_channels) +
                                       " input, got " + shape_str(s));
  if (s[0] % 16 != 0 || s[1] % 16 != 0)
    fail(ErrorKind::ShapeMismatch,
         "encode needs H,W divisible by 16, got " + shape_str(s));
  std::vector<Ref<T>> stages;
  Ref<T> x = image;
  for (int st = 0; st < 4; ++st) {
    const std::string base = "encoder.stage" + std::to_string(st + 1);
    x = g.relu(g.conv2d3x3(x, p.at(base + ".conv1.weight"), p.at(base + ".conv1.bias"), 1));
    x = g.relu(g.conv2d3x3(x, p.at(base + ".conv2.weight"), p.at(base + ".conv2.bias"), 2));
    stages.push_back(x);
  }
  return stages;
}

namespace {

// 1x1 projection as a dense layer over flattened pixels.
template <typename T>
Ref<T> project_pixels(Graph<T>& g, Ref<T> map, Ref<T> w, Ref<T> b) {
  const Shape s = g.value(map).shape;
  const Shape ws = g.value(w).shape;
  if (s.size() != 3 || ws.size() != 2 || s[2] != ws[0])
    fail(ErrorKind::ShapeMismatch, "projection channels " + shape_str(ws) +
                                       " do not match feature map " + shape_str(s));
  Ref<T> flat = g.reshape(map, {s[0] * s[1], s[2]});
  Ref<T> out = g.dense(flat, w, b);
  return g.reshape(out, {s[0], s[1], ws[1]});
}

}  // namespace

template <typename T>
FusedMap<T> fuse(Graph<T>& g, const std::vector<Ref<T>>& stages, const ParamRefs<T>& p,
                 const ModelConfig& cfg) {
  if (stages.size() != 4) fail(ErrorKind::ShapeMismatch, "fuse expects 4 encoder stages");
  const Shape& s2 = g.value(stages[1]).shape;  // stride-4 grid
  const int gh = s2[0], gw = s2[1];
  std::vector<Ref<T>> aligned;
  for (int st = 0; st < 4; ++st) {
    const std::string base = "decoder.fuse.proj" + std::to_string(st + 1);
    Ref<T> proj = project_pixels(g, stages[static_cast<std::size_t>(st)], p.at(base + ".weight"),
                                 p.at(base + ".bias"));
    aligned.push_back(g.bilinear_resize(proj, gh, gw));
  }
  Ref<T> cat = g.concat_channels(aligned);
  Ref<T> mixed =
      g.conv2d3x3(cat, p.at("decoder.fuse.mix.weight"), p.at("decoder.fuse.mix.bias"), 1);
  FusedMap<T> out;
  out.features = mixed;
  out.mu = 4;
  out.grid_h = gh;
  out.grid_w = gw;
  return out;
}

template <typename T>
FusedMap<T> resize_for_cl(Graph<T>& g, const FusedMap<T>& fused, const ModelConfig& cfg) {
  FusedMap<T> out = fused;
  out.features = g.bilinear_resize(fused.features, cfg.cl_grid_h, cfg.cl_grid_w);
  out.grid_h = cfg.cl_grid_h;
  out.grid_w = cfg.cl_grid_w;
  return out;
}

template <typename T>
Ref<T> classify(Graph<T>& g, const FusedMap<T>& fused, const ParamRefs<T>& p,
                const ModelConfig& cfg, int out_h, int out_w) {
  Ref<T> logits = project_pixels(g, fused.features, p.at("decoder.classifier.weight"),
                                 p.at("decoder.classifier.bias"));
  return g.bilinear_resize(logits, out_h, out_w);
}

template <typename T>
Ref<T> predict_weight_map(Graph<T>& g, const FusedMap<T>& fused_cl, const ParamRefs<T>& p,
                          const ModelConfig& cfg) {
  Ref<T> raw = project_pixels(g, fused_cl.features, p.at("decoder.weight_head.weight"),
                              p.at("decoder.weight_head.bias"));
  return g.sigmoid(raw);
}

template <typename T>
ModelOutputs<T> forward_model(Graph<T>& g, Ref<T> image, const ParamRefs<T>& p,
                              const ModelConfig& cfg, bool with_logits) {
  ModelOutputs<T> out;
  out.stages = encode(g, image, p, cfg);
  out.fused = fuse(g, out.stages, p, cfg);
  out.fused_cl = resize_for_cl(g, out.fused, cfg);
  if (with_logits) {
    const Shape& s = g.value(image).shape;
    out.logits = classify(g, out.fused, p, cfg, s[0], s[1]);
  }
  return out;
}

template struct ModelParams<float>;
template struct ModelParams<double>;
template struct ParamRefs<float>;
template struct ParamRefs<double>;
template ModelParams<double> ModelParams<float>::cast<double>() const;
template ModelParams<float> ModelParams<double>::cast<float>() const;

template ParamRefs<float> bind_params(Graph<float>&, const ModelParams<float>&, bool);
template ParamRefs<double> bind_params(Graph<double>&, const ModelParams<double>&, bool);
template std::vector<Ref<float>> encode(Graph<float>&, Ref<float>, const ParamRefs<float>&,
                                        const ModelConfig&);
template std::vector<Ref<double>> encode(Graph<double>&, Ref<double>, const ParamRefs<double>&,
                                         const ModelConfig&);
template FusedMap<float> fuse(Graph<float>&, const std::vector<Ref<float>>&,
                              const ParamRefs<float>&, const ModelConfig&);
template FusedMap<double> fuse(Graph<double>&, const std::vector<Ref<double>>&,
                               const ParamRefs<double>&, const ModelConfig&);
template FusedMap<float> resize_for_cl(Graph<float>&, const FusedMap<float>&, const ModelConfig&);
template FusedMap<double> resize_for_cl(Graph<double>&, const FusedMap<double>&,
                                        const ModelConfig&);
template Ref<float> classify(Graph<float>&, const FusedMap<float>&, const ParamRefs<float>&,
                             const ModelConfig&, int, int);
template Ref<double> classify(Graph<double>&, const FusedMap<double>&, const ParamRefs<double>&,
                              const ModelConfig&, int, int);
template Ref<float> predict_weight_map(Graph<float>&, const FusedMap<float>&,
                                       const ParamRefs<float>&, const ModelConfig&);
template Ref<double> predict_weight_map(Graph<double>&, const FusedMap<double>&,
                                        const ParamRefs<double>&, const ModelConfig&);
template ModelOutputs<float> forward_model(Graph<float>&, Ref<float>, const ParamRefs<float>&,
                                           const ModelConfig&, bool);
template ModelOutputs<double> forward_model(Graph<double>&, Ref<double>, const ParamRefs<double>&,
                                            const ModelConfig&, bool);

}  // namespace cluda
