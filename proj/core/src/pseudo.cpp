#include "cluda/pseudo.hpp"

#include "cluda/error.hpp"

namespace cluda {

PseudoLabel pseudo_label_from_probs(const TensorF& probs) {
  if (probs.shape.size() != 3) fail(ErrorKind::ShapeMismatch, "probs must be HxWxC");
  const int h = probs.shape[0], w = probs.shape[1], classes = probs.shape[2];
  PseudoLabel out;
  out.labels = LabelMap(h, w);
  out.confidence = TensorF::zeros({h, w});
  for (int i = 0; i < h * w; ++i) {
    const float* row = probs.data.data() + static_cast<std::size_t>(i) * classes;
    int best = 0;
    for (int c = 1; c < classes; ++c)
      if (row[c] > row[best]) best = c;  // strict >: ties keep the lowest id
    out.labels.v[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(best);
    out.confidence.data[static_cast<std::size_t>(i)] = row[best];
  }
  return out;
}

TensorF model_logits(const ModelParams<float>& params, const TensorF& image) {
  Graph<float> g(/*recording=*/false);
  ParamRefs<float> p = bind_params(g, params, /*requires_grad=*/false);
  Ref<float> img = g.constant(image);
  ModelOutputs<float> out = forward_model(g, img, p, params.config, /*with_logits=*/true);
  return g.value(out.logits);
}

TensorF model_fused(const ModelParams<float>& params, const TensorF& image) {
  Graph<float> g(/*recording=*/false);
  ParamRefs<float> p = bind_params(g, params, /*requires_grad=*/false);
  Ref<float> img = g.constant(image);
  ModelOutputs<float> out = forward_model(g, img, p, params.config, /*with_logits=*/false);
  return g.value(out.fused.features);
}

TensorF model_probs(const ModelParams<float>& params, const TensorF& image) {
  Graph<float> g(/*recording=*/false);
  ParamRefs<float> p = bind_params(g, params, /*requires_grad=*/false);
  Ref<float> img = g.constant(image);
  ModelOutputs<float> out = forward_model(g, img, p, params.config, /*with_logits=*/true);
  return g.value(g.softmax_last(out.logits));
}

PseudoLabel pseudo_label(const ModelParams<float>& teacher, const TensorF& image) {
  return pseudo_label_from_probs(model_probs(teacher, image));
}

}  // namespace cluda
