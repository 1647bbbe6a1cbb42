#include "cluda/check_suites.hpp"

#include <algorithm>
#include <cmath>
#include <functional>

#include "cluda/engine.hpp"
#include "cluda/grad_check.hpp"
#include "cluda/graph.hpp"
#include "cluda/losses.hpp"
#include "cluda/metrics.hpp"
#include "cluda/oracle.hpp"
#include "cluda/rng.hpp"

namespace cluda {

bool all_pass(const std::vector<CheckResult>& results) {
  for (const CheckResult& r : results)
    if (!r.pass) return false;
  return true;
}

namespace {

constexpr double kEps = 1e-5;
constexpr double kGradTol = 1e-5;

TensorD rand_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  TensorD t = TensorD::zeros(std::move(shape));
  for (double& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

// Rows get a norm floor so l2-normalization stays well-conditioned for
// finite differences.
TensorD rand_features(int rows, int cols, Rng& rng) {
  TensorD t = rand_tensor({rows, cols}, rng);
  for (int r = 0; r < rows; ++r) {
    double n2 = 0.0;
    for (int c = 0; c < cols; ++c) n2 += t.data[static_cast<std::size_t>(r) * cols + c] *
                                         t.data[static_cast<std::size_t>(r) * cols + c];
    if (n2 < 0.09) t.data[static_cast<std::size_t>(r) * cols] += 1.0;
  }
  return t;
}

struct GradCase {
  std::vector<TensorD> inputs;
  std::vector<bool> check;
  std::function<Ref<double>(Graph<double>&, const std::vector<Ref<double>>&)> make_loss;
};

double run_grad_case(const GradCase& c) {
  Graph<double> g;
  std::vector<Ref<double>> refs;
  for (std::size_t i = 0; i < c.inputs.size(); ++i)
    refs.push_back(g.leaf(c.inputs[i], c.check[i]));
  Ref<double> loss = c.make_loss(g, refs);
  g.backward(loss);
  double worst = 0.0;
  for (std::size_t i = 0; i < c.inputs.size(); ++i) {
    if (!c.check[i]) continue;
    const TensorD analytic =
        g.has_grad(refs[i]) ? g.grad_tensor(refs[i]) : TensorD::zeros(c.inputs[i].shape);
    auto f = [&, i](const TensorD& x) {
      Graph<double> h;
      std::vector<Ref<double>> probes;
      for (std::size_t j = 0; j < c.inputs.size(); ++j)
        probes.push_back(h.leaf(j == i ? x : c.inputs[j]));
      return h.value(c.make_loss(h, probes)).data[0];
    };
    const TensorD fd = finite_difference_gradient(std::function<double(const TensorD&)>(f),
                                                  c.inputs[i], kEps);
    worst = std::max(worst, max_relative_error(analytic, fd));
  }
  return worst;
}

// loss = sum(y * W) for a fixed random weight tensor, reducing any output to
// a scalar with a dense gradient.
std::function<Ref<double>(Graph<double>&, Ref<double>)> weighted_reducer(const Shape& out_shape,
                                                                         Rng& rng) {
  TensorD w = rand_tensor(out_shape, rng, 0.2, 1.0);
  return [w](Graph<double>& g, Ref<double> y) { return g.sum_all(g.mul(y, g.constant(w))); };
}

LabelMap rand_labels(int h, int w, int classes, Rng& rng, double ignore_prob = 0.0) {
  LabelMap m(h, w);
  for (auto& v : m.v) {
    if (ignore_prob > 0.0 && rng.uniform() < ignore_prob)
      v = kIgnoreLabel;
    else
      v = static_cast<std::uint8_t>(rng.uniform_index(static_cast<std::size_t>(classes)));
  }
  if (ignore_prob > 0.0) m.v[0] = 0;  // keep at least one valid pixel
  return m;
}

std::vector<Origin> rand_origins(int cells, Rng& rng) {
  std::vector<Origin> o(static_cast<std::size_t>(cells));
  for (auto& v : o) v = rng.uniform() < 0.5 ? Origin::Source : Origin::Target;
  return o;
}

ClassTaxonomy tiny_taxonomy(int classes, int stuff) {
  ClassTaxonomy t;
  for (int c = 0; c < classes; ++c) {
    t.names.push_back("c" + std::to_string(c));
    t.partition.push_back(c < stuff ? Partition::Stuff : Partition::Thing);
  }
  return t;
}

CLConfig tiny_cl() {
  CLConfig cfg;
  cfg.max_anchors_per_class = 3;
  cfg.max_positives = 3;
  cfg.max_negatives = 5;
  return cfg;
}

ModelConfig tiny_model() {
  ModelConfig m;
  m.stage_channels = {2, 3, 4, 5};
  m.embed_dim = 4;
  m.num_classes = 3;
  m.cl_grid_h = 4;
  m.cl_grid_w = 4;
  return m;
}

using CaseGen = std::function<GradCase(Rng&)>;

struct NamedCase {
  std::string name;
  double tol;
  int instances_scale;  // multiplier on the requested instance count
  CaseGen gen;
};

std::vector<NamedCase> gradient_cases() {
  std::vector<NamedCase> cases;
  auto add = [&](std::string name, CaseGen gen, double tol = kGradTol, int scale = 1) {
    cases.push_back({std::move(name), tol, scale, std::move(gen)});
  };

  add("kernel-conv2d3x3", [](Rng& rng) {
    const int h = 2 + static_cast<int>(rng.uniform_index(4));
    const int w = 2 + static_cast<int>(rng.uniform_index(4));
    const int cin = 1 + static_cast<int>(rng.uniform_index(3));
    const int cout = 1 + static_cast<int>(rng.uniform_index(3));
    const int stride = rng.uniform() < 0.5 ? 1 : 2;
    GradCase c;
    c.inputs = {rand_tensor({h, w, cin}, rng), rand_tensor({3, 3, cin, cout}, rng),
                rand_tensor({cout}, rng)};
    c.check = {true, true, true};
    const int oh = (h - 1) / stride + 1, ow = (w - 1) / stride + 1;
    auto reduce = weighted_reducer({oh, ow, cout}, rng);
    c.make_loss = [stride, reduce](Graph<double>& g, const std::vector<Ref<double>>& in) {
      return reduce(g, g.conv2d3x3(in[0], in[1], in[2], stride));
    };
    return c;
  });

  add("kernel-dense", [](Rng& rng) {
    const int m = 1 + static_cast<int>(rng.uniform_index(4));
    const int k = 1 + static_cast<int>(rng.uniform_index(4));
    const int n = 1 + static_cast<int>(rng.uniform_index(4));
    GradCase c;
    c.inputs = {rand_tensor({m, k}, rng), rand_tensor({k, n}, rng), rand_tensor({n}, rng)};
    c.check = {true, true, true};
    auto reduce = weighted_reducer({m, n}, rng);
    c.make_loss = [reduce](Graph<double>& g, const std::vector<Ref<double>>& in) {
      return reduce(g, g.dense(in[0], in[1], in[2]));
    };
    return c;
  });

  add("kernel-matmul", [](Rng& rng) {
    const int m = 1 + static_cast<int>(rng.uniform_index(4));
    const int k = 1 + static_cast<int>(rng.uniform_index(4));
    const int n = 1 + static_cast<int>(rng.uniform_index(4));
    GradCase c;
    c.inputs = {rand_tensor({m, k}, rng), rand_tensor({k, n}, rng)};
    c.check = {true, true};
    auto reduce = weighted_reducer({m, n}, rng);
    c.make_loss = [reduce](Graph<double>& g, const std::vector<Ref<double>>& in) {
      return reduce(g, g.matmul(in[0], in[1]));
    };
    return c;
  });

  add("kernel-relu", [](Rng& rng) {
    GradCase c;
    TensorD x = rand_tensor({3, 4}, rng);
    for (double& v : x.data) v += v >= 0 ? 0.05 : -0.05;  // keep clear of the kink
    c.inputs = {x};
    c.check = {true};
    auto reduce = weighted_reducer({3, 4}, rng);
    c.make_loss = [reduce](Graph<double>& g, const std::vector<Ref<double>>& in) {
      return reduce(g, g.relu(in[0]));
    };
    return c;
  });

  add("kernel-add", [](Rng& rng) {
    GradCase c;
    c.inputs = {rand_tensor({2, 3, 2}, rng), rand_tensor({2, 3, 2}, rng)};
    c.check = {true, true};
    auto reduce = weighted_reducer({2, 3, 2}, rng);
    c.make_loss = [reduce](Graph<double>& g, const std::vector<Ref<double>>& in) {
      return reduce(g, g.add(in[0], in[1]));
    };
    return c;
  });

  add("kernel-mul", [](Rng& rng) {
    GradCase c;
    c.inputs = {rand_tensor({4, 3}, rng), rand_tensor({4, 3}, rng)};
    c.check = {true, true};
    auto reduce = weighted_reducer({4, 3}, rng);
    c.make_loss = [reduce](Graph<double>& g, const std::vector<Ref<double>>& in) {
      return reduce(g, g.mul(in[0], in[1]));
    };
    return c;
  });

  add("kernel-scale", [](Rng& rng) {
    GradCase c;
    c.inputs = {rand_tensor({5}, rng)};
    c.check = {true};
    const double k = rng.uniform(-2.0, 2.0);
    auto reduce = weighted_reducer({5}, rng);
    c.make_loss = [reduce, k](Graph<double>& g, const std::vector<Ref<double>>& in) {
      return reduce(g, g.scale(in[0], k));
    };
    return c;
  });

  add("kernel-concat", [](Rng& rng) {
    GradCase c;
    c.inputs = {rand_tensor({2, 2, 2}, rng), rand_tensor({2, 2, 3}, rng),
                rand_tensor({2, 2, 1}, rng)};
    c.check = {true, true, true};
    auto reduce = weighted_reducer({2, 2, 6}, rng);
    c.make_loss = [reduce](Graph<double>& g, const std::vector<Ref<double>>& in) {
      return reduce(g, g.concat_channels({in[0], in[1], in[2]}));
    };
    return c;
  });

  add("kernel-softmax", [](Rng& rng) {
    GradCase c;
    const int r = 1 + static_cast<int>(rng.uniform_index(3));
    const int k = 2 + static_cast<int>(rng.uniform_index(5));
    c.inputs = {rand_tensor({r, k}, rng, -2.0, 2.0)};
    c.check = {true};
    auto reduce = weighted_reducer({r, k}, rng);
    c.make_loss = [reduce](Graph<double>& g, const std::vector<Ref<double>>& in) {
      return reduce(g, g.softmax_last(in[0]));
    };
    return c;
  });

  add("kernel-log", [](Rng& rng) {
    GradCase c;
    c.inputs = {rand_tensor({3, 3}, rng, 0.1, 2.0)};
    c.check = {true};
    auto reduce = weighted_reducer({3, 3}, rng);
    c.make_loss = [reduce](Graph<double>& g, const std::vector<Ref<double>>& in) {
      return reduce(g, g.log(in[0]));
    };
    return c;
  });

  add("kernel-exp", [](Rng& rng) {
    GradCase c;
    c.inputs = {rand_tensor({3, 3}, rng, -2.0, 2.0)};
    c.check = {true};
    auto reduce = weighted_reducer({3, 3}, rng);
    c.make_loss = [reduce](Graph<double>& g, const std::vector<Ref<double>>& in) {
      return reduce(g, g.exp(in[0]));
    };
    return c;
  });

  add("kernel-clamp-probs", [](Rng& rng) {
    GradCase c;
    c.inputs = {rand_tensor({4, 2}, rng, 1e-3, 1.0 - 1e-3)};
    c.check = {true};
    auto reduce = weighted_reducer({4, 2}, rng);
    c.make_loss = [reduce](Graph<double>& g, const std::vector<Ref<double>>& in) {
      return reduce(g, g.clamp_probs(in[0]));
    };
    return c;
  });

  add("kernel-l2-normalize", [](Rng& rng) {
    GradCase c;
    c.inputs = {rand_features(4, 3, rng)};
    c.check = {true};
    auto reduce = weighted_reducer({4, 3}, rng);
    c.make_loss = [reduce](Graph<double>& g, const std::vector<Ref<double>>& in) {
      return reduce(g, g.l2_normalize_last(in[0]));
    };
    return c;
  });

  add("kernel-bilinear-resize", [](Rng& rng) {
    const int h = 2 + static_cast<int>(rng.uniform_index(4));
    const int w = 2 + static_cast<int>(rng.uniform_index(4));
    const int ch = 1 + static_cast<int>(rng.uniform_index(3));
    const int oh = 1 + static_cast<int>(rng.uniform_index(7));
    const int ow = 1 + static_cast<int>(rng.uniform_index(7));
    GradCase c;
    c.inputs = {rand_tensor({h, w, ch}, rng)};
    c.check = {true};
    auto reduce = weighted_reducer({oh, ow, ch}, rng);
    c.make_loss = [reduce, oh, ow](Graph<double>& g, const std::vector<Ref<double>>& in) {
      return reduce(g, g.bilinear_resize(in[0], oh, ow));
    };
    return c;
  });

  add("kernel-mean", [](Rng& rng) {
    GradCase c;
    c.inputs = {rand_tensor({3, 5}, rng)};
    c.check = {true};
    c.make_loss = [](Graph<double>& g, const std::vector<Ref<double>>& in) {
      return g.mean_all(in[0]);
    };
    return c;
  });

  add("kernel-sum", [](Rng& rng) {
    GradCase c;
    c.inputs = {rand_tensor({2, 2, 3}, rng)};
    c.check = {true};
    c.make_loss = [](Graph<double>& g, const std::vector<Ref<double>>& in) {
      return g.sum_all(in[0]);
    };
    return c;
  });

  add("kernel-gather", [](Rng& rng) {
    const int n = 2 + static_cast<int>(rng.uniform_index(5));
    const int k = 1 + static_cast<int>(rng.uniform_index(6));
    std::vector<int> idx(static_cast<std::size_t>(k));
    for (int& i : idx) i = static_cast<int>(rng.uniform_index(static_cast<std::size_t>(n)));
    GradCase c;
    c.inputs = {rand_tensor({n, 3}, rng)};
    c.check = {true};
    auto reduce = weighted_reducer({k, 3}, rng);
    c.make_loss = [reduce, idx](Graph<double>& g, const std::vector<Ref<double>>& in) {
      return reduce(g, g.gather_rows(in[0], idx));
    };
    return c;
  });

  add("kernel-sigmoid", [](Rng& rng) {
    GradCase c;
    c.inputs = {rand_tensor({3, 4}, rng, -3.0, 3.0)};
    c.check = {true};
    auto reduce = weighted_reducer({3, 4}, rng);
    c.make_loss = [reduce](Graph<double>& g, const std::vector<Ref<double>>& in) {
      return reduce(g, g.sigmoid(in[0]));
    };
    return c;
  });

  add("kernel-maxpool2x2", [](Rng& rng) {
    const int h = 2 * (1 + static_cast<int>(rng.uniform_index(2)));
    const int w = 2 * (1 + static_cast<int>(rng.uniform_index(2)));
    const int ch = 1 + static_cast<int>(rng.uniform_index(2));
    // Well-separated values inside every pooling window keep the argmax
    // stable under the finite-difference probes.
    TensorD x = TensorD::zeros({h, w, ch});
    const double levels[4] = {-0.3, -0.1, 0.1, 0.3};
    for (int oy = 0; oy < h / 2; ++oy)
      for (int ox = 0; ox < w / 2; ++ox)
        for (int c = 0; c < ch; ++c) {
          std::vector<int> order = rng.sample_without_replacement(4, 4);
          int slot = 0;
          for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx)
              x.data[(static_cast<std::size_t>(2 * oy + dy) * w + 2 * ox + dx) * ch + c] =
                  levels[order[static_cast<std::size_t>(slot++)]] + rng.uniform(-0.02, 0.02);
        }
    GradCase c;
    c.inputs = {x};
    c.check = {true};
    auto reduce = weighted_reducer({h / 2, w / 2, ch}, rng);
    c.make_loss = [reduce](Graph<double>& g, const std::vector<Ref<double>>& in) {
      return reduce(g, g.maxpool2x2(in[0]));
    };
    return c;
  });

  add("kernel-reshape", [](Rng& rng) {
    GradCase c;
    c.inputs = {rand_tensor({2, 6}, rng)};
    c.check = {true};
    auto reduce = weighted_reducer({3, 4}, rng);
    c.make_loss = [reduce](Graph<double>& g, const std::vector<Ref<double>>& in) {
      return reduce(g, g.reshape(in[0], {3, 4}));
    };
    return c;
  });

  add("kernel-nce-from-sims", [](Rng& rng) {
    const int p = 1 + static_cast<int>(rng.uniform_index(4));
    const int n = static_cast<int>(rng.uniform_index(6));
    const double taus[3] = {0.07, 0.1, 0.3};
    const double tau = taus[rng.uniform_index(3)];
    GradCase c;
    c.inputs = {rand_tensor({p}, rng), rand_tensor({n}, rng)};
    c.check = {true, n > 0};
    c.make_loss = [tau](Graph<double>& g, const std::vector<Ref<double>>& in) {
      return g.nce_from_sims(in[0], in[1], tau);
    };
    return c;
  });

  add("kernel-masked-feature-distance", [](Rng& rng) {
    const int n = 2 + static_cast<int>(rng.uniform_index(4));
    const int e = 2 + static_cast<int>(rng.uniform_index(3));
    TensorD s = rand_tensor({n, e}, rng);
    TensorD r = rand_tensor({n, e}, rng);
    for (int i = 0; i < n; ++i) r.data[static_cast<std::size_t>(i) * e] += 1.0;  // keep norms > 0
    std::vector<std::uint8_t> mask(static_cast<std::size_t>(n), 0);
    for (auto& m : mask) m = rng.uniform() < 0.6 ? 1 : 0;
    mask[0] = 1;
    GradCase c;
    c.inputs = {std::move(s), std::move(r)};
    c.check = {true, true};
    c.make_loss = [mask](Graph<double>& g, const std::vector<Ref<double>>& in) {
      return g.masked_feature_distance(in[0], in[1], mask);
    };
    return c;
  });

  add("kernel-overlay-add", [](Rng& rng) {
    const int h = 4 + static_cast<int>(rng.uniform_index(3));
    const int w = 4 + static_cast<int>(rng.uniform_index(3));
    const int ph = 2 + static_cast<int>(rng.uniform_index(2));
    const int pw = 2 + static_cast<int>(rng.uniform_index(2));
    const int top = static_cast<int>(rng.uniform_index(static_cast<std::size_t>(h - ph + 1)));
    const int left = static_cast<int>(rng.uniform_index(static_cast<std::size_t>(w - pw + 1)));
    const double bw = rng.uniform(0.2, 0.8);
    GradCase c;
    c.inputs = {rand_tensor({h, w, 2}, rng), rand_tensor({ph, pw, 2}, rng)};
    c.check = {true, true};
    auto reduce = weighted_reducer({h, w, 2}, rng);
    c.make_loss = [reduce, top, left, bw](Graph<double>& g, const std::vector<Ref<double>>& in) {
      return reduce(g, g.overlay_add(in[0], in[1], top, left, bw, 1.0 - bw));
    };
    return c;
  });

  add("eq1-cross-entropy", [](Rng& rng) {
    const int h = 2 + static_cast<int>(rng.uniform_index(3));
    const int w = 2 + static_cast<int>(rng.uniform_index(3));
    const int classes = 2 + static_cast<int>(rng.uniform_index(4));
    const LabelMap labels = rand_labels(h, w, classes, rng, 0.2);
    GradCase c;
    c.inputs = {rand_tensor({h, w, classes}, rng, -2.0, 2.0)};
    c.check = {true};
    c.make_loss = [labels](Graph<double>& g, const std::vector<Ref<double>>& in) {
      return cross_entropy(g, in[0], labels);
    };
    return c;
  });

  add("eq2-info-nce", [](Rng& rng) {
    const int n = 6 + static_cast<int>(rng.uniform_index(5));
    const int e = 3 + static_cast<int>(rng.uniform_index(4));
    PairSet pairs;
    pairs.grid_h = 1;
    pairs.grid_w = n;
    const int anchors = 2 + static_cast<int>(rng.uniform_index(3));
    for (int a = 0; a < anchors; ++a) {
      PairAnchor pa;
      pa.pixel = static_cast<int>(rng.uniform_index(static_cast<std::size_t>(n)));
      pa.class_id = static_cast<std::uint8_t>(a % 2);
      pa.origin = Origin::Source;
      const int np = 1 + static_cast<int>(rng.uniform_index(3));
      const int nn = static_cast<int>(rng.uniform_index(4));
      for (int i = 0; i < np; ++i)
        pa.positives.push_back(static_cast<int>(rng.uniform_index(static_cast<std::size_t>(n))));
      for (int i = 0; i < nn; ++i)
        pa.negatives.push_back(static_cast<int>(rng.uniform_index(static_cast<std::size_t>(n))));
      pairs.anchors.push_back(std::move(pa));
    }
    const double tau = 0.1;
    GradCase c;
    c.inputs = {rand_features(n, e, rng)};
    c.check = {true};
    c.make_loss = [pairs, tau](Graph<double>& g, const std::vector<Ref<double>>& in) {
      return info_nce(g, pairs, g.l2_normalize_last(in[0]), tau);
    };
    return c;
  });

  add("eq3-source-cl", [](Rng& rng) {
    const int gh = 3 + static_cast<int>(rng.uniform_index(4));
    const int gw = 3 + static_cast<int>(rng.uniform_index(4));
    const int e = 3 + static_cast<int>(rng.uniform_index(4));
    const ClassTaxonomy tax = tiny_taxonomy(4, 2);
    const LabelMap labels = rand_labels(gh, gw, 4, rng);
    Rng pair_rng(rng.next_u64());
    const PairSet pairs = sample_pairs(labels, {}, tax, tiny_cl(), pair_rng);
    GradCase c;
    c.inputs = {rand_features(gh * gw, e, rng)};
    c.check = {true};
    c.make_loss = [pairs, gh, gw](Graph<double>& g, const std::vector<Ref<double>>& in) {
      return source_cl(g, pairs, g.l2_normalize_last(in[0]), 0.1, gh * gw);
    };
    return c;
  });

  add("eq5-mixed-cl", [](Rng& rng) {
    const int gh = 3 + static_cast<int>(rng.uniform_index(4));
    const int gw = 3 + static_cast<int>(rng.uniform_index(4));
    const int e = 3 + static_cast<int>(rng.uniform_index(4));
    const ClassTaxonomy tax = tiny_taxonomy(4, 2);
    const LabelMap labels = rand_labels(gh, gw, 4, rng);
    const std::vector<Origin> origins = rand_origins(gh * gw, rng);
    Rng pair_rng(rng.next_u64());
    const PairSet pairs = sample_pairs(labels, origins, tax, tiny_cl(), pair_rng);
    const double gammas[3] = {0.0, 0.4, 1.0};
    const double gamma = gammas[rng.uniform_index(3)];
    GradCase c;
    c.inputs = {rand_features(gh * gw, e, rng)};
    c.check = {true};
    c.make_loss = [pairs, gh, gw, gamma](Graph<double>& g, const std::vector<Ref<double>>& in) {
      return mixed_cl(g, pairs, g.l2_normalize_last(in[0]), 0.1, gh * gw, gamma);
    };
    return c;
  });

  add("eq6-total-loss", [](Rng& rng) {
    GradCase c;
    for (int i = 0; i < 5; ++i) c.inputs.push_back(rand_tensor({}, rng, 0.0, 2.0));
    c.check = {true, true, true, true, true};
    c.make_loss = [](Graph<double>& g, const std::vector<Ref<double>>& in) {
      return total_loss(g, in[0], in[1], in[2], in[3], in[4], 0.005);
    };
    return c;
  });

  add("eq7-multires-cl", [](Rng& rng) {
    const int gh = 4, gw = 4, e = 4;
    const int image_h = 32, image_w = 32;
    CropBox box;
    box.height = 16;
    box.width = 16;
    box.top = static_cast<int>(rng.uniform_index(static_cast<std::size_t>(image_h - 16 + 1)));
    box.left = static_cast<int>(rng.uniform_index(static_cast<std::size_t>(image_w - 16 + 1)));
    const DeltaAlignment align = align_delta(gh, gw, gh, gw, box, image_h, image_w);
    const ClassTaxonomy tax = tiny_taxonomy(4, 2);
    const LabelMap lr_labels = rand_labels(gh, gw, 4, rng);
    const LabelMap hr_labels = rand_labels(gh, gw, 4, rng);
    const std::vector<Origin> lr_origins = rand_origins(gh * gw, rng);
    const std::vector<Origin> hr_origins = rand_origins(gh * gw, rng);
    Rng pair_rng(rng.next_u64());
    const PairSet lr_pairs =
        sample_pairs(lr_labels, lr_origins, tax, tiny_cl(), pair_rng, Resolution::LR);
    const PairSet hr_pairs =
        sample_pairs(hr_labels, hr_origins, tax, tiny_cl(), pair_rng, Resolution::HR);
    const double gamma = rng.uniform(0.0, 1.0);
    GradCase c;
    c.inputs = {rand_features(gh * gw, e, rng), rand_features(gh * gw, e, rng),
                rand_tensor({gh, gw, 1}, rng, -2.0, 2.0)};
    c.check = {true, true, true};
    c.make_loss = [=](Graph<double>& g, const std::vector<Ref<double>>& in) {
      return multires_cl(g, lr_pairs, hr_pairs, g.l2_normalize_last(in[0]),
                         g.l2_normalize_last(in[1]), g.sigmoid(in[2]), align, gamma, 0.1,
                         gh * gw, true);
    };
    return c;
  });

  // Network heads over a toy model in f64.
  add("head-encode", [](Rng& rng) {
    const ModelConfig cfg = tiny_model();
    const ModelParams<double> params =
        ModelParams<float>::seeded_init(cfg, rng.next_u64()).cast<double>();
    GradCase c;
    c.inputs = {rand_tensor({16, 16, 3}, rng, 0.0, 1.0)};
    c.check = {true};
    TensorD weights[4] = {rand_tensor({8, 8, 2}, rng, 0.2, 1.0),
                          rand_tensor({4, 4, 3}, rng, 0.2, 1.0),
                          rand_tensor({2, 2, 4}, rng, 0.2, 1.0),
                          rand_tensor({1, 1, 5}, rng, 0.2, 1.0)};
    std::vector<TensorD> w(weights, weights + 4);
    c.make_loss = [params, cfg, w](Graph<double>& g, const std::vector<Ref<double>>& in) {
      ParamRefs<double> p = bind_params(g, params, false);
      std::vector<Ref<double>> stages = encode(g, in[0], p, cfg);
      Ref<double> loss;
      for (int s = 0; s < 4; ++s) {
        Ref<double> term =
            g.sum_all(g.mul(stages[static_cast<std::size_t>(s)], g.constant(w[static_cast<std::size_t>(s)])));
        loss = s == 0 ? term : g.add(loss, term);
      }
      return loss;
    };
    return c;
  }, kGradTol, 1);

  add("head-fuse", [](Rng& rng) {
    const ModelConfig cfg = tiny_model();
    const ModelParams<double> params =
        ModelParams<float>::seeded_init(cfg, rng.next_u64()).cast<double>();
    GradCase c;
    c.inputs = {rand_tensor({8, 8, 2}, rng), rand_tensor({4, 4, 3}, rng),
                rand_tensor({2, 2, 4}, rng), rand_tensor({2, 2, 5}, rng)};
    c.check = {true, true, true, true};
    auto reduce = weighted_reducer({4, 4, cfg.embed_dim}, rng);
    c.make_loss = [params, cfg, reduce](Graph<double>& g, const std::vector<Ref<double>>& in) {
      ParamRefs<double> p = bind_params(g, params, false);
      FusedMap<double> fused = fuse(g, {in[0], in[1], in[2], in[3]}, p, cfg);
      return reduce(g, fused.features);
    };
    return c;
  });

  add("head-classify", [](Rng& rng) {
    const ModelConfig cfg = tiny_model();
    const ModelParams<double> params =
        ModelParams<float>::seeded_init(cfg, rng.next_u64()).cast<double>();
    GradCase c;
    c.inputs = {rand_tensor({4, 4, cfg.embed_dim}, rng)};
    c.check = {true};
    auto reduce = weighted_reducer({8, 8, cfg.num_classes}, rng);
    c.make_loss = [params, cfg, reduce](Graph<double>& g, const std::vector<Ref<double>>& in) {
      ParamRefs<double> p = bind_params(g, params, false);
      FusedMap<double> fused{in[0], 4, 4, 4};
      return reduce(g, classify(g, fused, p, cfg, 8, 8));
    };
    return c;
  });

  add("head-weight-map", [](Rng& rng) {
    const ModelConfig cfg = tiny_model();
    const ModelParams<double> params =
        ModelParams<float>::seeded_init(cfg, rng.next_u64()).cast<double>();
    GradCase c;
    c.inputs = {rand_tensor({4, 4, cfg.embed_dim}, rng)};
    c.check = {true};
    auto reduce = weighted_reducer({4, 4, 1}, rng);
    c.make_loss = [params, cfg, reduce](Graph<double>& g, const std::vector<Ref<double>>& in) {
      ParamRefs<double> p = bind_params(g, params, false);
      FusedMap<double> fused{in[0], 4, 4, 4};
      return reduce(g, predict_weight_map(g, fused, p, cfg));
    };
    return c;
  });

  return cases;
}

GradCase end_to_end_case(Rng& rng) {
  const ModelConfig cfg = tiny_model();
  const ModelParams<double> params =
      ModelParams<float>::seeded_init(cfg, rng.next_u64()).cast<double>();
  const ClassTaxonomy tax = tiny_taxonomy(cfg.num_classes, 2);
  const LabelMap labels = rand_labels(16, 16, cfg.num_classes, rng);
  const LabelMap mixed_labels = rand_labels(16, 16, cfg.num_classes, rng);
  std::vector<std::uint8_t> origin_mask(256);
  for (auto& v : origin_mask) v = rng.uniform() < 0.5 ? 1 : 0;
  const TensorD reference = rand_tensor({4, 4, cfg.embed_dim}, rng);
  Rng pair_rng(rng.next_u64());
  CLConfig cl = tiny_cl();
  const PairSet src_pairs =
      sample_pairs(downsample_labels(labels, cfg.cl_grid_h, cfg.cl_grid_w), {}, tax, cl, pair_rng);
  const PairSet mix_pairs = sample_pairs(
      downsample_labels(mixed_labels, cfg.cl_grid_h, cfg.cl_grid_w),
      downsample_origins(origin_mask, 16, 16, cfg.cl_grid_h, cfg.cl_grid_w), tax, cl, pair_rng);
  const TensorD mixed_image = rand_tensor({16, 16, 3}, rng, 0.0, 1.0);
  const double gamma = 0.6;

  GradCase c;
  c.inputs = {rand_tensor({16, 16, 3}, rng, 0.0, 1.0)};
  c.check = {true};
  c.make_loss = [=](Graph<double>& g, const std::vector<Ref<double>>& in) {
    ParamRefs<double> p = bind_params(g, params, false);
    const int a = cfg.cl_grid_h * cfg.cl_grid_w;
    ModelOutputs<double> src = forward_model(g, in[0], p, cfg, true);
    Ref<double> ce_s = cross_entropy(g, src.logits, labels);
    Ref<double> cl_s = source_cl(g, src_pairs, feature_store(g, src.fused_cl), cl.tau, a);
    Ref<double> fd =
        feature_distance(g, src.fused.features, g.constant(reference), {});
    ModelOutputs<double> mix = forward_model(g, g.constant(mixed_image), p, cfg, true);
    Ref<double> ce_t = cross_entropy(g, mix.logits, mixed_labels);
    Ref<double> cl_m = mixed_cl(g, mix_pairs, feature_store(g, mix.fused_cl), cl.tau, a, gamma);
    return total_loss(g, ce_s, ce_t, cl_s, cl_m, fd, 0.005);
  };
  return c;
}

}  // namespace

std::vector<CheckResult> gradient_suite(int instances, std::uint64_t seed) {
  std::vector<CheckResult> results;
  Rng rng(seed);
  for (const NamedCase& nc : gradient_cases()) {
    CheckResult r;
    r.name = nc.name;
    r.worst = 0.0;
    const int runs = std::max(1, instances * nc.instances_scale);
    for (int i = 0; i < runs; ++i) {
      Rng case_rng(Rng::derive(seed, rng.next_u64()));
      const GradCase c = nc.gen(case_rng);
      r.worst = std::max(r.worst, run_grad_case(c));
    }
    r.pass = r.worst <= nc.tol;
    r.detail = "tol " + std::to_string(nc.tol);
    results.push_back(std::move(r));
  }
  {
    CheckResult r;
    r.name = "end-to-end-image-gradient";
    Rng case_rng(Rng::derive(seed, 0xe2e));
    const GradCase c = end_to_end_case(case_rng);
    r.worst = run_grad_case(c);
    r.pass = r.worst <= 1e-4;
    r.detail = "tol 0.0001";
    results.push_back(std::move(r));
  }
  return results;
}

// ---------------------------------------------------------------------------
// Oracle suite
// ---------------------------------------------------------------------------

namespace {

oracle::FeatureRows store_rows(const TensorD& store) {
  const int n = store.shape[0], e = store.shape[1];
  oracle::FeatureRows rows(static_cast<std::size_t>(n), std::vector<double>(static_cast<std::size_t>(e)));
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < e; ++c)
      rows[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)] =
          store.data[static_cast<std::size_t>(r) * e + c];
  return rows;
}

}  // namespace

std::vector<CheckResult> oracle_suite(std::uint64_t seed) {
  std::vector<CheckResult> results;
  Rng rng(seed);

  {
    CheckResult r;
    r.name = "info-nce-vs-brute-force";
    r.worst = 0.0;
    const ClassTaxonomy tax = tiny_taxonomy(4, 2);
    for (int i = 0; i < 30; ++i) {
      const int gh = 3 + static_cast<int>(rng.uniform_index(3));
      const int gw = 3 + static_cast<int>(rng.uniform_index(3));
      const int e = 3 + static_cast<int>(rng.uniform_index(5));
      const LabelMap labels = rand_labels(gh, gw, 4, rng);
      const std::vector<Origin> origins = rand_origins(gh * gw, rng);
      Rng pair_rng(rng.next_u64());
      const PairSet pairs = sample_pairs(labels, origins, tax, tiny_cl(), pair_rng);
      if (pairs.empty()) continue;
      Graph<double> g;
      Ref<double> raw = g.leaf(rand_features(gh * gw, e, rng));
      Ref<double> store = g.l2_normalize_last(raw);
      const double gamma = rng.uniform(0.0, 1.0);
      const double impl_nce = g.value(info_nce(g, pairs, store, 0.1)).data[0];
      const double impl_mix = g.value(mixed_cl(g, pairs, store, 0.1, gh * gw, gamma)).data[0];
      const oracle::FeatureRows rows = store_rows(g.value(store));
      r.worst = std::max(r.worst, std::abs(impl_nce - oracle::info_nce(pairs, rows, 0.1)));
      r.worst = std::max(
          r.worst, std::abs(impl_mix - oracle::mixed_cl(pairs, rows, 0.1, gh * gw, gamma)));
      // Source CL on an all-source pair set.
      Rng src_rng(rng.next_u64());
      const PairSet src_pairs = sample_pairs(labels, {}, tax, tiny_cl(), src_rng);
      if (!src_pairs.empty()) {
        const double impl_src =
            g.value(source_cl(g, src_pairs, store, 0.1, gh * gw)).data[0];
        r.worst = std::max(
            r.worst, std::abs(impl_src - oracle::source_cl(src_pairs, rows, 0.1, gh * gw)));
      }
    }
    r.pass = r.worst <= 1e-10;
    r.detail = "tol 1e-10";
    results.push_back(std::move(r));
  }

  {
    CheckResult r;
    r.name = "gamma-integer-count";
    r.pass = true;
    for (int i = 0; i < 25 && r.pass; ++i) {
      const int hw = 2 + static_cast<int>(rng.uniform_index(6));
      const int classes = 2 + static_cast<int>(rng.uniform_index(5));
      Graph<double> g;
      const TensorD probs =
          g.value(g.softmax_last(g.leaf(rand_tensor({hw, hw, classes}, rng, -3.0, 3.0))));
      const double beta = rng.uniform(0.2, 0.95);
      const ConfidenceWeight cw = confidence_weight(probs, beta);
      std::vector<double> max_probs;
      for (int px = 0; px < hw * hw; ++px) {
        double best = 0.0;
        for (int c = 0; c < classes; ++c)
          best = std::max(best, probs.data[static_cast<std::size_t>(px) * classes + c]);
        max_probs.push_back(best);
      }
      const std::int64_t expect = oracle::count_confident(max_probs, beta);
      r.pass = cw.confident == expect && cw.total == hw * hw &&
               cw.gamma == static_cast<double>(expect) / (hw * hw);
    }
    r.detail = "exact";
    results.push_back(std::move(r));
  }

  {
    CheckResult r;
    r.name = "entropy-crop-vs-exhaustive";
    r.pass = true;
    for (int i = 0; i < 30 && r.pass; ++i) {
      const int h = 6 + static_cast<int>(rng.uniform_index(14));
      const int w = 6 + static_cast<int>(rng.uniform_index(14));
      const int ch = 2 + static_cast<int>(rng.uniform_index(static_cast<std::size_t>(h - 1)));
      const int cw = 2 + static_cast<int>(rng.uniform_index(static_cast<std::size_t>(w - 1)));
      const int sy = 1 + static_cast<int>(rng.uniform_index(4));
      const int sx = 1 + static_cast<int>(rng.uniform_index(4));
      const TensorD ent = rand_tensor({h, w}, rng, 0.0, 2.0);
      const CropBox a = entropy_crop(ent, ch, cw, sy, sx);
      const CropBox b = oracle::entropy_crop_exhaustive(ent, ch, cw, sy, sx);
      r.pass = a.top == b.top && a.left == b.left && a.height == b.height && a.width == b.width;
    }
    r.detail = "exact";
    results.push_back(std::move(r));
  }

  {
    CheckResult r;
    r.name = "miou-vs-set-oracle";
    r.pass = true;
    for (int i = 0; i < 25 && r.pass; ++i) {
      const int h = 3 + static_cast<int>(rng.uniform_index(10));
      const int classes = 2 + static_cast<int>(rng.uniform_index(6));
      const LabelMap gt = rand_labels(h, h, classes, rng, 0.15);
      const LabelMap pred = rand_labels(h, h, classes, rng);
      const IouReport rep = miou(confusion(pred, gt, classes));
      std::vector<bool> valid;
      const std::vector<double> by_sets = oracle::iou_by_sets(pred, gt, classes, valid);
      for (int c = 0; c < classes; ++c) {
        if (rep.valid[static_cast<std::size_t>(c)] != valid[static_cast<std::size_t>(c)]) r.pass = false;
        if (rep.per_class[static_cast<std::size_t>(c)] != by_sets[static_cast<std::size_t>(c)])
          r.pass = false;
      }
      if (rep.miou != oracle::miou_by_sets(pred, gt, classes)) r.pass = false;
    }
    r.detail = "exact";
    results.push_back(std::move(r));
  }

  {
    CheckResult r;
    r.name = "ema-contraction";
    r.worst = 0.0;
    ModelConfig cfg = tiny_model();
    for (double alpha : {0.9, 0.99, 0.999}) {
      ModelParams<double> student = ModelParams<float>::seeded_init(cfg, rng.next_u64()).cast<double>();
      ModelParams<double> teacher = ModelParams<float>::seeded_init(cfg, rng.next_u64()).cast<double>();
      double init_diff = 0.0;
      {
        auto t = teacher.tensors.begin();
        auto s = student.tensors.begin();
        for (; t != teacher.tensors.end(); ++t, ++s)
          for (std::size_t i = 0; i < t->second.data.size(); ++i)
            init_diff = std::max(init_diff, std::abs(t->second.data[i] - s->second.data[i]));
      }
      const int k = 25;
      for (int step = 0; step < k; ++step) ema_update(teacher, student, alpha);
      double diff = 0.0;
      {
        auto t = teacher.tensors.begin();
        auto s = student.tensors.begin();
        for (; t != teacher.tensors.end(); ++t, ++s)
          for (std::size_t i = 0; i < t->second.data.size(); ++i)
            diff = std::max(diff, std::abs(t->second.data[i] - s->second.data[i]));
      }
      const double expect = std::pow(alpha, k) * init_diff;
      r.worst = std::max(r.worst, std::abs(diff - expect));
    }
    r.pass = r.worst <= 1e-12;
    r.detail = "tol 1e-12";
    results.push_back(std::move(r));
  }

  {
    CheckResult r;
    r.name = "classmix-exact-composition";
    r.pass = true;
    const DomainSpec spec = [] {
      DomainSpec s = DomainSpec::desk_default();
      s.height = 64;
      s.width = 64;
      return s;
    }();
    for (int i = 0; i < 20 && r.pass; ++i) {
      const SegSample src = generate_scene(spec, rng.next_u64());
      const SegSample tgt_full = generate_scene(spec, rng.next_u64());
      PseudoLabel pseudo;
      pseudo.labels = tgt_full.label;
      pseudo.confidence = TensorF::full({src.label.h, src.label.w}, 1.0f);
      Rng mix_rng(rng.next_u64());
      const MixResult mix = classmix(src, tgt_full.image, pseudo, mix_rng);
      std::vector<bool> selected(256, false);
      for (int c : mix.selected_classes) selected[static_cast<std::size_t>(c)] = true;
      for (std::int64_t px = 0; px < src.label.size() && r.pass; ++px) {
        const std::uint8_t ys = src.label.v[static_cast<std::size_t>(px)];
        const bool should_be_source = ys != kIgnoreLabel && selected[ys];
        if ((mix.origin[static_cast<std::size_t>(px)] == 1) != should_be_source) r.pass = false;
        const std::uint8_t expect_label =
            should_be_source ? ys : pseudo.labels.v[static_cast<std::size_t>(px)];
        if (mix.label.v[static_cast<std::size_t>(px)] != expect_label) r.pass = false;
        for (int c = 0; c < 3; ++c) {
          const float expect_px =
              should_be_source ? src.image.data[static_cast<std::size_t>(px) * 3 + c]
                               : tgt_full.image.data[static_cast<std::size_t>(px) * 3 + c];
          if (mix.image.data[static_cast<std::size_t>(px) * 3 + c] != expect_px) r.pass = false;
        }
      }
    }
    r.detail = "exact";
    results.push_back(std::move(r));
  }

  {
    CheckResult r;
    r.name = "eq7-delta-one-reduces-to-eq5";
    r.worst = 0.0;
    const ClassTaxonomy tax = tiny_taxonomy(4, 2);
    for (int i = 0; i < 15; ++i) {
      const int gh = 4, gw = 4, e = 4;
      CropBox box{8, 8, 16, 16};
      const DeltaAlignment align = align_delta(gh, gw, gh, gw, box, 32, 32);
      const LabelMap lr_labels = rand_labels(gh, gw, 4, rng);
      const LabelMap hr_labels = rand_labels(gh, gw, 4, rng);
      const std::vector<Origin> lr_origins = rand_origins(gh * gw, rng);
      const std::vector<Origin> hr_origins = rand_origins(gh * gw, rng);
      Rng pair_rng(rng.next_u64());
      const PairSet lr_pairs =
          sample_pairs(lr_labels, lr_origins, tax, tiny_cl(), pair_rng, Resolution::LR);
      const PairSet hr_pairs =
          sample_pairs(hr_labels, hr_origins, tax, tiny_cl(), pair_rng, Resolution::HR);
      if (lr_pairs.empty()) continue;
      Graph<double> g;
      Ref<double> lr_store = g.l2_normalize_last(g.leaf(rand_features(gh * gw, e, rng)));
      Ref<double> hr_store = g.l2_normalize_last(g.leaf(rand_features(gh * gw, e, rng)));
      Ref<double> delta_one = g.constant(TensorD::full({gh, gw, 1}, 1.0));
      const double gamma = rng.uniform(0.0, 1.0);
      const double eq7 = g.value(multires_cl(g, lr_pairs, hr_pairs, lr_store, hr_store,
                                             delta_one, align, gamma, 0.1, gh * gw, true))
                             .data[0];
      const double eq5 =
          g.value(mixed_cl(g, lr_pairs, lr_store, 0.1, gh * gw, gamma)).data[0];
      r.worst = std::max(r.worst, std::abs(eq7 - eq5));
    }
    r.pass = r.worst <= 1e-12;
    r.detail = "tol 1e-12";
    results.push_back(std::move(r));
  }

  return results;
}

}  // namespace cluda
