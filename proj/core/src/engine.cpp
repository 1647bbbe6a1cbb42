#include "cluda/engine.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "cluda/error.hpp"
#include "cluda/io.hpp"

namespace fs = std::filesystem;

namespace cluda {

// ---------------------------------------------------------------------------
// ClassMix
// ---------------------------------------------------------------------------

MixResult classmix_with_classes(const SegSample& source, const TensorF& target_image,
                                const PseudoLabel& pseudo, std::vector<int> selected) {
  const int h = source.label.h, w = source.label.w;
  if (source.image.shape != target_image.shape || pseudo.labels.h != h || pseudo.labels.w != w)
    fail(ErrorKind::ShapeMismatch, "classmix needs matching source/target/pseudo dims");
  std::sort(selected.begin(), selected.end());
  std::vector<bool> pick(256, false);
  for (int c : selected) pick[static_cast<std::size_t>(static_cast<std::uint8_t>(c))] = true;

  MixResult out;
  out.image = target_image;
  out.label = pseudo.labels;
  out.origin.assign(static_cast<std::size_t>(h) * w, 0);
  out.selected_classes = std::move(selected);
  for (int i = 0; i < h * w; ++i) {
    const std::uint8_t y = source.label.v[static_cast<std::size_t>(i)];
    if (y == kIgnoreLabel || !pick[y]) continue;
    out.origin[static_cast<std::size_t>(i)] = 1;
    out.label.v[static_cast<std::size_t>(i)] = y;
    for (int c = 0; c < 3; ++c)
      out.image.data[static_cast<std::size_t>(i) * 3 + c] =
          source.image.data[static_cast<std::size_t>(i) * 3 + c];
  }
  return out;
}

MixResult classmix(const SegSample& source, const TensorF& target_image,
                   const PseudoLabel& pseudo, Rng& rng) {
  std::vector<bool> seen(256, false);
  std::vector<int> present;
  for (std::uint8_t v : source.label.v)
    if (v != kIgnoreLabel && !seen[v]) {
      seen[v] = true;
      present.push_back(v);
    }
  std::sort(present.begin(), present.end());
  const int k = (static_cast<int>(present.size()) + 1) / 2;
  std::vector<int> chosen = rng.sample_without_replacement(static_cast<int>(present.size()), k);
  for (int& c : chosen) c = present[static_cast<std::size_t>(c)];
  return classmix_with_classes(source, target_image, pseudo, std::move(chosen));
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

TensorF augment(const TensorF& image, const AugmentParams& params, Rng& rng) {
  if (image.shape.size() != 3 || image.shape[2] != 3)
    fail(ErrorKind::ShapeMismatch, "augment expects an HxWx3 image");
  TensorF out = image;
  if (params.jitter_strength > 0.0 && rng.uniform() < params.jitter_prob) {
    const double s = params.jitter_strength;
    const double b[3] = {rng.uniform(-s, s), rng.uniform(-s, s), rng.uniform(-s, s)};
    const double contrast = rng.uniform(1.0 - s, 1.0 + s);
    const double saturation = rng.uniform(1.0 - s, 1.0 + s);
    const std::int64_t pixels = out.size() / 3;
    for (std::int64_t i = 0; i < pixels; ++i) {
      float* p = out.data.data() + static_cast<std::size_t>(i) * 3;
      const double gray = (p[0] + p[1] + p[2]) / 3.0;
      for (int c = 0; c < 3; ++c) {
        double v = p[c] + b[c];
        v = 0.5 + (v - 0.5) * contrast;
        v = gray + (v - gray) * saturation;
        p[c] = static_cast<float>(v);
      }
    }
  }
  if (params.blur_prob > 0.0 && rng.uniform() < params.blur_prob) {
    const double sigma = rng.uniform(params.blur_sigma_min, params.blur_sigma_max);
    out = gaussian_blur(out, static_cast<float>(sigma));
  }
  if (!params.jitter_strength && !params.blur_prob) return out;  // bitwise identity path
  for (float& v : out.data) v = std::clamp(v, 0.0f, 1.0f);
  return out;
}

// ---------------------------------------------------------------------------
// EMA, schedule, optimizer
// ---------------------------------------------------------------------------

template <typename T>
void ema_update(ModelParams<T>& teacher, const ModelParams<T>& student, double alpha) {
  if (alpha < 0.0 || alpha > 1.0) fail(ErrorKind::InvalidArgument, "ema alpha must lie in [0,1]");
  if (!teacher.same_structure(student))
    fail(ErrorKind::ShapeMismatch, "teacher/student parameter sets differ");
  const T a = static_cast<T>(alpha);
  auto t = teacher.tensors.begin();
  auto s = student.tensors.begin();
  for (; t != teacher.tensors.end(); ++t, ++s)
    for (std::size_t i = 0; i < t->second.data.size(); ++i)
      t->second.data[i] = a * t->second.data[i] + (T(1) - a) * s->second.data[i];
}

template void ema_update(ModelParams<float>&, const ModelParams<float>&, double);
template void ema_update(ModelParams<double>&, const ModelParams<double>&, double);

void ScheduleConfig::validate() const {
  if (lr_encoder <= 0.0 || lr_decoder <= 0.0) fail(ErrorKind::InvalidArgument, "lrs must be > 0");
  if (ema_alpha < 0.0 || ema_alpha >= 1.0)
    fail(ErrorKind::InvalidArgument, "ema alpha must lie in [0,1)");
  if (batch_size < 1) fail(ErrorKind::InvalidArgument, "batch size must be >= 1");
  if (warmup_iters < 0 || total_iters < 0 || warmup_iters > total_iters)
    fail(ErrorKind::InvalidArgument, "warmup iters must not exceed total iters");
  if (warmup_floor <= 0.0 || warmup_floor > 1.0)
    fail(ErrorKind::InvalidArgument, "warmup floor must lie in (0,1]");
  if (poly_power <= 0.0) fail(ErrorKind::InvalidArgument, "poly power must be positive");
}

std::pair<double, double> lr_at(std::int64_t iteration, const ScheduleConfig& schedule) {
  schedule.validate();
  if (iteration < 0 || iteration > schedule.total_iters)
    fail(ErrorKind::InvalidArgument,
         "iteration " + std::to_string(iteration) + " outside the schedule");
  double factor;
  if (iteration < schedule.warmup_iters) {
    const double progress = static_cast<double>(iteration) / schedule.warmup_iters;
    factor = schedule.warmup_floor + (1.0 - schedule.warmup_floor) * progress;
  } else {
    const std::int64_t span = std::max<std::int64_t>(schedule.total_iters - schedule.warmup_iters, 1);
    const double progress = static_cast<double>(iteration - schedule.warmup_iters) /
                            static_cast<double>(span);
    factor = std::pow(1.0 - progress, schedule.poly_power);
  }
  return {schedule.lr_encoder * factor, schedule.lr_decoder * factor};
}

void adamw_step(ModelParams<float>& params, const std::map<std::string, TensorF>& grads,
                AdamState& state, const std::function<double(const std::string&)>& lr_of,
                double beta1, double beta2, double weight_decay) {
  constexpr double kEps = 1e-8;
  state.step += 1;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
  for (auto& [name, theta] : params.tensors) {
    const TensorF* grad = nullptr;
    if (auto it = grads.find(name); it != grads.end()) {
      if (!same_shape(it->second.shape, theta.shape))
        fail(ErrorKind::ShapeMismatch, "gradient shape mismatch for '" + name + "'");
      if (!it->second.finite())
        fail(ErrorKind::NonFinite, "non-finite gradient for parameter '" + name + "'");
      grad = &it->second;
    }
    TensorF& m = state.m.try_emplace(name, TensorF::zeros(theta.shape)).first->second;
    TensorF& v = state.v.try_emplace(name, TensorF::zeros(theta.shape)).first->second;
    const double lr = lr_of(name);
    for (std::size_t i = 0; i < theta.data.size(); ++i) {
      const double gi = grad ? static_cast<double>(grad->data[i]) : 0.0;
      const double mi = beta1 * m.data[i] + (1.0 - beta1) * gi;
      const double vi = beta2 * v.data[i] + (1.0 - beta2) * gi * gi;
      m.data[i] = static_cast<float>(mi);
      v.data[i] = static_cast<float>(vi);
      const double update = (mi / bc1) / (std::sqrt(vi / bc2) + kEps);
      theta.data[i] = static_cast<float>(theta.data[i] - lr * update -
                                         lr * weight_decay * theta.data[i]);
    }
  }
}

// ---------------------------------------------------------------------------
// Trainer state and data
// ---------------------------------------------------------------------------

void TrainConfig::validate(int image_h, int image_w) const {
  model.validate();
  cl.validate();
  schedule.validate();
  if (rcs_temperature <= 0.0) fail(ErrorKind::InvalidArgument, "rcs temperature must be positive");
  if (multires != MultiResMode::Off) {
    if (hr_crop < 16 || hr_crop % 16 != 0 || hr_crop > image_h || hr_crop > image_w)
      fail(ErrorKind::InvalidArgument, "hr_crop must be a multiple of 16 inside the image");
    if (lr_scale <= 0.0 || lr_scale > 1.0)
      fail(ErrorKind::InvalidArgument, "lr_scale must lie in (0,1]");
  }
}

TrainerState TrainerState::init(const ModelConfig& config, std::uint64_t seed) {
  TrainerState s;
  s.student = ModelParams<float>::seeded_init(config, seed);
  s.teacher = s.student;
  s.reference = s.student;
  s.run_seed = seed;
  return s;
}

TrainingData load_training_data(const std::string& directory, const DatasetManifest& manifest,
                                int eval_holdout) {
  TrainingData data;
  data.taxonomy = manifest.taxonomy;
  data.source_freq = manifest.source_freq;
  std::vector<const ManifestEntry*> targets;
  for (const auto& e : manifest.samples) {
    if (e.domain == Domain::Source)
      data.source.push_back(load_sample(directory, e, /*with_label=*/true));
    else
      targets.push_back(&e);
  }
  if (eval_holdout < 0 || eval_holdout >= static_cast<int>(targets.size()))
    fail(ErrorKind::InvalidArgument, "eval holdout must leave at least one training target");
  const std::size_t train_count = targets.size() - static_cast<std::size_t>(eval_holdout);
  for (std::size_t i = 0; i < train_count; ++i)
    data.target_images.push_back(
        load_sample(directory, *targets[i], /*with_label=*/false).image);
  if (data.source.empty() || data.target_images.empty())
    fail(ErrorKind::EmptyInput, "training needs source and target samples");
  return data;
}

// ---------------------------------------------------------------------------
// One training step
// ---------------------------------------------------------------------------

namespace {

const TensorF& cached_reference(TrainerState& state, std::uint64_t key, const TensorF& image) {
  auto it = state.reference_cache.find(key);
  if (it == state.reference_cache.end())
    it = state.reference_cache.emplace(key, model_fused(state.reference, image)).first;
  return it->second;
}

struct LossTerms {
  std::vector<Ref<float>> ce_s, cl_s, fd, ce_t, cl_m;
};

Ref<float> fold_mean(Graph<float>& g, const std::vector<Ref<float>>& terms) {
  if (terms.empty()) return g.constant(TensorF::scalar(0.0f));
  Ref<float> sum = terms[0];
  for (std::size_t i = 1; i < terms.size(); ++i) sum = g.add(sum, terms[i]);
  return g.scale(sum, 1.0 / static_cast<double>(terms.size()));
}

struct MrForward {
  ModelOutputs<float> lr;
  ModelOutputs<float> hr;
  CropBox box;
};

MrForward mr_forward(Graph<float>& g, const ParamRefs<float>& p, const TrainConfig& cfg,
                     const MultiResBundle& bundle) {
  MrForward f;
  f.box = bundle.box;
  f.lr = forward_model(g, g.constant(bundle.lr_image), p, cfg.model, /*with_logits=*/false);
  f.hr = forward_model(g, g.constant(bundle.hr_image), p, cfg.model, /*with_logits=*/false);
  return f;
}

// LR logits upsampled to full resolution with the HR logits averaged into the
// crop region.
Ref<float> mr_logit_canvas(Graph<float>& g, const ParamRefs<float>& p, const TrainConfig& cfg,
                           const MrForward& f, int image_h, int image_w) {
  Ref<float> lr_logits = classify(g, f.lr.fused, p, cfg.model, image_h, image_w);
  Ref<float> hr_logits = classify(g, f.hr.fused, p, cfg.model, f.box.height, f.box.width);
  return g.overlay_add(lr_logits, hr_logits, f.box.top, f.box.left, 0.5, 0.5);
}

// Contrastive loss over LR and (optionally) HR streams of one image.
Ref<float> mr_contrastive(Graph<float>& g, const ParamRefs<float>& p, const TrainConfig& cfg,
                          const MrForward& f, const LabelMap& full_labels,
                          const std::vector<std::uint8_t>& origin_mask, double gamma,
                          const ClassTaxonomy& taxonomy, Rng& rng, int image_h, int image_w) {
  const int gh = cfg.model.cl_grid_h, gw = cfg.model.cl_grid_w;
  const int normalizer = gh * gw;
  Ref<float> lr_store = feature_store(g, f.lr.fused_cl);
  const LabelMap lr_labels = downsample_labels(full_labels, gh, gw);
  std::vector<Origin> lr_origins;
  if (!origin_mask.empty())
    lr_origins = downsample_origins(origin_mask, image_h, image_w, gh, gw);
  PairSet lr_pairs =
      sample_pairs(lr_labels, lr_origins, taxonomy, cfg.cl, rng, Resolution::LR);

  if (cfg.multires == MultiResMode::LrOnly)
    return mixed_cl(g, lr_pairs, lr_store, cfg.cl.tau, normalizer, gamma);

  Ref<float> hr_store = feature_store(g, f.hr.fused_cl);
  const LabelMap hr_full = crop_labels(full_labels, f.box);
  const LabelMap hr_labels = downsample_labels(hr_full, gh, gw);
  std::vector<Origin> hr_origins;
  if (!origin_mask.empty()) {
    std::vector<std::uint8_t> cropped(static_cast<std::size_t>(f.box.height) * f.box.width);
    for (int y = 0; y < f.box.height; ++y)
      for (int x = 0; x < f.box.width; ++x)
        cropped[static_cast<std::size_t>(y) * f.box.width + x] =
            origin_mask[static_cast<std::size_t>(f.box.top + y) * image_w + f.box.left + x];
    hr_origins = downsample_origins(cropped, f.box.height, f.box.width, gh, gw);
  }
  PairSet hr_pairs = sample_pairs(hr_labels, hr_origins, taxonomy, cfg.cl, rng, Resolution::HR);

  const DeltaAlignment align = align_delta(gh, gw, gh, gw, f.box, image_h, image_w);
  Ref<float> delta;
  const bool learned = cfg.multires == MultiResMode::LrHrWeighted;
  if (learned) delta = predict_weight_map(g, f.lr.fused_cl, p, cfg.model);
  return multires_cl(g, lr_pairs, hr_pairs, lr_store, hr_store, delta, align, gamma, cfg.cl.tau,
                     normalizer, learned);
}

}  // namespace

StepMetrics train_step(TrainerState& state, const TrainingData& data, const RcsSampler& rcs,
                       const TrainConfig& cfg) {
  if (data.source.empty() || data.target_images.empty())
    fail(ErrorKind::EmptyInput, "train_step needs source and target data");
  const int image_h = data.source.front().image.shape[0];
  const int image_w = data.source.front().image.shape[1];
  cfg.validate(image_h, image_w);

  const auto [lr_enc, lr_dec] = lr_at(state.iteration, cfg.schedule);
  Rng rng(Rng::derive(state.run_seed, static_cast<std::uint64_t>(state.iteration)));

  Graph<float> g;
  ParamRefs<float> pstu = bind_params(g, state.student, /*requires_grad=*/true);

  const int gh = cfg.model.cl_grid_h, gw = cfg.model.cl_grid_w;
  const int normalizer = gh * gw;
  LossTerms terms;
  double gamma_sum = 0.0;
  std::int64_t confident = 0, conf_total = 0;

  for (int slot = 0; slot < cfg.schedule.batch_size; ++slot) {
    const int src_index = rcs.pick_sample(rng);
    const SegSample& src = data.source[static_cast<std::size_t>(src_index)];
    const TensorF& tgt = data.target_images[rng.uniform_index(data.target_images.size())];

    if (cfg.multires == MultiResMode::Off) {
      // Source pass.
      ModelOutputs<float> out =
          forward_model(g, g.constant(src.image), pstu, cfg.model, /*with_logits=*/true);
      terms.ce_s.push_back(cross_entropy(g, out.logits, src.label));
      if (cfg.cl_enabled) {
        Ref<float> store = feature_store(g, out.fused_cl);
        PairSet pairs = sample_pairs(downsample_labels(src.label, gh, gw), {}, data.taxonomy,
                                     cfg.cl, rng, Resolution::LR);
        terms.cl_s.push_back(source_cl(g, pairs, store, cfg.cl.tau, normalizer));
      }
      terms.fd.push_back(feature_distance(
          g, out.fused.features,
          g.constant(cached_reference(state, static_cast<std::uint64_t>(src_index) * 2, src.image)),
          {}));

      // Teacher on the raw target image.
      const TensorF probs_t = model_probs(state.teacher, tgt);
      const PseudoLabel pseudo = pseudo_label_from_probs(probs_t);
      const ConfidenceWeight cw = confidence_weight(probs_t, cfg.cl.beta);
      gamma_sum += cw.gamma;
      confident += cw.confident;
      conf_total += cw.total;

      // Domain-mixed pass.
      const MixResult mix = classmix(src, tgt, pseudo, rng);
      const TensorF mixed = augment(mix.image, cfg.augment, rng);
      ModelOutputs<float> mout =
          forward_model(g, g.constant(mixed), pstu, cfg.model, /*with_logits=*/true);
      terms.ce_t.push_back(cross_entropy(g, mout.logits, mix.label));
      if (cfg.cl_enabled) {
        Ref<float> store = feature_store(g, mout.fused_cl);
        PairSet pairs = sample_pairs(downsample_labels(mix.label, gh, gw),
                                     downsample_origins(mix.origin, image_h, image_w, gh, gw),
                                     data.taxonomy, cfg.cl, rng, Resolution::LR);
        terms.cl_m.push_back(
            mixed_cl(g, pairs, store, cfg.cl.tau, normalizer, cfg.cl_weighted ? cw.gamma : 1.0));
      }
    } else {
      const int half = std::max(1, cfg.hr_crop / 2);

      // Source pass: random crops.
      const MultiResBundle src_bundle =
          make_crops(src.image, cfg.lr_scale, cfg.hr_crop, cfg.hr_crop, rng);
      const MrForward sf = mr_forward(g, pstu, cfg, src_bundle);
      terms.ce_s.push_back(
          cross_entropy(g, mr_logit_canvas(g, pstu, cfg, sf, image_h, image_w), src.label));
      if (cfg.cl_enabled)
        terms.cl_s.push_back(mr_contrastive(g, pstu, cfg, sf, src.label, {}, 1.0, data.taxonomy,
                                            rng, image_h, image_w));
      terms.fd.push_back(feature_distance(
          g, sf.lr.fused.features,
          g.constant(cached_reference(state, static_cast<std::uint64_t>(src_index) * 2 + 1,
                                      src_bundle.lr_image)),
          {}));

      // Teacher via sliding windows over the target image.
      const TensorF probs_t =
          sliding_probs(state.teacher, tgt, cfg.hr_crop, cfg.hr_crop, half, half);
      const PseudoLabel pseudo = pseudo_label_from_probs(probs_t);
      const ConfidenceWeight cw = confidence_weight(probs_t, cfg.cl.beta);
      gamma_sum += cw.gamma;
      confident += cw.confident;
      conf_total += cw.total;

      // Domain-mixed pass: entropy-selected or random crop.
      const MixResult mix = classmix(src, tgt, pseudo, rng);
      const TensorF mixed = augment(mix.image, cfg.augment, rng);
      MultiResBundle mix_bundle;
      if (cfg.entropy_cropping) {
        const CropBox box =
            entropy_crop(entropy_map(probs_t), cfg.hr_crop, cfg.hr_crop,
                         std::max(1, image_h / 4), std::max(1, image_w / 4));
        mix_bundle = crops_at(mixed, cfg.lr_scale, box);
      } else {
        mix_bundle = make_crops(mixed, cfg.lr_scale, cfg.hr_crop, cfg.hr_crop, rng);
      }
      const MrForward mf = mr_forward(g, pstu, cfg, mix_bundle);
      terms.ce_t.push_back(
          cross_entropy(g, mr_logit_canvas(g, pstu, cfg, mf, image_h, image_w), mix.label));
      if (cfg.cl_enabled)
        terms.cl_m.push_back(mr_contrastive(g, pstu, cfg, mf, mix.label, mix.origin,
                                            cfg.cl_weighted ? cw.gamma : 1.0, data.taxonomy, rng,
                                            image_h, image_w));
    }
  }

  Ref<float> ce_s = fold_mean(g, terms.ce_s);
  Ref<float> ce_t = fold_mean(g, terms.ce_t);
  Ref<float> cl_s = fold_mean(g, terms.cl_s);
  Ref<float> cl_m = fold_mean(g, terms.cl_m);
  Ref<float> fd = fold_mean(g, terms.fd);
  Ref<float> total = total_loss(g, ce_s, ce_t, cl_s, cl_m, fd, cfg.cl.lambda_fd);

  g.backward(total);
  const std::map<std::string, TensorF> grads = g.named_gradients();
  const double enc = lr_enc, dec = lr_dec;
  adamw_step(
      state.student, grads, state.opt,
      [enc, dec](const std::string& name) {
        return name.rfind("encoder.", 0) == 0 ? enc : dec;
      },
      cfg.schedule.beta1, cfg.schedule.beta2, cfg.schedule.weight_decay);
  ema_update(state.teacher, state.student, cfg.schedule.ema_alpha);
  state.iteration += 1;

  StepMetrics m;
  m.iteration = state.iteration;
  m.l_ce_s = g.value(ce_s).data[0];
  m.l_ce_t = g.value(ce_t).data[0];
  m.l_cl_s = g.value(cl_s).data[0];
  m.l_cl_m = g.value(cl_m).data[0];
  m.l_fd = g.value(fd).data[0];
  m.total = g.value(total).data[0];
  m.gamma = gamma_sum / cfg.schedule.batch_size;
  m.conf_frac = conf_total > 0 ? static_cast<double>(confident) / conf_total : 0.0;
  m.lr_enc = lr_enc;
  m.lr_dec = lr_dec;
  return m;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {

void write_group(const std::string& directory, std::ofstream& manifest, const std::string& role,
                 const std::map<std::string, TensorF>& tensors) {
  for (const auto& [name, t] : tensors) {
    const std::string rel = "tensors/" + role + "." + name + ".cldt";
    write_blob_f32((fs::path(directory) / rel).string(), t);
    manifest << "tensor " << role << "." << name << " " << rel << "\n";
  }
}

}  // namespace

void save_checkpoint(const std::string& directory, const TrainerState& state) {
  std::error_code ec;
  fs::create_directories(fs::path(directory) / "tensors", ec);
  if (ec) fail(ErrorKind::IoFailure, "cannot create checkpoint directory " + directory);
  std::ofstream out(fs::path(directory) / "checkpoint.txt");
  if (!out) fail(ErrorKind::IoFailure, "cannot write checkpoint manifest in " + directory);
  const ModelConfig& c = state.student.config;
  out << "cluda-checkpoint 1\n";
  out << "iteration " << state.iteration << "\n";
  out << "run_seed " << state.run_seed << "\n";
  out << "adam_step " << state.opt.step << "\n";
  out << "config in_channels " << c.in_channels << "\n";
  out << "config stage_channels " << c.stage_channels[0] << " " << c.stage_channels[1] << " "
      << c.stage_channels[2] << " " << c.stage_channels[3] << "\n";
  out << "config embed_dim " << c.embed_dim << "\n";
  out << "config num_classes " << c.num_classes << "\n";
  out << "config cl_grid " << c.cl_grid_h << " " << c.cl_grid_w << "\n";
  write_group(directory, out, "student", state.student.tensors);
  write_group(directory, out, "teacher", state.teacher.tensors);
  write_group(directory, out, "reference", state.reference.tensors);
  write_group(directory, out, "adam_m", state.opt.m);
  write_group(directory, out, "adam_v", state.opt.v);
  out.flush();
  if (!out) fail(ErrorKind::IoFailure, "checkpoint manifest write failed in " + directory);
}

TrainerState load_checkpoint(const std::string& directory) {
  std::ifstream in(fs::path(directory) / "checkpoint.txt");
  if (!in) fail(ErrorKind::IoFailure, "cannot open checkpoint manifest in " + directory);
  TrainerState state;
  ModelConfig config;
  std::string line;
  bool header = false;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "cluda-checkpoint") {
      int version = 0;
      ls >> version;
      if (version != 1)
        fail(ErrorKind::BadVersion, "unsupported checkpoint version " + std::to_string(version));
      header = true;
    } else if (key == "iteration") {
      ls >> state.iteration;
    } else if (key == "run_seed") {
      ls >> state.run_seed;
    } else if (key == "adam_step") {
      ls >> state.opt.step;
    } else if (key == "config") {
      std::string field;
      ls >> field;
      if (field == "in_channels") ls >> config.in_channels;
      else if (field == "stage_channels")
        ls >> config.stage_channels[0] >> config.stage_channels[1] >> config.stage_channels[2] >>
            config.stage_channels[3];
      else if (field == "embed_dim") ls >> config.embed_dim;
      else if (field == "num_classes") ls >> config.num_classes;
      else if (field == "cl_grid") ls >> config.cl_grid_h >> config.cl_grid_w;
      else fail(ErrorKind::ConfigError, "unknown checkpoint config field '" + field + "'");
    } else if (key == "tensor") {
      std::string qualified, rel;
      ls >> qualified >> rel;
      const auto dot = qualified.find('.');
      if (dot == std::string::npos)
        fail(ErrorKind::ConfigError, "malformed tensor line: " + line);
      const std::string role = qualified.substr(0, dot);
      const std::string name = qualified.substr(dot + 1);
      TensorF t = read_blob_f32((fs::path(directory) / rel).string());
      if (role == "student") state.student.tensors.emplace(name, std::move(t));
      else if (role == "teacher") state.teacher.tensors.emplace(name, std::move(t));
      else if (role == "reference") state.reference.tensors.emplace(name, std::move(t));
      else if (role == "adam_m") state.opt.m.emplace(name, std::move(t));
      else if (role == "adam_v") state.opt.v.emplace(name, std::move(t));
      else fail(ErrorKind::ConfigError, "unknown tensor role '" + role + "'");
    } else {
      fail(ErrorKind::ConfigError, "unknown checkpoint keyword '" + key + "'");
    }
  }
  if (!header) fail(ErrorKind::BadMagic, "missing checkpoint header in " + directory);
  state.student.config = config;
  state.teacher.config = config;
  state.reference.config = config;
  if (!state.student.same_structure(state.teacher) ||
      !state.student.same_structure(state.reference))
    fail(ErrorKind::CheckpointMismatch, "checkpoint roles disagree on parameter structure");
  return state;
}

TrainerState load_checkpoint(const std::string& directory, const ModelConfig& expected) {
  TrainerState state = load_checkpoint(directory);
  const ModelParams<float> probe = ModelParams<float>::seeded_init(expected, 0);
  if (!state.student.same_structure(probe))
    fail(ErrorKind::CheckpointMismatch,
         "checkpoint parameters are incompatible with the requested model configuration");
  return state;
}

}  // namespace cluda
