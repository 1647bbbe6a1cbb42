#include "cluda/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "cluda/error.hpp"
#include "cluda/io.hpp"

namespace fs = std::filesystem;

namespace cluda {

void ClassTaxonomy::validate() const {
  if (names.size() != partition.size())
    fail(ErrorKind::InvalidArgument, "taxonomy names/partition length mismatch");
  if (num_classes() < 2) fail(ErrorKind::InvalidArgument, "taxonomy needs at least 2 classes");
  bool stuff = false, thing = false;
  for (Partition p : partition) (p == Partition::Stuff ? stuff : thing) = true;
  if (!stuff || !thing)
    fail(ErrorKind::InvalidArgument, "taxonomy needs at least one stuff and one thing class");
  for (const std::string& n : names)
    if (n.empty() || n.find_first_of(" \t\n") != std::string::npos)
      fail(ErrorKind::InvalidArgument, "class names must be non-empty and whitespace-free");
}

ClassTaxonomy ClassTaxonomy::desk_default() {
  ClassTaxonomy t;
  t.names = {"sky", "ground", "field", "water", "rock", "disc", "bar", "dot"};
  t.partition = {Partition::Stuff, Partition::Stuff, Partition::Stuff, Partition::Stuff,
                 Partition::Stuff, Partition::Thing, Partition::Thing, Partition::Thing};
  return t;
}

void DomainSpec::validate() const {
  taxonomy.validate();
  if (height < 16 || width < 16) fail(ErrorKind::InvalidArgument, "scene dims must be >= 16");
  if (blob_count_min < 0 || blob_count_max < blob_count_min ||
      thing_count_min < 0 || thing_count_max < thing_count_min)
    fail(ErrorKind::InvalidArgument, "object count ranges are invalid");
  if (thing_size_min <= 0.0f || thing_size_max < thing_size_min)
    fail(ErrorKind::InvalidArgument, "thing size range is invalid");
}

DomainSpec DomainSpec::desk_default() {
  DomainSpec spec;
  spec.blob_class_weights = {0.60, 0.30, 0.10};
  spec.thing_class_weights = {0.65, 0.25, 0.10};
  spec.shift.gain = {0.80f, 0.95f, 1.15f};
  spec.shift.bias = {0.07f, 0.02f, -0.05f};
  spec.shift.noise_amplitude = 0.05f;
  spec.shift.blur_sigma = 0.7f;
  return spec;
}

namespace {

struct Color {
  float r, g, b;
};

// Base colors. Two thing classes sit deliberately close to a stuff class
// (disc~ground, dot~rock) so cross-partition pairs are hard negatives.
Color class_base_color(int c) {
  static const Color table[8] = {
      {0.55f, 0.75f, 0.95f},  // sky
      {0.45f, 0.35f, 0.22f},  // ground
      {0.28f, 0.60f, 0.24f},  // field
      {0.16f, 0.36f, 0.68f},  // water
      {0.52f, 0.52f, 0.55f},  // rock
      {0.62f, 0.32f, 0.20f},  // disc
      {0.90f, 0.80f, 0.20f},  // bar
      {0.58f, 0.58f, 0.63f},  // dot
  };
  if (c < 8) return table[c];
  // Golden-ratio hue walk for larger taxonomies.
  const double h = std::fmod(0.618033988749895 * (c - 7), 1.0) * 6.0;
  const int i = static_cast<int>(h);
  const double f = h - i;
  const double v = 0.78, s = 0.55;
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (i % 6) {
    case 0: return {float(v), float(t), float(p)};
    case 1: return {float(q), float(v), float(p)};
    case 2: return {float(p), float(v), float(t)};
    case 3: return {float(p), float(q), float(v)};
    case 4: return {float(t), float(p), float(v)};
    default: return {float(v), float(p), float(q)};
  }
}

int weighted_pick(const std::vector<double>& weights, Rng& rng) {
  double total = 0.0;
  for (double w : weights) total += w;
  if (total <= 0.0) fail(ErrorKind::InvalidArgument, "class weights must have positive mass");
  double u = rng.uniform() * total;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    u -= weights[i];
    if (u < 0.0) return static_cast<int>(i);
  }
  return static_cast<int>(weights.size()) - 1;
}

void paint_pixel(TensorF& img, LabelMap& lab, int y, int x, int cls, const Color& col) {
  lab.at(y, x) = static_cast<std::uint8_t>(cls);
  float* p = img.data.data() + (static_cast<std::size_t>(y) * lab.w + x) * 3;
  p[0] = col.r;
  p[1] = col.g;
  p[2] = col.b;
}

struct Jitter {
  float r, g, b;
};

Color jittered(const Color& base, const Jitter& j) {
  return {base.r + j.r, base.g + j.g, base.b + j.b};
}

// Paints a rotated shape: kind 0 = ellipse, 1 = bar (elongated rectangle),
// 2 = diamond. size is the characteristic half-extent in pixels.
void paint_shape(TensorF& img, LabelMap& lab, int cls, const Color& col, double cy, double cx,
                 double size_y, double size_x, double angle, int kind) {
  const double c = std::cos(angle), s = std::sin(angle);
  const double reach = std::max(size_y, size_x) * 1.5 + 1.0;
  const int y0 = std::max(0, static_cast<int>(std::floor(cy - reach)));
  const int y1 = std::min(lab.h - 1, static_cast<int>(std::ceil(cy + reach)));
  const int x0 = std::max(0, static_cast<int>(std::floor(cx - reach)));
  const int x1 = std::min(lab.w - 1, static_cast<int>(std::ceil(cx + reach)));
  for (int y = y0; y <= y1; ++y) {
    for (int x = x0; x <= x1; ++x) {
      const double dy = y - cy, dx = x - cx;
      const double ry = c * dy - s * dx;
      const double rx = s * dy + c * dx;
      bool inside = false;
      switch (kind) {
        case 0: {
          const double a = ry / size_y, b2 = rx / size_x;
          inside = a * a + b2 * b2 <= 1.0;
          break;
        }
        case 1:
          inside = std::abs(ry) <= size_y && std::abs(rx) <= size_x;
          break;
        default:
          inside = std::abs(ry) / size_y + std::abs(rx) / size_x <= 1.0;
          break;
      }
      if (inside) paint_pixel(img, lab, y, x, cls, col);
    }
  }
}

std::vector<int> stuff_blob_classes(const ClassTaxonomy& tax) {
  std::vector<int> ids;
  for (int c = 2; c < tax.num_classes(); ++c)
    if (tax.is_stuff(c)) ids.push_back(c);
  return ids;
}

std::vector<int> thing_classes(const ClassTaxonomy& tax) {
  std::vector<int> ids;
  for (int c = 0; c < tax.num_classes(); ++c)
    if (!tax.is_stuff(c)) ids.push_back(c);
  return ids;
}

std::vector<double> padded_weights(const std::vector<double>& weights, std::size_t n) {
  std::vector<double> w = weights;
  w.resize(n, w.empty() ? 1.0 : 0.0);
  if (weights.empty()) std::fill(w.begin(), w.end(), 1.0);
  return w;
}

}  // namespace

SegSample generate_scene(const DomainSpec& spec, std::uint64_t sample_seed) {
  spec.validate();
  Rng rng(Rng::derive(spec.seed, sample_seed));
  const int h = spec.height, w = spec.width;
  SegSample out;
  out.image = TensorF::zeros({h, w, 3});
  out.label = LabelMap(h, w, 0);
  out.domain = Domain::Source;
  out.id = "scene-" + std::to_string(sample_seed);

  // Stuff layers: sky band over a ground band.
  const int horizon = std::clamp(static_cast<int>(std::lround(h * rng.uniform(0.30, 0.50))), 1, h - 1);
  for (int y = 0; y < h; ++y) {
    const int cls = y < horizon ? 0 : 1;
    const Color col = class_base_color(cls);
    for (int x = 0; x < w; ++x) paint_pixel(out.image, out.label, y, x, cls, col);
  }

  // Large stuff blobs.
  const std::vector<int> blob_ids = stuff_blob_classes(spec.taxonomy);
  if (!blob_ids.empty()) {
    const std::vector<double> bw = padded_weights(spec.blob_class_weights, blob_ids.size());
    const int blobs = spec.blob_count_min +
                      static_cast<int>(rng.uniform_u64(
                          static_cast<std::uint64_t>(spec.blob_count_max - spec.blob_count_min + 1)));
    for (int i = 0; i < blobs; ++i) {
      const int cls = blob_ids[static_cast<std::size_t>(weighted_pick(bw, rng))];
      const double cy = rng.uniform(0.0, h);
      const double cx = rng.uniform(0.0, w);
      const double ry = rng.uniform(0.12, 0.30) * std::min(h, w);
      const double rx = rng.uniform(0.12, 0.30) * std::min(h, w);
      const double angle = rng.uniform(0.0, 3.14159265358979323846);
      Jitter j{float(rng.uniform(-0.08, 0.08)), float(rng.uniform(-0.08, 0.08)),
               float(rng.uniform(-0.08, 0.08))};
      paint_shape(out.image, out.label, cls, jittered(class_base_color(cls), j), cy, cx, ry, rx,
                  angle, 0);
    }
  }

  // Small thing objects on top.
  const std::vector<int> thing_ids = thing_classes(spec.taxonomy);
  if (!thing_ids.empty() && spec.thing_count_max > 0) {
    const std::vector<double> tw = padded_weights(spec.thing_class_weights, thing_ids.size());
    const int things = spec.thing_count_min +
                       static_cast<int>(rng.uniform_u64(static_cast<std::uint64_t>(
                           spec.thing_count_max - spec.thing_count_min + 1)));
    for (int i = 0; i < things; ++i) {
      const int pick = weighted_pick(tw, rng);
      const int cls = thing_ids[static_cast<std::size_t>(pick)];
      const double size = rng.uniform(spec.thing_size_min, spec.thing_size_max) * std::min(h, w);
      const double cy = rng.uniform(0.0, h);
      const double cx = rng.uniform(0.0, w);
      const double angle = rng.uniform(0.0, 3.14159265358979323846);
      Jitter j{float(rng.uniform(-0.08, 0.08)), float(rng.uniform(-0.08, 0.08)),
               float(rng.uniform(-0.08, 0.08))};
      const Color col = jittered(class_base_color(cls), j);
      switch (pick % 3) {
        case 0: paint_shape(out.image, out.label, cls, col, cy, cx, size, size, 0.0, 0); break;
        case 1:
          paint_shape(out.image, out.label, cls, col, cy, cx, 0.55 * size, 2.2 * size, angle, 1);
          break;
        default:
          paint_shape(out.image, out.label, cls, col, cy, cx, 1.2 * size, 1.2 * size, angle, 2);
          break;
      }
    }
  }

  // Per-pixel texture.
  for (float& v : out.image.data)
    v = std::clamp(v + static_cast<float>(rng.uniform(-0.035, 0.035)), 0.0f, 1.0f);
  return out;
}

TensorF gaussian_blur(const TensorF& image, float sigma) {
  if (sigma <= 0.0f) return image;
  if (image.shape.size() != 3) fail(ErrorKind::ShapeMismatch, "gaussian_blur expects HxWxC");
  const int h = image.shape[0], w = image.shape[1], ch = image.shape[2];
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0f * sigma)));
  std::vector<float> k(static_cast<std::size_t>(2 * radius + 1));
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    const double v = std::exp(-0.5 * (static_cast<double>(i) * i) / (sigma * sigma));
    k[static_cast<std::size_t>(i + radius)] = static_cast<float>(v);
    sum += v;
  }
  for (float& v : k) v = static_cast<float>(v / sum);

  TensorF tmp = TensorF::zeros(image.shape);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < ch; ++c) {
        double acc = 0.0;
        for (int i = -radius; i <= radius; ++i) {
          const int xx = std::clamp(x + i, 0, w - 1);
          acc += k[static_cast<std::size_t>(i + radius)] *
                 image.data[(static_cast<std::size_t>(y) * w + xx) * ch + c];
        }
        tmp.data[(static_cast<std::size_t>(y) * w + x) * ch + c] = static_cast<float>(acc);
      }
  TensorF out = TensorF::zeros(image.shape);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < ch; ++c) {
        double acc = 0.0;
        for (int i = -radius; i <= radius; ++i) {
          const int yy = std::clamp(y + i, 0, h - 1);
          acc += k[static_cast<std::size_t>(i + radius)] *
                 tmp.data[(static_cast<std::size_t>(yy) * w + x) * ch + c];
        }
        out.data[(static_cast<std::size_t>(y) * w + x) * ch + c] = static_cast<float>(acc);
      }
  return out;
}

SegSample apply_domain_shift(const SegSample& sample, const DomainSpec& spec,
                             std::uint64_t sample_seed) {
  if (sample.domain != Domain::Source)
    fail(ErrorKind::InvalidArgument, "domain shift applies to source samples only");
  SegSample out = sample;
  out.domain = Domain::Target;
  const ShiftParams& sp = spec.shift;
  if (sp.is_identity()) return out;

  const int h = sample.image.shape[0], w = sample.image.shape[1];
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      float* p = out.image.data.data() + (static_cast<std::size_t>(y) * w + x) * 3;
      for (int c = 0; c < 3; ++c) p[c] = sp.gain[static_cast<std::size_t>(c)] * p[c] +
                                         sp.bias[static_cast<std::size_t>(c)];
    }
  if (sp.noise_amplitude > 0.0f) {
    Rng rng(Rng::derive(spec.seed ^ 0x7461726765745ULL, sample_seed));
    for (float& v : out.image.data)
      v += sp.noise_amplitude * static_cast<float>(rng.uniform(-1.0, 1.0));
  }
  out.image = gaussian_blur(out.image, sp.blur_sigma);
  for (float& v : out.image.data) v = std::clamp(v, 0.0f, 1.0f);
  return out;
}

// ---------------------------------------------------------------------------
// Dataset persistence
// ---------------------------------------------------------------------------

namespace {

std::string domain_name(Domain d) { return d == Domain::Source ? "source" : "target"; }

Domain domain_from(const std::string& s) {
  if (s == "source") return Domain::Source;
  if (s == "target") return Domain::Target;
  fail(ErrorKind::ConfigError, "unknown domain tag '" + s + "'");
}

std::vector<double> count_to_freq(const std::vector<std::int64_t>& counts) {
  std::int64_t total = 0;
  for (std::int64_t c : counts) total += c;
  std::vector<double> f(counts.size(), 0.0);
  if (total > 0)
    for (std::size_t i = 0; i < counts.size(); ++i)
      f[i] = static_cast<double>(counts[i]) / static_cast<double>(total);
  return f;
}

void accumulate_counts(const LabelMap& label, int num_classes, std::vector<std::int64_t>& counts) {
  for (std::uint8_t v : label.v) {
    if (v == kIgnoreLabel) continue;
    if (v >= num_classes)
      fail(ErrorKind::InvalidArgument, "label value " + std::to_string(v) + " out of range");
    counts[v] += 1;
  }
}

std::string freq_line(const std::string& tag, const std::vector<double>& f) {
  std::string line = "freq " + tag;
  char buf[64];
  for (double v : f) {
    std::snprintf(buf, sizeof buf, " %.17g", v);
    line += buf;
  }
  return line;
}

}  // namespace

int DatasetManifest::count(Domain d) const {
  int n = 0;
  for (const auto& e : samples)
    if (e.domain == d) ++n;
  return n;
}

DatasetManifest write_dataset(const std::string& directory, const std::vector<SegSample>& samples,
                              const ClassTaxonomy& taxonomy) {
  taxonomy.validate();
  std::error_code ec;
  fs::create_directories(fs::path(directory) / "images", ec);
  fs::create_directories(fs::path(directory) / "labels", ec);
  if (ec) fail(ErrorKind::IoFailure, "cannot create dataset directory " + directory);

  DatasetManifest m;
  m.taxonomy = taxonomy;
  std::vector<std::int64_t> src_counts(static_cast<std::size_t>(taxonomy.num_classes()), 0);
  std::vector<std::int64_t> tgt_counts(src_counts);
  for (const SegSample& s : samples) {
    ManifestEntry e;
    e.id = s.id;
    e.domain = s.domain;
    e.image_path = "images/" + s.id + ".img.cldt";
    e.label_path = "labels/" + s.id + ".lab.cldt";
    write_blob_f32((fs::path(directory) / e.image_path).string(), s.image);
    write_blob_u8((fs::path(directory) / e.label_path).string(), {s.label.h, s.label.w},
                  s.label.v);
    accumulate_counts(s.label, taxonomy.num_classes(),
                      s.domain == Domain::Source ? src_counts : tgt_counts);
    m.samples.push_back(std::move(e));
  }
  m.source_freq = count_to_freq(src_counts);
  m.target_freq = count_to_freq(tgt_counts);

  std::ofstream out(fs::path(directory) / "manifest.txt");
  if (!out) fail(ErrorKind::IoFailure, "cannot write manifest in " + directory);
  out << "cluda-dataset " << m.version << "\n";
  out << "classes " << taxonomy.num_classes() << "\n";
  for (int c = 0; c < taxonomy.num_classes(); ++c)
    out << "class " << c << " " << taxonomy.names[static_cast<std::size_t>(c)] << " "
        << (taxonomy.is_stuff(c) ? "stuff" : "thing") << "\n";
  out << freq_line("source", m.source_freq) << "\n";
  out << freq_line("target", m.target_freq) << "\n";
  out << "samples " << m.samples.size() << "\n";
  for (const auto& e : m.samples)
    out << "sample " << e.id << " " << domain_name(e.domain) << " " << e.image_path << " "
        << e.label_path << "\n";
  out.flush();
  if (!out) fail(ErrorKind::IoFailure, "manifest write failed in " + directory);
  return m;
}

DatasetManifest read_manifest(const std::string& directory) {
  std::ifstream in(fs::path(directory) / "manifest.txt");
  if (!in) fail(ErrorKind::IoFailure, "cannot open manifest in " + directory);
  DatasetManifest m;
  std::string line;
  int declared_classes = -1;
  std::size_t declared_samples = 0;
  bool have_samples_line = false;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "cluda-dataset") {
      ls >> m.version;
      if (m.version != 1)
        fail(ErrorKind::BadVersion, "unsupported manifest version " + std::to_string(m.version));
    } else if (key == "classes") {
      ls >> declared_classes;
    } else if (key == "class") {
      int id;
      std::string name, part;
      ls >> id >> name >> part;
      if (!ls || (part != "stuff" && part != "thing"))
        fail(ErrorKind::ConfigError, "malformed class line: " + line);
      if (id != static_cast<int>(m.taxonomy.names.size()))
        fail(ErrorKind::ConfigError, "class ids must be dense and ordered");
      m.taxonomy.names.push_back(name);
      m.taxonomy.partition.push_back(part == "stuff" ? Partition::Stuff : Partition::Thing);
    } else if (key == "freq") {
      std::string tag;
      ls >> tag;
      std::vector<double> f;
      double v;
      while (ls >> v) f.push_back(v);
      if (tag == "source")
        m.source_freq = std::move(f);
      else if (tag == "target")
        m.target_freq = std::move(f);
      else
        fail(ErrorKind::ConfigError, "unknown freq tag '" + tag + "'");
    } else if (key == "samples") {
      ls >> declared_samples;
      have_samples_line = true;
    } else if (key == "sample") {
      ManifestEntry e;
      std::string dom;
      ls >> e.id >> dom >> e.image_path >> e.label_path;
      if (!ls) fail(ErrorKind::ConfigError, "malformed sample line: " + line);
      e.domain = domain_from(dom);
      m.samples.push_back(std::move(e));
    } else {
      fail(ErrorKind::ConfigError, "unknown manifest keyword '" + key + "'");
    }
  }
  m.taxonomy.validate();
  if (declared_classes != m.taxonomy.num_classes())
    fail(ErrorKind::ConfigError, "manifest class count mismatch");
  if (!have_samples_line || declared_samples != m.samples.size())
    fail(ErrorKind::ConfigError, "manifest sample count mismatch");
  for (const auto* f : {&m.source_freq, &m.target_freq}) {
    if (f->size() != static_cast<std::size_t>(m.taxonomy.num_classes()))
      fail(ErrorKind::ConfigError, "manifest frequency vector length mismatch");
    double sum = 0.0;
    for (double v : *f) sum += v;
    if (std::abs(sum - 1.0) > 1e-9)
      fail(ErrorKind::ConfigError, "manifest frequencies must sum to 1");
  }
  return m;
}

SegSample load_sample(const std::string& directory, const ManifestEntry& entry, bool with_label) {
  SegSample s;
  s.id = entry.id;
  s.domain = entry.domain;
  s.image = read_blob_f32((fs::path(directory) / entry.image_path).string());
  if (s.image.shape.size() != 3 || s.image.shape[2] != 3)
    fail(ErrorKind::ShapeMismatch, "image blob must be HxWx3: " + entry.image_path);
  if (with_label) {
    Blob b = read_blob((fs::path(directory) / entry.label_path).string());
    if (b.dtype != BlobDtype::U8 || b.shape.size() != 2)
      fail(ErrorKind::ShapeMismatch, "label blob must be u8 HxW: " + entry.label_path);
    s.label.h = b.shape[0];
    s.label.w = b.shape[1];
    s.label.v = std::move(b.u8);
  }
  return s;
}

std::vector<double> class_frequencies(const std::string& directory,
                                      const DatasetManifest& manifest, Domain domain) {
  std::vector<std::int64_t> counts(static_cast<std::size_t>(manifest.taxonomy.num_classes()), 0);
  for (const auto& e : manifest.samples) {
    if (e.domain != domain) continue;
    const SegSample s = load_sample(directory, e, true);
    accumulate_counts(s.label, manifest.taxonomy.num_classes(), counts);
  }
  return count_to_freq(counts);
}

// ---------------------------------------------------------------------------
// Rare class sampling
// ---------------------------------------------------------------------------

std::vector<double> rcs_distribution(const std::vector<double>& frequencies, double temperature) {
  if (temperature <= 0.0) fail(ErrorKind::InvalidArgument, "rcs temperature must be positive");
  if (frequencies.empty()) fail(ErrorKind::EmptyInput, "rcs needs at least one class frequency");
  double sum_f = 0.0;
  for (double f : frequencies) sum_f += f;
  if (std::abs(sum_f - 1.0) > 1e-6)
    fail(ErrorKind::InvalidArgument, "rcs frequencies must sum to 1");
  std::vector<double> logits(frequencies.size());
  double mx = -1e300;
  for (std::size_t i = 0; i < frequencies.size(); ++i) {
    logits[i] = (1.0 - frequencies[i]) / temperature;
    mx = std::max(mx, logits[i]);
  }
  double z = 0.0;
  for (double& l : logits) {
    l = std::exp(l - mx);
    z += l;
  }
  for (double& l : logits) l /= z;
  return logits;
}

int rcs_pick(const std::vector<double>& frequencies, double temperature, Rng& rng) {
  const std::vector<double> p = rcs_distribution(frequencies, temperature);
  double u = rng.uniform();
  for (std::size_t i = 0; i < p.size(); ++i) {
    u -= p[i];
    if (u < 0.0) return static_cast<int>(i);
  }
  return static_cast<int>(p.size()) - 1;
}

RcsSampler::RcsSampler(std::vector<double> frequencies, double temperature,
                       const std::vector<const LabelMap*>& source_labels)
    : frequencies_(std::move(frequencies)), temperature_(temperature) {
  samples_with_class_.resize(frequencies_.size());
  for (std::size_t s = 0; s < source_labels.size(); ++s) {
    std::vector<bool> present(frequencies_.size(), false);
    for (std::uint8_t v : source_labels[s]->v)
      if (v != kIgnoreLabel && v < frequencies_.size()) present[v] = true;
    for (std::size_t c = 0; c < present.size(); ++c)
      if (present[c]) samples_with_class_[c].push_back(static_cast<int>(s));
  }
}

int RcsSampler::pick_sample(Rng& rng) const {
  // Classes absent from every source image cannot be served; renormalize the
  // pick distribution over the classes that can.
  std::vector<double> p = rcs_distribution(frequencies_, temperature_);
  double mass = 0.0;
  for (std::size_t c = 0; c < p.size(); ++c) {
    if (samples_with_class_[c].empty()) p[c] = 0.0;
    mass += p[c];
  }
  if (mass <= 0.0) fail(ErrorKind::EmptyInput, "no source sample contains any class");
  double u = rng.uniform() * mass;
  std::size_t cls = p.size() - 1;
  for (std::size_t c = 0; c < p.size(); ++c) {
    u -= p[c];
    if (u < 0.0) {
      cls = c;
      break;
    }
  }
  while (samples_with_class_[cls].empty()) --cls;
  last_class_ = static_cast<int>(cls);
  const auto& pool = samples_with_class_[cls];
  return pool[rng.uniform_index(pool.size())];
}

}  // namespace cluda
