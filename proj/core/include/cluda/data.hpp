#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "cluda/rng.hpp"
#include "cluda/tensor.hpp"

namespace cluda {

inline constexpr std::uint8_t kIgnoreLabel = 255;

enum class Partition : std::uint8_t { Stuff = 0, Thing = 1 };
enum class Domain : std::uint8_t { Source = 0, Target = 1 };

struct ClassTaxonomy {
  std::vector<std::string> names;
  std::vector<Partition> partition;

  int num_classes() const { return static_cast<int>(names.size()); }
  bool is_stuff(int c) const { return partition[static_cast<std::size_t>(c)] == Partition::Stuff; }
  void validate() const;

  // 8 classes, 5 stuff + 3 thing: sky ground field water rock | disc bar dot.
  static ClassTaxonomy desk_default();
};

struct LabelMap {
  int h = 0, w = 0;
  std::vector<std::uint8_t> v;

  LabelMap() = default;
  LabelMap(int hh, int ww, std::uint8_t fill = 0)
      : h(hh), w(ww), v(static_cast<std::size_t>(hh) * ww, fill) {}

  std::uint8_t& at(int y, int x) { return v[static_cast<std::size_t>(y) * w + x]; }
  std::uint8_t at(int y, int x) const { return v[static_cast<std::size_t>(y) * w + x]; }
  std::int64_t size() const { return static_cast<std::int64_t>(v.size()); }
  bool operator==(const LabelMap&) const = default;
};

struct SegSample {
  TensorF image;  // HxWx3, values in [0,1]
  LabelMap label;
  Domain domain = Domain::Source;
  std::string id;
};

// Appearance transform that turns a source-domain image into a target-domain
// one; the identity transform means no domain gap.
struct ShiftParams {
  std::array<float, 3> gain{1.0f, 1.0f, 1.0f};
  std::array<float, 3> bias{0.0f, 0.0f, 0.0f};
  float noise_amplitude = 0.0f;
  float blur_sigma = 0.0f;

  bool is_identity() const {
    return gain == std::array<float, 3>{1.0f, 1.0f, 1.0f} &&
           bias == std::array<float, 3>{0.0f, 0.0f, 0.0f} && noise_amplitude == 0.0f &&
           blur_sigma == 0.0f;
  }
};

// Scene distribution shared by both domains plus the target-only shift.
struct DomainSpec {
  int height = 64;
  int width = 64;
  ClassTaxonomy taxonomy = ClassTaxonomy::desk_default();
  int blob_count_min = 3;
  int blob_count_max = 7;
  int thing_count_min = 4;
  int thing_count_max = 10;
  float thing_size_min = 0.04f;
  float thing_size_max = 0.09f;
  // Selection weights for blob stuff classes (ids 2..) and thing classes, in
  // taxonomy order; defaults are long-tailed to exercise rare class sampling.
  std::vector<double> blob_class_weights;
  std::vector<double> thing_class_weights;
  ShiftParams shift;
  std::uint64_t seed = 0;

  void validate() const;
  static DomainSpec desk_default();
};

SegSample generate_scene(const DomainSpec& spec, std::uint64_t sample_seed);
SegSample apply_domain_shift(const SegSample& sample, const DomainSpec& spec,
                             std::uint64_t sample_seed);

// Separable Gaussian blur with clamp-to-edge borders; sigma <= 0 is identity.
TensorF gaussian_blur(const TensorF& image, float sigma);

// ---------------------------------------------------------------------------
// On-disk dataset
// ---------------------------------------------------------------------------

struct ManifestEntry {
  std::string id;
  Domain domain = Domain::Source;
  std::string image_path;  // relative to the dataset directory
  std::string label_path;
};

struct DatasetManifest {
  int version = 1;
  ClassTaxonomy taxonomy;
  std::vector<ManifestEntry> samples;
  std::vector<double> source_freq;  // per-class pixel frequency, non-ignore
  std::vector<double> target_freq;

  int count(Domain d) const;
};

DatasetManifest write_dataset(const std::string& directory, const std::vector<SegSample>& samples,
                              const ClassTaxonomy& taxonomy);
DatasetManifest read_manifest(const std::string& directory);

SegSample load_sample(const std::string& directory, const ManifestEntry& entry, bool with_label);

// Recomputes f_c = (pixels of class c) / (total non-ignore pixels) over the
// stored label files of one domain.
std::vector<double> class_frequencies(const std::string& directory,
                                      const DatasetManifest& manifest, Domain domain);

// ---------------------------------------------------------------------------
// Rare class sampling
// ---------------------------------------------------------------------------

// Class-pick distribution softmax((1 - f_c) / temperature).
std::vector<double> rcs_distribution(const std::vector<double>& frequencies, double temperature);
int rcs_pick(const std::vector<double>& frequencies, double temperature, Rng& rng);

// Picks a class by RCS, then a uniformly random source sample containing it.
class RcsSampler {
 public:
  RcsSampler(std::vector<double> frequencies, double temperature,
             const std::vector<const LabelMap*>& source_labels);

  int pick_sample(Rng& rng) const;  // index into the source sample list
  int last_class() const { return last_class_; }

 private:
  std::vector<double> frequencies_;
  double temperature_;
  std::vector<std::vector<int>> samples_with_class_;
  mutable int last_class_ = -1;
};

}  // namespace cluda
