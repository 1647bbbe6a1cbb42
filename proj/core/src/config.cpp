#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "cluda/error.hpp"
#include "cluda/experiment.hpp"

namespace cluda {

namespace {

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fmt_float(float v) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(v));
  return buf;
}

std::string_view multires_name(MultiResMode m) {
  switch (m) {
    case MultiResMode::Off: return "off";
    case MultiResMode::LrOnly: return "lr_only";
    case MultiResMode::LrHrSum: return "lr_hr_sum";
    case MultiResMode::LrHrWeighted: return "lr_hr_weighted";
  }
  return "off";
}

MultiResMode multires_from(const std::string& s) {
  if (s == "off") return MultiResMode::Off;
  if (s == "lr_only") return MultiResMode::LrOnly;
  if (s == "lr_hr_sum") return MultiResMode::LrHrSum;
  if (s == "lr_hr_weighted") return MultiResMode::LrHrWeighted;
  fail(ErrorKind::ConfigError, "unknown multires mode '" + s + "'");
}

struct KeyValue {
  std::string section, key, value;
};

std::vector<KeyValue> tokenize(const std::string& text) {
  std::vector<KeyValue> out;
  std::istringstream in(text);
  std::string line, section;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    auto strip = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      if (b == std::string::npos) return std::string();
      const auto e = s.find_last_not_of(" \t\r");
      return s.substr(b, e - b + 1);
    };
    line = strip(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']')
        fail(ErrorKind::ConfigError, "malformed section at line " + std::to_string(line_no));
      section = strip(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      fail(ErrorKind::ConfigError, "expected key = value at line " + std::to_string(line_no));
    KeyValue kv;
    kv.section = section;
    kv.key = strip(line.substr(0, eq));
    kv.value = strip(line.substr(eq + 1));
    if (kv.section.empty() || kv.key.empty())
      fail(ErrorKind::ConfigError, "key outside a section at line " + std::to_string(line_no));
    out.push_back(std::move(kv));
  }
  return out;
}

[[noreturn]] void unknown_key(const KeyValue& kv) {
  fail(ErrorKind::ConfigError, "unknown config key '" + kv.section + "." + kv.key + "'");
}

double parse_double(const KeyValue& kv) {
  std::size_t used = 0;
  double v = 0;
  try {
    v = std::stod(kv.value, &used);
  } catch (const std::exception&) {
    fail(ErrorKind::ConfigError, "bad number for '" + kv.section + "." + kv.key + "'");
  }
  if (used != kv.value.size())
    fail(ErrorKind::ConfigError, "bad number for '" + kv.section + "." + kv.key + "'");
  return v;
}

std::int64_t parse_int(const KeyValue& kv) {
  std::size_t used = 0;
  long long v = 0;
  try {
    v = std::stoll(kv.value, &used);
  } catch (const std::exception&) {
    fail(ErrorKind::ConfigError, "bad integer for '" + kv.section + "." + kv.key + "'");
  }
  if (used != kv.value.size())
    fail(ErrorKind::ConfigError, "bad integer for '" + kv.section + "." + kv.key + "'");
  return v;
}

std::uint64_t parse_u64(const KeyValue& kv) {
  std::size_t used = 0;
  unsigned long long v = 0;
  try {
    v = std::stoull(kv.value, &used);
  } catch (const std::exception&) {
    fail(ErrorKind::ConfigError, "bad integer for '" + kv.section + "." + kv.key + "'");
  }
  if (used != kv.value.size())
    fail(ErrorKind::ConfigError, "bad integer for '" + kv.section + "." + kv.key + "'");
  return v;
}

bool parse_bool(const KeyValue& kv) {
  if (kv.value == "true") return true;
  if (kv.value == "false") return false;
  fail(ErrorKind::ConfigError,
       "expected true/false for '" + kv.section + "." + kv.key + "'");
}

std::vector<std::string> split_list(const std::string& value) {
  std::vector<std::string> out;
  std::istringstream in(value);
  std::string tok;
  while (in >> tok) out.push_back(tok);
  return out;
}

std::vector<double> parse_double_list(const KeyValue& kv) {
  std::vector<double> out;
  for (const std::string& tok : split_list(kv.value)) {
    KeyValue item = kv;
    item.value = tok;
    out.push_back(parse_double(item));
  }
  return out;
}

}  // namespace

void ExperimentConfig::validate() const {
  data.spec.validate();
  if (data.source_count < 1 || data.target_count < 1)
    fail(ErrorKind::ConfigError, "dataset needs at least one sample per domain");
  train.validate(data.spec.height, data.spec.width);
  if (train.model.num_classes != data.spec.taxonomy.num_classes())
    fail(ErrorKind::ConfigError, "model num_classes must match the taxonomy");
  if (run.eval_interval < 1) fail(ErrorKind::ConfigError, "eval_interval must be >= 1");
  if (run.eval_holdout < 1 || run.eval_holdout >= data.target_count)
    fail(ErrorKind::ConfigError, "eval_holdout must leave at least one training target");
  if (run.checkpoint_interval < 0)
    fail(ErrorKind::ConfigError, "checkpoint_interval must be >= 0");
  if (run.out_dir.empty() || run.dataset_dir.empty())
    fail(ErrorKind::ConfigError, "out_dir and dataset_dir must be set");
}

std::string serialize_config(const ExperimentConfig& c) {
  std::ostringstream o;
  const DomainSpec& d = c.data.spec;
  o << "[data]\n";
  o << "height = " << d.height << "\n";
  o << "width = " << d.width << "\n";
  o << "source_count = " << c.data.source_count << "\n";
  o << "target_count = " << c.data.target_count << "\n";
  o << "seed = " << d.seed << "\n";
  o << "blob_count_min = " << d.blob_count_min << "\n";
  o << "blob_count_max = " << d.blob_count_max << "\n";
  o << "thing_count_min = " << d.thing_count_min << "\n";
  o << "thing_count_max = " << d.thing_count_max << "\n";
  o << "thing_size_min = " << fmt_float(d.thing_size_min) << "\n";
  o << "thing_size_max = " << fmt_float(d.thing_size_max) << "\n";
  o << "class_names =";
  for (const std::string& n : d.taxonomy.names) o << " " << n;
  o << "\n";
  o << "class_kinds =";
  for (Partition p : d.taxonomy.partition) o << " " << (p == Partition::Stuff ? "stuff" : "thing");
  o << "\n";
  o << "blob_weights =";
  for (double w : d.blob_class_weights) o << " " << fmt_double(w);
  o << "\n";
  o << "thing_weights =";
  for (double w : d.thing_class_weights) o << " " << fmt_double(w);
  o << "\n";
  o << "shift_gain = " << fmt_float(d.shift.gain[0]) << " " << fmt_float(d.shift.gain[1]) << " "
    << fmt_float(d.shift.gain[2]) << "\n";
  o << "shift_bias = " << fmt_float(d.shift.bias[0]) << " " << fmt_float(d.shift.bias[1]) << " "
    << fmt_float(d.shift.bias[2]) << "\n";
  o << "shift_noise = " << fmt_float(d.shift.noise_amplitude) << "\n";
  o << "shift_blur = " << fmt_float(d.shift.blur_sigma) << "\n";

  const ModelConfig& m = c.train.model;
  o << "\n[model]\n";
  o << "embed_dim = " << m.embed_dim << "\n";
  o << "stage_channels = " << m.stage_channels[0] << " " << m.stage_channels[1] << " "
    << m.stage_channels[2] << " " << m.stage_channels[3] << "\n";
  o << "cl_grid = " << m.cl_grid_h << " " << m.cl_grid_w << "\n";

  const CLConfig& cl = c.train.cl;
  o << "\n[cl]\n";
  o << "tau = " << fmt_double(cl.tau) << "\n";
  o << "beta = " << fmt_double(cl.beta) << "\n";
  o << "lambda_fd = " << fmt_double(cl.lambda_fd) << "\n";
  o << "max_anchors_per_class = " << cl.max_anchors_per_class << "\n";
  o << "max_positives = " << cl.max_positives << "\n";
  o << "max_negatives = " << cl.max_negatives << "\n";
  o << "stuff_thing_masking = " << (cl.stuff_thing_masking ? "true" : "false") << "\n";
  o << "stuff_only = " << (cl.stuff_only ? "true" : "false") << "\n";
  o << "mixed_prose_pools = " << (cl.mixed_prose_pools ? "true" : "false") << "\n";

  const ScheduleConfig& s = c.train.schedule;
  o << "\n[schedule]\n";
  o << "lr_encoder = " << fmt_double(s.lr_encoder) << "\n";
  o << "lr_decoder = " << fmt_double(s.lr_decoder) << "\n";
  o << "beta1 = " << fmt_double(s.beta1) << "\n";
  o << "beta2 = " << fmt_double(s.beta2) << "\n";
  o << "weight_decay = " << fmt_double(s.weight_decay) << "\n";
  o << "batch_size = " << s.batch_size << "\n";
  o << "ema_alpha = " << fmt_double(s.ema_alpha) << "\n";
  o << "warmup_iters = " << s.warmup_iters << "\n";
  o << "warmup_floor = " << fmt_double(s.warmup_floor) << "\n";
  o << "poly_power = " << fmt_double(s.poly_power) << "\n";
  o << "total_iters = " << s.total_iters << "\n";

  const AugmentParams& a = c.train.augment;
  o << "\n[augment]\n";
  o << "jitter_strength = " << fmt_double(a.jitter_strength) << "\n";
  o << "jitter_prob = " << fmt_double(a.jitter_prob) << "\n";
  o << "blur_sigma_min = " << fmt_double(a.blur_sigma_min) << "\n";
  o << "blur_sigma_max = " << fmt_double(a.blur_sigma_max) << "\n";
  o << "blur_prob = " << fmt_double(a.blur_prob) << "\n";

  o << "\n[mode]\n";
  o << "cl_on = " << (c.train.cl_enabled ? "true" : "false") << "\n";
  o << "cl_weighted = " << (c.train.cl_weighted ? "true" : "false") << "\n";
  o << "multires = " << multires_name(c.train.multires) << "\n";
  o << "entropy_crop = " << (c.train.entropy_cropping ? "true" : "false") << "\n";
  o << "lr_scale = " << fmt_double(c.train.lr_scale) << "\n";
  o << "hr_crop = " << c.train.hr_crop << "\n";
  o << "rcs_temperature = " << fmt_double(c.train.rcs_temperature) << "\n";

  o << "\n[run]\n";
  o << "seed = " << c.run.seed << "\n";
  o << "out_dir = " << c.run.out_dir << "\n";
  o << "dataset_dir = " << c.run.dataset_dir << "\n";
  o << "eval_interval = " << c.run.eval_interval << "\n";
  o << "eval_holdout = " << c.run.eval_holdout << "\n";
  o << "checkpoint_interval = " << c.run.checkpoint_interval << "\n";
  o << "resume = " << c.run.resume_from << "\n";
  return o.str();
}

ExperimentConfig parse_config(const std::string& text) {
  ExperimentConfig c;
  std::vector<std::string> names, kinds;
  for (const KeyValue& kv : tokenize(text)) {
    DomainSpec& d = c.data.spec;
    if (kv.section == "data") {
      if (kv.key == "height") d.height = static_cast<int>(parse_int(kv));
      else if (kv.key == "width") d.width = static_cast<int>(parse_int(kv));
      else if (kv.key == "source_count") c.data.source_count = static_cast<int>(parse_int(kv));
      else if (kv.key == "target_count") c.data.target_count = static_cast<int>(parse_int(kv));
      else if (kv.key == "seed") d.seed = parse_u64(kv);
      else if (kv.key == "blob_count_min") d.blob_count_min = static_cast<int>(parse_int(kv));
      else if (kv.key == "blob_count_max") d.blob_count_max = static_cast<int>(parse_int(kv));
      else if (kv.key == "thing_count_min") d.thing_count_min = static_cast<int>(parse_int(kv));
      else if (kv.key == "thing_count_max") d.thing_count_max = static_cast<int>(parse_int(kv));
      else if (kv.key == "thing_size_min") d.thing_size_min = static_cast<float>(parse_double(kv));
      else if (kv.key == "thing_size_max") d.thing_size_max = static_cast<float>(parse_double(kv));
      else if (kv.key == "class_names") names = split_list(kv.value);
      else if (kv.key == "class_kinds") kinds = split_list(kv.value);
      else if (kv.key == "blob_weights") d.blob_class_weights = parse_double_list(kv);
      else if (kv.key == "thing_weights") d.thing_class_weights = parse_double_list(kv);
      else if (kv.key == "shift_gain" || kv.key == "shift_bias") {
        const std::vector<double> v = parse_double_list(kv);
        if (v.size() != 3)
          fail(ErrorKind::ConfigError, "'" + kv.section + "." + kv.key + "' needs 3 values");
        auto& arr = kv.key == "shift_gain" ? d.shift.gain : d.shift.bias;
        for (int i = 0; i < 3; ++i) arr[static_cast<std::size_t>(i)] = static_cast<float>(v[i]);
      } else if (kv.key == "shift_noise")
        d.shift.noise_amplitude = static_cast<float>(parse_double(kv));
      else if (kv.key == "shift_blur") d.shift.blur_sigma = static_cast<float>(parse_double(kv));
      else unknown_key(kv);
    } else if (kv.section == "model") {
      ModelConfig& m = c.train.model;
      if (kv.key == "embed_dim") m.embed_dim = static_cast<int>(parse_int(kv));
      else if (kv.key == "stage_channels") {
        const std::vector<double> v = parse_double_list(kv);
        if (v.size() != 4)
          fail(ErrorKind::ConfigError, "'model.stage_channels' needs 4 values");
        for (int i = 0; i < 4; ++i)
          m.stage_channels[static_cast<std::size_t>(i)] = static_cast<int>(v[static_cast<std::size_t>(i)]);
      } else if (kv.key == "cl_grid") {
        const std::vector<double> v = parse_double_list(kv);
        if (v.size() != 2) fail(ErrorKind::ConfigError, "'model.cl_grid' needs 2 values");
        m.cl_grid_h = static_cast<int>(v[0]);
        m.cl_grid_w = static_cast<int>(v[1]);
      } else unknown_key(kv);
    } else if (kv.section == "cl") {
      CLConfig& cl = c.train.cl;
      if (kv.key == "tau") cl.tau = parse_double(kv);
      else if (kv.key == "beta") cl.beta = parse_double(kv);
      else if (kv.key == "lambda_fd") cl.lambda_fd = parse_double(kv);
      else if (kv.key == "max_anchors_per_class")
        cl.max_anchors_per_class = static_cast<int>(parse_int(kv));
      else if (kv.key == "max_positives") cl.max_positives = static_cast<int>(parse_int(kv));
      else if (kv.key == "max_negatives") cl.max_negatives = static_cast<int>(parse_int(kv));
      else if (kv.key == "stuff_thing_masking") cl.stuff_thing_masking = parse_bool(kv);
      else if (kv.key == "stuff_only") cl.stuff_only = parse_bool(kv);
      else if (kv.key == "mixed_prose_pools") cl.mixed_prose_pools = parse_bool(kv);
      else unknown_key(kv);
    } else if (kv.section == "schedule") {
      ScheduleConfig& s = c.train.schedule;
      if (kv.key == "lr_encoder") s.lr_encoder = parse_double(kv);
      else if (kv.key == "lr_decoder") s.lr_decoder = parse_double(kv);
      else if (kv.key == "beta1") s.beta1 = parse_double(kv);
      else if (kv.key == "beta2") s.beta2 = parse_double(kv);
      else if (kv.key == "weight_decay") s.weight_decay = parse_double(kv);
      else if (kv.key == "batch_size") s.batch_size = static_cast<int>(parse_int(kv));
      else if (kv.key == "ema_alpha") s.ema_alpha = parse_double(kv);
      else if (kv.key == "warmup_iters") s.warmup_iters = static_cast<int>(parse_int(kv));
      else if (kv.key == "warmup_floor") s.warmup_floor = parse_double(kv);
      else if (kv.key == "poly_power") s.poly_power = parse_double(kv);
      else if (kv.key == "total_iters") s.total_iters = static_cast<int>(parse_int(kv));
      else unknown_key(kv);
    } else if (kv.section == "augment") {
      AugmentParams& a = c.train.augment;
      if (kv.key == "jitter_strength") a.jitter_strength = parse_double(kv);
      else if (kv.key == "jitter_prob") a.jitter_prob = parse_double(kv);
      else if (kv.key == "blur_sigma_min") a.blur_sigma_min = parse_double(kv);
      else if (kv.key == "blur_sigma_max") a.blur_sigma_max = parse_double(kv);
      else if (kv.key == "blur_prob") a.blur_prob = parse_double(kv);
      else unknown_key(kv);
    } else if (kv.section == "mode") {
      if (kv.key == "cl_on") c.train.cl_enabled = parse_bool(kv);
      else if (kv.key == "cl_weighted") c.train.cl_weighted = parse_bool(kv);
      else if (kv.key == "multires") c.train.multires = multires_from(kv.value);
      else if (kv.key == "entropy_crop") c.train.entropy_cropping = parse_bool(kv);
      else if (kv.key == "lr_scale") c.train.lr_scale = parse_double(kv);
      else if (kv.key == "hr_crop") c.train.hr_crop = static_cast<int>(parse_int(kv));
      else if (kv.key == "rcs_temperature") c.train.rcs_temperature = parse_double(kv);
      else unknown_key(kv);
    } else if (kv.section == "run") {
      if (kv.key == "seed") c.run.seed = parse_u64(kv);
      else if (kv.key == "out_dir") c.run.out_dir = kv.value;
      else if (kv.key == "dataset_dir") c.run.dataset_dir = kv.value;
      else if (kv.key == "eval_interval") c.run.eval_interval = static_cast<int>(parse_int(kv));
      else if (kv.key == "eval_holdout") c.run.eval_holdout = static_cast<int>(parse_int(kv));
      else if (kv.key == "checkpoint_interval")
        c.run.checkpoint_interval = static_cast<int>(parse_int(kv));
      else if (kv.key == "resume") c.run.resume_from = kv.value;
      else unknown_key(kv);
    } else {
      fail(ErrorKind::ConfigError, "unknown config section '" + kv.section + "'");
    }
  }
  if (!names.empty() || !kinds.empty()) {
    if (names.size() != kinds.size())
      fail(ErrorKind::ConfigError, "class_names and class_kinds lengths differ");
    ClassTaxonomy t;
    t.names = names;
    for (const std::string& k : kinds) {
      if (k != "stuff" && k != "thing")
        fail(ErrorKind::ConfigError, "class kind must be stuff or thing, got '" + k + "'");
      t.partition.push_back(k == "stuff" ? Partition::Stuff : Partition::Thing);
    }
    c.data.spec.taxonomy = std::move(t);
  }
  c.train.model.num_classes = c.data.spec.taxonomy.num_classes();
  c.train.seed = c.run.seed;
  c.validate();
  return c;
}

ExperimentConfig parse_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::IoFailure, "cannot open config file " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str());
}

}  // namespace cluda
