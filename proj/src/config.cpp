#include "xsite/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "xsite/errors.hpp"

namespace xsite {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const std::string& expected) {
  throw ConfigError("key '" + key + "': invalid value '" + value + "' (expected " + expected + ")");
}

double to_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) bad_value(key, v, "a number");
  return out;
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) bad_value(key, v, "a non-negative integer");
  return out;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  bad_value(key, v, "true or false");
}

std::vector<std::uint64_t> to_list(const std::string& key, const std::string& v) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(to_u64(key, trim(item)));
  if (out.empty()) bad_value(key, v, "a comma-separated integer list");
  return out;
}

std::string fmt_double(double v) {
  char buf[64];
  const auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  (void)ec;
  return std::string(buf, p);
}

template <class T>
std::string join(const T& xs) {
  std::string out;
  for (const auto& x : xs) {
    if (!out.empty()) out += ',';
    out += std::to_string(x);
  }
  return out;
}

template <class C>
struct Field {
  std::string key;
  std::function<void(C&, const std::string& key, const std::string& value)> set;
  std::function<std::string(const C&)> get;
};

#define XSITE_DOUBLE(C, name, member)                                                     \
  Field<C> {                                                                              \
    name, [](C& c, const std::string& k, const std::string& v) { c.member = to_double(k, v); }, \
        [](const C& c) { return fmt_double(c.member); }                                   \
  }
#define XSITE_UINT(C, name, member)                                                              \
  Field<C> {                                                                                     \
    name, [](C& c, const std::string& k, const std::string& v) { c.member = to_u64(k, v); },   \
        [](const C& c) { return std::to_string(c.member); }                                      \
  }
#define XSITE_BOOL(C, name, member)                                                              \
  Field<C> {                                                                                     \
    name, [](C& c, const std::string& k, const std::string& v) { c.member = to_bool(k, v); },  \
        [](const C& c) { return std::string(c.member ? "true" : "false"); }                     \
  }

const std::vector<Field<SiteSpec>>& site_fields() {
  static const std::vector<Field<SiteSpec>> f{
      XSITE_DOUBLE(SiteSpec, "contrast_scale", contrast_scale),
      XSITE_DOUBLE(SiteSpec, "brightness_offset", brightness_offset),
      XSITE_DOUBLE(SiteSpec, "noise_sigma", noise_sigma),
      XSITE_DOUBLE(SiteSpec, "lesion_intensity", lesion_intensity),
      XSITE_UINT(SiteSpec, "lesion_count_min", lesion_count_min),
      XSITE_UINT(SiteSpec, "lesion_count_max", lesion_count_max),
      XSITE_DOUBLE(SiteSpec, "lesion_radius_min", lesion_radius_min),
      XSITE_DOUBLE(SiteSpec, "lesion_radius_max", lesion_radius_max),
      XSITE_DOUBLE(SiteSpec, "texture_amplitude", texture_amplitude),
      XSITE_DOUBLE(SiteSpec, "texture_frequency", texture_frequency),
      XSITE_UINT(SiteSpec, "background_texture_seed", background_texture_seed),
      XSITE_UINT(SiteSpec, "distractor_count_max", distractor_count_max),
      XSITE_DOUBLE(SiteSpec, "distractor_intensity", distractor_intensity),
      XSITE_DOUBLE(SiteSpec, "distractor_radius_min", distractor_radius_min),
      XSITE_DOUBLE(SiteSpec, "distractor_radius_max", distractor_radius_max),
      XSITE_UINT(SiteSpec, "image_size", image_size),
  };
  return f;
}

const std::vector<Field<ModelConfig>>& model_fields() {
  static const std::vector<Field<ModelConfig>> f{
      XSITE_UINT(ModelConfig, "input_h", input_h),
      XSITE_UINT(ModelConfig, "input_w", input_w),
      XSITE_UINT(ModelConfig, "stem_channels", stem_channels),
      {"upper_channels",
       [](ModelConfig& c, const std::string& k, const std::string& v) {
         const auto l = to_list(k, v);
         if (l.size() != 4) bad_value(k, v, "exactly 4 widths");
         for (std::size_t i = 0; i < 4; ++i) c.upper_channels[i] = l[i];
       },
       [](const ModelConfig& c) { return join(c.upper_channels); }},
      XSITE_UINT(ModelConfig, "lower_blocks", lower_blocks),
      XSITE_UINT(ModelConfig, "layers_per_block", layers_per_block),
      XSITE_UINT(ModelConfig, "growth", growth),
      XSITE_UINT(ModelConfig, "transition_channels", transition_channels),
      {"norm", [](ModelConfig& c, const std::string&, const std::string& v) { c.norm = norm_kind_from_string(v); },
       [](const ModelConfig& c) { return to_string(c.norm); }},
      XSITE_BOOL(ModelConfig, "use_gap", use_gap),
      XSITE_UINT(ModelConfig, "num_classes", num_classes),
      XSITE_UINT(ModelConfig, "sites", sites),
      {"head_dims",
       [](ModelConfig& c, const std::string& k, const std::string& v) {
         const auto l = to_list(k, v);
         if (l.size() != 2) bad_value(k, v, "exactly 2 widths");
         c.head_dims = {l[0], l[1]};
       },
       [](const ModelConfig& c) { return join(c.head_dims); }},
      XSITE_DOUBLE(ModelConfig, "bn_momentum", bn_momentum),
      XSITE_DOUBLE(ModelConfig, "bn_epsilon", bn_epsilon),
  };
  return f;
}

const std::vector<Field<TrainConfig>>& train_fields() {
  static const std::vector<Field<TrainConfig>> f{
      {"mode", [](TrainConfig& c, const std::string&, const std::string& v) { apply_mode(c, v); },
       [](const TrainConfig& c) { return mode_name(c); }},
      XSITE_UINT(TrainConfig, "epochs", epochs),
      XSITE_UINT(TrainConfig, "batch_size", batch_size),
      XSITE_DOUBLE(TrainConfig, "lr", lr),
      XSITE_DOUBLE(TrainConfig, "lr_min", lr_min),
      XSITE_DOUBLE(TrainConfig, "alpha", alpha),
      XSITE_DOUBLE(TrainConfig, "tau", tau),
      {"denominator",
       [](TrainConfig& c, const std::string& k, const std::string& v) {
         if (v == "negatives_only") {
           c.denominator = DenominatorMode::kNegativesOnly;
         } else if (v == "all_other") {
           c.denominator = DenominatorMode::kAllOther;
         } else {
           bad_value(k, v, "negatives_only or all_other");
         }
       },
       [](const TrainConfig& c) {
         return std::string(c.denominator == DenominatorMode::kAllOther ? "all_other" : "negatives_only");
       }},
      {"seeds", [](TrainConfig& c, const std::string& k, const std::string& v) { c.seeds = to_list(k, v); },
       [](const TrainConfig& c) { return join(c.seeds); }},
      XSITE_UINT(TrainConfig, "folds", folds),
      XSITE_UINT(TrainConfig, "fold", fold),
      XSITE_UINT(TrainConfig, "fold_seed", fold_seed),
      XSITE_UINT(TrainConfig, "oversample_factor", oversample_factor),
      XSITE_UINT(TrainConfig, "eval_every", eval_every),
      XSITE_BOOL(TrainConfig, "augment", augment),
      XSITE_UINT(TrainConfig, "eval_batch", eval_batch),
  };
  return f;
}

#undef XSITE_DOUBLE
#undef XSITE_UINT
#undef XSITE_BOOL

template <class C>
bool apply_field(const std::vector<Field<C>>& fields, C& target, const std::string& name, const KeyValue& kv) {
  for (const auto& f : fields) {
    if (f.key == name) {
      f.set(target, kv.key, kv.value);
      return true;
    }
  }
  return false;
}

[[noreturn]] void unknown_key(const KeyValue& kv) {
  throw ConfigError("unknown key '" + kv.key + "' on line " + std::to_string(kv.line));
}

}  // namespace

// Site A: small bright lesions, plus label-independent large faint blobs.
SiteSpec ExperimentConfig::default_site_a() {
  SiteSpec s;
  s.noise_sigma = 0.06;
  s.lesion_intensity = 0.22;
  s.lesion_radius_min = 1.5;
  s.lesion_radius_max = 3.0;
  s.texture_amplitude = 0.05;
  s.texture_frequency = 0.3;
  s.background_texture_seed = 11;
  s.distractor_count_max = 2;
  s.distractor_intensity = 0.10;
  s.distractor_radius_min = 3.0;
  s.distractor_radius_max = 5.0;
  return s;
}

// Site B: brighter, higher contrast, large faint lesions, plus label-independent small blobs.
SiteSpec ExperimentConfig::default_site_b() {
  SiteSpec s;
  s.contrast_scale = 1.5;
  s.brightness_offset = 0.3;
  s.noise_sigma = 0.05;
  s.lesion_intensity = 0.09;
  s.lesion_count_max = 2;
  s.lesion_radius_min = 3.0;
  s.lesion_radius_max = 5.0;
  s.texture_amplitude = 0.06;
  s.texture_frequency = 0.9;
  s.background_texture_seed = 23;
  s.distractor_count_max = 4;
  s.distractor_intensity = 0.14;
  s.distractor_radius_min = 1.5;
  s.distractor_radius_max = 3.0;
  return s;
}

std::vector<KeyValue> parse_key_values(const std::string& text) {
  std::vector<KeyValue> out;
  std::map<std::string, std::size_t> seen;
  std::istringstream in(text);
  std::string raw;
  std::size_t line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const std::string line = trim(raw.substr(0, raw.find('#')));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(line_no) + ": expected 'key = value', got '" + line + "'");
    }
    KeyValue kv{trim(line.substr(0, eq)), trim(line.substr(eq + 1)), line_no};
    if (kv.key.empty()) throw ConfigError("line " + std::to_string(line_no) + ": empty key");
    if (kv.value.empty()) throw ConfigError("key '" + kv.key + "' on line " + std::to_string(line_no) + " has no value");
    if (const auto it = seen.find(kv.key); it != seen.end()) {
      throw ConfigError("key '" + kv.key + "' repeated on lines " + std::to_string(it->second) + " and " +
                        std::to_string(line_no));
    }
    seen[kv.key] = line_no;
    out.push_back(std::move(kv));
  }
  return out;
}

void apply_mode(TrainConfig& train, const std::string& mode) {
  if (mode == "single-a") {
    train.mode = TrainMode::kSingle;
    train.single_site = 0;
  } else if (mode == "single-b") {
    train.mode = TrainMode::kSingle;
    train.single_site = 1;
  } else if (mode == "joint") {
    train.mode = TrainMode::kJoint;
  } else if (mode == "sepnorm") {
    train.mode = TrainMode::kSepNorm;
  } else if (mode == "contrastive") {
    train.mode = TrainMode::kContrastive;
  } else {
    throw ConfigError("unknown mode '" + mode + "' (expected single-a|single-b|joint|sepnorm|contrastive)");
  }
}

std::string mode_name(const TrainConfig& train) {
  if (train.mode == TrainMode::kSingle) return train.single_site == 0 ? "single-a" : "single-b";
  return to_string(train.mode);
}

ExperimentConfig parse_experiment(const std::string& text) {
  ExperimentConfig c;
  for (const KeyValue& kv : parse_key_values(text)) {
    const auto dot = kv.key.find('.');
    const std::string ns = dot == std::string::npos ? "" : kv.key.substr(0, dot);
    const std::string name = dot == std::string::npos ? kv.key : kv.key.substr(dot + 1);
    bool ok = false;
    if (ns == "site_a") {
      ok = apply_field(site_fields(), c.site_a, name, kv);
    } else if (ns == "site_b") {
      ok = apply_field(site_fields(), c.site_b, name, kv);
    } else if (ns == "model") {
      ok = apply_field(model_fields(), c.model, name, kv);
    } else if (ns == "train") {
      ok = apply_field(train_fields(), c.train, name, kv);
    } else if (ns == "data") {
      ok = true;
      if (name == "n_per_class") {
        c.n_per_class = to_u64(kv.key, kv.value);
      } else if (name == "seed") {
        c.data_seed = to_u64(kv.key, kv.value);
      } else if (name == "manifest") {
        c.manifest = kv.value;
      } else {
        ok = false;
      }
    } else if (kv.key == "out") {
      c.out_dir = kv.value;
      ok = true;
    }
    if (!ok) unknown_key(kv);
  }
  c.site_a.validate();
  c.site_b.validate();
  if (c.n_per_class < 1) throw ConfigError("data.n_per_class must be >= 1");
  if (c.site_a.image_size != c.site_b.image_size) throw ConfigError("site_a.image_size and site_b.image_size differ");
  return c;
}

ExperimentConfig load_experiment(const std::filesystem::path& path) { return parse_experiment(read_text_file(path)); }

std::string to_text(const ExperimentConfig& c) {
  std::ostringstream os;
  os << "data.n_per_class = " << c.n_per_class << "\n";
  os << "data.seed = " << c.data_seed << "\n";
  if (!c.manifest.empty()) os << "data.manifest = " << c.manifest.string() << "\n";
  for (const auto& f : site_fields()) os << "site_a." << f.key << " = " << f.get(c.site_a) << "\n";
  for (const auto& f : site_fields()) os << "site_b." << f.key << " = " << f.get(c.site_b) << "\n";
  for (const auto& f : model_fields()) os << "model." << f.key << " = " << f.get(c.model) << "\n";
  for (const auto& f : train_fields()) os << "train." << f.key << " = " << f.get(c.train) << "\n";
  os << "out = " << c.out_dir.string() << "\n";
  return os.str();
}

GeneratorSpec parse_generator_spec(const std::string& text) {
  GeneratorSpec g;
  SiteSpec bare, a, b;
  bool any_bare = false, any_prefixed = false;
  for (const KeyValue& kv : parse_key_values(text)) {
    if (kv.key == "n_per_class") {
      g.n_per_class = to_u64(kv.key, kv.value);
      continue;
    }
    if (kv.key == "seed") {
      g.seed = to_u64(kv.key, kv.value);
      continue;
    }
    bool ok = false;
    if (kv.key.starts_with("site_a.")) {
      ok = apply_field(site_fields(), a, kv.key.substr(7), kv);
      any_prefixed = true;
    } else if (kv.key.starts_with("site_b.")) {
      ok = apply_field(site_fields(), b, kv.key.substr(7), kv);
      any_prefixed = true;
    } else {
      ok = apply_field(site_fields(), bare, kv.key, kv);
      any_bare = true;
    }
    if (!ok) unknown_key(kv);
  }
  if (any_bare && any_prefixed) throw ConfigError("generator spec mixes bare site keys with site_a./site_b. keys");
  if (g.n_per_class < 1) throw ConfigError("n_per_class must be >= 1");
  if (any_prefixed) {
    g.sites = {a, b};
  } else {
    g.sites = {bare};
  }
  for (const auto& s : g.sites) s.validate();
  return g;
}

std::array<Dataset, 2> prepare_sites(const ExperimentConfig& config) {
  std::array<Dataset, 2> out;
  if (!config.manifest.empty()) {
    for (Sample& s : load_manifest(config.manifest, config.model.input_h, config.model.input_w)) {
      if (s.site > 1) throw ConfigError("manifest site " + std::to_string(s.site) + " is not 0 or 1");
      out[s.site].push_back(std::move(s));
    }
    return out;
  }
  out[0] = synthesize_site(config.site_a, config.n_per_class, config.data_seed, 0);
  out[1] = synthesize_site(config.site_b, config.n_per_class, config.data_seed, 1);
  for (Dataset& d : out) {
    for (Sample& s : d) {
      if (s.image.height != config.model.input_h || s.image.width != config.model.input_w) {
        s.image = resize_bilinear(s.image, config.model.input_h, config.model.input_w);
        if (!s.lesion_mask.empty()) {
          s.lesion_mask = resize_bilinear(s.lesion_mask, config.model.input_h, config.model.input_w);
          for (double& v : s.lesion_mask.pixels) v = v >= 0.5 ? 1.0 : 0.0;
        }
      }
      normalize_image(s.image);
    }
  }
  return out;
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace xsite
