#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "xsite/data.hpp"
#include "xsite/model.hpp"
#include "xsite/train.hpp"

namespace xsite {

/// One experiment: two site generators (or a manifest), model, training and output directory.
struct ExperimentConfig {
  SiteSpec site_a = default_site_a();
  SiteSpec site_b = default_site_b();
  std::size_t n_per_class = 200;
  std::uint64_t data_seed = 1;
  std::filesystem::path manifest;  // when set, data is loaded instead of synthesized
  ModelConfig model;
  TrainConfig train;
  std::filesystem::path out_dir = "run";

  static SiteSpec default_site_a();
  static SiteSpec default_site_b();
};

struct KeyValue {
  std::string key;
  std::string value;
  std::size_t line = 0;
};

// `key = value` lines; '#' starts a comment. Throws ConfigError on malformed or duplicate keys.
std::vector<KeyValue> parse_key_values(const std::string& text);

// Every key is validated; unknown keys throw ConfigError naming the key and line.
ExperimentConfig parse_experiment(const std::string& text);
ExperimentConfig load_experiment(const std::filesystem::path& path);  // IoError if unreadable

// Canonical dump of every key; parse_experiment(to_text(c)) reproduces c.
std::string to_text(const ExperimentConfig& config);

/// Generator input for gen-data. Bare keys describe a single site 0;
/// `site_a.` / `site_b.` prefixes describe two sites.
struct GeneratorSpec {
  std::vector<SiteSpec> sites;
  std::size_t n_per_class = 200;
  std::uint64_t seed = 1;
};

GeneratorSpec parse_generator_spec(const std::string& text);

// "single-a" | "single-b" | "joint" | "sepnorm" | "contrastive"; sets mode and single_site.
void apply_mode(TrainConfig& train, const std::string& mode);
std::string mode_name(const TrainConfig& train);

/// Site datasets ready for training: synthesized from the site specs (or loaded
/// from the manifest and split by site), resized to the model input and
/// normalized per image.
std::array<Dataset, 2> prepare_sites(const ExperimentConfig& config);

std::string read_text_file(const std::filesystem::path& path);  // IoError if unreadable

}  // namespace xsite
