#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "xsite/config.hpp"
#include "xsite/losses.hpp"
#include "xsite/model.hpp"

namespace xsite {

struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

/// Everything needed to rebuild a trained run. DSBN entries are keyed
/// `layer.site` (e.g. `stem.bn.1.gamma`, `stem.bn.1.running_mean`).
struct Checkpoint {
  std::string config;  // experiment snapshot as key = value text
  std::uint64_t seed = 0;
  std::size_t epoch = 0;
  std::vector<NamedArray> parameters;  // model, then projection head
  std::vector<NamedArray> norm_stats;
  std::size_t adam_step = 0;
  std::vector<NamedArray> adam_m;  // keyed by parameter name
  std::vector<NamedArray> adam_v;
  std::string rng_state;
};

Checkpoint capture(const Model& model, const ProjectionHead* head, const Adam* optimizer, const std::string& config,
                   std::uint64_t seed, std::size_t epoch, const std::string& rng_state);

// Copies values into live objects. Throws ConfigError listing every missing,
// unexpected or mis-shaped entry.
void restore(const Checkpoint& ck, Model& model, ProjectionHead* head, Adam* optimizer);

// Single JSON document; doubles use the shortest round-trip representation.
std::string to_json(const Checkpoint& ck);
Checkpoint checkpoint_from_json(const std::string& text);  // IoError naming the bad entry

void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

struct LoadedRun {
  ExperimentConfig config;
  std::unique_ptr<Model> model;
  std::unique_ptr<ProjectionHead> head;  // present when the checkpoint has head entries
};

// Builds the model described by the snapshot and restores all values into it.
LoadedRun instantiate(const Checkpoint& ck);

}  // namespace xsite
