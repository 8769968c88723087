#include "xsite/checkpoint.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "xsite/errors.hpp"

namespace xsite {

namespace {

using json = nlohmann::ordered_json;

std::string norm_prefix(const NormLayer& n, SiteId s) {
  return n.kind == NormKind::kPerSiteDsbn ? n.name + "." + std::to_string(s) : n.name;
}

std::vector<std::pair<std::string, Tensor>> all_parameters(const Model& model, const ProjectionHead* head) {
  auto params = model.parameters();
  if (head)
    for (auto& p : head->parameters()) params.push_back(p);
  return params;
}

NamedArray named(const std::string& name, const Shape& shape, std::span<const double> values) {
  return {name, shape, std::vector<double>(values.begin(), values.end())};
}

json arrays_to_json(const std::vector<NamedArray>& arrays) {
  json out = json::array();
  for (const auto& a : arrays) out.push_back({{"name", a.name}, {"shape", a.shape}, {"values", a.values}});
  return out;
}

std::vector<NamedArray> arrays_from_json(const json& j, const std::string& section) {
  if (!j.is_array()) throw IoError("checkpoint: '" + section + "' is not an array");
  std::vector<NamedArray> out;
  for (const auto& e : j) {
    NamedArray a;
    try {
      a.name = e.at("name").get<std::string>();
      a.shape = e.at("shape").get<Shape>();
      a.values = e.at("values").get<std::vector<double>>();
    } catch (const json::exception& ex) {
      throw IoError("checkpoint: malformed entry in '" + section + "': " + ex.what());
    }
    if (shape_numel(a.shape) != a.values.size() || a.shape.empty()) {
      throw IoError("checkpoint entry '" + a.name + "': shape " + shape_str(a.shape) + " does not match " +
                    std::to_string(a.values.size()) + " values");
    }
    out.push_back(std::move(a));
  }
  return out;
}

// Matches `have` against the expected names/shapes, collecting every problem.
std::map<std::string, const NamedArray*> match(const std::vector<NamedArray>& have,
                                               const std::vector<std::pair<std::string, Shape>>& want,
                                               const std::string& section, std::vector<std::string>& problems) {
  std::map<std::string, const NamedArray*> by_name;
  for (const auto& a : have) by_name[a.name] = &a;
  std::map<std::string, const NamedArray*> out;
  for (const auto& [name, shape] : want) {
    const auto it = by_name.find(name);
    if (it == by_name.end()) {
      problems.push_back(section + ": missing '" + name + "'");
      continue;
    }
    if (it->second->shape != shape) {
      problems.push_back(section + ": '" + name + "' has shape " + shape_str(it->second->shape) + ", expected " +
                         shape_str(shape));
    } else {
      out[name] = it->second;
    }
    by_name.erase(it);
  }
  for (const auto& [name, unused] : by_name) {
    (void)unused;
    problems.push_back(section + ": unexpected '" + name + "'");
  }
  return out;
}

}  // namespace

Checkpoint capture(const Model& model, const ProjectionHead* head, const Adam* optimizer, const std::string& config,
                   std::uint64_t seed, std::size_t epoch, const std::string& rng_state) {
  Checkpoint ck;
  ck.config = config;
  ck.seed = seed;
  ck.epoch = epoch;
  ck.rng_state = rng_state;
  const auto params = all_parameters(model, head);
  for (const auto& [name, t] : params) ck.parameters.push_back(named(name, t.shape(), t.values()));
  for (const NormLayer* n : model.norm_layers()) {
    if (n->kind == NormKind::kNone) continue;
    for (SiteId s = 0; s < n->states.sites(); ++s) {
      const NormLayerState& st = n->states.site(s);
      const Shape shape{st.channels()};
      ck.norm_stats.push_back(named(norm_prefix(*n, s) + ".running_mean", shape, st.running_mean));
      ck.norm_stats.push_back(named(norm_prefix(*n, s) + ".running_var", shape, st.running_var));
    }
  }
  if (optimizer) {
    ck.adam_step = optimizer->steps();
    const auto& m = optimizer->first_moments();
    const auto& v = optimizer->second_moments();
    if (m.size() != params.size()) throw ConfigError("checkpoint: optimizer does not cover the captured parameters");
    for (std::size_t i = 0; i < params.size(); ++i) {
      ck.adam_m.push_back(named(params[i].first, params[i].second.shape(), m[i]));
      ck.adam_v.push_back(named(params[i].first, params[i].second.shape(), v[i]));
    }
  }
  return ck;
}

void restore(const Checkpoint& ck, Model& model, ProjectionHead* head, Adam* optimizer) {
  auto params = all_parameters(model, head);
  std::vector<std::pair<std::string, Shape>> want_params;
  for (const auto& [name, t] : params) want_params.emplace_back(name, t.shape());
  std::vector<std::pair<std::string, Shape>> want_stats;
  for (NormLayer* n : model.norm_layers()) {
    if (n->kind == NormKind::kNone) continue;
    for (SiteId s = 0; s < n->states.sites(); ++s) {
      const Shape shape{n->states.site(s).channels()};
      want_stats.emplace_back(norm_prefix(*n, s) + ".running_mean", shape);
      want_stats.emplace_back(norm_prefix(*n, s) + ".running_var", shape);
    }
  }
  std::vector<std::string> problems;
  const auto p = match(ck.parameters, want_params, "parameters", problems);
  const auto st = match(ck.norm_stats, want_stats, "norm_stats", problems);
  std::map<std::string, const NamedArray*> am, av;
  if (optimizer && !ck.adam_m.empty()) {
    am = match(ck.adam_m, want_params, "adam_m", problems);
    av = match(ck.adam_v, want_params, "adam_v", problems);
  }
  if (!problems.empty()) {
    std::string msg = "checkpoint does not fit this model:";
    for (const auto& s : problems) msg += "\n  " + s;
    throw ConfigError(msg);
  }
  for (auto& [name, t] : params) {
    const auto& v = p.at(name)->values;
    std::copy(v.begin(), v.end(), t.mutable_values().begin());
  }
  for (NormLayer* n : model.norm_layers()) {
    if (n->kind == NormKind::kNone) continue;
    for (SiteId s = 0; s < n->states.sites(); ++s) {
      NormLayerState& state = n->states.site(s);
      state.running_mean = st.at(norm_prefix(*n, s) + ".running_mean")->values;
      state.running_var = st.at(norm_prefix(*n, s) + ".running_var")->values;
    }
  }
  if (optimizer && !am.empty()) {
    auto& m = optimizer->first_moments();
    auto& v = optimizer->second_moments();
    for (std::size_t i = 0; i < params.size() && i < m.size(); ++i) {
      m[i] = am.at(params[i].first)->values;
      v[i] = av.at(params[i].first)->values;
    }
    optimizer->set_steps(ck.adam_step);
  }
}

std::string to_json(const Checkpoint& ck) {
  json j;
  j["format"] = "xsite-checkpoint-1";
  j["config"] = ck.config;
  j["seed"] = ck.seed;
  j["epoch"] = ck.epoch;
  j["rng_state"] = ck.rng_state;
  j["parameters"] = arrays_to_json(ck.parameters);
  j["norm_stats"] = arrays_to_json(ck.norm_stats);
  j["optimizer"] = {{"step", ck.adam_step}, {"m", arrays_to_json(ck.adam_m)}, {"v", arrays_to_json(ck.adam_v)}};
  return j.dump() + "\n";
}

Checkpoint checkpoint_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw IoError(std::string("checkpoint is not valid JSON: ") + e.what());
  }
  Checkpoint ck;
  try {
    if (j.at("format").get<std::string>() != "xsite-checkpoint-1") throw IoError("checkpoint: unknown format tag");
    ck.config = j.at("config").get<std::string>();
    ck.seed = j.at("seed").get<std::uint64_t>();
    ck.epoch = j.at("epoch").get<std::size_t>();
    ck.rng_state = j.at("rng_state").get<std::string>();
    ck.adam_step = j.at("optimizer").at("step").get<std::size_t>();
  } catch (const json::exception& e) {
    throw IoError(std::string("checkpoint: missing or malformed field: ") + e.what());
  }
  ck.parameters = arrays_from_json(j.at("parameters"), "parameters");
  ck.norm_stats = arrays_from_json(j.at("norm_stats"), "norm_stats");
  ck.adam_m = arrays_from_json(j.at("optimizer").at("m"), "optimizer.m");
  ck.adam_v = arrays_from_json(j.at("optimizer").at("v"), "optimizer.v");
  return ck;
}

void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << to_json(ck);
  if (!out) throw IoError("write failed: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return checkpoint_from_json(read_text_file(path)); }

LoadedRun instantiate(const Checkpoint& ck) {
  LoadedRun run;
  run.config = parse_experiment(ck.config);
  run.model = std::make_unique<Model>(run.config.model, 0);
  const bool has_head = std::any_of(ck.parameters.begin(), ck.parameters.end(),
                                    [](const NamedArray& a) { return a.name.starts_with("head."); });
  if (has_head) run.head = std::make_unique<ProjectionHead>(run.model->embedding_dim(), run.config.model.head_dims, 0);
  restore(ck, *run.model, run.head.get(), nullptr);
  return run;
}

}  // namespace xsite
