// xsite: synthetic two-site data, training, comparison tables and Grad-CAM.
//
// Exit codes: 0 success, 2 config/usage, 3 I/O, 4 numerical failure.

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>

#include "xsite/checkpoint.hpp"
#include "xsite/config.hpp"
#include "xsite/errors.hpp"
#include "xsite/experiment.hpp"
#include "xsite/ops.hpp"
#include "xsite/saliency.hpp"
#include "xsite/train.hpp"

namespace fs = std::filesystem;
using namespace xsite;

namespace {

constexpr int kOk = 0, kConfig = 2, kIo = 3, kNumerical = 4;

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw IoError("write failed: " + path.string());
}

// Lists produced files, relative to the run directory.
void write_artifacts(const fs::path& dir, const std::vector<std::string>& files) {
  std::string text;
  for (const auto& f : files) text += f + "\n";
  write_file(dir / "artifacts.txt", text);
}

std::string metrics_line(const MetricsReport& r) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2);
  bool first = true;
  for (const auto& [site, m] : r.sites) {
    os << (first ? "" : " | ") << "site" << site_name(site) << " acc=" << m.accuracy << " f1=" << m.f1
       << " recall=" << m.recall << " precision=" << m.precision << " auc=" << m.auc;
    first = false;
  }
  return os.str();
}

int cmd_gen_data(const fs::path& spec_path, const fs::path& out, std::optional<std::uint64_t> seed) {
  GeneratorSpec g = parse_generator_spec(read_text_file(spec_path));
  if (seed) g.seed = *seed;
  ensure_dir(out);
  Manifest all;
  for (std::size_t s = 0; s < g.sites.size(); ++s) {
    const Manifest m = generate_site(g.sites[s], g.n_per_class, g.seed, s, out / "images");
    for (auto r : m.records) {
      r.path = "images/" + r.path;
      all.records.push_back(r);
    }
  }
  write_manifest(out / "manifest.csv", all);
  std::vector<std::string> files{"manifest.csv"};
  for (const auto& r : all.records) {
    files.push_back(r.path);
    if (r.label == 1) files.push_back(r.path.substr(0, r.path.size() - 4) + "_mask.pgm");
  }
  write_artifacts(out, files);
  std::cout << "generated " << all.records.size() << " images (" << g.sites.size() << " site(s) x 2 classes x "
            << g.n_per_class << ") in " << out.string() << "\n";
  return kOk;
}

ExperimentConfig load_with_overrides(const fs::path& config_path, const std::string& mode,
                                     std::optional<std::uint64_t> seed, const std::string& out) {
  ExperimentConfig c = load_experiment(config_path);
  if (!mode.empty()) apply_mode(c.train, mode);
  if (seed) c.train.seeds = {*seed};
  if (!out.empty()) c.out_dir = out;
  return c;
}

int cmd_train(const fs::path& config_path, const std::string& mode, std::optional<std::uint64_t> seed,
              const std::string& out) {
  ExperimentConfig c = load_with_overrides(config_path, mode, seed, out);
  if (seed) c.train.seeds = {*seed};
  validate(c.train, c.model);
  const auto sites = prepare_sites(c);
  const bool single = c.train.mode == TrainMode::kSingle;
  const Dataset none;
  const FoldSplit split = split_fold(single && c.train.single_site == 1 ? none : sites[0],
                                     single && c.train.single_site == 0 ? none : sites[1], c.train.folds,
                                     c.train.fold, c.train.fold_seed);
  const SiteData train_data(&split.train_a, &split.train_b);
  const SiteData val_data(&split.test_a, &split.test_b);
  const std::uint64_t run_seed = c.train.seeds.front();
  TrainResult r = train(c.train, c.model, train_data, run_seed, &val_data, [](const EpochRecord& e) {
    std::cerr << "epoch " << e.epoch << " lr=" << e.lr << " loss=" << e.loss_overall << "\n";
  });
  ensure_dir(c.out_dir);
  const Checkpoint ck =
      capture(*r.model, r.head.get(), &r.optimizer, to_text(c), run_seed, c.train.epochs, r.rng_state);
  save_checkpoint(ck, c.out_dir / "checkpoint.json");
  write_run_record(c.out_dir / "run_record.csv", r.record);
  write_artifacts(c.out_dir, {"checkpoint.json", "run_record.csv"});
  std::cout << "final " << mode_name(c.train) << ": " << metrics_line(*r.record.epochs.back().validation) << "\n";
  return kOk;
}

int cmd_compare(const fs::path& config_path, std::optional<std::uint64_t> seed, const std::string& out) {
  ExperimentConfig c = load_experiment(config_path);
  if (seed) {
    const std::size_t n = c.train.seeds.size();
    c.train.seeds.clear();
    for (std::size_t i = 0; i < n; ++i) c.train.seeds.push_back(*seed + i);
  }
  if (!out.empty()) c.out_dir = out;
  validate(c.train, model_for_mode(c.model, TrainMode::kContrastive));
  const auto sites = prepare_sites(c);
  const Comparison cmp = run_comparison(c, sites, [](const CvCell& cell) {
    std::cerr << to_string(cell.mode) << (cell.single_site ? "-" + site_name(*cell.single_site) : "") << " fold "
              << cell.fold << " seed " << cell.seed << ": " << (cell.failed ? "FAILED " + cell.error : metrics_line(cell.report))
              << "\n";
  });
  ensure_dir(c.out_dir);
  const std::vector<SiteId> site_ids{0, 1};
  write_file(c.out_dir / "table.csv", render_table_csv(cmp.rows, site_ids));
  write_file(c.out_dir / "table.txt", render_table_text(cmp.rows, site_ids));
  write_file(c.out_dir / "ttest.csv", ttest_csv(cmp));
  write_file(c.out_dir / "cells.csv", cells_csv(cmp));
  write_file(c.out_dir / "config.txt", to_text(c));
  write_artifacts(c.out_dir, {"table.csv", "table.txt", "ttest.csv", "cells.csv", "config.txt"});
  std::cout << render_table_text(cmp.rows, site_ids);
  std::cout << "\npaired t-test, Contrastive vs baseline (AUC), pairs = (fold, seed):\n";
  for (const auto& e : cmp.ttests) {
    if (e.metric != "auc") continue;
    std::cout << "  " << std::left << std::setw(8) << e.baseline << " site" << site_name(e.site) << "  ";
    if (e.result) {
      std::cout << "t=" << e.result->t << " p=" << e.result->p << "\n";
    } else {
      std::cout << "n/a (" << e.note << ")\n";
    }
  }
  for (const auto& row : cmp.rows)
    if (row.failed) return kNumerical;
  return kOk;
}

int cmd_cam(const fs::path& checkpoint, const fs::path& images, const fs::path& out, int target) {
  LoadedRun run = instantiate(load_checkpoint(checkpoint));
  Model& model = *run.model;
  const Dataset data = load_manifest(images, model.config().input_h, model.config().input_w);
  const Manifest manifest = read_manifest(images);
  const bool dsbn = model.config().norm == NormKind::kPerSiteDsbn;
  ensure_dir(out);
  std::vector<std::string> files;
  std::ostringstream summary;
  summary << "path,label,site,predicted,prob_positive,degenerate,lesion_ratio\n" << std::setprecision(10);
  std::size_t with_mask = 0, correct_pos = 0, ratio_ok = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Sample& s = data[i];
    std::optional<SiteId> site;
    if (dsbn) {
      if (s.site >= model.config().sites) {
        throw ConfigError("record '" + manifest.records[i].path + "' has site " + std::to_string(s.site) +
                          " but the checkpoint has " + std::to_string(model.config().sites) + " sites");
      }
      site = s.site;
    }
    const ForwardResult f = model.forward(stack_images({&s.image}), site, NormMode::kEval);
    const double p1 = ops::softmax(f.logits).at(1);
    const int predicted = p1 >= 0.5 ? 1 : 0;
    const SaliencyMap map = grad_cam(model, s.image, site, target);
    const std::string stem = fs::path(manifest.records[i].path).stem().string() + "_" + std::to_string(i);
    export_overlay(map, s.image, out / (stem + "_cam.ppm"));
    export_map_csv(map, out / (stem + "_cam.csv"));
    files.push_back(stem + "_cam.ppm");
    files.push_back(stem + "_cam.csv");
    summary << manifest.records[i].path << ',' << s.label << ',' << s.site << ',' << predicted << ',' << p1 << ','
            << (map.degenerate ? 1 : 0) << ',';
    if (!s.lesion_mask.empty()) {
      ++with_mask;
      const double ratio = lesion_ratio(map, s.lesion_mask);
      summary << ratio;
      if (s.label == 1 && predicted == 1) {
        ++correct_pos;
        if (ratio >= 2.0) ++ratio_ok;
      }
    }
    summary << '\n';
  }
  write_file(out / "cam_summary.csv", summary.str());
  files.push_back("cam_summary.csv");
  write_artifacts(out, files);
  std::cout << "wrote " << data.size() << " overlays to " << out.string() << "\n";
  if (with_mask > 0) {
    std::cout << "lesion mass: " << ratio_ok << " of " << correct_pos
              << " correctly classified positives have in/out CAM ratio >= 2";
    if (correct_pos > 0) std::cout << " (" << std::fixed << std::setprecision(1) << 100.0 * ratio_ok / correct_pos << "%)";
    std::cout << "\n";
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"xsite: multi-site CNN training experiments on synthetic data"};
  app.require_subcommand(1);

  std::optional<std::uint64_t> seed;
  fs::path spec, out_dir, config, checkpoint, images;
  std::string mode, out;
  int target = 1;

  auto* gen = app.add_subcommand("gen-data", "write synthetic PGM images and a manifest");
  gen->add_option("--spec", spec, "generator spec (key = value)")->required();
  gen->add_option("--out", out_dir, "output directory")->required();
  gen->add_option("--seed", seed, "overrides the generator seed");

  auto* tr = app.add_subcommand("train", "train one model on the configured fold");
  tr->add_option("--config", config, "experiment config")->required();
  tr->add_option("--mode", mode, "single-a|single-b|joint|sepnorm|contrastive")
      ->check(CLI::IsMember({"single-a", "single-b", "joint", "sepnorm", "contrastive"}));
  tr->add_option("--seed", seed, "run seed (replaces train.seeds)");
  tr->add_option("--out", out, "run directory (overrides `out`)");

  auto* cmp = app.add_subcommand("compare", "all modes x folds x seeds, table and paired t-tests");
  cmp->add_option("--config", config, "experiment config")->required();
  cmp->add_option("--seed", seed, "first seed; train.seeds becomes seed, seed+1, ...");
  cmp->add_option("--out", out, "run directory (overrides `out`)");

  auto* cam = app.add_subcommand("cam", "Grad-CAM overlays for every manifest row");
  cam->add_option("--checkpoint", checkpoint, "checkpoint.json from train")->required();
  cam->add_option("--images", images, "manifest.csv")->required();
  cam->add_option("--out", out_dir, "output directory")->required();
  cam->add_option("--class", target, "target class")->check(CLI::Range(0, 1));
  cam->add_option("--seed", seed, "accepted for uniformity; Grad-CAM is deterministic");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfig;
  }

  try {
    if (*gen) return cmd_gen_data(spec, out_dir, seed);
    if (*tr) return cmd_train(config, mode, seed, out);
    if (*cmp) return cmd_compare(config, seed, out);
    if (*cam) return cmd_cam(checkpoint, images, out_dir, target);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const ShapeError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const IoError& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return kIo;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kNumerical;
  } catch (const DegenerateError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return kConfig;
}
