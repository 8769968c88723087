#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "xsite/data.hpp"
#include "xsite/losses.hpp"
#include "xsite/metrics.hpp"
#include "xsite/model.hpp"

namespace xsite {

enum class TrainMode { kSingle, kJoint, kSepNorm, kContrastive };

std::string to_string(TrainMode m);

struct TrainConfig {
  TrainMode mode = TrainMode::kContrastive;
  SiteId single_site = 0;  // Single mode only
  std::size_t epochs = 100;
  std::size_t batch_size = 32;
  double lr = 1e-4;
  double lr_min = 0.0;
  double alpha = 1.0;
  double tau = 0.05;
  DenominatorMode denominator = DenominatorMode::kNegativesOnly;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::size_t folds = 4;
  std::size_t fold = 0;             // held-out fold used by a single `train` run
  std::uint64_t fold_seed = 0;      // fold assignment, shared by every mode and seed
  std::size_t oversample_factor = 4;
  std::size_t eval_every = 1;       // 0: evaluate after the final epoch only
  bool augment = true;
  std::size_t eval_batch = 64;
};

// Throws ConfigError when the mode and the model's norm kind disagree.
void validate(const TrainConfig& train, const ModelConfig& model);

// The model config each mode is run with in comparisons: shared BN for
// Single/Joint, per-site DSBN for SepNorm/Contrastive.
ModelConfig model_for_mode(const ModelConfig& base, TrainMode mode);

/// Read-only view of the two sites' samples. Every access the trainer makes
/// goes through `get`, which counts reads per site.
class SiteData {
 public:
  SiteData(const Dataset* site_a, const Dataset* site_b);

  bool has(SiteId s) const { return s < 2 && sets_[s] != nullptr && !sets_[s]->empty(); }
  std::size_t size(SiteId s) const;
  const Sample& get(SiteId s, std::size_t i) const;
  std::size_t reads(SiteId s) const { return reads_[s]; }

 private:
  std::array<const Dataset*, 2> sets_;
  mutable std::array<std::size_t, 2> reads_{0, 0};
};

struct EpochRecord {
  std::size_t epoch = 0;
  double lr = 0.0;
  double loss_ce = 0.0;
  double loss_con = 0.0;
  double loss_overall = 0.0;
  std::size_t steps = 0;
  std::size_t ce_clamped = 0;
  std::size_t con_skipped_anchors = 0;
  std::size_t con_degenerate_batches = 0;
  std::optional<MetricsReport> validation;
};

struct RunRecord {
  std::vector<EpochRecord> epochs;
};

// CSV: epoch,lr,loss_ce,loss_con,loss_overall,auc_siteA,auc_siteB,acc_siteA,acc_siteB,
// f1_siteA,f1_siteB,steps,ce_clamped,con_skipped_anchors,con_degenerate_batches.
// Metrics are blank on epochs without validation or for sites not evaluated.
std::string run_record_csv(const RunRecord& record);
void write_run_record(const std::filesystem::path& path, const RunRecord& record);

struct TrainResult {
  std::unique_ptr<Model> model;
  std::unique_ptr<ProjectionHead> head;  // Contrastive mode only
  Adam optimizer;
  RunRecord record;
  std::uint64_t seed = 0;
  std::string rng_state;  // augmentation stream after the last step
};

// Per-epoch hook; receives the record just completed.
using EpochCallback = std::function<void(const EpochRecord&)>;

/// Trains one model from scratch. `validation` (may be null) is evaluated per
/// site with eval-mode normalization. Throws NumericalError naming the epoch and
/// step on a non-finite loss, ConfigError when data does not fit the mode.
TrainResult train(const TrainConfig& config, const ModelConfig& model_config, const SiteData& data,
                  std::uint64_t seed, const SiteData* validation = nullptr, const EpochCallback& on_epoch = {});

// Positive-class probability for every sample of `site`.
std::vector<double> predict_scores(Model& model, const SiteData& data, SiteId site, std::size_t batch = 64);

// Held-out metrics for each site `data` holds (DSBN models use each sample's own site).
MetricsReport evaluate(Model& model, const SiteData& data, std::size_t batch = 64);

/// Class-stratified assignment: returns fold index per sample. Each class is
/// shuffled by `seed` and dealt round-robin, so fold sizes differ by at most one
/// per class. Throws ConfigError when folds < 2 or a class has fewer than `folds` samples.
std::vector<std::size_t> stratified_folds(const Dataset& data, std::size_t folds, std::uint64_t seed);

struct FoldSplit {
  Dataset train_a, train_b, test_a, test_b;
};

FoldSplit split_fold(const Dataset& site_a, const Dataset& site_b, std::size_t folds, std::size_t fold,
                     std::uint64_t seed);

struct CvCell {
  TrainMode mode = TrainMode::kJoint;
  std::optional<SiteId> single_site;
  std::size_t fold = 0;
  std::uint64_t seed = 0;
  MetricsReport report;
  bool failed = false;
  std::string error;
};

using CellCallback = std::function<void(const CvCell&)>;

/// Trains every (fold, seed) cell of one mode and evaluates on the held-out fold
/// of each relevant site. Training failures are recorded in the cell.
std::vector<CvCell> run_cross_validation(const TrainConfig& config, const ModelConfig& model_config,
                                         const Dataset& site_a, const Dataset& site_b,
                                         const CellCallback& on_cell = {});

// Deterministic 64-bit mixer used to derive independent RNG streams from one seed.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace xsite
