#include "xsite/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <random>
#include <sstream>

#include "xsite/errors.hpp"
#include "xsite/ops.hpp"

namespace xsite {

std::string to_string(TrainMode m) {
  switch (m) {
    case TrainMode::kSingle: return "single";
    case TrainMode::kJoint: return "joint";
    case TrainMode::kSepNorm: return "sepnorm";
    case TrainMode::kContrastive: return "contrastive";
  }
  return "single";
}

void validate(const TrainConfig& train, const ModelConfig& model) {
  if (train.epochs < 1) throw ConfigError("train.epochs must be >= 1");
  if (train.batch_size < 2) throw ConfigError("train.batch_size must be >= 2");
  if (train.mode != TrainMode::kSingle && train.batch_size % 2 != 0) {
    throw ConfigError("train.batch_size must be even for two-site modes");
  }
  if (!(train.lr > 0.0) || train.lr_min < 0.0 || train.lr_min > train.lr) {
    throw ConfigError("need 0 <= train.lr_min <= train.lr and train.lr > 0");
  }
  if (!(train.tau > 0.0)) throw ConfigError("train.tau must be > 0");
  if (train.alpha < 0.0) throw ConfigError("train.alpha must be >= 0");
  if (train.seeds.empty()) throw ConfigError("train.seeds must list at least one seed");
  if (train.folds < 2) throw ConfigError("train.folds must be >= 2");
  if (train.fold >= train.folds) throw ConfigError("train.fold must be < train.folds");
  if (train.oversample_factor < 1) throw ConfigError("train.oversample_factor must be >= 1");
  if (train.eval_batch < 1) throw ConfigError("train.eval_batch must be >= 1");
  if (train.single_site > 1) throw ConfigError("train.single_site must be 0 or 1");
  const bool dsbn = model.norm == NormKind::kPerSiteDsbn;
  switch (train.mode) {
    case TrainMode::kSepNorm:
    case TrainMode::kContrastive:
      if (!dsbn) {
        throw ConfigError("mode " + to_string(train.mode) + " requires model.norm = per_site_dsbn, got " +
                          to_string(model.norm));
      }
      if (model.sites < 2) throw ConfigError("mode " + to_string(train.mode) + " requires model.sites >= 2");
      break;
    case TrainMode::kJoint:
      if (dsbn) throw ConfigError("mode joint shares normalization across sites; model.norm must not be per_site_dsbn");
      break;
    case TrainMode::kSingle:
      if (dsbn && model.sites <= train.single_site) throw ConfigError("model.sites too small for train.single_site");
      break;
  }
}

ModelConfig model_for_mode(const ModelConfig& base, TrainMode mode) {
  ModelConfig c = base;
  if (mode == TrainMode::kSepNorm || mode == TrainMode::kContrastive) {
    c.norm = NormKind::kPerSiteDsbn;
  } else if (c.norm == NormKind::kPerSiteDsbn) {
    c.norm = NormKind::kSharedBn;
  }
  return c;
}

SiteData::SiteData(const Dataset* site_a, const Dataset* site_b) : sets_{site_a, site_b} {}

std::size_t SiteData::size(SiteId s) const { return has(s) ? sets_[s]->size() : 0; }

const Sample& SiteData::get(SiteId s, std::size_t i) const {
  if (!has(s) || i >= sets_[s]->size()) throw ConfigError("site " + site_name(s) + " has no sample " + std::to_string(i));
  ++reads_[s];
  return (*sets_[s])[i];
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  // splitmix64 finalizer over the combined value
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

namespace {

enum Stream : std::uint64_t { kModelInit = 1, kHeadInit = 2, kSampler = 3, kAugment = 4 };

struct SubBatch {
  Tensor images;
  std::vector<int> labels;
};

SubBatch gather(const SiteData& data, SiteId site, const Batch& batch, bool augment_on, std::mt19937_64& rng) {
  std::vector<GrayImage> imgs;
  SubBatch out;
  for (const BatchRef& r : batch) {
    if (r.site != site) continue;
    const Sample& s = data.get(r.site, r.index);
    imgs.push_back(augment_on ? augment(s.image, rng) : s.image);
    out.labels.push_back(s.label);
  }
  if (imgs.empty()) return out;
  std::vector<const GrayImage*> ptrs;
  for (const auto& g : imgs) ptrs.push_back(&g);
  out.images = stack_images(ptrs);
  return out;
}

SubBatch gather_all(const SiteData& data, const Batch& batch, bool augment_on, std::mt19937_64& rng) {
  std::vector<GrayImage> imgs;
  SubBatch out;
  for (const BatchRef& r : batch) {
    const Sample& s = data.get(r.site, r.index);
    imgs.push_back(augment_on ? augment(s.image, rng) : s.image);
    out.labels.push_back(s.label);
  }
  std::vector<const GrayImage*> ptrs;
  for (const auto& g : imgs) ptrs.push_back(&g);
  out.images = stack_images(ptrs);
  return out;
}

void require_data(const TrainConfig& config, const SiteData& data) {
  if (config.mode == TrainMode::kSingle) {
    if (!data.has(config.single_site)) throw ConfigError("single mode: no data for site " + site_name(config.single_site));
    return;
  }
  if (!data.has(0) || !data.has(1)) throw ConfigError("mode " + to_string(config.mode) + " needs data from both sites");
}

}  // namespace

TrainResult train(const TrainConfig& config, const ModelConfig& model_config, const SiteData& data,
                  std::uint64_t seed, const SiteData* validation, const EpochCallback& on_epoch) {
  validate(config, model_config);
  require_data(config, data);

  TrainResult result;
  result.seed = seed;
  result.model = std::make_unique<Model>(model_config, derive_seed(seed, kModelInit));
  Model& model = *result.model;
  const bool contrastive = config.mode == TrainMode::kContrastive;
  if (contrastive) {
    result.head = std::make_unique<ProjectionHead>(model.embedding_dim(), model_config.head_dims,
                                                   derive_seed(seed, kHeadInit));
  }
  std::vector<Tensor> params;
  for (auto& [name, t] : model.parameters()) params.push_back(t);
  if (contrastive)
    for (auto& [name, t] : result.head->parameters()) params.push_back(t);
  result.optimizer = Adam(params);

  const ScheduleParams schedule{config.lr, config.lr_min, config.epochs};
  const ContrastiveParams cparams{config.tau, config.alpha, config.denominator};
  const bool dsbn = model_config.norm == NormKind::kPerSiteDsbn;
  std::mt19937_64 aug_rng(derive_seed(seed, kAugment));
  const std::uint64_t sampler_seed = derive_seed(seed, kSampler);

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = cosine_annealing(epoch, schedule);
    const std::uint64_t epoch_seed = derive_seed(sampler_seed, epoch);
    const std::vector<Batch> batches =
        config.mode == TrainMode::kSingle
            ? make_single_site_batches(data.size(config.single_site), config.single_site, config.batch_size, epoch_seed)
            : make_balanced_batches(data.size(0), data.size(1), config.batch_size, epoch_seed,
                                    config.oversample_factor);

    for (std::size_t step = 0; step < batches.size(); ++step) {
      const Batch& batch = batches[step];
      std::vector<int> labels;
      Tensor logits;
      std::vector<Tensor> embeddings;
      if (config.mode == TrainMode::kSingle) {
        SubBatch sb = gather(data, config.single_site, batch, config.augment, aug_rng);
        logits = model.forward(sb.images, config.single_site, NormMode::kTrain).logits;
        labels = std::move(sb.labels);
      } else if (!dsbn) {
        SubBatch sb = gather_all(data, batch, config.augment, aug_rng);
        logits = model.forward(sb.images, std::nullopt, NormMode::kTrain).logits;
        labels = std::move(sb.labels);
      } else {
        // Each site's sub-batch goes through its own normalization state.
        std::vector<Tensor> parts;
        for (SiteId s = 0; s < 2; ++s) {
          SubBatch sb = gather(data, s, batch, config.augment, aug_rng);
          if (sb.labels.empty()) continue;
          ForwardResult f = model.forward(sb.images, s, NormMode::kTrain);
          parts.push_back(f.logits);
          embeddings.push_back(f.embedding);
          labels.insert(labels.end(), sb.labels.begin(), sb.labels.end());
        }
        logits = parts.size() == 1 ? parts[0] : ops::concat_rows(parts);
      }

      const CrossEntropyResult ce = softmax_cross_entropy(logits, labels);
      rec.ce_clamped += ce.clamped;
      Tensor loss = ce.loss;
      double con_value = 0.0;
      if (contrastive) {
        std::vector<Tensor> projected;
        for (const Tensor& e : embeddings) projected.push_back(result.head->project(e));
        const Tensor z = projected.size() == 1 ? projected[0] : ops::concat_rows(projected);
        const ContrastiveResult con = contrastive_loss(z, labels, cparams);
        rec.con_skipped_anchors += con.skipped_anchors;
        if (con.degenerate) ++rec.con_degenerate_batches;
        con_value = con.loss.item();
        loss = overall_loss(ce.loss, con.loss, config.alpha);
      }
      const double loss_value = loss.item();
      if (!std::isfinite(loss_value)) {
        throw NumericalError("non-finite loss at epoch " + std::to_string(epoch) + " step " + std::to_string(step));
      }
      loss.backward();
      try {
        result.optimizer.step(rec.lr);
      } catch (const NumericalError& e) {
        throw NumericalError(std::string(e.what()) + " at epoch " + std::to_string(epoch) + " step " +
                             std::to_string(step));
      }
      result.optimizer.zero_grad();
      rec.loss_ce += ce.loss.item();
      rec.loss_con += con_value;
      rec.loss_overall += loss_value;
      ++rec.steps;
    }
    const double n = static_cast<double>(std::max<std::size_t>(rec.steps, 1));
    rec.loss_ce /= n;
    rec.loss_con /= n;
    rec.loss_overall /= n;

    const bool last = epoch + 1 == config.epochs;
    const bool scheduled = config.eval_every > 0 && (epoch + 1) % config.eval_every == 0;
    if (validation && (last || scheduled)) rec.validation = evaluate(model, *validation, config.eval_batch);
    if (on_epoch) on_epoch(rec);
    result.record.epochs.push_back(std::move(rec));
  }
  std::ostringstream rng_state;
  rng_state << aug_rng;
  result.rng_state = rng_state.str();
  return result;
}

std::vector<double> predict_scores(Model& model, const SiteData& data, SiteId site, std::size_t batch) {
  std::vector<double> scores;
  const std::size_t n = data.size(site);
  for (std::size_t start = 0; start < n; start += batch) {
    std::vector<const GrayImage*> imgs;
    for (std::size_t i = start; i < std::min(n, start + batch); ++i) imgs.push_back(&data.get(site, i).image);
    const Tensor probs = ops::softmax(model.forward(stack_images(imgs), site, NormMode::kEval).logits);
    const std::size_t classes = probs.dim(1);
    for (std::size_t r = 0; r < imgs.size(); ++r) scores.push_back(probs.at(r * classes + 1));
  }
  return scores;
}

MetricsReport evaluate(Model& model, const SiteData& data, std::size_t batch) {
  MetricsReport report;
  for (SiteId s = 0; s < 2; ++s) {
    if (!data.has(s)) continue;
    const std::vector<double> scores = predict_scores(model, data, s, batch);
    std::vector<int> labels;
    for (std::size_t i = 0; i < data.size(s); ++i) labels.push_back(data.get(s, i).label);
    report.sites[s] = evaluate_site(scores, labels);
  }
  return report;
}

namespace {

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

}  // namespace

std::string run_record_csv(const RunRecord& record) {
  std::ostringstream os;
  os << "epoch,lr,loss_ce,loss_con,loss_overall,auc_siteA,auc_siteB,acc_siteA,acc_siteB,f1_siteA,f1_siteB,"
        "steps,ce_clamped,con_skipped_anchors,con_degenerate_batches\n";
  for (const auto& e : record.epochs) {
    os << e.epoch << ',' << fmt(e.lr) << ',' << fmt(e.loss_ce) << ',' << fmt(e.loss_con) << ',' << fmt(e.loss_overall);
    for (double SiteMetrics::*field : {&SiteMetrics::auc, &SiteMetrics::accuracy, &SiteMetrics::f1}) {
      for (SiteId s = 0; s < 2; ++s) {
        os << ',';
        if (e.validation) {
          const auto it = e.validation->sites.find(s);
          if (it != e.validation->sites.end()) os << fmt(it->second.*field);
        }
      }
    }
    os << ',' << e.steps << ',' << e.ce_clamped << ',' << e.con_skipped_anchors << ',' << e.con_degenerate_batches
       << '\n';
  }
  return os.str();
}

void write_run_record(const std::filesystem::path& path, const RunRecord& record) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << run_record_csv(record);
  if (!out) throw IoError("write failed: " + path.string());
}

std::vector<std::size_t> stratified_folds(const Dataset& data, std::size_t folds, std::uint64_t seed) {
  if (folds < 2) throw ConfigError("cross-validation needs at least 2 folds");
  std::array<std::vector<std::size_t>, 2> by_class;
  for (std::size_t i = 0; i < data.size(); ++i) by_class[data[i].label == 1 ? 1 : 0].push_back(i);
  std::vector<std::size_t> assignment(data.size(), 0);
  std::mt19937_64 rng(seed);
  for (auto& members : by_class) {
    if (members.size() < folds) {
      throw ConfigError("cross-validation: a class has " + std::to_string(members.size()) +
                        " samples, fewer than " + std::to_string(folds) + " folds; a test fold would be single-class");
    }
    std::shuffle(members.begin(), members.end(), rng);
    for (std::size_t j = 0; j < members.size(); ++j) assignment[members[j]] = j % folds;
  }
  return assignment;
}

FoldSplit split_fold(const Dataset& site_a, const Dataset& site_b, std::size_t folds, std::size_t fold,
                     std::uint64_t seed) {
  if (fold >= folds) throw ConfigError("fold index out of range");
  FoldSplit out;
  auto split = [&](const Dataset& d, std::uint64_t s, Dataset& tr, Dataset& te) {
    if (d.empty()) return;
    const auto a = stratified_folds(d, folds, s);
    for (std::size_t i = 0; i < d.size(); ++i) (a[i] == fold ? te : tr).push_back(d[i]);
  };
  split(site_a, derive_seed(seed, 100), out.train_a, out.test_a);
  split(site_b, derive_seed(seed, 101), out.train_b, out.test_b);
  return out;
}

std::vector<CvCell> run_cross_validation(const TrainConfig& config, const ModelConfig& model_config,
                                         const Dataset& site_a, const Dataset& site_b, const CellCallback& on_cell) {
  validate(config, model_config);
  std::vector<CvCell> cells;
  const bool single = config.mode == TrainMode::kSingle;
  for (std::size_t fold = 0; fold < config.folds; ++fold) {
    const FoldSplit split = split_fold(single && config.single_site == 1 ? Dataset{} : site_a,
                                       single && config.single_site == 0 ? Dataset{} : site_b, config.folds, fold,
                                       config.fold_seed);
    const SiteData train_data(&split.train_a, &split.train_b);
    const SiteData test_data(&split.test_a, &split.test_b);
    for (std::uint64_t seed : config.seeds) {
      CvCell cell;
      cell.mode = config.mode;
      if (single) cell.single_site = config.single_site;
      cell.fold = fold;
      cell.seed = seed;
      try {
        TrainConfig c = config;
        c.eval_every = 0;
        TrainResult r = train(c, model_config, train_data, seed, &test_data);
        cell.report = *r.record.epochs.back().validation;
      } catch (const std::exception& e) {
        cell.failed = true;
        cell.error = e.what();
      }
      if (on_cell) on_cell(cell);
      cells.push_back(std::move(cell));
    }
  }
  return cells;
}

}  // namespace xsite
