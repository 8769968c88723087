#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "xsite/config.hpp"
#include "xsite/metrics.hpp"
#include "xsite/train.hpp"

namespace xsite {

// One comparison row's (fold, seed) results. The Single row joins the single-a
// cell (site A) and the single-b cell (site B) of the same fold and seed.
struct MethodCells {
  std::string method;
  std::vector<CvCell> cells;
};

struct TTestEntry {
  std::string baseline;
  SiteId site = 0;
  std::string metric;
  std::optional<TTestResult> result;  // empty when the differences are degenerate
  std::string note;
};

struct Comparison {
  std::vector<MethodCells> methods;  // Single, Joint, SepNorm, Contrastive
  std::vector<TableRow> rows;
  std::vector<TTestEntry> ttests;    // Contrastive against each baseline, paired per (fold, seed)
};

Comparison run_comparison(const ExperimentConfig& config, const std::array<Dataset, 2>& sites,
                          const CellCallback& on_cell = {});

// Mean AUC (percent) of a named row at a site; throws ConfigError if the row failed or is absent.
double mean_auc(const Comparison& c, const std::string& method, SiteId site);

std::string ttest_csv(const Comparison& c);
std::string cells_csv(const Comparison& c);  // method,fold,seed,site,accuracy,f1,recall,precision,auc,error

}  // namespace xsite
