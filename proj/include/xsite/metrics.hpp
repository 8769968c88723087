#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "xsite/batch_norm.hpp"

namespace xsite {

// All percentages are in [0, 100].
struct ConfusionMetrics {
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
  double accuracy = 0.0;
  double precision = 0.0;
  double recall = 0.0;  // sensitivity
  double f1 = 0.0;
  bool precision_undefined = false;  // no predicted positives; precision and f1 reported as 0
};

// Positive iff score >= threshold. Throws DegenerateError with no samples or no actual positives.
ConfusionMetrics confusion_metrics(std::span<const double> scores, std::span<const int> labels,
                                   double threshold = 0.5);

struct RocPoint {
  double fpr;
  double tpr;
  double threshold;  // predict positive when score >= threshold; first point uses +inf
};

// Mann-Whitney AUC in [0,1], ties counted half. Throws DegenerateError for single-class input.
double roc_auc(std::span<const double> scores, std::span<const int> labels);

// Threshold sweep over distinct scores, from (0,0) to (1,1).
std::vector<RocPoint> roc_curve(std::span<const double> scores, std::span<const int> labels);
double trapezoid_area(std::span<const RocPoint> curve);
void write_roc_csv(const std::filesystem::path& path, std::span<const RocPoint> curve);

// Regularized incomplete beta I_x(a,b) by Lentz's continued fraction.
double incomplete_beta(double a, double b, double x);

// Two-sided tail probability of Student's t with df degrees of freedom.
double student_t_two_sided(double t, double df);

struct TTestResult {
  double t = 0.0;
  double df = 0.0;
  double p = 1.0;
};

// Pairs a[i] with b[i]; d = a - b. Throws ShapeError for length mismatch or n < 2
// and DegenerateError when the differences have zero variance.
TTestResult paired_t_test(std::span<const double> a, std::span<const double> b);

struct SiteMetrics {
  double accuracy = 0, f1 = 0, recall = 0, precision = 0, auc = 0;  // percent
};

SiteMetrics evaluate_site(std::span<const double> scores, std::span<const int> labels);

// One trained model's held-out results, keyed by site.
struct MetricsReport {
  std::map<SiteId, SiteMetrics> sites;
};

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // sample std, 0 for a single value
};

MeanStd mean_std(std::span<const double> values);

struct AggregateSite {
  MeanStd accuracy, f1, recall, precision, auc;
  std::size_t runs = 0;
};

struct AggregateReport {
  std::map<SiteId, AggregateSite> sites;
};

// Throws ConfigError when reports is empty or their site sets differ.
AggregateReport aggregate(std::span<const MetricsReport> reports);

struct TableRow {
  std::string method;
  AggregateReport report;
  bool failed = false;  // cell could not be produced; rendered as "failed"
};

// Columns: method, then per site Accuracy, F1, Recall, Precision, AUC as mean±std with two decimals.
std::string render_table_csv(std::span<const TableRow> rows, std::span<const SiteId> sites);
std::string render_table_text(std::span<const TableRow> rows, std::span<const SiteId> sites);

std::string site_name(SiteId site);  // 0 -> "A", 1 -> "B", otherwise "S<n>"

}  // namespace xsite
