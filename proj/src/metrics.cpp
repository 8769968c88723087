#include "xsite/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

#include "xsite/errors.hpp"

namespace xsite {

namespace {

void check_inputs(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw ShapeError("scores and labels differ in length");
  for (int l : labels)
    if (l != 0 && l != 1) throw ShapeError("labels must be 0 or 1");
}

double pct(std::size_t num, std::size_t den) { return 100.0 * static_cast<double>(num) / static_cast<double>(den); }

}  // namespace

ConfusionMetrics confusion_metrics(std::span<const double> scores, std::span<const int> labels, double threshold) {
  check_inputs(scores, labels);
  if (scores.empty()) throw DegenerateError("confusion metrics need at least one sample");
  ConfusionMetrics m;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const bool pred = scores[i] >= threshold;
    if (labels[i] == 1) {
      pred ? ++m.tp : ++m.fn;
    } else {
      pred ? ++m.fp : ++m.tn;
    }
  }
  if (m.tp + m.fn == 0) throw DegenerateError("recall undefined: no actual positives");
  m.accuracy = pct(m.tp + m.tn, scores.size());
  m.recall = pct(m.tp, m.tp + m.fn);
  if (m.tp + m.fp == 0) {
    m.precision_undefined = true;
  } else {
    m.precision = pct(m.tp, m.tp + m.fp);
  }
  if (m.precision + m.recall > 0.0) m.f1 = 2.0 * m.precision * m.recall / (m.precision + m.recall);
  return m;
}

double roc_auc(std::span<const double> scores, std::span<const int> labels) {
  check_inputs(scores, labels);
  std::vector<double> neg;
  std::size_t pos = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] == 1) {
      ++pos;
    } else {
      neg.push_back(scores[i]);
    }
  }
  if (pos == 0 || neg.empty()) throw DegenerateError("AUC needs both classes");
  std::sort(neg.begin(), neg.end());
  // Twice the Mann-Whitney count keeps everything integral.
  std::size_t twice = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] != 1) continue;
    const auto lo = std::lower_bound(neg.begin(), neg.end(), scores[i]);
    const auto hi = std::upper_bound(lo, neg.end(), scores[i]);
    twice += 2 * static_cast<std::size_t>(lo - neg.begin()) + static_cast<std::size_t>(hi - lo);
  }
  return static_cast<double>(twice) / (2.0 * static_cast<double>(pos) * static_cast<double>(neg.size()));
}

std::vector<RocPoint> roc_curve(std::span<const double> scores, std::span<const int> labels) {
  check_inputs(scores, labels);
  std::vector<std::size_t> order(scores.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::size_t pos = 0, neg = 0;
  for (int l : labels) (l == 1 ? pos : neg)++;
  if (pos == 0 || neg == 0) throw DegenerateError("ROC needs both classes");
  std::vector<RocPoint> curve{{0.0, 0.0, std::numeric_limits<double>::infinity()}};
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < order.size();) {
    const double s = scores[order[i]];
    for (; i < order.size() && scores[order[i]] == s; ++i) (labels[order[i]] == 1 ? tp : fp)++;
    curve.push_back({static_cast<double>(fp) / static_cast<double>(neg), static_cast<double>(tp) / static_cast<double>(pos), s});
  }
  return curve;
}

double trapezoid_area(std::span<const RocPoint> curve) {
  double area = 0.0;
  for (std::size_t i = 1; i < curve.size(); ++i)
    area += (curve[i].fpr - curve[i - 1].fpr) * (curve[i].tpr + curve[i - 1].tpr) / 2.0;
  return area;
}

void write_roc_csv(const std::filesystem::path& path, std::span<const RocPoint> curve) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << "fpr,tpr,threshold\n" << std::setprecision(17);
  for (const auto& p : curve) {
    out << p.fpr << ',' << p.tpr << ',';
    if (std::isinf(p.threshold)) {
      out << "inf";
    } else {
      out << p.threshold;
    }
    out << '\n';
  }
  if (!out) throw IoError("write failed: " + path.string());
}

namespace {

double beta_continued_fraction(double a, double b, double x) {
  constexpr int kMaxIter = 500;
  constexpr double kEps = 1e-16;
  constexpr double kTiny = 1e-300;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0, d = 1.0 - qab * x / qap;
  if (std::fabs(d) < kTiny) d = kTiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::fabs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::fabs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double delta = d * c;
    h *= delta;
    if (std::fabs(delta - 1.0) < kEps) return h;
  }
  throw NumericalError("incomplete beta continued fraction did not converge");
}

}  // namespace

double incomplete_beta(double a, double b, double x) {
  if (!(a > 0.0) || !(b > 0.0)) throw std::invalid_argument("incomplete_beta: a and b must be positive");
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  const double log_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
  const double front = std::exp(log_front);
  // The fraction converges fastest on the side of the mean.
  if (x < (a + 1.0) / (a + b + 2.0)) return front * beta_continued_fraction(a, b, x) / a;
  return 1.0 - front * beta_continued_fraction(b, a, 1.0 - x) / b;
}

double student_t_two_sided(double t, double df) {
  if (!(df > 0.0)) throw std::invalid_argument("student_t_two_sided: df must be positive");
  if (std::isinf(t)) return 0.0;
  return incomplete_beta(df / 2.0, 0.5, df / (df + t * t));
}

TTestResult paired_t_test(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("paired t-test: samples differ in length");
  const std::size_t n = a.size();
  if (n < 2) throw ShapeError("paired t-test: need at least 2 pairs");
  std::vector<double> d(n);
  for (std::size_t i = 0; i < n; ++i) d[i] = a[i] - b[i];
  const MeanStd ms = mean_std(d);
  if (!(ms.std > 0.0)) throw DegenerateError("paired t-test: differences have zero variance");
  TTestResult r;
  r.df = static_cast<double>(n - 1);
  r.t = ms.mean / (ms.std / std::sqrt(static_cast<double>(n)));
  r.p = student_t_two_sided(r.t, r.df);
  return r;
}

SiteMetrics evaluate_site(std::span<const double> scores, std::span<const int> labels) {
  const ConfusionMetrics c = confusion_metrics(scores, labels);
  SiteMetrics m;
  m.accuracy = c.accuracy;
  m.f1 = c.f1;
  m.recall = c.recall;
  m.precision = c.precision;
  m.auc = 100.0 * roc_auc(scores, labels);
  return m;
}

MeanStd mean_std(std::span<const double> values) {
  if (values.empty()) throw ShapeError("mean_std of no values");
  MeanStd r;
  for (double v : values) r.mean += v;
  r.mean /= static_cast<double>(values.size());
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - r.mean) * (v - r.mean);
    r.std = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return r;
}

AggregateReport aggregate(std::span<const MetricsReport> reports) {
  if (reports.empty()) throw ConfigError("aggregate: no reports");
  for (const auto& r : reports) {
    if (r.sites.size() != reports.front().sites.size() ||
        !std::equal(r.sites.begin(), r.sites.end(), reports.front().sites.begin(),
                    [](const auto& x, const auto& y) { return x.first == y.first; })) {
      throw ConfigError("aggregate: reports cover different site sets");
    }
  }
  AggregateReport out;
  for (const auto& [site, unused] : reports.front().sites) {
    (void)unused;
    auto collect = [&](double SiteMetrics::*field) {
      std::vector<double> v;
      for (const auto& r : reports) v.push_back(r.sites.at(site).*field);
      return mean_std(v);
    };
    AggregateSite s;
    s.accuracy = collect(&SiteMetrics::accuracy);
    s.f1 = collect(&SiteMetrics::f1);
    s.recall = collect(&SiteMetrics::recall);
    s.precision = collect(&SiteMetrics::precision);
    s.auc = collect(&SiteMetrics::auc);
    s.runs = reports.size();
    out.sites[site] = s;
  }
  return out;
}

std::string site_name(SiteId site) {
  if (site == 0) return "A";
  if (site == 1) return "B";
  return "S" + std::to_string(site);
}

namespace {

constexpr const char* kMetricNames[] = {"Accuracy", "F1", "Recall", "Precision", "AUC"};

std::vector<MeanStd> metric_values(const AggregateSite& s) { return {s.accuracy, s.f1, s.recall, s.precision, s.auc}; }

std::string fixed2(double v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2) << v;
  return os.str();
}

}  // namespace

std::string render_table_csv(std::span<const TableRow> rows, std::span<const SiteId> sites) {
  std::ostringstream os;
  os << "method";
  for (SiteId s : sites)
    for (const char* m : kMetricNames) os << ",site" << site_name(s) << '_' << m << "_mean,site" << site_name(s) << '_' << m << "_std";
  os << '\n';
  for (const auto& row : rows) {
    os << row.method;
    for (SiteId s : sites) {
      const auto it = row.report.sites.find(s);
      if (row.failed || it == row.report.sites.end()) {
        for (std::size_t i = 0; i < 5; ++i) os << ",failed,failed";
        continue;
      }
      for (const MeanStd& v : metric_values(it->second)) os << ',' << fixed2(v.mean) << ',' << fixed2(v.std);
    }
    os << '\n';
  }
  return os.str();
}

std::string render_table_text(std::span<const TableRow> rows, std::span<const SiteId> sites) {
  std::vector<std::vector<std::string>> cells;
  std::vector<std::string> header{"Method"};
  for (SiteId s : sites)
    for (const char* m : kMetricNames) header.push_back(site_name(s) + " " + m);
  cells.push_back(header);
  for (const auto& row : rows) {
    std::vector<std::string> line{row.method};
    for (SiteId s : sites) {
      const auto it = row.report.sites.find(s);
      if (row.failed || it == row.report.sites.end()) {
        for (std::size_t i = 0; i < 5; ++i) line.push_back("failed");
        continue;
      }
      for (const MeanStd& v : metric_values(it->second)) line.push_back(fixed2(v.mean) + "+-" + fixed2(v.std));
    }
    cells.push_back(line);
  }
  std::vector<std::size_t> width(header.size(), 0);
  for (const auto& line : cells)
    for (std::size_t i = 0; i < line.size(); ++i) width[i] = std::max(width[i], line[i].size());
  std::ostringstream os;
  for (const auto& line : cells) {
    for (std::size_t i = 0; i < line.size(); ++i) {
      if (i) os << "  ";
      os << std::left << std::setw(static_cast<int>(width[i])) << line[i];
    }
    os << '\n';
  }
  return os.str();
}

}  // namespace xsite
