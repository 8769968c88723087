#include "xsite/experiment.hpp"

#include <iomanip>
#include <sstream>

#include "xsite/errors.hpp"

namespace xsite {

namespace {

std::vector<CvCell> run_mode(const ExperimentConfig& config, const std::array<Dataset, 2>& sites,
                             const std::string& mode, const CellCallback& on_cell) {
  TrainConfig t = config.train;
  apply_mode(t, mode);
  return run_cross_validation(t, model_for_mode(config.model, t.mode), sites[0], sites[1], on_cell);
}

std::vector<CvCell> join_single(const std::vector<CvCell>& a, const std::vector<CvCell>& b) {
  std::vector<CvCell> out;
  for (std::size_t i = 0; i < a.size() && i < b.size(); ++i) {
    CvCell c = a[i];
    c.single_site.reset();
    if (a[i].failed || b[i].failed) {
      c.failed = true;
      c.error = a[i].failed ? a[i].error : b[i].error;
      c.report = {};
    } else {
      c.report.sites[1] = b[i].report.sites.at(1);
    }
    out.push_back(std::move(c));
  }
  return out;
}

double metric_of(const SiteMetrics& m, const std::string& name) {
  if (name == "accuracy") return m.accuracy;
  if (name == "f1") return m.f1;
  if (name == "recall") return m.recall;
  if (name == "precision") return m.precision;
  return m.auc;
}

const std::vector<std::string> kMetrics{"accuracy", "f1", "recall", "precision", "auc"};

}  // namespace

Comparison run_comparison(const ExperimentConfig& config, const std::array<Dataset, 2>& sites,
                          const CellCallback& on_cell) {
  Comparison c;
  const auto single_a = run_mode(config, sites, "single-a", on_cell);
  const auto single_b = run_mode(config, sites, "single-b", on_cell);
  c.methods.push_back({"Single", join_single(single_a, single_b)});
  c.methods.push_back({"Joint", run_mode(config, sites, "joint", on_cell)});
  c.methods.push_back({"SepNorm", run_mode(config, sites, "sepnorm", on_cell)});
  c.methods.push_back({"Contrastive", run_mode(config, sites, "contrastive", on_cell)});

  for (const auto& m : c.methods) {
    TableRow row;
    row.method = m.method;
    std::vector<MetricsReport> reports;
    for (const auto& cell : m.cells) {
      if (cell.failed) {
        row.failed = true;
        break;
      }
      reports.push_back(cell.report);
    }
    if (!row.failed && !reports.empty()) row.report = aggregate(reports);
    row.failed = row.failed || reports.empty();
    c.rows.push_back(std::move(row));
  }

  const MethodCells& ours = c.methods.back();
  for (std::size_t b = 0; b + 1 < c.methods.size(); ++b) {
    const MethodCells& base = c.methods[b];
    for (SiteId site = 0; site < 2; ++site) {
      for (const auto& metric : kMetrics) {
        TTestEntry e;
        e.baseline = base.method;
        e.site = site;
        e.metric = metric;
        std::vector<double> x, y;
        for (std::size_t i = 0; i < ours.cells.size() && i < base.cells.size(); ++i) {
          if (ours.cells[i].failed || base.cells[i].failed) continue;
          x.push_back(metric_of(ours.cells[i].report.sites.at(site), metric));
          y.push_back(metric_of(base.cells[i].report.sites.at(site), metric));
        }
        try {
          e.result = paired_t_test(x, y);
        } catch (const std::exception& ex) {
          e.note = ex.what();
        }
        c.ttests.push_back(std::move(e));
      }
    }
  }
  return c;
}

double mean_auc(const Comparison& c, const std::string& method, SiteId site) {
  for (const auto& row : c.rows) {
    if (row.method != method) continue;
    if (row.failed) throw ConfigError("comparison row " + method + " failed");
    return row.report.sites.at(site).auc.mean;
  }
  throw ConfigError("comparison has no row " + method);
}

std::string ttest_csv(const Comparison& c) {
  std::ostringstream os;
  os << "method,baseline,site,metric,t,df,p,note\n" << std::setprecision(10);
  for (const auto& e : c.ttests) {
    os << "Contrastive," << e.baseline << ',' << site_name(e.site) << ',' << e.metric << ',';
    if (e.result) {
      os << e.result->t << ',' << e.result->df << ',' << e.result->p << ',';
    } else {
      os << ",,,";
    }
    std::string note = e.note;
    for (char& ch : note)
      if (ch == ',' || ch == '\n') ch = ';';
    os << note << '\n';
  }
  return os.str();
}

std::string cells_csv(const Comparison& c) {
  std::ostringstream os;
  os << "method,fold,seed,site,accuracy,f1,recall,precision,auc,error\n" << std::setprecision(17);
  for (const auto& m : c.methods) {
    for (const auto& cell : m.cells) {
      if (cell.failed) {
        std::string err = cell.error;
        for (char& ch : err)
          if (ch == ',' || ch == '\n') ch = ';';
        os << m.method << ',' << cell.fold << ',' << cell.seed << ",,,,,,," << err << '\n';
        continue;
      }
      for (const auto& [site, s] : cell.report.sites) {
        os << m.method << ',' << cell.fold << ',' << cell.seed << ',' << site_name(site) << ',' << s.accuracy << ','
           << s.f1 << ',' << s.recall << ',' << s.precision << ',' << s.auc << ",\n";
      }
    }
  }
  return os.str();
}

}  // namespace xsite
