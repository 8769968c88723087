#include "xsite/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "xsite/errors.hpp"
#include "xsite/ops.hpp"

namespace xsite {

namespace {
constexpr double kProbFloor = 1e-12;
}

CrossEntropyResult cross_entropy(const Tensor& probs, const Tensor& onehot) {
  if (probs.rank() != 2 || probs.shape() != onehot.shape()) {
    throw ShapeError("cross_entropy: probs " + shape_str(probs.shape()) + " vs onehot " + shape_str(onehot.shape()));
  }
  const std::size_t n = probs.dim(0), c = probs.dim(1);
  const auto p = probs.values();
  const auto g = onehot.values();
  for (std::size_t i = 0; i < n; ++i) {
    double row = 0.0, hot = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      row += p[i * c + j];
      hot += g[i * c + j];
    }
    if (std::abs(row - 1.0) > 1e-6) throw std::invalid_argument("cross_entropy: probability row does not sum to 1");
    if (hot != 1.0) throw std::invalid_argument("cross_entropy: target row is not one-hot");
  }
  CrossEntropyResult res;
  double acc = 0.0;
  for (std::size_t i = 0; i < n * c; ++i) {
    if (g[i] == 0.0) continue;
    if (p[i] < kProbFloor) ++res.clamped;
    acc -= g[i] * std::log(std::max(p[i], kProbFloor));
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  res.loss = Tensor::from_op({1}, {acc * inv_n}, {probs}, [inv_n, g = std::vector<double>(g.begin(), g.end())](
                                                               detail::Node& self) {
    auto& gp = self.parents[0]->grad_buffer();
    const auto& pv = self.parents[0]->values;
    for (std::size_t i = 0; i < gp.size(); ++i)
      if (g[i] != 0.0 && pv[i] >= kProbFloor) gp[i] -= self.grad[0] * inv_n * g[i] / pv[i];
  });
  return res;
}

CrossEntropyResult softmax_cross_entropy(const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
    throw ShapeError("softmax_cross_entropy: logits " + shape_str(logits.shape()) + " vs " +
                     std::to_string(labels.size()) + " labels");
  }
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  const auto x = logits.values();
  std::vector<double> probs(n * c);
  CrossEntropyResult res;
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const int y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= c) throw ShapeError("softmax_cross_entropy: label out of range");
    const double mx = *std::max_element(x.begin() + i * c, x.begin() + (i + 1) * c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += probs[i * c + j] = std::exp(x[i * c + j] - mx);
    for (std::size_t j = 0; j < c; ++j) probs[i * c + j] /= z;
    const double log_p = x[i * c + y] - mx - std::log(z);
    if (log_p < std::log(kProbFloor)) ++res.clamped;
    acc -= log_p;
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  std::vector<int> ys(labels.begin(), labels.end());
  res.loss = Tensor::from_op({1}, {acc * inv_n}, {logits}, [=, probs = std::move(probs)](detail::Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    const double s = self.grad[0] * inv_n;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < c; ++j)
        g[i * c + j] += s * (probs[i * c + j] - (static_cast<int>(j) == ys[i] ? 1.0 : 0.0));
  });
  return res;
}

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("cosine_similarity: length mismatch");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  na = std::sqrt(na);
  nb = std::sqrt(nb);
  if (!(na > 1e-12) || !(nb > 1e-12)) throw DegenerateError("cosine_similarity: degenerate embedding (near-zero norm)");
  return std::clamp(dot / (na * nb), -1.0, 1.0);
}

ContrastiveResult contrastive_loss(const Tensor& z, std::span<const int> labels, const ContrastiveParams& params) {
  if (z.rank() != 2 || z.dim(0) != labels.size()) {
    throw ShapeError("contrastive_loss: z " + shape_str(z.shape()) + " vs " + std::to_string(labels.size()) +
                     " labels");
  }
  if (labels.size() < 2) throw ShapeError("contrastive_loss: needs at least 2 samples");
  if (!(params.tau > 0.0)) throw ConfigError("contrastive_loss: temperature must be positive");

  const std::size_t k = labels.size();
  const double tau = params.tau;
  const bool negatives_only = params.denominator == DenominatorMode::kNegativesOnly;
  const Tensor sim = ops::gram(ops::normalize_rows(z));
  const auto s = sim.values();

  ContrastiveResult res;
  // Per anchor: softmax weights over its denominator set and the number of positives.
  std::vector<double> weights(k * k, 0.0);
  std::vector<std::size_t> positives(k, 0);
  double total = 0.0;
  for (std::size_t m = 0; m < k; ++m) {
    for (std::size_t n = 0; n < k; ++n)
      if (n != m && labels[n] == labels[m]) ++positives[m];
    if (positives[m] == 0) continue;
    double mx = -std::numeric_limits<double>::infinity();
    bool any = false;
    for (std::size_t j = 0; j < k; ++j) {
      if (j == m || (negatives_only && labels[j] == labels[m])) continue;
      mx = std::max(mx, s[m * k + j] / tau);
      any = true;
    }
    if (!any) {
      ++res.skipped_anchors;
      positives[m] = 0;
      continue;
    }
    double z_sum = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      if (j == m || (negatives_only && labels[j] == labels[m])) continue;
      weights[m * k + j] = std::exp(s[m * k + j] / tau - mx);
      z_sum += weights[m * k + j];
    }
    for (std::size_t j = 0; j < k; ++j) weights[m * k + j] /= z_sum;
    const double lse = mx + std::log(z_sum);
    for (std::size_t n = 0; n < k; ++n)
      if (n != m && labels[n] == labels[m]) total += lse - s[m * k + n] / tau;
    res.pairs += positives[m];
  }

  if (res.pairs == 0) {
    res.degenerate = true;
    // Zero loss that still belongs to z's graph, so backward yields zero gradients.
    res.loss = ops::scale(ops::sum(sim), 0.0);
    return res;
  }
  const double inv = 1.0 / static_cast<double>(res.pairs);
  std::vector<int> ys(labels.begin(), labels.end());
  res.loss = Tensor::from_op({1}, {total * inv}, {sim}, [=](detail::Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    const double scale = self.grad[0] * inv / tau;
    for (std::size_t m = 0; m < k; ++m) {
      if (positives[m] == 0) continue;
      const double np = static_cast<double>(positives[m]);
      for (std::size_t j = 0; j < k; ++j) {
        double d = np * weights[m * k + j];
        if (j != m && ys[j] == ys[m]) d -= 1.0;
        g[m * k + j] += scale * d;
      }
    }
  });
  return res;
}

Tensor overall_loss(const Tensor& ce, const Tensor& con, double alpha) { return ops::add(ce, ops::scale(con, alpha)); }

double cosine_annealing(std::size_t t, const ScheduleParams& p, bool* clamped) {
  if (p.total_epochs == 0) throw ConfigError("cosine_annealing: total_epochs must be >= 1");
  if (!(0.0 <= p.eta_min && p.eta_min <= p.eta)) throw ConfigError("cosine_annealing: requires 0 <= eta_min <= eta");
  if (clamped) *clamped = t > p.total_epochs;
  if (t >= p.total_epochs) return p.eta_min;
  const double ratio = static_cast<double>(t) / static_cast<double>(p.total_epochs);
  return p.eta_min + 0.5 * (p.eta - p.eta_min) * (1.0 + std::cos(ratio * std::numbers::pi));
}

Adam::Adam(std::vector<Tensor> params, AdamOptions options) : params_(std::move(params)), options_(options) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const Tensor& p : params_) {
    m_.emplace_back(p.numel(), 0.0);
    v_.emplace_back(p.numel(), 0.0);
  }
}

void Adam::step(double lr) {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (!params_[i].has_grad()) continue;
    for (double g : params_[i].grad()) {
      if (!std::isfinite(g)) throw NumericalError("adam: non-finite gradient in parameter " + std::to_string(i));
    }
  }
  ++step_;
  const double t = static_cast<double>(step_);
  const double bc1 = 1.0 - std::pow(options_.beta1, t);
  const double bc2 = 1.0 - std::pow(options_.beta2, t);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto values = params_[i].mutable_values();
    const bool has = params_[i].has_grad();
    const auto grad = params_[i].grad();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < values.size(); ++j) {
      const double g = has ? grad[j] : 0.0;
      m[j] = options_.beta1 * m[j] + (1.0 - options_.beta1) * g;
      v[j] = options_.beta2 * v[j] + (1.0 - options_.beta2) * g * g;
      const double m_hat = m[j] / bc1;
      const double v_hat = v[j] / bc2;
      values[j] -= lr * m_hat / (std::sqrt(v_hat) + options_.epsilon);
    }
  }
}

void Adam::zero_grad() {
  for (Tensor& p : params_) p.zero_grad();
}

}  // namespace xsite
