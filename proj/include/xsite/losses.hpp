#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "xsite/tensor.hpp"

namespace xsite {

struct CrossEntropyResult {
  Tensor loss;
  std::size_t clamped = 0;  // true-class probabilities raised to the 1e-12 floor
};

// (1/N) * sum_i -g_i . log p_i for probabilities p [N,C] and one-hot g [N,C].
CrossEntropyResult cross_entropy(const Tensor& probs, const Tensor& onehot);

// Fused log-softmax + cross entropy on raw logits with integer labels.
CrossEntropyResult softmax_cross_entropy(const Tensor& logits, std::span<const int> labels);

// Standard cosine; throws DegenerateError when either norm is <= 1e-12.
double cosine_similarity(std::span<const double> a, std::span<const double> b);

enum class DenominatorMode {
  kNegativesOnly,  // sum over k with a different class from the anchor
  kAllOther,       // sum over every k != anchor (standard NT-Xent)
};

struct ContrastiveParams {
  double tau = 0.05;
  double alpha = 1.0;
  DenominatorMode denominator = DenominatorMode::kNegativesOnly;
};

struct ContrastiveResult {
  Tensor loss;
  std::size_t pairs = 0;            // ordered positive pairs that contributed
  std::size_t skipped_anchors = 0;  // anchors with positives but an empty denominator
  bool degenerate = false;          // no contributing pair; loss is 0
};

/// Temperature-scaled contrastive loss over projected vectors z [K,D].
///
/// Pairs are positive iff the class labels match, irrespective of site. Each
/// ordered positive pair (m,n) contributes
///   -sim(m,n)/tau + log sum_{k in D(m)} exp(sim(m,k)/tau)
/// and the result is the mean over contributing pairs.
ContrastiveResult contrastive_loss(const Tensor& z, std::span<const int> labels, const ContrastiveParams& params);

// ce + alpha * con
Tensor overall_loss(const Tensor& ce, const Tensor& con, double alpha);

struct ScheduleParams {
  double eta = 1e-4;
  double eta_min = 0.0;
  std::size_t total_epochs = 100;
};

// eta_min + (eta - eta_min) * (1 + cos(pi * t / T)) / 2; t > T clamps to eta_min and sets *clamped.
double cosine_annealing(std::size_t t, const ScheduleParams& p, bool* clamped = nullptr);

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Adam with bias correction over a fixed list of parameter tensors.
/// Parameters without a gradient buffer are treated as having zero gradient.
class Adam {
 public:
  Adam() = default;
  explicit Adam(std::vector<Tensor> params, AdamOptions options = {});

  // Throws NumericalError (before touching any parameter) if a gradient is not finite.
  void step(double lr);
  void zero_grad();

  std::size_t steps() const { return step_; }
  const AdamOptions& options() const { return options_; }
  const std::vector<Tensor>& params() const { return params_; }
  std::vector<std::vector<double>>& first_moments() { return m_; }
  std::vector<std::vector<double>>& second_moments() { return v_; }
  const std::vector<std::vector<double>>& first_moments() const { return m_; }
  const std::vector<std::vector<double>>& second_moments() const { return v_; }
  void set_steps(std::size_t steps) { step_ = steps; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t step_ = 0;
  AdamOptions options_;
};

}  // namespace xsite
