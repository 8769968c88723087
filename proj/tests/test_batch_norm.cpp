#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "support.hpp"
#include "xsite/batch_norm.hpp"
#include "xsite/errors.hpp"
#include "xsite/grad_check.hpp"
#include "xsite/ops.hpp"

using namespace xsite;

namespace {

// Per-channel mean and population variance of [N,M,H,W] values.
std::pair<std::vector<double>, std::vector<double>> moments(const Tensor& y) {
  const std::size_t n = y.dim(0), m = y.dim(1), s = y.numel() / (n * m);
  std::vector<double> mean(m, 0.0), var(m, 0.0);
  for (std::size_t c = 0; c < m; ++c) {
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t i = 0; i < s; ++i) mean[c] += y.at((b * m + c) * s + i);
    mean[c] /= static_cast<double>(n * s);
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t i = 0; i < s; ++i) var[c] += std::pow(y.at((b * m + c) * s + i) - mean[c], 2);
    var[c] /= static_cast<double>(n * s);
  }
  return {mean, var};
}

}  // namespace

TEST(BatchNorm, ConstantInputNormalizesToZero) {
  NormLayerState st = NormLayerState::make(2);
  Tensor y = bn_forward(Tensor::full({4, 2, 3, 3}, 7.0), st, NormMode::kTrain);
  for (double v : y.values()) EXPECT_LE(std::abs(v), 7.0 * std::sqrt(1e-5));
}

TEST(BatchNorm, ThreeValuesWithTinyEpsilon) {
  NormLayerState st = NormLayerState::make(1, 0.1, 1e-15);
  Tensor y = bn_forward(Tensor({3, 1}, {1, 2, 3}), st, NormMode::kTrain);
  EXPECT_NEAR(y.at(0), -1.224744871391589, 1e-9);
  EXPECT_NEAR(y.at(1), 0.0, 1e-12);
  EXPECT_NEAR(y.at(2), 1.224744871391589, 1e-9);
  // Running stats: 0.9 * init + 0.1 * batch, biased variance 2/3.
  EXPECT_DOUBLE_EQ(st.running_mean[0], 0.1 * 2.0);
  EXPECT_DOUBLE_EQ(st.running_var[0], 0.9 * 1.0 + 0.1 * (2.0 / 3.0));
}

TEST(BatchNorm, ZeroGammaGivesBeta) {
  std::mt19937_64 rng(2);
  NormLayerState st = NormLayerState::make(3);
  for (double& g : st.gamma.mutable_values()) g = 0.0;
  st.beta.mutable_values()[1] = 2.5;
  Tensor y = bn_forward(oracle::random_tensor({2, 3, 2, 2}, rng), st, NormMode::kTrain);
  for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_EQ(y.at(i), (i / 4) % 3 == 1 ? 2.5 : 0.0);
}

TEST(BatchNorm, TrainOutputMomentsMatchAffine) {
  std::mt19937_64 rng(9);
  NormLayerState st = NormLayerState::make(3);
  const std::vector<double> gamma{0.5, 2.0, -1.5}, beta{0.0, 1.0, -3.0};
  std::copy(gamma.begin(), gamma.end(), st.gamma.mutable_values().begin());
  std::copy(beta.begin(), beta.end(), st.beta.mutable_values().begin());
  Tensor y = bn_forward(oracle::random_tensor({5, 3, 4, 4}, rng, -3.0, 5.0), st, NormMode::kTrain);
  auto [mean, var] = moments(y);
  for (std::size_t c = 0; c < 3; ++c) {
    EXPECT_LT(std::abs(mean[c] - beta[c]), 1e-6 * (1 + std::abs(beta[c])));
    EXPECT_NEAR(var[c], gamma[c] * gamma[c], 1e-4);
  }
}

TEST(BatchNorm, RejectsSingleElementAndChannelMismatch) {
  NormLayerState st = NormLayerState::make(2);
  EXPECT_THROW(bn_forward(Tensor::zeros({1, 2, 1, 1}), st, NormMode::kTrain), DegenerateError);
  EXPECT_NO_THROW(bn_forward(Tensor::zeros({1, 2, 1, 1}), st, NormMode::kEval));
  EXPECT_THROW(bn_forward(Tensor::zeros({2, 3, 2, 2}), st, NormMode::kTrain), ShapeError);
}

TEST(BatchNorm, GradCheckAndAnalyticBeta) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed);
    NormLayerState st = NormLayerState::make(3);
    st.gamma = oracle::random_tensor({3}, rng, 0.5, 1.5);
    st.beta = oracle::random_tensor({3}, rng);
    Tensor x = oracle::random_tensor({2, 3, 2, 2}, rng);
    Tensor w = oracle::random_tensor({2, 3, 2, 2}, rng, -1, 1, false);
    auto loss = [&] {
      NormLayerState copy = st;  // shares gamma/beta; running stats stay out of the check
      return ops::sum(ops::mul(bn_forward(x, copy, NormMode::kTrain), w));
    };
    EXPECT_LT(grad_check(loss, x).max_rel_error, 1e-4) << "seed " << seed;
    EXPECT_LT(grad_check(loss, st.gamma).max_rel_error, 1e-4);
    EXPECT_LT(grad_check(loss, st.beta).max_rel_error, 1e-4);
  }

  NormLayerState st = NormLayerState::make(2);
  std::mt19937_64 rng(1);
  ops::sum(bn_forward(oracle::random_tensor({3, 2, 2, 5}, rng), st, NormMode::kTrain)).backward();
  EXPECT_DOUBLE_EQ(st.beta.grad()[0], 30.0);
  EXPECT_DOUBLE_EQ(st.beta.grad()[1], 30.0);
}

TEST(BatchNorm, InputGradientSumsToZeroPerChannel) {
  std::mt19937_64 rng(17);
  NormLayerState st = NormLayerState::make(3);
  Tensor x = oracle::random_tensor({4, 3, 3, 3}, rng);
  Tensor w = oracle::random_tensor({4, 3, 3, 3}, rng, -2, 2, false);
  ops::sum(ops::mul(ops::relu(bn_forward(x, st, NormMode::kTrain)), w)).backward();
  for (std::size_t c = 0; c < 3; ++c) {
    double s = 0.0;
    for (std::size_t b = 0; b < 4; ++b)
      for (std::size_t i = 0; i < 9; ++i) s += x.grad()[(b * 3 + c) * 9 + i];
    EXPECT_NEAR(s, 0.0, 1e-10);
  }
}

TEST(BatchNorm, EvalIsPureAndUsesRunningStats) {
  NormLayerState st = NormLayerState::make(1);
  st.running_mean = {2.0};
  st.running_var = {4.0};
  const NormLayerState before = st;
  Tensor x({2, 1}, {2.0, 6.0});
  Tensor a = bn_forward(x, st, NormMode::kEval);
  Tensor b = bn_forward(x, st, NormMode::kEval);
  EXPECT_EQ(std::vector<double>(a.values().begin(), a.values().end()),
            std::vector<double>(b.values().begin(), b.values().end()));
  EXPECT_DOUBLE_EQ(a.at(1), 4.0 / std::sqrt(4.0 + 1e-5));
  EXPECT_EQ(st.running_mean, before.running_mean);
  EXPECT_EQ(st.running_var, before.running_var);
}

TEST(BatchNorm, RunningMeanConvergesToDistributionMean) {
  std::mt19937_64 rng(33);
  std::normal_distribution<double> d(1.5, 2.0);
  NormLayerState st = NormLayerState::make(1);
  for (int batch = 0; batch < 500; ++batch) {
    std::vector<double> v(64);
    for (double& x : v) x = d(rng);
    bn_forward(Tensor({64, 1}, v), st, NormMode::kTrain);
  }
  // The EMA averages about (2 - m) / m = 19 batches of 64 samples.
  const double se = 2.0 / std::sqrt(64.0 * 19.0);
  EXPECT_LT(std::abs(st.running_mean[0] - 1.5), 3 * se);
  EXPECT_GE(st.running_var[0], 0.0);
}

TEST(Dsbn, MatchesBnForSiteBitExactly) {
  std::mt19937_64 rng(4);
  DsbnState ds(3, 2);
  ds.site(1).gamma.mutable_values()[0] = 1.7;
  NormLayerState ref = ds.site(1);
  ref.gamma = ds.site(1).gamma.clone();
  ref.beta = ds.site(1).beta.clone();
  Tensor x = oracle::random_tensor({3, 3, 2, 2}, rng);
  Tensor a = dsbn_forward(x, ds, 1, NormMode::kTrain);
  Tensor b = bn_forward(x, ref, NormMode::kTrain);
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_EQ(a.at(i), b.at(i));
  EXPECT_EQ(ds.site(1).running_mean, ref.running_mean);
  EXPECT_EQ(ds.site(1).running_var, ref.running_var);
}

TEST(Dsbn, SiteIsolationAndFreshStatesAgree) {
  std::mt19937_64 rng(6);
  DsbnState ds(2, 2);
  Tensor x = oracle::random_tensor({4, 2, 3, 3}, rng);
  Tensor ya = dsbn_forward(x, ds, 0, NormMode::kTrain);
  Tensor yb = dsbn_forward(x, ds, 1, NormMode::kTrain);
  for (std::size_t i = 0; i < ya.numel(); ++i) EXPECT_EQ(ya.at(i), yb.at(i));

  const auto mean_b = ds.site(1).running_mean, var_b = ds.site(1).running_var;
  const std::vector<double> gamma_b(ds.site(1).gamma.values().begin(), ds.site(1).gamma.values().end());
  for (int i = 0; i < 20; ++i) dsbn_forward(oracle::random_tensor({4, 2, 3, 3}, rng, 0, 5), ds, 0, NormMode::kTrain);
  EXPECT_EQ(ds.site(1).running_mean, mean_b);
  EXPECT_EQ(ds.site(1).running_var, var_b);
  EXPECT_EQ(std::vector<double>(ds.site(1).gamma.values().begin(), ds.site(1).gamma.values().end()), gamma_b);
  EXPECT_NE(ds.site(0).running_mean, mean_b);
}

TEST(Dsbn, RejectsUnknownSite) {
  DsbnState ds(2, 2);
  EXPECT_THROW(dsbn_forward(Tensor::zeros({2, 2}), ds, 2, NormMode::kTrain), ConfigError);
}
