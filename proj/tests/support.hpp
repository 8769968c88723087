#pragma once

// Independent reference computations shared by the unit tests and the
// acceptance binary. None of these call into the library's numeric code.

#include <boost/math/distributions/students_t.hpp>
#include <boost/multiprecision/cpp_bin_float.hpp>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <random>
#include <span>
#include <vector>

#include <unistd.h>

#include "xsite/tensor.hpp"

namespace oracle {

// Fresh empty directory under the system temp dir, unique per process and name.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("xsite_" + std::to_string(::getpid()) + "_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline std::string slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

inline xsite::Tensor random_tensor(xsite::Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0,
                                   bool requires_grad = true) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(xsite::shape_numel(shape));
  for (double& x : v) x = u(rng);
  return xsite::Tensor(std::move(shape), std::move(v), requires_grad);
}

// Plain quadruple loop over output positions; out-of-range taps read zero.
inline std::vector<double> naive_conv(std::span<const double> in, std::size_t n, std::size_t c, std::size_t h,
                                      std::size_t w, std::span<const double> k, std::size_t f, std::size_t kh,
                                      std::size_t kw, std::span<const double> bias, std::size_t stride,
                                      std::size_t pad, std::size_t& oh, std::size_t& ow) {
  oh = (h + 2 * pad - kh) / stride + 1;
  ow = (w + 2 * pad - kw) / stride + 1;
  std::vector<double> out(n * f * oh * ow, 0.0);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t o = 0; o < f; ++o)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t x = 0; x < ow; ++x) {
          double s = bias.empty() ? 0.0 : bias[o];
          for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t i = 0; i < kh; ++i)
              for (std::size_t j = 0; j < kw; ++j) {
                const long iy = static_cast<long>(y * stride + i) - static_cast<long>(pad);
                const long ix = static_cast<long>(x * stride + j) - static_cast<long>(pad);
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(w)) continue;
                s += in[((b * c + ch) * h + iy) * w + ix] * k[((o * c + ch) * kh + i) * kw + j];
              }
          out[((b * f + o) * oh + y) * ow + x] = s;
        }
  return out;
}

struct ContrastiveOracle {
  double loss = 0.0;
  std::size_t pairs = 0;
};

// Enumerates every ordered pair (m, n) with equal labels and evaluates
// -log(exp(s_mn/tau) / sum_k exp(s_mk/tau)) literally.
inline ContrastiveOracle brute_contrastive(const std::vector<std::vector<double>>& z, const std::vector<int>& labels,
                                           double tau, bool all_other) {
  const std::size_t k = z.size();
  auto cos = [&](std::size_t a, std::size_t b) {
    double d = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < z[a].size(); ++i) {
      d += z[a][i] * z[b][i];
      na += z[a][i] * z[a][i];
      nb += z[b][i] * z[b][i];
    }
    return d / std::sqrt(na * nb);
  };
  ContrastiveOracle r;
  double total = 0.0;
  for (std::size_t m = 0; m < k; ++m) {
    for (std::size_t n = 0; n < k; ++n) {
      if (n == m || labels[n] != labels[m]) continue;
      double denom = 0.0;
      bool any = false;
      for (std::size_t j = 0; j < k; ++j) {
        if (j == m) continue;
        if (!all_other && labels[j] == labels[m]) continue;
        denom += std::exp(cos(m, j) / tau);
        any = true;
      }
      if (!any) continue;
      total += -std::log(std::exp(cos(m, n) / tau) / denom);
      ++r.pairs;
    }
  }
  r.loss = r.pairs ? total / static_cast<double>(r.pairs) : 0.0;
  return r;
}

// Mann-Whitney by explicit pair enumeration, as a rational count / (2 * P * N).
inline double brute_auc(std::span<const double> scores, std::span<const int> labels) {
  std::size_t twice = 0, pos = 0, neg = 0;
  for (int l : labels) (l == 1 ? pos : neg)++;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] != 1) continue;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (labels[j] == 1) continue;
      if (scores[i] > scores[j]) twice += 2;
      else if (scores[i] == scores[j]) twice += 1;
    }
  }
  return static_cast<double>(twice) / (2.0 * static_cast<double>(pos) * static_cast<double>(neg));
}

struct TTestOracle {
  double t = 0.0;
  double p = 0.0;
};

// Paired t statistic and two-sided p evaluated in 50-digit arithmetic with Boost.Math.
inline TTestOracle high_precision_t_test(const std::vector<double>& a, const std::vector<double>& b) {
  using Real = boost::multiprecision::cpp_bin_float_50;
  const std::size_t n = a.size();
  Real mean = 0;
  std::vector<Real> d(n);
  for (std::size_t i = 0; i < n; ++i) {
    d[i] = Real(a[i]) - Real(b[i]);
    mean += d[i];
  }
  mean /= n;
  Real ss = 0;
  for (const Real& x : d) ss += (x - mean) * (x - mean);
  const Real sd = sqrt(ss / (n - 1));
  const Real t = mean / (sd / sqrt(Real(n)));
  boost::math::students_t_distribution<Real> dist(Real(n - 1));
  const Real p = 2 * boost::math::cdf(boost::math::complement(dist, abs(t)));
  return {static_cast<double>(t), static_cast<double>(p)};
}

}  // namespace oracle
