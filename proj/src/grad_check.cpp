#include "xsite/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "xsite/errors.hpp"

namespace xsite {

GradCheckResult grad_check(const std::function<Tensor()>& loss, Tensor param, double h,
                           const std::vector<std::size_t>& coords) {
  const bool had_flag = param.requires_grad();
  param.set_requires_grad(true);
  param.zero_grad();
  loss().backward();
  std::vector<double> analytic(param.numel(), 0.0);
  if (param.has_grad()) std::copy(param.grad().begin(), param.grad().end(), analytic.begin());
  param.zero_grad();

  std::vector<std::size_t> idx = coords;
  if (idx.empty()) {
    idx.resize(param.numel());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
  }

  GradCheckResult result;
  auto values = param.mutable_values();
  for (std::size_t i : idx) {
    if (i >= values.size()) throw ShapeError("grad_check: coordinate out of range");
    const double saved = values[i];
    values[i] = saved + h;
    const double up = loss().item();
    values[i] = saved - h;
    const double down = loss().item();
    values[i] = saved;
    const double numeric = (up - down) / (2.0 * h);
    const double denom = std::max({1.0, std::abs(analytic[i]), std::abs(numeric)});
    const double err = std::abs(analytic[i] - numeric) / denom;
    if (err > result.max_rel_error || std::isnan(err)) {
      result = {err, i, analytic[i], numeric};
    }
  }
  param.set_requires_grad(had_flag);
  return result;
}

GradCheckResult grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double h) {
  Tensor leaf = x.clone();
  return grad_check([&] { return f(leaf); }, leaf, h);
}

}  // namespace xsite
