#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "xsite/tensor.hpp"

namespace xsite {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

/// Compares reverse-mode gradients of `loss` with central differences.
///
/// `loss` must rebuild its graph from the current values of `param` on every
/// call and be deterministic. The error per coordinate is
/// |analytic - numeric| / max(1, |analytic|, |numeric|); the maximum is returned.
/// When `coords` is non-empty only those flat indices are perturbed.
GradCheckResult grad_check(const std::function<Tensor()>& loss, Tensor param, double h = 1e-4,
                           const std::vector<std::size_t>& coords = {});

// Convenience form for f(x) with x a fresh leaf.
GradCheckResult grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double h = 1e-4);

}  // namespace xsite
