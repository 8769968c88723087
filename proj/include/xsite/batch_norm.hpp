#pragma once

#include <cstddef>
#include <vector>

#include "xsite/tensor.hpp"

namespace xsite {

/// Data source index. Site A = 0, site B = 1.
using SiteId = std::size_t;

enum class NormMode { kTrain, kEval };

/// Per-channel affine parameters and running statistics of one BN layer.
/// running_var stores the biased (population) variance, the same form used to
/// normalize in train mode.
struct NormLayerState {
  Tensor gamma;  // [M], trainable
  Tensor beta;   // [M], trainable
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double momentum = 0.1;
  double epsilon = 1e-5;

  static NormLayerState make(std::size_t channels, double momentum = 0.1, double epsilon = 1e-5);
  std::size_t channels() const { return running_mean.size(); }
};

/// Train mode normalizes with batch statistics and updates the running
/// estimates as running <- (1 - momentum) * running + momentum * batch.
/// Eval mode uses the running estimates as constants and mutates nothing.
/// Accepts [N,M,H,W] or [N,M]. Throws ShapeError on a channel mismatch and
/// DegenerateError in train mode when N*H*W < 2.
Tensor bn_forward(const Tensor& x, NormLayerState& state, NormMode mode);

/// Domain-specific BN: one complete, independent NormLayerState per site.
class DsbnState {
 public:
  DsbnState() = default;
  DsbnState(std::size_t channels, std::size_t sites, double momentum = 0.1, double epsilon = 1e-5);

  std::size_t sites() const { return per_site_.size(); }
  std::size_t channels() const { return per_site_.empty() ? 0 : per_site_.front().channels(); }

  // Throws ConfigError for an unknown site.
  NormLayerState& site(SiteId id);
  const NormLayerState& site(SiteId id) const;

 private:
  std::vector<NormLayerState> per_site_;
};

// bn_forward with the state of `site`; only that site's statistics change.
Tensor dsbn_forward(const Tensor& x, DsbnState& state, SiteId site, NormMode mode);

}  // namespace xsite
