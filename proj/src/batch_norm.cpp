#include "xsite/batch_norm.hpp"

#include <cmath>
#include <string>

#include "xsite/errors.hpp"
#include "xsite/kernels.hpp"

namespace xsite {

NormLayerState NormLayerState::make(std::size_t channels, double momentum, double epsilon) {
  if (channels == 0) throw ConfigError("batch norm needs at least one channel");
  if (!(momentum > 0.0 && momentum <= 1.0)) throw ConfigError("batch norm momentum must lie in (0, 1]");
  if (!(epsilon > 0.0)) throw ConfigError("batch norm epsilon must be positive");
  NormLayerState s;
  s.gamma = Tensor::full({channels}, 1.0, true);
  s.beta = Tensor::zeros({channels}, true);
  s.running_mean.assign(channels, 0.0);
  s.running_var.assign(channels, 1.0);
  s.momentum = momentum;
  s.epsilon = epsilon;
  return s;
}

Tensor bn_forward(const Tensor& x, NormLayerState& state, NormMode mode) {
  if (x.rank() != 4 && x.rank() != 2) throw ShapeError("bn_forward: expects [N,M,H,W] or [N,M], got " + shape_str(x.shape()));
  const std::size_t batch = x.dim(0), channels = x.dim(1);
  const std::size_t spatial = x.rank() == 4 ? x.dim(2) * x.dim(3) : 1;
  if (channels != state.channels()) {
    throw ShapeError("bn_forward: input has " + std::to_string(channels) + " channels, layer has " +
                     std::to_string(state.channels()));
  }
  const std::size_t count = batch * spatial;
  std::vector<double> mean(channels), var(channels);
  if (mode == NormMode::kTrain) {
    if (count < 2) {
      throw DegenerateError("bn_forward: train mode needs at least 2 values per channel, got " + std::to_string(count));
    }
    kernels::channel_moments(batch, channels, spatial, x.values(), mean, var);
    for (std::size_t c = 0; c < channels; ++c) {
      state.running_mean[c] = (1.0 - state.momentum) * state.running_mean[c] + state.momentum * mean[c];
      state.running_var[c] = (1.0 - state.momentum) * state.running_var[c] + state.momentum * var[c];
    }
  } else {
    mean = state.running_mean;
    var = state.running_var;
  }

  std::vector<double> inv_std(channels);
  for (std::size_t c = 0; c < channels; ++c) inv_std[c] = 1.0 / std::sqrt(var[c] + state.epsilon);

  const auto xv = x.values();
  const auto gv = state.gamma.values();
  const auto bv = state.beta.values();
  std::vector<double> xhat(xv.size()), out(xv.size());
  for (std::size_t n = 0; n < batch; ++n)
    for (std::size_t c = 0; c < channels; ++c) {
      const std::size_t base = (n * channels + c) * spatial;
      for (std::size_t s = 0; s < spatial; ++s) {
        xhat[base + s] = (xv[base + s] - mean[c]) * inv_std[c];
        out[base + s] = gv[c] * xhat[base + s] + bv[c];
      }
    }

  const bool batch_stats = mode == NormMode::kTrain;
  return Tensor::from_op(x.shape(), std::move(out), {x, state.gamma, state.beta},
                         [=, xhat = std::move(xhat)](detail::Node& self) {
    const auto& gamma = self.parents[1]->values;
    const auto& dy = self.grad;
    std::vector<double> sum_dy(channels, 0.0), sum_dy_xhat(channels, 0.0);
    for (std::size_t n = 0; n < batch; ++n)
      for (std::size_t c = 0; c < channels; ++c) {
        const std::size_t base = (n * channels + c) * spatial;
        for (std::size_t s = 0; s < spatial; ++s) {
          sum_dy[c] += dy[base + s];
          sum_dy_xhat[c] += dy[base + s] * xhat[base + s];
        }
      }
    if (self.parents[1]->requires_grad) {
      auto& g = self.parents[1]->grad_buffer();
      for (std::size_t c = 0; c < channels; ++c) g[c] += sum_dy_xhat[c];
    }
    if (self.parents[2]->requires_grad) {
      auto& g = self.parents[2]->grad_buffer();
      for (std::size_t c = 0; c < channels; ++c) g[c] += sum_dy[c];
    }
    if (!self.parents[0]->requires_grad) return;
    auto& gx = self.parents[0]->grad_buffer();
    const double m = static_cast<double>(count);
    for (std::size_t n = 0; n < batch; ++n)
      for (std::size_t c = 0; c < channels; ++c) {
        const std::size_t base = (n * channels + c) * spatial;
        const double k = gamma[c] * inv_std[c];
        for (std::size_t s = 0; s < spatial; ++s) {
          const std::size_t i = base + s;
          if (batch_stats) {
            // Includes the dependence of the batch mean and variance on x.
            gx[i] += k * (dy[i] - sum_dy[c] / m - xhat[i] * sum_dy_xhat[c] / m);
          } else {
            gx[i] += k * dy[i];
          }
        }
      }
  });
}

DsbnState::DsbnState(std::size_t channels, std::size_t sites, double momentum, double epsilon) {
  if (sites == 0) throw ConfigError("DSBN needs at least one site");
  per_site_.reserve(sites);
  for (std::size_t s = 0; s < sites; ++s) per_site_.push_back(NormLayerState::make(channels, momentum, epsilon));
}

NormLayerState& DsbnState::site(SiteId id) {
  if (id >= per_site_.size()) {
    throw ConfigError("DSBN: unknown site id " + std::to_string(id) + " (layer has " +
                      std::to_string(per_site_.size()) + " sites)");
  }
  return per_site_[id];
}

const NormLayerState& DsbnState::site(SiteId id) const { return const_cast<DsbnState*>(this)->site(id); }

Tensor dsbn_forward(const Tensor& x, DsbnState& state, SiteId site, NormMode mode) {
  return bn_forward(x, state.site(site), mode);
}

}  // namespace xsite
