#include "xsite/kernels.hpp"

#include <algorithm>
#include <string>
#include <vector>

#include "xsite/errors.hpp"

namespace xsite::kernels {

ConvGeometry ConvGeometry::make(std::size_t batch, std::size_t in_channels, std::size_t height, std::size_t width,
                                std::size_t filters, std::size_t kernel_h, std::size_t kernel_w, std::size_t stride,
                                std::size_t padding) {
  if (stride == 0) throw ShapeError("conv2d stride must be >= 1");
  if (kernel_h > height + 2 * padding || kernel_w > width + 2 * padding) {
    throw ShapeError("conv2d kernel " + std::to_string(kernel_h) + "x" + std::to_string(kernel_w) +
                     " larger than padded input " + std::to_string(height + 2 * padding) + "x" +
                     std::to_string(width + 2 * padding));
  }
  ConvGeometry g{batch, in_channels, height, width, filters, kernel_h, kernel_w, stride, padding, 0, 0};
  g.out_h = (height + 2 * padding - kernel_h) / stride + 1;
  g.out_w = (width + 2 * padding - kernel_w) / stride + 1;
  return g;
}

namespace {

// col[(c*kh+ky)*kw+kx, oy*ow+ox] for one image; out-of-bounds taps are 0.
void im2col(const ConvGeometry& g, const double* image, double* col) {
  const std::size_t plane = g.out_h * g.out_w;
  for (std::size_t c = 0; c < g.in_channels; ++c) {
    const double* src = image + c * g.height * g.width;
    for (std::size_t ky = 0; ky < g.kernel_h; ++ky) {
      for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
        double* dst = col + ((c * g.kernel_h + ky) * g.kernel_w + kx) * plane;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.padding);
          double* row = dst + oy * g.out_w;
          if (iy < 0 || iy >= static_cast<long>(g.height)) {
            for (std::size_t ox = 0; ox < g.out_w; ++ox) row[ox] = 0.0;
            continue;
          }
          const double* srow = src + static_cast<std::size_t>(iy) * g.width;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.padding);
            row[ox] = (ix < 0 || ix >= static_cast<long>(g.width)) ? 0.0 : srow[ix];
          }
        }
      }
    }
  }
}

void col2im_add(const ConvGeometry& g, const double* col, double* image) {
  const std::size_t plane = g.out_h * g.out_w;
  for (std::size_t c = 0; c < g.in_channels; ++c) {
    double* dst = image + c * g.height * g.width;
    for (std::size_t ky = 0; ky < g.kernel_h; ++ky) {
      for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
        const double* src = col + ((c * g.kernel_h + ky) * g.kernel_w + kx) * plane;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.padding);
          if (iy < 0 || iy >= static_cast<long>(g.height)) continue;
          double* drow = dst + static_cast<std::size_t>(iy) * g.width;
          const double* row = src + oy * g.out_w;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.padding);
            if (ix >= 0 && ix < static_cast<long>(g.width)) drow[ix] += row[ox];
          }
        }
      }
    }
  }
}

}  // namespace

void conv2d_forward(const ConvGeometry& g, std::span<const double> input, std::span<const double> weight,
                    std::span<const double> bias, std::span<double> output) {
  const std::size_t plane = g.out_h * g.out_w;
  const std::size_t patch = g.in_channels * g.kernel_h * g.kernel_w;
  const long batch = static_cast<long>(g.batch);
#pragma omp parallel
  {
    std::vector<double> col(patch * plane);
#pragma omp for schedule(static)
    for (long n = 0; n < batch; ++n) {
      im2col(g, input.data() + n * g.in_channels * g.height * g.width, col.data());
      double* out = output.data() + n * g.filters * plane;
      for (std::size_t f = 0; f < g.filters; ++f) {
        double* orow = out + f * plane;
        const double b = bias.empty() ? 0.0 : bias[f];
        for (std::size_t p = 0; p < plane; ++p) orow[p] = b;
        const double* wrow = weight.data() + f * patch;
        for (std::size_t k = 0; k < patch; ++k) {
          const double w = wrow[k];
          const double* crow = col.data() + k * plane;
          for (std::size_t p = 0; p < plane; ++p) orow[p] += w * crow[p];
        }
      }
    }
  }
}

void conv2d_backward(const ConvGeometry& g, std::span<const double> input, std::span<const double> weight,
                     std::span<const double> grad_output, std::span<double> grad_input,
                     std::span<double> grad_weight, std::span<double> grad_bias) {
  const std::size_t plane = g.out_h * g.out_w;
  const std::size_t patch = g.in_channels * g.kernel_h * g.kernel_w;
  const std::size_t image = g.in_channels * g.height * g.width;
  const long batch = static_cast<long>(g.batch);
  const long filters = static_cast<long>(g.filters);

  if (!grad_bias.empty()) {
#pragma omp parallel for schedule(static)
    for (long f = 0; f < filters; ++f) {
      double acc = 0.0;
      for (std::size_t n = 0; n < g.batch; ++n) {
        const double* go = grad_output.data() + (n * g.filters + f) * plane;
        for (std::size_t p = 0; p < plane; ++p) acc += go[p];
      }
      grad_bias[f] += acc;
    }
  }

  if (!grad_weight.empty()) {
    std::vector<double> cols(g.batch * patch * plane);
#pragma omp parallel for schedule(static)
    for (long n = 0; n < batch; ++n) im2col(g, input.data() + n * image, cols.data() + n * patch * plane);
    // Each filter row sums over the batch in a fixed order: results do not depend on thread count.
#pragma omp parallel for schedule(static)
    for (long f = 0; f < filters; ++f) {
      double* gw = grad_weight.data() + f * patch;
      for (std::size_t n = 0; n < g.batch; ++n) {
        const double* go = grad_output.data() + (n * g.filters + f) * plane;
        const double* col = cols.data() + n * patch * plane;
        for (std::size_t k = 0; k < patch; ++k) {
          const double* crow = col + k * plane;
          double acc = 0.0;
          for (std::size_t p = 0; p < plane; ++p) acc += go[p] * crow[p];
          gw[k] += acc;
        }
      }
    }
  }

  if (!grad_input.empty()) {
#pragma omp parallel
    {
      std::vector<double> dcol(patch * plane);
#pragma omp for schedule(static)
      for (long n = 0; n < batch; ++n) {
        std::fill(dcol.begin(), dcol.end(), 0.0);
        const double* go = grad_output.data() + n * g.filters * plane;
        for (std::size_t f = 0; f < g.filters; ++f) {
          const double* wrow = weight.data() + f * patch;
          const double* grow = go + f * plane;
          for (std::size_t k = 0; k < patch; ++k) {
            const double w = wrow[k];
            double* drow = dcol.data() + k * plane;
            for (std::size_t p = 0; p < plane; ++p) drow[p] += w * grow[p];
          }
        }
        col2im_add(g, dcol.data(), grad_input.data() + n * image);
      }
    }
  }
}

void dense_forward(std::size_t rows, std::size_t in_dim, std::size_t out_dim, std::span<const double> input,
                   std::span<const double> weight, std::span<const double> bias, std::span<double> output) {
  const long n_rows = static_cast<long>(rows);
#pragma omp parallel for schedule(static)
  for (long n = 0; n < n_rows; ++n) {
    double* out = output.data() + n * out_dim;
    for (std::size_t o = 0; o < out_dim; ++o) out[o] = bias.empty() ? 0.0 : bias[o];
    const double* in = input.data() + n * in_dim;
    for (std::size_t d = 0; d < in_dim; ++d) {
      const double x = in[d];
      const double* wrow = weight.data() + d * out_dim;
      for (std::size_t o = 0; o < out_dim; ++o) out[o] += x * wrow[o];
    }
  }
}

void dense_backward(std::size_t rows, std::size_t in_dim, std::size_t out_dim, std::span<const double> input,
                    std::span<const double> weight, std::span<const double> grad_output,
                    std::span<double> grad_input, std::span<double> grad_weight, std::span<double> grad_bias) {
  const long n_rows = static_cast<long>(rows);
  const long n_in = static_cast<long>(in_dim);
  if (!grad_input.empty()) {
#pragma omp parallel for schedule(static)
    for (long n = 0; n < n_rows; ++n) {
      const double* go = grad_output.data() + n * out_dim;
      double* gi = grad_input.data() + n * in_dim;
      for (std::size_t d = 0; d < in_dim; ++d) {
        const double* wrow = weight.data() + d * out_dim;
        double acc = 0.0;
        for (std::size_t o = 0; o < out_dim; ++o) acc += go[o] * wrow[o];
        gi[d] += acc;
      }
    }
  }
  if (!grad_weight.empty()) {
#pragma omp parallel for schedule(static)
    for (long d = 0; d < n_in; ++d) {
      double* gw = grad_weight.data() + d * out_dim;
      for (std::size_t n = 0; n < rows; ++n) {
        const double x = input[n * in_dim + d];
        const double* go = grad_output.data() + n * out_dim;
        for (std::size_t o = 0; o < out_dim; ++o) gw[o] += x * go[o];
      }
    }
  }
  if (!grad_bias.empty()) {
    for (std::size_t n = 0; n < rows; ++n) {
      const double* go = grad_output.data() + n * out_dim;
      for (std::size_t o = 0; o < out_dim; ++o) grad_bias[o] += go[o];
    }
  }
}

void channel_moments(std::size_t batch, std::size_t channels, std::size_t spatial, std::span<const double> input,
                     std::span<double> mean, std::span<double> var) {
  const long n_ch = static_cast<long>(channels);
  const double count = static_cast<double>(batch * spatial);
#pragma omp parallel for schedule(static)
  for (long c = 0; c < n_ch; ++c) {
    double sum = 0.0;
    for (std::size_t n = 0; n < batch; ++n) {
      const double* p = input.data() + (n * channels + c) * spatial;
      for (std::size_t s = 0; s < spatial; ++s) sum += p[s];
    }
    const double mu = sum / count;
    double sq = 0.0;
    for (std::size_t n = 0; n < batch; ++n) {
      const double* p = input.data() + (n * channels + c) * spatial;
      for (std::size_t s = 0; s < spatial; ++s) sq += (p[s] - mu) * (p[s] - mu);
    }
    mean[c] = mu;
    var[c] = sq / count;
  }
}

namespace reference {

void conv2d_forward(const ConvGeometry& g, std::span<const double> input, std::span<const double> weight,
                    std::span<const double> bias, std::span<double> output) {
  for (std::size_t n = 0; n < g.batch; ++n)
    for (std::size_t f = 0; f < g.filters; ++f)
      for (std::size_t oy = 0; oy < g.out_h; ++oy)
        for (std::size_t ox = 0; ox < g.out_w; ++ox) {
          double acc = bias.empty() ? 0.0 : bias[f];
          for (std::size_t c = 0; c < g.in_channels; ++c)
            for (std::size_t ky = 0; ky < g.kernel_h; ++ky)
              for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
                const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.padding);
                const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.padding);
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(g.height) || ix >= static_cast<long>(g.width))
                  continue;
                acc += input[((n * g.in_channels + c) * g.height + iy) * g.width + ix] *
                       weight[((f * g.in_channels + c) * g.kernel_h + ky) * g.kernel_w + kx];
              }
          output[((n * g.filters + f) * g.out_h + oy) * g.out_w + ox] = acc;
        }
}

void conv2d_backward(const ConvGeometry& g, std::span<const double> input, std::span<const double> weight,
                     std::span<const double> grad_output, std::span<double> grad_input,
                     std::span<double> grad_weight, std::span<double> grad_bias) {
  for (std::size_t n = 0; n < g.batch; ++n)
    for (std::size_t f = 0; f < g.filters; ++f)
      for (std::size_t oy = 0; oy < g.out_h; ++oy)
        for (std::size_t ox = 0; ox < g.out_w; ++ox) {
          const double go = grad_output[((n * g.filters + f) * g.out_h + oy) * g.out_w + ox];
          if (!grad_bias.empty()) grad_bias[f] += go;
          for (std::size_t c = 0; c < g.in_channels; ++c)
            for (std::size_t ky = 0; ky < g.kernel_h; ++ky)
              for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
                const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.padding);
                const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.padding);
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(g.height) || ix >= static_cast<long>(g.width))
                  continue;
                const std::size_t in_idx = ((n * g.in_channels + c) * g.height + iy) * g.width + ix;
                const std::size_t w_idx = ((f * g.in_channels + c) * g.kernel_h + ky) * g.kernel_w + kx;
                if (!grad_input.empty()) grad_input[in_idx] += go * weight[w_idx];
                if (!grad_weight.empty()) grad_weight[w_idx] += go * input[in_idx];
              }
        }
}

void dense_forward(std::size_t rows, std::size_t in_dim, std::size_t out_dim, std::span<const double> input,
                   std::span<const double> weight, std::span<const double> bias, std::span<double> output) {
  for (std::size_t n = 0; n < rows; ++n)
    for (std::size_t o = 0; o < out_dim; ++o) {
      double acc = bias.empty() ? 0.0 : bias[o];
      for (std::size_t d = 0; d < in_dim; ++d) acc += input[n * in_dim + d] * weight[d * out_dim + o];
      output[n * out_dim + o] = acc;
    }
}

void dense_backward(std::size_t rows, std::size_t in_dim, std::size_t out_dim, std::span<const double> input,
                    std::span<const double> weight, std::span<const double> grad_output,
                    std::span<double> grad_input, std::span<double> grad_weight, std::span<double> grad_bias) {
  for (std::size_t n = 0; n < rows; ++n)
    for (std::size_t o = 0; o < out_dim; ++o) {
      const double go = grad_output[n * out_dim + o];
      if (!grad_bias.empty()) grad_bias[o] += go;
      for (std::size_t d = 0; d < in_dim; ++d) {
        if (!grad_input.empty()) grad_input[n * in_dim + d] += go * weight[d * out_dim + o];
        if (!grad_weight.empty()) grad_weight[d * out_dim + o] += go * input[n * in_dim + d];
      }
    }
}

void channel_moments(std::size_t batch, std::size_t channels, std::size_t spatial, std::span<const double> input,
                     std::span<double> mean, std::span<double> var) {
  const double count = static_cast<double>(batch * spatial);
  for (std::size_t c = 0; c < channels; ++c) {
    double sum = 0.0;
    for (std::size_t n = 0; n < batch; ++n)
      for (std::size_t s = 0; s < spatial; ++s) sum += input[(n * channels + c) * spatial + s];
    mean[c] = sum / count;
    double sq = 0.0;
    for (std::size_t n = 0; n < batch; ++n)
      for (std::size_t s = 0; s < spatial; ++s) {
        const double d = input[(n * channels + c) * spatial + s] - mean[c];
        sq += d * d;
      }
    var[c] = sq / count;
  }
}

}  // namespace reference

}  // namespace xsite::kernels
