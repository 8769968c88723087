#pragma once

#include <cstddef>
#include <span>

// Raw compute kernels behind the differentiable ops. Each kernel has an
// OpenMP implementation (used by the ops) and a naive serial reference in
// `kernels::reference` that spells out the definition loop by loop; tests and
// the benchmark compare the two.
namespace xsite::kernels {

struct ConvGeometry {
  std::size_t batch, in_channels, height, width;
  std::size_t filters, kernel_h, kernel_w;
  std::size_t stride, padding;
  std::size_t out_h, out_w;

  // Throws ShapeError if the kernel does not fit the padded input or stride is 0.
  static ConvGeometry make(std::size_t batch, std::size_t in_channels, std::size_t height, std::size_t width,
                           std::size_t filters, std::size_t kernel_h, std::size_t kernel_w, std::size_t stride,
                           std::size_t padding);

  std::size_t input_size() const { return batch * in_channels * height * width; }
  std::size_t weight_size() const { return filters * in_channels * kernel_h * kernel_w; }
  std::size_t output_size() const { return batch * filters * out_h * out_w; }
};

// out[n,f,oy,ox] = bias[f] + sum_{c,ky,kx} in[n,c,oy*s+ky-p,ox*s+kx-p] * w[f,c,ky,kx]
void conv2d_forward(const ConvGeometry& g, std::span<const double> input, std::span<const double> weight,
                    std::span<const double> bias, std::span<double> output);

// Accumulates (+=) into grad_input / grad_weight / grad_bias; an empty span skips that gradient.
void conv2d_backward(const ConvGeometry& g, std::span<const double> input, std::span<const double> weight,
                     std::span<const double> grad_output, std::span<double> grad_input,
                     std::span<double> grad_weight, std::span<double> grad_bias);

// out[n,o] = bias[o] + sum_d in[n,d] * w[d,o]
void dense_forward(std::size_t rows, std::size_t in_dim, std::size_t out_dim, std::span<const double> input,
                   std::span<const double> weight, std::span<const double> bias, std::span<double> output);

void dense_backward(std::size_t rows, std::size_t in_dim, std::size_t out_dim, std::span<const double> input,
                    std::span<const double> weight, std::span<const double> grad_output,
                    std::span<double> grad_input, std::span<double> grad_weight, std::span<double> grad_bias);

// Per-channel population mean and variance over (N, H, W) of an [N,C,H,W] (or [N,C]) buffer.
void channel_moments(std::size_t batch, std::size_t channels, std::size_t spatial, std::span<const double> input,
                     std::span<double> mean, std::span<double> var);

namespace reference {

void conv2d_forward(const ConvGeometry& g, std::span<const double> input, std::span<const double> weight,
                    std::span<const double> bias, std::span<double> output);

void conv2d_backward(const ConvGeometry& g, std::span<const double> input, std::span<const double> weight,
                     std::span<const double> grad_output, std::span<double> grad_input,
                     std::span<double> grad_weight, std::span<double> grad_bias);

void dense_forward(std::size_t rows, std::size_t in_dim, std::size_t out_dim, std::span<const double> input,
                   std::span<const double> weight, std::span<const double> bias, std::span<double> output);

void dense_backward(std::size_t rows, std::size_t in_dim, std::size_t out_dim, std::span<const double> input,
                    std::span<const double> weight, std::span<const double> grad_output,
                    std::span<double> grad_input, std::span<double> grad_weight, std::span<double> grad_bias);

void channel_moments(std::size_t batch, std::size_t channels, std::size_t spatial, std::span<const double> input,
                     std::span<double> mean, std::span<double> var);

}  // namespace reference

}  // namespace xsite::kernels
