#include "xsite/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "xsite/errors.hpp"
#include "xsite/kernels.hpp"

namespace xsite::ops {

namespace {

using detail::Node;

// Grad buffer of parent `i`, or an empty span when it does not track gradients.
std::span<double> parent_grad(Node& self, std::size_t i) {
  Node& p = *self.parents[i];
  if (!p.requires_grad) return {};
  return p.grad_buffer();
}

const std::vector<double>& parent_values(const Node& self, std::size_t i) { return self.parents[i]->values; }

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (!t.defined() || t.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + " tensor, got " +
                     (t.defined() ? shape_str(t.shape()) : std::string("undefined")));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, std::size_t stride,
              std::size_t padding) {
  require_rank(input, 4, "conv2d input");
  require_rank(kernel, 4, "conv2d kernel");
  if (kernel.dim(1) != input.dim(1)) {
    throw ShapeError("conv2d: kernel expects " + std::to_string(kernel.dim(1)) + " input channels, input has " +
                     std::to_string(input.dim(1)));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != kernel.dim(0))) {
    throw ShapeError("conv2d: bias shape " + shape_str(bias.shape()) + " does not match " +
                     std::to_string(kernel.dim(0)) + " filters");
  }
  const auto g = kernels::ConvGeometry::make(input.dim(0), input.dim(1), input.dim(2), input.dim(3),
                                             kernel.dim(0), kernel.dim(2), kernel.dim(3), stride, padding);
  std::vector<double> out(g.output_size());
  kernels::conv2d_forward(g, input.values(), kernel.values(),
                          bias.defined() ? bias.values() : std::span<const double>{}, out);
  std::vector<Tensor> inputs{input, kernel};
  if (bias.defined()) inputs.push_back(bias);
  const bool has_bias = bias.defined();
  return Tensor::from_op({g.batch, g.filters, g.out_h, g.out_w}, std::move(out), inputs,
                         [g, has_bias](Node& self) {
                           kernels::conv2d_backward(g, parent_values(self, 0), parent_values(self, 1), self.grad,
                                                    parent_grad(self, 0), parent_grad(self, 1),
                                                    has_bias ? parent_grad(self, 2) : std::span<double>{});
                         });
}

Tensor dense(const Tensor& input, const Tensor& weight, const Tensor& bias) {
  require_rank(input, 2, "dense input");
  require_rank(weight, 2, "dense weight");
  if (input.dim(1) != weight.dim(0)) {
    throw ShapeError("dense: input width " + std::to_string(input.dim(1)) + " does not match weight " +
                     shape_str(weight.shape()));
  }
  const std::size_t rows = input.dim(0), in_dim = weight.dim(0), out_dim = weight.dim(1);
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != out_dim)) {
    throw ShapeError("dense: bias shape " + shape_str(bias.shape()) + " does not match output width " +
                     std::to_string(out_dim));
  }
  std::vector<double> out(rows * out_dim);
  kernels::dense_forward(rows, in_dim, out_dim, input.values(), weight.values(),
                         bias.defined() ? bias.values() : std::span<const double>{}, out);
  std::vector<Tensor> inputs{input, weight};
  if (bias.defined()) inputs.push_back(bias);
  const bool has_bias = bias.defined();
  return Tensor::from_op({rows, out_dim}, std::move(out), inputs, [=](Node& self) {
    kernels::dense_backward(rows, in_dim, out_dim, parent_values(self, 0), parent_values(self, 1), self.grad,
                            parent_grad(self, 0), parent_grad(self, 1),
                            has_bias ? parent_grad(self, 2) : std::span<double>{});
  });
}

Tensor relu(const Tensor& x) {
  std::vector<double> out(x.values().begin(), x.values().end());
  for (double& v : out) v = v > 0.0 ? v : 0.0;
  return Tensor::from_op(x.shape(), std::move(out), {x}, [](Node& self) {
    auto gx = parent_grad(self, 0);
    const auto& xv = parent_values(self, 0);
    for (std::size_t i = 0; i < gx.size(); ++i)
      if (xv[i] > 0.0) gx[i] += self.grad[i];
  });
}

Tensor global_avg_pool(const Tensor& x) {
  require_rank(x, 4, "global_avg_pool");
  const std::size_t n = x.dim(0), c = x.dim(1), spatial = x.dim(2) * x.dim(3);
  const auto xv = x.values();
  std::vector<double> out(n * c);
  for (std::size_t i = 0; i < n * c; ++i) {
    double acc = 0.0;
    for (std::size_t s = 0; s < spatial; ++s) acc += xv[i * spatial + s];
    out[i] = acc / static_cast<double>(spatial);
  }
  return Tensor::from_op({n, c}, std::move(out), {x}, [n, c, spatial](Node& self) {
    auto gx = parent_grad(self, 0);
    const double inv = 1.0 / static_cast<double>(spatial);
    for (std::size_t i = 0; i < n * c; ++i) {
      const double g = self.grad[i] * inv;
      for (std::size_t s = 0; s < spatial; ++s) gx[i * spatial + s] += g;
    }
  });
}

Tensor avg_pool2d(const Tensor& x, std::size_t k) {
  require_rank(x, 4, "avg_pool2d");
  if (k == 0 || x.dim(2) % k != 0 || x.dim(3) % k != 0) {
    throw ShapeError("avg_pool2d: window " + std::to_string(k) + " does not tile " + shape_str(x.shape()));
  }
  if (k == 1) return x;
  const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3), oh = h / k, ow = w / k;
  const double inv = 1.0 / static_cast<double>(k * k);
  const auto xv = x.values();
  std::vector<double> out(planes * oh * ow, 0.0);
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t xx = 0; xx < w; ++xx) out[(p * oh + y / k) * ow + xx / k] += xv[(p * h + y) * w + xx] * inv;
  return Tensor::from_op({x.dim(0), x.dim(1), oh, ow}, std::move(out), {x}, [=](Node& self) {
    auto gx = parent_grad(self, 0);
    for (std::size_t p = 0; p < planes; ++p)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t xx = 0; xx < w; ++xx) gx[(p * h + y) * w + xx] += self.grad[(p * oh + y / k) * ow + xx / k] * inv;
  });
}

Tensor concat_channels(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no inputs");
  const Shape& ref = parts.front().shape();
  if (ref.size() < 2) throw ShapeError("concat_channels: inputs need rank >= 2");
  std::size_t inner = 1;
  for (std::size_t a = 2; a < ref.size(); ++a) inner *= ref[a];
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const Tensor& t : parts) {
    const Shape& s = t.shape();
    bool ok = s.size() == ref.size() && s[0] == ref[0];
    for (std::size_t a = 2; ok && a < s.size(); ++a) ok = s[a] == ref[a];
    if (!ok) throw ShapeError("concat_channels: " + shape_str(s) + " incompatible with " + shape_str(ref));
    widths.push_back(s[1] * inner);
    total += s[1];
  }
  const std::size_t n = ref[0], row = total * inner;
  std::vector<double> out(n * row);
  std::size_t offset = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const auto v = parts[i].values();
    for (std::size_t b = 0; b < n; ++b)
      std::copy_n(v.begin() + b * widths[i], widths[i], out.begin() + b * row + offset);
    offset += widths[i];
  }
  Shape shape = ref;
  shape[1] = total;
  return Tensor::from_op(std::move(shape), std::move(out), parts, [widths, n, row](Node& self) {
    std::size_t off = 0;
    for (std::size_t i = 0; i < widths.size(); ++i) {
      auto g = parent_grad(self, i);
      if (!g.empty())
        for (std::size_t b = 0; b < n; ++b)
          for (std::size_t j = 0; j < widths[i]; ++j) g[b * widths[i] + j] += self.grad[b * row + off + j];
      off += widths[i];
    }
  });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const Shape& ref = parts.front().shape();
  std::vector<std::size_t> sizes;
  std::size_t rows = 0;
  std::vector<double> out;
  for (const Tensor& t : parts) {
    const Shape& s = t.shape();
    if (s.size() != ref.size() || !std::equal(s.begin() + 1, s.end(), ref.begin() + 1)) {
      throw ShapeError("concat_rows: " + shape_str(s) + " incompatible with " + shape_str(ref));
    }
    rows += s[0];
    sizes.push_back(t.numel());
    out.insert(out.end(), t.values().begin(), t.values().end());
  }
  Shape shape = ref;
  shape[0] = rows;
  return Tensor::from_op(std::move(shape), std::move(out), parts, [sizes](Node& self) {
    std::size_t off = 0;
    for (std::size_t i = 0; i < sizes.size(); ++i) {
      auto g = parent_grad(self, i);
      for (std::size_t j = 0; j < g.size(); ++j) g[j] += self.grad[off + j];
      off += sizes[i];
    }
  });
}

Tensor flatten(const Tensor& x) {
  const std::size_t n = x.dim(0);
  std::vector<double> out(x.values().begin(), x.values().end());
  return Tensor::from_op({n, x.numel() / n}, std::move(out), {x}, [](Node& self) {
    auto g = parent_grad(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor softmax(const Tensor& x) {
  require_rank(x, 2, "softmax");
  const std::size_t n = x.dim(0), c = x.dim(1);
  const auto xv = x.values();
  std::vector<double> out(n * c);
  for (std::size_t i = 0; i < n; ++i) {
    const double mx = *std::max_element(xv.begin() + i * c, xv.begin() + (i + 1) * c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += out[i * c + j] = std::exp(xv[i * c + j] - mx);
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] /= z;
  }
  return Tensor::from_op({n, c}, out, {x}, [n, c, out](Node& self) {
    auto g = parent_grad(self, 0);
    for (std::size_t i = 0; i < n; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += self.grad[i * c + j] * out[i * c + j];
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += out[i * c + j] * (self.grad[i * c + j] - dot);
    }
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) + b.at(i);
  return Tensor::from_op(a.shape(), std::move(out), {a, b}, [](Node& self) {
    for (std::size_t p = 0; p < 2; ++p) {
      auto g = parent_grad(self, p);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) { return add(a, scale(b, -1.0)); }

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) * b.at(i);
  return Tensor::from_op(a.shape(), std::move(out), {a, b}, [](Node& self) {
    const auto& av = parent_values(self, 0);
    const auto& bv = parent_values(self, 1);
    auto ga = parent_grad(self, 0);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] * bv[i];
    auto gb = parent_grad(self, 1);
    for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += self.grad[i] * av[i];
  });
}

Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.values().begin(), a.values().end());
  for (double& v : out) v *= factor;
  return Tensor::from_op(a.shape(), std::move(out), {a}, [factor](Node& self) {
    auto g = parent_grad(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor;
  });
}

Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (double v : a.values()) acc += v;
  return Tensor::from_op({1}, {acc}, {a}, [](Node& self) {
    auto g = parent_grad(self, 0);
    for (double& v : g) v += self.grad[0];
  });
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor pick(const Tensor& a, std::size_t row, std::size_t col) {
  require_rank(a, 2, "pick");
  if (row >= a.dim(0) || col >= a.dim(1)) throw ShapeError("pick: index out of range for " + shape_str(a.shape()));
  const std::size_t idx = row * a.dim(1) + col;
  return Tensor::from_op({1}, {a.at(idx)}, {a}, [idx](Node& self) {
    auto g = parent_grad(self, 0);
    if (!g.empty()) g[idx] += self.grad[0];
  });
}

Tensor normalize_rows(const Tensor& z, double min_norm) {
  require_rank(z, 2, "normalize_rows");
  const std::size_t n = z.dim(0), d = z.dim(1);
  const auto zv = z.values();
  std::vector<double> norms(n), out(n * d);
  for (std::size_t i = 0; i < n; ++i) {
    double sq = 0.0;
    for (std::size_t j = 0; j < d; ++j) sq += zv[i * d + j] * zv[i * d + j];
    norms[i] = std::sqrt(sq);
    if (!(norms[i] > min_norm)) {
      throw DegenerateError("normalize_rows: row " + std::to_string(i) + " has near-zero norm (degenerate embedding)");
    }
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = zv[i * d + j] / norms[i];
  }
  return Tensor::from_op({n, d}, out, {z}, [n, d, norms, out](Node& self) {
    auto g = parent_grad(self, 0);
    // d(z/|z|) = (I - u u^T) / |z|
    for (std::size_t i = 0; i < n; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < d; ++j) dot += self.grad[i * d + j] * out[i * d + j];
      for (std::size_t j = 0; j < d; ++j) g[i * d + j] += (self.grad[i * d + j] - dot * out[i * d + j]) / norms[i];
    }
  });
}

Tensor gram(const Tensor& a) {
  require_rank(a, 2, "gram");
  const std::size_t n = a.dim(0), d = a.dim(1);
  const auto av = a.values();
  std::vector<double> out(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < d; ++k) acc += av[i * d + k] * av[j * d + k];
      out[i * n + j] = acc;
    }
  return Tensor::from_op({n, n}, std::move(out), {a}, [n, d](Node& self) {
    auto g = parent_grad(self, 0);
    const auto& av = parent_values(self, 0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        const double gij = self.grad[i * n + j];
        if (gij == 0.0) continue;
        for (std::size_t k = 0; k < d; ++k) {
          g[i * d + k] += gij * av[j * d + k];
          g[j * d + k] += gij * av[i * d + k];
        }
      }
  });
}

}  // namespace xsite::ops
