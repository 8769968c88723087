#pragma once

#include <cstddef>
#include <vector>

#include "xsite/tensor.hpp"

// Differentiable primitives. Every op validates shapes up front and throws
// ShapeError on mismatch; gradients accumulate additively into inputs.
namespace xsite::ops {

// Cross-correlation. input [N,C,H,W], kernel [F,C,kh,kw], bias [F] -> [N,F,H',W'].
Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, std::size_t stride = 1,
              std::size_t padding = 0);

// input [N,D], weight [D,O], bias [O] -> [N,O]. `bias` may be undefined.
Tensor dense(const Tensor& input, const Tensor& weight, const Tensor& bias);

// max(0, x); the subgradient at 0 is 0.
Tensor relu(const Tensor& x);

// [N,C,H,W] -> [N,C], spatial mean per channel.
Tensor global_avg_pool(const Tensor& x);

// Non-overlapping k x k mean pooling; H and W must be multiples of k.
Tensor avg_pool2d(const Tensor& x, std::size_t k);

// Concatenates along axis 1; all other extents must agree.
Tensor concat_channels(const std::vector<Tensor>& parts);

// Concatenates along axis 0; all other extents must agree.
Tensor concat_rows(const std::vector<Tensor>& parts);

// [N, ...] -> [N, prod(...)]
Tensor flatten(const Tensor& x);

// Row-wise softmax of an [N,C] tensor, computed with max subtraction.
Tensor softmax(const Tensor& x);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

// Selects element [row, col] of a 2-D tensor as a scalar.
Tensor pick(const Tensor& a, std::size_t row, std::size_t col);

// Divides each row of [N,D] by its L2 norm. Throws DegenerateError when a
// row norm is below `min_norm`.
Tensor normalize_rows(const Tensor& z, double min_norm = 1e-12);

// [N,D] -> [N,N] with out[i,j] = <a_i, a_j>.
Tensor gram(const Tensor& a);

}  // namespace xsite::ops
