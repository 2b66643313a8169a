#pragma once

// Raw dense kernels shared by the autodiff engine and the deployment runtime.
// Layouts: activations [B, C, H, W] (or [B, C]), conv weights [Co, Ci, k, k],
// fc weights [Co, Ci].

#include <cstddef>
#include <span>
#include <vector>

#include "pmeta/tensor.hpp"

namespace pmeta::kernels {

struct ConvGeometry {
  std::size_t kernel = 1;
  std::size_t stride = 1;
  std::size_t padding = 0;

  std::size_t out_extent(std::size_t in) const;
};

// C = A · B for A [m, k], B [k, n].
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor conv2d(const Tensor& x, const Tensor& w, const ConvGeometry& g);
// Adjoint of conv2d in x; `in_h`/`in_w` give the input extent.
Tensor conv2d_input_grad(const Tensor& gy, const Tensor& w, const ConvGeometry& g, std::size_t in_h,
                         std::size_t in_w);
// Adjoint of conv2d in w.
Tensor conv2d_weight_grad(const Tensor& x, const Tensor& gy, const ConvGeometry& g);

// Weight gradient restricted to output channels `outs` x input channels
// `ins`; other entries are left at zero and cost nothing. Per-entry
// accumulation order matches conv2d_weight_grad.
Tensor conv2d_weight_grad_pairs(const Tensor& x, const Tensor& gy, const ConvGeometry& g,
                                std::span<const std::size_t> outs, std::span<const std::size_t> ins);

struct PoolResult {
  Tensor y;
  // Flat index into x of the selected element for each output element.
  std::vector<std::size_t> argmax;
};

// Ties resolve to the smallest flat index.
PoolResult max_pool(const Tensor& x, std::size_t window, std::size_t stride);
Tensor scatter(const Tensor& values, const std::vector<std::size_t>& index, const Shape& out_shape);
Tensor gather(const Tensor& source, const std::vector<std::size_t>& index, const Shape& out_shape);

}  // namespace pmeta::kernels
