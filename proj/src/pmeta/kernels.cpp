#include "pmeta/kernels.hpp"

#include "pmeta/error.hpp"

namespace pmeta::kernels {

std::size_t ConvGeometry::out_extent(std::size_t in) const {
  require(in + 2 * padding >= kernel, ErrorKind::shape, "conv/pool window larger than padded input");
  return (in + 2 * padding - kernel) / stride + 1;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0), ErrorKind::shape,
          "matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor c({m, n});
  auto A = a.data();
  auto B = b.data();
  auto C = c.data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double av = A[i * k + p];
      for (std::size_t j = 0; j < n; ++j) C[i * n + j] += av * B[p * n + j];
    }
  }
  return c;
}

Tensor transpose(const Tensor& a) {
  require(a.rank() == 2, ErrorKind::shape, "transpose expects a matrix");
  const std::size_t m = a.dim(0), n = a.dim(1);
  Tensor t({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) t[j * m + i] = a[i * n + j];
  return t;
}

namespace {

struct ConvDims {
  std::size_t batch, ci, h, w, co, ho, wo, k;
};

ConvDims conv_dims(const Shape& xs, const Shape& ws, const ConvGeometry& g) {
  require(xs.size() == 4 && ws.size() == 4, ErrorKind::shape, "conv2d expects 4-d input and weight");
  require(ws[1] == xs[1], ErrorKind::shape,
          "conv2d: weight expects " + std::to_string(ws[1]) + " input channels, got " + std::to_string(xs[1]));
  require(ws[2] == g.kernel && ws[3] == g.kernel, ErrorKind::shape, "conv2d: kernel size mismatch");
  return {xs[0], xs[1], xs[2], xs[3], ws[0], g.out_extent(xs[2]), g.out_extent(xs[3]), g.kernel};
}

// Accumulates one weight-gradient entry; shared by the dense and channel-pair kernels.
double weight_grad_entry(const Tensor& x, const Tensor& gy, const ConvDims& d, const ConvGeometry& g,
                         std::size_t f, std::size_t c, std::size_t m, std::size_t n) {
  double acc = 0.0;
  for (std::size_t b = 0; b < d.batch; ++b) {
    const double* gyp = gy.data().data() + ((b * d.co + f) * d.ho) * d.wo;
    const double* xp = x.data().data() + ((b * d.ci + c) * d.h) * d.w;
    for (std::size_t i = 0; i < d.ho; ++i) {
      const long hi = static_cast<long>(i * g.stride + m) - static_cast<long>(g.padding);
      if (hi < 0 || hi >= static_cast<long>(d.h)) continue;
      for (std::size_t j = 0; j < d.wo; ++j) {
        const long wj = static_cast<long>(j * g.stride + n) - static_cast<long>(g.padding);
        if (wj < 0 || wj >= static_cast<long>(d.w)) continue;
        acc += gyp[i * d.wo + j] * xp[static_cast<std::size_t>(hi) * d.w + static_cast<std::size_t>(wj)];
      }
    }
  }
  return acc;
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const ConvGeometry& g) {
  const ConvDims d = conv_dims(x.shape(), w.shape(), g);
  Tensor y({d.batch, d.co, d.ho, d.wo});
  auto X = x.data();
  auto W = w.data();
  auto Y = y.data();
  for (std::size_t b = 0; b < d.batch; ++b) {
    for (std::size_t f = 0; f < d.co; ++f) {
      double* yp = Y.data() + ((b * d.co + f) * d.ho) * d.wo;
      for (std::size_t c = 0; c < d.ci; ++c) {
        const double* xp = X.data() + ((b * d.ci + c) * d.h) * d.w;
        for (std::size_t m = 0; m < d.k; ++m) {
          for (std::size_t n = 0; n < d.k; ++n) {
            const double wv = W[((f * d.ci + c) * d.k + m) * d.k + n];
            for (std::size_t i = 0; i < d.ho; ++i) {
              const long hi = static_cast<long>(i * g.stride + m) - static_cast<long>(g.padding);
              if (hi < 0 || hi >= static_cast<long>(d.h)) continue;
              for (std::size_t j = 0; j < d.wo; ++j) {
                const long wj = static_cast<long>(j * g.stride + n) - static_cast<long>(g.padding);
                if (wj < 0 || wj >= static_cast<long>(d.w)) continue;
                yp[i * d.wo + j] += wv * xp[static_cast<std::size_t>(hi) * d.w + static_cast<std::size_t>(wj)];
              }
            }
          }
        }
      }
    }
  }
  return y;
}

Tensor conv2d_input_grad(const Tensor& gy, const Tensor& w, const ConvGeometry& g, std::size_t in_h,
                         std::size_t in_w) {
  require(gy.rank() == 4 && w.rank() == 4 && gy.dim(1) == w.dim(0), ErrorKind::shape,
          "conv2d_input_grad: gradient/weight mismatch");
  const std::size_t batch = gy.dim(0), co = w.dim(0), ci = w.dim(1), k = g.kernel;
  const std::size_t ho = g.out_extent(in_h), wo = g.out_extent(in_w);
  require(gy.dim(2) == ho && gy.dim(3) == wo, ErrorKind::shape, "conv2d_input_grad: output extent mismatch");
  Tensor gx({batch, ci, in_h, in_w});
  auto G = gy.data();
  auto W = w.data();
  auto X = gx.data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t c = 0; c < ci; ++c) {
      double* xp = X.data() + ((b * ci + c) * in_h) * in_w;
      for (std::size_t f = 0; f < co; ++f) {
        const double* gp = G.data() + ((b * co + f) * ho) * wo;
        for (std::size_t m = 0; m < k; ++m) {
          for (std::size_t n = 0; n < k; ++n) {
            const double wv = W[((f * ci + c) * k + m) * k + n];
            for (std::size_t i = 0; i < ho; ++i) {
              const long hi = static_cast<long>(i * g.stride + m) - static_cast<long>(g.padding);
              if (hi < 0 || hi >= static_cast<long>(in_h)) continue;
              for (std::size_t j = 0; j < wo; ++j) {
                const long wj = static_cast<long>(j * g.stride + n) - static_cast<long>(g.padding);
                if (wj < 0 || wj >= static_cast<long>(in_w)) continue;
                xp[static_cast<std::size_t>(hi) * in_w + static_cast<std::size_t>(wj)] += wv * gp[i * wo + j];
              }
            }
          }
        }
      }
    }
  }
  return gx;
}

Tensor conv2d_weight_grad(const Tensor& x, const Tensor& gy, const ConvGeometry& g) {
  require(x.rank() == 4 && gy.rank() == 4 && x.dim(0) == gy.dim(0), ErrorKind::shape,
          "conv2d_weight_grad: input/gradient mismatch");
  const Shape ws{gy.dim(1), x.dim(1), g.kernel, g.kernel};
  const ConvDims d = conv_dims(x.shape(), ws, g);
  require(gy.dim(2) == d.ho && gy.dim(3) == d.wo, ErrorKind::shape, "conv2d_weight_grad: output extent mismatch");
  Tensor gw(ws);
  for (std::size_t f = 0; f < d.co; ++f)
    for (std::size_t c = 0; c < d.ci; ++c)
      for (std::size_t m = 0; m < d.k; ++m)
        for (std::size_t n = 0; n < d.k; ++n)
          gw[((f * d.ci + c) * d.k + m) * d.k + n] = weight_grad_entry(x, gy, d, g, f, c, m, n);
  return gw;
}

Tensor conv2d_weight_grad_pairs(const Tensor& x, const Tensor& gy, const ConvGeometry& g,
                                std::span<const std::size_t> outs, std::span<const std::size_t> ins) {
  require(x.rank() == 4 && gy.rank() == 4 && x.dim(0) == gy.dim(0), ErrorKind::shape,
          "conv2d_weight_grad: input/gradient mismatch");
  const Shape ws{gy.dim(1), x.dim(1), g.kernel, g.kernel};
  const ConvDims d = conv_dims(x.shape(), ws, g);
  require(gy.dim(2) == d.ho && gy.dim(3) == d.wo, ErrorKind::shape, "conv2d_weight_grad: output extent mismatch");
  Tensor gw(ws);
  for (std::size_t f : outs) {
    require(f < d.co, ErrorKind::shape, "output channel index out of range");
    for (std::size_t c : ins) {
      require(c < d.ci, ErrorKind::shape, "input channel index out of range");
      for (std::size_t m = 0; m < d.k; ++m)
        for (std::size_t n = 0; n < d.k; ++n)
          gw[((f * d.ci + c) * d.k + m) * d.k + n] = weight_grad_entry(x, gy, d, g, f, c, m, n);
    }
  }
  return gw;
}

PoolResult max_pool(const Tensor& x, std::size_t window, std::size_t stride) {
  require(x.rank() == 4, ErrorKind::shape, "max_pool expects [B, C, H, W]");
  const ConvGeometry geo{window, stride, 0};
  const std::size_t batch = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t ho = geo.out_extent(h), wo = geo.out_extent(w);
  PoolResult r{Tensor({batch, c, ho, wo}), {}};
  r.argmax.resize(r.y.size());
  std::size_t o = 0;
  for (std::size_t bc = 0; bc < batch * c; ++bc) {
    const std::size_t base = bc * h * w;
    for (std::size_t i = 0; i < ho; ++i) {
      for (std::size_t j = 0; j < wo; ++j, ++o) {
        std::size_t best = base + (i * stride) * w + j * stride;
        for (std::size_t m = 0; m < window; ++m) {
          for (std::size_t n = 0; n < window; ++n) {
            const std::size_t idx = base + (i * stride + m) * w + (j * stride + n);
            if (x[idx] > x[best]) best = idx;
          }
        }
        r.argmax[o] = best;
        r.y[o] = x[best];
      }
    }
  }
  return r;
}

Tensor scatter(const Tensor& values, const std::vector<std::size_t>& index, const Shape& out_shape) {
  require(values.size() == index.size(), ErrorKind::shape, "scatter: index length mismatch");
  Tensor out(out_shape);
  for (std::size_t i = 0; i < index.size(); ++i) out[index[i]] += values[i];
  return out;
}

Tensor gather(const Tensor& source, const std::vector<std::size_t>& index, const Shape& out_shape) {
  require(shape_numel(out_shape) == index.size(), ErrorKind::shape, "gather: index length mismatch");
  Tensor out(out_shape);
  for (std::size_t i = 0; i < index.size(); ++i) out[i] = source[index[i]];
  return out;
}

}  // namespace pmeta::kernels
