#include <algorithm>
#include <cstdint>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "petsynth/errors.hpp"
#include "petsynth/tensor.hpp"

namespace petsynth {

namespace {

// Direct convolution organized as accumulated shifted planes: for each
// (filter, channel, tap) the inner loop is a contiguous axpy over a row, which
// vectorizes well. Parallelism is over independent output slices only, and
// each slice is accumulated in a fixed sequential order, so results are
// bitwise identical for any thread count.

struct ConvDims {
  std::int64_t n, c, h, w, f, k;
  int dilation;
  std::int64_t ck;  // (k-1)/2
};

void conv_forward(const ConvDims& d, const double* in, const double* ker, const double* bias,
                  double* out) {
  const std::int64_t hw = d.h * d.w;
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
  for (std::int64_t n = 0; n < d.n; ++n) {
    for (std::int64_t f = 0; f < d.f; ++f) {
      double* op = out + (n * d.f + f) * hw;
      std::fill_n(op, hw, bias ? bias[f] : 0.0);
      for (std::int64_t c = 0; c < d.c; ++c) {
        const double* ip = in + (n * d.c + c) * hw;
        const double* kp = ker + (f * d.c + c) * d.k * d.k;
        for (std::int64_t ky = 0; ky < d.k; ++ky) {
          const std::int64_t dy = d.dilation * (ky - d.ck);
          const std::int64_t y0 = std::max<std::int64_t>(0, -dy);
          const std::int64_t y1 = std::min<std::int64_t>(d.h, d.h - dy);
          for (std::int64_t kx = 0; kx < d.k; ++kx) {
            const double wv = kp[ky * d.k + kx];
            if (wv == 0.0) continue;
            const std::int64_t dx = d.dilation * (kx - d.ck);
            const std::int64_t x0 = std::max<std::int64_t>(0, -dx);
            const std::int64_t x1 = std::min<std::int64_t>(d.w, d.w - dx);
            for (std::int64_t y = y0; y < y1; ++y) {
              const double* src = ip + (y + dy) * d.w + dx;
              double* dst = op + y * d.w;
              for (std::int64_t x = x0; x < x1; ++x) dst[x] += wv * src[x];
            }
          }
        }
      }
    }
  }
}

void conv_backward_input(const ConvDims& d, const double* gout, const double* ker,
                         double* gin) {
  const std::int64_t hw = d.h * d.w;
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
  for (std::int64_t n = 0; n < d.n; ++n) {
    for (std::int64_t c = 0; c < d.c; ++c) {
      double* gp = gin + (n * d.c + c) * hw;
      for (std::int64_t f = 0; f < d.f; ++f) {
        const double* op = gout + (n * d.f + f) * hw;
        const double* kp = ker + (f * d.c + c) * d.k * d.k;
        for (std::int64_t ky = 0; ky < d.k; ++ky) {
          const std::int64_t dy = d.dilation * (ky - d.ck);
          const std::int64_t y0 = std::max<std::int64_t>(0, -dy);
          const std::int64_t y1 = std::min<std::int64_t>(d.h, d.h - dy);
          for (std::int64_t kx = 0; kx < d.k; ++kx) {
            const double wv = kp[ky * d.k + kx];
            if (wv == 0.0) continue;
            const std::int64_t dx = d.dilation * (kx - d.ck);
            const std::int64_t x0 = std::max<std::int64_t>(0, -dx);
            const std::int64_t x1 = std::min<std::int64_t>(d.w, d.w - dx);
            for (std::int64_t y = y0; y < y1; ++y) {
              const double* src = op + y * d.w;
              double* dst = gp + (y + dy) * d.w + dx;
              for (std::int64_t x = x0; x < x1; ++x) dst[x] += wv * src[x];
            }
          }
        }
      }
    }
  }
}

void conv_backward_kernel(const ConvDims& d, const double* gout, const double* in,
                          double* gker) {
  const std::int64_t hw = d.h * d.w;
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
  for (std::int64_t f = 0; f < d.f; ++f) {
    for (std::int64_t c = 0; c < d.c; ++c) {
      double* kg = gker + (f * d.c + c) * d.k * d.k;
      for (std::int64_t ky = 0; ky < d.k; ++ky) {
        const std::int64_t dy = d.dilation * (ky - d.ck);
        const std::int64_t y0 = std::max<std::int64_t>(0, -dy);
        const std::int64_t y1 = std::min<std::int64_t>(d.h, d.h - dy);
        for (std::int64_t kx = 0; kx < d.k; ++kx) {
          const std::int64_t dx = d.dilation * (kx - d.ck);
          const std::int64_t x0 = std::max<std::int64_t>(0, -dx);
          const std::int64_t x1 = std::min<std::int64_t>(d.w, d.w - dx);
          double acc = 0.0;
          for (std::int64_t n = 0; n < d.n; ++n) {
            const double* op = gout + (n * d.f + f) * hw;
            const double* ip = in + (n * d.c + c) * hw;
            for (std::int64_t y = y0; y < y1; ++y) {
              const double* g = op + y * d.w;
              const double* x = ip + (y + dy) * d.w + dx;
              double row = 0.0;
              for (std::int64_t xx = x0; xx < x1; ++xx) row += g[xx] * x[xx];
              acc += row;
            }
          }
          kg[ky * d.k + kx] += acc;
        }
      }
    }
  }
}

void conv_backward_bias(const ConvDims& d, const double* gout, double* gbias) {
  const std::int64_t hw = d.h * d.w;
  for (std::int64_t f = 0; f < d.f; ++f) {
    double acc = 0.0;
    for (std::int64_t n = 0; n < d.n; ++n) {
      const double* op = gout + (n * d.f + f) * hw;
      for (std::int64_t i = 0; i < hw; ++i) acc += op[i];
    }
    gbias[f] += acc;
  }
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, int dilation) {
  if (input->shape.size() != 4) throw ContractViolation("conv2d: input must be [N,C,H,W]");
  if (kernel->shape.size() != 4) throw ContractViolation("conv2d: kernel must be [F,C,k,k]");
  if (dilation < 1) throw ContractViolation("conv2d: dilation must be >= 1");
  ConvDims d;
  d.n = input->shape[0];
  d.c = input->shape[1];
  d.h = input->shape[2];
  d.w = input->shape[3];
  d.f = kernel->shape[0];
  d.k = kernel->shape[2];
  d.dilation = dilation;
  d.ck = (d.k - 1) / 2;
  if (kernel->shape[1] != d.c)
    throw ContractViolation("conv2d: kernel channel count does not match input");
  if (kernel->shape[3] != d.k || d.k % 2 == 0)
    throw ContractViolation("conv2d: kernel spatial size must be square and odd");
  if (bias && (bias->shape.size() != 1 || bias->shape[0] != d.f))
    throw ContractViolation("conv2d: bias must be [F]");

  auto out = make_tensor({d.n, d.f, d.h, d.w});
  out->op = "conv2d";
  conv_forward(d, input->value.data(), kernel->value.data(),
               bias ? bias->value.data() : nullptr, out->value.data());

  out->requires_grad =
      input->requires_grad || kernel->requires_grad || (bias && bias->requires_grad);
  if (out->requires_grad) {
    out->parents = bias ? std::vector<Tensor>{input, kernel, bias}
                        : std::vector<Tensor>{input, kernel};
    Tensor pin = input, pker = kernel, pbias = bias;
    out->backward_fn = [pin, pker, pbias, d](TensorNode& self) {
      if (pin->requires_grad) {
        pin->ensure_grad();
        conv_backward_input(d, self.grad.data(), pker->value.data(), pin->grad.data());
      }
      if (pker->requires_grad) {
        pker->ensure_grad();
        conv_backward_kernel(d, self.grad.data(), pin->value.data(), pker->grad.data());
      }
      if (pbias && pbias->requires_grad) {
        pbias->ensure_grad();
        conv_backward_bias(d, self.grad.data(), pbias->grad.data());
      }
    };
  }
  return out;
}

}  // namespace petsynth
