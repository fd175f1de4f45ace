#include "doublyaware/kernels.hpp"

#include <omp.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <vector>

namespace doublyaware::kernels {

namespace {

// Rows [r0, r1) of y = x*w + b. Four rows share each load of a weight row;
// every y(i, j) still accumulates k = 0, 1, ... in order.
void affine_rows(const double* x, std::size_t r0, std::size_t r1, std::size_t in, const double* w,
                 const double* b, std::size_t out, double* y) {
  std::size_t i = r0;
  for (; i + 4 <= r1; i += 4) {
    double* __restrict y0 = y + i * out;
    double* __restrict y1 = y0 + out;
    double* __restrict y2 = y1 + out;
    double* __restrict y3 = y2 + out;
    for (std::size_t j = 0; j < out; ++j) y0[j] = y1[j] = y2[j] = y3[j] = b[j];
    const double* x0 = x + i * in;
    const double* x1 = x0 + in;
    const double* x2 = x1 + in;
    const double* x3 = x2 + in;
    for (std::size_t k = 0; k < in; ++k) {
      const double* wk = w + k * out;
      const double a0 = x0[k], a1 = x1[k], a2 = x2[k], a3 = x3[k];
      for (std::size_t j = 0; j < out; ++j) {
        const double wkj = wk[j];
        y0[j] += a0 * wkj;
        y1[j] += a1 * wkj;
        y2[j] += a2 * wkj;
        y3[j] += a3 * wkj;
      }
    }
  }
  for (; i < r1; ++i) {
    double* yi = y + i * out;
    const double* xi = x + i * in;
    for (std::size_t j = 0; j < out; ++j) yi[j] = b[j];
    for (std::size_t k = 0; k < in; ++k) {
      const double* wk = w + k * out;
      const double a = xi[k];
      for (std::size_t j = 0; j < out; ++j) yi[j] += a * wk[j];
    }
  }
}

std::vector<double> transpose(const double* w, std::size_t in, std::size_t out) {
  std::vector<double> wt(in * out);
  for (std::size_t k = 0; k < in; ++k)
    for (std::size_t j = 0; j < out; ++j) wt[j * in + k] = w[k * out + j];
  return wt;
}

// dx rows [r0, r1) from the transposed weight (out x in).
void grad_input_rows(const double* dy, std::size_t r0, std::size_t r1, std::size_t out,
                     const double* wt, std::size_t in, double* dx) {
  for (std::size_t i = r0; i < r1; ++i) {
    double* dxi = dx + i * in;
    const double* dyi = dy + i * out;
    std::fill(dxi, dxi + in, 0.0);
    for (std::size_t j = 0; j < out; ++j) {
      const double g = dyi[j];
      const double* wj = wt + j * in;
      for (std::size_t k = 0; k < in; ++k) dxi[k] += g * wj[k];
    }
  }
}

// dw rows [k0, k1); each dw(k, j) accumulates i = 0, 1, ... in order.
void grad_weight_rows(const double* x, const double* dy, std::size_t rows, std::size_t in,
                      std::size_t out, std::size_t k0, std::size_t k1, double* dw) {
  for (std::size_t i = 0; i < rows; ++i) {
    const double* xi = x + i * in;
    const double* dyi = dy + i * out;
    for (std::size_t k = k0; k < k1; ++k) {
      const double a = xi[k];
      double* dwk = dw + k * out;
      for (std::size_t j = 0; j < out; ++j) dwk[j] += a * dyi[j];
    }
  }
}

void grad_bias(const double* dy, std::size_t rows, std::size_t out, double* db) {
  for (std::size_t i = 0; i < rows; ++i) {
    const double* dyi = dy + i * out;
    for (std::size_t j = 0; j < out; ++j) db[j] += dyi[j];
  }
}

void elu_range(const double* x, double* y, std::size_t n0, std::size_t n1) {
  for (std::size_t n = n0; n < n1; ++n) y[n] = x[n] > 0.0 ? x[n] : std::expm1(x[n]);
}

int initial_thread_count() {
  if (const char* env = std::getenv("DOUBLYAWARE_THREADS")) {
    const int n = std::atoi(env);
    if (n > 0) return n;
  }
  return std::max(1, omp_get_num_procs());
}

std::atomic<int>& thread_cap() {
  static std::atomic<int> cap{initial_thread_count()};
  return cap;
}

constexpr std::size_t kParallelWork = 1 << 16;

}  // namespace

namespace serial {

void affine(std::span<const double> x, std::size_t rows, std::size_t in,
            std::span<const double> w, std::span<const double> b, std::size_t out,
            std::span<double> y) {
  affine_rows(x.data(), 0, rows, in, w.data(), b.data(), out, y.data());
}

void affine_grad_input(std::span<const double> dy, std::size_t rows, std::size_t out,
                       std::span<const double> w, std::size_t in, std::span<double> dx) {
  const auto wt = transpose(w.data(), in, out);
  grad_input_rows(dy.data(), 0, rows, out, wt.data(), in, dx.data());
}

void affine_grad_params(std::span<const double> x, std::span<const double> dy, std::size_t rows,
                        std::size_t in, std::size_t out, std::span<double> dw,
                        std::span<double> db) {
  grad_weight_rows(x.data(), dy.data(), rows, in, out, 0, in, dw.data());
  grad_bias(dy.data(), rows, out, db.data());
}

void elu(std::span<const double> x, std::span<double> y) { elu_range(x.data(), y.data(), 0, x.size()); }

}  // namespace serial

namespace omp {

void affine(std::span<const double> x, std::size_t rows, std::size_t in,
            std::span<const double> w, std::span<const double> b, std::size_t out,
            std::span<double> y) {
  const std::size_t blocks = (rows + 3) / 4;
#pragma omp parallel for schedule(static) num_threads(thread_count())
  for (std::size_t blk = 0; blk < blocks; ++blk) {
    const std::size_t r0 = blk * 4;
    affine_rows(x.data(), r0, std::min(rows, r0 + 4), in, w.data(), b.data(), out, y.data());
  }
}

void affine_grad_input(std::span<const double> dy, std::size_t rows, std::size_t out,
                       std::span<const double> w, std::size_t in, std::span<double> dx) {
  const auto wt = transpose(w.data(), in, out);
#pragma omp parallel for schedule(static) num_threads(thread_count())
  for (std::size_t i = 0; i < rows; ++i) grad_input_rows(dy.data(), i, i + 1, out, wt.data(), in, dx.data());
}

void affine_grad_params(std::span<const double> x, std::span<const double> dy, std::size_t rows,
                        std::size_t in, std::size_t out, std::span<double> dw,
                        std::span<double> db) {
  // Partition the input dimension so each dw row has a single writer.
  const std::size_t chunk = 8;
  const std::size_t chunks = (in + chunk - 1) / chunk;
#pragma omp parallel num_threads(thread_count())
  {
#pragma omp for schedule(static) nowait
    for (std::size_t c = 0; c < chunks; ++c) {
      const std::size_t k0 = c * chunk;
      grad_weight_rows(x.data(), dy.data(), rows, in, out, k0, std::min(in, k0 + chunk), dw.data());
    }
#pragma omp single
    grad_bias(dy.data(), rows, out, db.data());
  }
}

void elu(std::span<const double> x, std::span<double> y) {
  const std::size_t n = x.size();
#pragma omp parallel for schedule(static) num_threads(thread_count())
  for (std::size_t i = 0; i < n; ++i) elu_range(x.data(), y.data(), i, i + 1);
}

}  // namespace omp

int thread_count() { return thread_cap().load(std::memory_order_relaxed); }

void set_thread_count(int n) { thread_cap().store(std::max(1, n), std::memory_order_relaxed); }

namespace {
bool go_parallel(std::size_t work) { return thread_count() > 1 && work >= kParallelWork; }
}  // namespace

void affine(std::span<const double> x, std::size_t rows, std::size_t in,
            std::span<const double> w, std::span<const double> b, std::size_t out,
            std::span<double> y) {
  if (go_parallel(rows * in * out))
    omp::affine(x, rows, in, w, b, out, y);
  else
    serial::affine(x, rows, in, w, b, out, y);
}

void affine_grad_input(std::span<const double> dy, std::size_t rows, std::size_t out,
                       std::span<const double> w, std::size_t in, std::span<double> dx) {
  if (go_parallel(rows * in * out))
    omp::affine_grad_input(dy, rows, out, w, in, dx);
  else
    serial::affine_grad_input(dy, rows, out, w, in, dx);
}

void affine_grad_params(std::span<const double> x, std::span<const double> dy, std::size_t rows,
                        std::size_t in, std::size_t out, std::span<double> dw,
                        std::span<double> db) {
  if (go_parallel(rows * in * out))
    omp::affine_grad_params(x, dy, rows, in, out, dw, db);
  else
    serial::affine_grad_params(x, dy, rows, in, out, dw, db);
}

void elu(std::span<const double> x, std::span<double> y) {
  if (go_parallel(x.size() * 16))
    omp::elu(x, y);
  else
    serial::elu(x, y);
}

}  // namespace doublyaware::kernels
