#pragma once

// Dense kernels behind the autodiff engine and the batched inference path.
//
// Every kernel has a serial reference (namespace serial) and an OpenMP
// variant (namespace omp). The OpenMP variants partition work so that each
// output element is accumulated in exactly the same order as the serial
// reference, which keeps results bit-identical for any thread count.

#include <cstddef>
#include <span>

namespace doublyaware::kernels {

// y[rows x out] = x[rows x in] * w[in x out] + b[out]
// dx[rows x in] = dy[rows x out] * w^T
// dw[in x out] += x^T * dy,  db[out] += column sums of dy
namespace serial {
void affine(std::span<const double> x, std::size_t rows, std::size_t in,
            std::span<const double> w, std::span<const double> b, std::size_t out,
            std::span<double> y);
void affine_grad_input(std::span<const double> dy, std::size_t rows, std::size_t out,
                       std::span<const double> w, std::size_t in, std::span<double> dx);
void affine_grad_params(std::span<const double> x, std::span<const double> dy, std::size_t rows,
                        std::size_t in, std::size_t out, std::span<double> dw,
                        std::span<double> db);
void elu(std::span<const double> x, std::span<double> y);
}  // namespace serial

namespace omp {
void affine(std::span<const double> x, std::size_t rows, std::size_t in,
            std::span<const double> w, std::span<const double> b, std::size_t out,
            std::span<double> y);
void affine_grad_input(std::span<const double> dy, std::size_t rows, std::size_t out,
                       std::span<const double> w, std::size_t in, std::span<double> dx);
void affine_grad_params(std::span<const double> x, std::span<const double> dy, std::size_t rows,
                        std::size_t in, std::size_t out, std::span<double> dw,
                        std::span<double> db);
void elu(std::span<const double> x, std::span<double> y);
}  // namespace omp

// Thread cap from DOUBLYAWARE_THREADS (default: all cores). Read once.
int thread_count();
// Overrides the cap for the rest of the process (tests and benchmarks).
void set_thread_count(int n);

// Dispatching entry points: OpenMP when more than one thread is allowed and
// the problem is large enough to amortize a parallel region.
void affine(std::span<const double> x, std::size_t rows, std::size_t in,
            std::span<const double> w, std::span<const double> b, std::size_t out,
            std::span<double> y);
void affine_grad_input(std::span<const double> dy, std::size_t rows, std::size_t out,
                       std::span<const double> w, std::size_t in, std::span<double> dx);
void affine_grad_params(std::span<const double> x, std::span<const double> dy, std::size_t rows,
                        std::size_t in, std::size_t out, std::span<double> dw,
                        std::span<double> db);
void elu(std::span<const double> x, std::span<double> y);

}  // namespace doublyaware::kernels
