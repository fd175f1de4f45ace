#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstring>

#include "doublyaware/kernels.hpp"
#include "support.hpp"

namespace k = doublyaware::kernels;
using testing_support::naive_affine;
using testing_support::random_matrix;

namespace {

bool bit_equal(const std::vector<double>& a, const std::vector<double>& b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

}  // namespace

TEST_CASE("serial affine matches the triple-loop oracle") {
  doublyaware::Rng rng(1);
  for (std::size_t rows : {1u, 3u, 4u, 7u, 33u}) {
    const auto x = random_matrix(rows, 9, rng);
    std::vector<double> w(9 * 5), b(5);
    for (double& v : w) v = rng.normal();
    for (double& v : b) v = rng.normal();
    std::vector<double> y(rows * 5);
    k::serial::affine(x.data, rows, 9, w, b, 5, y);
    const auto ref = naive_affine(x, w, b, 5);
    for (std::size_t i = 0; i < y.size(); ++i) CHECK(y[i] == doctest::Approx(ref.data[i]).epsilon(1e-13));
  }
}

TEST_CASE("affine gradients match the transposed-product oracle") {
  doublyaware::Rng rng(2);
  const std::size_t rows = 6, in = 5, out = 4;
  const auto x = random_matrix(rows, in, rng);
  const auto dy = random_matrix(rows, out, rng);
  std::vector<double> w(in * out);
  for (double& v : w) v = rng.normal();
  std::vector<double> dx(rows * in, 99.0), dw(in * out, 1.0), db(out, 2.0);
  k::serial::affine_grad_input(dy.data, rows, out, w, in, dx);
  k::serial::affine_grad_params(x.data, dy.data, rows, in, out, dw, db);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t kk = 0; kk < in; ++kk) {
      double s = 0.0;
      for (std::size_t j = 0; j < out; ++j) s += dy(i, j) * w[kk * out + j];
      CHECK(dx[i * in + kk] == doctest::Approx(s).epsilon(1e-13));
    }
  for (std::size_t kk = 0; kk < in; ++kk)
    for (std::size_t j = 0; j < out; ++j) {
      double s = 1.0;
      for (std::size_t i = 0; i < rows; ++i) s += x(i, kk) * dy(i, j);
      CHECK(dw[kk * out + j] == doctest::Approx(s).epsilon(1e-13));
    }
  for (std::size_t j = 0; j < out; ++j) {
    double s = 2.0;
    for (std::size_t i = 0; i < rows; ++i) s += dy(i, j);
    CHECK(db[j] == doctest::Approx(s).epsilon(1e-13));
  }
}

TEST_CASE("OpenMP kernels are bit-identical to the serial reference for any thread count") {
  doublyaware::Rng rng(3);
  const std::size_t rows = 301, in = 67, out = 45;
  const auto x = random_matrix(rows, in, rng);
  const auto dy = random_matrix(rows, out, rng);
  std::vector<double> w(in * out), b(out);
  for (double& v : w) v = rng.normal();
  for (double& v : b) v = rng.normal();

  std::vector<double> y_s(rows * out), dx_s(rows * in), dw_s(in * out, 0.5), db_s(out, 0.25), e_s(rows * out);
  k::serial::affine(x.data, rows, in, w, b, out, y_s);
  k::serial::affine_grad_input(dy.data, rows, out, w, in, dx_s);
  k::serial::affine_grad_params(x.data, dy.data, rows, in, out, dw_s, db_s);
  k::serial::elu(y_s, e_s);

  for (int threads : {1, 2, 3, 8}) {
    k::set_thread_count(threads);
    std::vector<double> y(rows * out), dx(rows * in), dw(in * out, 0.5), db(out, 0.25), e(rows * out);
    k::omp::affine(x.data, rows, in, w, b, out, y);
    k::omp::affine_grad_input(dy.data, rows, out, w, in, dx);
    k::omp::affine_grad_params(x.data, dy.data, rows, in, out, dw, db);
    k::omp::elu(y, e);
    CHECK(bit_equal(y, y_s));
    CHECK(bit_equal(dx, dx_s));
    CHECK(bit_equal(dw, dw_s));
    CHECK(bit_equal(db, db_s));
    CHECK(bit_equal(e, e_s));
    std::vector<double> yd(rows * out);
    k::affine(x.data, rows, in, w, b, out, yd);
    CHECK(bit_equal(yd, y_s));
  }
  k::set_thread_count(1);
}

TEST_CASE("elu is identity above zero and expm1 below") {
  const std::vector<double> x{-3.0, -0.5, 0.0, 0.5, 4.0};
  std::vector<double> y(x.size());
  k::serial::elu(x, y);
  CHECK(y[0] == doctest::Approx(std::expm1(-3.0)));
  CHECK(y[1] == doctest::Approx(std::expm1(-0.5)));
  CHECK(y[2] == 0.0);
  CHECK(y[3] == 0.5);
  CHECK(y[4] == 4.0);
}

TEST_CASE("thread cap is at least one") {
  k::set_thread_count(0);
  CHECK(k::thread_count() == 1);
  k::set_thread_count(4);
  CHECK(k::thread_count() == 4);
  k::set_thread_count(1);
}
