#pragma once

// Oracles shared by the test executables.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "doublyaware/autodiff.hpp"
#include "doublyaware/common.hpp"
#include "doublyaware/tensor.hpp"

namespace testing_support {

using doublyaware::Matrix;
using doublyaware::Rng;

inline Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng, double scale = 1.0) {
  Matrix m(r, c);
  for (double& v : m.data) v = scale * rng.normal();
  return m;
}

// Plain triple loop.
inline Matrix naive_affine(const Matrix& x, const std::vector<double>& w, const std::vector<double>& b,
                           std::size_t out) {
  Matrix y(x.rows, out);
  for (std::size_t i = 0; i < x.rows; ++i)
    for (std::size_t j = 0; j < out; ++j) {
      double s = b[j];
      for (std::size_t k = 0; k < x.cols; ++k) s += x(i, k) * w[k * out + j];
      y(i, j) = s;
    }
  return y;
}

struct FdResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
};

// Central differences of f at `values` on `coords` (all coordinates when empty),
// compared against `analytic`. Relative error uses max(|a|, |n|, floor).
inline FdResult fd_check(const std::function<double(const std::vector<double>&)>& f, std::vector<double> values,
                         const std::vector<double>& analytic, const std::vector<std::size_t>& coords,
                         double h = 1e-5, double floor = 1e-6) {
  FdResult r;
  auto one = [&](std::size_t i) {
    const double x0 = values[i];
    values[i] = x0 + h;
    const double fp = f(values);
    values[i] = x0 - h;
    const double fm = f(values);
    values[i] = x0;
    const double numeric = (fp - fm) / (2.0 * h);
    const double denom = std::max({std::abs(numeric), std::abs(analytic[i]), floor});
    r.max_rel_error = std::max(r.max_rel_error, std::abs(numeric - analytic[i]) / denom);
    ++r.checked;
  };
  if (coords.empty())
    for (std::size_t i = 0; i < values.size(); ++i) one(i);
  else
    for (std::size_t i : coords) one(i);
  return r;
}

inline std::vector<std::size_t> random_coords(std::size_t n, std::size_t count, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::size_t> c;
  for (std::size_t i = 0; i < count; ++i) c.push_back(static_cast<std::size_t>(rng.below(n)));
  return c;
}

}  // namespace testing_support
