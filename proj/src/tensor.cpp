#include "doublyaware/tensor.hpp"

#include <algorithm>
#include <cmath>

#include "doublyaware/common.hpp"

namespace doublyaware {

Matrix concat_cols(const Matrix& a, const Matrix& b) {
  require(a.rows == b.rows, "concat_cols: row mismatch");
  Matrix out(a.rows, a.cols + b.cols);
  for (std::size_t r = 0; r < a.rows; ++r) {
    auto dst = out.row(r);
    std::copy(a.row(r).begin(), a.row(r).end(), dst.begin());
    std::copy(b.row(r).begin(), b.row(r).end(), dst.begin() + static_cast<std::ptrdiff_t>(a.cols));
  }
  return out;
}

Matrix concat_rows(const Matrix& a, const Matrix& b) {
  if (a.rows == 0) return b;
  if (b.rows == 0) return a;
  require(a.cols == b.cols, "concat_rows: column mismatch");
  Matrix out(a.rows + b.rows, a.cols);
  std::copy(a.data.begin(), a.data.end(), out.data.begin());
  std::copy(b.data.begin(), b.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(a.size()));
  return out;
}

bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

}  // namespace doublyaware
