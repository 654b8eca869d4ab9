#pragma once

// Operations composed from the primitives in tensor.hpp. None of these add a
// backward rule of their own.

#include <cmath>
#include <vector>

#include "capkit/tensor.hpp"

namespace capkit {

inline Tensor constant(Shape shape, double value) { return Tensor(std::move(shape), value); }

inline Tensor scale(const Tensor& x, double c) { return multiply(x, Tensor::scalar(c)); }

inline Tensor neg(const Tensor& x) { return scale(x, -1.0); }

inline Tensor sub(const Tensor& a, const Tensor& b) { return add(a, neg(b)); }

/// Sum of every entry, as a rank-0 tensor.
inline Tensor sum(const Tensor& x) {
  const auto flat = reshape(x, {1, x.size()});
  return reshape(matmul(flat, constant({x.size(), 1}, 1.0)), {});
}

inline Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.size())); }

/// Row sums of a matrix: [m, n] -> [m, 1].
inline Tensor row_sum(const Tensor& x) { return matmul(x, constant({x.dim(1), 1}, 1.0)); }

/// Matrix transpose as a gather over the flattened entries.
inline Tensor transpose(const Tensor& x) {
  if (x.rank() != 2) throw ShapeError("transpose needs a matrix, got " + shape_str(x.shape()));
  const std::size_t m = x.dim(0), n = x.dim(1);
  std::vector<std::size_t> ids(m * n);
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t i = 0; i < m; ++i) ids[j * m + i] = i * n + j;
  }
  return reshape(embedding(reshape(x, {m * n, 1}), std::move(ids)), {n, m});
}

/// x W + b, with b broadcast over rows. `b` may be undefined.
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b = {}) {
  auto y = matmul(x, w);
  return b.defined() ? add(y, b) : y;
}

/// Columns [begin, begin+count) of a matrix, via a 0/1 selection matmul.
inline Tensor columns(const Tensor& x, std::size_t begin, std::size_t count) {
  if (x.rank() != 2 || begin + count > x.dim(1) || count == 0) {
    throw ShapeError("column slice out of range for " + shape_str(x.shape()));
  }
  Tensor sel({x.dim(1), count}, 0.0);
  auto d = sel.mutable_data();
  for (std::size_t j = 0; j < count; ++j) d[(begin + j) * count + j] = 1.0;
  return matmul(x, sel);
}

/// Rows [begin, begin+count) of a matrix.
inline Tensor rows(const Tensor& x, std::size_t begin, std::size_t count) {
  std::vector<std::size_t> ids(count);
  for (std::size_t i = 0; i < count; ++i) ids[i] = begin + i;
  return embedding(x, std::move(ids));
}

inline bool all_finite(std::span<const double> v) {
  for (double x : v) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

}  // namespace capkit
