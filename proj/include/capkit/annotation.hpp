#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

#include "capkit/tensor.hpp"

namespace capkit {

/// Spatial encoder output: P position vectors of dimension N, row-major
/// (row p is the channel fiber at spatial position p).
struct AnnotationGrid {
  std::size_t positions = 0;
  std::size_t channels = 0;
  std::vector<double> values;

  AnnotationGrid() = default;
  AnnotationGrid(std::size_t p, std::size_t n, std::vector<double> v)
      : positions(p), channels(n), values(std::move(v)) {
    if (values.size() != p * n) throw ShapeError("annotation grid payload does not match P x N");
  }

  double at(std::size_t p, std::size_t n) const { return values[p * channels + n]; }

  Tensor tensor() const { return Tensor({positions, channels}, values); }

  bool finite() const {
    for (double v : values) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }
};

}  // namespace capkit
