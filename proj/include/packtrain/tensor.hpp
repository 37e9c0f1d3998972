// Copyright (c) 2026 The packtrain Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "packtrain/error.hpp"

namespace packtrain {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

// Dense row-major f64 array. Rank 1 and 2 are all the engine needs; the first
// dimension is always the batch (row) dimension.
struct Tensor {
  Shape shape;
  std::vector<double> data;

  Tensor() = default;
  Tensor(Shape s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
    if (shape_size(shape) != data.size()) {
      throw Error("tensor data length " + std::to_string(data.size()) + " does not match shape " + shape_str(shape));
    }
  }

  static Tensor zeros(Shape s) {
    const std::size_t n = shape_size(s);
    return Tensor(std::move(s), std::vector<double>(n, 0.0));
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  std::size_t rank() const noexcept { return shape.size(); }
  std::size_t size() const noexcept { return data.size(); }
  std::size_t rows() const noexcept { return shape.empty() ? 0 : shape[0]; }
  std::size_t cols() const noexcept { return shape.size() < 2 ? 1 : shape[1]; }

  double& at(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }

  bool all_finite() const noexcept {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }

  // Rows [offset, offset + count).
  Tensor slice_rows(std::size_t offset, std::size_t count) const {
    Shape s = shape;
    s[0] = count;
    const std::size_t stride = cols();
    std::vector<double> d(data.begin() + static_cast<std::ptrdiff_t>(offset * stride),
                          data.begin() + static_cast<std::ptrdiff_t>((offset + count) * stride));
    return Tensor(std::move(s), std::move(d));
  }

  // Zero-extends the row dimension to `total` rows.
  Tensor pad_rows(std::size_t total) const {
    Shape s = shape;
    s[0] = total;
    std::vector<double> d = data;
    d.resize(shape_size(s), 0.0);
    return Tensor(std::move(s), std::move(d));
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;
};

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape != b.shape) throw Error("max_abs_diff: shape " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data[i] - b.data[i]));
  return m;
}

}  // namespace packtrain
