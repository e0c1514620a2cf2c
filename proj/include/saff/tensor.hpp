#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace saff {

// Error taxonomy: shape/dimension misuse, API misuse, and file-format faults.
struct shape_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct usage_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct format_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Dense row-major array of 64-bit floats. Value semantics; treated as
// immutable once handed to a Tape.
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> data;

  Tensor() = default;
  Tensor(std::vector<std::size_t> s, std::vector<double> d)
      : shape(std::move(s)), data(std::move(d)) {
    std::size_t n = 1;
    for (auto e : shape) n *= e;
    if (n != data.size()) throw shape_error("tensor: shape/data size mismatch");
  }

  static Tensor zeros(std::vector<std::size_t> s) {
    std::size_t n = 1;
    for (auto e : s) n *= e;
    return Tensor(std::move(s), std::vector<double>(n, 0.0));
  }
  static Tensor full(std::vector<std::size_t> s, double v) {
    std::size_t n = 1;
    for (auto e : s) n *= e;
    return Tensor(std::move(s), std::vector<double>(n, v));
  }
  static Tensor scalar(double v) { return Tensor({}, {v}); }
  static Tensor vec(std::vector<double> d) {
    const std::size_t n = d.size();
    return Tensor({n}, std::move(d));
  }
  static Tensor matrix(std::size_t r, std::size_t c, std::vector<double> d) {
    return Tensor({r, c}, std::move(d));
  }
  static Tensor identity(std::size_t n) {
    Tensor t = zeros({n, n});
    for (std::size_t i = 0; i < n; ++i) t.data[i * n + i] = 1.0;
    return t;
  }

  std::size_t size() const { return data.size(); }
  std::size_t ndim() const { return shape.size(); }
  bool is_scalar() const { return shape.empty(); }

  std::size_t rows() const {
    if (ndim() != 2) throw shape_error("tensor: rows() on non-matrix");
    return shape[0];
  }
  std::size_t cols() const {
    if (ndim() != 2) throw shape_error("tensor: cols() on non-matrix");
    return shape[1];
  }

  double& at(std::size_t i) { return data[i]; }
  double at(std::size_t i) const { return data[i]; }
  double& at(std::size_t i, std::size_t j) { return data[i * shape[1] + j]; }
  double at(std::size_t i, std::size_t j) const { return data[i * shape[1] + j]; }

  double item() const {
    if (size() != 1) throw usage_error("tensor: item() on non-scalar");
    return data[0];
  }

  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }
};

inline bool operator==(const Tensor& a, const Tensor& b) {
  return a.shape == b.shape && a.data == b.data;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) throw shape_error("max_abs_diff: shape mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(a.data[i] - b.data[i]));
  return m;
}

}  // namespace saff
