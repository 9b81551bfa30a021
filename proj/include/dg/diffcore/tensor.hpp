#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace dg::diff {

// Dense real tensor, row-major, rank <= 3. Problem sizes here (<= 18 states,
// <= 3 actions, short horizons, small hidden layers) never justify sparsity.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> v;

  Tensor() = default;

  Tensor(std::vector<int> s, std::vector<double> values)
      : shape(std::move(s)), v(std::move(values)) {
    if (numel_of(shape) != v.size())
      throw std::invalid_argument("Tensor: shape/value size mismatch");
  }

  static Tensor zeros(std::vector<int> s) {
    Tensor t;
    t.shape = std::move(s);
    t.v.assign(numel_of(t.shape), 0.0);
    return t;
  }

  static Tensor full(std::vector<int> s, double value) {
    Tensor t = zeros(std::move(s));
    t.v.assign(t.v.size(), value);
    return t;
  }

  static Tensor scalar(double value) { return Tensor({1}, {value}); }

  static Tensor row(std::vector<double> values) {
    int n = static_cast<int>(values.size());
    return Tensor({n}, std::move(values));
  }

  // One-hot row vector of length n.
  static Tensor onehot(int n, int index) {
    Tensor t = zeros({n});
    t.v[static_cast<size_t>(index)] = 1.0;
    return t;
  }

  int rank() const { return static_cast<int>(shape.size()); }
  size_t numel() const { return v.size(); }

  int extent(int axis) const { return shape[static_cast<size_t>(axis)]; }

  double& at(int i) { return v[static_cast<size_t>(i)]; }
  double at(int i) const { return v[static_cast<size_t>(i)]; }

  double& at(int i, int j) { return v[static_cast<size_t>(i) * shape[1] + j]; }
  double at(int i, int j) const {
    return v[static_cast<size_t>(i) * shape[1] + j];
  }

  double& at(int i, int j, int k) {
    return v[(static_cast<size_t>(i) * shape[1] + j) * shape[2] + k];
  }
  double at(int i, int j, int k) const {
    return v[(static_cast<size_t>(i) * shape[1] + j) * shape[2] + k];
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (double x : v)
      if (!std::isfinite(x)) return false;
    return true;
  }

  static size_t numel_of(const std::vector<int>& s) {
    size_t n = 1;
    for (int e : s) {
      if (e < 0) throw std::invalid_argument("Tensor: negative extent");
      n *= static_cast<size_t>(e);
    }
    return n;
  }
};

inline std::string shape_str(const std::vector<int>& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

}  // namespace dg::diff
