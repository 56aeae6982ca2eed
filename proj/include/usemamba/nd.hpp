// Copyright 2025 USEMamba Contributors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#pragma once

#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace usemamba {

// Dense row-major n-d array of doubles. The last axis is contiguous.
struct NdArray {
  std::vector<double> v;
  std::vector<int> shape;

  NdArray() = default;
  explicit NdArray(std::vector<int> s) : shape(std::move(s)) {
    v.assign(count(shape), 0.0);
  }
  NdArray(std::vector<int> s, double fill) : shape(std::move(s)) {
    v.assign(count(shape), fill);
  }
  NdArray(std::vector<int> s, std::vector<double> data)
      : v(std::move(data)), shape(std::move(s)) {
    if (v.size() != count(shape)) throw std::invalid_argument("NdArray: data/shape mismatch");
  }

  static std::size_t count(const std::vector<int>& s) {
    std::size_t n = 1;
    for (int d : s) {
      if (d < 0) throw std::invalid_argument("NdArray: negative dim");
      n *= static_cast<std::size_t>(d);
    }
    return n;
  }

  std::size_t size() const { return v.size(); }
  int ndim() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }
  double* data() { return v.data(); }
  const double* data() const { return v.data(); }

  // 2-d / 3-d accessors; no bounds checks beyond debug builds.
  double& at2(int i, int j) { return v[static_cast<std::size_t>(i) * shape[1] + j]; }
  double at2(int i, int j) const { return v[static_cast<std::size_t>(i) * shape[1] + j]; }
  double& at3(int i, int j, int k) {
    return v[(static_cast<std::size_t>(i) * shape[1] + j) * shape[2] + k];
  }
  double at3(int i, int j, int k) const {
    return v[(static_cast<std::size_t>(i) * shape[1] + j) * shape[2] + k];
  }

  bool same_shape(const NdArray& o) const { return shape == o.shape; }

  std::string shape_str() const {
    std::string s = "(";
    for (std::size_t i = 0; i < shape.size(); ++i) {
      if (i) s += ",";
      s += std::to_string(shape[i]);
    }
    return s + ")";
  }
};

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

}  // namespace usemamba
