// Copyright 2026 The avvad Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef AVVAD_TENSOR_HPP_
#define AVVAD_TENSOR_HPP_

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace avvad {

[[noreturn]] inline void fail(const std::string& msg) {
  throw std::invalid_argument(msg);
}

inline std::string shape_str(const std::vector<int>& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

// Dense n-dimensional array, row-major, with an optional gradient buffer of
// the same extent. The gradient is allocated only for tensors that take part
// in backpropagation (parameters and tape nodes).
template <typename S>
struct Tensor {
  std::vector<int> shape;
  std::vector<S> data;
  std::vector<S> grad;
  bool requires_grad = false;

  Tensor() = default;
  explicit Tensor(std::vector<int> extents, S fill = S(0))
      : shape(std::move(extents)), data(checked_size(shape), fill) {}

  static std::size_t checked_size(const std::vector<int>& extents) {
    std::size_t n = 1;
    for (int e : extents) {
      if (e <= 0) fail("tensor extent must be positive, got shape " + shape_str(extents));
      n *= static_cast<std::size_t>(e);
    }
    return n;
  }

  std::size_t size() const { return data.size(); }
  int rank() const { return static_cast<int>(shape.size()); }
  int extent(int axis) const { return shape[static_cast<std::size_t>(axis)]; }

  S* ptr() { return data.data(); }
  const S* ptr() const { return data.data(); }
  S* gptr() { return grad.data(); }

  S& operator()(int i) { return data[static_cast<std::size_t>(i)]; }
  S operator()(int i) const { return data[static_cast<std::size_t>(i)]; }
  S& operator()(int i, int j) {
    return data[static_cast<std::size_t>(i) * shape[1] + j];
  }
  S operator()(int i, int j) const {
    return data[static_cast<std::size_t>(i) * shape[1] + j];
  }
  S& operator()(int i, int j, int k) {
    return data[(static_cast<std::size_t>(i) * shape[1] + j) * shape[2] + k];
  }
  S operator()(int i, int j, int k) const {
    return data[(static_cast<std::size_t>(i) * shape[1] + j) * shape[2] + k];
  }
  S& operator()(int i, int j, int k, int l) {
    return data[((static_cast<std::size_t>(i) * shape[1] + j) * shape[2] + k) * shape[3] + l];
  }
  S operator()(int i, int j, int k, int l) const {
    return data[((static_cast<std::size_t>(i) * shape[1] + j) * shape[2] + k) * shape[3] + l];
  }

  void set_requires_grad(bool on) {
    requires_grad = on;
    if (on) {
      grad.assign(data.size(), S(0));
    } else {
      grad.clear();
    }
  }

  void zero_grad() { std::fill(grad.begin(), grad.end(), S(0)); }

  void reshape(std::vector<int> extents) {
    if (checked_size(extents) != data.size()) {
      fail("reshape from " + shape_str(shape) + " to " + shape_str(extents) +
           " changes element count");
    }
    shape = std::move(extents);
  }

  bool all_finite() const {
    for (S v : data) {
      if (!std::isfinite(static_cast<double>(v))) return false;
    }
    return true;
  }

  void fill(S v) { std::fill(data.begin(), data.end(), v); }
};

template <typename S>
struct NamedParam {
  std::string name;
  Tensor<S>* tensor;
};

}  // namespace avvad

#endif  // AVVAD_TENSOR_HPP_
