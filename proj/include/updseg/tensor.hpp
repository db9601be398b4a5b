#pragma once

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace upd {

struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Raised when a parameter archive cannot be read or fails validation.
struct LoadError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Zero padding convention for stride-1 convolution.
// Same: output spatial size equals input size; with effective kernel
// extent e, pads floor((e-1)/2) leading and ceil((e-1)/2) trailing.
enum class PadMode { Valid, Same };

/// Dense row-major N-dimensional array. 4-D feature maps use N,C,H,W.
template <class T>
struct Tensor {
  std::vector<int> shape;
  std::vector<T> data;

  Tensor() = default;

  static std::int64_t count(const std::vector<int>& shape) {
    std::int64_t n = 1;
    for (int d : shape) {
      if (d < 1) throw ShapeError("tensor dimensions must be >= 1");
      n *= d;
    }
    return n;
  }

  static Tensor full(std::vector<int> shape, T fill) {
    Tensor t;
    std::int64_t n = count(shape);
    t.shape = std::move(shape);
    t.data.assign(static_cast<std::size_t>(n), fill);
    return t;
  }

  static Tensor zeros(std::vector<int> shape) { return full(std::move(shape), T(0)); }

  static Tensor from(std::vector<int> shape, std::vector<T> values) {
    std::int64_t n = count(shape);
    if (static_cast<std::int64_t>(values.size()) != n) {
      std::ostringstream msg;
      msg << "value count " << values.size() << " does not match shape product " << n;
      throw ShapeError(msg.str());
    }
    Tensor t;
    t.shape = std::move(shape);
    t.data = std::move(values);
    return t;
  }

  std::int64_t size() const { return static_cast<std::int64_t>(data.size()); }
  int ndim() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape.at(static_cast<std::size_t>(i)); }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  // 4-D accessors (N,C,H,W)
  T& at(int n, int c, int h, int w) {
    return data[static_cast<std::size_t>(((static_cast<std::int64_t>(n) * shape[1] + c) * shape[2] + h) * shape[3] + w)];
  }
  const T& at(int n, int c, int h, int w) const {
    return data[static_cast<std::size_t>(((static_cast<std::int64_t>(n) * shape[1] + c) * shape[2] + h) * shape[3] + w)];
  }
  // 2-D accessors (H,W)
  T& at(int h, int w) { return data[static_cast<std::size_t>(static_cast<std::int64_t>(h) * shape[1] + w)]; }
  const T& at(int h, int w) const { return data[static_cast<std::size_t>(static_cast<std::int64_t>(h) * shape[1] + w)]; }

  template <class U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.data.reserve(data.size());
    for (T v : data) out.data.push_back(static_cast<U>(v));
    return out;
  }

  std::string shape_str() const {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << "]";
    return os.str();
  }
};

template <class T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(what) + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
  }
}

}  // namespace upd
