#pragma once

#include <cstddef>
#include <numeric>
#include <string>
#include <vector>

#include "mtkd/errors.hpp"
#include "mtkd/rng.hpp"

namespace mtkd {

inline std::size_t shape_numel(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

inline std::string shape_str(const std::vector<std::size_t>& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

// Row-major dense tensor. The grad buffer exists only while requires_grad
// is set; node_id points into the active tape during a forward pass.
template <typename S>
struct TensorT {
  std::vector<std::size_t> shape;
  std::vector<S> values;
  bool requires_grad = false;
  std::vector<S> grad;
  long node_id = -1;

  TensorT() = default;
  TensorT(std::vector<std::size_t> sh, std::vector<S> vals)
      : shape(std::move(sh)), values(std::move(vals)) {
    if (shape_numel(shape) != values.size())
      throw DimensionError("tensor values length " + std::to_string(values.size()) +
                           " does not match shape " + shape_str(shape));
  }

  static TensorT zeros(std::vector<std::size_t> sh) {
    std::size_t n = shape_numel(sh);
    return TensorT(std::move(sh), std::vector<S>(n, S(0)));
  }

  static TensorT full(std::vector<std::size_t> sh, S v) {
    std::size_t n = shape_numel(sh);
    return TensorT(std::move(sh), std::vector<S>(n, v));
  }

  static TensorT gaussian(std::vector<std::size_t> sh, Rng& rng, double std_dev) {
    std::size_t n = shape_numel(sh);
    std::vector<S> v(n);
    for (auto& x : v) x = static_cast<S>(rng.normal() * std_dev);
    return TensorT(std::move(sh), std::move(v));
  }

  static TensorT identity(std::size_t n) {
    TensorT t = zeros({n, n});
    for (std::size_t i = 0; i < n; ++i) t.values[i * n + i] = S(1);
    return t;
  }

  std::size_t numel() const { return values.size(); }
  std::size_t rows() const { return shape.empty() ? 1 : shape[0]; }
  std::size_t cols() const { return shape.size() < 2 ? 1 : shape[1]; }

  void set_requires_grad(bool rg) {
    requires_grad = rg;
    if (rg)
      grad.assign(values.size(), S(0));
    else
      grad.clear();
  }

  void zero_grad() {
    if (requires_grad) grad.assign(values.size(), S(0));
  }

  bool same_shape(const TensorT& o) const { return shape == o.shape; }

  template <typename U>
  TensorT<U> cast() const {
    TensorT<U> out;
    out.shape = shape;
    out.values.resize(values.size());
    for (std::size_t i = 0; i < values.size(); ++i)
      out.values[i] = static_cast<U>(values[i]);
    out.requires_grad = requires_grad;
    if (requires_grad) out.grad.assign(values.size(), U(0));
    return out;
  }
};

using Tensor = TensorT<float>;
using Tensor64 = TensorT<double>;

}  // namespace mtkd
