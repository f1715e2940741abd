#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "mtkd/tensor.hpp"

namespace mtkd {

// Central finite differences of a pure scalar function, one element at a
// time. Only meaningful in 64-bit precision.
inline std::vector<double> finite_diff_grad(
    const std::function<double(const std::vector<double>&)>& f,
    std::vector<double> x, double h = 1e-4) {
  std::vector<double> g(x.size());
  for (std::size_t k = 0; k < x.size(); ++k) {
    const double orig = x[k];
    x[k] = orig + h;
    const double fp = f(x);
    x[k] = orig - h;
    const double fm = f(x);
    x[k] = orig;
    g[k] = (fp - fm) / (2.0 * h);
  }
  return g;
}

// Richardson extrapolation of two central-difference estimates (step h and
// h/2) cancels the O(h^2) truncation term. Deeply composed functions can
// otherwise show FD noise above the comparison tolerance even when the
// analytic gradient is exact.
inline std::vector<double> finite_diff_grad_richardson(
    const std::function<double(const std::vector<double>&)>& f,
    const std::vector<double>& x, double h = 1e-4) {
  const std::vector<double> g1 = finite_diff_grad(f, x, h);
  const std::vector<double> g2 = finite_diff_grad(f, x, h / 2.0);
  std::vector<double> g(x.size());
  for (std::size_t k = 0; k < x.size(); ++k) g[k] = (4.0 * g2[k] - g1[k]) / 3.0;
  return g;
}

// Largest relative error between an analytic and a numeric gradient,
// with an absolute floor so near-zero entries do not blow up the ratio.
inline double max_rel_error(const std::vector<double>& analytic,
                            const std::vector<double>& numeric,
                            double floor = 1e-3) {
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric[i]), floor});
    worst = std::max(worst, std::abs(analytic[i] - numeric[i]) / denom);
  }
  return worst;
}

}  // namespace mtkd
