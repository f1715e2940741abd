#pragma once

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>
#include <unordered_map>
#include <cstdint>
#include <functional>
#include <vector>

#include "mtkd/errors.hpp"
#include "mtkd/rng.hpp"
#include "mtkd/tensor.hpp"

namespace mtkd {

template <typename S>
class Tape;

// Handle to a node on a tape. Cheap to copy; valid for the tape's lifetime.
template <typename S>
struct Var {
  Tape<S>* tape = nullptr;
  std::size_t id = 0;

  const std::vector<std::size_t>& shape() const;
  const std::vector<S>& val() const;
  std::size_t rows() const { return shape().empty() ? 1 : shape()[0]; }
  std::size_t cols() const { return shape().size() < 2 ? 1 : shape()[1]; }
};

namespace detail {

// C[m×p] += A[m×n] · B[n×p]
template <typename S>
void mm_acc(const S* a, const S* b, S* c, std::size_t m, std::size_t n, std::size_t p) {
  for (std::size_t i = 0; i < m; ++i) {
    const S* ai = a + i * n;
    S* ci = c + i * p;
    for (std::size_t k = 0; k < n; ++k) {
      const S aik = ai[k];
      const S* bk = b + k * p;
      for (std::size_t j = 0; j < p; ++j) ci[j] += aik * bk[j];
    }
  }
}

// C[m×p] += A[m×n] · B[p×n]ᵀ
template <typename S>
void mm_nt_acc(const S* a, const S* b, S* c, std::size_t m, std::size_t n, std::size_t p) {
  for (std::size_t i = 0; i < m; ++i) {
    const S* ai = a + i * n;
    S* ci = c + i * p;
    for (std::size_t j = 0; j < p; ++j) {
      const S* bj = b + j * n;
      S acc = S(0);
      for (std::size_t k = 0; k < n; ++k) acc += ai[k] * bj[k];
      ci[j] += acc;
    }
  }
}

// C[n×p] += A[m×n]ᵀ · B[m×p]
template <typename S>
void mm_tn_acc(const S* a, const S* b, S* c, std::size_t m, std::size_t n, std::size_t p) {
  for (std::size_t i = 0; i < m; ++i) {
    const S* ai = a + i * n;
    const S* bi = b + i * p;
    for (std::size_t k = 0; k < n; ++k) {
      const S aik = ai[k];
      S* ck = c + k * p;
      for (std::size_t j = 0; j < p; ++j) ck[j] += aik * bi[j];
    }
  }
}

}  // namespace detail

// Reverse-mode tape. Operations append nodes in topological order; backward()
// walks them once in reverse and accumulates into bound parameter tensors.
template <typename S>
class Tape {
 public:
  static constexpr double kProbFloor = 1e-12;
  static constexpr double kLayerNormEps = 1e-5;

  struct Node {
    std::vector<std::size_t> shape;
    std::vector<S> val;
    std::vector<S> grad;
    std::function<void(Tape&)> back;
    bool needs_grad = false;
  };

  std::size_t size() const { return nodes_.size(); }
  const Node& node(std::size_t id) const { return nodes_[id]; }
  std::vector<S>& grad_of(std::size_t id) { return nodes_[id].grad; }
  const std::vector<S>& val_of(std::size_t id) const { return nodes_[id].val; }

  // ---- leaves ----

  // Repeated registration of the same tensor reuses one leaf node, so a
  // parameter used by many examples on one tape accumulates into a single
  // gradient buffer.
  Var<S> param(TensorT<S>& t) {
    auto it = param_cache_.find(&t);
    if (it != param_cache_.end()) return Var<S>{this, it->second};
    Var<S> v = push(t.shape, t.values, t.requires_grad, nullptr);
    if (t.requires_grad) bindings_.push_back({v.id, &t});
    t.node_id = static_cast<long>(v.id);
    param_cache_.emplace(&t, v.id);
    return v;
  }

  Var<S> constant(const TensorT<S>& t) {
    return push(t.shape, t.values, false, nullptr);
  }

  Var<S> constant(std::vector<std::size_t> shape, std::vector<S> vals) {
    if (shape_numel(shape) != vals.size())
      throw DimensionError("constant: values do not match shape " + shape_str(shape));
    return push(std::move(shape), std::move(vals), false, nullptr);
  }

  Var<S> scalar_constant(S v) { return push({1}, {v}, false, nullptr); }

  // ---- elementwise / structural ----

  Var<S> add(Var<S> a, Var<S> b) {
    check_same_shape(a, b, "add");
    std::vector<S> out(val(a).size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = val(a)[i] + val(b)[i];
    return push(nodes_[a.id].shape, std::move(out), needs(a) || needs(b),
                [ai = a.id, bi = b.id, this](Tape& t) {
                  const auto& g = t.nodes_[cur_].grad;
                  t.acc(ai, [&](std::size_t i) { return g[i]; });
                  t.acc(bi, [&](std::size_t i) { return g[i]; });
                });
  }

  Var<S> sub(Var<S> a, Var<S> b) {
    check_same_shape(a, b, "sub");
    std::vector<S> out(val(a).size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = val(a)[i] - val(b)[i];
    return push(nodes_[a.id].shape, std::move(out), needs(a) || needs(b),
                [ai = a.id, bi = b.id, this](Tape& t) {
                  const auto& g = t.nodes_[cur_].grad;
                  t.acc(ai, [&](std::size_t i) { return g[i]; });
                  t.acc(bi, [&](std::size_t i) { return -g[i]; });
                });
  }

  Var<S> scale(Var<S> a, double c) {
    std::vector<S> out(val(a).size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<S>(val(a)[i] * c);
    return push(nodes_[a.id].shape, std::move(out), needs(a),
                [ai = a.id, c, this](Tape& t) {
                  const auto& g = t.nodes_[cur_].grad;
                  t.acc(ai, [&](std::size_t i) { return static_cast<S>(g[i] * c); });
                });
  }

  // mat[m×n] + row vector[n], broadcast over rows.
  Var<S> add_rowvec(Var<S> mat, Var<S> vec) {
    const std::size_t m = mat.rows(), n = mat.cols();
    if (val(vec).size() != n)
      throw DimensionError("add_rowvec: " + shape_str(nodes_[mat.id].shape) + " vs " +
                           shape_str(nodes_[vec.id].shape));
    std::vector<S> out(m * n);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] = val(mat)[i * n + j] + val(vec)[j];
    return push(nodes_[mat.id].shape, std::move(out), needs(mat) || needs(vec),
                [mi = mat.id, vi = vec.id, m, n, this](Tape& t) {
                  const auto& g = t.nodes_[cur_].grad;
                  t.acc(mi, [&](std::size_t i) { return g[i]; });
                  if (t.needs_id(vi)) {
                    auto& gv = t.nodes_[vi].grad;
                    for (std::size_t i = 0; i < m; ++i)
                      for (std::size_t j = 0; j < n; ++j) gv[j] += g[i * n + j];
                  }
                });
  }

  // ---- matrix products ----

  Var<S> matmul(Var<S> a, Var<S> b) {
    const std::size_t m = a.rows(), n = a.cols(), n2 = b.rows(), p = b.cols();
    if (n != n2)
      throw DimensionError("matmul: inner extents differ, " + shape_str(nodes_[a.id].shape) +
                           " vs " + shape_str(nodes_[b.id].shape));
    std::vector<S> out(m * p, S(0));
    detail::mm_acc(val(a).data(), val(b).data(), out.data(), m, n, p);
    return push({m, p}, std::move(out), needs(a) || needs(b),
                [ai = a.id, bi = b.id, m, n, p, this](Tape& t) {
                  const S* g = t.nodes_[cur_].grad.data();
                  if (t.needs_id(ai))
                    detail::mm_nt_acc(g, t.nodes_[bi].val.data(), t.nodes_[ai].grad.data(), m, p, n);
                  if (t.needs_id(bi))
                    detail::mm_tn_acc(t.nodes_[ai].val.data(), g, t.nodes_[bi].grad.data(), m, n, p);
                });
  }

  // A[m×n] · B[p×n]ᵀ -> [m×p]
  Var<S> matmul_nt(Var<S> a, Var<S> b) {
    const std::size_t m = a.rows(), n = a.cols(), p = b.rows();
    if (b.cols() != n)
      throw DimensionError("matmul_nt: inner extents differ, " + shape_str(nodes_[a.id].shape) +
                           " vs " + shape_str(nodes_[b.id].shape));
    std::vector<S> out(m * p, S(0));
    detail::mm_nt_acc(val(a).data(), val(b).data(), out.data(), m, n, p);
    return push({m, p}, std::move(out), needs(a) || needs(b),
                [ai = a.id, bi = b.id, m, n, p, this](Tape& t) {
                  const S* g = t.nodes_[cur_].grad.data();
                  if (t.needs_id(ai))
                    detail::mm_acc(g, t.nodes_[bi].val.data(), t.nodes_[ai].grad.data(), m, p, n);
                  if (t.needs_id(bi))
                    detail::mm_tn_acc(g, t.nodes_[ai].val.data(), t.nodes_[bi].grad.data(), m, p, n);
                });
  }

  Var<S> transpose(Var<S> a) {
    const std::size_t m = a.rows(), n = a.cols();
    std::vector<S> out(m * n);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) out[j * m + i] = val(a)[i * n + j];
    return push({n, m}, std::move(out), needs(a),
                [ai = a.id, m, n, this](Tape& t) {
                  if (!t.needs_id(ai)) return;
                  const auto& g = t.nodes_[cur_].grad;
                  auto& ga = t.nodes_[ai].grad;
                  for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
                });
  }

  // ---- activations ----

  Var<S> tanh_(Var<S> a) {
    std::vector<S> out(val(a).size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(val(a)[i]);
    return push(nodes_[a.id].shape, std::move(out), needs(a),
                [ai = a.id, this](Tape& t) {
                  const auto& g = t.nodes_[cur_].grad;
                  const auto& y = t.nodes_[cur_].val;
                  t.acc(ai, [&](std::size_t i) { return g[i] * (S(1) - y[i] * y[i]); });
                });
  }

  Var<S> relu_(Var<S> a) {
    std::vector<S> out(val(a).size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(val(a)[i], S(0));
    return push(nodes_[a.id].shape, std::move(out), needs(a),
                [ai = a.id, this](Tape& t) {
                  const auto& g = t.nodes_[cur_].grad;
                  const auto& x = t.nodes_[ai].val;
                  t.acc(ai, [&](std::size_t i) { return x[i] > S(0) ? g[i] : S(0); });
                });
  }

  // tanh-approximation GELU.
  Var<S> gelu_(Var<S> a) {
    static constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
    static constexpr double kA = 0.044715;
    std::vector<S> out(val(a).size());
    for (std::size_t i = 0; i < out.size(); ++i) {
      const double x = static_cast<double>(val(a)[i]);
      out[i] = static_cast<S>(0.5 * x * (1.0 + std::tanh(kC * (x + kA * x * x * x))));
    }
    return push(nodes_[a.id].shape, std::move(out), needs(a),
                [ai = a.id, this](Tape& t) {
                  const auto& g = t.nodes_[cur_].grad;
                  const auto& xs = t.nodes_[ai].val;
                  t.acc(ai, [&](std::size_t i) {
                    const double x = static_cast<double>(xs[i]);
                    const double u = kC * (x + kA * x * x * x);
                    const double th = std::tanh(u);
                    const double d =
                        0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * kC * (1.0 + 3.0 * kA * x * x);
                    return static_cast<S>(static_cast<double>(g[i]) * d);
                  });
                });
  }

  // ---- softmax / losses ----

  // Row-wise tempered softmax. Columns with key_mask[j] == 0 are excluded
  // (treated as -inf) and get exactly 0.
  Var<S> softmax_rows(Var<S> z, double temp,
                      const std::vector<std::uint8_t>* key_mask = nullptr) {
    if (!(temp > 0.0)) throw ParameterError("softmax temperature must be > 0");
    const std::size_t m = z.rows(), n = z.cols();
    if (key_mask && key_mask->size() != n)
      throw DimensionError("softmax_rows: mask length " + std::to_string(key_mask->size()) +
                           " vs " + std::to_string(n) + " columns");
    std::vector<S> out(m * n, S(0));
    std::vector<std::uint8_t> mask = key_mask ? *key_mask : std::vector<std::uint8_t>(n, 1);
    for (std::size_t i = 0; i < m; ++i) {
      const S* zi = val(z).data() + i * n;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < n; ++j) {
        if (!mask[j]) continue;
        const double v = static_cast<double>(zi[j]);
        if (std::isnan(v)) throw NumericError("softmax_rows: NaN input");
        mx = std::max(mx, v);
      }
      double sum = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        if (!mask[j]) continue;
        const double e = std::exp((static_cast<double>(zi[j]) - mx) / temp);
        out[i * n + j] = static_cast<S>(e);
        sum += e;
      }
      for (std::size_t j = 0; j < n; ++j)
        if (mask[j]) out[i * n + j] = static_cast<S>(static_cast<double>(out[i * n + j]) / sum);
    }
    return push(nodes_[z.id].shape, std::move(out), needs(z),
                [zi = z.id, m, n, temp, mask = std::move(mask), this](Tape& t) {
                  if (!t.needs_id(zi)) return;
                  const auto& g = t.nodes_[cur_].grad;
                  const auto& p = t.nodes_[cur_].val;
                  auto& gz = t.nodes_[zi].grad;
                  for (std::size_t i = 0; i < m; ++i) {
                    double dot = 0.0;
                    for (std::size_t j = 0; j < n; ++j)
                      if (mask[j]) dot += static_cast<double>(g[i * n + j]) * p[i * n + j];
                    for (std::size_t j = 0; j < n; ++j)
                      if (mask[j])
                        gz[i * n + j] += static_cast<S>(
                            static_cast<double>(p[i * n + j]) *
                            (static_cast<double>(g[i * n + j]) - dot) / temp);
                  }
                });
  }

  // -sum_c target_c log(max(pred_c, floor)); target is a fixed distribution.
  Var<S> cross_entropy(const std::vector<S>& target, Var<S> pred) {
    const std::size_t c = val(pred).size();
    if (target.size() != c)
      throw DimensionError("cross_entropy: target length " + std::to_string(target.size()) +
                           " vs pred length " + std::to_string(c));
    check_distribution(target, "cross_entropy target");
    check_distribution(val(pred), "cross_entropy pred");
    double loss = 0.0;
    for (std::size_t i = 0; i < c; ++i) {
      if (target[i] == S(0)) continue;
      loss -= static_cast<double>(target[i]) *
              std::log(std::max(static_cast<double>(val(pred)[i]), kProbFloor));
    }
    return push({1}, {static_cast<S>(loss)}, needs(pred),
                [pi = pred.id, target, this](Tape& t) {
                  if (!t.needs_id(pi)) return;
                  const S g = t.nodes_[cur_].grad[0];
                  const auto& p = t.nodes_[pi].val;
                  auto& gp = t.nodes_[pi].grad;
                  for (std::size_t i = 0; i < target.size(); ++i) {
                    const double pv = static_cast<double>(p[i]);
                    if (target[i] != S(0) && pv > kProbFloor)
                      gp[i] -= static_cast<S>(static_cast<double>(g) *
                                              static_cast<double>(target[i]) / pv);
                  }
                });
  }

  Var<S> mse(Var<S> a, Var<S> b) {
    check_same_shape(a, b, "mse");
    const std::size_t n = val(a).size();
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double d = static_cast<double>(val(a)[i]) - static_cast<double>(val(b)[i]);
      acc += d * d;
    }
    return push({1}, {static_cast<S>(acc / static_cast<double>(n))}, needs(a) || needs(b),
                [ai = a.id, bi = b.id, n, this](Tape& t) {
                  const double g = static_cast<double>(t.nodes_[cur_].grad[0]);
                  const auto& av = t.nodes_[ai].val;
                  const auto& bv = t.nodes_[bi].val;
                  const double c = 2.0 * g / static_cast<double>(n);
                  t.acc(ai, [&](std::size_t i) {
                    return static_cast<S>(c * (static_cast<double>(av[i]) - bv[i]));
                  });
                  t.acc(bi, [&](std::size_t i) {
                    return static_cast<S>(-c * (static_cast<double>(av[i]) - bv[i]));
                  });
                });
  }

  // MSE over unmasked rows only, normalized by (unmasked rows × cols).
  Var<S> mse_masked(Var<S> a, Var<S> b, const std::vector<std::uint8_t>& row_mask) {
    check_same_shape(a, b, "mse_masked");
    const std::size_t m = a.rows(), n = a.cols();
    if (row_mask.size() != m)
      throw DimensionError("mse_masked: mask length vs rows");
    std::size_t live = 0;
    for (auto u : row_mask) live += u ? 1 : 0;
    if (live == 0) throw InputError("mse_masked: all rows masked");
    double acc = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      if (!row_mask[i]) continue;
      for (std::size_t j = 0; j < n; ++j) {
        const double d =
            static_cast<double>(val(a)[i * n + j]) - static_cast<double>(val(b)[i * n + j]);
        acc += d * d;
      }
    }
    const double denom = static_cast<double>(live * n);
    return push({1}, {static_cast<S>(acc / denom)}, needs(a) || needs(b),
                [ai = a.id, bi = b.id, m, n, denom, row_mask, this](Tape& t) {
                  const double g = static_cast<double>(t.nodes_[cur_].grad[0]);
                  const double c = 2.0 * g / denom;
                  const auto& av = t.nodes_[ai].val;
                  const auto& bv = t.nodes_[bi].val;
                  auto maskval = [&](std::size_t i) {
                    return row_mask[i / n] ? c * (static_cast<double>(av[i]) - bv[i]) : 0.0;
                  };
                  t.acc(ai, [&](std::size_t i) { return static_cast<S>(maskval(i)); });
                  t.acc(bi, [&](std::size_t i) { return static_cast<S>(-maskval(i)); });
                });
  }

  // ---- normalization ----

  Var<S> layer_norm(Var<S> x, Var<S> gain, Var<S> bias) {
    const std::size_t m = x.rows(), d = x.cols();
    if (val(gain).size() != d || val(bias).size() != d)
      throw DimensionError("layer_norm: gain/bias length vs " + std::to_string(d));
    std::vector<S> out(m * d);
    std::vector<double> xhat(m * d), inv_std(m);
    for (std::size_t i = 0; i < m; ++i) {
      const S* xi = val(x).data() + i * d;
      double mean = 0.0;
      for (std::size_t j = 0; j < d; ++j) mean += xi[j];
      mean /= static_cast<double>(d);
      double var = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double c = static_cast<double>(xi[j]) - mean;
        var += c * c;
      }
      var /= static_cast<double>(d);
      const double is = 1.0 / std::sqrt(var + kLayerNormEps);
      inv_std[i] = is;
      for (std::size_t j = 0; j < d; ++j) {
        const double xh = (static_cast<double>(xi[j]) - mean) * is;
        xhat[i * d + j] = xh;
        out[i * d + j] = static_cast<S>(xh * val(gain)[j] + val(bias)[j]);
      }
    }
    return push(nodes_[x.id].shape, std::move(out), needs(x) || needs(gain) || needs(bias),
                [xi = x.id, gi = gain.id, bi = bias.id, m, d, xhat = std::move(xhat),
                 inv_std = std::move(inv_std), this](Tape& t) {
                  const auto& g = t.nodes_[cur_].grad;
                  const auto& gainv = t.nodes_[gi].val;
                  if (t.needs_id(gi)) {
                    auto& gg = t.nodes_[gi].grad;
                    for (std::size_t i = 0; i < m; ++i)
                      for (std::size_t j = 0; j < d; ++j)
                        gg[j] += static_cast<S>(static_cast<double>(g[i * d + j]) * xhat[i * d + j]);
                  }
                  if (t.needs_id(bi)) {
                    auto& gb = t.nodes_[bi].grad;
                    for (std::size_t i = 0; i < m; ++i)
                      for (std::size_t j = 0; j < d; ++j) gb[j] += g[i * d + j];
                  }
                  if (t.needs_id(xi)) {
                    auto& gx = t.nodes_[xi].grad;
                    for (std::size_t i = 0; i < m; ++i) {
                      double mean_dxh = 0.0, mean_dxh_xh = 0.0;
                      for (std::size_t j = 0; j < d; ++j) {
                        const double dxh =
                            static_cast<double>(g[i * d + j]) * static_cast<double>(gainv[j]);
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xhat[i * d + j];
                      }
                      mean_dxh /= static_cast<double>(d);
                      mean_dxh_xh /= static_cast<double>(d);
                      for (std::size_t j = 0; j < d; ++j) {
                        const double dxh =
                            static_cast<double>(g[i * d + j]) * static_cast<double>(gainv[j]);
                        gx[i * d + j] += static_cast<S>(
                            inv_std[i] * (dxh - mean_dxh - xhat[i * d + j] * mean_dxh_xh));
                      }
                    }
                  }
                });
  }

  // ---- indexing ----

  Var<S> gather_rows(Var<S> table, const std::vector<std::size_t>& ids) {
    const std::size_t v = table.rows(), d = table.cols();
    for (std::size_t id : ids)
      if (id >= v) throw InputError("gather_rows: id " + std::to_string(id) + " >= " + std::to_string(v));
    std::vector<S> out(ids.size() * d);
    for (std::size_t i = 0; i < ids.size(); ++i)
      std::copy_n(val(table).data() + ids[i] * d, d, out.data() + i * d);
    return push({ids.size(), d}, std::move(out), needs(table),
                [ti = table.id, ids, d, this](Tape& t) {
                  if (!t.needs_id(ti)) return;
                  const auto& g = t.nodes_[cur_].grad;
                  auto& gt = t.nodes_[ti].grad;
                  for (std::size_t i = 0; i < ids.size(); ++i)
                    for (std::size_t j = 0; j < d; ++j) gt[ids[i] * d + j] += g[i * d + j];
                });
  }

  Var<S> slice_cols(Var<S> x, std::size_t c0, std::size_t w) {
    const std::size_t m = x.rows(), n = x.cols();
    if (c0 + w > n) throw DimensionError("slice_cols: range out of bounds");
    std::vector<S> out(m * w);
    for (std::size_t i = 0; i < m; ++i)
      std::copy_n(val(x).data() + i * n + c0, w, out.data() + i * w);
    return push({m, w}, std::move(out), needs(x),
                [xi = x.id, c0, w, m, n, this](Tape& t) {
                  if (!t.needs_id(xi)) return;
                  const auto& g = t.nodes_[cur_].grad;
                  auto& gx = t.nodes_[xi].grad;
                  for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < w; ++j) gx[i * n + c0 + j] += g[i * w + j];
                });
  }

  Var<S> slice_rows(Var<S> x, std::size_t r0, std::size_t h) {
    const std::size_t m = x.rows(), n = x.cols();
    if (r0 + h > m) throw DimensionError("slice_rows: range out of bounds");
    std::vector<S> out(val(x).begin() + r0 * n, val(x).begin() + (r0 + h) * n);
    return push({h, n}, std::move(out), needs(x),
                [xi = x.id, r0, n, h, this](Tape& t) {
                  if (!t.needs_id(xi)) return;
                  const auto& g = t.nodes_[cur_].grad;
                  auto& gx = t.nodes_[xi].grad;
                  for (std::size_t i = 0; i < h * n; ++i) gx[r0 * n + i] += g[i];
                });
  }

  Var<S> concat_cols(const std::vector<Var<S>>& parts) {
    if (parts.empty()) throw ContractError("concat_cols: empty input");
    const std::size_t m = parts[0].rows();
    std::size_t n = 0;
    bool ng = false;
    for (auto p : parts) {
      if (p.rows() != m) throw DimensionError("concat_cols: row count mismatch");
      n += p.cols();
      ng = ng || needs(p);
    }
    std::vector<S> out(m * n);
    std::size_t off = 0;
    std::vector<std::size_t> pids, pcols;
    for (auto p : parts) {
      const std::size_t w = p.cols();
      for (std::size_t i = 0; i < m; ++i)
        std::copy_n(val(p).data() + i * w, w, out.data() + i * n + off);
      pids.push_back(p.id);
      pcols.push_back(w);
      off += w;
    }
    return push({m, n}, std::move(out), ng,
                [pids = std::move(pids), pcols = std::move(pcols), m, n, this](Tape& t) {
                  const auto& g = t.nodes_[cur_].grad;
                  std::size_t off = 0;
                  for (std::size_t k = 0; k < pids.size(); ++k) {
                    const std::size_t w = pcols[k];
                    if (t.needs_id(pids[k])) {
                      auto& gp = t.nodes_[pids[k]].grad;
                      for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < w; ++j) gp[i * w + j] += g[i * n + off + j];
                    }
                    off += w;
                  }
                });
  }

  // ---- reductions / pooling helpers ----

  Var<S> sum_all(Var<S> x) {
    double acc = 0.0;
    for (S v : val(x)) acc += static_cast<double>(v);
    return push({1}, {static_cast<S>(acc)}, needs(x),
                [xi = x.id, this](Tape& t) {
                  const S g = t.nodes_[cur_].grad[0];
                  t.acc(xi, [&](std::size_t) { return g; });
                });
  }

  Var<S> add_scalars(const std::vector<Var<S>>& xs) {
    if (xs.empty()) throw ContractError("add_scalars: empty input");
    double acc = 0.0;
    bool ng = false;
    std::vector<std::size_t> ids;
    for (auto x : xs) {
      if (val(x).size() != 1) throw ContractError("add_scalars: non-scalar input");
      acc += static_cast<double>(val(x)[0]);
      ng = ng || needs(x);
      ids.push_back(x.id);
    }
    return push({1}, {static_cast<S>(acc)}, ng,
                [ids = std::move(ids), this](Tape& t) {
                  const S g = t.nodes_[cur_].grad[0];
                  for (std::size_t id : ids)
                    if (t.needs_id(id)) t.nodes_[id].grad[0] += g;
                });
  }

  // sum_k w_k * x_k over scalar vars; weights are constants.
  Var<S> weighted_sum(const std::vector<Var<S>>& xs, const std::vector<double>& w) {
    if (xs.empty()) throw ContractError("weighted_sum: empty input");
    if (xs.size() != w.size()) throw DimensionError("weighted_sum: weights length mismatch");
    double acc = 0.0;
    bool ng = false;
    std::vector<std::size_t> ids;
    for (std::size_t k = 0; k < xs.size(); ++k) {
      if (val(xs[k]).size() != 1) throw ContractError("weighted_sum: non-scalar input");
      acc += w[k] * static_cast<double>(val(xs[k])[0]);
      ng = ng || needs(xs[k]);
      ids.push_back(xs[k].id);
    }
    return push({1}, {static_cast<S>(acc)}, ng,
                [ids = std::move(ids), w, this](Tape& t) {
                  const double g = static_cast<double>(t.nodes_[cur_].grad[0]);
                  for (std::size_t k = 0; k < ids.size(); ++k)
                    if (t.needs_id(ids[k]))
                      t.nodes_[ids[k]].grad[0] += static_cast<S>(g * w[k]);
                });
  }

  Var<S> mean_rows_masked(Var<S> x, const std::vector<std::uint8_t>& mask) {
    const std::size_t m = x.rows(), n = x.cols();
    if (mask.size() != m) throw DimensionError("mean_rows_masked: mask length vs rows");
    std::size_t live = 0;
    for (auto u : mask) live += u ? 1 : 0;
    if (live == 0) throw InputError("mean_rows_masked: all rows masked");
    std::vector<S> out(n, S(0));
    for (std::size_t i = 0; i < m; ++i)
      if (mask[i])
        for (std::size_t j = 0; j < n; ++j) out[j] += val(x)[i * n + j];
    for (std::size_t j = 0; j < n; ++j) out[j] = static_cast<S>(out[j] / static_cast<S>(live));
    return push({1, n}, std::move(out), needs(x),
                [xi = x.id, mask, m, n, live, this](Tape& t) {
                  if (!t.needs_id(xi)) return;
                  const auto& g = t.nodes_[cur_].grad;
                  auto& gx = t.nodes_[xi].grad;
                  for (std::size_t i = 0; i < m; ++i)
                    if (mask[i])
                      for (std::size_t j = 0; j < n; ++j)
                        gx[i * n + j] += static_cast<S>(g[j] / static_cast<S>(live));
                });
  }

  Var<S> max_rows_masked(Var<S> x, const std::vector<std::uint8_t>& mask) {
    const std::size_t m = x.rows(), n = x.cols();
    if (mask.size() != m) throw DimensionError("max_rows_masked: mask length vs rows");
    std::vector<std::size_t> argmax(n, m);
    std::vector<S> out(n);
    bool any = false;
    for (std::size_t i = 0; i < m; ++i) {
      if (!mask[i]) continue;
      any = true;
      for (std::size_t j = 0; j < n; ++j) {
        if (argmax[j] == m || val(x)[i * n + j] > out[j]) {
          out[j] = val(x)[i * n + j];
          argmax[j] = i;
        }
      }
    }
    if (!any) throw InputError("max_rows_masked: all rows masked");
    return push({1, n}, std::move(out), needs(x),
                [xi = x.id, argmax = std::move(argmax), n, this](Tape& t) {
                  if (!t.needs_id(xi)) return;
                  const auto& g = t.nodes_[cur_].grad;
                  auto& gx = t.nodes_[xi].grad;
                  for (std::size_t j = 0; j < n; ++j) gx[argmax[j] * n + j] += g[j];
                });
  }

  // Inverted dropout; identity when rate == 0.
  Var<S> dropout(Var<S> x, double rate, Rng& rng) {
    if (rate < 0.0 || rate >= 1.0) throw ParameterError("dropout rate must be in [0,1)");
    if (rate == 0.0) return x;
    const std::size_t n = val(x).size();
    std::vector<S> keep(n);
    const double scale = 1.0 / (1.0 - rate);
    for (std::size_t i = 0; i < n; ++i)
      keep[i] = rng.uniform() < rate ? S(0) : static_cast<S>(scale);
    std::vector<S> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = val(x)[i] * keep[i];
    return push(nodes_[x.id].shape, std::move(out), needs(x),
                [xi = x.id, keep = std::move(keep), this](Tape& t) {
                  const auto& g = t.nodes_[cur_].grad;
                  t.acc(xi, [&](std::size_t i) { return g[i] * keep[i]; });
                });
  }

  // ---- backward ----

  void backward(Var<S> loss) {
    if (loss.tape != this) throw ContractError("backward: loss from a different tape");
    if (nodes_[loss.id].val.size() != 1)
      throw ContractError("backward: loss is not a scalar");
    for (auto& nd : nodes_)
      if (nd.needs_grad && nd.grad.empty()) nd.grad.assign(nd.val.size(), S(0));
    if (!nodes_[loss.id].needs_grad) {
      nodes_[loss.id].grad.assign(1, S(1));
    } else {
      nodes_[loss.id].grad[0] = S(1);
    }
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      cur_ = i;
      if (nodes_[i].needs_grad && nodes_[i].back) nodes_[i].back(*this);
    }
    for (auto& b : bindings_) {
      auto& t = *b.tensor;
      const auto& g = nodes_[b.id].grad;
      for (std::size_t i = 0; i < g.size(); ++i) t.grad[i] += g[i];
      t.node_id = -1;
    }
  }

  const std::vector<S>& val(Var<S> v) const { return nodes_[v.id].val; }
  const std::vector<S>& grad(Var<S> v) const { return nodes_[v.id].grad; }

 private:
  friend struct Var<S>;

  struct Binding {
    std::size_t id;
    TensorT<S>* tensor;
  };

  bool needs(Var<S> v) const { return nodes_[v.id].needs_grad; }
  bool needs_id(std::size_t id) const { return nodes_[id].needs_grad; }

  template <typename F>
  void acc(std::size_t id, F f) {
    if (!needs_id(id)) return;
    auto& g = nodes_[id].grad;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += f(i);
  }

  void check_same_shape(Var<S> a, Var<S> b, const char* op) const {
    if (nodes_[a.id].shape != nodes_[b.id].shape)
      throw DimensionError(std::string(op) + ": shape mismatch " +
                           shape_str(nodes_[a.id].shape) + " vs " + shape_str(nodes_[b.id].shape));
  }

  static void check_distribution(const std::vector<S>& p, const char* what) {
    double sum = 0.0;
    for (S v : p) {
      if (std::isnan(static_cast<double>(v))) throw NumericError(std::string(what) + ": NaN entry");
      if (v < S(0)) throw ParameterError(std::string(what) + ": negative entry");
      sum += static_cast<double>(v);
    }
    if (std::abs(sum - 1.0) > 1e-4)
      throw ParameterError(std::string(what) + ": entries sum to " + std::to_string(sum));
  }

  Var<S> push(std::vector<std::size_t> shape, std::vector<S> vals, bool needs_grad,
              std::function<void(Tape&)> back) {
    Node nd;
    nd.shape = std::move(shape);
    nd.val = std::move(vals);
    nd.needs_grad = needs_grad;
    if (needs_grad) {
      nd.grad.assign(nd.val.size(), S(0));
      nd.back = std::move(back);
    }
    nodes_.push_back(std::move(nd));
    return Var<S>{this, nodes_.size() - 1};
  }

  // deque keeps node references stable while the tape grows
  std::deque<Node> nodes_;
  std::vector<Binding> bindings_;
  std::unordered_map<const void*, std::size_t> param_cache_;
  std::size_t cur_ = 0;
};

template <typename S>
const std::vector<std::size_t>& Var<S>::shape() const {
  return tape->node(id).shape;
}

template <typename S>
const std::vector<S>& Var<S>::val() const {
  return tape->node(id).val;
}

}  // namespace mtkd
