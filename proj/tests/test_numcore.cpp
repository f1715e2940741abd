#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "mtkd/adam.hpp"
#include "mtkd/errors.hpp"
#include "mtkd/gradcheck.hpp"
#include "mtkd/rng.hpp"
#include "mtkd/tape.hpp"
#include "mtkd/tensor.hpp"
#include "test_util.hpp"

using namespace mtkd;
using testutil::Tape64;
using testutil::Var64;
using testutil::check_grad;
using testutil::random_tensor;

TEST_CASE("matmul basics") {
  Tape64 t;
  auto id2 = t.constant({2, 2}, {1, 0, 0, 1});
  auto b = t.constant({2, 2}, {3, 4, 5, 6});
  auto c = t.matmul(id2, b);
  CHECK(t.val(c) == std::vector<double>{3, 4, 5, 6});

  auto x = t.constant({1, 1}, {2});
  auto y = t.constant({1, 1}, {3});
  CHECK(t.val(t.matmul(x, y))[0] == doctest::Approx(6));

  CHECK_THROWS_AS(t.matmul(id2, t.constant({3, 2}, {0, 0, 0, 0, 0, 0})), DimensionError);
}

TEST_CASE("matmul against triple-loop oracle") {
  Rng rng(11);
  auto a = random_tensor({3, 4}, rng);
  auto b = random_tensor({4, 2}, rng);
  Tape64 t;
  auto c = t.matmul(t.constant(a), t.constant(b));
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 2; ++j) {
      double acc = 0;
      for (std::size_t k = 0; k < 4; ++k) acc += a.values[i * 4 + k] * b.values[k * 2 + j];
      CHECK(t.val(c)[i * 2 + j] == doctest::Approx(acc).epsilon(1e-12));
    }
}

TEST_CASE("softmax_rows examples") {
  Tape64 t;
  auto z = t.constant({1, 2}, {0, 0});
  auto p = t.softmax_rows(z, 3.7);
  CHECK(t.val(p)[0] == doctest::Approx(0.5));
  CHECK(t.val(p)[1] == doctest::Approx(0.5));

  auto z2 = t.constant({1, 2}, {std::log(2.0), 0.0});
  auto p2 = t.softmax_rows(z2, 1.0);
  CHECK(t.val(p2)[0] == doctest::Approx(2.0 / 3.0));
  CHECK(t.val(p2)[1] == doctest::Approx(1.0 / 3.0));

  auto z3 = t.constant({1, 2}, {2.0, 0.0});
  auto p3 = t.softmax_rows(z3, 2.0);
  const double e = std::exp(1.0);
  CHECK(t.val(p3)[0] == doctest::Approx(e / (e + 1.0)));
  CHECK(t.val(p3)[1] == doctest::Approx(1.0 / (e + 1.0)));

  CHECK_THROWS_AS(t.softmax_rows(z, 0.0), ParameterError);
  CHECK_THROWS_AS(t.softmax_rows(z, -1.0), ParameterError);
  auto bad = t.constant({1, 2}, {std::nan(""), 0.0});
  CHECK_THROWS_AS(t.softmax_rows(bad, 1.0), NumericError);
}

TEST_CASE("softmax_rows properties: rows sum to 1, argmax invariant under t") {
  Rng rng(5);
  for (int rep = 0; rep < 20; ++rep) {
    auto z = random_tensor({3, 7}, rng, 2.0);
    Tape64 t;
    auto zc = t.constant(z);
    std::size_t ref_argmax[3];
    for (std::size_t i = 0; i < 3; ++i) {
      ref_argmax[i] = 0;
      for (std::size_t j = 1; j < 7; ++j)
        if (z.values[i * 7 + j] > z.values[i * 7 + ref_argmax[i]]) ref_argmax[i] = j;
    }
    for (double temp : {0.3, 1.0, 4.0}) {
      auto p = t.softmax_rows(zc, temp);
      for (std::size_t i = 0; i < 3; ++i) {
        double sum = 0;
        std::size_t am = 0;
        for (std::size_t j = 0; j < 7; ++j) {
          const double v = t.val(p)[i * 7 + j];
          CHECK(v > 0.0);
          CHECK(v < 1.0);
          sum += v;
          if (v > t.val(p)[i * 7 + am]) am = j;
        }
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
        CHECK(am == ref_argmax[i]);
      }
    }
  }
}

TEST_CASE("masked softmax gives exact zeros on masked keys") {
  Tape64 t;
  auto z = t.constant({2, 4}, {1, 2, 3, 4, -1, 0, 1, 2});
  std::vector<std::uint8_t> mask{1, 0, 1, 0};
  auto p = t.softmax_rows(z, 1.0, &mask);
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(t.val(p)[i * 4 + 1] == 0.0);
    CHECK(t.val(p)[i * 4 + 3] == 0.0);
    CHECK(t.val(p)[i * 4 + 0] + t.val(p)[i * 4 + 2] == doctest::Approx(1.0));
  }
}

TEST_CASE("cross_entropy examples") {
  Tape64 t;
  auto perfect = t.constant({2}, {1, 0});
  CHECK(t.val(t.cross_entropy({1, 0}, perfect))[0] == doctest::Approx(0.0));

  auto uniform = t.constant({2}, {0.5, 0.5});
  CHECK(t.val(t.cross_entropy({1, 0}, uniform))[0] == doctest::Approx(std::log(2.0)));
  CHECK(t.val(t.cross_entropy({0.5, 0.5}, uniform))[0] == doctest::Approx(std::log(2.0)));

  CHECK_THROWS_AS(t.cross_entropy({1, 0, 0}, uniform), DimensionError);
}

TEST_CASE("cross_entropy nonnegative for one-hot targets") {
  Rng rng(7);
  for (int rep = 0; rep < 30; ++rep) {
    auto z = random_tensor({1, 5}, rng, 3.0);
    Tape64 t;
    auto p = t.softmax_rows(t.constant(z), 1.0);
    std::vector<double> onehot(5, 0.0);
    const std::size_t gold = rep % 5;
    onehot[gold] = 1.0;
    const double ce = t.val(t.cross_entropy(onehot, p))[0];
    CHECK(ce >= 0.0);
    CHECK(ce == doctest::Approx(-std::log(t.val(p)[gold])));
  }
}

TEST_CASE("mse examples and symmetry") {
  Tape64 t;
  auto a = t.constant({1, 1}, {1});
  auto b = t.constant({1, 1}, {3});
  CHECK(t.val(t.mse(a, a))[0] == 0.0);
  CHECK(t.val(t.mse(a, b))[0] == doctest::Approx(4.0));
  CHECK_THROWS_AS(t.mse(a, t.constant({1, 2}, {0, 0})), DimensionError);

  Rng rng(3);
  auto x = random_tensor({2, 3}, rng);
  auto y = random_tensor({2, 3}, rng);
  Tape64 t2;
  auto xv = t2.constant(x), yv = t2.constant(y);
  double oracle = 0;
  for (std::size_t i = 0; i < 6; ++i) {
    const double d = x.values[i] - y.values[i];
    oracle += d * d;
  }
  oracle /= 6.0;
  CHECK(t2.val(t2.mse(xv, yv))[0] == doctest::Approx(oracle).epsilon(1e-12));
  CHECK(t2.val(t2.mse(xv, yv))[0] == t2.val(t2.mse(yv, xv))[0]);
}

TEST_CASE("layer_norm examples") {
  Tape64 t;
  auto gain = t.constant({4}, {1, 1, 1, 1});
  auto bias = t.constant({4}, {0, 0, 0, 0});
  auto constant_row = t.constant({1, 4}, {5, 5, 5, 5});
  auto y = t.layer_norm(constant_row, gain, bias);
  for (double v : t.val(y)) CHECK(v == doctest::Approx(0.0));

  auto g2 = t.constant({2}, {1, 1});
  auto b2 = t.constant({2}, {0, 0});
  auto row = t.constant({1, 2}, {1, -1});
  auto y2 = t.layer_norm(row, g2, b2);
  CHECK(t.val(y2)[0] == doctest::Approx(1.0).epsilon(1e-4));
  CHECK(t.val(y2)[1] == doctest::Approx(-1.0).epsilon(1e-4));
}

TEST_CASE("layer_norm against scalar reference") {
  Rng rng(9);
  auto x = random_tensor({4, 8}, rng);
  auto gain = random_tensor({8}, rng);
  auto bias = random_tensor({8}, rng);
  Tape64 t;
  auto y = t.layer_norm(t.constant(x), t.constant(gain), t.constant(bias));
  for (std::size_t i = 0; i < 4; ++i) {
    double mean = 0;
    for (std::size_t j = 0; j < 8; ++j) mean += x.values[i * 8 + j];
    mean /= 8;
    double var = 0;
    for (std::size_t j = 0; j < 8; ++j) {
      const double c = x.values[i * 8 + j] - mean;
      var += c * c;
    }
    var /= 8;
    for (std::size_t j = 0; j < 8; ++j) {
      const double ref =
          (x.values[i * 8 + j] - mean) / std::sqrt(var + 1e-5) * gain.values[j] + bias.values[j];
      CHECK(t.val(y)[i * 8 + j] == doctest::Approx(ref).epsilon(1e-10));
    }
  }
}

TEST_CASE("backward basics") {
  Tensor64 x = Tensor64::zeros({2, 3});
  for (std::size_t i = 0; i < 6; ++i) x.values[i] = 0.3 * static_cast<double>(i) - 1.0;
  x.set_requires_grad(true);
  Tape64 t;
  auto xv = t.param(x);
  auto loss = t.sum_all(xv);
  t.backward(loss);
  for (double g : x.grad) CHECK(g == doctest::Approx(1.0));

  Tensor64 x2({1}, {2.0});
  x2.set_requires_grad(true);
  Tape64 t2;
  auto v = t2.param(x2);
  auto zero = t2.constant({1}, {0.0});
  t2.backward(t2.mse(v, zero));
  CHECK(x2.grad[0] == doctest::Approx(4.0));

  // non-scalar loss rejected
  Tape64 t3;
  auto m = t3.constant({2, 2}, {1, 2, 3, 4});
  CHECK_THROWS_AS(t3.backward(m), ContractError);
}

TEST_CASE("backward accumulates over shared inputs") {
  Tensor64 x({2}, {1.5, -0.5});
  x.set_requires_grad(true);
  Tape64 t;
  auto xv = t.param(x);
  auto a = t.scale(xv, 2.0);
  auto b = t.scale(xv, 3.0);
  t.backward(t.sum_all(t.add(a, b)));
  CHECK(x.grad[0] == doctest::Approx(5.0));
  CHECK(x.grad[1] == doctest::Approx(5.0));
}

TEST_CASE("tensor without requires_grad never receives a grad") {
  Tensor64 x({2}, {1.0, 2.0});
  Tape64 t;
  auto xv = t.param(x);
  t.backward(t.sum_all(xv));
  CHECK(x.grad.empty());
}

TEST_CASE("adam: zero gradient leaves parameters unchanged") {
  Tensor64 p({3}, {1.0, -2.0, 0.5});
  p.set_requires_grad(true);
  AdamOpt<double> opt({&p}, {});
  p.zero_grad();
  opt.step();
  CHECK(p.values[0] == doctest::Approx(1.0));
  CHECK(p.values[1] == doctest::Approx(-2.0));
  CHECK(p.values[2] == doctest::Approx(0.5));
}

TEST_CASE("adam: bias-corrected first step moves by about lr") {
  Tensor64 p({1}, {0.0});
  p.set_requires_grad(true);
  p.grad[0] = 1.0;
  AdamOpt<double> opt({&p}, {.lr = 0.1});
  opt.step();
  CHECK(p.values[0] == doctest::Approx(-0.1).epsilon(1e-6));
}

TEST_CASE("adam: 3-step trajectory matches a scalar reference") {
  // minimize f(x) = (x - 3)^2 from x = 0
  Tensor64 p({1}, {0.0});
  p.set_requires_grad(true);
  AdamConfig cfg{.lr = 0.05};
  AdamOpt<double> opt({&p}, cfg);

  double rx = 0.0, m = 0.0, v = 0.0;
  for (int step = 1; step <= 3; ++step) {
    p.zero_grad();
    p.grad[0] = 2.0 * (p.values[0] - 3.0);
    opt.step();

    const double g = 2.0 * (rx - 3.0);
    m = cfg.beta1 * m + (1 - cfg.beta1) * g;
    v = cfg.beta2 * v + (1 - cfg.beta2) * g * g;
    const double mhat = m / (1 - std::pow(cfg.beta1, step));
    const double vhat = v / (1 - std::pow(cfg.beta2, step));
    rx -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.epsilon);
    CHECK(p.values[0] == doctest::Approx(rx).epsilon(1e-12));
  }
}

TEST_CASE("adam: missing grads rejected") {
  Tensor64 p({2}, {0.0, 0.0});
  AdamOpt<double> opt({&p}, {});
  CHECK_THROWS_AS(opt.step(), ContractError);
}

TEST_CASE("finite_diff_grad examples") {
  auto sum = [](const std::vector<double>& v) {
    double s = 0;
    for (double x : v) s += x;
    return s;
  };
  auto g = finite_diff_grad(sum, {0.2, -1.0, 3.0});
  for (double v : g) CHECK(v == doctest::Approx(1.0).epsilon(1e-9));

  auto sq = [](const std::vector<double>& v) { return v[0] * v[0]; };
  CHECK(finite_diff_grad(sq, {3.0}, 1e-4)[0] == doctest::Approx(6.0).epsilon(1e-7));
}

TEST_CASE("finite differences of CE(onehot, softmax(x)) match p - y") {
  Rng rng(21);
  auto z = random_tensor({1, 4}, rng, 2.0);
  const std::size_t gold = 2;
  auto f = [&](const std::vector<double>& v) {
    Tape64 t;
    auto p = t.softmax_rows(t.constant({1, 4}, v), 1.0);
    std::vector<double> onehot(4, 0.0);
    onehot[gold] = 1.0;
    return t.val(t.cross_entropy(onehot, p))[0];
  };
  auto numeric = finite_diff_grad(f, z.values);
  Tape64 t;
  auto p = t.softmax_rows(t.constant(z), 1.0);
  for (std::size_t j = 0; j < 4; ++j) {
    const double analytic = t.val(p)[j] - (j == gold ? 1.0 : 0.0);
    CHECK(numeric[j] == doctest::Approx(analytic).epsilon(1e-6));
  }
}

TEST_CASE("gradient check: every differentiable op") {
  Rng rng(42);
  auto mk = [&](std::vector<std::size_t> sh, double scale = 1.0) {
    return random_tensor(std::move(sh), rng, scale);
  };

  SUBCASE("matmul") {
    auto b = mk({4, 3});
    CHECK(check_grad([&](Tape64& t, Var64 x) {
            return t.sum_all(t.tanh_(t.matmul(x, t.constant(b))));
          }, mk({2, 4})) < 1e-5);
  }
  SUBCASE("matmul_nt") {
    auto b = mk({3, 4});
    CHECK(check_grad([&](Tape64& t, Var64 x) {
            return t.sum_all(t.tanh_(t.matmul_nt(x, t.constant(b))));
          }, mk({2, 4})) < 1e-5);
  }
  SUBCASE("add/sub/scale/add_rowvec") {
    auto b = mk({2, 4});
    auto v = mk({4});
    CHECK(check_grad([&](Tape64& t, Var64 x) {
            auto y = t.add(t.scale(t.sub(x, t.constant(b)), 1.7), x);
            return t.sum_all(t.tanh_(t.add_rowvec(y, t.constant(v))));
          }, mk({2, 4})) < 1e-5);
  }
  SUBCASE("activations") {
    auto x = mk({3, 5});
    for (auto& v : x.values) if (std::abs(v) < 0.05) v += 0.1;  // stay off the relu kink
    CHECK(check_grad([](Tape64& t, Var64 v) { return t.sum_all(t.tanh_(v)); }, x) < 1e-5);
    CHECK(check_grad([](Tape64& t, Var64 v) { return t.sum_all(t.relu_(v)); }, x) < 1e-5);
    CHECK(check_grad([](Tape64& t, Var64 v) { return t.sum_all(t.gelu_(v)); }, x) < 1e-5);
  }
  SUBCASE("softmax tempered") {
    CHECK(check_grad([](Tape64& t, Var64 v) {
            auto p = t.softmax_rows(v, 1.7);
            return t.sum_all(t.tanh_(p));
          }, mk({3, 5}, 2.0)) < 1e-5);
  }
  SUBCASE("softmax masked") {
    std::vector<std::uint8_t> mask{1, 1, 0, 1, 0};
    CHECK(check_grad([&](Tape64& t, Var64 v) {
            auto p = t.softmax_rows(v, 1.0, &mask);
            return t.sum_all(t.tanh_(p));
          }, mk({3, 5}, 2.0)) < 1e-5);
  }
  SUBCASE("layer_norm") {
    auto gain = mk({6});
    auto bias = mk({6});
    CHECK(check_grad([&](Tape64& t, Var64 v) {
            return t.sum_all(t.tanh_(t.layer_norm(v, t.constant(gain), t.constant(bias))));
          }, mk({3, 6})) < 1e-5);
    auto xin = mk({3, 6});
    CHECK(check_grad([&](Tape64& t, Var64 g) {
            return t.sum_all(t.layer_norm(t.constant(xin), g, t.constant(bias)));
          }, gain) < 1e-5);
  }
  SUBCASE("mse both sides") {
    auto b = mk({2, 5});
    CHECK(check_grad([&](Tape64& t, Var64 x) { return t.mse(x, t.constant(b)); },
                     mk({2, 5})) < 1e-5);
    CHECK(check_grad([&](Tape64& t, Var64 x) { return t.mse(t.constant(b), x); },
                     mk({2, 5})) < 1e-5);
  }
  SUBCASE("mse_masked") {
    auto b = mk({4, 3});
    std::vector<std::uint8_t> mask{1, 0, 1, 1};
    CHECK(check_grad([&](Tape64& t, Var64 x) { return t.mse_masked(x, t.constant(b), mask); },
                     mk({4, 3})) < 1e-5);
  }
  SUBCASE("cross_entropy of softmax") {
    CHECK(check_grad([](Tape64& t, Var64 v) {
            auto p = t.softmax_rows(v, 1.0);
            return t.cross_entropy({0.1, 0.2, 0.0, 0.7}, p);
          }, mk({1, 4}, 2.0)) < 1e-5);
  }
  SUBCASE("gather/slice/concat/transpose") {
    CHECK(check_grad([](Tape64& t, Var64 v) {
            auto g = t.gather_rows(v, {2, 0, 2, 1});
            auto s = t.slice_cols(g, 1, 2);
            auto c = t.concat_cols({s, s});
            return t.sum_all(t.tanh_(t.transpose(c)));
          }, mk({3, 4})) < 1e-5);
  }
  SUBCASE("slice_rows") {
    CHECK(check_grad([](Tape64& t, Var64 v) {
            return t.sum_all(t.tanh_(t.slice_rows(v, 1, 2)));
          }, mk({4, 3})) < 1e-5);
  }
  SUBCASE("pooling reductions") {
    std::vector<std::uint8_t> mask{1, 1, 0, 1};
    auto x = mk({4, 3});
    for (auto& v : x.values) v *= 3.0;  // spread values so the max is unambiguous
    CHECK(check_grad([&](Tape64& t, Var64 v) {
            return t.sum_all(t.tanh_(t.mean_rows_masked(v, mask)));
          }, x) < 1e-5);
    CHECK(check_grad([&](Tape64& t, Var64 v) {
            return t.sum_all(t.tanh_(t.max_rows_masked(v, mask)));
          }, x) < 1e-5);
  }
  SUBCASE("weighted_sum") {
    CHECK(check_grad([](Tape64& t, Var64 v) {
            auto a = t.sum_all(t.tanh_(v));
            auto b = t.sum_all(t.gelu_(v));
            return t.weighted_sum({a, b}, {0.25, 1.5});
          }, mk({2, 3})) < 1e-5);
  }
}

TEST_CASE("rng: equal seeds give equal 10000-element streams") {
  Rng a(123456789), b(123456789);
  for (int i = 0; i < 10000; ++i) CHECK(a.next_u64() == b.next_u64());
  Rng c(1), d(2);
  int differ = 0;
  for (int i = 0; i < 100; ++i) differ += c.next_u64() != d.next_u64();
  CHECK(differ > 90);
}

TEST_CASE("dropout: inverted scaling keeps expectation, eval path is identity") {
  Rng rng(77);
  Tape64 t;
  auto x = t.constant({1, 10000}, std::vector<double>(10000, 1.0));
  auto y = t.dropout(x, 0.2, rng);
  double mean = 0;
  int zeros = 0;
  for (double v : t.val(y)) {
    mean += v;
    zeros += v == 0.0;
  }
  mean /= 10000;
  CHECK(mean == doctest::Approx(1.0).epsilon(0.05));
  CHECK(zeros > 1500);
  CHECK(zeros < 2500);
  auto same = t.dropout(x, 0.0, rng);
  CHECK(same.id == x.id);
  CHECK_THROWS_AS(t.dropout(x, 1.0, rng), ParameterError);
}
