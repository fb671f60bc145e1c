#include <doctest.h>

#include <cmath>

#include "cofact/error.hpp"
#include "cofact/optim.hpp"
#include "op_cases.hpp"

using namespace cofact;
using namespace cofact::testing;

TEST_CASE("every op matches central differences over ten seeds") {
  for (const auto& c : op_cases()) {
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
      auto r = c.run(seed);
      INFO(c.name << " seed " << seed << " worst " << r.worst);
      CHECK(r.checked > 0);
      CHECK(r.max_rel_err < c.tolerance);
    }
  }
}

TEST_CASE("composite model gradient at d=8, h=2") {
  for (std::uint64_t seed : {3u, 11u}) {
    auto r = composite_check(seed);
    INFO("seed " << seed << " worst " << r.worst << " skipped " << r.skipped);
    CHECK(r.max_rel_err < 1e-3);
    CHECK(r.skipped * 20 < r.checked + r.skipped);
  }
}

TEST_CASE("matmul values and shape errors") {
  auto a = Tensor::constant({2, 3}, {1, 2, 3, 4, 5, 6});
  auto b = Tensor::constant({3, 2}, {7, 8, 9, 10, 11, 12});
  auto c = matmul(a, b);
  CHECK(c.shape() == Shape{2, 2});
  CHECK(c.values()[0] == 58.0f);
  CHECK(c.values()[1] == 64.0f);
  CHECK(c.values()[2] == 139.0f);
  CHECK(c.values()[3] == 154.0f);
  auto bad = Tensor::constant({2, 2}, {1, 2, 3, 4});
  CHECK_THROWS_AS(matmul(a, bad), DimensionError);
  try {
    matmul(a, bad);
  } catch (const DimensionError& e) {
    CHECK(std::string(e.what()).find("[2x3]") != std::string::npos);
  }
}

TEST_CASE("relu gradient mask equals positivity mask") {
  auto x = BasicTensor<double>::parameter({6}, {-2.0, -0.5, 0.25, 1.0, -1e-3, 3.0});
  auto y = sum(relu(x));
  y.backward();
  const std::vector<double> expect = {0, 0, 1, 1, 0, 1};
  for (std::size_t i = 0; i < 6; ++i) CHECK(x.grad()[i] == expect[i]);
}

TEST_CASE("softmax agrees with an extended-precision oracle") {
  Rng rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<float> v(3 * 7);
    for (auto& x : v) x = static_cast<float>(rng.normal() * 8.0);
    auto p = softmax(Tensor::constant({3, 7}, v), 1);
    for (std::size_t r = 0; r < 3; ++r) {
      long double mx = -1e300L, z = 0.0L;
      for (std::size_t k = 0; k < 7; ++k) mx = std::max<long double>(mx, v[r * 7 + k]);
      for (std::size_t k = 0; k < 7; ++k) z += std::exp(static_cast<long double>(v[r * 7 + k]) - mx);
      float row_sum = 0.0f;
      for (std::size_t k = 0; k < 7; ++k) {
        const long double expect = std::exp(static_cast<long double>(v[r * 7 + k]) - mx) / z;
        CHECK(std::abs(static_cast<long double>(p.values()[r * 7 + k]) - expect) < 1e-6L);
        row_sum += p.values()[r * 7 + k];
      }
      CHECK(std::abs(row_sum - 1.0f) < 1e-6f);
    }
  }
}

TEST_CASE("softmax of large logits stays finite") {
  auto p = softmax(Tensor::constant({1, 3}, {1000.0f, 999.0f, -1000.0f}), 1);
  for (float x : p.values()) CHECK(std::isfinite(x));
}

TEST_CASE("backward contracts") {
  auto x = Tensor::parameter({2}, {1.0f, 2.0f});
  SUBCASE("non-scalar output") { CHECK_THROWS_AS(scale(x, 2.0f).backward(), ContractViolation); }
  SUBCASE("leaf gradients accumulate across calls") {
    auto y = sum(scale(x, 3.0f));
    y.backward();
    y.backward();
    CHECK(x.grad()[0] == 6.0f);
    x.zero_grad();
    CHECK(x.grad()[0] == 0.0f);
  }
  SUBCASE("no graph under NoGradGuard") {
    NoGradGuard guard;
    auto y = sum(x);
    CHECK_FALSE(y.requires_grad());
  }
  SUBCASE("mutable values only on leaves") {
    auto y = scale(x, 2.0f);
    CHECK_THROWS_AS(y.mutable_values(), ContractViolation);
  }
  SUBCASE("non-finite loss rejected") {
    auto y = sum(scale(Tensor::parameter({1}, {INFINITY}), 1.0f));
    CHECK_THROWS(y.backward());
  }
}

TEST_CASE("layer norm output has zero mean and unit variance per row") {
  Rng rng(3);
  std::vector<float> v(4 * 8);
  for (auto& x : v) x = static_cast<float>(rng.normal() * 3 + 1);
  auto y = layer_norm(Tensor::constant({4, 8}, v), Tensor::full({8}, 1.0f), Tensor::zeros({8}), 1e-5f);
  for (std::size_t r = 0; r < 4; ++r) {
    double m = 0, s = 0;
    for (std::size_t k = 0; k < 8; ++k) m += y.values()[r * 8 + k];
    m /= 8;
    for (std::size_t k = 0; k < 8; ++k) s += std::pow(y.values()[r * 8 + k] - m, 2);
    CHECK(std::abs(m) < 1e-5);
    CHECK(std::abs(s / 8 - 1.0) < 1e-3);
  }
}

TEST_CASE("dropout is identity at eval and deterministic in training") {
  auto x = Tensor::full({100}, 1.0f);
  auto eval = dropout(x, 0.5, 7, false);
  for (float v : eval.values()) CHECK(v == 1.0f);
  auto a = dropout(x, 0.5, 7, true), b = dropout(x, 0.5, 7, true);
  std::size_t zeros = 0;
  for (std::size_t i = 0; i < 100; ++i) {
    CHECK(a.values()[i] == b.values()[i]);
    CHECK((a.values()[i] == 0.0f || a.values()[i] == 2.0f));
    zeros += a.values()[i] == 0.0f;
  }
  CHECK(zeros > 25);
  CHECK(zeros < 75);
}

TEST_CASE("Adam drives (theta - 3)^2 to its minimum") {
  auto theta = BasicTensor<double>::parameter({1}, {0.0});
  Adam<double> opt({ParamGroup<double>{"head", {theta}, 0.1}});
  for (int i = 0; i < 500; ++i) {
    opt.zero_grad();
    auto diff = add(theta, BasicTensor<double>::constant({1}, {-3.0}));
    auto loss = sum(matmul(reshape(diff, {1, 1}), reshape(diff, {1, 1})));
    loss.backward();
    opt.step();
  }
  CHECK(std::abs(theta.values()[0] - 3.0) < 1e-3);
  CHECK(opt.step_count() == 500);
}

TEST_CASE("Adam first step moves each parameter by the learning rate") {
  // With bias correction, m̂ = g and v̂ = g², so the first update is lr·g/(|g|+eps).
  auto p = BasicTensor<double>::parameter({2}, {1.0, -1.0});
  Adam<double> opt({ParamGroup<double>{"head", {p}, 0.01}});
  auto loss = weighted_sum(p, 9);
  loss.backward();
  const double g0 = p.grad()[0], g1 = p.grad()[1];
  opt.step();
  CHECK(p.values()[0] == doctest::Approx(1.0 - 0.01 * g0 / (std::abs(g0) + 1e-8)).epsilon(1e-12));
  CHECK(p.values()[1] == doctest::Approx(-1.0 - 0.01 * g1 / (std::abs(g1) + 1e-8)).epsilon(1e-12));
}

TEST_CASE("Adam refuses a trainable tensor without gradient") {
  auto p = Tensor::parameter({1}, {1.0f});
  Adam<float> opt({ParamGroup<float>{"head", {p}, 0.1}});
  CHECK_THROWS_AS(opt.step(), ContractViolation);
}
