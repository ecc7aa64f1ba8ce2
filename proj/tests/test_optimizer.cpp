#include <doctest.h>

#include <cmath>

#include "petsynth/errors.hpp"
#include "petsynth/optimizer.hpp"

using namespace petsynth;

TEST_CASE("zero gradient leaves parameters unchanged") {
  auto p = make_param("p", {3});
  p->value = {1.0, -2.0, 3.0};
  p->ensure_grad();
  Adam opt({p}, {});
  opt.step();
  CHECK(p->value == std::vector<double>{1.0, -2.0, 3.0});
}

TEST_CASE("first step with constant gradient moves by about lr") {
  // Hand evaluation of the Adam recurrence at t=1 with g=1:
  //   m_hat = 1, v_hat = 1, step = lr * 1 / (1 + eps) ~ lr.
  auto p = make_param("w", {1});
  p->value = {0.5};
  p->ensure_grad();
  p->grad[0] = 1.0;
  AdamConfig cfg;
  cfg.lr = 0.001;
  Adam opt({p}, cfg);
  opt.step();
  CHECK(p->value[0] == doctest::Approx(0.5 - 0.001).epsilon(1e-6));
}

TEST_CASE("two identical runs give bitwise identical parameters") {
  auto run = [] {
    auto p = make_param("w", {4});
    p->value = {0.1, 0.2, 0.3, 0.4};
    Adam opt({p}, {});
    for (int i = 0; i < 50; ++i) {
      p->ensure_grad();
      for (int j = 0; j < 4; ++j) p->grad[j] = 0.01 * (j + 1) * std::sin(i * 0.1);
      opt.step();
      p->zero_grad();
    }
    return p->value;
  };
  CHECK(run() == run());
}

TEST_CASE("non-finite gradient raises an error naming the parameter") {
  auto p = make_param("block3.weight", {1});
  p->ensure_grad();
  p->grad[0] = std::nan("");
  Adam opt({p}, {});
  try {
    opt.step();
    FAIL("expected NumericalError");
  } catch (const NumericalError& e) {
    CHECK(std::string(e.what()).find("block3.weight") != std::string::npos);
  }
}

TEST_CASE("adam converges on a quadratic") {
  auto p = make_param("x", {1});
  p->value = {5.0};
  AdamConfig cfg;
  cfg.lr = 0.1;
  Adam opt({p}, cfg);
  for (int i = 0; i < 500; ++i) {
    p->ensure_grad();
    p->grad[0] = 2.0 * p->value[0];  // d/dx x^2
    opt.step();
    p->zero_grad();
  }
  CHECK(std::fabs(p->value[0]) < 1e-2);
}
