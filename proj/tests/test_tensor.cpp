#include <doctest.h>

#include <cmath>

#include "petsynth/errors.hpp"
#include "petsynth/tensor.hpp"

using namespace petsynth;

TEST_CASE("elementwise basics") {
  auto a = make_tensor({3}, {-3.0, 0.0, 2.0});
  CHECK(abs_op(a)->value == std::vector<double>{3.0, 0.0, 2.0});
  auto r = relu(make_tensor({3}, {-1.0, 0.0, 2.0}));
  CHECK(r->value == std::vector<double>{0.0, 0.0, 2.0});
  auto s = add(a, make_scalar(1.0));
  CHECK(s->value == std::vector<double>{-2.0, 1.0, 3.0});
  CHECK_THROWS_AS(add(a, make_tensor({2}, {1.0, 2.0})), ContractViolation);
}

TEST_CASE("gradient of square at x=3 matches finite differences") {
  auto x = make_tensor({1}, {3.0}, true);
  auto loss = [&] { return reduce_sum(square(x)); };
  auto root = loss();
  backward(root);
  CHECK(x->grad[0] == doctest::Approx(6.0));
  x->zero_grad();
  CHECK(grad_check(loss, {x}, 1e-5) < 1e-6);
}

TEST_CASE("grad_check of constant graph is zero") {
  auto x = make_tensor({2}, {1.0, 2.0}, true);
  auto c = make_scalar(5.0);
  auto loss = [&] { return mul(c, make_scalar(1.0)); };
  // x does not enter the graph: both analytic and numeric gradients vanish.
  CHECK(grad_check(loss, {x}, 1e-5) == 0.0);
}

TEST_CASE("reduce min value, index and tie rule") {
  auto a = make_tensor({3}, {4.0, 1.0, 7.0});
  auto r = reduce_min(a);
  CHECK(r.value->value[0] == 1.0);
  CHECK(r.indices[0] == 1);

  auto tie = make_tensor({2}, {1.0, 1.0}, true);
  auto rt = reduce_min(tie);
  CHECK(rt.indices[0] == 0);
  backward(rt.value);
  CHECK(tie->grad[0] == 1.0);
  CHECK(tie->grad[1] == 0.0);
  // Finite differences on the winning element agree.
  tie->zero_grad();
  tie->value[1] = 2.0;  // move off the tie before probing element 0
  auto loss = [&] { return reduce_min(tie).value; };
  CHECK(grad_check(loss, {tie}, 1e-6) < 1e-6);
}

TEST_CASE("mean backward splits gradient evenly") {
  auto a = make_tensor({2}, {2.0, 4.0}, true);
  auto m = reduce_mean(a);
  CHECK(m->value[0] == 3.0);
  backward(m);
  CHECK(a->grad[0] == 0.5);
  CHECK(a->grad[1] == 0.5);
}

TEST_CASE("reduce over a middle axis") {
  // shape [2,3]: sum over axis 1
  auto a = make_tensor({2, 3}, {1, 2, 3, 10, 20, 30});
  auto s = reduce_sum(a, 1);
  CHECK(s->shape == std::vector<std::int64_t>{2});
  CHECK(s->value == std::vector<double>{6.0, 60.0});
  auto mn = reduce_min(a, 1);
  CHECK(mn.value->value == std::vector<double>{1.0, 10.0});
  CHECK(mn.indices == std::vector<std::int64_t>{0, 0});
}

TEST_CASE("min backward is zero for all losing elements") {
  Rng rng(99);
  for (int trial = 0; trial < 20; ++trial) {
    auto a = make_tensor({5}, true);
    for (auto& v : a->value) v = rng.normal();
    auto r = reduce_min(a);
    backward(r.value);
    for (int i = 0; i < 5; ++i) {
      if (i == r.indices[0])
        CHECK(a->grad[i] == 1.0);
      else
        CHECK(a->grad[i] == 0.0);
    }
  }
}

TEST_CASE("dropout rate 0 is identity and off mode ignores rng") {
  auto a = make_tensor({4}, {1, 2, 3, 4});
  Rng rng(1);
  auto d0 = dropout(a, 0.0, rng, DropoutMode::kTrain);
  CHECK(d0->value == a->value);

  Rng r1(5), r2(5);
  auto off1 = dropout(a, 0.5, r1, DropoutMode::kOff);
  auto off2 = dropout(a, 0.5, r2, DropoutMode::kOff);
  CHECK(off1->value == a->value);
  CHECK(off2->value == a->value);
  // rng untouched in off mode
  CHECK(r1.next_u64() == r2.next_u64());
}

TEST_CASE("dropout survivor fraction near expectation") {
  const std::int64_t n = 1000000;
  auto a = make_tensor({n});
  std::fill(a->value.begin(), a->value.end(), 1.0);
  Rng rng(2024);
  auto d = dropout(a, 0.5, rng, DropoutMode::kTrain);
  std::int64_t survivors = 0;
  for (auto v : d->value)
    if (v != 0.0) ++survivors;
  const double frac = static_cast<double>(survivors) / static_cast<double>(n);
  CHECK(frac > 0.49);
  CHECK(frac < 0.51);
  // survivors are scaled by 1/(1-rate)
  for (std::int64_t i = 0; i < 100; ++i)
    CHECK((d->value[i] == 0.0 || d->value[i] == 2.0));
}

TEST_CASE("dropout rate >= 1 is a contract violation") {
  auto a = make_tensor({2});
  Rng rng(0);
  CHECK_THROWS_AS(dropout(a, 1.0, rng, DropoutMode::kTrain), ContractViolation);
}

TEST_CASE("prelu forward and gradients") {
  auto x = make_tensor({3}, {-2.0, 0.5, 3.0}, true);
  auto alpha = make_scalar(0.25, true);
  auto y = prelu(x, alpha);
  CHECK(y->value == std::vector<double>{-0.5, 0.5, 3.0});
  auto loss = [&] { return reduce_sum(prelu(x, alpha)); };
  CHECK(grad_check(loss, {x, alpha}, 1e-6) < 1e-7);
}

TEST_CASE("min_pair routes gradient to the smaller operand, ties to first") {
  auto a = make_tensor({2}, {1.0, 5.0}, true);
  auto b = make_tensor({2}, {1.0, 2.0}, true);
  auto m = reduce_sum(min_pair(a, b));
  backward(m);
  CHECK(a->grad == std::vector<double>{1.0, 0.0});
  CHECK(b->grad == std::vector<double>{0.0, 1.0});
}

TEST_CASE("exp gradient") {
  auto x = make_tensor({2}, {0.3, -1.1}, true);
  auto loss = [&] { return reduce_sum(exp_op(x)); };
  CHECK(grad_check(loss, {x}, 1e-6) < 1e-8);
}

TEST_CASE("random composite graphs pass finite differences") {
  Rng rng(31);
  for (int trial = 0; trial < 10; ++trial) {
    auto x = make_tensor({6}, true);
    auto y = make_tensor({6}, true);
    // Probe away from relu/abs kinks.
    for (auto& v : x->value) v = rng.normal() + (rng.uniform() < 0.5 ? 2.0 : -2.0) * 1.5;
    for (auto& v : y->value) v = rng.normal() * 0.5 + 1.5;
    auto alpha = make_scalar(0.3, true);
    auto loss = [&] {
      auto t = mul(relu(x), exp_op(mul(y, make_scalar(0.3))));
      t = add(t, square(prelu(sub(x, y), alpha)));
      t = add(t, abs_op(add(x, make_scalar(10.0))));  // away from 0
      return reduce_mean(t);
    };
    CHECK(grad_check(loss, {x, y, alpha}, 1e-5) < 1e-6);
  }
}

TEST_CASE("masked_sq_mean values and gradient") {
  // N=2 samples of 2x2, mask selects different pixel counts.
  auto a = make_tensor({2, 1, 2, 2}, {1, 2, 3, 4, 5, 6, 7, 8}, true);
  auto b = make_tensor({2, 1, 2, 2}, {0, 0, 0, 0, 5, 5, 5, 5});
  auto m = make_tensor({2, 1, 2, 2}, {1, 1, 0, 0, 1, 1, 1, 1});
  auto out = masked_sq_mean(a, b, m);
  CHECK(out->value[0] == doctest::Approx((1.0 + 4.0) / 2.0));
  CHECK(out->value[1] == doctest::Approx((0.0 + 1.0 + 4.0 + 9.0) / 4.0));
  auto loss = [&] { return reduce_sum(masked_sq_mean(a, b, m)); };
  CHECK(grad_check(loss, {a}, 1e-5) < 1e-7);

  auto empty_mask = make_tensor({2, 1, 2, 2});
  CHECK_THROWS_AS(masked_sq_mean(a, b, empty_mask), ContractViolation);
}

TEST_CASE("stack_columns and min over heads") {
  auto c0 = make_tensor({2}, {4.0, 1.0}, true);
  auto c1 = make_tensor({2}, {2.0, 3.0}, true);
  auto s = stack_columns({c0, c1});
  CHECK(s->shape == std::vector<std::int64_t>{2, 2});
  auto r = reduce_min(s, 1);
  CHECK(r.value->value == std::vector<double>{2.0, 1.0});
  CHECK(r.indices == std::vector<std::int64_t>{1, 0});
  backward(reduce_mean(r.value));
  CHECK(c0->grad == std::vector<double>{0.0, 0.5});
  CHECK(c1->grad == std::vector<double>{0.5, 0.0});
}

TEST_CASE("nodes without requires_grad never allocate gradients") {
  auto a = make_tensor({4}, {1, 2, 3, 4}, false);
  auto b = make_tensor({4}, {1, 1, 1, 1}, true);
  auto root = reduce_sum(mul(a, b));
  backward(root);
  CHECK(a->grad.empty());
  CHECK(b->grad.size() == 4);
}

TEST_CASE("concat_channels splits gradient correctly") {
  auto a = make_tensor({1, 1, 2, 2}, {1, 2, 3, 4}, true);
  auto b = make_tensor({1, 2, 2, 2}, {5, 6, 7, 8, 9, 10, 11, 12}, true);
  auto c = concat_channels(a, b);
  CHECK(c->shape == std::vector<std::int64_t>{1, 3, 2, 2});
  CHECK(c->value[0] == 1);
  CHECK(c->value[4] == 5);
  auto loss = [&] { return reduce_mean(square(concat_channels(a, b))); };
  CHECK(grad_check(loss, {a, b}, 1e-5) < 1e-7);
}
