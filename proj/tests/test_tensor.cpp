#include "ncmi/tensor.hpp"

#include <cmath>

#include "doctest.h"
#include "ncmi/error.hpp"
#include "testutil.hpp"

using namespace ncmi;

TEST_CASE("matmul: identity and small products") {
  Tensor eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
  Tensor m = Tensor::from_data({2, 2}, {2, 3, 4, 5});
  Tensor out = matmul(eye, m);
  CHECK(out.value()[0] == 2);
  CHECK(out.value()[1] == 3);
  CHECK(out.value()[2] == 4);
  CHECK(out.value()[3] == 5);

  Tensor a = Tensor::from_data({1, 2}, {1, 2});
  Tensor b = Tensor::from_data({2, 1}, {3, 4});
  CHECK(matmul(a, b).item() == 11);
}

TEST_CASE("matmul: shape mismatch names both operands") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({4, 5});
  CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("[2,3]"), ContractError);
}

TEST_CASE("matmul: gradient of sum(a.b) w.r.t. a is row-broadcast column sums of b") {
  Rng rng(7);
  Tensor a = Tensor::randn({3, 4}, rng, 1.0, true);
  Tensor b = Tensor::randn({4, 2}, rng, 1.0);
  const double err = testutil::max_grad_rel_err(a, [&] { return sum(matmul(a, b)); });
  CHECK(err < 1e-6);

  active_tape().clear();
  Tensor loss = sum(matmul(a, b));
  a.zero_grad();
  backward(loss);
  const auto bv = b.value();
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t k = 0; k < 4; ++k) {
      double colsum = bv[k * 2] + bv[k * 2 + 1];
      CHECK(a.grad()[i * 4 + k] == doctest::Approx(colsum).epsilon(1e-12));
    }
  }
}

TEST_CASE("elementwise: forward values") {
  Tensor z = Tensor::from_data({1}, {0.0});
  CHECK(sigmoid(z).item() == 0.5);

  for (double x : {-1.0, 0.0, 2.5}) {
    Tensor t = Tensor::scalar(x);
    CHECK(log(exp(t)).item() == doctest::Approx(x).epsilon(1e-15));
  }
}

TEST_CASE("elementwise: gradient of sum(sigmoid(x)) at 0 is 0.25 per element") {
  Tensor x = Tensor::zeros({4}, true);
  active_tape().clear();
  backward(sum(sigmoid(x)));
  for (double g : x.grad()) CHECK(g == 0.25);
}

TEST_CASE("elementwise: log rejects non-positive input") {
  Tensor x = Tensor::from_data({2}, {1.0, 0.0});
  CHECK_THROWS_AS((void)log(x), ContractError);
}

TEST_CASE("elementwise: broadcast of a row vector over matrix rows") {
  Tensor m = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor v = Tensor::from_data({3}, {10, 20, 30});
  Tensor out = add(m, v);
  CHECK(out.value()[0] == 11);
  CHECK(out.value()[5] == 36);

  Tensor bad = Tensor::from_data({2}, {1, 2});
  CHECK_THROWS_AS((void)add(m, bad), ContractError);
}

TEST_CASE("reduce: values and mean gradient") {
  Tensor v = Tensor::from_data({3}, {1, 2, 3});
  CHECK(sum(v).item() == 6);

  Tensor m = Tensor::from_data({2, 2}, {1, 3, 3, 5});
  Tensor col_means = mean(m, 0);
  CHECK(col_means.value()[0] == 2);
  CHECK(col_means.value()[1] == 4);

  Tensor x = Tensor::from_data({5}, {1, 2, 3, 4, 5}, true);
  active_tape().clear();
  backward(mean(x));
  for (double g : x.grad()) CHECK(g == doctest::Approx(0.2).epsilon(1e-15));

  CHECK_THROWS_AS((void)sum(m, 2), ContractError);
}

TEST_CASE("backward: d(w.w) = 2w") {
  Tensor w = Tensor::from_data({2}, {1, -2}, true);
  active_tape().clear();
  backward(sum(mul(w, w)));
  CHECK(w.grad()[0] == 2);
  CHECK(w.grad()[1] == -4);
}

TEST_CASE("backward: contract violations") {
  Tensor w = Tensor::from_data({2}, {1, 2}, true);
  active_tape().clear();
  Tensor y = mul(w, w);  // non-scalar
  CHECK_THROWS_AS(backward(y), ContractError);

  Tensor loss = sum(y);
  active_tape().clear();  // loss op no longer on the tape
  CHECK_THROWS_AS(backward(loss), ContractError);
}

TEST_CASE("backward: repeated calls accumulate (grad doubles for a linear loss)") {
  Tensor w = Tensor::from_data({2}, {1, 2}, true);
  active_tape().clear();
  Tensor loss = sum(mul(w, 3.0));
  backward(loss);
  CHECK(w.grad()[0] == 3);
  backward(loss);
  CHECK(w.grad()[0] == 6);
  w.zero_grad();
  backward(loss);
  CHECK(w.grad()[0] == 3);
}

TEST_CASE("backward: fan-out accumulates within one pass") {
  Tensor w = Tensor::from_data({1}, {3}, true);
  active_tape().clear();
  Tensor y = mul(w, w);      // w^2
  Tensor loss = sum(add(y, y));  // 2 w^2 -> d/dw = 4w = 12
  backward(loss);
  CHECK(w.grad()[0] == 12);
}

TEST_CASE("gradient check: every differentiable op against finite differences") {
  Rng rng(42);
  auto check = [&](const char* name, Tensor& param, std::function<Tensor()> loss) {
    CAPTURE(name);
    CHECK(testutil::max_grad_rel_err(param, loss) < 1e-4);
  };

  Tensor a = Tensor::randn({3, 4}, rng, 1.0, true);
  Tensor b = Tensor::randn({3, 4}, rng, 1.0, true);
  Tensor v = Tensor::randn({4}, rng, 1.0, true);
  Tensor pos = Tensor::rand_uniform({3, 4}, rng, 0.5, 2.0, true);
  Tensor w = Tensor::randn({4, 2}, rng, 1.0, true);
  // Random weighting makes reductions non-degenerate.
  Tensor mix = Tensor::randn({3, 4}, rng, 1.0);

  check("add", a, [&] { return sum(mul(add(a, b), mix)); });
  check("sub(vec)", v, [&] { return sum(mul(sub(a, v), mix)); });
  check("mul", b, [&] { return sum(mul(mul(a, b), mix)); });
  check("div", b, [&] { return sum(mul(div(a, pos), mix)); });
  check("div(vec denom)", v, [&] {
    return sum(mul(div(mul(v, v) + 3.0, pos), mix));
  });
  check("exp", a, [&] { return sum(mul(exp(a), mix)); });
  check("log", pos, [&] { return sum(mul(log(pos), mix)); });
  check("sigmoid", a, [&] { return sum(mul(sigmoid(a), mix)); });
  check("tanh", a, [&] { return sum(mul(tanh(a), mix)); });
  check("relu", a, [&] { return sum(mul(relu(a), mix)); });
  check("neg/scalar-mul", a, [&] { return sum(mul(neg(mul(a, 2.5)), mix)); });
  Tensor mix32 = Tensor::randn({3, 2}, rng, 1.0);
  check("matmul", w, [&] { return sum(mul(matmul(a, w), mix32)); });
  check("sum_axis0", a, [&] { return sum(mul(sum(a, 0), v)); });
  Tensor mix3 = Tensor::randn({3}, rng, 1.0);
  check("sum_axis1", a, [&] { return sum(mul(sum(a, 1), mix3)); });
  check("mean_axis1", a, [&] { return sum(mul(mean(a, 1), mix3)); });
  Tensor mix43 = Tensor::randn({4, 3}, rng, 1.0);
  check("reshape", a, [&] { return sum(mul(reshape(a, {4, 3}), mix43)); });

  Tensor src = Tensor::randn({4, 3}, rng, 1.0, true);
  std::vector<int> idx = {2, 0, 0, 3, 1};
  Tensor mix53 = Tensor::randn({5, 3}, rng, 1.0);
  check("row_gather", src, [&] { return sum(mul(row_gather(src, idx), mix53)); });
  Tensor rows = Tensor::randn({5, 3}, rng, 1.0, true);
  std::vector<int> labels = {1, 0, 2, 1, 1};
  Tensor mix33 = Tensor::randn({3, 3}, rng, 1.0);
  check("class_row_sum", rows,
        [&] { return sum(mul(class_row_sum(rows, labels, 3), mix33)); });
}

TEST_CASE("determinism: identical seeds give bit-identical forward and gradients") {
  auto run = [](std::uint64_t seed) {
    Rng rng(seed);
    Tensor a = Tensor::randn({4, 4}, rng, 1.0, true);
    Tensor b = Tensor::randn({4, 4}, rng, 1.0);
    active_tape().clear();
    Tensor loss = sum(mul(sigmoid(matmul(a, b)), b));
    backward(loss);
    std::vector<double> out(loss.value().begin(), loss.value().end());
    out.insert(out.end(), a.grad().begin(), a.grad().end());
    active_tape().clear();
    return out;
  };
  CHECK(run(123) == run(123));
}

TEST_CASE("sgd_step: plain, momentum, and decay behavior") {
  SgdState st;

  Tensor p = Tensor::from_data({1}, {5}, true);
  grad_buffer(p)[0] = 2.0;
  const Tensor params[] = {p};
  sgd_step(params, 1.0, 0.0, 0.0, st);
  CHECK(p.value()[0] == 3.0);

  // Two identical steps with momentum 0.9: -(0.1*1 + 0.1*1.9) = -0.29.
  Tensor q = Tensor::from_data({1}, {0}, true);
  SgdState st2;
  const Tensor params2[] = {q};
  grad_buffer(q)[0] = 1.0;
  sgd_step(params2, 0.1, 0.9, 0.0, st2);
  q.zero_grad();
  grad_buffer(q)[0] = 1.0;
  sgd_step(params2, 0.1, 0.9, 0.0, st2);
  CHECK(q.value()[0] == doctest::Approx(-0.29).epsilon(1e-15));

  // Pure decay.
  Tensor r = Tensor::from_data({1}, {10}, true);
  SgdState st3;
  const Tensor params3[] = {r};
  grad_buffer(r)[0] = 0.0;
  sgd_step(params3, 0.1, 0.0, 0.1, st3);
  CHECK(r.value()[0] == doctest::Approx(9.9).epsilon(1e-15));

  // Absent grad: untouched.
  Tensor s = Tensor::from_data({1}, {7}, true);
  SgdState st4;
  const Tensor params4[] = {s};
  sgd_step(params4, 1.0, 0.9, 0.1, st4);
  CHECK(s.value()[0] == 7.0);
}

TEST_CASE("tensor: op outputs are immutable, leaves are writable") {
  Tensor a = Tensor::from_data({2}, {1, 2}, true);
  Tensor y = mul(a, 2.0);
  CHECK_THROWS_AS((void)y.mutable_value(), ContractError);
  a.mutable_value()[0] = 9;
  CHECK(a.value()[0] == 9);
}

TEST_CASE("no-grad scope: ops are not recorded and outputs are constant") {
  Tensor a = Tensor::from_data({2}, {1, 2}, true);
  active_tape().clear();
  {
    NoGradScope ng;
    Tensor y = mul(a, a);
    CHECK_FALSE(y.requires_grad());
  }
  CHECK(active_tape().size() == 0);
}
