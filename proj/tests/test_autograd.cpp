#include <cmath>

#include "carnet/autograd.hpp"
#include "doctest.h"
#include "testutil.hpp"

using namespace carnet;
using namespace carnet::ag;

TEST_SUITE_BEGIN("autograd");

TEST_CASE("elementwise values") {
  Tape t;
  Var a = t.leaf(Tensor({3}, {1.0, -2.0, 0.5}), false);
  Var b = t.leaf(Tensor({3}, {2.0, 3.0, -1.0}), false);
  CHECK(t.val(add(a, b)).data[1] == doctest::Approx(1.0));
  CHECK(t.val(sub(a, b)).data[0] == doctest::Approx(-1.0));
  CHECK(t.val(mul(a, b)).data[2] == doctest::Approx(-0.5));
  CHECK(t.val(scale(a, -2.0)).data[1] == doctest::Approx(4.0));
  CHECK(t.val(vexp(a)).data[0] == doctest::Approx(std::exp(1.0)));
  CHECK(t.val(vtanh(a)).data[1] == doctest::Approx(std::tanh(-2.0)));
  CHECK(t.val(vlog_shift(b, 1e-8)).data[0] == doctest::Approx(std::log(2.0 + 1e-8)));
  CHECK(t.val(leaky_relu(a, 0.1)).data[1] == doctest::Approx(-0.2));
  CHECK(t.val(leaky_relu(a, 0.1)).data[0] == doctest::Approx(1.0));
}

TEST_CASE("reductions") {
  Tape t;
  Var a = t.leaf(Tensor({3}, {1.0, 2.0, 3.0}), false);
  Var b = t.leaf(Tensor({3}, {2.0, 2.0, 2.0}), false);
  CHECK(t.val(sum(a)).data[0] == doctest::Approx(6.0));
  CHECK(t.val(mean(a)).data[0] == doctest::Approx(2.0));
  CHECK(t.val(dot(a, b)).data[0] == doctest::Approx(12.0));
  // mean(|1-2|,|2-2|,|3-2|) = 2/3
  CHECK(t.val(l1_mean(a, b)).data[0] == doctest::Approx(2.0 / 3.0));
  Var w = wsum({{2.0, sum(a)}, {-1.0, dot(a, b)}});
  CHECK(t.val(w).data[0] == doctest::Approx(0.0));
}

TEST_CASE("wsum weighted-total hand cases") {
  // components (1,1,1,1) with weights (2,0.1,1,5) -> 8.1;
  // components (0.5,2,0.3,0.1) -> 2.0
  Tape t;
  auto c = [&](double v) { return t.leaf(Tensor({1}, {v}), false); };
  Var a = wsum({{2.0, c(1)}, {0.1, c(1)}, {1.0, c(1)}, {5.0, c(1)}});
  CHECK(t.val(a).data[0] == doctest::Approx(8.1).epsilon(1e-12));
  Var b = wsum({{2.0, c(0.5)}, {0.1, c(2.0)}, {1.0, c(0.3)}, {5.0, c(0.1)}});
  CHECK(t.val(b).data[0] == doctest::Approx(2.0).epsilon(1e-12));
}

TEST_CASE("softmax rows") {
  Tape t;
  Var x = t.leaf(Tensor({2, 2}, {0.0, 0.0, 0.0, std::log(3.0)}), false);
  const Tensor& p = t.val(softmax_rows(x));
  CHECK(p.data[0] == doctest::Approx(0.5));
  CHECK(p.data[2] == doctest::Approx(0.25));
  CHECK(p.data[3] == doctest::Approx(0.75));
}

TEST_CASE("softmax cross entropy oracle") {
  Tape t;
  Var x = t.leaf(Tensor({1, 3}, {0.0, 0.0, 0.0}), false);
  Var l = softmax_xent(x, {1}, {2.0});
  CHECK(t.val(l).data[0] == doctest::Approx(2.0 * std::log(3.0)));
}

TEST_CASE("smooth l1 oracle") {
  Tape t;
  Var p = t.leaf(Tensor({2, 2}, {0.5, 2.0, 0.0, -3.0}), false);
  Tensor target({2, 2});  // zeros
  // row0: 0.5*0.25 + (2-0.5) = 1.625 ; row1: 0 + (3-0.5) = 2.5
  Var l = smooth_l1(p, target, {1.0, 2.0});
  CHECK(t.val(l).data[0] == doctest::Approx(1.0 * 1.625 + 2.0 * 2.5));
}

TEST_CASE("conv2d value oracle") {
  Tape t;
  Tensor img({1, 1, 3, 3});
  for (int i = 0; i < 9; ++i) img.data[i] = i + 1;
  Var x = t.leaf(img, false);
  Var w = t.leaf(Tensor::full({1, 1, 3, 3}, 1.0), false);
  Var b = t.leaf(Tensor({1}, {0.5}), false);
  const Tensor& o1 = t.val(conv2d(x, w, b, 1, 1));
  REQUIRE(o1.shape == std::vector<int64_t>{1, 1, 3, 3});
  CHECK(o1.at4(0, 0, 1, 1) == doctest::Approx(45.5));   // full 3x3 sum + bias
  CHECK(o1.at4(0, 0, 0, 0) == doctest::Approx(12.5));   // 1+2+4+5 + bias
  const Tensor& o2 = t.val(conv2d(x, w, b, 2, 1));
  REQUIRE(o2.shape == std::vector<int64_t>{1, 1, 2, 2});
  CHECK(o2.at4(0, 0, 0, 1) == doctest::Approx(2 + 3 + 5 + 6 + 0.5));
}

TEST_CASE("kernel_mix one-hot and uniform") {
  Tape t;
  Tensor bank({2, 2, 3});
  for (int i = 0; i < 12; ++i) bank.data[i] = i;
  Var bk = t.leaf(bank, false);
  Var onehot = t.leaf(Tensor({2}, {0.0, 1.0}), false);
  const Tensor& sel = t.val(kernel_mix(bk, onehot));
  REQUIRE(sel.shape == std::vector<int64_t>{2, 3});
  for (int i = 0; i < 6; ++i) CHECK(sel.data[i] == doctest::Approx(6.0 + i).epsilon(1e-12));
  Var uni = t.leaf(Tensor({2}, {0.5, 0.5}), false);
  const Tensor& avg = t.val(kernel_mix(bk, uni));
  for (int i = 0; i < 6; ++i) CHECK(avg.data[i] == doctest::Approx(3.0 + i).epsilon(1e-12));
}

TEST_CASE("structure ops round trips") {
  Tape t;
  Tensor x = tu::random_tensor({2, 4, 2, 2}, 11);
  Var v = t.leaf(x, false);
  Var back = concat_ch(slice_ch(v, 0, 1), slice_ch(v, 1, 4));
  CHECK((t.val(back).data == x.data));
  Var samples = concat_samples({select_sample(v, 0), select_sample(v, 1)});
  CHECK((t.val(samples).data == x.data));
  Tensor rows = tu::random_tensor({3, 4}, 12);
  Var rv = t.leaf(rows, false);
  Var rr = stack_rows({select_row(rv, 0), select_row(rv, 1), select_row(rv, 2)});
  CHECK((t.val(rr).data == rows.data));
}

TEST_CASE("haar 2x2 hand case") {
  Tape t;
  Var x = t.leaf(Tensor({1, 1, 2, 2}, {1.0, 2.0, 3.0, 4.0}), false);
  const Tensor& h = t.val(haar_squeeze(x));
  REQUIRE(h.shape == std::vector<int64_t>{1, 4, 1, 1});
  CHECK(h.data[0] == doctest::Approx(2.5));   // LL: block mean
  CHECK(h.data[1] == doctest::Approx(-0.5));  // LH
  CHECK(h.data[2] == doctest::Approx(-1.0));  // HL
  CHECK(h.data[3] == doctest::Approx(0.0));   // HH
}

TEST_CASE("haar round trip and energy identity") {
  Tensor x = tu::random_tensor({2, 3, 8, 6}, 21);
  Tensor h = haar_squeeze_t(x);
  Tensor back = haar_unsqueeze_t(h);
  REQUIRE(back.same_shape(x));
  double err = 0;
  for (int64_t i = 0; i < x.numel(); ++i) err = std::max(err, std::abs(back.data[i] - x.data[i]));
  CHECK(err < 1e-12);
  CHECK(2.0 * h.norm2() == doctest::Approx(x.norm2()).epsilon(1e-12));
}

TEST_CASE("finite differences: elementwise chain") {
  Tensor x0 = tu::random_tensor({2, 6}, 31, 0.1, 0.9);
  double err = tu::fd_max_rel_err(
      [](Tape& t, Var x) {
        Var y = vtanh(vexp(scale(x, 0.5)));
        return mean(mul(y, y));
      },
      x0);
  CHECK(err < 1e-3);
}

TEST_CASE("finite differences: conv/linear/softmax head") {
  Tensor x0 = tu::random_tensor({2, 3, 4, 4}, 32, -0.5, 0.5);
  Tensor w0 = tu::random_tensor({4, 3, 3, 3}, 33, -0.3, 0.3);
  Tensor lw0 = tu::random_tensor({3, 4}, 34, -0.5, 0.5);
  SUBCASE("wrt input") {
    double err = tu::fd_max_rel_err(
        [&](Tape& t, Var x) {
          Var w = t.leaf(w0, false);
          Var b = t.leaf(Tensor({4}), false);
          Var h = leaky_relu(conv2d(x, w, b, 2, 1), 0.1);
          Var pooled = global_avg_pool(h);
          Var lw = t.leaf(lw0, false);
          Var lb = t.leaf(Tensor({3}), false);
          Var p = softmax_rows(linear(pooled, lw, lb));
          return dot(p, t.leaf(Tensor({2, 3}, {1, -1, 2, 0, 1, -2}), false));
        },
        x0);
    CHECK(err < 1e-3);
  }
  SUBCASE("wrt kernel") {
    double err = tu::fd_max_rel_err(
        [&](Tape& t, Var w) {
          Var x = t.leaf(x0, false);
          Var b = t.leaf(Tensor({4}), false);
          return mean(conv2d(x, w, b, 1, 1));
        },
        w0);
    CHECK(err < 1e-3);
  }
}

TEST_CASE("finite differences: losses") {
  Tensor p0 = tu::random_tensor({4, 3}, 41, -1, 1);
  double err = tu::fd_max_rel_err(
      [](Tape& t, Var x) { return softmax_xent(x, {0, 2, 1, 2}, {1.0, 0.5, 2.0, 1.0}); }, p0);
  CHECK(err < 1e-3);
  Tensor q0 = tu::random_tensor({5, 4}, 42, -2, 2);
  Tensor tgt = tu::random_tensor({5, 4}, 43, -2, 2);
  err = tu::fd_max_rel_err(
      [&](Tape& t, Var x) { return smooth_l1(x, tgt, {1, 0, 2, 0.5, 1}); }, q0);
  CHECK(err < 1e-3);
  Tensor a0 = tu::random_tensor({3, 3}, 44, 0.1, 2.0);
  Tensor b0 = tu::random_tensor({3, 3}, 45, 0.1, 2.0);
  err = tu::fd_max_rel_err(
      [&](Tape& t, Var x) { return l1_mean(x, t.leaf(b0, false)); }, a0);
  CHECK(err < 1e-3);
}

TEST_CASE("finite differences: kernel_mix and haar") {
  Tensor bank0 = tu::random_tensor({3, 2, 2, 3, 3}, 51);
  Tensor pi0({3}, {0.2, 0.5, 0.3});
  double err = tu::fd_max_rel_err(
      [&](Tape& t, Var bank) {
        Var pi = t.leaf(pi0, false);
        return mean(kernel_mix(bank, pi));
      },
      bank0);
  CHECK(err < 1e-3);
  err = tu::fd_max_rel_err(
      [&](Tape& t, Var pi) {
        Var bank = t.leaf(bank0, false);
        return sum(mul(kernel_mix(bank, pi), kernel_mix(bank, pi)));
      },
      pi0);
  CHECK(err < 1e-3);
  Tensor img0 = tu::random_tensor({1, 2, 4, 4}, 52);
  err = tu::fd_max_rel_err(
      [&](Tape& t, Var x) {
        Var h = haar_squeeze(x);
        return sum(mul(h, h));
      },
      img0);
  CHECK(err < 1e-3);
  err = tu::fd_max_rel_err(
      [&](Tape& t, Var x) {
        Var h = haar_unsqueeze(x);
        return mean(mul(h, h));
      },
      haar_squeeze_t(img0));
  CHECK(err < 1e-3);
}

TEST_CASE("backward accumulates through shared nodes") {
  Tape t;
  Var x = t.leaf(Tensor({1}, {3.0}), true);
  Var y = mul(x, x);        // x^2
  Var z = add(y, scale(x, 2.0));  // x^2 + 2x, d/dx = 2x + 2 = 8
  t.backward(z);
  CHECK(t.grad(x).data[0] == doctest::Approx(8.0));
}

TEST_CASE("backward requires scalar root") {
  Tape t;
  Var x = t.leaf(Tensor({2}, {1.0, 2.0}), true);
  CHECK_THROWS_AS(t.backward(x), DimensionError);
}

TEST_SUITE_END();
