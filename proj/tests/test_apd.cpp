#include <cmath>

#include "carnet/apd.hpp"
#include "doctest.h"
#include "testutil.hpp"

using namespace carnet;

TEST_SUITE_BEGIN("apd");

TEST_CASE("kl/js divergence oracles") {
  // KL((1,0),(0.5,0.5)) = ln 2 up to the eta floor
  CHECK(apd::kl_divergence({1, 0}, {0.5, 0.5}) == doctest::Approx(std::log(2.0)).epsilon(1e-6));
  CHECK(apd::kl_divergence({0.3, 0.7}, {0.3, 0.7}) == doctest::Approx(0.0).epsilon(1e-12));
  // JS of disjoint one-hots = ln 2 (the maximum)
  CHECK(apd::js_divergence({1, 0}, {0, 1}) == doctest::Approx(std::log(2.0)).epsilon(1e-6));
  CHECK(apd::js_divergence({0.2, 0.8}, {0.2, 0.8}) == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("js symmetry and boundedness on random simplex points") {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> p(3), q(3);
    double sp = 0, sq = 0;
    for (int i = 0; i < 3; ++i) {
      p[i] = rng.uniform(0.01, 1.0);
      q[i] = rng.uniform(0.01, 1.0);
      sp += p[i];
      sq += q[i];
    }
    for (int i = 0; i < 3; ++i) {
      p[i] /= sp;
      q[i] /= sq;
    }
    double ab = apd::js_divergence(p, q);
    double ba = apd::js_divergence(q, p);
    CHECK(ab == doctest::Approx(ba).epsilon(1e-12));
    CHECK(ab >= -1e-12);
    CHECK(ab <= std::log(2.0) + 1e-9);
  }
}

TEST_CASE("kl/js autograd versions match scalar versions") {
  ag::Tape t;
  std::vector<double> p = {0.6, 0.3, 0.1}, q = {0.2, 0.5, 0.3};
  ag::Var pv = t.leaf(Tensor({3}, std::vector<double>(p)), false);
  ag::Var qv = t.leaf(Tensor({3}, std::vector<double>(q)), false);
  CHECK(t.val(apd::kl_var(pv, qv)).data[0] ==
        doctest::Approx(apd::kl_divergence(p, q)).epsilon(1e-12));
  CHECK(t.val(apd::js_var(pv, qv)).data[0] ==
        doctest::Approx(apd::js_divergence(p, q)).epsilon(1e-12));
}

TEST_CASE("js gradient finite differences") {
  Tensor p0({3}, {0.5, 0.3, 0.2});
  Tensor q0({3}, {0.25, 0.25, 0.5});
  double err = tu::fd_max_rel_err(
      [&](ag::Tape& t, ag::Var p) { return apd::js_var(p, t.leaf(q0, false)); }, p0, 3);
  CHECK(err < 1e-3);
}

TEST_CASE("validate_simplex") {
  CHECK_NOTHROW(apd::validate_simplex({0.5, 0.5}));
  CHECK_THROWS_AS(apd::validate_simplex({0.6, 0.6}), NumericError);
  CHECK_THROWS_AS(apd::validate_simplex({1.2, -0.2}), NumericError);
}

TEST_CASE("fresh discriminator outputs near-uniform distribution") {
  apd::ApdConfig cfg;
  cfg.stages = 2;
  cfg.width = 8;
  nn::ParamStore ps;
  apd::Discriminator d(cfg, ps, "apd");
  Rng rng(7);
  d.init(rng);
  Tensor img = tu::random_tensor({2, 3, 16, 16}, 11, 0.0, 1.0);
  auto probs = d.discriminate_eval(img);
  REQUIRE(probs.size() == 2);
  for (const auto& row : probs) {
    REQUIRE(row.size() == 3);
    double s = 0;
    for (double v : row) {
      CHECK(std::abs(v - 1.0 / 3.0) < 0.25);  // near-uniform, not collapsed
      s += v;
    }
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }
  // a zeroed head gives exactly uniform pi
  Tensor& hw = ps.get("apd.head.w");
  std::fill(hw.data.begin(), hw.data.end(), 0.0);
  for (const auto& row : d.discriminate_eval(img))
    for (double v : row) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("discriminator rows always form a simplex") {
  apd::ApdConfig cfg;
  cfg.stages = 3;
  cfg.width = 8;
  nn::ParamStore ps;
  apd::Discriminator d(cfg, ps, "apd");
  Rng rng(13);
  d.init(rng);
  // random (non-zero) head so logits are not degenerate
  nn::init_linear(ps.get("apd.head.w"), rng);
  auto probs = d.discriminate_eval(tu::random_tensor({3, 3, 16, 16}, 17, 0.0, 1.0));
  for (const auto& row : probs) {
    apd::validate_simplex(row, 1e-9);
  }
}

TEST_CASE("triplet loss matches brute-force oracle") {
  // 6 rows over 3 labels with distinctive distributions
  Tensor probs({6, 3}, {0.8, 0.1, 0.1,   //
                        0.7, 0.2, 0.1,   //
                        0.1, 0.8, 0.1,   //
                        0.2, 0.6, 0.2,   //
                        0.1, 0.1, 0.8,   //
                        0.3, 0.3, 0.4});
  std::vector<int> labels = {0, 0, 1, 1, 2, 2};
  double margin = 0.2, eta = 1e-8;

  ag::Tape t;
  int n_triplets = 0;
  ag::Var l = apd::triplet_loss_batch_all(t.leaf(probs, false), labels, margin, eta,
                                          &n_triplets);

  auto row = [&](int i) {
    return std::vector<double>{probs.data[i * 3], probs.data[i * 3 + 1], probs.data[i * 3 + 2]};
  };
  double expect = 0;
  int count = 0;
  for (int a = 0; a < 6; ++a)
    for (int p = 0; p < 6; ++p) {
      if (p == a || labels[p] != labels[a]) continue;
      for (int n = 0; n < 6; ++n) {
        if (labels[n] == labels[a]) continue;
        double h = apd::js_divergence(row(a), row(p), eta) -
                   apd::js_divergence(row(a), row(n), eta) + margin;
        expect += std::max(0.0, h);
        ++count;
      }
    }
  CHECK(n_triplets == count);
  CHECK(t.val(l).data[0] == doctest::Approx(expect / count).epsilon(1e-9));
}

TEST_CASE("triplet loss with no valid triplets returns zero") {
  Tensor probs({2, 3}, {0.5, 0.3, 0.2, 0.1, 0.6, 0.3});
  ag::Tape t;
  int n = -1;
  ag::Var l = apd::triplet_loss_batch_all(t.leaf(probs, false), {0, 0}, 0.2, 1e-8, &n);
  CHECK(n == 0);
  CHECK(t.val(l).data[0] == 0.0);
}

TEST_CASE("triplet loss gradients (finite differences)") {
  Tensor probs({4, 3}, {0.6, 0.3, 0.1, 0.5, 0.25, 0.25, 0.2, 0.5, 0.3, 0.15, 0.55, 0.3});
  std::vector<int> labels = {0, 0, 1, 1};
  double err = tu::fd_max_rel_err(
      [&](ag::Tape& t, ag::Var p) {
        return apd::triplet_loss_batch_all(p, labels, 0.4, 1e-8);
      },
      probs, 8);
  CHECK(err < 1e-3);
}

TEST_SUITE_END();
