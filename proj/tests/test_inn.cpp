#include <cmath>

#include "carnet/inn.hpp"
#include "doctest.h"
#include "testutil.hpp"

using namespace carnet;

namespace {

Tensor random_image(std::vector<int64_t> shape, uint64_t seed) {
  return tu::random_tensor(std::move(shape), seed, 0.0, 1.0);
}

Tensor uniform_pi(int64_t b, int k) {
  return Tensor::full({b, k}, 1.0 / k);
}

}  // namespace

TEST_SUITE_BEGIN("inn");

TEST_CASE("validate_image rejects bad batches") {
  CHECK_THROWS_AS(inn::validate_image(Tensor({1, 1, 8, 8})), DimensionError);
  CHECK_THROWS_AS(inn::validate_image(Tensor({1, 3, 7, 8})), DimensionError);
  CHECK_THROWS_AS(inn::validate_image(Tensor({1, 3, 4, 4})), DimensionError);
  Tensor bad = Tensor::full({1, 3, 8, 8}, 1.5);
  CHECK_THROWS_AS(inn::validate_image(bad), NumericError);
  CHECK_NOTHROW(inn::validate_image(Tensor::full({1, 3, 8, 8}, 0.5)));
}

TEST_CASE("bicubic downsample: constant and linear ramp") {
  Tensor c = Tensor::full({1, 1, 8, 8}, 0.37);
  Tensor cd = inn::bicubic_downsample2(c);
  REQUIRE(cd.shape == std::vector<int64_t>{1, 1, 4, 4});
  for (double v : cd.data) CHECK(v == doctest::Approx(0.37).epsilon(1e-12));

  // along a row x_j = j, interior taps give exactly 2i + 0.5
  Tensor ramp({1, 1, 8, 8});
  for (int64_t y = 0; y < 8; ++y)
    for (int64_t x = 0; x < 8; ++x) ramp.at4(0, 0, y, x) = static_cast<double>(x);
  Tensor rd = inn::bicubic_downsample2(ramp);
  for (int64_t i = 1; i <= 2; ++i)
    CHECK(rd.at4(0, 0, 2, i) == doctest::Approx(2.0 * i + 0.5).epsilon(1e-12));
}

TEST_CASE("coupling block scalar emulation") {
  // single 1-layer subnets with zero kernels: each subnet outputs its bias,
  // so the block reduces to the closed-form affine coupling equations.
  inn::EnhancerConfig cfg;
  cfg.blocks = 1;
  cfg.dcl_per_subnet = 1;
  cfg.kernels = 2;
  nn::ParamStore ps;
  inn::Enhancer enh(cfg, ps, "inn");
  Rng rng(5);
  enh.init(rng, /*zero_init_last=*/true);
  // biases: D1 -> 0.1, D2 -> 0.5, D3 -> -0.2, D4 -> 1.0
  auto set_bias = [&](const char* which, double v) {
    Tensor& b = ps.get(std::string("inn.b0.D") + which + ".l0.b");
    std::fill(b.data.begin(), b.data.end(), v);
  };
  // kernels are zero already (zero_init_last with 1 layer zeroes everything)
  set_bias("1", 0.1);
  set_bias("2", 0.5);
  set_bias("3", -0.2);
  set_bias("4", 1.0);

  nn::Ctx ctx(ps, false);
  Tensor u0({1, 12, 2, 2});
  for (int64_t c = 0; c < 3; ++c)
    for (int64_t i = 0; i < 4; ++i) u0.data[c * 4 + i] = 2.0;  // u1 = 2
  for (int64_t c = 3; c < 12; ++c)
    for (int64_t i = 0; i < 4; ++i) u0.data[c * 4 + i] = 3.0;  // u2 = 3
  ag::Var u = ctx.input(u0);
  ag::Var pi = ctx.input(Tensor({2}, {0.5, 0.5}));
  ag::Var out = enh.block_forward(ctx, u, pi, 0);
  const Tensor& o = ctx.tape.val(out);

  double s1 = cfg.s_max * std::tanh(0.1 / cfg.s_max);
  double s3 = cfg.s_max * std::tanh(-0.2 / cfg.s_max);
  double u1p = 2.0 * std::exp(s1) + 0.5;
  double u2p = 3.0 * std::exp(s3) + 1.0;
  CHECK(o.at4(0, 0, 0, 0) == doctest::Approx(u1p).epsilon(1e-12));
  CHECK(o.at4(0, 5, 1, 1) == doctest::Approx(u2p).epsilon(1e-12));

  // closed-form inverse recovers the input exactly
  ag::Var back = enh.block_backward(ctx, out, pi, 0);
  const Tensor& bt = ctx.tape.val(back);
  for (int64_t i = 0; i < bt.numel(); ++i)
    CHECK(bt.data[i] == doctest::Approx(u0.data[i]).epsilon(1e-12));
}

TEST_CASE("identity init: fresh network decompose matches haar") {
  inn::EnhancerConfig cfg;
  cfg.blocks = 3;
  cfg.hidden = 4;
  nn::ParamStore ps;
  inn::Enhancer enh(cfg, ps, "inn");
  Rng rng(9);
  enh.init(rng);  // zero-init last layers -> every block is the identity
  Tensor img = random_image({2, 3, 8, 8}, 17);
  nn::Ctx ctx(ps, false);
  auto [x_lr, x_hf] = enh.decompose(ctx, ctx.input(img), ctx.input(uniform_pi(2, cfg.kernels)));
  Tensor h = ag::haar_squeeze_t(img);
  const Tensor& lr = ctx.tape.val(x_lr);
  for (int64_t n = 0; n < 2; ++n)
    for (int64_t c = 0; c < 3; ++c)
      for (int64_t i = 0; i < 16; ++i)
        CHECK(lr.data[(n * 3 + c) * 16 + i] ==
              doctest::Approx(h.data[(n * 12 + c) * 16 + i]).epsilon(1e-12));
}

TEST_CASE("invertibility with random weights") {
  inn::EnhancerConfig cfg;
  cfg.blocks = 4;
  cfg.hidden = 6;
  nn::ParamStore ps;
  inn::Enhancer enh(cfg, ps, "inn");
  Rng rng(13);
  enh.init(rng, /*zero_init_last=*/false);
  Tensor img = random_image({2, 3, 12, 8}, 19);
  nn::Ctx ctx(ps, false);
  Tensor pi_t({2, 3}, {0.7, 0.2, 0.1, 0.1, 0.1, 0.8});
  ag::Var pi = ctx.input(pi_t);
  auto [x_lr, x_hf] = enh.decompose(ctx, ctx.input(img), pi);
  ag::Var recon = enh.reconstruct(ctx, x_lr, ctx.input(ctx.tape.val(x_hf)), pi);
  const Tensor& r = ctx.tape.val(recon);
  REQUIRE(r.same_shape(img));
  double err = 0;
  for (int64_t i = 0; i < r.numel(); ++i) err = std::max(err, std::abs(r.data[i] - img.data[i]));
  CHECK(err < 1e-8);
}

TEST_CASE("reconstruct validates latent shapes") {
  inn::EnhancerConfig cfg;
  cfg.blocks = 1;
  cfg.hidden = 4;
  nn::ParamStore ps;
  inn::Enhancer enh(cfg, ps, "inn");
  Rng rng(3);
  enh.init(rng);
  nn::Ctx ctx(ps, false);
  ag::Var lr = ctx.input(Tensor({1, 3, 4, 4}));
  ag::Var pi = ctx.input(uniform_pi(1, cfg.kernels));
  CHECK_THROWS_AS(enh.reconstruct(ctx, lr, ctx.input(Tensor({1, 9, 4, 2})), pi),
                  DimensionError);
  CHECK_THROWS_AS(enh.reconstruct(ctx, lr, ctx.input(Tensor({1, 8, 4, 4})), pi),
                  DimensionError);
}

TEST_CASE("bilateral losses match independent L1") {
  nn::ParamStore ps;
  nn::Ctx ctx(ps, false);
  Tensor z = random_image({1, 3, 8, 8}, 23);
  Tensor pred = random_image({1, 3, 4, 4}, 24);
  ag::Var l = inn::loss_forward(ctx, ctx.input(pred), z);
  Tensor z_lr = inn::bicubic_downsample2(z);
  double expect = 0;
  for (int64_t i = 0; i < pred.numel(); ++i) expect += std::abs(pred.data[i] - z_lr.data[i]);
  expect /= static_cast<double>(pred.numel());
  CHECK(ctx.tape.val(l).data[0] == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("gradients flow through decompose/reconstruct (finite differences)") {
  inn::EnhancerConfig cfg;
  cfg.blocks = 2;
  cfg.hidden = 4;
  nn::ParamStore ps;
  inn::Enhancer enh(cfg, ps, "inn");
  Rng rng(29);
  enh.init(rng, /*zero_init_last=*/false);
  Tensor img = random_image({1, 3, 8, 8}, 31);
  Tensor z = random_image({1, 3, 8, 8}, 37);
  // the generic fd helper cannot host a Ctx-bound graph, so check directly
  nn::Ctx ctx(ps, false);
  ag::Var x = ctx.input(img, /*requires_grad=*/true);
  ag::Var pi = ctx.input(uniform_pi(1, cfg.kernels));
  auto [x_lr, x_hf] = enh.decompose(ctx, x, pi);
  ag::Var u = enh.reconstruct(ctx, x_lr, ctx.input(inn::zero_vhf(1, 4, 4)), pi);
  ag::Var loss = ag::add(inn::loss_forward(ctx, x_lr, z), inn::loss_backward(ctx, u, z));
  ctx.tape.backward(loss);
  Tensor g = ctx.tape.grad(x);
  Rng coord_rng(41);
  double worst = 0;
  for (int c = 0; c < 10; ++c) {
    int64_t i = coord_rng.uniform_int(0, img.numel() - 1);
    auto eval = [&](double v) {
      Tensor im2 = img;
      im2.data[static_cast<size_t>(i)] = v;
      nn::Ctx c2(ps, false);
      ag::Var x2 = c2.input(im2);
      ag::Var pi2 = c2.input(uniform_pi(1, cfg.kernels));
      auto [lr2, hf2] = enh.decompose(c2, x2, pi2);
      ag::Var u2 = enh.reconstruct(c2, lr2, c2.input(inn::zero_vhf(1, 4, 4)), pi2);
      ag::Var l2 = ag::add(inn::loss_forward(c2, lr2, z), inn::loss_backward(c2, u2, z));
      return c2.tape.val(l2).data[0];
    };
    double v0 = img.data[static_cast<size_t>(i)];
    double fd = (eval(v0 + 1e-3) - eval(v0 - 1e-3)) / 2e-3;
    double an = g.data[static_cast<size_t>(i)];
    double denom = std::max({std::abs(fd), std::abs(an), 1e-6});
    worst = std::max(worst, std::abs(fd - an) / denom);
  }
  CHECK(worst < 1e-3);
}

TEST_SUITE_END();
