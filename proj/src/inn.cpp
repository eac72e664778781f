#include "carnet/inn.hpp"

#include <algorithm>
#include <cmath>

namespace carnet::inn {

using ag::Var;

void validate_image(const Tensor& img) {
  if (img.ndim() != 4 || img.shape[1] != 3)
    throw DimensionError("image batch must be (B,3,H,W), got " + shape_str(img.shape));
  int64_t H = img.shape[2], W = img.shape[3];
  if (H < 8 || W < 8 || H % 2 != 0 || W % 2 != 0)
    throw DimensionError("image dims must be even and >= 8, got " + shape_str(img.shape));
  for (double v : img.data) {
    if (!std::isfinite(v)) throw NumericError("image batch contains non-finite values");
    if (v < 0.0 || v > 1.0) throw NumericError("image values must lie in [0,1]");
  }
}

Tensor clamp01(const Tensor& t) {
  Tensor out = t;
  for (double& v : out.data) v = std::clamp(v, 0.0, 1.0);
  return out;
}

namespace {

// Catmull-Rom taps for a factor-2 reduction sampled at source offset +0.5:
// contributing samples sit at distances {1.5, 0.5, 0.5, 1.5}.
constexpr double kTapOuter = -0.0625;
constexpr double kTapInner = 0.5625;

void down1d(const double* src, int64_t n, int64_t stride, double* dst) {
  int64_t m = n / 2;
  for (int64_t i = 0; i < m; ++i) {
    int64_t c = 2 * i;
    auto at = [&](int64_t j) {
      j = std::clamp<int64_t>(j, 0, n - 1);
      return src[j * stride];
    };
    dst[i] = kTapOuter * at(c - 1) + kTapInner * at(c) + kTapInner * at(c + 1) +
             kTapOuter * at(c + 2);
  }
}

}  // namespace

Tensor bicubic_downsample2(const Tensor& img) {
  if (img.ndim() != 4) throw DimensionError("bicubic_downsample2 expects 4-D");
  int64_t N = img.shape[0], C = img.shape[1], H = img.shape[2], W = img.shape[3];
  if (H % 2 != 0 || W % 2 != 0) throw DimensionError("bicubic_downsample2: dims must be even");
  int64_t h = H / 2, w = W / 2;
  Tensor tmp({N, C, H, w});
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c)
      for (int64_t y = 0; y < H; ++y)
        down1d(&img.data[((n * C + c) * H + y) * W], W, 1,
               &tmp.data[((n * C + c) * H + y) * w]);
  Tensor out({N, C, h, w});
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c)
      for (int64_t x = 0; x < w; ++x) {
        // column pass: stride across rows of tmp
        std::vector<double> col(h);
        down1d(&tmp.data[(n * C + c) * H * w + x], H, w, col.data());
        for (int64_t y = 0; y < h; ++y) out.data[((n * C + c) * h + y) * w + x] = col[y];
      }
  return out;
}

Tensor sample_vhf(int64_t b, int64_t h, int64_t w, Rng& rng) {
  Tensor t({b, 9, h, w});
  rng.fill_normal(t);
  return t;
}

Tensor zero_vhf(int64_t b, int64_t h, int64_t w) { return Tensor({b, 9, h, w}); }

std::string Enhancer::pname(int block, int which, int layer, const char* part) const {
  return prefix_ + ".b" + std::to_string(block) + ".D" + std::to_string(which) + ".l" +
         std::to_string(layer) + "." + part;
}

void Enhancer::init(Rng& rng, bool zero_init_last) {
  // D1: 9->3 (scale on u1), D2: 9->3, D3: 3->9 (scale on u2), D4: 3->9
  const int cins[4] = {9, 9, 3, 3};
  const int couts[4] = {3, 3, 9, 9};
  for (int b = 0; b < cfg_.blocks; ++b)
    for (int d = 0; d < 4; ++d) {
      int layers = cfg_.dcl_per_subnet;
      for (int l = 0; l < layers; ++l) {
        int ci = l == 0 ? cins[d] : cfg_.hidden;
        int co = l == layers - 1 ? couts[d] : cfg_.hidden;
        Tensor& w = ps_->create(pname(b, d + 1, l, "w"), {cfg_.kernels, co, ci, 3, 3});
        ps_->create(pname(b, d + 1, l, "b"), {cfg_.kernels, (int64_t)co});
        if (l == layers - 1 && zero_init_last)
          ;  // stays zero: block starts as identity
        else
          nn::init_conv(w, rng);
      }
    }
}

Var Enhancer::squash(Var s) const {
  return ag::scale(ag::vtanh(ag::scale(s, 1.0 / cfg_.s_max)), cfg_.s_max);
}

Var Enhancer::subnet(nn::Ctx& ctx, Var x, int block, int which, Var pi) const {
  int layers = cfg_.dcl_per_subnet;
  Var h = x;
  for (int l = 0; l < layers; ++l) {
    Var w = ag::kernel_mix(ctx.param(pname(block, which, l, "w")), pi);
    Var b = ag::kernel_mix(ctx.param(pname(block, which, l, "b")), pi);
    h = ag::conv2d(h, w, b, /*stride=*/1, /*pad=*/1);
    if (l != layers - 1) h = ag::leaky_relu(h, cfg_.leak);
  }
  return h;
}

Var Enhancer::block_forward(nn::Ctx& ctx, Var u, Var pi, int block) const {
  Var u1 = ag::slice_ch(u, 0, 3);
  Var u2 = ag::slice_ch(u, 3, 12);
  Var s1 = squash(subnet(ctx, u2, block, 1, pi));
  Var u1p = ag::add(ag::mul(ag::vexp(s1), u1), subnet(ctx, u2, block, 2, pi));
  Var s3 = squash(subnet(ctx, u1p, block, 3, pi));
  Var u2p = ag::add(ag::mul(ag::vexp(s3), u2), subnet(ctx, u1p, block, 4, pi));
  Var out = ag::concat_ch(u1p, u2p);
  if (!ctx.tape.val(out).all_finite())
    throw NumericError("non-finite activation in coupling block " + std::to_string(block));
  return out;
}

Var Enhancer::block_backward(nn::Ctx& ctx, Var u, Var pi, int block) const {
  Var u1p = ag::slice_ch(u, 0, 3);
  Var u2p = ag::slice_ch(u, 3, 12);
  Var s3 = squash(subnet(ctx, u1p, block, 3, pi));
  Var u2 = ag::mul(ag::sub(u2p, subnet(ctx, u1p, block, 4, pi)), ag::vexp(ag::scale(s3, -1.0)));
  Var s1 = squash(subnet(ctx, u2, block, 1, pi));
  Var u1 = ag::mul(ag::sub(u1p, subnet(ctx, u2, block, 2, pi)), ag::vexp(ag::scale(s1, -1.0)));
  Var out = ag::concat_ch(u1, u2);
  if (!ctx.tape.val(out).all_finite())
    throw NumericError("non-finite activation in coupling block " + std::to_string(block));
  return out;
}

std::pair<Var, Var> Enhancer::decompose(nn::Ctx& ctx, Var y, Var pi) const {
  const Tensor& yv = ctx.tape.val(y);
  if (yv.ndim() != 4 || yv.shape[1] != 3)
    throw DimensionError("decompose expects (B,3,H,W), got " + shape_str(yv.shape));
  const Tensor& pv = ctx.tape.val(pi);
  if (pv.ndim() != 2 || pv.shape[0] != yv.shape[0] || pv.shape[1] != cfg_.kernels)
    throw DimensionError("decompose: pi must be (B,k)");
  int64_t B = yv.shape[0];
  std::vector<Var> outs;
  outs.reserve(B);
  for (int64_t i = 0; i < B; ++i) {
    Var u = ag::haar_squeeze(ag::select_sample(y, i));
    Var p = ag::select_row(pi, i);
    for (int b = 0; b < cfg_.blocks; ++b) u = block_forward(ctx, u, p, b);
    outs.push_back(u);
  }
  Var full = B == 1 ? outs[0] : ag::concat_samples(outs);
  return {ag::slice_ch(full, 0, 3), ag::slice_ch(full, 3, 12)};
}

Var Enhancer::reconstruct(nn::Ctx& ctx, Var x_lr, Var v_hf, Var pi) const {
  const Tensor& lv = ctx.tape.val(x_lr);
  const Tensor& hv = ctx.tape.val(v_hf);
  if (lv.ndim() != 4 || lv.shape[1] != 3)
    throw DimensionError("reconstruct: x_lr must be (B,3,h,w), got " + shape_str(lv.shape));
  if (hv.ndim() != 4 || hv.shape[1] != 9 || hv.shape[0] != lv.shape[0] ||
      hv.shape[2] != lv.shape[2] || hv.shape[3] != lv.shape[3])
    throw DimensionError("reconstruct: v_hf must be (B,9,h,w) aligned with x_lr, got " +
                         shape_str(hv.shape));
  Var u = ag::concat_ch(x_lr, v_hf);
  int64_t B = lv.shape[0];
  std::vector<Var> outs;
  outs.reserve(B);
  for (int64_t i = 0; i < B; ++i) {
    Var ui = ag::select_sample(u, i);
    Var p = ag::select_row(pi, i);
    for (int b = cfg_.blocks - 1; b >= 0; --b) ui = block_backward(ctx, ui, p, b);
    outs.push_back(ag::haar_unsqueeze(ui));
  }
  return B == 1 ? outs[0] : ag::concat_samples(outs);
}

Var loss_forward(nn::Ctx& ctx, Var x_lr_pred, const Tensor& z) {
  Tensor z_lr = bicubic_downsample2(z);
  if (!ctx.tape.val(x_lr_pred).same_shape(z_lr))
    throw DimensionError("loss_forward: prediction/reference shape mismatch");
  return ag::l1_mean(x_lr_pred, ag::constant(ctx.tape, std::move(z_lr)));
}

Var loss_backward(nn::Ctx& ctx, Var u_pred, const Tensor& z) {
  if (!ctx.tape.val(u_pred).same_shape(z))
    throw DimensionError("loss_backward: prediction/reference shape mismatch");
  return ag::l1_mean(u_pred, ag::constant(ctx.tape, z));
}

}  // namespace carnet::inn
