#pragma once

#include <string>
#include <utility>

#include "carnet/nn.hpp"

namespace carnet::inn {

struct EnhancerConfig {
  int blocks = 6;           // stacked coupling blocks
  int dcl_per_subnet = 3;   // dynamic conv layers per subnet D1..D4
  int hidden = 8;           // subnet hidden width
  int kernels = 3;          // parallel kernels per DCL (= attack pattern count)
  double s_max = 2.0;       // log-scale squash bound
  double leak = 0.1;        // leaky relu slope between DCLs
};

// Throws DimensionError / NumericError if the batch violates the ImageBatch
// invariants: 4-D (B,3,H,W), even H,W >= 8, finite values in [0,1].
void validate_image(const Tensor& img);

Tensor clamp01(const Tensor& t);

// Catmull-Rom (a = -0.5) separable bicubic downsample by exactly 2.
Tensor bicubic_downsample2(const Tensor& img);

// v_hf ~ N(0, I) with shape (B,9,h,w); all-zeros mode for regression tests.
Tensor sample_vhf(int64_t b, int64_t h, int64_t w, Rng& rng);
Tensor zero_vhf(int64_t b, int64_t h, int64_t w);

// The invertible enhancement network. Parameters live in a ParamStore under
// `prefix`; the class itself is stateless apart from config.
class Enhancer {
 public:
  Enhancer(EnhancerConfig cfg, nn::ParamStore& ps, std::string prefix = "inn")
      : cfg_(cfg), ps_(&ps), prefix_(std::move(prefix)) {}

  // Creates and initializes all parameters. zero_init_last makes every block
  // start as the identity map.
  void init(Rng& rng, bool zero_init_last = true);

  const EnhancerConfig& config() const { return cfg_; }
  const std::string& prefix() const { return prefix_; }

  // Single coupling block on one sample's features u (1,12,h,w), pi (k).
  ag::Var block_forward(nn::Ctx& ctx, ag::Var u, ag::Var pi, int block) const;
  ag::Var block_backward(nn::Ctx& ctx, ag::Var u, ag::Var pi, int block) const;

  // Forward process f+: image batch (B,3,H,W) with per-sample pi (B,k)
  // -> (x_lr (B,3,H/2,W/2), x_hf (B,9,H/2,W/2)).
  std::pair<ag::Var, ag::Var> decompose(nn::Ctx& ctx, ag::Var y, ag::Var pi) const;

  // Backward process f-: latent pair -> unclamped image batch (B,3,H,W).
  // Clamp to [0,1] only when emitting a final image.
  ag::Var reconstruct(nn::Ctx& ctx, ag::Var x_lr, ag::Var v_hf, ag::Var pi) const;

 private:
  ag::Var subnet(nn::Ctx& ctx, ag::Var x, int block, int which, ag::Var pi) const;
  ag::Var squash(ag::Var s) const;  // s_max * tanh(s / s_max)
  std::string pname(int block, int which, int layer, const char* part) const;

  EnhancerConfig cfg_;
  nn::ParamStore* ps_;
  std::string prefix_;
};

// Bilateral losses (Eq. of the training objective): mean absolute error.
// z enters as constant data; gradients flow through the predictions only.
ag::Var loss_forward(nn::Ctx& ctx, ag::Var x_lr_pred, const Tensor& z);
ag::Var loss_backward(nn::Ctx& ctx, ag::Var u_pred, const Tensor& z);

}  // namespace carnet::inn
