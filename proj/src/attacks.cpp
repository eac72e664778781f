#include "carnet/attacks.hpp"

#include <algorithm>
#include <cmath>

namespace carnet::attack {

Tensor sign_step(const Tensor& delta, const Tensor& grad, double alpha) {
  if (!delta.same_shape(grad)) throw DimensionError("sign_step: shape mismatch");
  if (!grad.all_finite()) throw NumericError("sign_step: non-finite gradient");
  Tensor out = delta;
  for (int64_t i = 0; i < out.numel(); ++i) {
    double g = grad.data[i];
    out.data[i] += alpha * (g > 0 ? 1.0 : (g < 0 ? -1.0 : 0.0));
  }
  return out;
}

Tensor project(const Tensor& delta, const Tensor& x, double eps) {
  if (!delta.same_shape(x)) throw DimensionError("project: shape mismatch");
  Tensor out = delta;
  for (int64_t i = 0; i < out.numel(); ++i) {
    double d = std::clamp(out.data[i], -eps, eps);
    d = std::clamp(x.data[i] + d, 0.0, 1.0) - x.data[i];
    // the subtraction can round |d| to eps plus one ulp; re-clamping shrinks
    // |d|, so x + d stays in range by monotonicity
    out.data[i] = std::clamp(d, -eps, eps);
  }
  return out;
}

double metric_contrastive(const Tensor& u_att, const Tensor& x, const Tensor& z) {
  if (!u_att.same_shape(x) || !u_att.same_shape(z))
    throw DimensionError("metric_contrastive: shape mismatch");
  double dz = 0, dx = 0;
  for (int64_t i = 0; i < u_att.numel(); ++i) {
    dz += std::abs(u_att.data[i] - z.data[i]);
    dx += std::abs(u_att.data[i] - x.data[i]);
  }
  return (dz - dx) / static_cast<double>(u_att.numel());
}

ag::Var metric_contrastive(nn::Ctx& ctx, ag::Var u_att, const Tensor& x, const Tensor& z) {
  if (!ctx.tape.val(u_att).same_shape(x) || !ctx.tape.val(u_att).same_shape(z))
    throw DimensionError("metric_contrastive: shape mismatch");
  return ag::sub(ag::l1_mean(u_att, ag::constant(ctx.tape, z)),
                 ag::l1_mean(u_att, ag::constant(ctx.tape, x)));
}

Tensor pgd_attack(const Tensor& x, const Objective& objective, const Budget& budget,
                  nn::ParamStore& params, uint64_t seed) {
  budget.validate();
  Rng rng(seed);
  for (int attempt = 0; attempt < 2; ++attempt) {
    Tensor delta(x.shape);
    rng.fill_uniform(delta, -budget.eps, budget.eps);
    delta = project(delta, x, budget.eps);
    bool failed = false;
    for (int step = 0; step < budget.steps; ++step) {
      nn::Ctx ctx(params, /*train=*/false);  // parameters enter as constants
      ag::Var d = ctx.input(delta, /*requires_grad=*/true);
      ag::Var y = ag::add(d, ag::constant(ctx.tape, x));
      ag::Var obj = objective(ctx, y);
      if (ctx.tape.val(obj).numel() != 1) throw DimensionError("attack objective must be scalar");
      if (!std::isfinite(ctx.tape.val(obj).data[0])) {
        failed = true;
        break;
      }
      ctx.tape.backward(obj);
      const Tensor& g = ctx.tape.grad(d);
      if (!g.all_finite()) {
        failed = true;
        break;
      }
      delta = project(sign_step(delta, g, budget.alpha), x, budget.eps);
    }
    if (!failed) return delta;
  }
  throw NumericError("pgd_attack: objective produced non-finite values twice");
}

ObjectiveKind objective_kind_from_string(const std::string& s) {
  if (s == "vision" || s == "vision_contrastive") return ObjectiveKind::vision_contrastive;
  if (s == "det_cls") return ObjectiveKind::det_cls;
  if (s == "det_loc") return ObjectiveKind::det_loc;
  if (s == "det_full") return ObjectiveKind::det_full;
  throw ConfigError("unknown attack kind: " + s);
}

std::string to_string(ObjectiveKind k) {
  switch (k) {
    case ObjectiveKind::vision_contrastive: return "vision";
    case ObjectiveKind::det_cls: return "det_cls";
    case ObjectiveKind::det_loc: return "det_loc";
    case ObjectiveKind::det_full: return "det_full";
  }
  return "?";
}

}  // namespace carnet::attack
