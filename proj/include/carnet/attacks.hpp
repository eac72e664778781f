#pragma once

#include <functional>

#include "carnet/nn.hpp"

namespace carnet::attack {

struct Budget {
  double eps = 8.0 / 255.0;
  double alpha = 2.0 / 255.0;
  int steps = 10;

  void validate() const {
    if (!(eps >= 0 && eps <= 1)) throw ConfigError("attack eps must be in [0,1]");
    if (steps < 1) throw ConfigError("attack steps must be >= 1");
    if (!(alpha > 0 && alpha <= eps) && eps > 0)
      throw ConfigError("attack step size must satisfy 0 < alpha <= eps");
  }
};

// delta <- delta + alpha * sgn(grad); sgn(0) = 0.
Tensor sign_step(const Tensor& delta, const Tensor& grad, double alpha);

// L-inf clip to [-eps, eps] followed by image-range feasibility:
// x + delta in [0,1]. Both constraints hold simultaneously afterwards.
Tensor project(const Tensor& delta, const Tensor& x, double eps);

// M_CA = mean|u_att - z| - mean|u_att - x|: positive when the attacked
// enhancement drifts toward the degraded input and away from the reference.
double metric_contrastive(const Tensor& u_att, const Tensor& x, const Tensor& z);
ag::Var metric_contrastive(nn::Ctx& ctx, ag::Var u_att, const Tensor& x, const Tensor& z);

// Builds the scalar objective to ascend, given the attacked image y = x+delta
// as a differentiable node. Model parameters must enter the tape as constants.
using Objective = std::function<ag::Var(nn::Ctx&, ag::Var y)>;

// Projected sign-gradient ascent. delta0 ~ U(-eps, eps) from `seed`; the
// model parameters are never touched. Returns the final perturbation.
Tensor pgd_attack(const Tensor& x, const Objective& objective, const Budget& budget,
                  nn::ParamStore& params, uint64_t seed);

enum class ObjectiveKind { vision_contrastive, det_cls, det_loc, det_full };
ObjectiveKind objective_kind_from_string(const std::string& s);
std::string to_string(ObjectiveKind k);

}  // namespace carnet::attack
