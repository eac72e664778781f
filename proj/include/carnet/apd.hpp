#pragma once

#include <string>
#include <vector>

#include "carnet/nn.hpp"

namespace carnet::apd {

// Probability-vector primitives. Zero entries are handled by the additive
// floor eta; KL(P,P) is exactly 0 by construction.
double kl_divergence(const std::vector<double>& p1, const std::vector<double>& p2,
                     double eta = 1e-8);
double js_divergence(const std::vector<double>& p1, const std::vector<double>& p2,
                     double eta = 1e-8);

// Autograd versions over length-k simplex Vars.
ag::Var kl_var(ag::Var p1, ag::Var p2, double eta = 1e-8);
ag::Var js_var(ag::Var p1, ag::Var p2, double eta = 1e-8);

void validate_simplex(const std::vector<double>& p, double tol = 1e-6);

struct ApdConfig {
  int stages = 4;      // stride-2 conv stages
  int width = 16;      // channel width of the later stages
  int k = 3;           // attack pattern count
  double margin = 0.2; // triplet margin gamma
  double leak = 0.1;
  double eta = 1e-8;   // KL floor
};

// Attack Pattern Discriminator: small CNN -> global average pool -> k-way
// softmax. The final linear layer is zero-initialized, so a fresh model
// emits the uniform distribution for any input.
class Discriminator {
 public:
  Discriminator(ApdConfig cfg, nn::ParamStore& ps, std::string prefix = "apd")
      : cfg_(cfg), ps_(&ps), prefix_(std::move(prefix)) {}

  void init(Rng& rng);
  const ApdConfig& config() const { return cfg_; }

  // img (B,3,H,W) -> per-sample probability rows (B,k).
  ag::Var discriminate(nn::Ctx& ctx, ag::Var img) const;

  // Convenience eval path on plain tensors (no gradient bookkeeping).
  std::vector<std::vector<double>> discriminate_eval(const Tensor& img) const;

 private:
  ApdConfig cfg_;
  nn::ParamStore* ps_;
  std::string prefix_;
};

// Batch-all online triplet loss over JS divergence of APD outputs.
// probs: (B,k) rows from discriminate; labels: attack-type index per row.
// Averages the hinge over every valid (anchor, positive, negative) triple;
// returns a zero constant (and sets *n_triplets = 0) when none exist.
ag::Var triplet_loss_batch_all(ag::Var probs, const std::vector<int>& labels,
                               double margin, double eta = 1e-8,
                               int* n_triplets = nullptr);

}  // namespace carnet::apd
