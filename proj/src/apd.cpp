#include "carnet/apd.hpp"

#include <cmath>
#include <iostream>

namespace carnet::apd {

using ag::Var;

void validate_simplex(const std::vector<double>& p, double tol) {
  double s = 0;
  for (double v : p) {
    if (v < 0) throw NumericError("probability vector has a negative entry");
    s += v;
  }
  if (std::abs(s - 1.0) > tol)
    throw NumericError("probability vector does not sum to 1 (sum=" + std::to_string(s) + ")");
}

double kl_divergence(const std::vector<double>& p1, const std::vector<double>& p2,
                     double eta) {
  if (p1.size() != p2.size()) throw DimensionError("kl_divergence: length mismatch");
  double s = 0;
  for (size_t i = 0; i < p1.size(); ++i)
    s += p1[i] * std::log((p1[i] + eta) / (p2[i] + eta));
  return s;
}

double js_divergence(const std::vector<double>& p1, const std::vector<double>& p2,
                     double eta) {
  if (p1.size() != p2.size()) throw DimensionError("js_divergence: length mismatch");
  std::vector<double> m(p1.size());
  for (size_t i = 0; i < p1.size(); ++i) m[i] = 0.5 * (p1[i] + p2[i]);
  return 0.5 * kl_divergence(p1, m, eta) + 0.5 * kl_divergence(p2, m, eta);
}

Var kl_var(Var p1, Var p2, double eta) {
  Var lr = ag::sub(ag::vlog_shift(p1, eta), ag::vlog_shift(p2, eta));
  return ag::dot(p1, lr);
}

Var js_var(Var p1, Var p2, double eta) {
  Var m = ag::scale(ag::add(p1, p2), 0.5);
  return ag::scale(ag::add(kl_var(p1, m, eta), kl_var(p2, m, eta)), 0.5);
}

namespace {
std::string pn(const std::string& prefix, int stage, const char* part) {
  return prefix + ".s" + std::to_string(stage) + "." + part;
}
}  // namespace

void Discriminator::init(Rng& rng) {
  int cin = 3;
  for (int s = 0; s < cfg_.stages; ++s) {
    int cout = s == 0 ? std::max(4, cfg_.width / 2) : cfg_.width;
    Tensor& w = ps_->create(pn(prefix_, s, "w"), {(int64_t)cout, (int64_t)cin, 3, 3});
    ps_->create(pn(prefix_, s, "b"), {(int64_t)cout});
    nn::init_conv(w, rng);
    if (s == 0) {
      // high-pass bias: adversarial perturbations are dense high-frequency
      // noise while natural content is mostly smooth, so seed the first stage
      // with scaled Laplacians (plus the random part for symmetry breaking)
      static const double lap[9] = {0, -1, 0, -1, 4, -1, 0, -1, 0};
      for (int64_t oc = 0; oc < cout; ++oc)
        for (int64_t ic = 0; ic < cin; ++ic) {
          double g = rng.uniform(1.0, 3.0) * (oc % 2 == 0 ? 1.0 : -1.0);
          double* k = &w.data[(oc * cin + ic) * 9];
          for (int i = 0; i < 9; ++i) k[i] = 0.25 * g * lap[i] + 0.2 * k[i];
        }
    }
    cin = cout;
  }
  // small random head: a fresh model outputs near-uniform pi, but an exactly
  // uniform output is a stationary point of the JS triplet loss and the
  // discriminator would never escape it
  Tensor& hw = ps_->create(prefix_ + ".head.w", {(int64_t)cfg_.k, (int64_t)cin});
  rng.fill_uniform(hw, -0.1, 0.1);
  ps_->create(prefix_ + ".head.b", {(int64_t)cfg_.k});
}

Var Discriminator::discriminate(nn::Ctx& ctx, Var img) const {
  const Tensor& iv = ctx.tape.val(img);
  if (iv.ndim() != 4 || iv.shape[1] != 3)
    throw DimensionError("discriminate expects (B,3,H,W), got " + shape_str(iv.shape));
  Var h = img;
  for (int s = 0; s < cfg_.stages; ++s) {
    h = ag::conv2d(h, ctx.param(pn(prefix_, s, "w")), ctx.param(pn(prefix_, s, "b")),
                   /*stride=*/2, /*pad=*/1);
    h = ag::leaky_relu(h, cfg_.leak);
  }
  Var pooled = ag::global_avg_pool(h);
  Var logits = ag::linear(pooled, ctx.param(prefix_ + ".head.w"), ctx.param(prefix_ + ".head.b"));
  if (!ctx.tape.val(logits).all_finite())
    throw NumericError("non-finite activation in attack pattern discriminator");
  return ag::softmax_rows(logits);
}

std::vector<std::vector<double>> Discriminator::discriminate_eval(const Tensor& img) const {
  nn::Ctx ctx(*ps_, /*train=*/false);
  Var probs = discriminate(ctx, ctx.input(img));
  const Tensor& pv = ctx.tape.val(probs);
  std::vector<std::vector<double>> out(pv.shape[0], std::vector<double>(pv.shape[1]));
  for (int64_t n = 0; n < pv.shape[0]; ++n)
    for (int64_t k = 0; k < pv.shape[1]; ++k) out[n][k] = pv.data[n * pv.shape[1] + k];
  return out;
}

Var triplet_loss_batch_all(Var probs, const std::vector<int>& labels, double margin,
                           double eta, int* n_triplets) {
  ag::Tape& t = *probs.tape;
  const Tensor& pv = t.val(probs);
  if (pv.ndim() != 2 || pv.shape[0] != static_cast<int64_t>(labels.size()))
    throw DimensionError("triplet_loss: probs/labels mismatch");
  int64_t B = pv.shape[0];
  if (margin < 0) throw ConfigError("triplet margin must be nonnegative");

  // cache pairwise JS vars
  std::vector<std::vector<Var>> js(B, std::vector<Var>(B));
  std::vector<std::vector<bool>> have(B, std::vector<bool>(B, false));
  auto pair_js = [&](int64_t i, int64_t j) {
    if (!have[i][j]) {
      js[i][j] = js_var(ag::select_row(probs, i), ag::select_row(probs, j), eta);
      have[i][j] = true;
    }
    return js[i][j];
  };

  std::vector<std::pair<double, Var>> terms;
  int count = 0;
  for (int64_t a = 0; a < B; ++a)
    for (int64_t p = 0; p < B; ++p) {
      if (p == a || labels[p] != labels[a]) continue;
      for (int64_t n = 0; n < B; ++n) {
        if (labels[n] == labels[a]) continue;
        Var hinge = ag::relu(ag::add(ag::sub(pair_js(a, p), pair_js(a, n)),
                                     ag::constant(t, Tensor({1}, {margin}))));
        terms.emplace_back(1.0, hinge);
        ++count;
      }
    }
  if (n_triplets) *n_triplets = count;
  if (count == 0) {
    static bool warned = false;  // expected every step when one label dominates
    if (!warned) {
      std::cerr << "[carnet] warning: no valid triplets in batch, L_APD = 0\n";
      warned = true;
    }
    return ag::constant(t, Tensor({1}, {0.0}));
  }
  return ag::scale(ag::wsum(terms), 1.0 / static_cast<double>(count));
}

}  // namespace carnet::apd
