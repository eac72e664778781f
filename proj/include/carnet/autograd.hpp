#pragma once

#include <deque>
#include <functional>
#include <utility>
#include <vector>

#include "carnet/tensor.hpp"

namespace carnet::ag {

class Tape;

// Handle to a node on a tape. Cheap to copy; valid for the tape's lifetime.
struct Var {
  Tape* tape = nullptr;
  int id = -1;
  bool valid() const { return tape != nullptr && id >= 0; }
};

// Reverse-mode autodiff tape. Nodes are created in topological order by the
// op builders below; backward() walks them in reverse. One tape per
// forward/backward evaluation; parameters enter as leaves.
class Tape {
 public:
  Var leaf(Tensor value, bool requires_grad);

  const Tensor& val(Var v) const { return nodes_[v.id].val; }
  Tensor& val(Var v) { return nodes_[v.id].val; }
  const Tensor& grad(Var v) const { return nodes_[v.id].grad; }
  Tensor& grad(Var v) { return nodes_[v.id].grad; }
  bool requires_grad(Var v) const { return nodes_[v.id].rg; }

  // Seeds d(root)/d(root) = 1 (root must be scalar) and accumulates into
  // every reachable node's grad.
  void backward(Var root);

  size_t size() const { return nodes_.size(); }

  // Internal: used by op builders.
  Var make(Tensor value, bool rg, std::function<void(Tape&, int)> back);
  Tensor& grad_at(int id) { return nodes_[id].grad; }
  const Tensor& val_at(int id) const { return nodes_[id].val; }
  bool rg_at(int id) const { return nodes_[id].rg; }

 private:
  struct Node {
    Tensor val;
    Tensor grad;
    bool rg = false;
    std::function<void(Tape&, int)> back;  // adds this node's grad into parents
  };
  // deque: references returned by val()/grad() stay valid as nodes are added
  std::deque<Node> nodes_;
};

// ---- elementwise ----
Var constant(Tape& t, Tensor v);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double c);
Var vexp(Var a);
Var vtanh(Var a);
Var vlog_shift(Var a, double eta);  // ln(a + eta)
Var leaky_relu(Var a, double slope);
inline Var relu(Var a) { return leaky_relu(a, 0.0); }

// ---- structure ----
Var slice_ch(Var x, int64_t c0, int64_t c1);        // (N,C,H,W) channel range [c0,c1)
Var concat_ch(Var a, Var b);                        // along channel dim
Var select_sample(Var x, int64_t i);                // (N,...) -> (1,...)
Var concat_samples(const std::vector<Var>& xs);     // inverse of select_sample
Var select_row(Var x, int64_t i);                   // (N,K) -> (K)
Var stack_rows(const std::vector<Var>& rows);       // (K) list -> (N,K)

// ---- reductions / losses ----
Var sum(Var a);                       // -> scalar shape (1)
Var mean(Var a);                      // -> scalar
Var l1_mean(Var a, Var b);            // mean |a-b|, subgradient sign(0)=0
Var wsum(const std::vector<std::pair<double, Var>>& terms);  // weighted scalar sum
Var dot(Var a, Var b);                // -> scalar

// ---- nn ----
// 3x3 convolution, zero padding `pad`, stride `stride`. x is (N,Cin,H,W),
// w is (Cout,Cin,3,3), b is (Cout).
Var conv2d(Var x, Var w, Var b, int stride, int pad);
Var linear(Var x, Var w, Var b);      // x (N,Cin), w (Cout,Cin), b (Cout)
Var global_avg_pool(Var x);           // (N,C,H,W) -> (N,C)
Var softmax_rows(Var x);              // (N,K) rowwise softmax
// Convex mix over the leading axis: bank (K, rest...), pi (K) -> (rest...).
Var kernel_mix(Var bank, Var pi);
// Sum_i weight[i] * CE(logits[i], label[i]) over rows of (N,C) logits.
Var softmax_xent(Var logits, const std::vector<int>& labels,
                 const std::vector<double>& weights);
// Sum_i weight[i] * smooth_l1(pred[i] - target[i]) over rows of (N,D).
Var smooth_l1(Var pred, const Tensor& target, const std::vector<double>& weights);

// ---- fixed linear image ops ----
// Single-level Haar squeeze with averaging normalization: channel layout
// [LL_r,LL_g,LL_b, LH_rgb, HL_rgb, HH_rgb], LL = per-2x2-block mean.
Var haar_squeeze(Var x);      // (N,C,H,W) -> (N,4C,H/2,W/2)
Var haar_unsqueeze(Var x);    // exact inverse
Tensor haar_squeeze_t(const Tensor& x);
Tensor haar_unsqueeze_t(const Tensor& x);

}  // namespace carnet::ag
