#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <unordered_map>

#include "carnet/autograd.hpp"
#include "carnet/rng.hpp"
#include "carnet/tensor.hpp"

namespace carnet::nn {

// Named parameter tensors. Single-writer (the trainer); everything else
// reads. Names are dotted paths, e.g. "inn.b2.D1.l0.w".
class ParamStore {
 public:
  Tensor& create(const std::string& name, std::vector<int64_t> shape);
  Tensor& get(const std::string& name);
  const Tensor& get(const std::string& name) const;
  bool has(const std::string& name) const { return params_.count(name) > 0; }

  // All names with the given prefix, in lexicographic (deterministic) order.
  std::vector<std::string> names(const std::string& prefix = "") const;

  // FNV-1a over the raw bytes of every parameter under `prefix`; used by the
  // frozen-model and stage-purity checks.
  uint64_t hash(const std::string& prefix = "") const;

  void save_blob(const std::string& path, const std::string& prefix) const;
  void load_blob(const std::string& path);

  std::map<std::string, Tensor>& raw() { return params_; }

 private:
  std::map<std::string, Tensor> params_;
};

// Per-evaluation graph context: one tape plus lazily created leaves for the
// parameters touched by the models during this evaluation.
struct Ctx {
  ag::Tape tape;
  ParamStore* store = nullptr;
  bool train_params = true;  // parameters enter as differentiable leaves
  // When set, only parameters accepted by the filter get gradients.
  std::function<bool(const std::string&)> trainable_filter;

  explicit Ctx(ParamStore& ps, bool train = true) : store(&ps), train_params(train) {}

  ag::Var param(const std::string& name) {
    auto it = ids_.find(name);
    if (it != ids_.end()) return ag::Var{&tape, it->second};
    bool rg = train_params && (!trainable_filter || trainable_filter(name));
    ag::Var v = tape.leaf(store->get(name), rg);
    ids_.emplace(name, v.id);
    return v;
  }

  ag::Var input(Tensor t, bool requires_grad = false) {
    return tape.leaf(std::move(t), requires_grad);
  }

  // Accumulated parameter gradients, keyed by name (after tape.backward()).
  const std::unordered_map<std::string, int>& param_ids() const { return ids_; }

 private:
  std::unordered_map<std::string, int> ids_;
};

// Kaiming-uniform init for a conv kernel bank of shape (k,Cout,Cin,3,3) or a
// plain kernel (Cout,Cin,3,3); fan_in = Cin*9.
void init_conv(Tensor& w, Rng& rng);
void init_linear(Tensor& w, Rng& rng);

}  // namespace carnet::nn
