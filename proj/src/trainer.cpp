#include "carnet/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace carnet::train {

namespace {

std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void reject_unknown(const json& j, const std::vector<std::string>& allowed,
                    const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::find(allowed.begin(), allowed.end(), it.key()) == allowed.end())
      throw ConfigError("unknown config key: " + where + it.key());
  }
}

template <typename T>
void read_field(const json& j, const std::string& key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("bad value type for config field: " + where + key);
  }
}

void read_budget(const json& j, const std::string& key, attack::Budget& b,
                 const std::string& where) {
  if (!j.contains(key)) return;
  const json& sub = j.at(key);
  if (!sub.is_object()) throw ConfigError("bad value type for config field: " + where + key);
  std::string w = where + key + ".";
  reject_unknown(sub, {"eps", "alpha", "steps"}, w);
  read_field(sub, "eps", b.eps, w);
  read_field(sub, "alpha", b.alpha, w);
  read_field(sub, "steps", b.steps, w);
}

json budget_json(const attack::Budget& b) {
  return json{{"eps", b.eps}, {"alpha", b.alpha}, {"steps", b.steps}};
}

// Serialize/restore the momentum buffers through a scratch ParamStore so the
// on-disk format matches the weights blobs.
void save_tensor_map(const std::string& path, const std::map<std::string, Tensor>& m) {
  nn::ParamStore ps;
  ps.raw() = m;
  ps.save_blob(path, "");
}

std::map<std::string, Tensor> load_tensor_map(const std::string& path) {
  nn::ParamStore ps;
  ps.load_blob(path);
  return ps.raw();
}

void atomic_rename(const std::string& tmp, const std::string& final_path) {
  std::error_code ec;
  fs::rename(tmp, final_path, ec);
  if (ec) throw ConfigError("cannot finalize checkpoint file: " + final_path);
}

}  // namespace

void TrainConfig::validate() const {
  if (image_size < 8 || image_size % 4 != 0)
    throw ConfigError("image_size must be a multiple of 4 and >= 8");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(lr > 0)) throw ConfigError("lr must be > 0");
  if (momentum < 0 || momentum >= 1) throw ConfigError("momentum must be in [0,1)");
  for (double l : lambda)
    if (!(l >= 0)) throw ConfigError("loss weights must be >= 0");
  if (iters.pretrain_enhance < 0 || iters.pretrain_detect < 0 || iters.joint < 0)
    throw ConfigError("stage iteration counts must be >= 0");
  int mix_sum = 0;
  for (int m : attack_mix) {
    if (m < 0) throw ConfigError("attack_mix entries must be >= 0");
    mix_sum += m;
  }
  if (mix_sum == 0) throw ConfigError("attack_mix must include at least one copy");
  vision_budget.validate();
  perception_budget.validate();
  if (enhancer.kernels != apd.k)
    throw ConfigError("enhancer.kernels must equal apd.k (one kernel per attack pattern)");
  if (n_train < 1 || n_test < 0) throw ConfigError("dataset split sizes invalid");
  if (checkpoint_every < 1) throw ConfigError("checkpoint_every must be >= 1");
}

TrainConfig config_from_json(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config root must be a JSON object");
  TrainConfig cfg;
  reject_unknown(j,
                 {"seed", "image_size", "batch_size", "lr", "momentum", "lambda", "stages",
                  "attack_mix", "vision_budget", "perception_budget", "perception_kind",
                  "enhancer", "apd", "detector", "data_dir", "n_train", "n_test",
                  "checkpoint_every", "allow_stage_skip", "identity_init"},
                 "");
  read_field(j, "seed", cfg.seed, "");
  read_field(j, "image_size", cfg.image_size, "");
  read_field(j, "batch_size", cfg.batch_size, "");
  read_field(j, "lr", cfg.lr, "");
  read_field(j, "momentum", cfg.momentum, "");
  read_field(j, "lambda", cfg.lambda, "");
  if (j.contains("stages")) {
    const json& s = j.at("stages");
    if (!s.is_object()) throw ConfigError("bad value type for config field: stages");
    reject_unknown(s, {"pretrain_enhance", "pretrain_detect", "joint"}, "stages.");
    read_field(s, "pretrain_enhance", cfg.iters.pretrain_enhance, "stages.");
    read_field(s, "pretrain_detect", cfg.iters.pretrain_detect, "stages.");
    read_field(s, "joint", cfg.iters.joint, "stages.");
  }
  read_field(j, "attack_mix", cfg.attack_mix, "");
  read_budget(j, "vision_budget", cfg.vision_budget, "");
  read_budget(j, "perception_budget", cfg.perception_budget, "");
  if (j.contains("perception_kind")) {
    std::string k;
    read_field(j, "perception_kind", k, "");
    cfg.perception_kind = attack::objective_kind_from_string(k);
  }
  if (j.contains("enhancer")) {
    const json& e = j.at("enhancer");
    if (!e.is_object()) throw ConfigError("bad value type for config field: enhancer");
    reject_unknown(e, {"blocks", "dcl_per_subnet", "hidden", "kernels", "s_max", "leak"},
                   "enhancer.");
    read_field(e, "blocks", cfg.enhancer.blocks, "enhancer.");
    read_field(e, "dcl_per_subnet", cfg.enhancer.dcl_per_subnet, "enhancer.");
    read_field(e, "hidden", cfg.enhancer.hidden, "enhancer.");
    read_field(e, "kernels", cfg.enhancer.kernels, "enhancer.");
    read_field(e, "s_max", cfg.enhancer.s_max, "enhancer.");
    read_field(e, "leak", cfg.enhancer.leak, "enhancer.");
  }
  if (j.contains("apd")) {
    const json& a = j.at("apd");
    if (!a.is_object()) throw ConfigError("bad value type for config field: apd");
    reject_unknown(a, {"stages", "width", "k", "margin", "leak", "eta"}, "apd.");
    read_field(a, "stages", cfg.apd.stages, "apd.");
    read_field(a, "width", cfg.apd.width, "apd.");
    read_field(a, "k", cfg.apd.k, "apd.");
    read_field(a, "margin", cfg.apd.margin, "apd.");
    read_field(a, "leak", cfg.apd.leak, "apd.");
    read_field(a, "eta", cfg.apd.eta, "apd.");
  }
  if (j.contains("detector")) {
    const json& d = j.at("detector");
    if (!d.is_object()) throw ConfigError("bad value type for config field: detector");
    reject_unknown(d,
                   {"num_classes", "width", "anchor_sizes", "match_iou", "nms_iou",
                    "score_thresh", "neg_ratio", "leak"},
                   "detector.");
    read_field(d, "num_classes", cfg.detector.num_classes, "detector.");
    read_field(d, "width", cfg.detector.width, "detector.");
    read_field(d, "anchor_sizes", cfg.detector.anchors.sizes, "detector.");
    read_field(d, "match_iou", cfg.detector.match_iou, "detector.");
    read_field(d, "nms_iou", cfg.detector.nms_iou, "detector.");
    read_field(d, "score_thresh", cfg.detector.score_thresh, "detector.");
    read_field(d, "neg_ratio", cfg.detector.neg_ratio, "detector.");
    read_field(d, "leak", cfg.detector.leak, "detector.");
  }
  read_field(j, "data_dir", cfg.data_dir, "");
  read_field(j, "n_train", cfg.n_train, "");
  read_field(j, "n_test", cfg.n_test, "");
  read_field(j, "checkpoint_every", cfg.checkpoint_every, "");
  read_field(j, "allow_stage_skip", cfg.allow_stage_skip, "");
  read_field(j, "identity_init", cfg.identity_init, "");
  cfg.detector.anchors.grid = cfg.image_size / 4;
  cfg.validate();
  return cfg;
}

std::string config_to_json(const TrainConfig& cfg) {
  json j{
      {"seed", cfg.seed},
      {"image_size", cfg.image_size},
      {"batch_size", cfg.batch_size},
      {"lr", cfg.lr},
      {"momentum", cfg.momentum},
      {"lambda", cfg.lambda},
      {"stages",
       {{"pretrain_enhance", cfg.iters.pretrain_enhance},
        {"pretrain_detect", cfg.iters.pretrain_detect},
        {"joint", cfg.iters.joint}}},
      {"attack_mix", cfg.attack_mix},
      {"vision_budget", budget_json(cfg.vision_budget)},
      {"perception_budget", budget_json(cfg.perception_budget)},
      {"perception_kind", attack::to_string(cfg.perception_kind)},
      {"enhancer",
       {{"blocks", cfg.enhancer.blocks},
        {"dcl_per_subnet", cfg.enhancer.dcl_per_subnet},
        {"hidden", cfg.enhancer.hidden},
        {"kernels", cfg.enhancer.kernels},
        {"s_max", cfg.enhancer.s_max},
        {"leak", cfg.enhancer.leak}}},
      {"apd",
       {{"stages", cfg.apd.stages},
        {"width", cfg.apd.width},
        {"k", cfg.apd.k},
        {"margin", cfg.apd.margin},
        {"leak", cfg.apd.leak},
        {"eta", cfg.apd.eta}}},
      {"detector",
       {{"num_classes", cfg.detector.num_classes},
        {"width", cfg.detector.width},
        {"anchor_sizes", cfg.detector.anchors.sizes},
        {"match_iou", cfg.detector.match_iou},
        {"nms_iou", cfg.detector.nms_iou},
        {"score_thresh", cfg.detector.score_thresh},
        {"neg_ratio", cfg.detector.neg_ratio},
        {"leak", cfg.detector.leak}}},
      {"data_dir", cfg.data_dir},
      {"n_train", cfg.n_train},
      {"n_test", cfg.n_test},
      {"checkpoint_every", cfg.checkpoint_every},
      {"allow_stage_skip", cfg.allow_stage_skip},
      {"identity_init", cfg.identity_init},
  };
  return j.dump(2) + "\n";
}

Trainer::Trainer(TrainConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.detector.anchors.grid = cfg_.image_size / 4;
  cfg_.validate();
  enh_ = std::make_unique<inn::Enhancer>(cfg_.enhancer, state_.params, "inn");
  apd_ = std::make_unique<apd::Discriminator>(cfg_.apd, state_.params, "apd");
  det_ = std::make_unique<det::Detector>(cfg_.detector, state_.params, "det");
  anchors_ = det::make_anchors(cfg_.detector.anchors);
}

void Trainer::initialize() {
  Rng master(cfg_.seed);
  Rng init_rng = master.child(1);
  state_.data_rng = master.child(2);
  state_.attack_rng = master.child(3);
  state_.latent_rng = master.child(4);
  enh_->init(init_rng, cfg_.identity_init);
  apd_->init(init_rng);
  det_->init(init_rng);
  state_.iteration = 0;
  state_.stage_done = {false, false, false};
  load_data();
}

void Trainer::load_data() {
  std::vector<data::PairedSample> all;
  if (cfg_.data_dir.empty()) {
    data::SynthConfig sc;
    sc.n = cfg_.n_train + cfg_.n_test;
    sc.size = cfg_.image_size;
    sc.seed = cfg_.seed;
    sc.num_classes = cfg_.detector.num_classes;
    all = data::make_synthetic_dataset(sc);
    class_names_ = data::synthetic_class_names();
  } else {
    all = data::load_dataset(cfg_.data_dir, &class_names_);
  }
  if (static_cast<int>(all.size()) < cfg_.n_train + cfg_.n_test)
    throw ConfigError("dataset smaller than n_train + n_test");
  train_.assign(all.begin(), all.begin() + cfg_.n_train);
  test_.assign(all.begin() + cfg_.n_train, all.begin() + cfg_.n_train + cfg_.n_test);
  assign_cache_.clear();
}

std::vector<int> Trainer::next_batch() {
  std::vector<int> idx(static_cast<size_t>(cfg_.batch_size));
  for (int& i : idx)
    i = static_cast<int>(state_.data_rng.uniform_int(0, cfg_.n_train - 1));
  return idx;
}

det::Assignment Trainer::assignment_for(int src_index) const {
  auto it = assign_cache_.find(src_index);
  if (it != assign_cache_.end()) return it->second;
  det::Assignment a =
      det::match_anchors(anchors_, train_[static_cast<size_t>(src_index)].truth,
                         cfg_.detector.match_iou);
  assign_cache_.emplace(src_index, a);
  return a;
}

attack::Objective Trainer::build_objective(const data::PairedSample& s,
                                           attack::ObjectiveKind kind, Tensor vhf) const {
  if (kind == attack::ObjectiveKind::vision_contrastive) {
    Tensor x = s.x, z = s.z;
    const inn::Enhancer* enh = enh_.get();
    const apd::Discriminator* dis = apd_.get();
    return [enh, dis, x, z, vhf](nn::Ctx& ctx, ag::Var y) {
      ag::Var pi = dis->discriminate(ctx, y);
      auto [x_lr, x_hf] = enh->decompose(ctx, y, pi);
      ag::Var u = enh->reconstruct(ctx, x_lr, ctx.input(vhf), pi);
      return attack::metric_contrastive(ctx, u, x, z);
    };
  }
  det::Assignment assign = det::match_anchors(anchors_, s.truth, cfg_.detector.match_iou);
  det::DetectionSet truth = s.truth;
  const inn::Enhancer* enh = enh_.get();
  const apd::Discriminator* dis = apd_.get();
  const det::Detector* dtr = det_.get();
  const std::vector<det::Box>* anch = &anchors_;
  det::DetectorConfig dcfg = cfg_.detector;
  return [enh, dis, dtr, anch, dcfg, assign, truth, kind, vhf](nn::Ctx& ctx, ag::Var y) {
    ag::Var pi = dis->discriminate(ctx, y);
    auto [x_lr, x_hf] = enh->decompose(ctx, y, pi);
    ag::Var u = enh->reconstruct(ctx, x_lr, ctx.input(vhf), pi);
    auto [cls, loc] = dtr->forward(ctx, u);
    det::DetLossParts parts = det::detection_loss(ctx, cls, loc, *anch, assign, truth, dcfg);
    switch (kind) {
      case attack::ObjectiveKind::det_cls: return parts.cls;
      case attack::ObjectiveKind::det_loc: return parts.loc;
      default: return parts.total;
    }
  };
}

Tensor Trainer::zero_latent(const Tensor& x) const {
  return inn::zero_vhf(x.shape[0], x.shape[2] / 2, x.shape[3] / 2);
}

attack::Objective Trainer::vision_objective(const data::PairedSample& s) const {
  return build_objective(s, attack::ObjectiveKind::vision_contrastive, zero_latent(s.x));
}

attack::Objective Trainer::perception_objective(const data::PairedSample& s,
                                                attack::ObjectiveKind kind) const {
  return build_objective(s, kind, zero_latent(s.x));
}

attack::Objective Trainer::attack_objective(const data::PairedSample& s,
                                            attack::ObjectiveKind kind,
                                            uint64_t seed) const {
  // the attack differentiates through the full reconstruct path with the
  // latent noise fixed for the whole attack, derived from the attack seed
  Rng vr(seed ^ 0xC2B2AE3D27D4EB4Full);
  Tensor vhf = inn::sample_vhf(s.x.shape[0], s.x.shape[2] / 2, s.x.shape[3] / 2, vr);
  return build_objective(s, kind, std::move(vhf));
}

Tensor Trainer::attack_sample(const data::PairedSample& s, attack::ObjectiveKind kind,
                              const attack::Budget& budget, uint64_t seed) {
  attack::Objective obj = attack_objective(s, kind, seed);
  Tensor delta = attack::pgd_attack(s.x, obj, budget, state_.params, seed);
  Tensor y = s.x;
  for (int64_t i = 0; i < y.numel(); ++i) y.data[i] += delta.data[i];
  return y;
}

std::vector<AttackedSample> Trainer::lower_level_step(const std::vector<int>& batch) {
  std::vector<AttackedSample> out;
  for (int idx : batch) {
    const data::PairedSample& s = train_[static_cast<size_t>(idx)];
    for (int c = 0; c < cfg_.attack_mix[0]; ++c) out.push_back({idx, s.x, 0});
    for (int c = 0; c < cfg_.attack_mix[1]; ++c) {
      uint64_t seed = state_.attack_rng.next_u64();
      out.push_back({idx,
                     attack_sample(s, attack::ObjectiveKind::vision_contrastive,
                                   cfg_.vision_budget, seed),
                     1});
    }
    for (int c = 0; c < cfg_.attack_mix[2]; ++c) {
      uint64_t seed = state_.attack_rng.next_u64();
      out.push_back({idx, attack_sample(s, cfg_.perception_kind, cfg_.perception_budget, seed),
                     2});
    }
  }
  return out;
}

ag::Var Trainer::framework_loss(nn::Ctx& ctx, const std::vector<AttackedSample>& batch,
                                LossParts* parts, bool with_det, bool with_apd,
                                bool weighted) {
  int64_t b = static_cast<int64_t>(batch.size());
  int64_t hs = cfg_.image_size / 2;
  Tensor y_all({b, 3, cfg_.image_size, cfg_.image_size});
  Tensor z_all({b, 3, cfg_.image_size, cfg_.image_size});
  std::vector<int> labels;
  for (int64_t i = 0; i < b; ++i) {
    const AttackedSample& a = batch[static_cast<size_t>(i)];
    const data::PairedSample& s = train_[static_cast<size_t>(a.src_index)];
    std::copy(a.y.data.begin(), a.y.data.end(), y_all.data.begin() + i * a.y.numel());
    std::copy(s.z.data.begin(), s.z.data.end(), z_all.data.begin() + i * s.z.numel());
    labels.push_back(a.label);
  }
  ag::Var y = ctx.input(y_all);
  ag::Var pi = apd_->discriminate(ctx, y);
  // the enhancer conditions on a detached copy: the reconstruction losses are
  // orders of magnitude stronger than the triplet term and would otherwise
  // repurpose the discriminator as a content-feature extractor
  ag::Var pi_c = ag::constant(ctx.tape, ctx.tape.val(pi));
  auto [x_lr, x_hf] = enh_->decompose(ctx, y, pi_c);
  ag::Var l_forw = inn::loss_forward(ctx, x_lr, z_all);

  Tensor vhf({b, 9, hs, hs});
  state_.latent_rng.fill_normal(vhf);
  ag::Var u = enh_->reconstruct(ctx, x_lr, ctx.input(vhf), pi_c);
  ag::Var l_back = inn::loss_backward(ctx, u, z_all);

  std::vector<std::pair<double, ag::Var>> terms;
  terms.emplace_back(weighted ? cfg_.lambda[0] : 1.0, l_forw);
  terms.emplace_back(weighted ? cfg_.lambda[1] : 1.0, l_back);

  parts->forw = ctx.tape.val(l_forw).data[0];
  parts->back = ctx.tape.val(l_back).data[0];
  parts->det = 0;
  parts->apd = 0;

  if (with_det) {
    std::vector<std::pair<double, ag::Var>> per_img;
    for (int64_t i = 0; i < b; ++i) {
      const AttackedSample& a = batch[static_cast<size_t>(i)];
      auto [cls, loc] = det_->forward(ctx, ag::select_sample(u, i));
      det::DetLossParts dp =
          det::detection_loss(ctx, cls, loc, anchors_, assignment_for(a.src_index),
                              train_[static_cast<size_t>(a.src_index)].truth, cfg_.detector);
      per_img.emplace_back(1.0 / static_cast<double>(b), dp.total);
    }
    ag::Var l_det = ag::wsum(per_img);
    parts->det = ctx.tape.val(l_det).data[0];
    terms.emplace_back(cfg_.lambda[2], l_det);
  }
  if (with_apd) {
    ag::Var l_apd = apd::triplet_loss_batch_all(pi, labels, cfg_.apd.margin, cfg_.apd.eta);
    parts->apd = ctx.tape.val(l_apd).data[0];
    terms.emplace_back(cfg_.lambda[3], l_apd);
  }
  ag::Var total = ag::wsum(terms);
  parts->total = ctx.tape.val(total).data[0];
  if (!std::isfinite(parts->forw) || !std::isfinite(parts->back) ||
      !std::isfinite(parts->det) || !std::isfinite(parts->apd)) {
    std::string ids;
    for (const AttackedSample& a : batch) ids += std::to_string(a.src_index) + " ";
    throw NumericError("non-finite loss component; step aborted; batch ids: " + ids);
  }
  return total;
}

void Trainer::sgd_step(nn::Ctx& ctx) {
  std::vector<std::pair<std::string, int>> named(ctx.param_ids().begin(),
                                                 ctx.param_ids().end());
  std::sort(named.begin(), named.end());
  for (auto& [name, id] : named) {
    ag::Var v{&ctx.tape, id};
    if (!ctx.tape.requires_grad(v)) continue;
    const Tensor& g = ctx.tape.grad(v);
    Tensor& p = state_.params.get(name);
    if (g.numel() != p.numel()) continue;  // never reached by backward()
    if (!g.all_finite()) throw NumericError("non-finite gradient for " + name);
    if (cfg_.momentum > 0) {
      auto it = state_.velocity.find(name);
      if (it == state_.velocity.end())
        it = state_.velocity.emplace(name, Tensor(p.shape)).first;
      Tensor& vel = it->second;
      for (int64_t i = 0; i < p.numel(); ++i) {
        vel.data[i] = cfg_.momentum * vel.data[i] + g.data[i];
        p.data[i] -= cfg_.lr * vel.data[i];
      }
    } else {
      for (int64_t i = 0; i < p.numel(); ++i) p.data[i] -= cfg_.lr * g.data[i];
    }
  }
}

LossParts Trainer::upper_level_step(const std::vector<AttackedSample>& batch) {
  nn::Ctx ctx(state_.params, true);
  LossParts parts;
  ag::Var total = framework_loss(ctx, batch, &parts, true, true);
  ctx.tape.backward(total);
  sgd_step(ctx);
  ++state_.iteration;
  return parts;
}

LossParts Trainer::pretrain_enhance_step(const std::vector<int>& batch) {
  nn::Ctx ctx(state_.params, true);
  ctx.trainable_filter = [](const std::string& n) { return n.rfind("inn.", 0) == 0; };
  std::vector<AttackedSample> clean;
  for (int i : batch) clean.push_back({i, train_[static_cast<size_t>(i)].x, 0});
  LossParts parts;
  // pretraining optimizes the plain bilateral sum; the lambda weights apply
  // to the joint objective only
  ag::Var total = framework_loss(ctx, clean, &parts, false, false, /*weighted=*/false);
  ctx.tape.backward(total);
  sgd_step(ctx);
  ++state_.iteration;
  return parts;
}

LossParts Trainer::pretrain_detect_step(const std::vector<int>& batch) {
  nn::Ctx ctx(state_.params, true);
  ctx.trainable_filter = [](const std::string& n) { return n.rfind("det.", 0) == 0; };
  std::vector<AttackedSample> clean;
  for (int i : batch) clean.push_back({i, train_[static_cast<size_t>(i)].x, 0});
  LossParts parts;
  // Bilateral terms still evaluated (they are logged) but carry no gradient
  // into the detector; the backward pass only updates det.* parameters.
  ag::Var total = framework_loss(ctx, clean, &parts, true, false);
  ctx.tape.backward(total);
  sgd_step(ctx);
  ++state_.iteration;
  return parts;
}

void Trainer::run_stage(int stage, const std::string& ckpt_dir, const std::string& log_path,
                        const std::string& timing_path, int64_t max_iters) {
  if (stage < 0 || stage > 2) throw ConfigError("unknown training stage");
  if (!cfg_.allow_stage_skip) {
    if (stage == 1 && !state_.stage_done[0])
      throw ConfigError("stage pretrain_detect requires pretrain_enhance first");
    if (stage == 2 && (!state_.stage_done[0] || !state_.stage_done[1]))
      throw ConfigError("stage joint requires both pretrain stages first");
  }
  int64_t iters = stage == 0   ? cfg_.iters.pretrain_enhance
                  : stage == 1 ? cfg_.iters.pretrain_detect
                               : cfg_.iters.joint;
  if (max_iters >= 0) iters = max_iters;

  std::ofstream log, timing;
  if (!log_path.empty()) {
    bool fresh = !fs::exists(log_path) || fs::file_size(log_path) == 0;
    log.open(log_path, std::ios::app);
    if (!log) throw ConfigError("cannot open log file: " + log_path);
    if (fresh) log << "iteration,L_forw,L_back,L_det,L_APD,L_train\n";
  }
  if (!timing_path.empty()) {
    bool fresh = !fs::exists(timing_path) || fs::file_size(timing_path) == 0;
    timing.open(timing_path, std::ios::app);
    if (fresh) timing << "iteration,wall_ms\n";
  }

  for (int64_t it = 0; it < iters; ++it) {
    auto t0 = std::chrono::steady_clock::now();
    std::vector<int> batch = next_batch();
    LossParts parts;
    try {
      if (stage == 0) {
        parts = pretrain_enhance_step(batch);
      } else if (stage == 1) {
        parts = pretrain_detect_step(batch);
      } else {
        parts = upper_level_step(lower_level_step(batch));
      }
    } catch (const NumericError& e) {
      throw NumericError(std::string(e.what()) + " (iteration " +
                         std::to_string(state_.iteration + 1) + ")");
    }
    if (log.is_open()) {
      log << state_.iteration << ',' << fmt17(parts.forw) << ',' << fmt17(parts.back) << ','
          << fmt17(parts.det) << ',' << fmt17(parts.apd) << ',' << fmt17(parts.total) << '\n';
    }
    if (timing.is_open()) {
      double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() -
                                                            t0)
                      .count();
      timing << state_.iteration << ',' << fmt17(ms) << '\n';
    }
    if (!ckpt_dir.empty() && state_.iteration % cfg_.checkpoint_every == 0)
      save_checkpoint(ckpt_dir);
  }
  state_.stage_done[static_cast<size_t>(stage)] = true;
  if (!ckpt_dir.empty()) save_checkpoint(ckpt_dir);
}

void Trainer::save_checkpoint(const std::string& dir) const {
  fs::create_directories(dir);
  auto write_blob = [&](const std::string& name, const std::string& prefix) {
    std::string tmp = dir + "/" + name + ".tmp";
    state_.params.save_blob(tmp, prefix);
    atomic_rename(tmp, dir + "/" + name);
  };
  write_blob("inn.bin", "inn.");
  write_blob("apd.bin", "apd.");
  write_blob("det.bin", "det.");
  {
    std::string tmp = dir + "/opt.bin.tmp";
    save_tensor_map(tmp, state_.velocity);
    atomic_rename(tmp, dir + "/opt.bin");
  }
  json m{
      {"format", "carnet-ckpt-1"},
      {"iteration", state_.iteration},
      {"stage_done",
       {{"pretrain_enhance", state_.stage_done[0]},
        {"pretrain_detect", state_.stage_done[1]},
        {"joint", state_.stage_done[2]}}},
      {"seed", cfg_.seed},
      {"arch",
       {{"image_size", cfg_.image_size},
        {"blocks", cfg_.enhancer.blocks},
        {"dcl_per_subnet", cfg_.enhancer.dcl_per_subnet},
        {"hidden", cfg_.enhancer.hidden},
        {"kernels", cfg_.enhancer.kernels},
        {"s_max", cfg_.enhancer.s_max},
        {"apd_stages", cfg_.apd.stages},
        {"apd_width", cfg_.apd.width},
        {"k", cfg_.apd.k},
        {"det_width", cfg_.detector.width},
        {"num_classes", cfg_.detector.num_classes},
        {"anchor_sizes", cfg_.detector.anchors.sizes},
        {"grid", cfg_.detector.anchors.grid}}},
      {"attack_labels", {"clean", "vision", "perception"}},
      {"classes", class_names_},
      {"rng",
       {{"data", state_.data_rng.serialize()},
        {"attack", state_.attack_rng.serialize()},
        {"latent", state_.latent_rng.serialize()}}},
      {"modules",
       {{"inn", "inn.bin"}, {"apd", "apd.bin"}, {"det", "det.bin"}, {"opt", "opt.bin"}}},
  };
  std::string tmp = dir + "/config.json.tmp";
  {
    std::ofstream f(tmp);
    if (!f) throw ConfigError("cannot write checkpoint config: " + dir);
    f << config_to_json(cfg_);
  }
  atomic_rename(tmp, dir + "/config.json");
  tmp = dir + "/manifest.json.tmp";
  {
    std::ofstream f(tmp);
    if (!f) throw ConfigError("cannot write checkpoint manifest: " + dir);
    f << m.dump(2) << "\n";
  }
  atomic_rename(tmp, dir + "/manifest.json");
}

std::unique_ptr<Trainer> Trainer::from_checkpoint(const std::string& dir) {
  std::ifstream f(dir + "/config.json");
  if (!f) throw ConfigError("checkpoint has no embedded config: " + dir);
  std::string text((std::istreambuf_iterator<char>(f)), {});
  auto tr = std::make_unique<Trainer>(config_from_json(text));
  tr->load_checkpoint(dir);
  return tr;
}

void Trainer::load_checkpoint(const std::string& dir) {
  std::ifstream f(dir + "/manifest.json");
  if (!f) throw ConfigError("checkpoint manifest not found in: " + dir);
  json m;
  try {
    f >> m;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad checkpoint manifest: ") + e.what());
  }
  if (m.value("format", "") != std::string("carnet-ckpt-1"))
    throw ConfigError("unsupported checkpoint format in: " + dir);
  const json& a = m.at("arch");
  auto mismatch = [&](const char* what) {
    throw ConfigError(std::string("checkpoint architecture mismatch: ") + what);
  };
  if (a.at("image_size").get<int>() != cfg_.image_size) mismatch("image_size");
  if (a.at("blocks").get<int>() != cfg_.enhancer.blocks) mismatch("blocks");
  if (a.at("dcl_per_subnet").get<int>() != cfg_.enhancer.dcl_per_subnet)
    mismatch("dcl_per_subnet");
  if (a.at("hidden").get<int>() != cfg_.enhancer.hidden) mismatch("hidden");
  if (a.at("kernels").get<int>() != cfg_.enhancer.kernels) mismatch("kernels");
  if (a.at("apd_stages").get<int>() != cfg_.apd.stages) mismatch("apd_stages");
  if (a.at("apd_width").get<int>() != cfg_.apd.width) mismatch("apd_width");
  if (a.at("det_width").get<int>() != cfg_.detector.width) mismatch("det_width");
  if (a.at("num_classes").get<int>() != cfg_.detector.num_classes) mismatch("num_classes");

  const json& mods = m.at("modules");
  state_.params.load_blob(dir + "/" + mods.at("inn").get<std::string>());
  state_.params.load_blob(dir + "/" + mods.at("apd").get<std::string>());
  state_.params.load_blob(dir + "/" + mods.at("det").get<std::string>());
  state_.velocity = load_tensor_map(dir + "/" + mods.at("opt").get<std::string>());
  state_.iteration = m.at("iteration").get<int64_t>();
  const json& sd = m.at("stage_done");
  state_.stage_done = {sd.at("pretrain_enhance").get<bool>(),
                       sd.at("pretrain_detect").get<bool>(), sd.at("joint").get<bool>()};
  const json& r = m.at("rng");
  state_.data_rng.deserialize(r.at("data").get<std::string>());
  state_.attack_rng.deserialize(r.at("attack").get<std::string>());
  state_.latent_rng.deserialize(r.at("latent").get<std::string>());
  if (class_names_.empty() && m.contains("classes"))
    class_names_ = m.at("classes").get<std::vector<std::string>>();
}

Tensor Trainer::enhance_eval(const Tensor& x) {
  inn::validate_image(x);
  nn::Ctx ctx(state_.params, false);
  ag::Var y = ctx.input(x);
  ag::Var pi = apd_->discriminate(ctx, y);
  auto [x_lr, x_hf] = enh_->decompose(ctx, y, pi);
  const Tensor& lrv = ctx.tape.val(x_lr);
  ag::Var vhf = ctx.input(inn::zero_vhf(lrv.shape[0], lrv.shape[2], lrv.shape[3]));
  ag::Var u = enh_->reconstruct(ctx, x_lr, vhf, pi);
  return inn::clamp01(ctx.tape.val(u));
}

det::DetectionSet Trainer::detect_eval(const Tensor& x) {
  Tensor u = enhance_eval(x);
  nn::Ctx ctx(state_.params, false);
  auto [cls, loc] = det_->forward(ctx, ctx.input(u));
  return det::decode_and_nms(ctx.tape.val(cls), ctx.tape.val(loc), anchors_, cfg_.detector);
}

std::vector<std::vector<double>> Trainer::apd_eval(const Tensor& x) const {
  return apd_->discriminate_eval(x);
}

double mean_l1_gap(const std::vector<Tensor>& a, const std::vector<Tensor>& b) {
  if (a.size() != b.size() || a.empty())
    throw DimensionError("mean_l1_gap: list size mismatch");
  double acc = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    if (!a[i].same_shape(b[i])) throw DimensionError("mean_l1_gap: shape mismatch");
    double s = 0;
    for (int64_t j = 0; j < a[i].numel(); ++j) s += std::abs(a[i].data[j] - b[i].data[j]);
    acc += s / static_cast<double>(a[i].numel());
  }
  return acc / static_cast<double>(a.size());
}

}  // namespace carnet::train
