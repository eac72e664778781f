#pragma once

#include <array>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "carnet/apd.hpp"
#include "carnet/attacks.hpp"
#include "carnet/data.hpp"
#include "carnet/detector.hpp"
#include "carnet/inn.hpp"
#include "carnet/nn.hpp"

namespace carnet::train {

struct StageIters {
  int64_t pretrain_enhance = 2000;
  int64_t pretrain_detect = 1000;
  int64_t joint = 2000;
};

struct TrainConfig {
  uint64_t seed = 1;
  int image_size = 24;  // must be a multiple of 4 (haar + detector grid)
  int batch_size = 2;
  double lr = 1e-4;
  double momentum = 0.0;
  std::array<double, 4> lambda = {2.0, 0.1, 1.0, 5.0};
  StageIters iters;
  // copies per base sample: clean / vision-attacked / perception-attacked
  std::array<int, 3> attack_mix = {1, 1, 1};
  attack::Budget vision_budget{8.0 / 255.0, 2.0 / 255.0, 5};
  attack::Budget perception_budget{8.0 / 255.0, 2.0 / 255.0, 5};
  attack::ObjectiveKind perception_kind = attack::ObjectiveKind::det_full;
  inn::EnhancerConfig enhancer;
  apd::ApdConfig apd;
  det::DetectorConfig detector;  // anchors.grid derived from image_size
  std::string data_dir;          // empty -> generate synthetic data
  int n_train = 160;
  int n_test = 40;
  int64_t checkpoint_every = 500;
  bool allow_stage_skip = false;
  bool identity_init = true;  // zero-init last subnet layers (blocks start as identity)

  void validate() const;
};

// Parse/serialize the JSON config document. Unknown keys and type mismatches
// throw ConfigError naming the offending field path.
TrainConfig config_from_json(const std::string& json_text);
std::string config_to_json(const TrainConfig& cfg);

inline const char* kStageNames[3] = {"pretrain_enhance", "pretrain_detect", "joint"};

struct TrainState {
  nn::ParamStore params;
  std::map<std::string, Tensor> velocity;  // SGD momentum buffers
  int64_t iteration = 0;
  std::array<bool, 3> stage_done = {false, false, false};
  Rng data_rng, attack_rng, latent_rng;
};

struct LossParts {
  double forw = 0, back = 0, det = 0, apd = 0, total = 0;
};

// One attacked (or clean) copy entering the upper-level step.
struct AttackedSample {
  int src_index = 0;  // into the training set
  Tensor y;           // (1,3,H,W) input to the framework
  int label = 0;      // 0 clean, 1 vision, 2 perception
};

class Trainer {
 public:
  explicit Trainer(TrainConfig cfg);

  // Fresh parameter init + synthetic (or on-disk) dataset.
  void initialize();
  void load_data();

  const TrainConfig& config() const { return cfg_; }
  TrainState& state() { return state_; }
  const std::vector<data::PairedSample>& train_set() const { return train_; }
  const std::vector<data::PairedSample>& test_set() const { return test_; }
  const std::vector<std::string>& class_names() const { return class_names_; }
  const std::vector<det::Box>& anchors() const { return anchors_; }
  const inn::Enhancer& enhancer() const { return *enh_; }
  const apd::Discriminator& discriminator() const { return *apd_; }
  const det::Detector& detector() const { return *det_; }

  // ---- bilevel pieces (public for tests) ----
  // Frozen-parameter attack generation; returns labeled copies per attack_mix.
  std::vector<AttackedSample> lower_level_step(const std::vector<int>& batch);
  // One SGD step on Eq.-style weighted loss over the labeled batch.
  LossParts upper_level_step(const std::vector<AttackedSample>& batch);
  LossParts pretrain_enhance_step(const std::vector<int>& batch);
  LossParts pretrain_detect_step(const std::vector<int>& batch);

  // Runs a full stage; appends rows to log_path (CSV) and timing_path if
  // non-empty; checkpoints into ckpt_dir every cfg.checkpoint_every iters and
  // at stage end. Enforces stage order unless cfg.allow_stage_skip.
  void run_stage(int stage, const std::string& ckpt_dir, const std::string& log_path,
                 const std::string& timing_path = "", int64_t max_iters = -1);

  void save_checkpoint(const std::string& dir) const;
  void load_checkpoint(const std::string& dir);
  // Rebuild a trainer from a checkpoint directory's embedded config (written
  // by save_checkpoint); parameters are loaded, data is NOT.
  static std::unique_ptr<Trainer> from_checkpoint(const std::string& dir);

  // ---- eval-mode helpers (parameters frozen, deterministic) ----
  // Enhance with zero high-frequency latent; clamped to [0,1].
  Tensor enhance_eval(const Tensor& x);
  det::DetectionSet detect_eval(const Tensor& x);
  std::vector<std::vector<double>> apd_eval(const Tensor& x) const;

  // Attack objectives against the current (frozen) parameters. The plain
  // variants use the zero latent; attack_objective fixes the latent noise
  // per attack seed, matching what attack_sample optimizes.
  attack::Objective vision_objective(const data::PairedSample& s) const;
  attack::Objective perception_objective(const data::PairedSample& s,
                                         attack::ObjectiveKind kind) const;
  attack::Objective attack_objective(const data::PairedSample& s, attack::ObjectiveKind kind,
                                     uint64_t seed) const;
  Tensor attack_sample(const data::PairedSample& s, attack::ObjectiveKind kind,
                       const attack::Budget& budget, uint64_t seed);  // returns x+delta

 private:
  std::vector<int> next_batch();
  void sgd_step(nn::Ctx& ctx);
  attack::Objective build_objective(const data::PairedSample& s, attack::ObjectiveKind kind,
                                    Tensor vhf) const;
  Tensor zero_latent(const Tensor& x) const;
  ag::Var framework_loss(nn::Ctx& ctx, const std::vector<AttackedSample>& batch,
                         LossParts* parts, bool with_det, bool with_apd,
                         bool weighted = true);
  det::Assignment assignment_for(int src_index) const;

  TrainConfig cfg_;
  TrainState state_;
  std::unique_ptr<inn::Enhancer> enh_;
  std::unique_ptr<apd::Discriminator> apd_;
  std::unique_ptr<det::Detector> det_;
  std::vector<data::PairedSample> train_, test_;
  std::vector<std::string> class_names_;
  std::vector<det::Box> anchors_;
  mutable std::map<int, det::Assignment> assign_cache_;
};

// mean over samples of mean|a_i - b_i| for two equally sized image lists.
double mean_l1_gap(const std::vector<Tensor>& a, const std::vector<Tensor>& b);

}  // namespace carnet::train
