// carnet: underwater enhancement + detection laboratory.
// Subcommands: gen-data, train, attack, enhance, detect, eval, report.
// Exit codes: 0 success, 2 user/config error, 3 numeric failure.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "carnet/trainer.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace carnet;

namespace {

// All relative paths resolve against --out (the run's base directory).
std::string resolve(const std::string& p, const std::string& out) {
  if (p.empty() || fs::path(p).is_absolute()) return p;
  return (fs::path(out) / p).string();
}

std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot open file: " + path);
  return std::string(std::istreambuf_iterator<char>(f), {});
}

void write_run_json(const std::string& out, const std::string& sub,
                    const std::vector<std::string>& args, const json& resolved) {
  fs::create_directories(out);
  json j{{"subcommand", sub}, {"args", args}, {"resolved", resolved}};
  std::ofstream f(fs::path(out) / "run.json");
  f << j.dump(2) << "\n";
}

int check_workers_env() {
  const char* w = std::getenv("CARNET_NUM_WORKERS");
  if (!w) return 1;
  char* end = nullptr;
  long v = std::strtol(w, &end, 10);
  if (!end || *end != '\0' || v < 1)
    throw ConfigError("CARNET_NUM_WORKERS must be a positive integer");
  return static_cast<int>(v);  // the compute path is single-threaded; 1 is used
}

// PNG files in `dir` (or `dir/raw` for dataset layouts), sorted by name.
std::vector<std::string> list_pngs(const std::string& dir) {
  fs::path base = dir;
  if (fs::is_directory(base / "raw")) base /= "raw";
  if (!fs::is_directory(base)) throw ConfigError("not a directory: " + dir);
  std::vector<std::string> out;
  for (const auto& e : fs::directory_iterator(base))
    if (e.path().extension() == ".png") out.push_back(e.path().string());
  std::sort(out.begin(), out.end());
  return out;
}

json finite_or_inf(double v) {
  if (std::isfinite(v)) return v;
  return v > 0 ? "inf" : "-inf";
}

// ---------------------------------------------------------------- gen-data
int cmd_gen_data(const std::string& out, int n, int size, uint64_t seed, int max_objects,
                 const std::vector<std::string>& args) {
  data::SynthConfig cfg;
  cfg.n = n;
  cfg.size = size;
  cfg.seed = seed;
  cfg.max_objects = max_objects;
  auto samples = data::make_synthetic_dataset(cfg);
  fs::create_directories(out);
  data::write_dataset(out, samples, data::synthetic_class_names());
  write_run_json(out, "gen-data", args,
                 json{{"out", out}, {"n", n}, {"size", size}, {"seed", seed},
                      {"max_objects", max_objects}});
  std::cout << "wrote " << samples.size() << " pairs to " << out << "\n";
  return 0;
}

// ------------------------------------------------------------------- train
int cmd_train(const std::string& out, const std::string& config_path,
              const std::string& stage, const std::string& resume, int64_t seed_override,
              const std::vector<std::string>& args) {
  std::string text = config_path.empty() ? "{}" : read_file(resolve(config_path, out));
  train::TrainConfig cfg = train::config_from_json(text);
  if (seed_override >= 0) cfg.seed = static_cast<uint64_t>(seed_override);
  if (!cfg.data_dir.empty()) cfg.data_dir = resolve(cfg.data_dir, out);

  train::Trainer tr(cfg);
  tr.initialize();
  if (!resume.empty()) tr.load_checkpoint(resolve(resume, out));

  fs::create_directories(out);
  {
    std::ofstream f(fs::path(out) / "config.json");
    f << train::config_to_json(cfg);
  }
  write_run_json(out, "train", args,
                 json::parse(train::config_to_json(cfg)));

  std::string ckpt = (fs::path(out) / "checkpoint").string();
  std::string log = (fs::path(out) / "train_log.csv").string();
  std::string timing = (fs::path(out) / "timing.csv").string();
  auto stage_index = [](const std::string& s) {
    for (int i = 0; i < 3; ++i)
      if (s == train::kStageNames[i]) return i;
    throw ConfigError("unknown stage: " + s + " (expected pretrain_enhance, "
                      "pretrain_detect, joint, or all)");
  };
  if (stage == "all") {
    for (int s = 0; s < 3; ++s) {
      if (tr.state().stage_done[static_cast<size_t>(s)]) continue;
      tr.run_stage(s, ckpt, log, timing);
    }
  } else {
    tr.run_stage(stage_index(stage), ckpt, log, timing);
  }
  tr.save_checkpoint(ckpt);
  std::cout << "training complete at iteration " << tr.state().iteration << "\n";
  return 0;
}

// ------------------------------------------------------------------ attack
int cmd_attack(const std::string& out, const std::string& ckpt, const std::string& data_dir,
               const std::string& kind_s, double eps, double alpha, int steps, uint64_t seed,
               int64_t limit, const std::vector<std::string>& args) {
  attack::ObjectiveKind kind = attack::objective_kind_from_string(kind_s);
  attack::Budget budget{eps, alpha, steps};
  budget.validate();
  auto tr = train::Trainer::from_checkpoint(resolve(ckpt, out));
  std::vector<std::string> classes;
  auto samples = data::load_dataset(resolve(data_dir, out), &classes);
  if (kind != attack::ObjectiveKind::vision_contrastive && classes.empty())
    throw ConfigError("perception attacks require dataset annotations");
  fs::create_directories(out);
  uint64_t before_hash = tr->state().params.hash();
  Rng seeds(seed);
  int64_t count = 0;
  for (const auto& s : samples) {
    if (limit > 0 && count >= limit) break;
    ++count;
    uint64_t img_seed = seeds.next_u64();
    attack::Objective obj = tr->attack_objective(s, kind, img_seed);
    auto objective_at = [&](const Tensor& y) {
      nn::Ctx ctx(tr->state().params, false);
      return ctx.tape.val(obj(ctx, ctx.input(y))).data[0];
    };
    double obj_before = objective_at(s.x);
    Tensor y = tr->attack_sample(s, kind, budget, img_seed);
    double obj_after = objective_at(y);
    double max_delta = 0;
    for (int64_t i = 0; i < y.numel(); ++i)
      max_delta = std::max(max_delta, std::abs(y.data[i] - s.x.data[i]));
    data::write_png16((fs::path(out) / (s.id + ".png")).string(), y);
    json side{{"id", s.id},          {"kind", kind_s},
              {"eps", eps},          {"alpha", alpha},
              {"steps", steps},      {"seed", img_seed},
              {"max_abs_delta", max_delta},
              {"objective_before", obj_before},
              {"objective_after", obj_after}};
    std::ofstream f(fs::path(out) / (s.id + ".json"));
    f << side.dump(2) << "\n";
  }
  if (tr->state().params.hash() != before_hash)
    throw NumericError("model parameters changed during attack generation");
  write_run_json(out, "attack", args,
                 json{{"checkpoint", ckpt}, {"data", data_dir}, {"kind", kind_s},
                      {"eps", eps}, {"alpha", alpha}, {"steps", steps}, {"seed", seed},
                      {"limit", limit}});
  std::cout << "attacked " << count << " images -> " << out << "\n";
  return 0;
}

// ----------------------------------------------------------------- enhance
int cmd_enhance(const std::string& out, const std::string& ckpt, const std::string& data_dir,
                const std::vector<std::string>& args) {
  auto tr = train::Trainer::from_checkpoint(resolve(ckpt, out));
  auto files = list_pngs(resolve(data_dir, out));
  if (files.empty()) throw ConfigError("no .png inputs in: " + data_dir);
  fs::create_directories(out);
  for (const auto& f : files) {
    Tensor x = data::read_png(f);
    Tensor u = tr->enhance_eval(x);
    data::write_png16((fs::path(out) / fs::path(f).filename()).string(), u);
  }
  write_run_json(out, "enhance", args, json{{"checkpoint", ckpt}, {"data", data_dir}});
  std::cout << "enhanced " << files.size() << " images -> " << out << "\n";
  return 0;
}

// ------------------------------------------------------------------ detect
int cmd_detect(const std::string& out, const std::string& ckpt, const std::string& data_dir,
               const std::vector<std::string>& args) {
  auto tr = train::Trainer::from_checkpoint(resolve(ckpt, out));
  if (tr->class_names().empty())
    throw ConfigError("checkpoint carries no class vocabulary; cannot emit detections");
  auto files = list_pngs(resolve(data_dir, out));
  if (files.empty()) throw ConfigError("no .png inputs in: " + data_dir);
  fs::create_directories(out);
  std::vector<std::pair<std::string, det::DetectionSet>> items;
  int W = 0, H = 0;
  for (const auto& f : files) {
    Tensor x = data::read_png(f);
    W = static_cast<int>(x.shape[3]);
    H = static_cast<int>(x.shape[2]);
    items.emplace_back(fs::path(f).filename().string(), tr->detect_eval(x));
  }
  data::write_annotations((fs::path(out) / "detections.json").string(), items,
                          tr->class_names(), W, H, /*with_scores=*/true);
  write_run_json(out, "detect", args, json{{"checkpoint", ckpt}, {"data", data_dir}});
  std::cout << "detections for " << files.size() << " images -> " << out
            << "/detections.json\n";
  return 0;
}

// -------------------------------------------------------------------- eval
void check_aligned(const std::vector<std::string>& a, const std::vector<std::string>& b,
                   const char* aname, const char* bname) {
  std::vector<std::string> only_a, only_b;
  for (const auto& x : a)
    if (std::find(b.begin(), b.end(), x) == b.end()) only_a.push_back(x);
  for (const auto& x : b)
    if (std::find(a.begin(), a.end(), x) == a.end()) only_b.push_back(x);
  if (only_a.empty() && only_b.empty()) return;
  std::string msg = "unmatched files:";
  for (const auto& x : only_a) msg += " " + std::string(aname) + "/" + x;
  for (const auto& x : only_b) msg += " " + std::string(bname) + "/" + x;
  throw ConfigError(msg);
}

int cmd_eval_enhance(const std::string& out, const std::string& pred_dir,
                     const std::string& truth_dir, const std::vector<std::string>& args) {
  auto preds = list_pngs(resolve(pred_dir, out));
  auto truths = list_pngs(resolve(truth_dir, out));
  auto names = [](const std::vector<std::string>& fs_) {
    std::vector<std::string> out_;
    for (const auto& f : fs_) out_.push_back(fs::path(f).filename().string());
    return out_;
  };
  auto pn = names(preds), tn = names(truths);
  check_aligned(pn, tn, "pred", "truth");
  if (preds.empty()) throw ConfigError("no images to evaluate");
  json per = json::object();
  double psnr_sum = 0, ssim_sum = 0;
  bool psnr_inf = false;
  for (size_t i = 0; i < preds.size(); ++i) {
    Tensor p = data::read_png(preds[i]);
    Tensor t = data::read_png(truths[i]);
    double ps = data::psnr(p, t);
    double ss = data::ssim(p, t);
    per[pn[i]] = {{"psnr", finite_or_inf(ps)}, {"ssim", ss}};
    if (std::isinf(ps)) psnr_inf = true;
    else psnr_sum += ps;
    ssim_sum += ss;
  }
  double n = static_cast<double>(preds.size());
  json metrics{{"task", "enhance"},
               {"images", per},
               {"mean_psnr", psnr_inf ? json("inf") : json(psnr_sum / n)},
               {"mean_ssim", ssim_sum / n}};
  fs::create_directories(out);
  std::ofstream f(fs::path(out) / "metrics.json");
  f << metrics.dump(2) << "\n";
  std::cout << "images " << preds.size() << "  mean PSNR "
            << (psnr_inf ? std::string("inf") : std::to_string(psnr_sum / n))
            << "  mean SSIM " << ssim_sum / n << "\n";
  write_run_json(out, "eval", args, json{{"task", "enhance"}, {"pred", pred_dir},
                                         {"truth", truth_dir}});
  return 0;
}

int cmd_eval_detect(const std::string& out, const std::string& pred_path,
                    const std::string& truth_path, const std::vector<std::string>& args) {
  auto find_ann = [&](std::string p, const char* fallback) {
    p = resolve(p, out);
    if (fs::is_directory(p)) p = (fs::path(p) / fallback).string();
    return p;
  };
  std::vector<std::string> classes;
  auto truth_items = data::read_annotations(find_ann(truth_path, "annotations.json"), &classes);
  auto pred_items = data::read_annotations(find_ann(pred_path, "detections.json"));
  std::map<std::string, det::DetectionSet> pred_map(pred_items.begin(), pred_items.end());
  for (const auto& [file, ds] : pred_items) {
    bool known = false;
    for (const auto& [tf, tds] : truth_items) known = known || tf == file;
    if (!known) throw ConfigError("unmatched files: pred/" + file);
  }
  std::vector<det::DetectionSet> preds, truths;
  for (const auto& [file, ds] : truth_items) {
    truths.push_back(ds);
    auto it = pred_map.find(file);
    preds.push_back(it == pred_map.end() ? det::DetectionSet{} : it->second);
  }
  json per_class = json::object();
  std::vector<int> present;
  for (const auto& t : truths)
    for (int l : t.labels)
      if (std::find(present.begin(), present.end(), l) == present.end()) present.push_back(l);
  std::sort(present.begin(), present.end());
  double map_sum = 0;
  for (int c : present) {
    double ap = det::average_precision_class(preds, truths, c, 0.5, false);
    per_class[classes.at(static_cast<size_t>(c))] = ap;
    map_sum += ap;
  }
  double map = present.empty() ? 0.0 : map_sum / static_cast<double>(present.size());
  json metrics{{"task", "detect"}, {"per_class_ap", per_class}, {"map", map}};
  fs::create_directories(out);
  std::ofstream f(fs::path(out) / "metrics.json");
  f << metrics.dump(2) << "\n";
  std::cout << "mAP@0.5 " << map << "\n";
  for (auto& [k, v] : per_class.items()) std::cout << "  AP " << k << " " << v << "\n";
  write_run_json(out, "eval", args, json{{"task", "detect"}, {"pred", pred_path},
                                         {"truth", truth_path}});
  return 0;
}

// ------------------------------------------------------------------ report
int cmd_report(const std::string& out, const std::string& clean_dir,
               const std::string& attacked_dir, const std::vector<std::string>& args) {
  auto cleans = list_pngs(resolve(clean_dir, out));
  auto attacked = list_pngs(resolve(attacked_dir, out));
  auto names = [](const std::vector<std::string>& fs_) {
    std::vector<std::string> out_;
    for (const auto& f : fs_) out_.push_back(fs::path(f).filename().string());
    return out_;
  };
  auto cn = names(cleans), an = names(attacked);
  check_aligned(cn, an, "clean", "attacked");
  if (cleans.empty()) throw ConfigError("no images to report on");
  fs::create_directories(out);
  std::vector<std::array<double, 3>> mean_curve;
  for (size_t i = 0; i < cleans.size(); ++i) {
    Tensor a = data::read_png(cleans[i]);
    Tensor b = data::read_png(attacked[i]);
    auto prof = data::rgb_difference_profile(a, b);
    if (mean_curve.empty()) mean_curve.assign(prof.size(), {0, 0, 0});
    if (mean_curve.size() != prof.size())
      throw DimensionError("images have differing widths across the report set");
    std::string stem = fs::path(cn[i]).stem().string();
    std::ofstream f(fs::path(out) / (stem + "_diff.csv"));
    f << "column_index,diff_r,diff_g,diff_b\n";
    char buf[128];
    for (size_t col = 0; col < prof.size(); ++col) {
      std::snprintf(buf, sizeof(buf), "%zu,%.17g,%.17g,%.17g\n", col, prof[col][0],
                    prof[col][1], prof[col][2]);
      f << buf;
      for (int c = 0; c < 3; ++c) mean_curve[col][c] += prof[col][c] / cleans.size();
    }
  }
  {
    std::ofstream f(fs::path(out) / "summary.csv");
    f << "column_index,diff_r,diff_g,diff_b\n";
    char buf[128];
    for (size_t col = 0; col < mean_curve.size(); ++col) {
      std::snprintf(buf, sizeof(buf), "%zu,%.17g,%.17g,%.17g\n", col, mean_curve[col][0],
                    mean_curve[col][1], mean_curve[col][2]);
      f << buf;
    }
  }
  // summary plot: one polyline per channel on a white canvas
  {
    int64_t W = static_cast<int64_t>(mean_curve.size());
    int64_t ph = 128, scale = std::max<int64_t>(1, 512 / W);
    int64_t pw = W * scale;
    double vmax = 1e-12;
    for (const auto& c : mean_curve)
      for (double v : c) vmax = std::max(vmax, v);
    Tensor plot = Tensor::full({1, 3, ph, pw}, 1.0);
    for (int ch = 0; ch < 3; ++ch) {
      int64_t prev_y = -1;
      for (int64_t x = 0; x < pw; ++x) {
        int64_t col = x / scale;
        int64_t y = ph - 1 - static_cast<int64_t>((mean_curve[col][ch] / vmax) * (ph - 1));
        int64_t y0 = prev_y < 0 ? y : std::min(prev_y, y);
        int64_t y1 = prev_y < 0 ? y : std::max(prev_y, y);
        for (int64_t yy = y0; yy <= y1; ++yy)
          for (int c2 = 0; c2 < 3; ++c2) plot.at4(0, c2, yy, x) = c2 == ch ? 1.0 : 0.0;
        prev_y = y;
      }
    }
    data::write_png16((fs::path(out) / "summary.png").string(), plot);
  }
  write_run_json(out, "report", args, json{{"clean", clean_dir}, {"attacked", attacked_dir}});
  std::cout << "report for " << cleans.size() << " images -> " << out << "\n";
  return 0;
}

// ---------------------------------------------------------------- dispatch
int run(std::vector<std::string> args);

int replay(const std::string& run_path) {
  json j = json::parse(read_file(run_path));
  std::vector<std::string> args = {j.at("subcommand").get<std::string>()};
  for (const auto& a : j.at("args")) args.push_back(a.get<std::string>());
  return run(args);
}

int run(std::vector<std::string> args) {
  CLI::App app{"underwater enhancement + detection laboratory"};
  app.require_subcommand(1);
  check_workers_env();

  // gen-data
  auto* gd = app.add_subcommand("gen-data", "generate a synthetic paired dataset");
  std::string gd_out;
  int gd_n = 200, gd_size = 24, gd_maxobj = 2;
  uint64_t gd_seed = 0;
  gd->add_option("--out", gd_out, "output dataset directory")->required();
  gd->add_option("--n", gd_n, "number of image pairs");
  gd->add_option("--size", gd_size, "square image size");
  gd->add_option("--seed", gd_seed, "generator seed");
  gd->add_option("--max-objects", gd_maxobj, "max objects per scene");

  // train
  auto* tn = app.add_subcommand("train", "run the staged training schedule");
  std::string tn_out, tn_cfg, tn_stage = "all", tn_resume;
  int64_t tn_seed = -1;
  tn->add_option("--out", tn_out, "run directory")->required();
  tn->add_option("--config", tn_cfg, "training config JSON (see schema/config.json)");
  tn->add_option("--stage", tn_stage, "pretrain_enhance|pretrain_detect|joint|all");
  tn->add_option("--checkpoint", tn_resume, "checkpoint directory to resume from");
  tn->add_option("--seed", tn_seed, "override the config seed");

  // attack
  auto* at = app.add_subcommand("attack", "generate adversarial examples");
  std::string at_out, at_ckpt, at_data, at_kind = "vision";
  double at_eps = 8.0 / 255.0, at_alpha = 2.0 / 255.0;
  int at_steps = 10;
  uint64_t at_seed = 0;
  int64_t at_limit = 0;
  at->add_option("--out", at_out, "output directory")->required();
  at->add_option("--checkpoint", at_ckpt, "model checkpoint directory")->required();
  at->add_option("--data", at_data, "paired dataset directory")->required();
  at->add_option("--kind", at_kind, "vision|det_cls|det_loc|det_full");
  at->add_option("--eps", at_eps, "L-inf budget");
  at->add_option("--alpha", at_alpha, "step size");
  at->add_option("--steps", at_steps, "PGD iterations");
  at->add_option("--seed", at_seed, "attack seed");
  at->add_option("--limit", at_limit, "max images (0 = all)");

  // enhance
  auto* en = app.add_subcommand("enhance", "enhance a directory of images");
  std::string en_out, en_ckpt, en_data;
  en->add_option("--out", en_out, "output directory")->required();
  en->add_option("--checkpoint", en_ckpt, "model checkpoint directory")->required();
  en->add_option("--data", en_data, "input image directory")->required();

  // detect
  auto* dt = app.add_subcommand("detect", "run detection on enhanced images");
  std::string dt_out, dt_ckpt, dt_data;
  dt->add_option("--out", dt_out, "output directory")->required();
  dt->add_option("--checkpoint", dt_ckpt, "model checkpoint directory")->required();
  dt->add_option("--data", dt_data, "input image directory")->required();

  // eval
  auto* ev = app.add_subcommand("eval", "compute metrics");
  std::string ev_out, ev_task, ev_pred, ev_truth;
  ev->add_option("--out", ev_out, "output directory")->required();
  ev->add_option("--task", ev_task, "enhance|detect")->required();
  ev->add_option("--pred", ev_pred, "predictions (dir or JSON)")->required();
  ev->add_option("--truth", ev_truth, "ground truth (dir or JSON)")->required();

  // report
  auto* rp = app.add_subcommand("report", "RGB difference-profile report");
  std::string rp_out, rp_clean, rp_attacked;
  rp->add_option("--out", rp_out, "output directory")->required();
  rp->add_option("--clean", rp_clean, "clean enhanced images")->required();
  rp->add_option("--attacked", rp_attacked, "attacked enhanced images")->required();

  std::vector<std::string> raw = args;
  std::reverse(args.begin(), args.end());  // CLI11 consumes in reverse
  try {
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {  // --help
      std::cout << app.help();
      return 0;
    }
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  std::vector<std::string> sub_args(raw.begin() + 1, raw.end());
  if (*gd) return cmd_gen_data(gd_out, gd_n, gd_size, gd_seed, gd_maxobj, sub_args);
  if (*tn) return cmd_train(tn_out, tn_cfg, tn_stage, tn_resume, tn_seed, sub_args);
  if (*at)
    return cmd_attack(at_out, at_ckpt, at_data, at_kind, at_eps, at_alpha, at_steps, at_seed,
                      at_limit, sub_args);
  if (*en) return cmd_enhance(en_out, en_ckpt, en_data, sub_args);
  if (*dt) return cmd_detect(dt_out, dt_ckpt, dt_data, sub_args);
  if (*ev) {
    if (ev_task == "enhance") return cmd_eval_enhance(ev_out, ev_pred, ev_truth, sub_args);
    if (ev_task == "detect") return cmd_eval_detect(ev_out, ev_pred, ev_truth, sub_args);
    throw ConfigError("unknown eval task: " + ev_task + " (expected enhance|detect)");
  }
  if (*rp) return cmd_report(rp_out, rp_clean, rp_attacked, sub_args);
  throw ConfigError("no subcommand given");
}

}  // namespace

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  try {
    if (!args.empty() && args[0] == "--replay") {
      if (args.size() != 2) throw ConfigError("--replay takes exactly one run.json path");
      return replay(args[1]);
    }
    return run(args);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const DimensionError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "failure: " << e.what() << "\n";
    return 3;
  }
}
