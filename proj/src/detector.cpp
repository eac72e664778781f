#include "carnet/detector.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace carnet::det {

using ag::Var;

double iou(const Box& a, const Box& b) {
  double ix = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
  double iy = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
  double inter = ix * iy;
  double uni = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
  return uni <= 0 ? 0.0 : inter / uni;
}

void DetectionSet::validate(int num_classes) const {
  if (labels.size() != boxes.size())
    throw DimensionError("detection set: labels/boxes size mismatch");
  if (!scores.empty() && scores.size() != boxes.size())
    throw DimensionError("detection set: scores/boxes size mismatch");
  for (size_t i = 0; i < boxes.size(); ++i) {
    const Box& b = boxes[i];
    if (!(b.x1 < b.x2 && b.y1 < b.y2) || b.x1 < 0 || b.y1 < 0 || b.x2 > 1 || b.y2 > 1)
      throw DimensionError("detection set: invalid box coordinates");
    if (labels[i] < 0 || labels[i] >= num_classes)
      throw DimensionError("detection set: label out of range");
    if (!scores.empty() && (scores[i] < 0 || scores[i] > 1))
      throw DimensionError("detection set: score out of [0,1]");
  }
}

std::vector<Box> make_anchors(const AnchorConfig& cfg) {
  std::vector<Box> out;
  int G = cfg.grid;
  out.reserve(static_cast<size_t>(G) * G * cfg.sizes.size());
  for (int y = 0; y < G; ++y)
    for (int x = 0; x < G; ++x)
      for (double s : cfg.sizes) {
        double cx = (x + 0.5) / G, cy = (y + 0.5) / G;
        out.push_back(Box{cx - s / 2, cy - s / 2, cx + s / 2, cy + s / 2});
      }
  return out;
}

Assignment match_anchors(const std::vector<Box>& anchors, const DetectionSet& truth,
                         double iou_thresh) {
  Assignment a;
  a.truth_index.assign(anchors.size(), -1);
  if (truth.boxes.empty()) return a;
  for (size_t i = 0; i < anchors.size(); ++i) {
    double best = 0;
    int bestj = -1;
    for (size_t j = 0; j < truth.boxes.size(); ++j) {
      double v = iou(anchors[i], truth.boxes[j]);
      if (v > best) {
        best = v;
        bestj = static_cast<int>(j);
      }
    }
    if (best >= iou_thresh) a.truth_index[i] = bestj;
  }
  // best-IoU fallback: every truth claims its best anchor
  for (size_t j = 0; j < truth.boxes.size(); ++j) {
    double best = -1;
    size_t besti = 0;
    for (size_t i = 0; i < anchors.size(); ++i) {
      double v = iou(anchors[i], truth.boxes[j]);
      if (v > best) {
        best = v;
        besti = i;
      }
    }
    a.truth_index[besti] = static_cast<int>(j);
  }
  for (int t : a.truth_index)
    if (t >= 0) ++a.num_positive;
  return a;
}

namespace {
constexpr double kVarCenter = 0.1;
constexpr double kVarSize = 0.2;

struct CWH {
  double cx, cy, w, h;
};
CWH cwh(const Box& b) { return {(b.x1 + b.x2) / 2, (b.y1 + b.y2) / 2, b.x2 - b.x1, b.y2 - b.y1}; }
}  // namespace

std::array<double, 4> encode_box(const Box& truth, const Box& anchor) {
  CWH t = cwh(truth), a = cwh(anchor);
  return {(t.cx - a.cx) / (a.w * kVarCenter), (t.cy - a.cy) / (a.h * kVarCenter),
          std::log(t.w / a.w) / kVarSize, std::log(t.h / a.h) / kVarSize};
}

Box decode_box(const std::array<double, 4>& off, const Box& anchor) {
  CWH a = cwh(anchor);
  double cx = off[0] * kVarCenter * a.w + a.cx;
  double cy = off[1] * kVarCenter * a.h + a.cy;
  double w = std::exp(off[2] * kVarSize) * a.w;
  double h = std::exp(off[3] * kVarSize) * a.h;
  return Box{cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2};
}

namespace {
std::string pn(const std::string& p, const char* part) { return p + "." + part; }

// (1, A*D, G, G) -> (G*G*A, D) rows in anchor order.
Var reshape_head(Var x, int A, int D) {
  ag::Tape& t = *x.tape;
  const Tensor& xv = t.val(x);
  int64_t C = xv.shape[1], G = xv.shape[2];
  if (xv.shape[0] != 1 || C != static_cast<int64_t>(A) * D || xv.shape[3] != G)
    throw DimensionError("reshape_head: unexpected shape " + shape_str(xv.shape));
  Tensor out({G * G * A, D});
  for (int64_t y = 0; y < G; ++y)
    for (int64_t xx = 0; xx < G; ++xx)
      for (int a = 0; a < A; ++a)
        for (int d = 0; d < D; ++d)
          out.data[(((y * G + xx) * A + a) * D) + d] =
              xv.data[((a * D + d) * G + y) * G + xx];
  int xi = x.id;
  return t.make(std::move(out), t.requires_grad(x), [xi, A, D, G](ag::Tape& tp, int self) {
    if (!tp.rg_at(xi)) return;
    const Tensor& g = tp.grad_at(self);
    Tensor& gx = tp.grad_at(xi);
    for (int64_t y = 0; y < G; ++y)
      for (int64_t xx = 0; xx < G; ++xx)
        for (int a = 0; a < A; ++a)
          for (int d = 0; d < D; ++d)
            gx.data[((a * D + d) * G + y) * G + xx] +=
                g.data[(((y * G + xx) * A + a) * D) + d];
  });
}
}  // namespace

void Detector::init(Rng& rng) {
  int w = cfg_.width;
  int A = static_cast<int>(cfg_.anchors.sizes.size());
  int C1 = cfg_.num_classes + 1;
  auto mk = [&](const char* name, std::vector<int64_t> shape, bool zero = false) {
    Tensor& t = ps_->create(pn(prefix_, name), std::move(shape));
    if (!zero) nn::init_conv(t, rng);
  };
  mk("c0.w", {w, 3, 3, 3});
  ps_->create(pn(prefix_, "c0.b"), {(int64_t)w});
  mk("c1.w", {2 * w, w, 3, 3});
  ps_->create(pn(prefix_, "c1.b"), {(int64_t)2 * w});
  mk("c2.w", {2 * w, 2 * w, 3, 3});
  ps_->create(pn(prefix_, "c2.b"), {(int64_t)2 * w});
  mk("cls.w", {(int64_t)A * C1, 2 * w, 3, 3});
  ps_->create(pn(prefix_, "cls.b"), {(int64_t)A * C1});
  mk("loc.w", {(int64_t)A * 4, 2 * w, 3, 3}, /*zero=*/true);  // start at anchors
  ps_->create(pn(prefix_, "loc.b"), {(int64_t)A * 4});
}

std::pair<Var, Var> Detector::forward(nn::Ctx& ctx, Var img) const {
  const Tensor& iv = ctx.tape.val(img);
  if (iv.ndim() != 4 || iv.shape[1] != 3)
    throw DimensionError("detector expects (B,3,H,W), got " + shape_str(iv.shape));
  int G = cfg_.anchors.grid;
  if (iv.shape[2] != 4 * G || iv.shape[3] != 4 * G)
    throw DimensionError("detector: input must be " + std::to_string(4 * G) + "x" +
                         std::to_string(4 * G) + " for grid " + std::to_string(G));
  int A = static_cast<int>(cfg_.anchors.sizes.size());
  int C1 = cfg_.num_classes + 1;
  Var h = ag::leaky_relu(
      ag::conv2d(img, ctx.param(pn(prefix_, "c0.w")), ctx.param(pn(prefix_, "c0.b")), 2, 1),
      cfg_.leak);
  h = ag::leaky_relu(
      ag::conv2d(h, ctx.param(pn(prefix_, "c1.w")), ctx.param(pn(prefix_, "c1.b")), 2, 1),
      cfg_.leak);
  h = ag::leaky_relu(
      ag::conv2d(h, ctx.param(pn(prefix_, "c2.w")), ctx.param(pn(prefix_, "c2.b")), 1, 1),
      cfg_.leak);
  Var clsmap = ag::conv2d(h, ctx.param(pn(prefix_, "cls.w")), ctx.param(pn(prefix_, "cls.b")), 1, 1);
  Var locmap = ag::conv2d(h, ctx.param(pn(prefix_, "loc.w")), ctx.param(pn(prefix_, "loc.b")), 1, 1);
  int64_t B = iv.shape[0];
  std::vector<Var> clsrows, locrows;
  for (int64_t i = 0; i < B; ++i) {
    clsrows.push_back(reshape_head(ag::select_sample(clsmap, i), A, C1));
    locrows.push_back(reshape_head(ag::select_sample(locmap, i), A, 4));
  }
  Var cls = B == 1 ? clsrows[0] : ag::concat_samples(clsrows);
  Var loc = B == 1 ? locrows[0] : ag::concat_samples(locrows);
  if (!ctx.tape.val(cls).all_finite() || !ctx.tape.val(loc).all_finite())
    throw NumericError("non-finite activation in detector head");
  return {cls, loc};
}

DetLossParts detection_loss(nn::Ctx& ctx, Var cls_logits, Var loc,
                            const std::vector<Box>& anchors, const Assignment& assign,
                            const DetectionSet& truth, const DetectorConfig& cfg) {
  const Tensor& lv = ctx.tape.val(cls_logits);
  int64_t Na = static_cast<int64_t>(anchors.size());
  int C1 = cfg.num_classes + 1;
  if (lv.shape[0] != Na || lv.shape[1] != C1)
    throw DimensionError("detection_loss: logits shape mismatch");
  int bg = cfg.num_classes;

  // hard-negative mining: rank unmatched anchors by their background CE
  std::vector<std::pair<double, int64_t>> negloss;
  for (int64_t i = 0; i < Na; ++i) {
    if (assign.truth_index[i] >= 0) continue;
    double mx = lv.data[i * C1];
    for (int c = 1; c < C1; ++c) mx = std::max(mx, lv.data[i * C1 + c]);
    double z = 0;
    for (int c = 0; c < C1; ++c) z += std::exp(lv.data[i * C1 + c] - mx);
    double ce = std::log(z) + mx - lv.data[i * C1 + bg];
    negloss.emplace_back(-ce, i);  // sort ascending on -loss = descending on loss
  }
  std::sort(negloss.begin(), negloss.end());
  int64_t npos = assign.num_positive;
  int64_t nneg = npos > 0 ? std::min<int64_t>(cfg.neg_ratio * npos, negloss.size())
                          : std::min<int64_t>(cfg.neg_ratio, negloss.size());
  double norm = npos > 0 ? static_cast<double>(npos) : std::max<int64_t>(nneg, 1);

  std::vector<int> labels(Na, bg);
  std::vector<double> wcls(Na, 0.0);
  std::vector<double> wloc(Na, 0.0);
  Tensor loc_target({Na, 4});
  for (int64_t i = 0; i < Na; ++i) {
    int t = assign.truth_index[i];
    if (t < 0) continue;
    labels[i] = truth.labels[t];
    wcls[i] = 1.0 / norm;
    wloc[i] = 1.0 / norm;
    auto enc = encode_box(truth.boxes[t], anchors[i]);
    for (int d = 0; d < 4; ++d) loc_target.data[i * 4 + d] = enc[d];
  }
  for (int64_t r = 0; r < nneg; ++r) wcls[negloss[r].second] = 1.0 / norm;

  Var lcls = ag::softmax_xent(cls_logits, labels, wcls);
  Var lloc = npos > 0 ? ag::smooth_l1(loc, loc_target, wloc)
                      : ag::constant(ctx.tape, Tensor({1}, {0.0}));
  Var ldet = ag::add(lcls, lloc);
  return {lcls, lloc, ldet};
}

DetectionSet decode_and_nms(const Tensor& cls_logits, const Tensor& loc,
                            const std::vector<Box>& anchors, const DetectorConfig& cfg) {
  int64_t Na = static_cast<int64_t>(anchors.size());
  int C1 = cfg.num_classes + 1;
  if (cls_logits.ndim() != 2 || cls_logits.shape[0] != Na || cls_logits.shape[1] != C1 ||
      loc.shape[0] != Na || loc.shape[1] != 4)
    throw DimensionError("decode_and_nms: head output shape mismatch");
  DetectionSet out;
  // softmax scores per anchor
  std::vector<double> probs(static_cast<size_t>(Na) * C1);
  for (int64_t i = 0; i < Na; ++i) {
    double mx = cls_logits.data[i * C1];
    for (int c = 1; c < C1; ++c) mx = std::max(mx, cls_logits.data[i * C1 + c]);
    double z = 0;
    for (int c = 0; c < C1; ++c) {
      probs[i * C1 + c] = std::exp(cls_logits.data[i * C1 + c] - mx);
      z += probs[i * C1 + c];
    }
    for (int c = 0; c < C1; ++c) probs[i * C1 + c] /= z;
  }
  for (int cls = 0; cls < cfg.num_classes; ++cls) {
    std::vector<std::pair<double, int64_t>> cand;
    for (int64_t i = 0; i < Na; ++i)
      if (probs[i * C1 + cls] >= cfg.score_thresh) cand.emplace_back(probs[i * C1 + cls], i);
    std::sort(cand.begin(), cand.end(), [](const auto& a, const auto& b) {
      return a.first != b.first ? a.first > b.first : a.second < b.second;
    });
    std::vector<Box> kept;
    for (const auto& [score, i] : cand) {
      std::array<double, 4> off = {loc.data[i * 4], loc.data[i * 4 + 1], loc.data[i * 4 + 2],
                                   loc.data[i * 4 + 3]};
      Box b = decode_box(off, anchors[i]);
      b.x1 = std::clamp(b.x1, 0.0, 1.0);
      b.y1 = std::clamp(b.y1, 0.0, 1.0);
      b.x2 = std::clamp(b.x2, 0.0, 1.0);
      b.y2 = std::clamp(b.y2, 0.0, 1.0);
      if (!(b.x1 < b.x2 && b.y1 < b.y2)) continue;
      bool sup = false;
      for (const Box& k : kept)
        if (iou(b, k) > cfg.nms_iou) {
          sup = true;
          break;
        }
      if (sup) continue;
      kept.push_back(b);
      out.boxes.push_back(b);
      out.labels.push_back(cls);
      out.scores.push_back(score);
    }
  }
  return out;
}

double average_precision_class(const std::vector<DetectionSet>& preds,
                               const std::vector<DetectionSet>& truths, int cls,
                               double iou_thresh, bool voc11) {
  struct P {
    double score;
    size_t img;
    size_t idx;
  };
  std::vector<P> all;
  int64_t n_truth = 0;
  for (size_t im = 0; im < truths.size(); ++im)
    for (size_t j = 0; j < truths[im].boxes.size(); ++j)
      if (truths[im].labels[j] == cls) ++n_truth;
  if (n_truth == 0) throw DimensionError("average_precision: class has no ground truth");
  for (size_t im = 0; im < preds.size(); ++im)
    for (size_t j = 0; j < preds[im].boxes.size(); ++j)
      if (preds[im].labels[j] == cls)
        all.push_back({preds[im].scores.empty() ? 1.0 : preds[im].scores[j], im, j});
  std::sort(all.begin(), all.end(), [](const P& a, const P& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.img != b.img) return a.img < b.img;
    return a.idx < b.idx;
  });
  std::vector<std::vector<bool>> used(truths.size());
  for (size_t im = 0; im < truths.size(); ++im) used[im].assign(truths[im].boxes.size(), false);
  std::vector<double> recall, precision;
  int64_t tp = 0, fp = 0;
  for (const P& p : all) {
    const DetectionSet& tset = truths[p.img];
    double best = 0;
    int bestj = -1;
    for (size_t j = 0; j < tset.boxes.size(); ++j) {
      if (tset.labels[j] != cls || used[p.img][j]) continue;
      double v = iou(preds[p.img].boxes[p.idx], tset.boxes[j]);
      if (v > best) {
        best = v;
        bestj = static_cast<int>(j);
      }
    }
    if (bestj >= 0 && best >= iou_thresh) {
      used[p.img][bestj] = true;
      ++tp;
    } else {
      ++fp;
    }
    recall.push_back(static_cast<double>(tp) / n_truth);
    precision.push_back(static_cast<double>(tp) / (tp + fp));
  }
  // precision envelope
  std::vector<double> env = precision;
  for (int i = static_cast<int>(env.size()) - 2; i >= 0; --i)
    env[i] = std::max(env[i], env[i + 1]);
  if (voc11) {
    double ap = 0;
    for (int t = 0; t <= 10; ++t) {
      double r = t / 10.0;
      double p = 0;
      for (size_t i = 0; i < recall.size(); ++i)
        if (recall[i] >= r) {
          p = env[i];
          break;
        }
      ap += p / 11.0;
    }
    return ap;
  }
  double ap = 0, prev_r = 0;
  for (size_t i = 0; i < recall.size(); ++i) {
    ap += (recall[i] - prev_r) * env[i];
    prev_r = recall[i];
  }
  return ap;
}

double mean_average_precision(const std::vector<DetectionSet>& preds,
                              const std::vector<DetectionSet>& truths, double iou_thresh,
                              bool voc11) {
  if (preds.size() != truths.size())
    throw DimensionError("mean_average_precision: image list mismatch");
  std::vector<int> classes;
  for (const auto& t : truths)
    for (int l : t.labels)
      if (std::find(classes.begin(), classes.end(), l) == classes.end()) classes.push_back(l);
  if (classes.empty()) throw DimensionError("mean_average_precision: no ground truth objects");
  std::sort(classes.begin(), classes.end());
  double s = 0;
  for (int c : classes) s += average_precision_class(preds, truths, c, iou_thresh, voc11);
  return s / classes.size();
}

}  // namespace carnet::det
