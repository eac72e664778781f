#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "carnet/detector.hpp"
#include "carnet/rng.hpp"
#include "carnet/tensor.hpp"

namespace carnet::data {

// Physical formation model parameters: per-channel transmission, background
// light, optional Gaussian blur.
struct DegradationParams {
  std::array<double, 3> t = {1.0, 1.0, 1.0};  // in (0,1]
  std::array<double, 3> B = {0.0, 0.0, 0.0};  // in [0,1]
  double sigma = 0.0;
};

// x_c = z_c * t_c + B_c * (1 - t_c), optional blur, clamped to [0,1].
Tensor degrade(const Tensor& z, const DegradationParams& p);

Tensor gaussian_blur(const Tensor& img, double sigma);

struct PairedSample {
  Tensor x;  // degraded (B=1)
  Tensor z;  // clean reference (B=1)
  det::DetectionSet truth;
  std::string id;
};

struct SynthConfig {
  int n = 200;
  int size = 24;  // square, even
  uint64_t seed = 0;
  int max_objects = 2;
  std::array<double, 2> t_range = {0.45, 0.9};
  std::array<double, 2> sigma_range = {0.0, 0.6};
  int num_classes = 3;  // circle, square, triangle
};

// Procedural scenes: colored shapes on gradient backgrounds; bounding boxes
// of the shapes become detection labels. Deterministic given seed.
std::vector<PairedSample> make_synthetic_dataset(const SynthConfig& cfg);

std::vector<std::string> synthetic_class_names();

// ---- full-reference metrics ----
// 10*log10(1/MSE) with peak 1; identical inputs return +inf.
double psnr(const Tensor& a, const Tensor& b);
// Per-channel SSIM with 11x11 Gaussian window sigma 1.5, K1=0.01, K2=0.03,
// averaged over channels (and batch).
double ssim(const Tensor& a, const Tensor& b);

// Fig.-style per-column curve: for each channel, mean over rows of
// |a - b| per column. Returns curve[column] = {r,g,b}.
std::vector<std::array<double, 3>> rgb_difference_profile(const Tensor& a, const Tensor& b);

// ---- image files ----
// 16-bit RGB PNG out; 8- or 16-bit RGB/gray PNG in. Tensors are (1,3,H,W).
void write_png16(const std::string& path, const Tensor& img);
Tensor read_png(const std::string& path);

// ---- dataset directory layout (UIEBD-style paired folders) ----
// dir/raw/<id>.png, dir/reference/<id>.png, dir/annotations.json,
// dir/manifest.json
void write_dataset(const std::string& dir, const std::vector<PairedSample>& samples,
                   const std::vector<std::string>& class_names);
std::vector<PairedSample> load_dataset(const std::string& dir,
                                       std::vector<std::string>* class_names = nullptr);

// Annotation JSON (one file per split) per the detector interface.
void write_annotations(const std::string& path,
                       const std::vector<std::pair<std::string, det::DetectionSet>>& items,
                       const std::vector<std::string>& class_names, int width, int height,
                       bool with_scores = false);
std::vector<std::pair<std::string, det::DetectionSet>> read_annotations(
    const std::string& path, std::vector<std::string>* class_names = nullptr);

}  // namespace carnet::data
