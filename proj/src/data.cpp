#include "carnet/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include <png.h>

#include "json.hpp"

namespace carnet::data {

namespace fs = std::filesystem;
using nlohmann::json;

Tensor gaussian_blur(const Tensor& img, double sigma) {
  if (sigma <= 0) return img;
  int radius = std::max(1, static_cast<int>(std::ceil(3 * sigma)));
  std::vector<double> k(2 * radius + 1);
  double s = 0;
  for (int i = -radius; i <= radius; ++i) {
    k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
    s += k[i + radius];
  }
  for (double& v : k) v /= s;
  int64_t N = img.shape[0], C = img.shape[1], H = img.shape[2], W = img.shape[3];
  Tensor tmp(img.shape), out(img.shape);
  auto clampi = [](int64_t v, int64_t n) { return std::clamp<int64_t>(v, 0, n - 1); };
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c)
      for (int64_t y = 0; y < H; ++y)
        for (int64_t x = 0; x < W; ++x) {
          double acc = 0;
          for (int i = -radius; i <= radius; ++i)
            acc += k[i + radius] * img.at4(n, c, y, clampi(x + i, W));
          tmp.at4(n, c, y, x) = acc;
        }
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c)
      for (int64_t y = 0; y < H; ++y)
        for (int64_t x = 0; x < W; ++x) {
          double acc = 0;
          for (int i = -radius; i <= radius; ++i)
            acc += k[i + radius] * tmp.at4(n, c, clampi(y + i, H), x);
          out.at4(n, c, y, x) = acc;
        }
  return out;
}

Tensor degrade(const Tensor& z, const DegradationParams& p) {
  if (z.ndim() != 4 || z.shape[1] != 3) throw DimensionError("degrade expects (B,3,H,W)");
  for (int c = 0; c < 3; ++c) {
    if (!(p.t[c] > 0 && p.t[c] <= 1))
      throw ConfigError("transmission must lie in (0,1], got " + std::to_string(p.t[c]));
    if (p.B[c] < 0 || p.B[c] > 1) throw ConfigError("background light must lie in [0,1]");
  }
  if (p.sigma < 0) throw ConfigError("blur sigma must be nonnegative");
  Tensor out = z;
  int64_t N = z.shape[0], H = z.shape[2], W = z.shape[3];
  for (int64_t n = 0; n < N; ++n)
    for (int c = 0; c < 3; ++c)
      for (int64_t i = 0; i < H * W; ++i) {
        double& v = out.data[((n * 3 + c) * H * W) + i];
        v = v * p.t[c] + p.B[c] * (1.0 - p.t[c]);
      }
  if (p.sigma > 0) out = gaussian_blur(out, p.sigma);
  for (double& v : out.data) v = std::clamp(v, 0.0, 1.0);
  return out;
}

std::vector<std::string> synthetic_class_names() { return {"circle", "square", "triangle"}; }

namespace {

void draw_shape(Tensor& img, int cls, double cx, double cy, double r,
                const std::array<double, 3>& color) {
  int64_t H = img.shape[2], W = img.shape[3];
  for (int64_t y = 0; y < H; ++y)
    for (int64_t x = 0; x < W; ++x) {
      double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
      bool inside = false;
      switch (cls) {
        case 0: inside = dx * dx + dy * dy <= r * r; break;                       // circle
        case 1: inside = std::abs(dx) <= r * 0.82 && std::abs(dy) <= r * 0.82; break;  // square
        case 2:  // upward triangle
          inside = dy <= r && dy >= -r && std::abs(dx) <= (dy + r) * 0.55;
          break;
      }
      if (inside)
        for (int c = 0; c < 3; ++c) img.at4(0, c, y, x) = color[c];
    }
}

}  // namespace

std::vector<PairedSample> make_synthetic_dataset(const SynthConfig& cfg) {
  if (cfg.n < 1) throw ConfigError("synthetic dataset needs n >= 1");
  if (cfg.size < 8 || cfg.size % 2 != 0) throw ConfigError("synthetic size must be even, >= 8");
  Rng rng(cfg.seed);
  std::vector<PairedSample> out;
  out.reserve(cfg.n);
  int64_t S = cfg.size;
  for (int i = 0; i < cfg.n; ++i) {
    PairedSample s;
    s.id = "img" + std::to_string(i);
    Tensor z({1, 3, S, S});
    // gradient background between two muted colors
    std::array<double, 3> c0, c1;
    for (int c = 0; c < 3; ++c) {
      c0[c] = rng.uniform(0.05, 0.45);
      c1[c] = rng.uniform(0.05, 0.45);
    }
    bool horizontal = rng.uniform() < 0.5;
    for (int64_t y = 0; y < S; ++y)
      for (int64_t x = 0; x < S; ++x) {
        double a = horizontal ? static_cast<double>(x) / (S - 1) : static_cast<double>(y) / (S - 1);
        for (int c = 0; c < 3; ++c) z.at4(0, c, y, x) = c0[c] * (1 - a) + c1[c] * a;
      }
    int nobj = static_cast<int>(rng.uniform_int(1, cfg.max_objects));
    for (int o = 0; o < nobj; ++o) {
      int cls = static_cast<int>(rng.uniform_int(0, cfg.num_classes - 1));
      double r = rng.uniform(0.16, 0.28) * S;
      double cx = rng.uniform(r + 1, S - r - 1);
      double cy = rng.uniform(r + 1, S - r - 1);
      std::array<double, 3> color;
      // bright, saturated foreground so shapes stay visible after degradation
      int hot = static_cast<int>(rng.uniform_int(0, 2));
      for (int c = 0; c < 3; ++c)
        color[c] = c == hot ? rng.uniform(0.75, 1.0) : rng.uniform(0.0, 0.35);
      draw_shape(z, cls, cx, cy, r, color);
      det::Box b{std::max(0.0, (cx - r) / S), std::max(0.0, (cy - r) / S),
                 std::min(1.0, (cx + r) / S), std::min(1.0, (cy + r) / S)};
      s.truth.boxes.push_back(b);
      s.truth.labels.push_back(cls);
    }
    DegradationParams p;
    // blue attenuates least underwater; red most
    p.t[0] = rng.uniform(cfg.t_range[0], cfg.t_range[0] + 0.15);
    p.t[1] = rng.uniform(cfg.t_range[0] + 0.1, cfg.t_range[1] - 0.1);
    p.t[2] = rng.uniform(cfg.t_range[1] - 0.15, cfg.t_range[1]);
    p.B = {rng.uniform(0.0, 0.15), rng.uniform(0.2, 0.45), rng.uniform(0.3, 0.55)};
    p.sigma = rng.uniform(cfg.sigma_range[0], cfg.sigma_range[1]);
    s.z = std::move(z);
    s.x = degrade(s.z, p);
    s.truth.validate(cfg.num_classes);
    out.push_back(std::move(s));
  }
  return out;
}

// ------------------------------------------------------------------- metrics

double psnr(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) throw DimensionError("psnr: shape mismatch");
  double mse = 0;
  for (int64_t i = 0; i < a.numel(); ++i) {
    double d = a.data[i] - b.data[i];
    mse += d * d;
  }
  mse /= static_cast<double>(a.numel());
  if (mse == 0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / mse);
}

double ssim(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) throw DimensionError("ssim: shape mismatch");
  if (a.ndim() != 4) throw DimensionError("ssim expects 4-D");
  constexpr int R = 5;  // 11x11 window
  constexpr double kSigma = 1.5, K1 = 0.01, K2 = 0.03;
  double win[11][11];
  double wsum = 0;
  for (int i = -R; i <= R; ++i)
    for (int j = -R; j <= R; ++j) {
      win[i + R][j + R] = std::exp(-0.5 * (i * i + j * j) / (kSigma * kSigma));
      wsum += win[i + R][j + R];
    }
  for (auto& row : win)
    for (double& v : row) v /= wsum;
  const double C1 = K1 * K1, C2 = K2 * K2;
  int64_t N = a.shape[0], C = a.shape[1], H = a.shape[2], W = a.shape[3];
  if (H < 11 || W < 11) throw DimensionError("ssim: image smaller than the 11x11 window");
  double total = 0;
  int64_t count = 0;
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c)
      for (int64_t y = R; y < H - R; ++y)
        for (int64_t x = R; x < W - R; ++x) {
          double ma = 0, mb = 0;
          for (int i = -R; i <= R; ++i)
            for (int j = -R; j <= R; ++j) {
              double w = win[i + R][j + R];
              ma += w * a.at4(n, c, y + i, x + j);
              mb += w * b.at4(n, c, y + i, x + j);
            }
          double va = 0, vb = 0, cov = 0;
          for (int i = -R; i <= R; ++i)
            for (int j = -R; j <= R; ++j) {
              double w = win[i + R][j + R];
              double da = a.at4(n, c, y + i, x + j) - ma;
              double db = b.at4(n, c, y + i, x + j) - mb;
              va += w * da * da;
              vb += w * db * db;
              cov += w * da * db;
            }
          total += ((2 * ma * mb + C1) * (2 * cov + C2)) /
                   ((ma * ma + mb * mb + C1) * (va + vb + C2));
          ++count;
        }
  return total / count;
}

std::vector<std::array<double, 3>> rgb_difference_profile(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) throw DimensionError("rgb_difference_profile: shape mismatch");
  if (a.ndim() != 4 || a.shape[1] != 3)
    throw DimensionError("rgb_difference_profile expects (B,3,H,W)");
  int64_t N = a.shape[0], H = a.shape[2], W = a.shape[3];
  std::vector<std::array<double, 3>> out(W, {0, 0, 0});
  for (int64_t x = 0; x < W; ++x)
    for (int c = 0; c < 3; ++c) {
      double s = 0;
      for (int64_t n = 0; n < N; ++n)
        for (int64_t y = 0; y < H; ++y) s += std::abs(a.at4(n, c, y, x) - b.at4(n, c, y, x));
      out[x][c] = s / static_cast<double>(N * H);
    }
  return out;
}

// ----------------------------------------------------------------------- png

void write_png16(const std::string& path, const Tensor& img) {
  if (img.ndim() != 4 || img.shape[0] != 1 || img.shape[1] != 3)
    throw DimensionError("write_png16 expects (1,3,H,W)");
  int64_t H = img.shape[2], W = img.shape[3];
  FILE* fp = std::fopen(path.c_str(), "wb");
  if (!fp) throw ConfigError("cannot open for write: " + path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw ConfigError("png write failed: " + path);
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(W), static_cast<png_uint_32>(H), 16,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<uint16_t> row(static_cast<size_t>(W) * 3);
  for (int64_t y = 0; y < H; ++y) {
    for (int64_t x = 0; x < W; ++x)
      for (int c = 0; c < 3; ++c) {
        double v = std::clamp(img.at4(0, c, y, x), 0.0, 1.0);
        uint16_t q = static_cast<uint16_t>(std::lround(v * 65535.0));
        row[x * 3 + c] = static_cast<uint16_t>((q >> 8) | (q << 8));  // big-endian
      }
    png_write_row(png, reinterpret_cast<png_bytep>(row.data()));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

Tensor read_png(const std::string& path) {
  FILE* fp = std::fopen(path.c_str(), "rb");
  if (!fp) throw ConfigError("cannot open: " + path);
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    throw ConfigError("png read failed: " + path);
  }
  png_init_io(png, fp);
  png_read_info(png, info);
  png_uint_32 W = png_get_image_width(png, info);
  png_uint_32 H = png_get_image_height(png, info);
  int depth = png_get_bit_depth(png, info);
  int color = png_get_color_type(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA)
    png_set_gray_to_rgb(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  png_set_strip_alpha(png);
  if (depth < 8) png_set_packing(png);
  png_read_update_info(png, info);
  depth = png_get_bit_depth(png, info);
  Tensor out({1, 3, static_cast<int64_t>(H), static_cast<int64_t>(W)});
  if (depth == 16) {
    std::vector<uint16_t> row(static_cast<size_t>(W) * 3);
    for (png_uint_32 y = 0; y < H; ++y) {
      png_read_row(png, reinterpret_cast<png_bytep>(row.data()), nullptr);
      for (png_uint_32 x = 0; x < W; ++x)
        for (int c = 0; c < 3; ++c) {
          uint16_t be = row[x * 3 + c];
          uint16_t v = static_cast<uint16_t>((be >> 8) | (be << 8));
          out.at4(0, c, y, x) = v / 65535.0;
        }
    }
  } else {
    std::vector<uint8_t> row(static_cast<size_t>(W) * 3);
    for (png_uint_32 y = 0; y < H; ++y) {
      png_read_row(png, row.data(), nullptr);
      for (png_uint_32 x = 0; x < W; ++x)
        for (int c = 0; c < 3; ++c) out.at4(0, c, y, x) = row[x * 3 + c] / 255.0;
    }
  }
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  std::fclose(fp);
  return out;
}

// ------------------------------------------------------------------- dataset

void write_annotations(const std::string& path,
                       const std::vector<std::pair<std::string, det::DetectionSet>>& items,
                       const std::vector<std::string>& class_names, int width, int height,
                       bool with_scores) {
  json root;
  root["classes"] = class_names;
  json images = json::array();
  for (const auto& [file, ds] : items) {
    json im;
    im["file"] = file;
    im["width"] = width;
    im["height"] = height;
    json objs = json::array();
    for (size_t i = 0; i < ds.boxes.size(); ++i) {
      json o;
      o["bbox"] = {ds.boxes[i].x1 * width, ds.boxes[i].y1 * height, ds.boxes[i].x2 * width,
                   ds.boxes[i].y2 * height};
      o["class"] = class_names.at(ds.labels[i]);
      if (with_scores && !ds.scores.empty()) o["score"] = ds.scores[i];
      objs.push_back(o);
    }
    im["objects"] = objs;
    images.push_back(im);
  }
  root["images"] = images;
  std::ofstream f(path);
  if (!f) throw ConfigError("cannot write annotations: " + path);
  f << root.dump(2) << "\n";
}

std::vector<std::pair<std::string, det::DetectionSet>> read_annotations(
    const std::string& path, std::vector<std::string>* class_names) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open annotations: " + path);
  json root;
  try {
    root = json::parse(f);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad annotations JSON: ") + e.what());
  }
  std::vector<std::string> classes;
  for (const auto& c : root.at("classes")) classes.push_back(c.get<std::string>());
  if (class_names) *class_names = classes;
  auto class_index = [&](const std::string& name) {
    for (size_t i = 0; i < classes.size(); ++i)
      if (classes[i] == name) return static_cast<int>(i);
    throw ConfigError("unknown class in annotations: " + name);
  };
  std::vector<std::pair<std::string, det::DetectionSet>> out;
  for (const auto& im : root.at("images")) {
    det::DetectionSet ds;
    double W = im.at("width").get<double>(), H = im.at("height").get<double>();
    bool any_score = false;
    for (const auto& o : im.at("objects")) {
      const auto& bb = o.at("bbox");
      ds.boxes.push_back(det::Box{bb[0].get<double>() / W, bb[1].get<double>() / H,
                                  bb[2].get<double>() / W, bb[3].get<double>() / H});
      ds.labels.push_back(class_index(o.at("class").get<std::string>()));
      if (o.contains("score")) {
        ds.scores.push_back(o.at("score").get<double>());
        any_score = true;
      } else {
        ds.scores.push_back(1.0);
      }
    }
    if (!any_score) ds.scores.clear();
    out.emplace_back(im.at("file").get<std::string>(), std::move(ds));
  }
  return out;
}

void write_dataset(const std::string& dir, const std::vector<PairedSample>& samples,
                   const std::vector<std::string>& class_names) {
  fs::create_directories(fs::path(dir) / "raw");
  fs::create_directories(fs::path(dir) / "reference");
  std::vector<std::pair<std::string, det::DetectionSet>> items;
  for (const auto& s : samples) {
    write_png16((fs::path(dir) / "raw" / (s.id + ".png")).string(), s.x);
    write_png16((fs::path(dir) / "reference" / (s.id + ".png")).string(), s.z);
    items.emplace_back(s.id + ".png", s.truth);
  }
  int W = static_cast<int>(samples.at(0).x.shape[3]);
  int H = static_cast<int>(samples.at(0).x.shape[2]);
  write_annotations((fs::path(dir) / "annotations.json").string(), items, class_names, W, H);
  json manifest;
  manifest["pairs"] = json::array();
  for (const auto& s : samples)
    manifest["pairs"].push_back({{"id", s.id},
                                 {"raw", "raw/" + s.id + ".png"},
                                 {"reference", "reference/" + s.id + ".png"}});
  manifest["annotations"] = "annotations.json";
  std::ofstream f(fs::path(dir) / "manifest.json");
  f << manifest.dump(2) << "\n";
}

std::vector<PairedSample> load_dataset(const std::string& dir,
                                       std::vector<std::string>* class_names) {
  std::ifstream mf(fs::path(dir) / "manifest.json");
  if (!mf) throw ConfigError("missing dataset manifest: " + dir + "/manifest.json");
  json manifest = json::parse(mf);
  json ann;
  {
    std::ifstream af(fs::path(dir) / manifest.value("annotations", "annotations.json"));
    if (af) ann = json::parse(af);
  }
  std::vector<std::string> classes;
  if (!ann.is_null())
    for (const auto& c : ann["classes"]) classes.push_back(c.get<std::string>());
  if (class_names) *class_names = classes;
  auto class_index = [&](const std::string& name) {
    for (size_t i = 0; i < classes.size(); ++i)
      if (classes[i] == name) return static_cast<int>(i);
    throw ConfigError("unknown class in annotations: " + name);
  };
  std::vector<PairedSample> out;
  for (const auto& p : manifest["pairs"]) {
    PairedSample s;
    s.id = p["id"].get<std::string>();
    s.x = read_png((fs::path(dir) / p["raw"].get<std::string>()).string());
    s.z = read_png((fs::path(dir) / p["reference"].get<std::string>()).string());
    if (!s.x.same_shape(s.z)) throw DimensionError("paired images differ in shape: " + s.id);
    if (!ann.is_null()) {
      for (const auto& im : ann["images"]) {
        if (im["file"].get<std::string>() != s.id + ".png") continue;
        double W = im["width"].get<double>(), H = im["height"].get<double>();
        for (const auto& o : im["objects"]) {
          auto bb = o["bbox"];
          s.truth.boxes.push_back(det::Box{bb[0].get<double>() / W, bb[1].get<double>() / H,
                                           bb[2].get<double>() / W, bb[3].get<double>() / H});
          s.truth.labels.push_back(class_index(o["class"].get<std::string>()));
        }
        break;
      }
      s.truth.validate(static_cast<int>(classes.size()));
    }
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace carnet::data
