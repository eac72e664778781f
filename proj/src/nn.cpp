#include "carnet/nn.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

namespace carnet::nn {

Tensor& ParamStore::create(const std::string& name, std::vector<int64_t> shape) {
  auto [it, inserted] = params_.emplace(name, Tensor(std::move(shape)));
  if (!inserted) throw ConfigError("parameter already exists: " + name);
  return it->second;
}

Tensor& ParamStore::get(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw ConfigError("unknown parameter: " + name);
  return it->second;
}

const Tensor& ParamStore::get(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw ConfigError("unknown parameter: " + name);
  return it->second;
}

std::vector<std::string> ParamStore::names(const std::string& prefix) const {
  std::vector<std::string> out;
  for (const auto& [k, v] : params_)
    if (k.rfind(prefix, 0) == 0) out.push_back(k);
  return out;
}

uint64_t ParamStore::hash(const std::string& prefix) const {
  uint64_t h = 1469598103934665603ull;
  auto mix = [&h](const void* p, size_t n) {
    const unsigned char* b = static_cast<const unsigned char*>(p);
    for (size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ull;
    }
  };
  for (const auto& [k, t] : params_) {
    if (k.rfind(prefix, 0) != 0) continue;
    mix(k.data(), k.size());
    mix(t.data.data(), t.data.size() * sizeof(double));
  }
  return h;
}

namespace {
constexpr char kMagic[8] = {'C', 'R', 'N', 'W', 'T', 'S', '0', '1'};
}

void ParamStore::save_blob(const std::string& path, const std::string& prefix) const {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot open weights file for write: " + path);
  f.write(kMagic, 8);
  std::vector<std::string> ns = names(prefix);
  uint64_t count = ns.size();
  f.write(reinterpret_cast<const char*>(&count), 8);
  for (const auto& name : ns) {
    const Tensor& t = params_.at(name);
    uint64_t nlen = name.size();
    f.write(reinterpret_cast<const char*>(&nlen), 8);
    f.write(name.data(), static_cast<std::streamsize>(nlen));
    uint64_t nd = t.shape.size();
    f.write(reinterpret_cast<const char*>(&nd), 8);
    for (int64_t d : t.shape) f.write(reinterpret_cast<const char*>(&d), 8);
    f.write(reinterpret_cast<const char*>(t.data.data()),
            static_cast<std::streamsize>(t.data.size() * sizeof(double)));
  }
  if (!f) throw ConfigError("short write: " + path);
}

void ParamStore::load_blob(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot open weights file: " + path);
  char magic[8];
  f.read(magic, 8);
  if (!f || std::memcmp(magic, kMagic, 8) != 0)
    throw ConfigError("bad weights file magic: " + path);
  uint64_t count = 0;
  f.read(reinterpret_cast<char*>(&count), 8);
  for (uint64_t i = 0; i < count; ++i) {
    uint64_t nlen = 0;
    f.read(reinterpret_cast<char*>(&nlen), 8);
    std::string name(nlen, '\0');
    f.read(name.data(), static_cast<std::streamsize>(nlen));
    uint64_t nd = 0;
    f.read(reinterpret_cast<char*>(&nd), 8);
    std::vector<int64_t> shape(nd);
    for (uint64_t d = 0; d < nd; ++d) f.read(reinterpret_cast<char*>(&shape[d]), 8);
    Tensor t(shape);
    f.read(reinterpret_cast<char*>(t.data.data()),
           static_cast<std::streamsize>(t.data.size() * sizeof(double)));
    if (!f) throw ConfigError("truncated weights file: " + path);
    params_[name] = std::move(t);
  }
}

void init_conv(Tensor& w, Rng& rng) {
  size_t nd = w.ndim();
  if (nd != 4 && nd != 5) throw DimensionError("init_conv expects 4-D or 5-D kernel");
  int64_t cin = w.shape[nd - 3];
  double limit = std::sqrt(6.0 / static_cast<double>(cin * 9));
  rng.fill_uniform(w, -limit, limit);
}

void init_linear(Tensor& w, Rng& rng) {
  if (w.ndim() != 2) throw DimensionError("init_linear expects 2-D weight");
  double limit = std::sqrt(6.0 / static_cast<double>(w.shape[1]));
  rng.fill_uniform(w, -limit, limit);
}

}  // namespace carnet::nn
