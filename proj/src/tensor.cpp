#include "rfx/tensor.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace rfx::nn {

Tensor::Tensor(std::vector<int> s, double fill) : shape(std::move(s)) {
  size_t n = 1;
  for (int d : shape) {
    if (d < 0) throw std::invalid_argument("tensor: negative dimension");
    n *= size_t(d);
  }
  v.assign(n, fill);
}

Tensor Tensor::scalar(double x) {
  Tensor t;
  t.shape = {1};
  t.v = {x};
  return t;
}

Tensor Tensor::from(std::vector<int> s, std::vector<double> data) {
  Tensor t;
  t.shape = std::move(s);
  t.v = std::move(data);
  if (t.numel() != int(t.v.size())) throw std::invalid_argument("tensor: data size != shape");
  return t;
}

int Tensor::numel() const {
  int n = 1;
  for (int d : shape) n *= d;
  return n;
}

bool Tensor::all_finite() const {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

Tensor& ParamStore::add(const std::string& name, Tensor init) {
  auto [it, inserted] = params.try_emplace(name);
  if (!inserted) throw std::invalid_argument("param store: duplicate name " + name);
  it->second.m = Tensor(init.shape, 0.0);
  it->second.vhat = Tensor(init.shape, 0.0);
  it->second.value = std::move(init);
  return it->second.value;
}

Tensor& ParamStore::at(const std::string& name) {
  auto it = params.find(name);
  if (it == params.end()) throw std::out_of_range("param store: missing " + name);
  return it->second.value;
}

const Tensor& ParamStore::at(const std::string& name) const {
  auto it = params.find(name);
  if (it == params.end()) throw std::out_of_range("param store: missing " + name);
  return it->second.value;
}

uint64_t ParamStore::checksum() const {
  uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](const void* data, size_t len) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < len; ++i) {
      h ^= p[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& [name, entry] : params) {
    mix(name.data(), name.size());
    mix(entry.value.v.data(), entry.value.v.size() * sizeof(double));
  }
  return h;
}

EmaState make_ema(const ParamStore& store, double momentum) {
  EmaState ema;
  ema.momentum = momentum;
  for (const auto& [name, entry] : store.params) ema.shadow[name] = entry.value;
  return ema;
}

Tensor init_weight(int fan_in, int fan_out, Rng& rng) {
  Tensor w({fan_in, fan_out});
  const double bound = 1.0 / std::sqrt(double(fan_in));
  for (double& x : w.v) x = rng.uniform(-bound, bound);
  return w;
}

Tensor init_bias(int n) { return Tensor({n}, 0.0); }

Tensor init_token(std::vector<int> shape, Rng& rng) {
  Tensor t(std::move(shape));
  for (double& x : t.v) x = 0.02 * rng.normal();
  return t;
}

namespace {

constexpr char kMagic[] = "RFX3D1";

template <typename T>
void write_pod(std::ostream& os, T value) {
  os.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
  T value{};
  is.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!is) throw std::runtime_error("checkpoint: truncated file");
  return value;
}

}  // namespace

void save_checkpoint(const std::string& path, const std::map<std::string, Tensor>& tensors) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
  os.write(kMagic, 6);
  write_pod<uint64_t>(os, tensors.size());
  for (const auto& [name, t] : tensors) {
    write_pod<uint32_t>(os, uint32_t(name.size()));
    os.write(name.data(), std::streamsize(name.size()));
    write_pod<uint32_t>(os, uint32_t(t.shape.size()));
    for (int d : t.shape) write_pod<uint64_t>(os, uint64_t(d));
    os.write(reinterpret_cast<const char*>(t.v.data()), std::streamsize(t.v.size() * 8));
  }
  if (!os) throw std::runtime_error("checkpoint: write failed for " + path);
}

std::map<std::string, Tensor> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open " + path);
  char magic[6];
  is.read(magic, 6);
  if (!is || std::memcmp(magic, kMagic, 6) != 0)
    throw std::runtime_error("checkpoint: unknown format version in " + path);
  std::map<std::string, Tensor> out;
  const uint64_t count = read_pod<uint64_t>(is);
  for (uint64_t i = 0; i < count; ++i) {
    const uint32_t name_len = read_pod<uint32_t>(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    const uint32_t ndim = read_pod<uint32_t>(is);
    std::vector<int> shape(ndim);
    size_t numel = 1;
    for (uint32_t d = 0; d < ndim; ++d) {
      shape[d] = int(read_pod<uint64_t>(is));
      numel *= size_t(shape[d]);
    }
    Tensor t;
    t.shape = std::move(shape);
    t.v.resize(numel);
    is.read(reinterpret_cast<char*>(t.v.data()), std::streamsize(numel * 8));
    if (!is) throw std::runtime_error("checkpoint: truncated tensor data in " + path);
    out.emplace(std::move(name), std::move(t));
  }
  return out;
}

std::map<std::string, Tensor> param_values(const ParamStore& store) {
  std::map<std::string, Tensor> out;
  for (const auto& [name, entry] : store.params) out[name] = entry.value;
  return out;
}

void load_param_values(ParamStore& store, const std::map<std::string, Tensor>& tensors) {
  for (auto& [name, entry] : store.params) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw std::runtime_error("checkpoint: missing tensor " + name);
    if (it->second.shape != entry.value.shape)
      throw std::runtime_error("checkpoint: shape mismatch for " + name);
    entry.value = it->second;
  }
}

}  // namespace rfx::nn
