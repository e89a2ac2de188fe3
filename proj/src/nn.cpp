#include "fms/nn.hpp"

#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <istream>
#include <ostream>
#include <stdexcept>

namespace fms {

namespace {

constexpr std::array<char, 4> kCheckpointMagic{'F', 'M', 'C', 'K'};
constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
void put_le(std::ostream& os, T v) {
  static_assert(std::is_integral_v<T>);
  for (std::size_t i = 0; i < sizeof(T); ++i)
    os.put(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff));
}

template <typename T>
T get_le(std::istream& is) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    const int c = is.get();
    if (c == std::char_traits<char>::eof())
      throw std::runtime_error("checkpoint: unexpected end of file");
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * i);
  }
  return static_cast<T>(v);
}

void put_f64(std::ostream& os, double d) {
  put_le<std::uint64_t>(os, std::bit_cast<std::uint64_t>(d));
}

double get_f64(std::istream& is) {
  return std::bit_cast<double>(get_le<std::uint64_t>(is));
}

}  // namespace

Tensor& ParamStore::add(std::string name, Tensor t) {
  for (const auto& [n, _] : items_)
    if (n == name) throw ContractError("param store: duplicate name " + name);
  items_.emplace_back(std::move(name), std::move(t));
  return items_.back().second;
}

Tensor* ParamStore::find(const std::string& name) {
  for (auto& [n, t] : items_)
    if (n == name) return &t;
  return nullptr;
}

void ParamStore::zero_grad() {
  for (auto& [_, t] : items_) t.zero_grad();
}

std::size_t ParamStore::count() const {
  std::size_t n = 0;
  for (const auto& [_, t] : items_) n += t.numel();
  return n;
}

void ParamStore::save(std::ostream& os) const {
  os.write(kCheckpointMagic.data(), kCheckpointMagic.size());
  put_le<std::uint32_t>(os, kCheckpointVersion);
  put_le<std::uint32_t>(os, static_cast<std::uint32_t>(items_.size()));
  for (const auto& [name, t] : items_) {
    put_le<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.shape().size()));
    for (auto e : t.shape()) put_le<std::uint64_t>(os, e);
    for (double v : t.data()) put_f64(os, v);
  }
}

void ParamStore::load(std::istream& is) {
  std::array<char, 4> magic{};
  is.read(magic.data(), magic.size());
  if (!is || magic != kCheckpointMagic)
    throw std::runtime_error("checkpoint: bad magic");
  if (get_le<std::uint32_t>(is) != kCheckpointVersion)
    throw std::runtime_error("checkpoint: unsupported version");
  const auto count = get_le<std::uint32_t>(is);
  for (std::uint32_t k = 0; k < count; ++k) {
    std::string name(get_le<std::uint32_t>(is), '\0');
    is.read(name.data(), static_cast<std::streamsize>(name.size()));
    Shape shape(get_le<std::uint32_t>(is));
    for (auto& e : shape) e = get_le<std::uint64_t>(is);
    Tensor* t = find(name);
    if (t == nullptr)
      throw std::runtime_error("checkpoint: unknown tensor " + name);
    if (t->shape() != shape)
      throw std::runtime_error("checkpoint: shape mismatch for " + name +
                               ": file " + shape_str(shape) + ", model " +
                               shape_str(t->shape()));
    for (double& v : t->mutable_data()) v = get_f64(is);
  }
}

std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream) {
  // splitmix64 over the combined key
  std::uint64_t z = master + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

Tensor init_normal(Rng& rng, Shape shape, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = dist(rng);
  return Tensor::param(std::move(shape), std::move(v));
}

Tensor init_identity(std::size_t n, double scale) {
  std::vector<double> v(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) v[i * n + i] = scale;
  return Tensor::param({n, n}, std::move(v));
}

Tensor repeat_rows(const Tensor& row, std::size_t n) {
  return gather(row, 0, Index(n, 0));
}

Tensor repeat_cols(const Tensor& col, std::size_t d) {
  return gather(col, 1, Index(d, 0));
}

Linear Linear::make(ParamStore& store, const std::string& name, Rng& rng,
                    std::size_t in, std::size_t out, bool with_bias) {
  Linear l;
  l.weight = store.add(name + ".weight",
                       init_normal(rng, {in, out}, 1.0 / std::sqrt(in)));
  if (with_bias)
    l.bias = store.add(name + ".bias",
                       Tensor::param({1, out}, std::vector<double>(out, 0.0)));
  return l;
}

Linear Linear::zeros(ParamStore& store, const std::string& name, std::size_t in,
                     std::size_t out, bool with_bias) {
  Linear l;
  l.weight = store.add(name + ".weight",
                       Tensor::param({in, out}, std::vector<double>(in * out)));
  if (with_bias)
    l.bias = store.add(name + ".bias",
                       Tensor::param({1, out}, std::vector<double>(out, 0.0)));
  return l;
}

Tensor Linear::operator()(const Tensor& x) const {
  Tensor y = matmul(x, weight);
  if (bias.defined()) y = add(y, repeat_rows(bias, x.rows()));
  return y;
}

Mlp Mlp::make(ParamStore& store, const std::string& name, Rng& rng,
              std::size_t in, std::size_t hidden, std::size_t out) {
  return {Linear::make(store, name + ".0", rng, in, hidden),
          Linear::make(store, name + ".1", rng, hidden, out)};
}

Tensor Mlp::operator()(const Tensor& x) const { return second(silu(first(x))); }

MomentumSgd::MomentumSgd(ParamStore& store, double lr, double momentum)
    : store_(store), lr_(lr), momentum_(momentum) {
  for (const auto& [_, t] : store_.items())
    velocity_.emplace_back(t.numel(), 0.0);
}

double MomentumSgd::step(double clip_norm) {
  double sq = 0.0;
  std::vector<std::vector<double>> grads;
  grads.reserve(store_.items().size());
  for (const auto& [_, t] : store_.items()) {
    grads.push_back(t.grad());
    for (double g : grads.back()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  const double factor =
      (clip_norm > 0.0 && norm > clip_norm) ? clip_norm / norm : 1.0;
  std::size_t k = 0;
  for (const auto& item : store_.items()) {
    Tensor t = item.second;
    auto data = t.mutable_data();
    auto& vel = velocity_[k];
    const auto& g = grads[k];
    for (std::size_t i = 0; i < data.size(); ++i) {
      vel[i] = momentum_ * vel[i] + factor * g[i];
      data[i] -= lr_ * vel[i];
    }
    ++k;
  }
  return norm;
}

}  // namespace fms
