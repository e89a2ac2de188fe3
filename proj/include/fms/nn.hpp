#pragma once

#include <cstdint>
#include <iosfwd>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "fms/tensor.hpp"

namespace fms {

/// Ordered registry of named learnable tensors. Registration order is the
/// iteration order everywhere (optimizer, checkpoints), which keeps updates
/// deterministic.
class ParamStore {
 public:
  Tensor& add(std::string name, Tensor t);
  const std::vector<std::pair<std::string, Tensor>>& items() const {
    return items_;
  }
  Tensor* find(const std::string& name);
  void zero_grad();
  std::size_t count() const;  // total scalar parameters

  /// Little-endian checkpoint: "FMCK", u32 version, u32 tensor count, then
  /// per tensor u32 name length, name bytes, u32 rank, u64 extents, f64 data.
  void save(std::ostream& os) const;
  /// Loads values into already-registered tensors (names and shapes must
  /// match).
  void load(std::istream& is);

 private:
  std::vector<std::pair<std::string, Tensor>> items_;
};

using Rng = std::mt19937_64;

/// Derives an independent stream seed from a master seed and a stream id.
std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream);

Tensor init_normal(Rng& rng, Shape shape, double stddev);
Tensor init_identity(std::size_t n, double scale = 1.0);

/// Repeats a 1 x D row vector into N x D.
Tensor repeat_rows(const Tensor& row, std::size_t n);
/// Repeats an N x 1 column into N x D.
Tensor repeat_cols(const Tensor& col, std::size_t d);

struct Linear {
  Tensor weight;  // in x out
  Tensor bias;    // 1 x out, may be undefined

  static Linear make(ParamStore& store, const std::string& name, Rng& rng,
                     std::size_t in, std::size_t out, bool with_bias = true);
  /// Zero-initialized weights and bias.
  static Linear zeros(ParamStore& store, const std::string& name,
                      std::size_t in, std::size_t out, bool with_bias = true);
  Tensor operator()(const Tensor& x) const;
  std::size_t in() const { return weight.rows(); }
  std::size_t out() const { return weight.cols(); }
};

/// Linear -> SiLU -> Linear.
struct Mlp {
  Linear first;
  Linear second;

  static Mlp make(ParamStore& store, const std::string& name, Rng& rng,
                  std::size_t in, std::size_t hidden, std::size_t out);
  Tensor operator()(const Tensor& x) const;
};

/// Gradient descent with heavy-ball momentum over a ParamStore.
class MomentumSgd {
 public:
  MomentumSgd(ParamStore& store, double lr, double momentum);
  /// Applies one update from the accumulated gradients. Gradients are
  /// rescaled to `clip_norm` when their global norm exceeds it (0 = off).
  /// Returns the pre-clip global gradient norm.
  double step(double clip_norm = 0.0);

 private:
  ParamStore& store_;
  double lr_;
  double momentum_;
  std::vector<std::vector<double>> velocity_;
};

}  // namespace fms
