#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ovseg/numerics/tensor.hpp"
#include "ovseg/rng.hpp"

namespace ovseg {

struct NamedParam {
  std::string name;
  Tensor tensor;  // shares storage with the owning module
  bool trainable = false;
};

using ParamList = std::vector<NamedParam>;

/// Gaussian init, N(0, scale^2).
Tensor gaussian(Rng& rng, Shape shape, double scale);

/// Order-sensitive FNV-1a over the raw bytes of every listed tensor.
std::uint64_t checksum(const ParamList& params, bool trainable);

/// Affine map x W^T + b with W [out x in].
struct Linear {
  Tensor weight;
  Tensor bias;

  Linear() = default;
  Linear(Rng& rng, std::size_t in, std::size_t out, double scale);
  Tensor operator()(const Tensor& x) const;
  void collect(ParamList& out, const std::string& prefix, bool trainable) const;
  std::size_t in_features() const { return weight.dim(1); }
  std::size_t out_features() const { return weight.dim(0); }
};

struct LayerNorm {
  Tensor gamma;
  Tensor beta;

  LayerNorm() = default;
  explicit LayerNorm(std::size_t dim);
  Tensor operator()(const Tensor& x) const;
  void collect(ParamList& out, const std::string& prefix, bool trainable) const;
};

}  // namespace ovseg
