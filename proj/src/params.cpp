#include "ovseg/params.hpp"

#include <cstring>

#include "ovseg/numerics/ops.hpp"

namespace ovseg {

Tensor gaussian(Rng& rng, Shape shape, double scale) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = scale * rng.normal();
  return Tensor(std::move(shape), std::move(v));
}

std::uint64_t checksum(const ParamList& params, bool trainable) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const NamedParam& p : params) {
    if (p.trainable != trainable) continue;
    h = fnv1a(p.name, h);
    for (double v : p.tensor.data()) {
      unsigned char bytes[sizeof(double)];
      std::memcpy(bytes, &v, sizeof v);
      for (unsigned char b : bytes) {
        h ^= b;
        h *= 0x100000001b3ULL;
      }
    }
  }
  return h;
}

Linear::Linear(Rng& rng, std::size_t in, std::size_t out, double scale)
    : weight(gaussian(rng, {out, in}, scale)), bias(Tensor({out}, 0.0)) {}

Tensor Linear::operator()(const Tensor& x) const { return ops::linear(x, weight, &bias); }

void Linear::collect(ParamList& out, const std::string& prefix, bool trainable) const {
  out.push_back({prefix + ".weight", weight, trainable});
  out.push_back({prefix + ".bias", bias, trainable});
}

LayerNorm::LayerNorm(std::size_t dim) : gamma(Tensor({dim}, 1.0)), beta(Tensor({dim}, 0.0)) {}

Tensor LayerNorm::operator()(const Tensor& x) const { return ops::layer_norm(x, gamma, beta); }

void LayerNorm::collect(ParamList& out, const std::string& prefix, bool trainable) const {
  out.push_back({prefix + ".gamma", gamma, trainable});
  out.push_back({prefix + ".beta", beta, trainable});
}

}  // namespace ovseg
