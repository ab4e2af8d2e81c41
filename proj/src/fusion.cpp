#include "ovseg/fusion.hpp"

#include "ovseg/errors.hpp"
#include "ovseg/numerics/ops.hpp"

namespace ovseg {

std::array<std::size_t, 2> pyramid_extent(std::size_t image_h, std::size_t image_w, std::size_t level) {
  const std::size_t s = std::size_t{1} << (level + 3);
  return {(image_h + s - 1) / s, (image_w + s - 1) / s};
}

FeaturePyramid fuse_levels(const std::array<Tensor, 3>& fa, const std::array<Tensor, 3>& fb,
                           std::size_t image_h, std::size_t image_w) {
  FeaturePyramid out;
  for (std::size_t i = 0; i < 3; ++i) {
    if (fa[i].rank() != 3 || fb[i].rank() != 3) throw DimensionError("fuse: features must be [h x w x c]");
    if (fa[i].dim(2) != fb[i].dim(2))
      throw ContractError("fuse: channel mismatch after projection at level " + std::to_string(i));
    const auto [h, w] = pyramid_extent(image_h, image_w, i);
    auto resize = [&](const Tensor& t) {
      return (t.dim(0) == h && t.dim(1) == w) ? t : ops::bilinear_resize(t, h, w);
    };
    out.levels[i] = ops::add(resize(fa[i]), resize(fb[i]));
  }
  return out;
}

FusionModule::FusionModule(std::size_t clip_channels, std::size_t sam_channels, std::uint64_t seed,
                           double init_scale) {
  Rng rng(mix_seed(seed, "fusion"));
  proj_ = Linear(rng, clip_channels, sam_channels, init_scale);
  proj_.weight.set_requires_grad(true);
  proj_.bias.set_requires_grad(true);
}

Tensor FusionModule::project_channels(const Tensor& fb) const { return proj_(fb); }

FeaturePyramid FusionModule::fuse(const std::array<Tensor, 3>& fa, const std::array<Tensor, 3>& fb,
                                  std::size_t image_h, std::size_t image_w) const {
  std::array<Tensor, 3> projected;
  for (std::size_t i = 0; i < 3; ++i) projected[i] = project_channels(fb[i]);
  return fuse_levels(fa, projected, image_h, image_w);
}

void FusionModule::collect(ParamList& out, const std::string& prefix) const { proj_.collect(out, prefix + ".proj", true); }

}  // namespace ovseg
