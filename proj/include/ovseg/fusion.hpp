#pragma once

#include <array>
#include <cstdint>

#include "ovseg/numerics/tensor.hpp"
#include "ovseg/params.hpp"

namespace ovseg {

/// Fused multi-scale features; level i (0-based) is ceil(H/2^(i+3)) x ceil(W/2^(i+3)) x C.
struct FeaturePyramid {
  std::array<Tensor, 3> levels;
};

/// {height, width} of pyramid level i for an H x W image (ceiling division).
std::array<std::size_t, 2> pyramid_extent(std::size_t image_h, std::size_t image_w, std::size_t level);

/// Resizes each pair to its level extent and adds. Inputs must already share
/// a channel count.
FeaturePyramid fuse_levels(const std::array<Tensor, 3>& fa, const std::array<Tensor, 3>& fb,
                           std::size_t image_h, std::size_t image_w);

/// Projects CLIP-side features to the SAM channel count, then fuses.
class FusionModule {
 public:
  FusionModule() = default;
  FusionModule(std::size_t clip_channels, std::size_t sam_channels, std::uint64_t seed, double init_scale);

  /// Per-position affine map C_b -> C_a, applied at native resolution.
  Tensor project_channels(const Tensor& fb) const;
  FeaturePyramid fuse(const std::array<Tensor, 3>& fa, const std::array<Tensor, 3>& fb, std::size_t image_h,
                      std::size_t image_w) const;

  Linear& projection() { return proj_; }
  const Linear& projection() const { return proj_; }
  void collect(ParamList& out, const std::string& prefix) const;

 private:
  Linear proj_;
};

}  // namespace ovseg
