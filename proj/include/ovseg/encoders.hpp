#pragma once

// Toy frozen image encoders (SAM-like and CLIP-like ViTs) and a seeded toy
// text encoder. Only positional embeddings are trainable.

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "ovseg/numerics/ops.hpp"
#include "ovseg/params.hpp"

namespace ovseg {

enum class EncoderRole { sam_like, clip_like };

struct ViTConfig {
  EncoderRole role = EncoderRole::clip_like;
  std::size_t patch_size = 8;
  std::size_t depth = 8;
  std::size_t heads = 4;
  std::size_t width = 64;
  std::size_t mlp_ratio = 2;
  /// Positional grid the encoder was "pretrained" at; other grids resample it.
  std::size_t native_grid = 8;
  /// Output embedding dim of the CLIP projection (ignored for sam_like).
  std::size_t embed_dim = 64;
  double init_scale = 0.02;
  std::uint64_t seed = 1;
  /// clip_like only: build patch embedding, value path and projection so the
  /// frozen features of an AppearanceMap texture land near its class
  /// embedding. Assumes one texture period per patch.
  bool aligned = true;
  double align_gain = 2.0;
  double value_gain = 0.5;
  /// Number of trailing blocks reused by the mask attention decoder (l = L/4).
  std::size_t masked_blocks() const { return depth / 4; }

  /// sam_like: last three blocks. clip_like: blocks L/4, L/2, 3L/4 (1-based).
  std::vector<std::size_t> tap_blocks() const;
  void validate() const;

  static ViTConfig sam_default();
  static ViTConfig clip_default();
};

/// Fixed relation between a class concept and synthetic appearance. A class
/// renders as a periodic texture of kCells x kCells cells; cell (cy, cx),
/// channel ch has intensity clamp(0.5 + kGain * <Q[(cy*kCells+cx)*3+ch], te>)
/// quantized to 8 bits, Q a seeded (kCells^2*3) x C matrix with N(0,1) entries.
class AppearanceMap {
 public:
  static constexpr std::size_t kCells = 8;
  static constexpr double kGain = 0.15;
  explicit AppearanceMap(std::size_t dim);

  /// One texture period, [kCells * kCells * 3] bytes, (cy, cx, ch) order.
  std::vector<std::uint8_t> texture(std::span<const double> te) const;
  /// Row r of Q (length C).
  std::span<const double> row(std::size_t r) const { return {q_.data() + r * dim_, dim_}; }
  std::size_t rows() const { return kCells * kCells * 3; }
  std::size_t dim() const { return dim_; }

 private:
  std::size_t dim_;
  std::vector<double> q_;
};

struct VitBlock {
  LayerNorm ln1;
  Linear qkv;
  Linear proj;
  LayerNorm ln2;
  Linear fc1;
  Linear fc2;

  /// Pre-norm residual block. The bias is added to the self-attention logits.
  Tensor forward(const Tensor& x, std::size_t heads, const ops::AttentionBias& bias = nullptr) const;
};

class VisionTransformer {
 public:
  explicit VisionTransformer(const ViTConfig& config);

  const ViTConfig& config() const { return config_; }
  bool has_cls() const { return config_.role == EncoderRole::clip_like; }

  /// Patch tokens (+ CLS first for clip_like) with positional embeddings
  /// resampled to the image's grid. Image is [H x W x 3], H and W multiples
  /// of patch_size.
  Tensor embed(const Tensor& image) const;
  Tensor run_block(std::size_t index, const Tensor& tokens, const ops::AttentionBias& bias = nullptr) const;
  const VitBlock& block(std::size_t index) const { return blocks_.at(index); }

  const Tensor& pos_embed() const { return pos_embed_; }
  /// Final LayerNorm + projection to embed_dim (clip_like).
  Tensor project(const Tensor& tokens) const;

  /// Trainable: positional embeddings only.
  void collect(ParamList& out, const std::string& prefix) const;

 private:
  ViTConfig config_;
  Linear patch_embed_;
  Tensor cls_token_;
  Tensor pos_embed_;
  std::vector<VitBlock> blocks_;
  LayerNorm ln_post_;
  Tensor out_proj_;  // [embed_dim x width]
};

/// Resamples a positional table laid out [(cls) + gh*gw x C] to a new grid.
/// The CLS row is copied unchanged.
Tensor interpolate_pos_embed(const Tensor& pos, bool has_cls, std::size_t grid_h, std::size_t grid_w,
                             std::size_t new_h, std::size_t new_w);

/// Splits [H x W x 3] into [(H/p * W/p) x (p*p*3)] patches, row-major over
/// the grid and (py, px, channel) inside a patch. Not differentiable.
Tensor patchify(const Tensor& image, std::size_t patch);

struct SamFeatures {
  std::array<Tensor, 3> taps;  // each [gh x gw x width]
  std::size_t grid_h = 0, grid_w = 0;
};

struct ClipFeatures {
  std::array<Tensor, 3> taps;  // each [gh x gw x width], CLS dropped
  Tensor tokens_u;             // [(1 + gh*gw) x width], input to the last l blocks
  Tensor f_clip;               // [gh x gw x embed_dim]
  std::size_t grid_h = 0, grid_w = 0;
};

SamFeatures encode_sam(const VisionTransformer& sam, const Tensor& image);

/// Resized side = max(patch, round(side * p / patch) * patch).
std::size_t clip_input_side(std::size_t side, double p, std::size_t patch);
ClipFeatures encode_clip(const VisionTransformer& clip, const Tensor& image, double p);

enum class PromptStrategy { single_template, template_average };

/// Seeded stand-in for the CLIP text encoder. A prompt embeds to
/// normalize(class_direction + template_noise * prompt_direction), both
/// directions derived from FNV hashes of the class name and rendered prompt.
class TextEmbedder {
 public:
  static constexpr double kTemplateNoise = 0.6;

  TextEmbedder(std::size_t dim, std::uint64_t seed, std::vector<std::string> templates = default_templates());

  static std::vector<std::string> default_templates();
  /// One template per non-empty line; each must contain "{}".
  static std::vector<std::string> load_templates(const std::filesystem::path& path);

  /// Unit concept direction of a class, independent of any template.
  std::vector<double> class_direction(std::string_view class_name) const;
  std::vector<double> embed_prompt(std::string_view tmpl, std::string_view class_name) const;
  /// [K x C] unit rows. single_template uses the first template.
  Tensor text_embeddings(const std::vector<std::string>& classes, PromptStrategy strategy) const;

  std::size_t dim() const { return dim_; }
  const std::vector<std::string>& templates() const { return templates_; }

 private:
  std::size_t dim_;
  std::uint64_t seed_;
  std::vector<std::string> templates_;
};

std::string render_prompt(std::string_view tmpl, std::string_view class_name);

}  // namespace ovseg
