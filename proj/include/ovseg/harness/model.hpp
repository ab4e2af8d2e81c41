#pragma once

#include <vector>

#include "ovseg/adab_decoder.hpp"
#include "ovseg/harness/config.hpp"
#include "ovseg/image_io.hpp"
#include "ovseg/losses.hpp"

namespace ovseg {

class Model {
 public:
  explicit Model(const RunConfig& config);

  const RunConfig& config() const { return config_; }
  const VisionTransformer& sam() const { return sam_; }
  const VisionTransformer& clip() const { return clip_; }
  const FusionModule& fusion() const { return fusion_; }
  const PixelDecoder& pixel_decoder() const { return pixel_; }
  const TransformerDecoder& decoder() const { return decoder_; }
  const TextEmbedder& text() const { return text_; }

  /// Every parameter; frozen encoder weights carry trainable = false.
  ParamList parameters() const;
  ParamList trainable_parameters() const;

 private:
  RunConfig config_;
  VisionTransformer sam_;
  VisionTransformer clip_;
  FusionModule fusion_;
  PixelDecoder pixel_;
  TransformerDecoder decoder_;
  TextEmbedder text_;
};

struct ForwardOutput {
  Prediction prediction;       // per-layer A predictions plus the B stream
  EmbeddingTriple embeddings;  // last layer
  Tensor masks;                // last layer [h x w x N] at mask resolution
};

/// One image [H x W x 3] in [0, 1]. class_embeddings [K' x C] are the
/// classes scored by the training logits. with_b = false skips the mask
/// attention decoder.
ForwardOutput forward(const Model& model, const Tensor& image, const Tensor& class_embeddings, bool with_b = true);

Tensor image_tensor(const Image8& img);

inline constexpr std::size_t kUnmappedClass = static_cast<std::size_t>(-1);

/// Binary masks at mask_h x mask_w (nearest sample of the label map) for
/// every class present. Label c maps to class_map[c]; labels mapped to
/// kUnmappedClass or beyond the map are dropped.
GroundTruth ground_truth(const std::vector<std::uint16_t>& labels, std::size_t height, std::size_t width,
                         std::size_t mask_h, std::size_t mask_w, const std::vector<std::size_t>& class_map);

}  // namespace ovseg
