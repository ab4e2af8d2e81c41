#pragma once

// Mask decoder producing masks M, per-head attention masks M_attn and the
// three embedding streams: A (supervised), B (CLIP mask attention), D (frozen).

#include <array>
#include <cstdint>
#include <vector>

#include "ovseg/encoders.hpp"
#include "ovseg/fusion.hpp"
#include "ovseg/numerics/ops.hpp"
#include "ovseg/params.hpp"

namespace ovseg {

struct DecoderConfig {
  std::size_t num_queries = 100;
  std::size_t layers = 9;
  std::size_t hidden = 256;
  std::size_t heads = 8;
  std::size_t ffn_dim = 2048;
  /// Channels of the pixel decoder pyramid.
  std::size_t conv_dim = 256;
  /// Output embedding dim C (text-embedding dim).
  std::size_t embed_dim = 512;
  /// CLIP head count n.
  std::size_t clip_heads = 12;
  /// Masked CLIP blocks l.
  std::size_t masked_blocks = 3;
  /// Gain on the 1/sqrt(fan_in) init of every decoder linear map.
  double init_scale = 1.0;
  std::uint64_t seed = 303;

  void validate() const;
};

/// The three embedding streams, each [N x C] with unit rows.
struct EmbeddingTriple {
  Tensor a;
  Tensor b;
  Tensor d;
};

/// Logit threshold and additive bias used for binarized attention masks.
inline constexpr double kMaskedBias = -1e9;

struct PixelDecoderOutput {
  std::array<Tensor, 3> stages;  // coarse to fine, [h x w x conv_dim]
  Tensor mask_features;          // F'_1, [ceil(H/4) x ceil(W/4) x C]
};

class PixelDecoder {
 public:
  PixelDecoder() = default;
  PixelDecoder(std::size_t in_channels, const DecoderConfig& config, Rng& rng);

  PixelDecoderOutput operator()(const FeaturePyramid& pyr, std::size_t image_h, std::size_t image_w) const;
  void collect(ParamList& out, const std::string& prefix) const;

 private:
  std::array<Linear, 3> lateral_;
  std::array<Linear, 3> refine_;  // 3x3 convolutions as linear maps over im2col rows
  Linear fine_;
  Linear mask_feature_;
};

struct DecoderLayer {
  Linear cq, ck, cv, co;
  LayerNorm c_norm;
  Linear sq, sk, sv, so;
  LayerNorm s_norm;
  Linear fc1, fc2;
  LayerNorm f_norm;
};

struct TransformerDecoderOutput {
  std::vector<Tensor> a_layers;  // per layer [N x C], unit rows
  Tensor a;                      // last entry of a_layers
  Tensor a_prime;                // [N x (C * n)]
};

class TransformerDecoder {
 public:
  TransformerDecoder() = default;
  TransformerDecoder(const DecoderConfig& config, Rng& rng);

  /// Layer i cross-attends to stage i mod 3, restricted to the previous
  /// prediction's mask (sigmoid > 0.5), then self-attends among queries.
  TransformerDecoderOutput operator()(const std::array<Tensor, 3>& stages, const Tensor& mask_features) const;

  const DecoderConfig& config() const { return config_; }
  Tensor& query_feat() { return query_feat_; }
  Tensor& query_pos() { return query_pos_; }
  Linear& expansion() { return expansion_; }
  const Tensor& void_embedding() const { return void_embedding_; }
  void collect(ParamList& out, const std::string& prefix) const;

 private:
  Tensor predict_embedding(const Tensor& tgt) const;

  DecoderConfig config_;
  Tensor query_feat_, query_pos_;
  std::array<Linear, 3> input_proj_;
  Tensor level_embed_;  // [3 x hidden]
  std::vector<DecoderLayer> layers_;
  LayerNorm out_norm_;
  Linear embed1_, embed2_;
  Linear expansion_;
  Tensor void_embedding_;  // [C], the no-object class for classification
};

/// M[h, w, q] = <F'_1[h, w, :], A[q, :]>.
Tensor compute_masks(const Tensor& mask_features, const Tensor& a);

/// M_attn[h, w, hd, q] = <F'_1[h, w, :], A'[q, hd*C:(hd+1)*C]>.
Tensor compute_attention_masks(const Tensor& mask_features, const Tensor& a_prime, std::size_t heads);

/// Additive bias for a masked cross-attention: [heads x N x (gh*gw)] with 0
/// where the resized logit is > 0 and kMaskedBias elsewhere. A fully masked
/// row is opened. mask is [h x w x N] or [h x w x heads x N].
std::vector<double> mask_bias(const Tensor& mask, std::size_t heads, std::size_t grid_h, std::size_t grid_w);

/// B: N duplicated CLS tokens of U run through the last l CLIP blocks
/// alongside U, each query reading only itself and the patches its per-head
/// mask allows. Rows are projected to C and normalized.
Tensor mask_attention_decode(const VisionTransformer& clip, const Tensor& tokens_u, const Tensor& m_attn,
                             std::size_t grid_h, std::size_t grid_w);

/// D: sigmoid-weighted mean of F_clip per query, normalized. Not recorded on
/// the tape.
Tensor mask_pooling(const Tensor& masks, const Tensor& f_clip);

/// Cosine logits [N x (K + 1)] against K class embeddings and the no-object
/// embedding, scaled by logit_scale. Rows of e must be unit-norm.
Tensor class_logits(const Tensor& e, const Tensor& class_embeddings, const Tensor* void_embedding,
                    double logit_scale);

}  // namespace ovseg
