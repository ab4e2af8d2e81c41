#include "ovseg/harness/model.hpp"

#include <cmath>

#include "ovseg/errors.hpp"

namespace ovseg {

Model::Model(const RunConfig& config)
    : config_((config.validate(), config)),
      sam_(config.sam_config()),
      clip_(config.clip_config()),
      text_(config.embed_dim, config.text_seed) {
  fusion_ = FusionModule(config.embed_dim, config.sam_width, mix_seed(config.seed, "fusion"),
                         config.init_scale / std::sqrt(static_cast<double>(config.embed_dim)));
  const DecoderConfig dc = config.decoder_config();
  Rng rng(dc.seed);
  pixel_ = PixelDecoder(config.sam_width, dc, rng);
  decoder_ = TransformerDecoder(dc, rng);
}

ParamList Model::parameters() const {
  ParamList out;
  sam_.collect(out, "sam");
  clip_.collect(out, "clip");
  fusion_.collect(out, "fusion");
  pixel_.collect(out, "pixel_decoder");
  decoder_.collect(out, "decoder");
  return out;
}

ParamList Model::trainable_parameters() const {
  ParamList out;
  for (NamedParam& p : parameters())
    if (p.trainable) out.push_back(std::move(p));
  return out;
}

ForwardOutput forward(const Model& model, const Tensor& image, const Tensor& class_embeddings, bool with_b) {
  if (image.rank() != 3 || image.dim(2) != 3) throw DimensionError("forward: image must be [H x W x 3]");
  const RunConfig& cfg = model.config();
  const std::size_t h = image.dim(0), w = image.dim(1);

  const SamFeatures sf = encode_sam(model.sam(), image);
  const ClipFeatures cf = encode_clip(model.clip(), image, cfg.clip_resize);
  const FeaturePyramid pyr = model.fusion().fuse(sf.taps, cf.taps, h, w);
  const PixelDecoderOutput pd = model.pixel_decoder()(pyr, h, w);
  const TransformerDecoderOutput td = model.decoder()(pd.stages, pd.mask_features);

  const Tensor& mf = pd.mask_features;
  const std::size_t n = cfg.num_queries, pixels = mf.dim(0) * mf.dim(1);
  const Tensor& void_emb = model.decoder().void_embedding();

  ForwardOutput out;
  for (const Tensor& a : td.a_layers) {
    LayerPrediction lp;
    Tensor m = compute_masks(mf, a);
    lp.mask_logits = ops::reshape(m, {pixels, n});
    lp.class_logits = class_logits(a, class_embeddings, &void_emb, cfg.logit_scale);
    lp.embeddings = a;
    out.prediction.layers.push_back(std::move(lp));
    out.masks = m;
  }
  out.embeddings.a = td.a;
  if (with_b) {
    const Tensor m_attn = compute_attention_masks(mf, td.a_prime, cfg.clip_heads);
    out.embeddings.b = mask_attention_decode(model.clip(), cf.tokens_u, m_attn, cf.grid_h, cf.grid_w);
    out.prediction.b_embeddings = out.embeddings.b;
    out.prediction.b_class_logits = class_logits(out.embeddings.b, class_embeddings, &void_emb, cfg.logit_scale);
  }
  out.embeddings.d = mask_pooling(out.masks, cf.f_clip);
  return out;
}

Tensor image_tensor(const Image8& img) {
  if (img.channels != 3) throw FormatError("expected an RGB image");
  std::vector<double> v(img.pixels.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = img.pixels[i] / 255.0;
  return Tensor({img.height, img.width, 3}, std::move(v));
}

GroundTruth ground_truth(const std::vector<std::uint16_t>& labels, std::size_t height, std::size_t width,
                         std::size_t mask_h, std::size_t mask_w, const std::vector<std::size_t>& class_map) {
  if (labels.size() != height * width) throw DimensionError("label map size mismatch");
  const std::size_t pixels = mask_h * mask_w;
  std::vector<std::uint16_t> sampled(pixels);
  for (std::size_t i = 0; i < mask_h; ++i)
    for (std::size_t j = 0; j < mask_w; ++j) {
      const std::size_t y = std::min(height - 1, (2 * i + 1) * height / (2 * mask_h));
      const std::size_t x = std::min(width - 1, (2 * j + 1) * width / (2 * mask_w));
      sampled[i * mask_w + j] = labels[y * width + x];
    }
  GroundTruth gt;
  std::vector<double> masks;
  for (std::size_t c = 0; c < class_map.size(); ++c) {
    std::vector<double> row(pixels, 0.0);
    bool present = false;
    for (std::size_t p = 0; p < pixels; ++p)
      if (sampled[p] == c) row[p] = 1.0, present = true;
    if (!present || class_map[c] == kUnmappedClass) continue;
    gt.class_ids.push_back(class_map[c]);
    masks.insert(masks.end(), row.begin(), row.end());
  }
  if (gt.class_ids.empty()) throw ContractError("image has no segment of a mapped class");
  gt.masks = Tensor({gt.class_ids.size(), pixels}, std::move(masks));
  return gt;
}

}  // namespace ovseg
