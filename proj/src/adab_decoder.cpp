#include "ovseg/adab_decoder.hpp"

#include <cmath>
#include <memory>

#include "ovseg/errors.hpp"

namespace ovseg {

void DecoderConfig::validate() const {
  if (num_queries == 0) throw ConfigError("decoder needs at least one query");
  if (layers == 0) throw ConfigError("decoder needs at least one layer");
  if (hidden == 0 || heads == 0 || hidden % heads != 0) throw ConfigError("decoder hidden must be divisible by heads");
  if (ffn_dim == 0 || conv_dim == 0 || embed_dim == 0) throw ConfigError("decoder extents must be positive");
  if (clip_heads == 0) throw ConfigError("clip head count must be positive");
  if (masked_blocks == 0) throw ConfigError("masked block count must be positive");
  if (!(init_scale > 0.0)) throw ConfigError("decoder init scale must be positive");
}

namespace {

Linear fan_in_linear(Rng& rng, std::size_t in, std::size_t out, double gain) {
  return Linear(rng, in, out, gain / std::sqrt(static_cast<double>(in)));
}

Tensor conv3x3(const Linear& conv, const Tensor& x) {
  const std::size_t h = x.dim(0), w = x.dim(1);
  return ops::reshape(conv(ops::im2col3x3(x)), {h, w, conv.out_features()});
}

void mark_trainable(Linear& l) {
  l.weight.set_requires_grad(true);
  l.bias.set_requires_grad(true);
}

void mark_trainable(LayerNorm& l) {
  l.gamma.set_requires_grad(true);
  l.beta.set_requires_grad(true);
}

}  // namespace

PixelDecoder::PixelDecoder(std::size_t in_channels, const DecoderConfig& config, Rng& rng) {
  const std::size_t d = config.conv_dim;
  for (std::size_t i = 0; i < 3; ++i) {
    lateral_[i] = fan_in_linear(rng, in_channels, d, config.init_scale);
    refine_[i] = fan_in_linear(rng, 9 * d, d, config.init_scale);
    mark_trainable(lateral_[i]);
    mark_trainable(refine_[i]);
  }
  fine_ = fan_in_linear(rng, 9 * d, d, config.init_scale);
  mask_feature_ = fan_in_linear(rng, d, config.embed_dim, config.init_scale);
  mark_trainable(fine_);
  mark_trainable(mask_feature_);
}

PixelDecoderOutput PixelDecoder::operator()(const FeaturePyramid& pyr, std::size_t image_h,
                                            std::size_t image_w) const {
  PixelDecoderOutput out;
  Tensor y = ops::relu(conv3x3(refine_[2], lateral_[2](pyr.levels[2])));
  out.stages[0] = y;
  for (std::size_t lvl : {std::size_t{1}, std::size_t{0}}) {
    const Tensor& f = pyr.levels[lvl];
    Tensor up = ops::nearest_resize(y, f.dim(0), f.dim(1));
    y = ops::relu(conv3x3(refine_[lvl], ops::add(lateral_[lvl](f), up)));
    out.stages[2 - lvl] = y;
  }
  const std::size_t h4 = (image_h + 3) / 4, w4 = (image_w + 3) / 4;
  Tensor fine = ops::relu(conv3x3(fine_, ops::nearest_resize(y, h4, w4)));
  out.mask_features = mask_feature_(fine);
  return out;
}

void PixelDecoder::collect(ParamList& out, const std::string& prefix) const {
  for (std::size_t i = 0; i < 3; ++i) {
    lateral_[i].collect(out, prefix + ".lateral." + std::to_string(i), true);
    refine_[i].collect(out, prefix + ".refine." + std::to_string(i), true);
  }
  fine_.collect(out, prefix + ".fine", true);
  mask_feature_.collect(out, prefix + ".mask_feature", true);
}

TransformerDecoder::TransformerDecoder(const DecoderConfig& config, Rng& rng) : config_(config) {
  config_.validate();
  const auto& c = config_;
  const std::size_t h = c.hidden;
  const double g = c.init_scale;
  query_feat_ = gaussian(rng, {c.num_queries, h}, 1.0);
  query_pos_ = gaussian(rng, {c.num_queries, h}, 1.0);
  query_feat_.set_requires_grad(true);
  query_pos_.set_requires_grad(true);
  for (auto& p : input_proj_) {
    p = fan_in_linear(rng, c.conv_dim, h, g);
    mark_trainable(p);
  }
  level_embed_ = gaussian(rng, {3, h}, 1.0);
  level_embed_.set_requires_grad(true);
  for (std::size_t i = 0; i < c.layers; ++i) {
    DecoderLayer l;
    for (Linear* lin : {&l.cq, &l.ck, &l.cv, &l.co, &l.sq, &l.sk, &l.sv, &l.so}) {
      *lin = fan_in_linear(rng, h, h, g);
      mark_trainable(*lin);
    }
    l.fc1 = fan_in_linear(rng, h, c.ffn_dim, g);
    l.fc2 = fan_in_linear(rng, c.ffn_dim, h, g);
    mark_trainable(l.fc1);
    mark_trainable(l.fc2);
    for (LayerNorm* ln : {&l.c_norm, &l.s_norm, &l.f_norm}) {
      *ln = LayerNorm(h);
      mark_trainable(*ln);
    }
    layers_.push_back(std::move(l));
  }
  out_norm_ = LayerNorm(h);
  mark_trainable(out_norm_);
  embed1_ = fan_in_linear(rng, h, h, g);
  embed2_ = fan_in_linear(rng, h, c.embed_dim, g);
  mark_trainable(embed1_);
  mark_trainable(embed2_);

  // Tiled identity: every head starts from A itself.
  expansion_ = Linear(rng, c.embed_dim, c.embed_dim * c.clip_heads, 0.0);
  auto w = expansion_.weight.mutable_data();
  for (std::size_t hd = 0; hd < c.clip_heads; ++hd)
    for (std::size_t i = 0; i < c.embed_dim; ++i) w[(hd * c.embed_dim + i) * c.embed_dim + i] = 1.0;
  mark_trainable(expansion_);

  void_embedding_ = gaussian(rng, {c.embed_dim}, 1.0 / std::sqrt(static_cast<double>(c.embed_dim)));
  void_embedding_.set_requires_grad(true);
}

Tensor TransformerDecoder::predict_embedding(const Tensor& tgt) const {
  return ops::l2_normalize_rows(embed2_(ops::relu(embed1_(out_norm_(tgt)))));
}

TransformerDecoderOutput TransformerDecoder::operator()(const std::array<Tensor, 3>& stages,
                                                        const Tensor& mask_features) const {
  const auto& c = config_;
  if (mask_features.rank() != 3 || mask_features.dim(2) != c.embed_dim)
    throw DimensionError("transformer decoder: mask features must be [h x w x C]");
  std::array<Tensor, 3> memory;
  for (std::size_t s = 0; s < 3; ++s) {
    const Tensor& st = stages[s];
    if (st.rank() != 3 || st.dim(2) != c.conv_dim) throw DimensionError("transformer decoder: bad stage shape");
    Tensor flat = ops::reshape(st, {st.dim(0) * st.dim(1), c.conv_dim});
    memory[s] = ops::add_row(input_proj_[s](flat), ops::reshape(ops::slice(level_embed_, 0, s, s + 1), {c.hidden}));
  }

  TransformerDecoderOutput out;
  Tensor tgt = query_feat_;
  Tensor a_prev = predict_embedding(tgt);
  for (std::size_t li = 0; li < c.layers; ++li) {
    const DecoderLayer& l = layers_[li];
    const std::size_t s = li % 3;
    ops::AttentionBias bias;
    {
      NoGradScope no_grad;
      bias = std::make_shared<const std::vector<double>>(
          mask_bias(compute_masks(mask_features, a_prev), c.heads, stages[s].dim(0), stages[s].dim(1)));
    }
    Tensor q = l.cq(ops::add(tgt, query_pos_));
    Tensor attn = ops::multi_head_attention(q, l.ck(memory[s]), l.cv(memory[s]), c.heads, bias);
    tgt = l.c_norm(ops::add(tgt, l.co(attn)));

    Tensor qk = ops::add(tgt, query_pos_);
    Tensor self = ops::multi_head_attention(l.sq(qk), l.sk(qk), l.sv(tgt), c.heads);
    tgt = l.s_norm(ops::add(tgt, l.so(self)));

    tgt = l.f_norm(ops::add(tgt, l.fc2(ops::relu(l.fc1(tgt)))));
    a_prev = predict_embedding(tgt);
    out.a_layers.push_back(a_prev);
  }
  out.a = out.a_layers.back();
  out.a_prime = expansion_(out.a);
  return out;
}

void TransformerDecoder::collect(ParamList& out, const std::string& prefix) const {
  out.push_back({prefix + ".query_feat", query_feat_, true});
  out.push_back({prefix + ".query_pos", query_pos_, true});
  for (std::size_t s = 0; s < 3; ++s) input_proj_[s].collect(out, prefix + ".input_proj." + std::to_string(s), true);
  out.push_back({prefix + ".level_embed", level_embed_, true});
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const auto& l = layers_[i];
    const std::string p = prefix + ".layers." + std::to_string(i);
    l.cq.collect(out, p + ".cross.q", true);
    l.ck.collect(out, p + ".cross.k", true);
    l.cv.collect(out, p + ".cross.v", true);
    l.co.collect(out, p + ".cross.o", true);
    l.c_norm.collect(out, p + ".cross.norm", true);
    l.sq.collect(out, p + ".self.q", true);
    l.sk.collect(out, p + ".self.k", true);
    l.sv.collect(out, p + ".self.v", true);
    l.so.collect(out, p + ".self.o", true);
    l.s_norm.collect(out, p + ".self.norm", true);
    l.fc1.collect(out, p + ".ffn.fc1", true);
    l.fc2.collect(out, p + ".ffn.fc2", true);
    l.f_norm.collect(out, p + ".ffn.norm", true);
  }
  out_norm_.collect(out, prefix + ".out_norm", true);
  embed1_.collect(out, prefix + ".embed.0", true);
  embed2_.collect(out, prefix + ".embed.1", true);
  expansion_.collect(out, prefix + ".expansion", true);
  out.push_back({prefix + ".void_embedding", void_embedding_, true});
}

Tensor compute_masks(const Tensor& mask_features, const Tensor& a) {
  if (mask_features.rank() != 3 || a.rank() != 2 || mask_features.dim(2) != a.dim(1))
    throw DimensionError("compute_masks: " + shape_str(mask_features.shape()) + " vs " + shape_str(a.shape()));
  const std::size_t h = mask_features.dim(0), w = mask_features.dim(1), c = a.dim(1);
  Tensor flat = ops::reshape(mask_features, {h * w, c});
  return ops::reshape(ops::matmul_nt(flat, a), {h, w, a.dim(0)});
}

Tensor compute_attention_masks(const Tensor& mask_features, const Tensor& a_prime, std::size_t heads) {
  if (mask_features.rank() != 3 || a_prime.rank() != 2 || heads == 0)
    throw DimensionError("compute_attention_masks: bad ranks");
  const std::size_t h = mask_features.dim(0), w = mask_features.dim(1), c = mask_features.dim(2);
  if (a_prime.dim(1) != c * heads)
    throw DimensionError("compute_attention_masks: A' " + shape_str(a_prime.shape()) + " needs C*n columns");
  const std::size_t n = a_prime.dim(0);
  Tensor flat = ops::reshape(mask_features, {h * w, c});
  std::vector<Tensor> per_head;
  for (std::size_t hd = 0; hd < heads; ++hd) {
    Tensor chunk = heads == 1 ? a_prime : ops::slice(a_prime, 1, hd * c, (hd + 1) * c);
    per_head.push_back(ops::reshape(ops::matmul_nt(flat, chunk), {h * w, 1, n}));
  }
  Tensor joined = heads == 1 ? per_head[0] : ops::concat(per_head, 1);
  return ops::reshape(joined, {h, w, heads, n});
}

std::vector<double> mask_bias(const Tensor& mask, std::size_t heads, std::size_t grid_h, std::size_t grid_w) {
  NoGradScope no_grad;
  const bool per_head = mask.rank() == 4;
  if (!per_head && mask.rank() != 3) throw DimensionError("mask_bias: mask must be rank 3 or 4");
  if (per_head && mask.dim(2) != heads) throw DimensionError("mask_bias: head count mismatch");
  const std::size_t n = per_head ? mask.dim(3) : mask.dim(2);
  const std::size_t channels = per_head ? heads * n : n;
  Tensor flat = ops::reshape(mask.detach(), {mask.dim(0), mask.dim(1), channels});
  if (flat.dim(0) != grid_h || flat.dim(1) != grid_w) flat = ops::bilinear_resize(flat, grid_h, grid_w);
  const std::size_t t = grid_h * grid_w;
  const auto r = flat.data();
  std::vector<double> out(heads * n * t);
  for (std::size_t hd = 0; hd < heads; ++hd)
    for (std::size_t q = 0; q < n; ++q) {
      const std::size_t ch = per_head ? hd * n + q : q;
      double* row = out.data() + (hd * n + q) * t;
      bool any = false;
      for (std::size_t i = 0; i < t; ++i) {
        const bool allowed = r[i * channels + ch] > 0.0;
        row[i] = allowed ? 0.0 : kMaskedBias;
        any = any || allowed;
      }
      if (!any) std::fill(row, row + t, 0.0);
    }
  return out;
}

Tensor mask_attention_decode(const VisionTransformer& clip, const Tensor& tokens_u, const Tensor& m_attn,
                             std::size_t grid_h, std::size_t grid_w) {
  const auto& cfg = clip.config();
  const std::size_t heads = cfg.heads;
  if (m_attn.rank() != 4 || m_attn.dim(2) != heads)
    throw DimensionError("mask_attention_decode: M_attn must be [h x w x n x N] with n = CLIP heads");
  const std::size_t n = m_attn.dim(3), t = grid_h * grid_w;
  if (tokens_u.rank() != 2 || tokens_u.dim(0) != 1 + t)
    throw DimensionError("mask_attention_decode: U must hold CLS plus one token per grid cell");
  const auto patch_bias = mask_bias(m_attn, heads, grid_h, grid_w);

  // Sequence: [N queries | CLS | T patches]. Queries read themselves and
  // their allowed patches; U never reads the queries.
  const std::size_t len = n + 1 + t;
  auto bias = std::make_shared<std::vector<double>>(heads * len * len, 0.0);
  for (std::size_t hd = 0; hd < heads; ++hd) {
    double* b = bias->data() + hd * len * len;
    for (std::size_t q = 0; q < n; ++q) {
      double* row = b + q * len;
      for (std::size_t j = 0; j <= n; ++j) row[j] = j == q ? 0.0 : kMaskedBias;
      std::copy_n(patch_bias.data() + (hd * n + q) * t, t, row + n + 1);
    }
    for (std::size_t i = n; i < len; ++i) std::fill(b + i * len, b + i * len + n, kMaskedBias);
  }
  const ops::AttentionBias shared = bias;

  Tensor x = ops::concat({ops::index_select(tokens_u, 0, std::vector<std::size_t>(n, 0)), tokens_u}, 0);
  for (std::size_t blk = cfg.depth - cfg.masked_blocks(); blk < cfg.depth; ++blk) x = clip.run_block(blk, x, shared);
  return ops::l2_normalize_rows(clip.project(ops::slice(x, 0, 0, n)));
}

Tensor mask_pooling(const Tensor& masks, const Tensor& f_clip) {
  NoGradScope no_grad;
  if (masks.rank() != 3 || f_clip.rank() != 3) throw DimensionError("mask_pooling: expects [h x w x N] and [h x w x C]");
  const std::size_t gh = f_clip.dim(0), gw = f_clip.dim(1), c = f_clip.dim(2), n = masks.dim(2);
  Tensor m = masks.detach();
  if (m.dim(0) != gh || m.dim(1) != gw) m = ops::bilinear_resize(m, gh, gw);
  const auto md = m.data();
  const auto fd = f_clip.data();
  const std::size_t t = gh * gw;
  std::vector<double> out(n * c, 0.0);
  std::vector<double> wts(t);
  for (std::size_t q = 0; q < n; ++q) {
    double total = 0.0;
    for (std::size_t i = 0; i < t; ++i) {
      wts[i] = 1.0 / (1.0 + std::exp(-md[i * n + q]));
      total += wts[i];
    }
    if (total < 1e-6) {
      std::fill(wts.begin(), wts.end(), 1.0);
      total = static_cast<double>(t);
    }
    double* row = out.data() + q * c;
    for (std::size_t i = 0; i < t; ++i)
      for (std::size_t j = 0; j < c; ++j) row[j] += wts[i] * fd[i * c + j];
    for (std::size_t j = 0; j < c; ++j) row[j] /= total;
  }
  return ops::l2_normalize_rows(Tensor({n, c}, std::move(out)));
}

Tensor class_logits(const Tensor& e, const Tensor& class_embeddings, const Tensor* void_embedding,
                    double logit_scale) {
  Tensor targets = class_embeddings;
  if (void_embedding) {
    const std::size_t c = void_embedding->size();
    targets = ops::concat({class_embeddings, ops::l2_normalize_rows(ops::reshape(*void_embedding, {1, c}))}, 0);
  }
  return ops::scale(ops::matmul_nt(e, targets), logit_scale);
}

}  // namespace ovseg
