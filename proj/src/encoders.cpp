#include "ovseg/encoders.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include "ovseg/errors.hpp"

namespace ovseg {

std::vector<std::size_t> ViTConfig::tap_blocks() const {
  if (role == EncoderRole::sam_like) return {depth - 3, depth - 2, depth - 1};
  return {depth / 4 - 1, depth / 2 - 1, 3 * depth / 4 - 1};
}

void ViTConfig::validate() const {
  if (depth < 4) throw ConfigError("ViT depth must be >= 4");
  if (patch_size == 0 || heads == 0 || width == 0 || mlp_ratio == 0 || native_grid == 0)
    throw ConfigError("ViT extents must be positive");
  if (width % heads != 0) throw ConfigError("ViT width must be divisible by heads");
  for (std::size_t t : tap_blocks())
    if (t >= depth) throw ConfigError("tap block out of range");
  if (role == EncoderRole::clip_like && aligned) {
    if (width != embed_dim) throw ConfigError("aligned clip_like encoder needs width == embed_dim");
    if (patch_size % AppearanceMap::kCells != 0)
      throw ConfigError("aligned clip_like encoder needs patch_size divisible by the texture period");
  }
}

ViTConfig ViTConfig::sam_default() {
  ViTConfig c;
  c.role = EncoderRole::sam_like;
  c.patch_size = 8;
  c.depth = 4;
  c.heads = 4;
  c.width = 32;
  c.native_grid = 8;
  c.seed = 101;
  c.aligned = false;
  return c;
}

ViTConfig ViTConfig::clip_default() {
  ViTConfig c;
  c.role = EncoderRole::clip_like;
  c.patch_size = 8;
  c.depth = 8;
  c.heads = 4;
  c.width = 64;
  c.embed_dim = 64;
  c.native_grid = 8;
  c.seed = 202;
  return c;
}

AppearanceMap::AppearanceMap(std::size_t dim) : dim_(dim), q_(kCells * kCells * 3 * dim) {
  Rng rng(mix_seed(0x5eed, "appearance-map"));
  for (double& v : q_) v = rng.normal();
}

std::vector<std::uint8_t> AppearanceMap::texture(std::span<const double> te) const {
  if (te.size() != dim_) throw DimensionError("AppearanceMap: embedding dim mismatch");
  std::vector<std::uint8_t> out(rows());
  for (std::size_t r = 0; r < rows(); ++r) {
    double z = 0.0;
    for (std::size_t j = 0; j < dim_; ++j) z += q_[r * dim_ + j] * te[j];
    const double v = std::clamp(0.5 + kGain * z, 0.0, 1.0);
    out[r] = static_cast<std::uint8_t>(std::lround(v * 255.0));
  }
  return out;
}

Tensor VitBlock::forward(const Tensor& x, std::size_t heads, const ops::AttentionBias& bias) const {
  const std::size_t w = x.dim(1);
  Tensor qkv_out = qkv(ln1(x));
  Tensor q = ops::slice(qkv_out, 1, 0, w);
  Tensor k = ops::slice(qkv_out, 1, w, 2 * w);
  Tensor v = ops::slice(qkv_out, 1, 2 * w, 3 * w);
  Tensor h = ops::add(x, proj(ops::multi_head_attention(q, k, v, heads, bias)));
  return ops::add(h, fc2(ops::gelu(fc1(ln2(h)))));
}

VisionTransformer::VisionTransformer(const ViTConfig& config) : config_(config) {
  config_.validate();
  const auto& c = config_;
  Rng rng(mix_seed(c.seed, c.role == EncoderRole::sam_like ? "sam" : "clip"));
  const std::size_t patch_dim = c.patch_size * c.patch_size * 3;
  patch_embed_ = Linear(rng, patch_dim, c.width, c.init_scale);
  if (has_cls()) cls_token_ = gaussian(rng, {1, c.width}, c.init_scale);
  const std::size_t rows = c.native_grid * c.native_grid + (has_cls() ? 1 : 0);
  pos_embed_ = gaussian(rng, {rows, c.width}, c.init_scale);
  pos_embed_.set_requires_grad(true);
  for (std::size_t b = 0; b < c.depth; ++b) {
    VitBlock blk;
    blk.ln1 = LayerNorm(c.width);
    blk.qkv = Linear(rng, c.width, 3 * c.width, c.init_scale);
    blk.proj = Linear(rng, c.width, c.width, c.init_scale);
    blk.ln2 = LayerNorm(c.width);
    blk.fc1 = Linear(rng, c.width, c.mlp_ratio * c.width, c.init_scale);
    blk.fc2 = Linear(rng, c.mlp_ratio * c.width, c.width, c.init_scale);
    blocks_.push_back(std::move(blk));
  }
  if (has_cls()) {
    ln_post_ = LayerNorm(c.width);
    out_proj_ = gaussian(rng, {c.embed_dim, c.width}, c.init_scale);
  }

  if (has_cls() && c.aligned) {
    // Stand-in for contrastive pretraining: the patch embedding is the
    // least-squares read-out Q^T / rows of one texture period, scaled so a
    // class texture maps to about align_gain * te.
    const AppearanceMap map(c.width);
    const std::size_t cells = AppearanceMap::kCells;
    const std::size_t span = c.patch_size / cells;
    const double g =
        c.align_gain / (AppearanceMap::kGain * static_cast<double>(map.rows() * span * span));
    auto W = patch_embed_.weight.mutable_data();
    auto bvec = patch_embed_.bias.mutable_data();
    for (std::size_t py = 0; py < c.patch_size; ++py)
      for (std::size_t px = 0; px < c.patch_size; ++px)
        for (std::size_t ch = 0; ch < 3; ++ch) {
          const auto q = map.row(((py / span) * cells + px / span) * 3 + ch);
          const std::size_t col = (py * c.patch_size + px) * 3 + ch;
          for (std::size_t o = 0; o < c.width; ++o) {
            W[o * patch_dim + col] += g * q[o];
            bvec[o] -= 0.5 * g * q[o];
          }
        }
    // Value path of the last l blocks passes (normalized) token content.
    for (std::size_t b = c.depth - c.masked_blocks(); b < c.depth; ++b) {
      auto qkvw = blocks_[b].qkv.weight.mutable_data();
      auto pw = blocks_[b].proj.weight.mutable_data();
      for (std::size_t i = 0; i < c.width; ++i) {
        qkvw[(2 * c.width + i) * c.width + i] += 1.0;
        pw[i * c.width + i] += c.value_gain;
      }
    }
    auto ow = out_proj_.mutable_data();
    for (std::size_t i = 0; i < c.width; ++i) ow[i * c.width + i] += 1.0;
  }
}

Tensor patchify(const Tensor& image, std::size_t patch) {
  if (image.rank() != 3 || image.dim(2) != 3) throw DimensionError("image must be [H x W x 3]");
  const std::size_t H = image.dim(0), W = image.dim(1);
  if (H % patch != 0 || W % patch != 0)
    throw DimensionError("image " + shape_str(image.shape()) + " not divisible by patch " + std::to_string(patch));
  const std::size_t gh = H / patch, gw = W / patch, pd = patch * patch * 3;
  std::vector<double> out(gh * gw * pd);
  const auto img = image.data();
  for (std::size_t gy = 0; gy < gh; ++gy)
    for (std::size_t gx = 0; gx < gw; ++gx)
      for (std::size_t py = 0; py < patch; ++py)
        std::copy_n(img.data() + ((gy * patch + py) * W + gx * patch) * 3, patch * 3,
                    out.data() + (gy * gw + gx) * pd + py * patch * 3);
  return Tensor({gh * gw, pd}, std::move(out));
}

Tensor interpolate_pos_embed(const Tensor& pos, bool has_cls, std::size_t grid_h, std::size_t grid_w,
                             std::size_t new_h, std::size_t new_w) {
  if (new_h == 0 || new_w == 0) throw DimensionError("positional grid must be at least 1x1");
  const std::size_t lead = has_cls ? 1 : 0;
  if (pos.rank() != 2 || pos.dim(0) != lead + grid_h * grid_w)
    throw DimensionError("positional table " + shape_str(pos.shape()) + " does not match grid");
  if (new_h == grid_h && new_w == grid_w) return pos;
  const std::size_t c = pos.dim(1);
  Tensor grid = ops::reshape(ops::slice(pos, 0, lead, lead + grid_h * grid_w), {grid_h, grid_w, c});
  Tensor resized = ops::reshape(ops::bilinear_resize(grid, new_h, new_w), {new_h * new_w, c});
  if (!has_cls) return resized;
  return ops::concat({ops::slice(pos, 0, 0, 1), resized}, 0);
}

Tensor VisionTransformer::embed(const Tensor& image) const {
  const std::size_t p = config_.patch_size;
  Tensor tokens = patch_embed_(patchify(image, p));
  const std::size_t gh = image.dim(0) / p, gw = image.dim(1) / p;
  if (has_cls()) tokens = ops::concat({cls_token_, tokens}, 0);
  Tensor pos = interpolate_pos_embed(pos_embed_, has_cls(), config_.native_grid, config_.native_grid, gh, gw);
  return ops::add(tokens, pos);
}

Tensor VisionTransformer::run_block(std::size_t index, const Tensor& tokens, const ops::AttentionBias& bias) const {
  return blocks_.at(index).forward(tokens, config_.heads, bias);
}

Tensor VisionTransformer::project(const Tensor& tokens) const {
  if (!has_cls()) throw ContractError("project() is only defined for clip_like encoders");
  return ops::linear(ln_post_(tokens), out_proj_);
}

void VisionTransformer::collect(ParamList& out, const std::string& prefix) const {
  patch_embed_.collect(out, prefix + ".patch_embed", false);
  if (has_cls()) out.push_back({prefix + ".cls_token", cls_token_, false});
  out.push_back({prefix + ".pos_embed", pos_embed_, true});
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    const std::string bp = prefix + ".blocks." + std::to_string(b);
    blocks_[b].ln1.collect(out, bp + ".ln1", false);
    blocks_[b].qkv.collect(out, bp + ".qkv", false);
    blocks_[b].proj.collect(out, bp + ".proj", false);
    blocks_[b].ln2.collect(out, bp + ".ln2", false);
    blocks_[b].fc1.collect(out, bp + ".fc1", false);
    blocks_[b].fc2.collect(out, bp + ".fc2", false);
  }
  if (has_cls()) {
    ln_post_.collect(out, prefix + ".ln_post", false);
    out.push_back({prefix + ".out_proj", out_proj_, false});
  }
}

namespace {

Tensor tokens_to_grid(const Tensor& tokens, std::size_t skip, std::size_t gh, std::size_t gw) {
  const std::size_t c = tokens.dim(1);
  Tensor body = skip ? ops::slice(tokens, 0, skip, tokens.dim(0)) : tokens;
  return ops::reshape(body, {gh, gw, c});
}

}  // namespace

SamFeatures encode_sam(const VisionTransformer& sam, const Tensor& image) {
  if (sam.config().role != EncoderRole::sam_like) throw ContractError("encode_sam needs a sam_like encoder");
  const std::size_t p = sam.config().patch_size;
  Tensor x = sam.embed(image);
  SamFeatures out;
  out.grid_h = image.dim(0) / p;
  out.grid_w = image.dim(1) / p;
  const auto taps = sam.config().tap_blocks();
  std::size_t next = 0;
  for (std::size_t b = 0; b < sam.config().depth; ++b) {
    x = sam.run_block(b, x);
    if (next < taps.size() && taps[next] == b) out.taps[next++] = tokens_to_grid(x, 0, out.grid_h, out.grid_w);
  }
  return out;
}

std::size_t clip_input_side(std::size_t side, double p, std::size_t patch) {
  const double target = static_cast<double>(side) * p / static_cast<double>(patch);
  const auto cells = static_cast<std::size_t>(std::max(1.0, std::round(target)));
  return cells * patch;
}

ClipFeatures encode_clip(const VisionTransformer& clip, const Tensor& image, double p) {
  if (clip.config().role != EncoderRole::clip_like) throw ContractError("encode_clip needs a clip_like encoder");
  if (!(p > 0.0) || p > 1.0) throw ConfigError("downsample ratio must be in (0, 1]");
  const auto& cfg = clip.config();
  const std::size_t h = clip_input_side(image.dim(0), p, cfg.patch_size);
  const std::size_t w = clip_input_side(image.dim(1), p, cfg.patch_size);
  Tensor resized = (h == image.dim(0) && w == image.dim(1)) ? image : ops::bilinear_resize(image, h, w);
  Tensor x = clip.embed(resized);
  ClipFeatures out;
  out.grid_h = h / cfg.patch_size;
  out.grid_w = w / cfg.patch_size;
  const auto taps = cfg.tap_blocks();
  const std::size_t u_block = cfg.depth - cfg.masked_blocks() - 1;
  std::size_t next = 0;
  for (std::size_t b = 0; b < cfg.depth; ++b) {
    x = clip.run_block(b, x);
    if (next < taps.size() && taps[next] == b) out.taps[next++] = tokens_to_grid(x, 1, out.grid_h, out.grid_w);
    if (b == u_block) out.tokens_u = x;
  }
  out.f_clip = tokens_to_grid(clip.project(x), 1, out.grid_h, out.grid_w);
  return out;
}

std::string render_prompt(std::string_view tmpl, std::string_view class_name) {
  const auto at = tmpl.find("{}");
  if (at == std::string_view::npos) throw FormatError("template without {} placeholder: " + std::string(tmpl));
  std::string s(tmpl.substr(0, at));
  s += class_name;
  s += tmpl.substr(at + 2);
  return s;
}

TextEmbedder::TextEmbedder(std::size_t dim, std::uint64_t seed, std::vector<std::string> templates)
    : dim_(dim), seed_(seed), templates_(std::move(templates)) {
  if (dim_ == 0) throw ConfigError("text embedding dim must be positive");
  if (templates_.empty()) throw ConfigError("at least one prompt template is required");
  for (const auto& t : templates_)
    if (t.find("{}") == std::string::npos) throw FormatError("template without {} placeholder: " + t);
}

std::vector<std::string> TextEmbedder::default_templates() {
  return {
      "a photo of a {}.",
      "There is a {} in the scene.",
      "There is the {} in the scene.",
      "a photo of a {} in the scene.",
      "a photo of the {} in the scene.",
      "a photo of one {} in the scene.",
      "itap of a {}.",
      "itap of my {}.",
      "itap of the {}.",
      "a photo of my {}.",
      "a photo of the {}.",
      "a photo of one {}.",
      "a photo of many {}.",
      "a good photo of a {}.",
  };
}

std::vector<std::string> TextEmbedder::load_templates(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open template file " + path.string());
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line.find("{}") == std::string::npos) throw FormatError("template line without {}: " + line);
    out.push_back(line);
  }
  if (out.empty()) throw FormatError("template file has no templates: " + path.string());
  return out;
}

std::vector<double> TextEmbedder::class_direction(std::string_view class_name) const {
  Rng class_rng(mix_seed(seed_, "class:" + std::string(class_name)));
  std::vector<double> v(dim_);
  double n2 = 0.0;
  for (double& x : v) {
    x = class_rng.normal();
    n2 += x * x;
  }
  const double inv = 1.0 / std::sqrt(n2);
  for (double& x : v) x *= inv;
  return v;
}

std::vector<double> TextEmbedder::embed_prompt(std::string_view tmpl, std::string_view class_name) const {
  Rng class_rng(mix_seed(seed_, "class:" + std::string(class_name)));
  Rng prompt_rng(mix_seed(seed_, "prompt:" + render_prompt(tmpl, class_name)));
  std::vector<double> v(dim_);
  double n2 = 0.0;
  for (double& x : v) {
    x = class_rng.normal() + kTemplateNoise * prompt_rng.normal();
    n2 += x * x;
  }
  const double inv = 1.0 / std::sqrt(n2);
  for (double& x : v) x *= inv;
  return v;
}

Tensor TextEmbedder::text_embeddings(const std::vector<std::string>& classes, PromptStrategy strategy) const {
  if (classes.empty()) throw ContractError("text_embeddings needs at least one class");
  std::set<std::string> seen;
  for (const auto& c : classes)
    if (!seen.insert(c).second) throw VocabularyError("duplicate class name: " + c);
  const std::size_t ntemplates = strategy == PromptStrategy::single_template ? 1 : templates_.size();
  std::vector<double> out(classes.size() * dim_, 0.0);
  for (std::size_t k = 0; k < classes.size(); ++k) {
    double* row = out.data() + k * dim_;
    for (std::size_t t = 0; t < ntemplates; ++t) {
      const auto e = embed_prompt(templates_[t], classes[k]);
      for (std::size_t j = 0; j < dim_; ++j) row[j] += e[j];
    }
    double n2 = 0.0;
    for (std::size_t j = 0; j < dim_; ++j) n2 += row[j] * row[j];
    const double inv = 1.0 / std::sqrt(n2);
    for (std::size_t j = 0; j < dim_; ++j) row[j] *= inv;
  }
  return Tensor({classes.size(), dim_}, std::move(out));
}

}  // namespace ovseg
