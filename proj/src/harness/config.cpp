#include "ovseg/harness/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <vector>

#include "ovseg/errors.hpp"

namespace ovseg {
namespace {

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double parse_double(std::string_view key, std::string_view v) {
  double out = 0.0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw ConfigError(std::string(key) + ": not a number: " + std::string(v));
  return out;
}

std::uint64_t parse_uint(std::string_view key, std::string_view v) {
  std::uint64_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size())
    throw ConfigError(std::string(key) + ": not a non-negative integer: " + std::string(v));
  return out;
}

struct Field {
  const char* key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, std::string_view)> set;
};

template <typename T>
Field uint_field(const char* key, T RunConfig::*member) {
  return {key, [member](const RunConfig& c) { return std::to_string(c.*member); },
          [key, member](RunConfig& c, std::string_view v) { c.*member = static_cast<T>(parse_uint(key, v)); }};
}

Field double_field(const char* key, double RunConfig::*member) {
  return {key, [member](const RunConfig& c) { return format_double(c.*member); },
          [key, member](RunConfig& c, std::string_view v) { c.*member = parse_double(key, v); }};
}

template <typename Get, typename Set>
Field custom(const char* key, Get get, Set set) {
  return {key, get, set};
}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      uint_field("seed", &RunConfig::seed),
      uint_field("iterations", &RunConfig::iterations),
      uint_field("batch_size", &RunConfig::batch_size),
      double_field("learning_rate", &RunConfig::learning_rate),
      double_field("weight_decay", &RunConfig::weight_decay),
      double_field("adam_beta1", &RunConfig::adam_beta1),
      double_field("adam_beta2", &RunConfig::adam_beta2),
      double_field("adam_eps", &RunConfig::adam_eps),
      uint_field("embed_dim", &RunConfig::embed_dim),
      uint_field("text_seed", &RunConfig::text_seed),
      custom(
          "prompts", [](const RunConfig& c) { return std::string(to_string(c.prompts)); },
          [](RunConfig& c, std::string_view v) { c.prompts = parse_prompt_strategy(v); }),
      double_field("clip_resize", &RunConfig::clip_resize),
      double_field("logit_scale", &RunConfig::logit_scale),
      uint_field("sam_depth", &RunConfig::sam_depth),
      uint_field("sam_width", &RunConfig::sam_width),
      uint_field("sam_heads", &RunConfig::sam_heads),
      uint_field("clip_depth", &RunConfig::clip_depth),
      uint_field("clip_heads", &RunConfig::clip_heads),
      uint_field("patch_size", &RunConfig::patch_size),
      uint_field("num_queries", &RunConfig::num_queries),
      uint_field("decoder_layers", &RunConfig::decoder_layers),
      uint_field("hidden_dim", &RunConfig::hidden_dim),
      uint_field("decoder_heads", &RunConfig::decoder_heads),
      uint_field("ffn_dim", &RunConfig::ffn_dim),
      uint_field("conv_dim", &RunConfig::conv_dim),
      double_field("init_scale", &RunConfig::init_scale),
      custom(
          "bce_weight", [](const RunConfig& c) { return format_double(c.loss.bce); },
          [](RunConfig& c, std::string_view v) { c.loss.bce = parse_double("bce_weight", v); }),
      custom(
          "dice_weight", [](const RunConfig& c) { return format_double(c.loss.dice); },
          [](RunConfig& c, std::string_view v) { c.loss.dice = parse_double("dice_weight", v); }),
      custom(
          "cls_weight", [](const RunConfig& c) { return format_double(c.loss.cls); },
          [](RunConfig& c, std::string_view v) { c.loss.cls = parse_double("cls_weight", v); }),
      custom(
          "ssc_weight", [](const RunConfig& c) { return format_double(c.loss.ssc); },
          [](RunConfig& c, std::string_view v) { c.loss.ssc = parse_double("ssc_weight", v); }),
      custom(
          "no_object_weight", [](const RunConfig& c) { return format_double(c.loss.no_object); },
          [](RunConfig& c, std::string_view v) { c.loss.no_object = parse_double("no_object_weight", v); }),
      custom(
          "ssc_placement", [](const RunConfig& c) { return std::string(to_string(c.ssc_placement)); },
          [](RunConfig& c, std::string_view v) { c.ssc_placement = parse_ssc_placement(v); }),
      custom(
          "alpha", [](const RunConfig& c) { return format_double(c.balance.alpha); },
          [](RunConfig& c, std::string_view v) { c.balance.alpha = parse_double("alpha", v); }),
      custom(
          "beta", [](const RunConfig& c) { return format_double(c.balance.beta); },
          [](RunConfig& c, std::string_view v) { c.balance.beta = parse_double("beta", v); }),
      custom(
          "gamma", [](const RunConfig& c) { return format_double(c.balance.gamma); },
          [](RunConfig& c, std::string_view v) { c.balance.gamma = parse_double("gamma", v); }),
      custom(
          "balance_mode", [](const RunConfig& c) { return std::string(to_string(c.balance.mode)); },
          [](RunConfig& c, std::string_view v) { c.balance.mode = parse_balance_mode(v); }),
  };
  return table;
}

}  // namespace

std::string_view to_string(PromptStrategy p) {
  return p == PromptStrategy::single_template ? "single" : "ensemble";
}

PromptStrategy parse_prompt_strategy(std::string_view s) {
  if (s == "single") return PromptStrategy::single_template;
  if (s == "ensemble") return PromptStrategy::template_average;
  throw ConfigError("unknown prompt strategy '" + std::string(s) + "' (single|ensemble)");
}

ViTConfig RunConfig::sam_config() const {
  ViTConfig c = ViTConfig::sam_default();
  c.depth = sam_depth;
  c.width = sam_width;
  c.heads = sam_heads;
  c.patch_size = patch_size;
  return c;
}

ViTConfig RunConfig::clip_config() const {
  ViTConfig c = ViTConfig::clip_default();
  c.depth = clip_depth;
  c.heads = clip_heads;
  c.width = embed_dim;
  c.embed_dim = embed_dim;
  c.patch_size = patch_size;
  return c;
}

DecoderConfig RunConfig::decoder_config() const {
  DecoderConfig d;
  d.num_queries = num_queries;
  d.layers = decoder_layers;
  d.hidden = hidden_dim;
  d.heads = decoder_heads;
  d.ffn_dim = ffn_dim;
  d.conv_dim = conv_dim;
  d.embed_dim = embed_dim;
  d.clip_heads = clip_heads;
  d.masked_blocks = clip_config().masked_blocks();
  d.init_scale = init_scale;
  d.seed = mix_seed(seed, "decoder");
  return d;
}

void RunConfig::validate() const {
  if (iterations == 0) throw ConfigError("iterations must be positive");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be non-negative");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0 && adam_beta2 >= 0.0 && adam_beta2 < 1.0))
    throw ConfigError("adam betas must lie in [0, 1)");
  if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be positive");
  if (!(clip_resize > 0.0 && clip_resize <= 1.0)) throw ConfigError("clip_resize must lie in (0, 1]");
  if (!(logit_scale > 0.0)) throw ConfigError("logit_scale must be positive");
  sam_config().validate();
  clip_config().validate();
  decoder_config().validate();
  loss.validate();
  balance.validate();
}

RunConfig RunConfig::parse(std::string_view text) {
  RunConfig cfg;
  std::set<std::string> seen;
  std::size_t line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string where = "config line " + std::to_string(line_no) + ": ";
    if (eq == std::string_view::npos) throw ConfigError(where + "expected key = value");
    const std::string key(trim(line.substr(0, eq)));
    const std::string_view value = trim(line.substr(eq + 1));
    if (value.empty()) throw ConfigError(where + "missing value for '" + key + "'");
    const Field* field = nullptr;
    for (const Field& f : fields())
      if (key == f.key) field = &f;
    if (!field) throw ConfigError(where + "unknown key '" + key + "'");
    if (!seen.insert(key).second) throw ConfigError(where + "duplicate key '" + key + "'");
    try {
      field->set(cfg, value);
    } catch (const ConfigError& e) {
      throw ConfigError(where + e.what());
    }
  }
  cfg.validate();
  return cfg;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

std::string RunConfig::to_text() const {
  std::string out;
  for (const Field& f : fields()) out += std::string(f.key) + " = " + f.get(*this) + "\n";
  return out;
}

}  // namespace ovseg
