#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include "ovseg/adab_decoder.hpp"
#include "ovseg/encoders.hpp"
#include "ovseg/inference.hpp"
#include "ovseg/losses.hpp"

namespace ovseg {

/// Everything needed to rebuild a model and rerun its training.
struct RunConfig {
  std::uint64_t seed = 0;
  std::size_t iterations = 2000;
  std::size_t batch_size = 4;
  double learning_rate = 1e-4;
  double weight_decay = 5e-2;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  std::size_t embed_dim = 64;
  std::uint64_t text_seed = 7;
  PromptStrategy prompts = PromptStrategy::template_average;
  double clip_resize = 0.5;
  double logit_scale = 1.0 / kCosineTemperature;

  std::size_t sam_depth = 4;
  std::size_t sam_width = 32;
  std::size_t sam_heads = 4;
  std::size_t clip_depth = 8;
  std::size_t clip_heads = 4;
  std::size_t patch_size = 8;

  std::size_t num_queries = 12;
  std::size_t decoder_layers = 9;
  std::size_t hidden_dim = 64;
  std::size_t decoder_heads = 4;
  std::size_t ffn_dim = 128;
  std::size_t conv_dim = 32;
  double init_scale = 1.0;

  LossWeights loss;
  SscPlacement ssc_placement = SscPlacement::a_last1;
  BalanceWeights balance;

  ViTConfig sam_config() const;
  ViTConfig clip_config() const;
  DecoderConfig decoder_config() const;
  void validate() const;

  /// Parses `key = value` lines; '#' starts a comment. Unknown keys, bad
  /// values and duplicates raise ConfigError. Unset keys keep defaults.
  static RunConfig parse(std::string_view text);
  static RunConfig load(const std::filesystem::path& path);
  /// Canonical text form; parse(to_text()) reproduces the config exactly.
  std::string to_text() const;
};

std::string_view to_string(PromptStrategy p);
PromptStrategy parse_prompt_strategy(std::string_view s);

}  // namespace ovseg
