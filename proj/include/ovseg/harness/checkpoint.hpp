#pragma once

#include <filesystem>
#include <memory>
#include <string>

#include "ovseg/harness/model.hpp"

namespace ovseg {

/// Container layout (little-endian):
///   "OVSK1"
///   u64 iteration
///   u64 n, n bytes of RunConfig::to_text()
///   u64 count, then per trainable parameter:
///     u64 n, n bytes of name; u64 rank; rank x u64 dims; f64 payload
/// Frozen weights are rebuilt from their seeds.
std::string serialize_checkpoint(const Model& model, std::size_t iteration);
void save_checkpoint(const std::filesystem::path& path, const Model& model, std::size_t iteration);

struct LoadedCheckpoint {
  std::unique_ptr<Model> model;
  std::size_t iteration = 0;
};

LoadedCheckpoint deserialize_checkpoint(const std::string& bytes);
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace ovseg
