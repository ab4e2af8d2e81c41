#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ovseg/encoders.hpp"
#include "ovseg/image_io.hpp"
#include "ovseg/rng.hpp"

namespace ovseg {

enum class ShapeKind { rect, circle, stripe };

struct SceneShape {
  ShapeKind kind = ShapeKind::rect;
  // rect: [y0, y1) x [x0, x1). circle: centre (y0, x0), radius y1.
  // stripe: horizontal if x1 == 0 else vertical, rows/cols [y0, y0 + y1).
  std::size_t y0 = 0, x0 = 0, y1 = 0, x1 = 0;
  std::size_t class_id = 0;

  bool covers(std::size_t y, std::size_t x) const;
};

/// Painted in order; the first shape is the full-canvas background.
struct SceneSpec {
  std::size_t height = 64, width = 64;
  std::vector<SceneShape> shapes;

  void validate(std::size_t num_classes) const;
};

struct DatasetSpec {
  std::uint64_t seed = 0;
  std::size_t num_classes = 10;
  std::size_t num_train_classes = 6;
  std::size_t train_images = 256;
  std::size_t eval_images = 64;
  std::size_t height = 64, width = 64;
  std::size_t embed_dim = 64;
  std::uint64_t text_seed = 7;

  void validate() const;
};

/// Side of one texture cell in pixels.
inline constexpr std::size_t kCellPixels = 2;

/// Class appearance: the AppearanceMap texture of the class's concept
/// direction, tiled from the image origin.
class Palette {
 public:
  Palette(const std::vector<std::string>& names, std::size_t embed_dim, std::uint64_t text_seed);
  std::uint8_t color(std::size_t class_id, std::size_t y, std::size_t x, std::size_t ch) const;
  const std::vector<std::uint8_t>& texture(std::size_t class_id) const { return textures_.at(class_id); }

 private:
  std::vector<std::vector<std::uint8_t>> textures_;
};

struct Sample {
  Image8 image;                         // RGB
  std::vector<std::uint16_t> labels;    // class index per pixel
};

/// K class names; a fixed list, then "class<k>" once it runs out.
std::vector<std::string> default_class_names(std::size_t k);

/// Background plus 1-3 shapes with distinct classes drawn from pool. If
/// must_include is non-empty, at least one class comes from it.
SceneSpec random_scene(Rng& rng, std::size_t height, std::size_t width, const std::vector<std::size_t>& pool,
                       const std::vector<std::size_t>& must_include = {});
Sample render_scene(const SceneSpec& scene, const Palette& palette);

/// Writes DIR/dataset.txt, DIR/vocab.txt and DIR/{train,eval}/NNNNN.{ppm,pgm}.
/// Classes [0, f) are the training classes.
void gen_dataset(const DatasetSpec& spec, const std::filesystem::path& dir);

struct DatasetInfo {
  std::filesystem::path root;
  DatasetSpec spec;
  std::vector<std::string> names;
  std::vector<bool> is_train;

  std::filesystem::path vocab_path() const { return root / "vocab.txt"; }
  Sample load(const std::string& split, std::size_t index) const;
};

DatasetInfo open_dataset(const std::filesystem::path& dir);

}  // namespace ovseg
