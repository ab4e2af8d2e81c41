#include "ovseg/harness/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "ovseg/errors.hpp"

namespace ovseg {

bool SceneShape::covers(std::size_t y, std::size_t x) const {
  switch (kind) {
    case ShapeKind::rect:
      return y >= y0 && y < y1 && x >= x0 && x < x1;
    case ShapeKind::circle: {
      const double dy = static_cast<double>(y) + 0.5 - static_cast<double>(y0);
      const double dx = static_cast<double>(x) + 0.5 - static_cast<double>(x0);
      return dy * dy + dx * dx <= static_cast<double>(y1 * y1);
    }
    case ShapeKind::stripe:
      return x1 == 0 ? (y >= y0 && y < y0 + y1) : (x >= y0 && x < y0 + y1);
  }
  return false;
}

void SceneSpec::validate(std::size_t num_classes) const {
  if (height == 0 || width == 0) throw DimensionError("scene canvas must be non-empty");
  if (shapes.empty()) throw ContractError("scene needs a background shape");
  for (const SceneShape& s : shapes) {
    if (s.class_id >= num_classes) throw VocabularyError("scene class id out of range");
    bool inside = true;
    switch (s.kind) {
      case ShapeKind::rect:
        inside = s.y0 < s.y1 && s.x0 < s.x1 && s.y1 <= height && s.x1 <= width;
        break;
      case ShapeKind::circle:
        inside = s.y1 > 0 && s.y0 >= s.y1 && s.x0 >= s.y1 && s.y0 + s.y1 <= height && s.x0 + s.y1 <= width;
        break;
      case ShapeKind::stripe:
        inside = s.y1 > 0 && s.y0 + s.y1 <= (s.x1 == 0 ? height : width);
        break;
    }
    if (!inside) throw DimensionError("scene shape leaves the canvas");
  }
}

void DatasetSpec::validate() const {
  if (num_classes < 2) throw ConfigError("need at least 2 classes");
  if (num_train_classes < 1 || num_train_classes >= num_classes)
    throw ConfigError("training classes must satisfy 1 <= f < K");
  if (num_classes > 255) throw CapacityError("label maps hold at most 255 classes");
  if (train_images == 0) throw ConfigError("need at least one training image");
  if (height < 32 || width < 32) throw DimensionError("images must be at least 32x32");
  if (embed_dim == 0) throw ConfigError("embed_dim must be positive");
}

Palette::Palette(const std::vector<std::string>& names, std::size_t embed_dim, std::uint64_t text_seed) {
  const TextEmbedder text(embed_dim, text_seed);
  const AppearanceMap map(embed_dim);
  for (const std::string& n : names) textures_.push_back(map.texture(text.class_direction(n)));
}

std::uint8_t Palette::color(std::size_t class_id, std::size_t y, std::size_t x, std::size_t ch) const {
  constexpr std::size_t cells = AppearanceMap::kCells;
  const std::size_t cy = (y / kCellPixels) % cells, cx = (x / kCellPixels) % cells;
  return textures_[class_id][(cy * cells + cx) * 3 + ch];
}

std::vector<std::string> default_class_names(std::size_t k) {
  static const char* const base[] = {"sky",   "grass", "water", "road",  "tree",  "sand",  "snow",
                                     "brick", "cloud", "rock",  "wood",  "metal", "glass", "leaves",
                                     "dirt",  "fence", "wall",  "floor", "mud",   "gravel"};
  std::vector<std::string> out;
  for (std::size_t i = 0; i < k; ++i)
    out.push_back(i < std::size(base) ? base[i] : "class" + std::to_string(i));
  return out;
}

SceneSpec random_scene(Rng& rng, std::size_t height, std::size_t width, const std::vector<std::size_t>& pool,
                       const std::vector<std::size_t>& must_include) {
  if (pool.size() < 2) throw ContractError("scene pool needs at least two classes");
  std::vector<std::size_t> candidates = pool;
  std::vector<std::size_t> chosen;
  const std::size_t count = 2 + rng.below(std::min<std::size_t>(3, pool.size() - 1));
  if (!must_include.empty()) {
    const std::size_t c = must_include[rng.below(must_include.size())];
    chosen.push_back(c);
    candidates.erase(std::remove(candidates.begin(), candidates.end(), c), candidates.end());
  }
  while (chosen.size() < count) {
    const std::size_t i = rng.below(candidates.size());
    chosen.push_back(candidates[i]);
    candidates.erase(candidates.begin() + static_cast<std::ptrdiff_t>(i));
  }
  // Shuffle so the required class is not always the background.
  for (std::size_t i = chosen.size(); i > 1; --i) std::swap(chosen[i - 1], chosen[rng.below(i)]);

  SceneSpec s;
  s.height = height;
  s.width = width;
  s.shapes.push_back({ShapeKind::rect, 0, 0, height, width, chosen[0]});
  const std::size_t side = std::min(height, width);
  for (std::size_t i = 1; i < chosen.size(); ++i) {
    SceneShape sh;
    sh.class_id = chosen[i];
    sh.kind = static_cast<ShapeKind>(rng.below(3));
    if (sh.kind == ShapeKind::rect) {
      const std::size_t h = side / 4 + rng.below(side / 2), w = side / 4 + rng.below(side / 2);
      sh.y0 = rng.below(height - h + 1);
      sh.x0 = rng.below(width - w + 1);
      sh.y1 = sh.y0 + h;
      sh.x1 = sh.x0 + w;
    } else if (sh.kind == ShapeKind::circle) {
      const std::size_t r = side / 8 + rng.below(side / 5);
      sh.y1 = r;
      sh.y0 = r + rng.below(height - 2 * r + 1);
      sh.x0 = r + rng.below(width - 2 * r + 1);
    } else {
      const bool vertical = rng.below(2) == 1;
      const std::size_t extent = vertical ? width : height;
      const std::size_t t = side / 8 + rng.below(side / 8);
      sh.x1 = vertical ? 1 : 0;
      sh.y1 = t;
      sh.y0 = rng.below(extent - t + 1);
    }
    s.shapes.push_back(sh);
  }
  return s;
}

Sample render_scene(const SceneSpec& scene, const Palette& palette) {
  Sample out;
  out.image = Image8{scene.width, scene.height, 3, std::vector<std::uint8_t>(scene.width * scene.height * 3)};
  out.labels.assign(scene.width * scene.height, 0);
  for (std::size_t y = 0; y < scene.height; ++y)
    for (std::size_t x = 0; x < scene.width; ++x) {
      std::size_t c = scene.shapes[0].class_id;
      for (const SceneShape& s : scene.shapes)
        if (s.covers(y, x)) c = s.class_id;
      out.labels[y * scene.width + x] = static_cast<std::uint16_t>(c);
      for (std::size_t ch = 0; ch < 3; ++ch) out.image.at(y, x, ch) = palette.color(c, y, x, ch);
    }
  return out;
}

namespace {

std::string index_name(std::size_t i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%05zu", i);
  return buf;
}

void write_sample(const std::filesystem::path& dir, std::size_t index, const Sample& s) {
  write_ppm(dir / (index_name(index) + ".ppm"), s.image);
  Image8 labels{s.image.width, s.image.height, 1, {}};
  labels.pixels.assign(s.labels.begin(), s.labels.end());
  write_pgm(dir / (index_name(index) + ".pgm"), labels);
}

std::uint64_t meta_uint(const std::map<std::string, std::string>& meta, const std::string& key) {
  const auto it = meta.find(key);
  if (it == meta.end()) throw FormatError("dataset.txt lacks '" + key + "'");
  std::uint64_t v = 0;
  const auto [p, ec] = std::from_chars(it->second.data(), it->second.data() + it->second.size(), v);
  if (ec != std::errc() || p != it->second.data() + it->second.size())
    throw FormatError("dataset.txt: bad value for '" + key + "'");
  return v;
}

}  // namespace

void gen_dataset(const DatasetSpec& spec, const std::filesystem::path& dir) {
  spec.validate();
  const std::vector<std::string> names = default_class_names(spec.num_classes);
  const Palette palette(names, spec.embed_dim, spec.text_seed);
  std::filesystem::create_directories(dir / "train");
  std::filesystem::create_directories(dir / "eval");
  {
    std::ofstream meta(dir / "dataset.txt");
    meta << "seed = " << spec.seed << "\nclasses = " << spec.num_classes
         << "\ntrain_classes = " << spec.num_train_classes << "\ntrain_images = " << spec.train_images
         << "\neval_images = " << spec.eval_images << "\nheight = " << spec.height << "\nwidth = " << spec.width
         << "\nembed_dim = " << spec.embed_dim << "\ntext_seed = " << spec.text_seed << "\n";
    std::ofstream vocab(dir / "vocab.txt");
    for (std::size_t i = 0; i < names.size(); ++i) vocab << (i < spec.num_train_classes ? "*" : "") << names[i] << "\n";
    if (!meta || !vocab) throw FormatError("cannot write dataset metadata in " + dir.string());
  }
  std::vector<std::size_t> train_pool, all_pool, new_pool;
  for (std::size_t c = 0; c < spec.num_classes; ++c) {
    all_pool.push_back(c);
    (c < spec.num_train_classes ? train_pool : new_pool).push_back(c);
  }
  Rng train_rng(mix_seed(spec.seed, "dataset-train"));
  for (std::size_t i = 0; i < spec.train_images; ++i) {
    const SceneSpec s = spec.num_train_classes >= 2
                            ? random_scene(train_rng, spec.height, spec.width, train_pool)
                            : SceneSpec{spec.height, spec.width, {{ShapeKind::rect, 0, 0, spec.height, spec.width, 0}}};
    write_sample(dir / "train", i, render_scene(s, palette));
  }
  Rng eval_rng(mix_seed(spec.seed, "dataset-eval"));
  for (std::size_t i = 0; i < spec.eval_images; ++i)
    write_sample(dir / "eval", i, render_scene(random_scene(eval_rng, spec.height, spec.width, all_pool, new_pool), palette));
}

Sample DatasetInfo::load(const std::string& split, std::size_t index) const {
  const std::filesystem::path base = root / split / index_name(index);
  Sample s;
  s.image = read_pnm(base.string() + ".ppm");
  const Image8 labels = read_pnm(base.string() + ".pgm");
  if (s.image.channels != 3 || labels.channels != 1 || labels.width != s.image.width || labels.height != s.image.height)
    throw FormatError("sample " + base.string() + " has mismatched image and label map");
  s.labels.assign(labels.pixels.begin(), labels.pixels.end());
  for (auto l : s.labels)
    if (l > names.size()) throw VocabularyError("label " + std::to_string(l) + " out of range in " + base.string());
  return s;
}

DatasetInfo open_dataset(const std::filesystem::path& dir) {
  DatasetInfo info;
  info.root = dir;
  std::ifstream meta(dir / "dataset.txt");
  if (!meta) throw FormatError("no dataset.txt in " + dir.string());
  std::map<std::string, std::string> kv;
  for (std::string line; std::getline(meta, line);) {
    const auto eq = line.find(" = ");
    if (eq == std::string::npos) continue;
    kv[line.substr(0, eq)] = line.substr(eq + 3);
  }
  DatasetSpec& s = info.spec;
  s.seed = meta_uint(kv, "seed");
  s.num_classes = meta_uint(kv, "classes");
  s.num_train_classes = meta_uint(kv, "train_classes");
  s.train_images = meta_uint(kv, "train_images");
  s.eval_images = meta_uint(kv, "eval_images");
  s.height = meta_uint(kv, "height");
  s.width = meta_uint(kv, "width");
  s.embed_dim = meta_uint(kv, "embed_dim");
  s.text_seed = meta_uint(kv, "text_seed");
  std::ifstream vocab(info.vocab_path());
  if (!vocab) throw FormatError("no vocab.txt in " + dir.string());
  for (std::string line; std::getline(vocab, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const bool train = line.front() == '*';
    info.names.push_back(train ? line.substr(1) : line);
    info.is_train.push_back(train);
  }
  if (info.names.size() != s.num_classes) throw FormatError("vocab.txt disagrees with dataset.txt");
  return info;
}

}  // namespace ovseg
