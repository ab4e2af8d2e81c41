#include "ovseg/image_io.hpp"

#include <cctype>
#include <fstream>
#include <string>

#include "ovseg/errors.hpp"

namespace ovseg {
namespace {

std::size_t read_header_number(std::istream& in, const std::filesystem::path& path) {
  int ch = in.get();
  while (ch != EOF) {
    if (ch == '#') {
      while (ch != EOF && ch != '\n') ch = in.get();
    } else if (!std::isspace(ch)) {
      break;
    }
    ch = in.get();
  }
  if (ch == EOF || !std::isdigit(ch)) throw FormatError("malformed PNM header in " + path.string());
  std::size_t v = 0;
  while (ch != EOF && std::isdigit(ch)) {
    v = v * 10 + static_cast<std::size_t>(ch - '0');
    if (v > (1u << 24)) throw FormatError("PNM dimension too large in " + path.string());
    ch = in.get();
  }
  if (ch == EOF || !std::isspace(ch)) throw FormatError("malformed PNM header in " + path.string());
  return v;
}

void write_pnm(const std::filesystem::path& path, const Image8& img, std::size_t channels, const char* magic) {
  if (img.channels != channels) throw FormatError(std::string(magic) + " needs " + std::to_string(channels) + " channels");
  if (img.pixels.size() != img.width * img.height * channels) throw FormatError("image buffer size mismatch");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  out << magic << '\n' << img.width << ' ' << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (!out) throw FormatError("write failed for " + path.string());
}

}  // namespace

Image8 read_pnm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  char magic[2] = {0, 0};
  in.read(magic, 2);
  if (!in || magic[0] != 'P' || (magic[1] != '5' && magic[1] != '6'))
    throw FormatError(path.string() + " is not a binary PGM/PPM");
  Image8 img;
  img.channels = magic[1] == '5' ? 1 : 3;
  img.width = read_header_number(in, path);
  img.height = read_header_number(in, path);
  const std::size_t maxval = read_header_number(in, path);
  if (maxval != 255) throw FormatError("only maxval 255 is supported: " + path.string());
  if (img.width == 0 || img.height == 0) throw FormatError("empty image: " + path.string());
  img.pixels.resize(img.width * img.height * img.channels);
  in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (in.gcount() != static_cast<std::streamsize>(img.pixels.size())) throw FormatError("truncated image: " + path.string());
  return img;
}

void write_pgm(const std::filesystem::path& path, const Image8& img) { write_pnm(path, img, 1, "P5"); }
void write_ppm(const std::filesystem::path& path, const Image8& img) { write_pnm(path, img, 3, "P6"); }

}  // namespace ovseg
