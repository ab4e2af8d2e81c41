#include "ovseg/harness/checkpoint.hpp"

#include <bit>
#include <fstream>
#include <map>
#include <sstream>

#include "ovseg/errors.hpp"

namespace ovseg {
namespace {

constexpr std::string_view kMagicPrefix = "OVSK";
constexpr char kVersion = '1';

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_bytes(std::string& out, std::string_view s) {
  put_u64(out, s.size());
  out.append(s);
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : s_(bytes) {}

  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(s_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return v;
  }
  std::string bytes() {
    const std::uint64_t n = u64();
    need(n);
    std::string out = s_.substr(pos_, n);
    pos_ += n;
    return out;
  }
  bool done() const { return pos_ == s_.size(); }

 private:
  void need(std::uint64_t n) const {
    if (n > s_.size() - pos_) throw FormatError("checkpoint is truncated");
  }
  const std::string& s_;
  std::size_t pos_ = 5;
};

}  // namespace

std::string serialize_checkpoint(const Model& model, std::size_t iteration) {
  std::string out(kMagicPrefix);
  out.push_back(kVersion);
  put_u64(out, iteration);
  put_bytes(out, model.config().to_text());
  const ParamList params = model.trainable_parameters();
  put_u64(out, params.size());
  for (const NamedParam& p : params) {
    put_bytes(out, p.name);
    put_u64(out, p.tensor.rank());
    for (std::size_t d : p.tensor.shape()) put_u64(out, d);
    for (double v : p.tensor.data()) put_u64(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

void save_checkpoint(const std::filesystem::path& path, const Model& model, std::size_t iteration) {
  const std::string bytes = serialize_checkpoint(model, iteration);
  std::ofstream out(path, std::ios::binary);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("cannot write checkpoint " + path.string());
}

LoadedCheckpoint deserialize_checkpoint(const std::string& bytes) {
  if (bytes.size() < 5 || bytes.compare(0, 4, kMagicPrefix) != 0) throw FormatError("not a checkpoint");
  if (bytes[4] != kVersion) throw FormatError(std::string("unsupported checkpoint version '") + bytes[4] + "'");
  Reader r(bytes);
  LoadedCheckpoint out;
  out.iteration = r.u64();
  out.model = std::make_unique<Model>(RunConfig::parse(r.bytes()));
  std::map<std::string, Tensor> params;
  for (const NamedParam& p : out.model->trainable_parameters()) params.emplace(p.name, p.tensor);
  const std::uint64_t count = r.u64();
  if (count != params.size()) throw FormatError("checkpoint parameter count does not match its config");
  for (std::uint64_t k = 0; k < count; ++k) {
    const std::string name = r.bytes();
    const auto it = params.find(name);
    if (it == params.end()) throw FormatError("checkpoint has unknown parameter " + name);
    Tensor& t = it->second;
    const std::uint64_t rank = r.u64();
    Shape shape;
    for (std::uint64_t d = 0; d < rank && d < 16; ++d) shape.push_back(r.u64());
    if (shape != t.shape()) throw FormatError("checkpoint shape mismatch for " + name);
    std::span<double> dst = t.mutable_data();
    for (double& v : dst) v = std::bit_cast<double>(r.u64());
    params.erase(it);
  }
  if (!r.done()) throw FormatError("trailing bytes after checkpoint payload");
  return out;
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return deserialize_checkpoint(ss.str());
}

}  // namespace ovseg
