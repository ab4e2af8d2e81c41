#include "ovseg/inference.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <set>

#include "ovseg/errors.hpp"
#include "ovseg/numerics/ops.hpp"

namespace ovseg {

std::size_t ClassVocabulary::num_train() const {
  std::size_t f = 0;
  for (bool t : is_train) f += t ? 1 : 0;
  return f;
}

std::vector<std::size_t> ClassVocabulary::train_indices() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < is_train.size(); ++i)
    if (is_train[i]) out.push_back(i);
  return out;
}

std::vector<std::size_t> ClassVocabulary::new_indices() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < is_train.size(); ++i)
    if (!is_train[i]) out.push_back(i);
  return out;
}

void ClassVocabulary::validate() const {
  if (names.empty()) throw VocabularyError("vocabulary is empty");
  if (names.size() > 255) throw VocabularyError("at most 255 classes fit an 8-bit label map");
  if (is_train.size() != names.size()) throw VocabularyError("one train flag per class is required");
  std::set<std::string> seen;
  for (const auto& n : names) {
    if (n.empty() || n.find(',') != std::string::npos || n.front() == '*')
      throw VocabularyError("invalid class name: '" + n + "'");
    if (!seen.insert(n).second) throw VocabularyError("duplicate class name: " + n);
  }
  if (te.rank() != 2 || te.dim(0) != names.size()) throw DimensionError("text embeddings must be [K x C]");
  for (std::size_t k = 0; k < names.size(); ++k) {
    double n2 = 0.0;
    for (std::size_t j = 0; j < te.dim(1); ++j) n2 += te.at(k, j) * te.at(k, j);
    if (std::abs(std::sqrt(n2) - 1.0) > 1e-9) throw DegenerateVectorError("text embedding row is not unit-norm");
  }
}

ClassVocabulary ClassVocabulary::build(std::vector<std::string> names, std::vector<bool> is_train,
                                       const TextEmbedder& text, PromptStrategy prompts) {
  ClassVocabulary v;
  v.te = text.text_embeddings(names, prompts);
  v.names = std::move(names);
  v.is_train = std::move(is_train);
  v.validate();
  return v;
}

ClassVocabulary ClassVocabulary::load(const std::filesystem::path& path, const TextEmbedder& text,
                                      PromptStrategy prompts) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open vocabulary file " + path.string());
  std::vector<std::string> names;
  std::vector<bool> train;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const bool t = line.front() == '*';
    names.push_back(t ? line.substr(1) : line);
    train.push_back(t);
  }
  return build(std::move(names), std::move(train), text, prompts);
}

BalanceMode parse_balance_mode(std::string_view s) {
  if (s == "arithmetic") return BalanceMode::arithmetic;
  if (s == "geometric") return BalanceMode::geometric;
  throw ConfigError("unknown balance mode: " + std::string(s));
}

std::string_view to_string(BalanceMode m) { return m == BalanceMode::arithmetic ? "arithmetic" : "geometric"; }

void BalanceWeights::validate() const {
  constexpr double tol = 1e-12;
  for (double v : {alpha, beta, gamma})
    if (!std::isfinite(v) || v < 0.0) throw ConfigError("balance weights must be finite and >= 0");
  if (alpha + beta > 1.0 + tol) throw ConfigError("alpha + beta must not exceed 1");
  if (gamma + beta > 1.0 + tol) throw ConfigError("gamma + beta must not exceed 1");
}

namespace {

void require_triple(const EmbeddingTriple& e) {
  if (e.a.rank() != 2 || e.a.shape() != e.b.shape() || e.a.shape() != e.d.shape())
    throw DimensionError("embedding triple must share one [N x C] shape");
}

Tensor weighted_sum(const EmbeddingTriple& e, double wa, double wb, double wd) {
  Tensor out(e.a.shape());
  auto o = out.mutable_data();
  const auto a = e.a.data(), b = e.b.data(), d = e.d.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = wa * a[i] + wb * b[i] + wd * d[i];
  return out;
}

// Columns of src [N x |cols|] written into dst [N x K] at the given indices.
void scatter_columns(const Tensor& src, const std::vector<std::size_t>& cols, Tensor& dst) {
  const std::size_t n = dst.dim(0);
  for (std::size_t q = 0; q < n; ++q)
    for (std::size_t j = 0; j < cols.size(); ++j) dst.at(q, cols[j]) = src.at(q, j);
}

Tensor log_probs(const Tensor& e, const Tensor& te_subset, double temperature) {
  return ops::log_softmax(ops::scale(ops::matmul_nt(e, te_subset), 1.0 / temperature), 1);
}

Tensor geometric_subset(const EmbeddingTriple& e, const Tensor& te, const std::vector<std::size_t>& cols, double wa,
                        double wb, double temperature) {
  const double wd = 1.0 - wa - wb;
  // Each stream is normalized over the whole test vocabulary before the split.
  EmbeddingTriple logs{ops::index_select(log_probs(e.a, te, temperature), 1, cols),
                       ops::index_select(log_probs(e.b, te, temperature), 1, cols),
                       ops::index_select(log_probs(e.d, te, temperature), 1, cols)};
  // Exponent 0 must drop a stream exactly, even when its log-probability is large.
  Tensor out(logs.a.shape(), 0.0);
  auto o = out.mutable_data();
  const auto la = logs.a.data(), lb = logs.b.data(), ld = logs.d.data();
  for (std::size_t i = 0; i < o.size(); ++i) {
    double s = 0.0;
    if (wa != 0.0) s += wa * la[i];
    if (wb != 0.0) s += wb * lb[i];
    if (wd != 0.0) s += wd * ld[i];
    o[i] = std::exp(s);
  }
  return out;
}

}  // namespace

BalancedEmbeddings balance_arithmetic(const EmbeddingTriple& e, const BalanceWeights& w) {
  w.validate();
  require_triple(e);
  return {weighted_sum(e, w.alpha, w.beta, 1.0 - w.alpha - w.beta),
          weighted_sum(e, w.gamma, w.beta, 1.0 - w.gamma - w.beta)};
}

BalancedProbabilities balance_geometric(const EmbeddingTriple& e, const ClassVocabulary& vocab,
                                        const BalanceWeights& w, double temperature) {
  w.validate();
  require_triple(e);
  if (!(temperature > 0.0)) throw ConfigError("temperature must be > 0");
  if (vocab.te.dim(1) != e.a.dim(1)) throw DimensionError("embedding dim differs from vocabulary");
  NoGradScope no_grad;
  BalancedProbabilities out;
  const auto tr = vocab.train_indices(), nw = vocab.new_indices();
  if (!tr.empty()) out.train = geometric_subset(e, vocab.te, tr, w.alpha, w.beta, temperature);
  if (!nw.empty()) out.novel = geometric_subset(e, vocab.te, nw, w.gamma, w.beta, temperature);
  return out;
}

Tensor classify(const BalancedEmbeddings& e, const ClassVocabulary& vocab) {
  if (e.train.rank() != 2 || e.train.shape() != e.novel.shape()) throw DimensionError("classify: E shapes differ");
  if (e.train.dim(1) != vocab.te.dim(1)) throw DimensionError("classify: embedding dim differs from vocabulary");
  NoGradScope no_grad;
  Tensor p({e.train.dim(0), vocab.size()}, 0.0);
  const auto tr = vocab.train_indices(), nw = vocab.new_indices();
  if (!tr.empty()) scatter_columns(ops::matmul_nt(e.train, ops::index_select(vocab.te, 0, tr)), tr, p);
  if (!nw.empty()) scatter_columns(ops::matmul_nt(e.novel, ops::index_select(vocab.te, 0, nw)), nw, p);
  return p;
}

Tensor classify(const BalancedProbabilities& bp, const ClassVocabulary& vocab) {
  const auto tr = vocab.train_indices(), nw = vocab.new_indices();
  const Tensor& any = tr.empty() ? bp.novel : bp.train;
  if (any.rank() != 2) throw DimensionError("classify: missing probabilities");
  if ((!tr.empty() && bp.train.dim(1) != tr.size()) || (!nw.empty() && bp.novel.dim(1) != nw.size()))
    throw DimensionError("classify: probability columns do not match the vocabulary split");
  NoGradScope no_grad;
  Tensor p({any.dim(0), vocab.size()}, 0.0);
  if (!tr.empty()) scatter_columns(ops::log(bp.train), tr, p);
  if (!nw.empty()) scatter_columns(ops::log(bp.novel), nw, p);
  return p;
}

SegmentationResult segment(const Tensor& masks, const Tensor& p, std::size_t out_h, std::size_t out_w,
                           double temperature, const std::vector<double>* query_weights) {
  if (masks.rank() != 3 || p.rank() != 2 || masks.dim(2) != p.dim(0))
    throw DimensionError("segment: masks [h x w x N] and P [N x K] required");
  if (!(temperature > 0.0)) throw ConfigError("temperature must be > 0");
  if (out_h == 0 || out_w == 0) throw DimensionError("segment: empty output size");
  NoGradScope no_grad;
  const std::size_t h = masks.dim(0), w = masks.dim(1), n = masks.dim(2), k = p.dim(1);
  Tensor probs = ops::softmax(ops::scale(p.detach(), 1.0 / temperature), 1);
  if (query_weights) {
    if (query_weights->size() != n) throw DimensionError("segment: one weight per query required");
    auto pr = probs.mutable_data();
    for (std::size_t q = 0; q < n; ++q)
      for (std::size_t c = 0; c < k; ++c) pr[q * k + c] *= (*query_weights)[q];
  }
  Tensor act = ops::sigmoid(ops::reshape(masks.detach(), {h * w, n}));
  SegmentationResult out;
  out.scores = ops::reshape(ops::matmul(act, probs), {h, w, k});
  Tensor up = (h == out_h && w == out_w) ? out.scores : ops::bilinear_resize(out.scores, out_h, out_w);
  out.height = out_h;
  out.width = out_w;
  out.label_map.resize(out_h * out_w);
  const auto s = up.data();
  for (std::size_t i = 0; i < out_h * out_w; ++i) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < k; ++c)
      if (s[i * k + c] > s[i * k + best]) best = c;
    out.label_map[i] = static_cast<std::uint16_t>(best);
  }
  return out;
}

IouAccumulator::IouAccumulator(std::size_t num_classes)
    : k_(num_classes), inter_(num_classes, 0), union_(num_classes, 0), gt_count_(num_classes, 0) {}

void IouAccumulator::add(const std::vector<std::uint16_t>& pred, const std::vector<std::uint16_t>& gt) {
  if (pred.size() != gt.size()) throw DimensionError("miou: prediction and ground truth differ in size");
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const std::size_t g = gt[i], pr = pred[i];
    if (g > k_) throw VocabularyError("ground-truth label out of range");
    if (pr >= k_) throw VocabularyError("predicted label out of range");
    if (g == k_) continue;
    ++gt_count_[g];
    if (pr == g) {
      ++inter_[g];
      ++union_[g];
    } else {
      ++union_[g];
      ++union_[pr];
    }
  }
}

void IouAccumulator::merge(const IouAccumulator& other) {
  if (other.k_ != k_) throw DimensionError("cannot merge accumulators over different vocabularies");
  for (std::size_t c = 0; c < k_; ++c) {
    inter_[c] += other.inter_[c];
    union_[c] += other.union_[c];
    gt_count_[c] += other.gt_count_[c];
  }
}

MiouResult IouAccumulator::result(const ClassVocabulary& vocab) const {
  if (vocab.size() != k_) throw DimensionError("vocabulary size differs from accumulator");
  MiouResult r;
  r.per_class.assign(k_, std::numeric_limits<double>::quiet_NaN());
  double s_all = 0, s_tr = 0, s_nw = 0;
  std::size_t n_all = 0, n_tr = 0, n_nw = 0;
  for (std::size_t c = 0; c < k_; ++c) {
    if (gt_count_[c] == 0) continue;
    const double iou = static_cast<double>(inter_[c]) / static_cast<double>(union_[c]);
    r.per_class[c] = iou;
    s_all += iou;
    ++n_all;
    if (vocab.is_train[c]) {
      s_tr += iou;
      ++n_tr;
    } else {
      s_nw += iou;
      ++n_nw;
    }
  }
  const double nan = std::numeric_limits<double>::quiet_NaN();
  r.all = n_all ? s_all / static_cast<double>(n_all) : nan;
  r.train = n_tr ? s_tr / static_cast<double>(n_tr) : nan;
  r.novel = n_nw ? s_nw / static_cast<double>(n_nw) : nan;
  return r;
}

MiouResult miou(const std::vector<std::uint16_t>& pred, const std::vector<std::uint16_t>& gt,
                const ClassVocabulary& vocab) {
  IouAccumulator acc(vocab.size());
  acc.add(pred, gt);
  return acc.result(vocab);
}

namespace {

std::string format_iou(double v) {
  if (std::isnan(v)) return "";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

}  // namespace

void write_metrics_csv(std::ostream& out, const ClassVocabulary& vocab, const MiouResult& r) {
  out << "class,iou,split\n";
  for (std::size_t c = 0; c < vocab.size(); ++c)
    out << vocab.names[c] << ',' << format_iou(r.per_class.at(c)) << ',' << (vocab.is_train[c] ? "train" : "new")
        << '\n';
  out << "mIoU," << format_iou(r.all) << ",all\n";
  out << "mIoU," << format_iou(r.train) << ",train\n";
  out << "mIoU," << format_iou(r.novel) << ",new\n";
}

void write_metrics_csv(const std::filesystem::path& path, const ClassVocabulary& vocab, const MiouResult& r) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  write_metrics_csv(out, vocab, r);
}

}  // namespace ovseg
