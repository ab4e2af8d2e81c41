#include "ovseg/harness/evaluation.hpp"

#include "ovseg/errors.hpp"

namespace ovseg {

unsigned parse_embedding_subset(std::string_view s) {
  static constexpr std::string_view valid[] = {"a", "b", "d", "ab", "ad", "bd", "abd"};
  for (std::string_view v : valid)
    if (s == v) {
      unsigned out = 0;
      for (char c : s) out |= c == 'a' ? kStreamA : c == 'b' ? kStreamB : kStreamD;
      return out;
    }
  throw ConfigError("unknown embedding subset '" + std::string(s) + "' (a|b|d|ab|ad|bd|abd)");
}

namespace {

void restrict(double w[3], unsigned streams) {
  const unsigned bits[3] = {kStreamA, kStreamB, kStreamD};
  int selected = 0;
  double sum = 0.0;
  for (int i = 0; i < 3; ++i) {
    if (!(streams & bits[i])) w[i] = 0.0;
    if (streams & bits[i]) ++selected;
    sum += w[i];
  }
  if (selected == 0) throw ConfigError("no embedding stream selected");
  if (selected == 1) {
    for (int i = 0; i < 3; ++i) w[i] = (streams & bits[i]) ? 1.0 : 0.0;
    return;
  }
  if (!(sum > 0.0)) throw ConfigError("balance weights give the selected streams zero total weight");
  if (selected == 3) return;
  for (int i = 0; i < 3; ++i) w[i] /= sum;
}

}  // namespace

StreamWeights stream_weights(const BalanceWeights& w, unsigned streams) {
  w.validate();
  StreamWeights s{{w.alpha, w.beta, 1.0 - w.alpha - w.beta}, {w.gamma, w.beta, 1.0 - w.gamma - w.beta}};
  restrict(s.train, streams);
  restrict(s.novel, streams);
  return s;
}

QueryScores score_queries(const EmbeddingTriple& e, const ClassVocabulary& vocab, const EvalOptions& options) {
  const StreamWeights sw = stream_weights(options.weights, options.streams);
  const BalanceMode mode = options.weights.mode;
  const BalanceWeights wt{sw.train[0], sw.train[1], sw.train[0], mode};
  const BalanceWeights wn{sw.novel[0], sw.novel[1], sw.novel[0], mode};
  QueryScores out;
  if (mode == BalanceMode::arithmetic) {
    const BalancedEmbeddings b{balance_arithmetic(e, wt).train, balance_arithmetic(e, wn).novel};
    out.scores = classify(b, vocab);
    out.temperature = kCosineTemperature;
  } else {
    const BalancedProbabilities p{balance_geometric(e, vocab, wt).train, balance_geometric(e, vocab, wn).novel};
    out.scores = classify(p, vocab);
    out.temperature = 1.0;
  }
  return out;
}

std::vector<double> objectness(const Model& model, const Tensor& a, const ClassVocabulary& vocab) {
  NoGradScope no_grad;
  const Tensor logits = class_logits(a, vocab.te, &model.decoder().void_embedding(), model.config().logit_scale);
  const Tensor p = ops::softmax(logits, 1);
  const std::size_t k = vocab.size();
  std::vector<double> out(a.dim(0));
  for (std::size_t q = 0; q < out.size(); ++q) out[q] = 1.0 - p.at(q, k);
  return out;
}

SegmentationResult predict(const Model& model, const Image8& image, const ClassVocabulary& vocab,
                           const EvalOptions& options) {
  NoGradScope no_grad;
  const ForwardOutput f = forward(model, image_tensor(image), vocab.te, (options.streams & kStreamB) != 0);
  EmbeddingTriple e = f.embeddings;
  if (!(options.streams & kStreamB)) e.b = e.a;  // unused, zero weight
  const QueryScores q = score_queries(e, vocab, options);
  if (!options.weight_by_objectness) return segment(f.masks, q.scores, image.height, image.width, q.temperature);
  const std::vector<double> w = objectness(model, f.embeddings.a, vocab);
  return segment(f.masks, q.scores, image.height, image.width, q.temperature, &w);
}

MiouResult evaluate(const Model& model, const DatasetInfo& data, const EvalOptions& options) {
  const ClassVocabulary vocab = ClassVocabulary::load(data.vocab_path(), model.text(), options.prompts);
  IouAccumulator acc(vocab.size());
  for (std::size_t i = 0; i < data.spec.eval_images; ++i) {
    const Sample s = data.load("eval", i);
    acc.add(predict(model, s.image, vocab, options).label_map, s.labels);
  }
  return acc.result(vocab);
}

Image8 overlay(const Image8& image, const std::vector<std::uint16_t>& labels) {
  if (image.channels != 3 || labels.size() != image.width * image.height)
    throw DimensionError("overlay: image and label map disagree");
  Image8 out = image;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const std::uint64_t h = mix_seed(labels[i], "overlay-colour");
    for (std::size_t ch = 0; ch < 3; ++ch) {
      const unsigned colour = static_cast<unsigned>((h >> (8 * ch)) & 0xff);
      out.pixels[i * 3 + ch] = static_cast<std::uint8_t>((image.pixels[i * 3 + ch] + colour + 1) / 2);
    }
  }
  return out;
}

}  // namespace ovseg
