#pragma once

#include <string_view>

#include "ovseg/harness/dataset.hpp"
#include "ovseg/harness/model.hpp"
#include "ovseg/inference.hpp"

namespace ovseg {

/// Bit set over the streams used at inference.
enum EmbeddingStream : unsigned { kStreamA = 1, kStreamB = 2, kStreamD = 4 };
unsigned parse_embedding_subset(std::string_view s);

struct EvalOptions {
  BalanceWeights weights;
  unsigned streams = kStreamA | kStreamB | kStreamD;
  PromptStrategy prompts = PromptStrategy::template_average;
  /// Scale each query by 1 - p(no-object) from the A stream's logits over
  /// the test vocabulary plus the no-object embedding.
  bool weight_by_objectness = false;
};

/// 1 - softmax(class_logits(A, TE, void))[no-object] per query.
std::vector<double> objectness(const Model& model, const Tensor& a, const ClassVocabulary& vocab);

/// Per-split stream weights {a, b, d}: {alpha, beta, 1-alpha-beta} for
/// training classes and {gamma, beta, 1-gamma-beta} for new ones, with
/// unselected streams zeroed and the rest rescaled to sum to one. A lone
/// stream gets weight one.
struct StreamWeights {
  double train[3];
  double novel[3];
};
StreamWeights stream_weights(const BalanceWeights& w, unsigned streams);

struct QueryScores {
  Tensor scores;             // [N x K] in vocabulary order
  double temperature = 1.0;  // softmax temperature that turns scores into probabilities
};
QueryScores score_queries(const EmbeddingTriple& e, const ClassVocabulary& vocab, const EvalOptions& options);

SegmentationResult predict(const Model& model, const Image8& image, const ClassVocabulary& vocab,
                           const EvalOptions& options);

/// Dataset-level mIoU over the eval split.
MiouResult evaluate(const Model& model, const DatasetInfo& data, const EvalOptions& options);

/// 50/50 blend of the image with a fixed per-class colour.
Image8 overlay(const Image8& image, const std::vector<std::uint16_t>& labels);

}  // namespace ovseg
