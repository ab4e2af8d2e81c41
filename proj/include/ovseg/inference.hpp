#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "ovseg/adab_decoder.hpp"
#include "ovseg/encoders.hpp"

namespace ovseg {

struct ClassVocabulary {
  std::vector<std::string> names;
  Tensor te;  // [K x C], unit rows
  std::vector<bool> is_train;

  std::size_t size() const { return names.size(); }
  std::size_t num_train() const;
  std::vector<std::size_t> train_indices() const;
  std::vector<std::size_t> new_indices() const;
  void validate() const;

  /// Reads a vocabulary file (one name per line, '*' marks training classes)
  /// and embeds it.
  static ClassVocabulary load(const std::filesystem::path& path, const TextEmbedder& text, PromptStrategy prompts);
  static ClassVocabulary build(std::vector<std::string> names, std::vector<bool> is_train, const TextEmbedder& text,
                               PromptStrategy prompts);
};

enum class BalanceMode { arithmetic, geometric };
BalanceMode parse_balance_mode(std::string_view s);
std::string_view to_string(BalanceMode m);

struct BalanceWeights {
  double alpha = 0.2;
  double beta = 0.7;
  double gamma = 0.0;
  BalanceMode mode = BalanceMode::geometric;

  void validate() const;
};

/// Temperature applied to unit-norm cosine logits before any softmax.
inline constexpr double kCosineTemperature = 0.01;

struct BalancedEmbeddings {
  Tensor train;  // E_train [N x C]
  Tensor novel;  // E_new [N x C]
};

struct BalancedProbabilities {
  Tensor train;  // [N x f]
  Tensor novel;  // [N x (K - f)]
};

/// E_train = a*A + b*B + (1-a-b)*D, E_new with gamma in place of alpha.
BalancedEmbeddings balance_arithmetic(const EmbeddingTriple& e, const BalanceWeights& w);

/// Per-stream softmax(E TE^T / T) over all K classes, combined as
/// P_A^a * P_B^b * P_D^(1-a-b) (gamma for new classes), then split into the
/// train and new columns.
BalancedProbabilities balance_geometric(const EmbeddingTriple& e, const ClassVocabulary& vocab,
                                        const BalanceWeights& w, double temperature = kCosineTemperature);

/// [N x K] cosine logits, train columns from E_train, new ones from E_new,
/// in vocabulary order.
Tensor classify(const BalancedEmbeddings& e, const ClassVocabulary& vocab);
/// [N x K] log-probabilities in vocabulary order.
Tensor classify(const BalancedProbabilities& p, const ClassVocabulary& vocab);

struct SegmentationResult {
  Tensor scores;  // [h x w x K] at mask resolution
  std::vector<std::uint16_t> label_map;  // [height x width]
  std::size_t height = 0, width = 0;
};

/// S = sigmoid(M) * softmax(P / temperature) per pixel, bilinearly upsampled
/// to out_h x out_w, argmax with ties to the lowest class index. Optional
/// query_weights scale each query's class distribution.
SegmentationResult segment(const Tensor& masks, const Tensor& p, std::size_t out_h, std::size_t out_w,
                           double temperature = 1.0, const std::vector<double>* query_weights = nullptr);

struct MiouResult {
  double all = 0.0;
  double train = 0.0;
  double novel = 0.0;
  std::vector<double> per_class;  // NaN for classes absent from the ground truth
};

/// Dataset-level IoU counts. The ignore label is K.
class IouAccumulator {
 public:
  explicit IouAccumulator(std::size_t num_classes);
  void add(const std::vector<std::uint16_t>& pred, const std::vector<std::uint16_t>& gt);
  void merge(const IouAccumulator& other);
  MiouResult result(const ClassVocabulary& vocab) const;

  const std::vector<std::uint64_t>& intersections() const { return inter_; }
  const std::vector<std::uint64_t>& unions() const { return union_; }

 private:
  std::size_t k_;
  std::vector<std::uint64_t> inter_, union_, gt_count_;
};

MiouResult miou(const std::vector<std::uint16_t>& pred, const std::vector<std::uint16_t>& gt,
                const ClassVocabulary& vocab);

/// Header `class,iou,split`, one row per class (split train|new, empty iou if
/// absent), then `mIoU,<v>,all|train|new`.
void write_metrics_csv(std::ostream& out, const ClassVocabulary& vocab, const MiouResult& r);
void write_metrics_csv(const std::filesystem::path& path, const ClassVocabulary& vocab, const MiouResult& r);

}  // namespace ovseg
