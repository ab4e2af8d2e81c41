#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "ovseg/numerics/tensor.hpp"

namespace ovseg {

/// k binary masks flattened to [k x P] (P = pixels at mask resolution) and
/// their indices into the training vocabulary.
struct GroundTruth {
  Tensor masks;
  std::vector<std::size_t> class_ids;

  std::size_t size() const { return class_ids.size(); }
  void validate(std::size_t num_train_classes) const;
};

struct LossWeights {
  double bce = 5.0;
  double dice = 5.0;
  double cls = 2.0;
  double ssc = 10.0;
  /// Relative weight of the no-object target for unmatched queries.
  double no_object = 0.1;

  void validate() const;
};

struct Assignment {
  std::vector<std::size_t> query_of_gt;
  double cost = 0.0;
};

/// Exact minimum-cost injective assignment of rows to columns for a
/// row-major rows x cols matrix. Throws CapacityError if cols < rows.
Assignment hungarian(const std::vector<double>& cost, std::size_t rows, std::size_t cols);

/// k x N matrix of bce * mask_bce + dice * mask_dice + cls * (-p(class)).
/// mask_logits is [P x N], class_logits [N x K'].
std::vector<double> matching_costs(const Tensor& mask_logits, const Tensor& class_logits, const GroundTruth& gt,
                                   const LossWeights& w);
Assignment match(const Tensor& mask_logits, const Tensor& class_logits, const GroundTruth& gt, const LossWeights& w);

/// Mean of softplus(x) - x*g over all entries.
Tensor bce_loss(const Tensor& logits, const Tensor& gt);
/// Rows are masks: mean over rows of 1 - 2*sum(p*g) / (sum(p) + sum(g) + 1).
Tensor dice_loss(const Tensor& logits, const Tensor& gt);
/// Weighted mean of -log_softmax(logits)[row, target]. Unit weights if none.
Tensor cls_loss(const Tensor& logits, const std::vector<std::size_t>& targets,
                const std::vector<double>* weights = nullptr);
/// Mean |cos(TE_i, TE_j) - cos(IE_i, IE_j)| over all k^2 pairs.
Tensor ssc_loss(const Tensor& ie, const Tensor& te);

enum class SscPlacement { a_last1, a_last3, a_all, b_last1, ab_last1, none };
SscPlacement parse_ssc_placement(std::string_view s);
std::string_view to_string(SscPlacement p);

struct LayerPrediction {
  Tensor mask_logits;   // [P x N]
  Tensor class_logits;  // [N x (f + 1)], last column is no-object
  Tensor embeddings;    // [N x C], unit rows
};

struct Prediction {
  std::vector<LayerPrediction> layers;
  /// B stream at the last layer.
  std::optional<Tensor> b_class_logits;
  std::optional<Tensor> b_embeddings;
};

struct LossBreakdown {
  Tensor total;
  Tensor sem_seg;
  Tensor ssc;
  std::vector<Assignment> assignments;  // per layer
};

/// Sum over layers of matched bce/dice/cls, plus cls on matched B rows, plus
/// weights.ssc * SSC at the given placement. te_train is [f x C].
LossBreakdown total_loss(const Prediction& pred, const GroundTruth& gt, const Tensor& te_train,
                         const LossWeights& w, SscPlacement placement);

}  // namespace ovseg
