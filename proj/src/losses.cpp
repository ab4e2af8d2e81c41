#include "ovseg/losses.hpp"

#include <cmath>
#include <limits>

#include "ovseg/errors.hpp"
#include "ovseg/numerics/ops.hpp"

namespace ovseg {

void GroundTruth::validate(std::size_t num_train_classes) const {
  if (class_ids.empty()) throw ContractError("ground truth needs at least one mask");
  if (masks.rank() != 2 || masks.dim(0) != class_ids.size())
    throw DimensionError("ground truth masks must be [k x P] with k = " + std::to_string(class_ids.size()));
  const std::size_t p = masks.dim(1);
  for (std::size_t i = 0; i < class_ids.size(); ++i) {
    if (class_ids[i] >= num_train_classes) throw VocabularyError("ground truth class id out of range");
    double area = 0.0;
    for (std::size_t j = 0; j < p; ++j) area += masks.at(i, j);
    if (area <= 0.0) throw ContractError("ground truth mask " + std::to_string(i) + " is empty");
  }
}

void LossWeights::validate() const {
  for (double v : {bce, dice, cls, ssc, no_object})
    if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError("loss weights must be finite and >= 0");
}

Assignment hungarian(const std::vector<double>& cost, std::size_t rows, std::size_t cols) {
  if (cols < rows)
    throw CapacityError("cannot match " + std::to_string(rows) + " items to " + std::to_string(cols) + " slots");
  if (cost.size() != rows * cols) throw DimensionError("hungarian: cost matrix size");
  Assignment out;
  if (rows == 0) return out;
  // Shortest augmenting path with potentials; 1-based, column 0 is a sentinel.
  constexpr double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(rows + 1, 0.0), v(cols + 1, 0.0);
  std::vector<std::size_t> owner(cols + 1, 0), way(cols + 1, 0);
  for (std::size_t i = 1; i <= rows; ++i) {
    owner[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(cols + 1, inf);
    std::vector<char> used(cols + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = owner[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= cols; ++j) {
        if (used[j]) continue;
        const double cur = cost[(i0 - 1) * cols + (j - 1)] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= cols; ++j) {
        if (used[j]) {
          u[owner[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (owner[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      owner[j0] = owner[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  out.query_of_gt.assign(rows, 0);
  for (std::size_t j = 1; j <= cols; ++j)
    if (owner[j] != 0) out.query_of_gt[owner[j] - 1] = j - 1;
  for (std::size_t i = 0; i < rows; ++i) out.cost += cost[i * cols + out.query_of_gt[i]];
  return out;
}

std::vector<double> matching_costs(const Tensor& mask_logits, const Tensor& class_logits, const GroundTruth& gt,
                                   const LossWeights& w) {
  if (mask_logits.rank() != 2 || class_logits.rank() != 2 || gt.masks.rank() != 2)
    throw DimensionError("matching_costs: expects 2-D operands");
  const std::size_t p = mask_logits.dim(0), n = mask_logits.dim(1), k = gt.size(), kc = class_logits.dim(1);
  if (gt.masks.dim(1) != p || class_logits.dim(0) != n) throw DimensionError("matching_costs: shape mismatch");
  for (std::size_t c : gt.class_ids)
    if (c >= kc) throw VocabularyError("matching_costs: class id out of range");

  std::vector<double> softplus(p * n), prob(p * n);
  for (std::size_t i = 0; i < p * n; ++i) {
    const double x = mask_logits.data()[i];
    softplus[i] = std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
    prob[i] = 1.0 / (1.0 + std::exp(-x));
  }
  std::vector<double> class_prob(n * kc);
  for (std::size_t q = 0; q < n; ++q) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < kc; ++c) mx = std::max(mx, class_logits.at(q, c));
    double z = 0.0;
    for (std::size_t c = 0; c < kc; ++c) z += class_prob[q * kc + c] = std::exp(class_logits.at(q, c) - mx);
    for (std::size_t c = 0; c < kc; ++c) class_prob[q * kc + c] /= z;
  }

  std::vector<double> cost(k * n);
  for (std::size_t g = 0; g < k; ++g) {
    double gsum = 0.0;
    for (std::size_t i = 0; i < p; ++i) gsum += gt.masks.at(g, i);
    for (std::size_t q = 0; q < n; ++q) {
      double bce = 0.0, inter = 0.0, psum = 0.0;
      for (std::size_t i = 0; i < p; ++i) {
        const double gv = gt.masks.at(g, i), x = mask_logits.data()[i * n + q];
        bce += softplus[i * n + q] - x * gv;
        inter += prob[i * n + q] * gv;
        psum += prob[i * n + q];
      }
      bce /= static_cast<double>(p);
      const double dice = 1.0 - 2.0 * inter / (psum + gsum + 1.0);
      cost[g * n + q] = w.bce * bce + w.dice * dice - w.cls * class_prob[q * kc + gt.class_ids[g]];
    }
  }
  return cost;
}

Assignment match(const Tensor& mask_logits, const Tensor& class_logits, const GroundTruth& gt, const LossWeights& w) {
  if (mask_logits.rank() == 2 && mask_logits.dim(1) < gt.size())
    throw CapacityError("fewer queries (" + std::to_string(mask_logits.dim(1)) + ") than ground-truth masks (" +
                        std::to_string(gt.size()) + ")");
  return hungarian(matching_costs(mask_logits, class_logits, gt, w), gt.size(), mask_logits.dim(1));
}

Tensor bce_loss(const Tensor& logits, const Tensor& gt) {
  if (logits.shape() != gt.shape()) throw DimensionError("bce_loss: shape mismatch");
  return ops::mean(ops::sub(ops::softplus(logits), ops::mul(logits, gt)));
}

Tensor dice_loss(const Tensor& logits, const Tensor& gt) {
  if (logits.shape() != gt.shape() || logits.rank() != 2) throw DimensionError("dice_loss: expects matching [k x P]");
  Tensor p = ops::sigmoid(logits);
  Tensor inter = ops::sum_axis(ops::mul(p, gt), 1);
  Tensor denom = ops::add_scalar(ops::add(ops::sum_axis(p, 1), ops::sum_axis(gt, 1)), 1.0);
  Tensor ratio = ops::div(ops::scale(inter, 2.0), denom);
  return ops::add_scalar(ops::scale(ops::mean(ratio), -1.0), 1.0);
}

Tensor cls_loss(const Tensor& logits, const std::vector<std::size_t>& targets, const std::vector<double>* weights) {
  if (logits.rank() != 2 || logits.dim(0) != targets.size()) throw DimensionError("cls_loss: one target per row");
  for (std::size_t t : targets)
    if (t >= logits.dim(1)) throw VocabularyError("cls_loss: target out of range");
  Tensor nll = ops::scale(ops::gather_elements(ops::log_softmax(logits, 1), targets), -1.0);
  if (!weights) return ops::mean(nll);
  if (weights->size() != targets.size()) throw DimensionError("cls_loss: one weight per row");
  double total = 0.0;
  for (double v : *weights) total += v;
  if (!(total > 0.0)) throw ContractError("cls_loss: weights sum to zero");
  Tensor wt({targets.size()}, *weights);
  return ops::scale(ops::sum(ops::mul(nll, wt)), 1.0 / total);
}

Tensor ssc_loss(const Tensor& ie, const Tensor& te) {
  if (ie.rank() != 2 || ie.shape() != te.shape()) throw DimensionError("ssc_loss: IE and TE must both be [k x C]");
  if (ie.dim(0) == 0) throw ContractError("ssc_loss: k must be >= 1");
  Tensor cs_text;
  {
    NoGradScope no_grad;
    Tensor t = ops::l2_normalize_rows(te.detach());
    cs_text = ops::matmul_nt(t, t);
  }
  Tensor i = ops::l2_normalize_rows(ie);
  Tensor cs_image = ops::matmul_nt(i, i);
  return ops::mean(ops::abs(ops::sub(cs_text, cs_image)));
}

SscPlacement parse_ssc_placement(std::string_view s) {
  if (s == "a_last1") return SscPlacement::a_last1;
  if (s == "a_last3") return SscPlacement::a_last3;
  if (s == "a_all") return SscPlacement::a_all;
  if (s == "b_last1") return SscPlacement::b_last1;
  if (s == "ab_last1") return SscPlacement::ab_last1;
  if (s == "none") return SscPlacement::none;
  throw ConfigError("unknown ssc placement: " + std::string(s));
}

std::string_view to_string(SscPlacement p) {
  switch (p) {
    case SscPlacement::a_last1: return "a_last1";
    case SscPlacement::a_last3: return "a_last3";
    case SscPlacement::a_all: return "a_all";
    case SscPlacement::b_last1: return "b_last1";
    case SscPlacement::ab_last1: return "ab_last1";
    case SscPlacement::none: return "none";
  }
  return "none";
}

LossBreakdown total_loss(const Prediction& pred, const GroundTruth& gt, const Tensor& te_train,
                         const LossWeights& w, SscPlacement placement) {
  w.validate();
  if (pred.layers.empty()) throw ContractError("total_loss: no decoder layers");
  gt.validate(te_train.dim(0));
  const std::size_t nl = pred.layers.size(), k = gt.size();
  const bool needs_b = placement == SscPlacement::b_last1 || placement == SscPlacement::ab_last1;
  if (needs_b && !pred.b_embeddings) throw ContractError("total_loss: placement needs B embeddings");

  Tensor te_k;
  {
    NoGradScope no_grad;
    te_k = ops::index_select(te_train, 0, gt.class_ids);
  }

  LossBreakdown out;
  out.sem_seg = Tensor::scalar(0.0);
  out.ssc = Tensor::scalar(0.0);
  for (std::size_t li = 0; li < nl; ++li) {
    const LayerPrediction& lp = pred.layers[li];
    Assignment a = match(lp.mask_logits, lp.class_logits, gt, w);
    Tensor matched = ops::transpose(ops::index_select(lp.mask_logits, 1, a.query_of_gt));

    const std::size_t n = lp.class_logits.dim(0), void_id = lp.class_logits.dim(1) - 1;
    std::vector<std::size_t> targets(n, void_id);
    std::vector<double> weights(n, w.no_object);
    for (std::size_t g = 0; g < k; ++g) {
      targets[a.query_of_gt[g]] = gt.class_ids[g];
      weights[a.query_of_gt[g]] = 1.0;
    }
    Tensor layer = ops::add(ops::add(ops::scale(bce_loss(matched, gt.masks), w.bce),
                                     ops::scale(dice_loss(matched, gt.masks), w.dice)),
                            ops::scale(cls_loss(lp.class_logits, targets, &weights), w.cls));
    out.sem_seg = ops::add(out.sem_seg, layer);

    const bool a_here = (placement == SscPlacement::a_all) ||
                        ((placement == SscPlacement::a_last1 || placement == SscPlacement::ab_last1) && li + 1 == nl) ||
                        (placement == SscPlacement::a_last3 && li + 3 >= nl);
    if (a_here) out.ssc = ops::add(out.ssc, ssc_loss(ops::index_select(lp.embeddings, 0, a.query_of_gt), te_k));
    out.assignments.push_back(std::move(a));
  }

  const Assignment& last = out.assignments.back();
  if (pred.b_class_logits) {
    Tensor rows = ops::index_select(*pred.b_class_logits, 0, last.query_of_gt);
    out.sem_seg = ops::add(out.sem_seg, ops::scale(cls_loss(rows, gt.class_ids), w.cls));
  }
  if (needs_b) out.ssc = ops::add(out.ssc, ssc_loss(ops::index_select(*pred.b_embeddings, 0, last.query_of_gt), te_k));

  out.total = ops::add(out.sem_seg, ops::scale(out.ssc, w.ssc));
  return out;
}

}  // namespace ovseg
