#include "grad_cases.hpp"

#include "ovseg/adab_decoder.hpp"
#include "ovseg/losses.hpp"
#include "ovseg/numerics/gradcheck.hpp"
#include "ovseg/numerics/ops.hpp"
#include "test_util.hpp"

namespace ovseg::test {
namespace {

// Scalar probe: sum(w * y) with fixed random weights so no gradient entry is
// structurally zero.
std::function<Tensor(const Tensor&)> probe(std::function<Tensor(const Tensor&)> op, Rng& rng, Shape out_shape) {
  Tensor w = random_tensor(rng, std::move(out_shape));
  return [op, w](const Tensor& x) { return ops::sum(ops::mul(op(x), w)); };
}

Tensor unit_rows(Rng& rng, std::size_t n, std::size_t c) {
  NoGradScope ng;
  return ops::l2_normalize_rows(random_tensor(rng, {n, c}));
}

GroundTruth random_gt(Rng& rng, std::size_t k, std::size_t p, std::size_t num_classes) {
  GroundTruth gt;
  gt.masks = Tensor({k, p});
  std::vector<std::size_t> ids(num_classes);
  for (std::size_t i = 0; i < num_classes; ++i) ids[i] = i;
  for (std::size_t i = 0; i + 1 < num_classes; ++i) std::swap(ids[i], ids[i + rng.below(num_classes - i)]);
  for (std::size_t g = 0; g < k; ++g) {
    gt.class_ids.push_back(ids[g]);
    for (std::size_t j = 0; j < p; ++j) gt.masks.at(g, j) = rng.uniform() < 0.4 ? 1.0 : 0.0;
    gt.masks.at(g, rng.below(p)) = 1.0;
  }
  return gt;
}

Prediction random_prediction(Rng& rng, std::size_t layers, std::size_t p, std::size_t n, std::size_t f,
                             std::size_t c) {
  Prediction pred;
  for (std::size_t l = 0; l < layers; ++l)
    pred.layers.push_back({random_tensor(rng, {p, n}, -3, 3), random_tensor(rng, {n, f + 1}, -2, 2),
                           unit_rows(rng, n, c)});
  pred.b_class_logits = random_tensor(rng, {n, f + 1}, -2, 2);
  pred.b_embeddings = unit_rows(rng, n, c);
  return pred;
}

}  // namespace

std::vector<GradCase> op_gradient_cases() {
  auto unary_case = [](std::function<Tensor(const Tensor&)> op, Shape in, Shape out, double lo = -2, double hi = 2) {
    return [=](Rng& r, double& worst) {
      Tensor x = random_tensor(r, in, lo, hi);
      worst = std::max(worst, finite_diff_check(probe(op, r, out), x));
    };
  };
  return {
      {"matmul lhs", [](Rng& r, double& w) {
         Tensor b = random_tensor(r, {4, 3});
         w = std::max(w, finite_diff_check(probe([b](const Tensor& a) { return ops::matmul(a, b); }, r, {2, 3}),
                                           random_tensor(r, {2, 4})));
       }},
      {"matmul rhs", [](Rng& r, double& w) {
         Tensor a = random_tensor(r, {2, 4});
         w = std::max(w, finite_diff_check(probe([a](const Tensor& b) { return ops::matmul(a, b); }, r, {2, 3}),
                                           random_tensor(r, {4, 3})));
       }},
      {"matmul_nt", [](Rng& r, double& w) {
         Tensor b = random_tensor(r, {3, 4});
         w = std::max(w, finite_diff_check(probe([b](const Tensor& a) { return ops::matmul_nt(a, b); }, r, {2, 3}),
                                           random_tensor(r, {2, 4})));
         Tensor a = random_tensor(r, {2, 4});
         w = std::max(w, finite_diff_check(probe([a](const Tensor& bb) { return ops::matmul_nt(a, bb); }, r, {2, 3}),
                                           random_tensor(r, {3, 4})));
       }},
      {"linear", [](Rng& r, double& w) {
         Tensor x = random_tensor(r, {3, 4}), W = random_tensor(r, {5, 4}), b = random_tensor(r, {5});
         w = std::max(w, finite_diff_check(probe([W, b](const Tensor& v) { return ops::linear(v, W, &b); }, r, {3, 5}), x));
         w = std::max(w, finite_diff_check(probe([x, b](const Tensor& v) { return ops::linear(x, v, &b); }, r, {3, 5}), W));
         w = std::max(w, finite_diff_check(probe([x, W](const Tensor& v) { return ops::linear(x, W, &v); }, r, {3, 5}), b));
       }},
      {"add/sub/mul/div", [](Rng& r, double& w) {
         Tensor o = random_tensor(r, {2, 3}, 0.5, 1.5);
         w = std::max(w, finite_diff_check(probe([o](const Tensor& v) { return ops::add(v, o); }, r, {2, 3}), random_tensor(r, {2, 3})));
         w = std::max(w, finite_diff_check(probe([o](const Tensor& v) { return ops::sub(o, v); }, r, {2, 3}), random_tensor(r, {2, 3})));
         w = std::max(w, finite_diff_check(probe([o](const Tensor& v) { return ops::mul(v, o); }, r, {2, 3}), random_tensor(r, {2, 3})));
         w = std::max(w, finite_diff_check(probe([o](const Tensor& v) { return ops::div(o, v); }, r, {2, 3}), random_tensor(r, {2, 3}, 0.5, 2)));
         w = std::max(w, finite_diff_check(probe([o](const Tensor& v) { return ops::div(v, o); }, r, {2, 3}), random_tensor(r, {2, 3})));
       }},
      {"add_row", [](Rng& r, double& w) {
         Tensor x = random_tensor(r, {3, 4});
         w = std::max(w, finite_diff_check(probe([x](const Tensor& v) { return ops::add_row(x, v); }, r, {3, 4}), random_tensor(r, {4})));
       }},
      {"scale/add_scalar", unary_case([](const Tensor& x) { return ops::add_scalar(ops::scale(x, -1.7), 0.3); }, {5}, {5})},
      {"mean", [](Rng& r, double& w) {
         w = std::max(w, finite_diff_check([](const Tensor& v) { return ops::mean(ops::mul(v, v)); }, random_tensor(r, {3, 3})));
       }},
      {"sum_axis", [](Rng& r, double& w) {
         w = std::max(w, finite_diff_check(probe([](const Tensor& x) { return ops::sum_axis(x, 1); }, r, {2, 4}), random_tensor(r, {2, 3, 4})));
         w = std::max(w, finite_diff_check(probe([](const Tensor& x) { return ops::sum_axis(x, 0); }, r, {3, 4}), random_tensor(r, {2, 3, 4})));
       }},
      {"softmax", unary_case([](const Tensor& x) { return ops::softmax(x, 1); }, {3, 5}, {3, 5}, -3, 3)},
      {"softmax axis0", unary_case([](const Tensor& x) { return ops::softmax(x, 0); }, {3, 5}, {3, 5}, -3, 3)},
      {"log_softmax", unary_case([](const Tensor& x) { return ops::log_softmax(x, 1); }, {3, 5}, {3, 5}, -3, 3)},
      {"sigmoid", unary_case([](const Tensor& x) { return ops::sigmoid(x); }, {6}, {6}, -4, 4)},
      {"relu", unary_case([](const Tensor& x) { return ops::relu(x); }, {6}, {6})},
      {"gelu", unary_case([](const Tensor& x) { return ops::gelu(x); }, {6}, {6}, -3, 3)},
      {"softplus", unary_case([](const Tensor& x) { return ops::softplus(x); }, {6}, {6}, -6, 6)},
      {"abs", unary_case([](const Tensor& x) { return ops::abs(x); }, {6}, {6})},
      {"exp/log", unary_case([](const Tensor& x) { return ops::log(ops::add_scalar(ops::exp(x), 1.0)); }, {6}, {6})},
      {"layer_norm", [](Rng& r, double& w) {
         Tensor g = random_tensor(r, {5}), b = random_tensor(r, {5}), x = random_tensor(r, {3, 5});
         w = std::max(w, finite_diff_check(probe([g, b](const Tensor& v) { return ops::layer_norm(v, g, b); }, r, {3, 5}), x));
         w = std::max(w, finite_diff_check(probe([x, b](const Tensor& v) { return ops::layer_norm(x, v, b); }, r, {3, 5}), g));
         w = std::max(w, finite_diff_check(probe([x, g](const Tensor& v) { return ops::layer_norm(x, g, v); }, r, {3, 5}), b));
       }},
      {"concat", [](Rng& r, double& w) {
         Tensor other = random_tensor(r, {2, 2});
         w = std::max(w, finite_diff_check(probe([other](const Tensor& v) { return ops::concat({v, other, v}, 1); }, r, {2, 8}), random_tensor(r, {2, 3})));
         w = std::max(w, finite_diff_check(probe([](const Tensor& v) { return ops::concat({v, v}, 0); }, r, {4, 3}), random_tensor(r, {2, 3})));
       }},
      {"slice", unary_case([](const Tensor& x) { return ops::slice(x, 1, 1, 3); }, {3, 4}, {3, 2})},
      {"index_select", unary_case([](const Tensor& x) { return ops::index_select(x, 0, {2, 0, 2}); }, {3, 4}, {3, 4})},
      {"gather_elements", unary_case([](const Tensor& x) { return ops::gather_elements(x, {1, 0, 3}); }, {3, 4}, {3})},
      {"transpose", unary_case([](const Tensor& x) { return ops::transpose(x); }, {3, 4}, {4, 3})},
      {"reshape", unary_case([](const Tensor& x) { return ops::reshape(x, {6, 2}); }, {3, 4}, {6, 2})},
      {"bilinear_resize up", unary_case([](const Tensor& x) { return ops::bilinear_resize(x, 5, 7); }, {3, 4, 2}, {5, 7, 2})},
      {"bilinear_resize down", unary_case([](const Tensor& x) { return ops::bilinear_resize(x, 2, 3); }, {5, 7, 2}, {2, 3, 2})},
      {"nearest_resize", unary_case([](const Tensor& x) { return ops::nearest_resize(x, 6, 4); }, {3, 2, 2}, {6, 4, 2})},
      {"im2col3x3", unary_case([](const Tensor& x) { return ops::im2col3x3(x); }, {3, 4, 2}, {12, 18})},
      {"l2_normalize_rows", unary_case([](const Tensor& x) { return ops::l2_normalize_rows(x); }, {3, 4}, {3, 4}, 0.2, 1.0)},
      {"multi_head_attention", [](Rng& r, double& w) {
         Tensor q = random_tensor(r, {3, 4}), kk = random_tensor(r, {5, 4}), v = random_tensor(r, {5, 4});
         auto bias = std::make_shared<std::vector<double>>(2 * 3 * 5);
         for (double& b : *bias) b = r.uniform() < 0.3 ? -1e9 : 0.0;
         for (std::size_t i = 0; i < 3; ++i) (*bias)[i * 5] = 0.0;
         for (std::size_t i = 0; i < 3; ++i) (*bias)[15 + i * 5 + 1] = 0.0;
         ops::AttentionBias cb = bias;
         w = std::max(w, finite_diff_check(probe([kk, v, cb](const Tensor& x) { return ops::multi_head_attention(x, kk, v, 2, cb); }, r, {3, 4}), q));
         w = std::max(w, finite_diff_check(probe([q, v, cb](const Tensor& x) { return ops::multi_head_attention(q, x, v, 2, cb); }, r, {3, 4}), kk));
         w = std::max(w, finite_diff_check(probe([q, kk, cb](const Tensor& x) { return ops::multi_head_attention(q, kk, x, 2, cb); }, r, {3, 4}), v));
         w = std::max(w, finite_diff_check(probe([](const Tensor& x) { return ops::multi_head_attention(x, x, x, 1); }, r, {4, 4}), random_tensor(r, {4, 4})));
       }},
  };
}


std::vector<GradCase> model_gradient_cases() {
  return {
      {"compute_masks", [](Rng& r, double& w) {
         Tensor f = random_tensor(r, {3, 4, 5}), a = random_tensor(r, {6, 5});
         w = std::max(w, finite_diff_check(probe([a](const Tensor& x) { return compute_masks(x, a); }, r, {3, 4, 6}), f));
         w = std::max(w, finite_diff_check(probe([f](const Tensor& x) { return compute_masks(f, x); }, r, {3, 4, 6}), a));
       }},
      {"compute_attention_masks", [](Rng& r, double& w) {
         Tensor f = random_tensor(r, {2, 3, 4}), ap = random_tensor(r, {5, 12});
         w = std::max(w, finite_diff_check(
                             probe([ap](const Tensor& x) { return compute_attention_masks(x, ap, 3); }, r, {2, 3, 3, 5}), f));
         w = std::max(w, finite_diff_check(
                             probe([f](const Tensor& x) { return compute_attention_masks(f, x, 3); }, r, {2, 3, 3, 5}), ap));
       }},
      {"class_logits", [](Rng& r, double& w) {
         Tensor e = unit_rows(r, 4, 6), te = unit_rows(r, 3, 6), v = random_tensor(r, {6});
         w = std::max(w, finite_diff_check(
                             probe([te, v](const Tensor& x) { return class_logits(ops::l2_normalize_rows(x), te, &v, 10.0); },
                                   r, {4, 4}),
                             e));
         w = std::max(w, finite_diff_check(
                             probe([e, te](const Tensor& x) { return class_logits(e, te, &x, 10.0); }, r, {4, 4}), v));
       }},
      {"bce", [](Rng& r, double& w) {
         Tensor g = random_gt(r, 2, 9, 4).masks;
         w = std::max(w, finite_diff_check([g](const Tensor& x) { return bce_loss(x, g); }, random_tensor(r, {2, 9}, -3, 3)));
       }},
      {"dice", [](Rng& r, double& w) {
         Tensor g = random_gt(r, 3, 9, 4).masks;
         w = std::max(w, finite_diff_check([g](const Tensor& x) { return dice_loss(x, g); }, random_tensor(r, {3, 9}, -3, 3)));
       }},
      {"cls", [](Rng& r, double& w) {
         std::vector<std::size_t> tg{r.below(4), r.below(4), 3};
         std::vector<double> wt{1.0, 1.0, 0.1};
         w = std::max(w, finite_diff_check([tg, wt](const Tensor& x) { return cls_loss(x, tg, &wt); },
                                           random_tensor(r, {3, 4}, -2, 2)));
       }},
      {"ssc", [](Rng& r, double& w) {
         Tensor te = unit_rows(r, 3, 5);
         w = std::max(w, finite_diff_check([te](const Tensor& x) { return ssc_loss(ops::l2_normalize_rows(x), te); },
                                           random_tensor(r, {3, 5})));
       }},
      {"total", [](Rng& r, double& w) {
         const std::size_t p = 12, n = 5, f = 4, c = 6;
         GroundTruth gt = random_gt(r, 3, p, f);
         Tensor te = unit_rows(r, f, c);
         Prediction pred = random_prediction(r, 2, p, n, f, c);
         const LossWeights lw;
         auto loss = [&](Prediction q) { return total_loss(q, gt, te, lw, SscPlacement::ab_last1).total; };
         w = std::max(w, finite_diff_check(
                             [&](const Tensor& x) {
                               Prediction q = pred;
                               q.layers[1].mask_logits = x;
                               return loss(q);
                             },
                             pred.layers[1].mask_logits.clone()));
         w = std::max(w, finite_diff_check(
                             [&](const Tensor& x) {
                               Prediction q = pred;
                               q.layers[0].class_logits = x;
                               return loss(q);
                             },
                             pred.layers[0].class_logits.clone()));
         w = std::max(w, finite_diff_check(
                             [&](const Tensor& x) {
                               Prediction q = pred;
                               q.layers[1].embeddings = ops::l2_normalize_rows(x);
                               return loss(q);
                             },
                             pred.layers[1].embeddings.clone()));
         w = std::max(w, finite_diff_check(
                             [&](const Tensor& x) {
                               Prediction q = pred;
                               q.b_embeddings = ops::l2_normalize_rows(x);
                               return loss(q);
                             },
                             pred.b_embeddings->clone()));
         w = std::max(w, finite_diff_check(
                             [&](const Tensor& x) {
                               Prediction q = pred;
                               q.b_class_logits = x;
                               return loss(q);
                             },
                             pred.b_class_logits->clone()));
       }},
  };
}

}  // namespace ovseg::test
