#include <cmath>
#include <numeric>

#include "doctest.h"
#include "ovseg/adab_decoder.hpp"
#include "ovseg/errors.hpp"
#include "ovseg/numerics/gradcheck.hpp"
#include "test_util.hpp"

using namespace ovseg;
using ovseg::test::max_abs_diff;
using ovseg::test::random_tensor;

namespace {

DecoderConfig tiny_config() {
  DecoderConfig c;
  c.num_queries = 5;
  c.layers = 3;
  c.hidden = 16;
  c.heads = 2;
  c.ffn_dim = 32;
  c.conv_dim = 8;
  c.embed_dim = 12;
  c.clip_heads = 2;
  c.masked_blocks = 1;
  return c;
}

ViTConfig tiny_clip() {
  ViTConfig c = ViTConfig::clip_default();
  c.depth = 4;
  c.heads = 2;
  c.width = 16;
  c.embed_dim = 16;
  c.native_grid = 4;
  c.aligned = false;
  return c;
}

FeaturePyramid random_pyramid(Rng& rng, std::size_t c) {
  FeaturePyramid p;
  p.levels[0] = random_tensor(rng, {8, 8, c});
  p.levels[1] = random_tensor(rng, {4, 4, c});
  p.levels[2] = random_tensor(rng, {2, 2, c});
  return p;
}

double row_norm(const Tensor& t, std::size_t r) {
  double s = 0.0;
  for (std::size_t j = 0; j < t.dim(1); ++j) s += t.at(r, j) * t.at(r, j);
  return std::sqrt(s);
}

}  // namespace

TEST_CASE("pixel decoder extents") {
  Rng rng(1);
  DecoderConfig cfg = tiny_config();
  PixelDecoder pd(6, cfg, rng);
  PixelDecoderOutput out = pd(random_pyramid(rng, 6), 64, 64);
  CHECK(out.stages[0].shape() == Shape{2, 2, 8});
  CHECK(out.stages[1].shape() == Shape{4, 4, 8});
  CHECK(out.stages[2].shape() == Shape{8, 8, 8});
  CHECK(out.mask_features.shape() == Shape{16, 16, 12});

  SUBCASE("zero pyramid gives a constant map") {
    FeaturePyramid z;
    z.levels = {Tensor({8, 8, 6}, 0.0), Tensor({4, 4, 6}, 0.0), Tensor({2, 2, 6}, 0.0)};
    PixelDecoderOutput zo = pd(z, 64, 64);
    for (std::size_t i = 0; i < 16 * 16; ++i)
      for (std::size_t c = 0; c < 12; ++c) CHECK(zo.mask_features.data()[i * 12 + c] == zo.mask_features.data()[c]);
  }
  SUBCASE("gradient reaches every level") {
    FeaturePyramid base = random_pyramid(rng, 6);
    Tensor w = random_tensor(rng, {16, 16, 12});
    for (std::size_t lvl = 0; lvl < 3; ++lvl) {
      auto f = [&](const Tensor& x) {
        FeaturePyramid p = base;
        p.levels[lvl] = x;
        return ops::sum(ops::mul(pd(p, 64, 64).mask_features, w));
      };
      Tensor x = base.levels[lvl].clone();
      CHECK(finite_diff_check(f, x) < 1e-4);
      Tensor g = x.clone();
      g.set_requires_grad(true);
      GradTape tape;
      {
        TapeScope scope(tape);
        tape.backward(f(g));
      }
      double mag = 0.0;
      for (double v : g.grad()) mag += std::abs(v);
      CHECK(mag > 0.0);
    }
  }
}

TEST_CASE("transformer decoder outputs") {
  Rng rng(2);
  DecoderConfig cfg = tiny_config();
  TransformerDecoder td(cfg, rng);
  std::array<Tensor, 3> stages{random_tensor(rng, {2, 2, 8}), random_tensor(rng, {4, 4, 8}),
                               random_tensor(rng, {8, 8, 8})};
  Tensor mf = random_tensor(rng, {16, 16, 12});
  TransformerDecoderOutput out = td(stages, mf);
  REQUIRE(out.a_layers.size() == 3);
  for (const Tensor& a : out.a_layers) {
    CHECK(a.shape() == Shape{5, 12});
    for (std::size_t r = 0; r < 5; ++r) CHECK(row_norm(a, r) == doctest::Approx(1.0).epsilon(1e-12));
  }
  CHECK(out.a.same_storage(out.a_layers.back()));
  CHECK(out.a_prime.shape() == Shape{5, 24});
  for (std::size_t hd = 0; hd < 2; ++hd)
    for (std::size_t q = 0; q < 5; ++q)
      for (std::size_t j = 0; j < 12; ++j) CHECK(out.a_prime.at(q, hd * 12 + j) == out.a.at(q, j));

  SUBCASE("identity expansion with one head reproduces A") {
    DecoderConfig one = cfg;
    one.clip_heads = 1;
    Rng r2(2);
    TransformerDecoder td1(one, r2);
    TransformerDecoderOutput o1 = td1(stages, mf);
    CHECK(max_abs_diff(o1.a_prime, o1.a) == 0.0);
  }
  SUBCASE("permuting queries permutes every output") {
    const std::vector<std::size_t> perm{3, 0, 4, 1, 2};
    Rng r3(2);
    TransformerDecoder tp(cfg, r3);
    Tensor qf = ops::index_select(tp.query_feat(), 0, perm);
    Tensor qp = ops::index_select(tp.query_pos(), 0, perm);
    std::copy(qf.data().begin(), qf.data().end(), tp.query_feat().mutable_data().begin());
    std::copy(qp.data().begin(), qp.data().end(), tp.query_pos().mutable_data().begin());
    TransformerDecoderOutput op = tp(stages, mf);
    for (std::size_t l = 0; l < 3; ++l)
      CHECK(max_abs_diff(op.a_layers[l], ops::index_select(out.a_layers[l], 0, perm)) < 1e-12);
    CHECK(max_abs_diff(op.a_prime, ops::index_select(out.a_prime, 0, perm)) < 1e-12);
  }
  SUBCASE("only decoder parameters are listed, all trainable") {
    ParamList params;
    td.collect(params, "dec");
    CHECK(params.size() > 10);
    for (const auto& p : params) CHECK(p.trainable);
  }
}

TEST_CASE("compute_masks") {
  Rng rng(3);
  Tensor f = random_tensor(rng, {3, 4, 5});
  Tensor a = random_tensor(rng, {6, 5});
  for (std::size_t j = 0; j < 5; ++j) a.at(2, j) = 0.0;
  Tensor m = compute_masks(f, a);
  REQUIRE(m.shape() == Shape{3, 4, 6});
  double worst = 0.0;
  for (std::size_t p = 0; p < 12; ++p)
    for (std::size_t q = 0; q < 6; ++q) {
      double s = 0.0;
      for (std::size_t c = 0; c < 5; ++c) s += f.data()[p * 5 + c] * a.at(q, c);
      worst = std::max(worst, std::abs(m.data()[p * 6 + q] - s));
      if (q == 2) CHECK(m.data()[p * 6 + q] == 0.0);
    }
  CHECK(worst < 1e-12);

  Tensor ones({2, 2, 3}, 1.0);
  Tensor e1({1, 3}, std::vector<double>{1, 0, 0});
  Tensor unit = compute_masks(ones, e1);
  for (double v : unit.data()) CHECK(v == 1.0);
  CHECK_THROWS_AS(compute_masks(f, random_tensor(rng, {6, 4})), DimensionError);
}

TEST_CASE("compute_attention_masks") {
  Rng rng(4);
  Tensor f = random_tensor(rng, {3, 4, 5});
  SUBCASE("one head reduces to compute_masks") {
    Tensor a = random_tensor(rng, {6, 5});
    Tensor m1 = compute_attention_masks(f, a, 1);
    CHECK(m1.shape() == Shape{3, 4, 1, 6});
    CHECK(max_abs_diff(m1, compute_masks(f, a)) == 0.0);
  }
  SUBCASE("chunked oracle and zero chunk") {
    const std::size_t heads = 3;
    Tensor ap = random_tensor(rng, {6, 15});
    for (std::size_t j = 5; j < 10; ++j) ap.at(4, j) = 0.0;
    Tensor m = compute_attention_masks(f, ap, heads);
    REQUIRE(m.shape() == Shape{3, 4, 3, 6});
    double worst = 0.0;
    for (std::size_t p = 0; p < 12; ++p)
      for (std::size_t hd = 0; hd < heads; ++hd)
        for (std::size_t q = 0; q < 6; ++q) {
          double s = 0.0;
          for (std::size_t c = 0; c < 5; ++c) s += f.data()[p * 5 + c] * ap.at(q, hd * 5 + c);
          const double got = m.data()[(p * heads + hd) * 6 + q];
          worst = std::max(worst, std::abs(got - s));
          if (hd == 1 && q == 4) CHECK(got == 0.0);
        }
    CHECK(worst < 1e-12);
  }
  CHECK_THROWS_AS(compute_attention_masks(f, random_tensor(rng, {6, 14}), 3), DimensionError);
}

TEST_CASE("mask_bias thresholds at zero and opens empty rows") {
  Tensor m({2, 2, 2}, std::vector<double>{1.0, -1.0, -2.0, -1.0, 0.5, -3.0, -0.1, -1.0});
  const auto b = mask_bias(m, 2, 2, 2);
  REQUIRE(b.size() == 2 * 2 * 4);
  const std::vector<double> q0{0.0, kMaskedBias, 0.0, kMaskedBias};
  for (std::size_t hd = 0; hd < 2; ++hd) {
    for (std::size_t i = 0; i < 4; ++i) CHECK(b[(hd * 2 + 0) * 4 + i] == q0[i]);
    for (std::size_t i = 0; i < 4; ++i) CHECK(b[(hd * 2 + 1) * 4 + i] == 0.0);
  }
}

TEST_CASE("mask attention decode") {
  VisionTransformer clip(tiny_clip());
  Rng rng(5);
  Tensor img = random_tensor(rng, {32, 32, 3}, 0.0, 1.0);
  ClipFeatures cf = encode_clip(clip, img, 1.0);
  REQUIRE(cf.grid_h == 4);
  const std::size_t heads = clip.config().heads;

  SUBCASE("open mask with one query equals the plain CLS output") {
    Tensor open({8, 8, heads, 1}, 5.0);
    Tensor b = mask_attention_decode(clip, cf.tokens_u, open, 4, 4);
    Tensor x = cf.tokens_u;
    for (std::size_t blk = 4 - clip.config().masked_blocks(); blk < 4; ++blk) x = clip.run_block(blk, x);
    Tensor cls = ops::l2_normalize_rows(clip.project(ops::slice(x, 0, 0, 1)));
    CHECK(max_abs_diff(b, cls) == 0.0);
  }
  SUBCASE("all-masked rows fall back to the open mask") {
    Tensor closed({8, 8, heads, 1}, -5.0);
    Tensor open({8, 8, heads, 1}, 5.0);
    CHECK(max_abs_diff(mask_attention_decode(clip, cf.tokens_u, closed, 4, 4),
                       mask_attention_decode(clip, cf.tokens_u, open, 4, 4)) == 0.0);
  }
  SUBCASE("identical masks give identical rows; rows are unit norm") {
    Tensor m = random_tensor(rng, {8, 8, heads, 4});
    auto md = m.mutable_data();
    for (std::size_t p = 0; p < 64 * heads; ++p) md[p * 4 + 3] = md[p * 4 + 1];
    Tensor b = mask_attention_decode(clip, cf.tokens_u, m, 4, 4);
    REQUIRE(b.shape() == Shape{4, 16});
    for (std::size_t j = 0; j < 16; ++j) CHECK(b.at(1, j) == b.at(3, j));
    for (std::size_t r = 0; r < 4; ++r) CHECK(row_norm(b, r) == doctest::Approx(1.0).epsilon(1e-9));
    double diff = 0.0;
    for (std::size_t j = 0; j < 16; ++j) diff += std::abs(b.at(0, j) - b.at(1, j));
    CHECK(diff > 0.0);
  }
  SUBCASE("query permutation permutes rows") {
    Tensor m = random_tensor(rng, {8, 8, heads, 3});
    const std::vector<std::size_t> perm{2, 0, 1};
    Tensor mp = ops::reshape(ops::index_select(ops::reshape(m, {64 * heads, 3}), 1, perm), {8, 8, heads, 3});
    Tensor b = mask_attention_decode(clip, cf.tokens_u, m, 4, 4);
    Tensor bp = mask_attention_decode(clip, cf.tokens_u, mp, 4, 4);
    CHECK(max_abs_diff(bp, ops::index_select(b, 0, perm)) == 0.0);
  }
  SUBCASE("head count must match the encoder") {
    CHECK_THROWS_AS(mask_attention_decode(clip, cf.tokens_u, Tensor({8, 8, heads + 1, 2}, 1.0), 4, 4),
                    DimensionError);
  }
}

TEST_CASE("mask pooling") {
  Rng rng(6);
  Tensor fc = random_tensor(rng, {3, 3, 4});
  SUBCASE("saturated mask pools the plain mean") {
    Tensor m({6, 6, 2}, 60.0);
    Tensor d = mask_pooling(m, fc);
    std::vector<double> mean(4, 0.0);
    for (std::size_t i = 0; i < 9; ++i)
      for (std::size_t c = 0; c < 4; ++c) mean[c] += fc.data()[i * 4 + c] / 9.0;
    const double n = std::sqrt(std::inner_product(mean.begin(), mean.end(), mean.begin(), 0.0));
    for (std::size_t q = 0; q < 2; ++q)
      for (std::size_t c = 0; c < 4; ++c) CHECK(d.at(q, c) == doctest::Approx(mean[c] / n).epsilon(1e-12));
  }
  SUBCASE("one-hot weight picks one cell") {
    Tensor m({3, 3, 1}, -60.0);
    m.mutable_data()[4] = 60.0;
    Tensor d = mask_pooling(m, fc);
    double n = 0.0;
    for (std::size_t c = 0; c < 4; ++c) n += fc.data()[16 + c] * fc.data()[16 + c];
    for (std::size_t c = 0; c < 4; ++c) CHECK(std::abs(d.at(0, c) - fc.data()[16 + c] / std::sqrt(n)) < 1e-9);
  }
  SUBCASE("random case matches a weighted-mean oracle") {
    Tensor m = random_tensor(rng, {3, 3, 5}, -3.0, 3.0);
    Tensor d = mask_pooling(m, fc);
    for (std::size_t q = 0; q < 5; ++q) {
      std::vector<double> acc(4, 0.0);
      double tw = 0.0;
      for (std::size_t i = 0; i < 9; ++i) {
        const double w = 1.0 / (1.0 + std::exp(-m.data()[i * 5 + q]));
        tw += w;
        for (std::size_t c = 0; c < 4; ++c) acc[c] += w * fc.data()[i * 4 + c];
      }
      double n = 0.0;
      for (double& v : acc) n += (v / tw) * (v / tw);
      for (std::size_t c = 0; c < 4; ++c) CHECK(std::abs(d.at(q, c) - acc[c] / tw / std::sqrt(n)) < 1e-9);
    }
  }
  SUBCASE("vanishing weights fall back to uniform") {
    Tensor low({3, 3, 1}, -700.0);
    Tensor high({3, 3, 1}, 60.0);
    CHECK(max_abs_diff(mask_pooling(low, fc), mask_pooling(high, fc)) < 1e-12);
  }
  SUBCASE("never recorded on the tape") {
    Tensor m = random_tensor(rng, {3, 3, 2});
    m.set_requires_grad(true);
    GradTape tape;
    TapeScope scope(tape);
    Tensor d = mask_pooling(m, fc);
    CHECK(tape.size() == 0);
    CHECK_FALSE(d.requires_grad());
  }
}

TEST_CASE("class logits append the no-object column") {
  Tensor e({1, 2}, std::vector<double>{1.0, 0.0});
  Tensor te({2, 2}, std::vector<double>{1.0, 0.0, 0.0, 1.0});
  Tensor v({2}, std::vector<double>{-3.0, 0.0});
  Tensor l = class_logits(e, te, &v, 10.0);
  REQUIRE(l.shape() == Shape{1, 3});
  CHECK(l.at(0, 0) == 10.0);
  CHECK(l.at(0, 1) == 0.0);
  CHECK(l.at(0, 2) == -10.0);
  CHECK(class_logits(e, te, nullptr, 1.0).shape() == Shape{1, 2});
}
