#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "ovseg/errors.hpp"
#include "ovseg/image_io.hpp"
#include "ovseg/inference.hpp"
#include "test_util.hpp"

using namespace ovseg;
using ovseg::test::max_abs_diff;
using ovseg::test::random_tensor;

namespace {

Tensor unit_rows(Rng& rng, std::size_t n, std::size_t c) {
  NoGradScope ng;
  return ops::l2_normalize_rows(random_tensor(rng, {n, c}));
}

ClassVocabulary make_vocab(Rng& rng, std::vector<bool> is_train, std::size_t c) {
  ClassVocabulary v;
  for (std::size_t i = 0; i < is_train.size(); ++i) v.names.push_back("class" + std::to_string(i));
  v.is_train = std::move(is_train);
  v.te = unit_rows(rng, v.names.size(), c);
  v.validate();
  return v;
}

EmbeddingTriple random_triple(Rng& rng, std::size_t n, std::size_t c) {
  return {unit_rows(rng, n, c), unit_rows(rng, n, c), unit_rows(rng, n, c)};
}

std::vector<double> softmax_row(std::vector<double> z) {
  double m = -1e300;
  for (double v : z) m = std::max(m, v);
  double s = 0.0;
  for (double& v : z) s += (v = std::exp(v - m));
  for (double& v : z) v /= s;
  return z;
}

double dot_row(const Tensor& a, std::size_t i, const Tensor& b, std::size_t j) {
  double s = 0.0;
  for (std::size_t c = 0; c < a.dim(1); ++c) s += a.at(i, c) * b.at(j, c);
  return s;
}

}  // namespace

TEST_CASE("arithmetic balancing") {
  SUBCASE("hand case with default weights") {
    EmbeddingTriple e{Tensor({1, 2}, std::vector<double>{1, 0}), Tensor({1, 2}, std::vector<double>{0, 1}),
                      Tensor({1, 2}, std::vector<double>{1, 1})};
    BalancedEmbeddings b = balance_arithmetic(e, BalanceWeights{0.2, 0.7, 0.0, BalanceMode::arithmetic});
    CHECK(b.train.at(0, 0) == doctest::Approx(0.3).epsilon(1e-15));
    CHECK(b.train.at(0, 1) == doctest::Approx(0.8).epsilon(1e-15));
    CHECK(b.novel.at(0, 0) == doctest::Approx(0.3).epsilon(1e-15));
    CHECK(b.novel.at(0, 1) == doctest::Approx(1.0).epsilon(1e-15));
  }
  Rng rng(1);
  EmbeddingTriple e = random_triple(rng, 4, 6);
  SUBCASE("vertex returns A exactly") {
    BalancedEmbeddings b = balance_arithmetic(e, BalanceWeights{1.0, 0.0, 1.0, BalanceMode::arithmetic});
    CHECK(max_abs_diff(b.train, e.a) == 0.0);
    CHECK(max_abs_diff(b.novel, e.a) == 0.0);
  }
  SUBCASE("random case matches a loop") {
    const BalanceWeights w{0.3, 0.25, 0.1, BalanceMode::arithmetic};
    BalancedEmbeddings b = balance_arithmetic(e, w);
    for (std::size_t i = 0; i < 24; ++i) {
      CHECK(std::abs(b.train[i] - (0.3 * e.a[i] + 0.25 * e.b[i] + 0.45 * e.d[i])) < 1e-12);
      CHECK(std::abs(b.novel[i] - (0.1 * e.a[i] + 0.25 * e.b[i] + 0.65 * e.d[i])) < 1e-12);
    }
  }
  SUBCASE("invalid weights") {
    CHECK_THROWS_AS(balance_arithmetic(e, BalanceWeights{0.5, 0.6, 0.0, BalanceMode::arithmetic}), ConfigError);
    CHECK_THROWS_AS(balance_arithmetic(e, BalanceWeights{-0.1, 0.6, 0.0, BalanceMode::arithmetic}), ConfigError);
    CHECK_THROWS_AS(balance_arithmetic(e, BalanceWeights{0.1, 0.6, 0.5, BalanceMode::arithmetic}), ConfigError);
  }
}

TEST_CASE("geometric balancing") {
  Rng rng(2);
  ClassVocabulary vocab = make_vocab(rng, {true, false, true}, 5);
  EmbeddingTriple e = random_triple(rng, 2, 5);

  SUBCASE("N=2, K=3, f=2 matches a scalar oracle") {
    const BalanceWeights w{0.2, 0.7, 0.1, BalanceMode::geometric};
    const double t = 0.5;
    BalancedProbabilities p = balance_geometric(e, vocab, w, t);
    REQUIRE(p.train.shape() == Shape{2, 2});
    REQUIRE(p.novel.shape() == Shape{2, 1});
    const std::size_t tr[2] = {0, 2};
    for (std::size_t q = 0; q < 2; ++q) {
      std::vector<double> za, zb, zd;
      for (std::size_t c = 0; c < 3; ++c) {
        za.push_back(dot_row(e.a, q, vocab.te, c) / t);
        zb.push_back(dot_row(e.b, q, vocab.te, c) / t);
        zd.push_back(dot_row(e.d, q, vocab.te, c) / t);
      }
      const auto pa = softmax_row(za), pb = softmax_row(zb), pd = softmax_row(zd);
      auto oracle = [&](std::size_t c, double wa, double wb) {
        return std::pow(pa[c], wa) * std::pow(pb[c], wb) * std::pow(pd[c], 1.0 - wa - wb);
      };
      for (std::size_t j = 0; j < 2; ++j) CHECK(std::abs(p.train.at(q, j) - oracle(tr[j], 0.2, 0.7)) < 1e-9);
      CHECK(std::abs(p.novel.at(q, 0) - oracle(1, 0.1, 0.7)) < 1e-9);
    }
  }
  SUBCASE("beta = 1 reproduces B alone") {
    const BalanceWeights w{0.0, 1.0, 0.0, BalanceMode::geometric};
    BalancedProbabilities p = balance_geometric(e, vocab, w);
    BalancedProbabilities only_b = balance_geometric({e.b, e.b, e.b}, vocab, w);
    CHECK(max_abs_diff(p.train, only_b.train) == 0.0);
    Tensor pc = classify(p, vocab), bc = classify(only_b, vocab);
    CHECK(max_abs_diff(pc, bc) == 0.0);
  }
  SUBCASE("identical streams agree with arithmetic on argmax") {
    EmbeddingTriple same{e.a, e.a, e.a};
    for (const BalanceWeights& w : {BalanceWeights{0.2, 0.7, 0.0, BalanceMode::geometric},
                                    BalanceWeights{0.5, 0.1, 0.3, BalanceMode::geometric}}) {
      Tensor g = classify(balance_geometric(same, vocab, w), vocab);
      Tensor a = classify(balance_arithmetic(same, w), vocab);
      BalancedProbabilities ref = balance_geometric(same, vocab, BalanceWeights{1.0, 0.0, 1.0});
      CHECK(max_abs_diff(balance_geometric(same, vocab, w).train, ref.train) < 1e-12);
      for (std::size_t q = 0; q < 2; ++q) {
        // Within each subset the orderings agree.
        CHECK((g.at(q, 0) > g.at(q, 2)) == (a.at(q, 0) > a.at(q, 2)));
      }
    }
  }
  CHECK_THROWS_AS(balance_geometric(e, vocab, BalanceWeights{}, 0.0), ConfigError);
}

TEST_CASE("classify scatters split columns back into vocabulary order") {
  Rng rng(3);
  EmbeddingTriple e = random_triple(rng, 3, 4);
  SUBCASE("all train") {
    ClassVocabulary v = make_vocab(rng, {true, true, true}, 4);
    BalancedEmbeddings b{e.a, e.b};
    CHECK(max_abs_diff(classify(b, v), ops::matmul_nt(e.a, v.te)) == 0.0);
  }
  SUBCASE("all new") {
    ClassVocabulary v = make_vocab(rng, {false, false}, 4);
    BalancedEmbeddings b{e.a, e.b};
    CHECK(max_abs_diff(classify(b, v), ops::matmul_nt(e.b, v.te)) == 0.0);
  }
  SUBCASE("mixed split") {
    ClassVocabulary v = make_vocab(rng, {false, true, false, true, true}, 4);
    BalancedEmbeddings b{e.a, e.b};
    Tensor p = classify(b, v);
    for (std::size_t q = 0; q < 3; ++q)
      for (std::size_t c = 0; c < 5; ++c)
        CHECK(std::abs(p.at(q, c) - dot_row(v.is_train[c] ? e.a : e.b, q, v.te, c)) < 1e-14);
  }
}

TEST_CASE("segment") {
  SUBCASE("one query one class") {
    SegmentationResult r = segment(Tensor({2, 2, 1}, 3.0), Tensor({1, 1}, 0.0), 8, 8);
    for (auto l : r.label_map) CHECK(l == 0);
  }
  SUBCASE("two disjoint hard masks") {
    Tensor m({2, 2, 2}, -20.0);
    m.mutable_data()[0 * 2 + 0] = 20.0;  // (0,0) query 0
    m.mutable_data()[2 * 2 + 0] = 20.0;  // (1,0) query 0
    m.mutable_data()[1 * 2 + 1] = 20.0;  // (0,1) query 1
    m.mutable_data()[3 * 2 + 1] = 20.0;  // (1,1) query 1
    Tensor p({2, 3}, std::vector<double>{0, 0, 10, 10, 0, 0});
    SegmentationResult r = segment(m, p, 2, 4);
    const std::vector<std::uint16_t> want{2, 2, 0, 0, 2, 2, 0, 0};
    CHECK(r.label_map == want);
  }
  SUBCASE("random case matches a triple loop") {
    Rng rng(4);
    Tensor m = random_tensor(rng, {3, 4, 5}, -3, 3);
    Tensor p = random_tensor(rng, {5, 6}, -2, 2);
    SegmentationResult r = segment(m, p, 3, 4, 0.5);
    double worst = 0.0, max_s = 0.0;
    for (std::size_t i = 0; i < 12; ++i)
      for (std::size_t c = 0; c < 6; ++c) {
        double s = 0.0;
        for (std::size_t q = 0; q < 5; ++q) {
          std::vector<double> z;
          for (std::size_t cc = 0; cc < 6; ++cc) z.push_back(p.at(q, cc) / 0.5);
          s += softmax_row(z)[c] / (1.0 + std::exp(-m.data()[i * 5 + q]));
        }
        worst = std::max(worst, std::abs(r.scores.data()[i * 6 + c] - s));
        max_s = std::max(max_s, r.scores.data()[i * 6 + c]);
        CHECK(r.scores.data()[i * 6 + c] >= 0.0);
      }
    CHECK(worst < 1e-9);
    CHECK(max_s <= 5.0);
    for (std::size_t i = 0; i < 12; ++i) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < 6; ++c)
        if (r.scores.data()[i * 6 + c] > r.scores.data()[i * 6 + best]) best = c;
      CHECK(r.label_map[i] == best);
    }
  }
  SUBCASE("permuting classes permutes the score axis") {
    Rng rng(5);
    Tensor m = random_tensor(rng, {2, 3, 4}, -3, 3);
    Tensor p = random_tensor(rng, {4, 3}, -2, 2);
    const std::vector<std::size_t> perm{2, 0, 1};
    SegmentationResult a = segment(m, p, 4, 6), b = segment(m, ops::index_select(p, 1, perm), 4, 6);
    for (std::size_t i = 0; i < 6; ++i)
      for (std::size_t c = 0; c < 3; ++c) CHECK(std::abs(b.scores.data()[i * 3 + c] - a.scores.data()[i * 3 + perm[c]]) < 1e-14);
    for (std::size_t i = 0; i < 24; ++i) CHECK(perm[b.label_map[i]] == a.label_map[i]);
  }
}

TEST_CASE("miou") {
  Rng rng(6);
  ClassVocabulary v = make_vocab(rng, {true, true, false, false}, 3);
  SUBCASE("perfect prediction") {
    std::vector<std::uint16_t> g{0, 1, 2, 3, 0, 1, 2, 4};
    MiouResult r = miou(g == g ? std::vector<std::uint16_t>{0, 1, 2, 3, 0, 1, 2, 0} : g, g, v);
    CHECK(r.all == 1.0);
    CHECK(r.train == 1.0);
    CHECK(r.novel == 1.0);
  }
  SUBCASE("disjoint class gets zero; absent classes are skipped") {
    std::vector<std::uint16_t> g{0, 0, 1, 1}, p{1, 1, 1, 1};
    MiouResult r = miou(p, g, v);
    CHECK(r.per_class[0] == 0.0);
    CHECK(r.per_class[1] == 0.5);
    CHECK(std::isnan(r.per_class[2]));
    CHECK(r.all == 0.25);
    CHECK(std::isnan(r.novel));
  }
  SUBCASE("random 8x8 maps match a counting oracle") {
    for (int t = 0; t < 10; ++t) {
      std::vector<std::uint16_t> g(64), p(64);
      for (auto& x : g) x = static_cast<std::uint16_t>(rng.below(5));  // includes ignore
      for (auto& x : p) x = static_cast<std::uint16_t>(rng.below(4));
      MiouResult r = miou(p, g, v);
      double s[3] = {0, 0, 0};
      int n[3] = {0, 0, 0};
      for (std::uint16_t c = 0; c < 4; ++c) {
        int inter = 0, uni = 0, present = 0;
        for (std::size_t i = 0; i < 64; ++i) {
          if (g[i] == 4) continue;
          present += g[i] == c;
          inter += g[i] == c && p[i] == c;
          uni += g[i] == c || p[i] == c;
        }
        if (!present) continue;
        const double iou = static_cast<double>(inter) / uni;
        CHECK(r.per_class[c] == iou);
        s[0] += iou, ++n[0];
        s[c < 2 ? 1 : 2] += iou, ++n[c < 2 ? 1 : 2];
      }
      CHECK(std::abs(r.all - s[0] / n[0]) < 1e-15);
      if (n[1]) CHECK(std::abs(r.train - s[1] / n[1]) < 1e-15);
      if (n[2]) CHECK(std::abs(r.novel - s[2] / n[2]) < 1e-15);
    }
  }
  SUBCASE("relabeling classes leaves the mean unchanged") {
    ClassVocabulary all = make_vocab(rng, {true, true, true, true}, 3);
    std::vector<std::uint16_t> g(64), p(64);
    for (auto& x : g) x = static_cast<std::uint16_t>(rng.below(4));
    for (auto& x : p) x = static_cast<std::uint16_t>(rng.below(4));
    const std::uint16_t perm[4] = {3, 1, 0, 2};
    std::vector<std::uint16_t> g2(64), p2(64);
    for (std::size_t i = 0; i < 64; ++i) g2[i] = perm[g[i]], p2[i] = perm[p[i]];
    CHECK(std::abs(miou(p, g, all).all - miou(p2, g2, all).all) < 1e-15);
  }
  SUBCASE("accumulation is associative") {
    std::vector<std::uint16_t> g1{0, 1, 1, 2}, p1{0, 1, 2, 2}, g2{3, 3, 0, 1}, p2{3, 0, 0, 1};
    IouAccumulator a(4), b(4), both(4);
    a.add(p1, g1);
    b.add(p2, g2);
    both.add(p1, g1);
    both.add(p2, g2);
    a.merge(b);
    CHECK(a.intersections() == both.intersections());
    CHECK(a.unions() == both.unions());
  }
  CHECK_THROWS_AS(miou({0, 1}, {0}, v), DimensionError);
  CHECK_THROWS_AS(miou({0, 5}, {0, 1}, v), VocabularyError);
}

TEST_CASE("metrics csv layout") {
  Rng rng(7);
  ClassVocabulary v = make_vocab(rng, {true, false, true}, 3);
  MiouResult r;
  r.per_class = {0.5, std::nan(""), 0.25};
  r.all = 0.375;
  r.train = 0.375;
  r.novel = std::nan("");
  std::ostringstream out;
  write_metrics_csv(out, v, r);
  CHECK(out.str() ==
        "class,iou,split\n"
        "class0,0.500000,train\n"
        "class1,,new\n"
        "class2,0.250000,train\n"
        "mIoU,0.375000,all\n"
        "mIoU,0.375000,train\n"
        "mIoU,,new\n");
}

TEST_CASE("vocabulary files") {
  const auto dir = std::filesystem::temp_directory_path() / "ovseg_test_vocab";
  std::filesystem::create_directories(dir);
  TextEmbedder text(8, 3);
  {
    std::ofstream(dir / "v.txt") << "*sky\nboat\n*grass\n\n";
    std::ofstream(dir / "dup.txt") << "*sky\nsky\n";
  }
  ClassVocabulary v = ClassVocabulary::load(dir / "v.txt", text, PromptStrategy::single_template);
  CHECK(v.names == std::vector<std::string>{"sky", "boat", "grass"});
  CHECK(v.is_train == std::vector<bool>{true, false, true});
  CHECK(v.train_indices() == std::vector<std::size_t>{0, 2});
  CHECK(v.new_indices() == std::vector<std::size_t>{1});
  CHECK_THROWS_AS(ClassVocabulary::load(dir / "dup.txt", text, PromptStrategy::single_template), VocabularyError);
  CHECK_THROWS_AS(ClassVocabulary::load(dir / "none.txt", text, PromptStrategy::single_template), FormatError);
}

TEST_CASE("pnm round trip") {
  const auto dir = std::filesystem::temp_directory_path() / "ovseg_test_pnm";
  std::filesystem::create_directories(dir);
  Image8 g{3, 2, 1, {0, 1, 2, 3, 4, 255}};
  write_pgm(dir / "g.pgm", g);
  Image8 back = read_pnm(dir / "g.pgm");
  CHECK(back.width == 3);
  CHECK(back.height == 2);
  CHECK(back.channels == 1);
  CHECK(back.pixels == g.pixels);
  Image8 c{1, 2, 3, {10, 20, 30, 40, 50, 60}};
  write_ppm(dir / "c.ppm", c);
  CHECK(read_pnm(dir / "c.ppm").pixels == c.pixels);
  {
    std::ofstream(dir / "comment.pgm", std::ios::binary) << "P5\n# note\n2 1\n255\n"
                                                         << std::string("\x07\x09", 2);
    std::ofstream(dir / "trunc.pgm", std::ios::binary) << "P5\n4 4\n255\nab";
    std::ofstream(dir / "ascii.pgm", std::ios::binary) << "P2\n1 1\n255\n7\n";
  }
  CHECK(read_pnm(dir / "comment.pgm").pixels == std::vector<std::uint8_t>{7, 9});
  CHECK_THROWS_AS(read_pnm(dir / "trunc.pgm"), FormatError);
  CHECK_THROWS_AS(read_pnm(dir / "ascii.pgm"), FormatError);
  CHECK_THROWS_AS(write_ppm(dir / "bad.ppm", g), FormatError);
}
