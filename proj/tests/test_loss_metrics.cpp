#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "sma/gradcheck.hpp"
#include "sma/metrics.hpp"

using namespace sma;

namespace {

// independent counting oracle: plain nested loops over rows and columns with
// one pass per accumulator, no shared arithmetic with the library
struct Counts {
  std::size_t inter = 0, np = 0, ng = 0;
};

Counts confusion_counts_oracle(const std::vector<float>& P, const std::vector<float>& G,
                               std::size_t h, std::size_t w) {
  Counts c;
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t col = 0; col < w; ++col)
      if (P[r * w + col] == 1.0f && G[r * w + col] == 1.0f) ++c.inter;
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t col = 0; col < w; ++col)
      if (P[r * w + col] == 1.0f) ++c.np;
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t col = 0; col < w; ++col)
      if (G[r * w + col] == 1.0f) ++c.ng;
  return c;
}

std::vector<float> bits_to_mask(unsigned bits, std::size_t n) {
  std::vector<float> m(n);
  for (std::size_t i = 0; i < n; ++i) m[i] = (bits >> i) & 1u ? 1.0f : 0.0f;
  return m;
}

}  // namespace

TEST_CASE("bce_dice_loss: hand-evaluated examples") {
  // perfect prediction: Dice vanishes up to eps, BCE is -log(1-1e-7)
  auto ones = Tensor64::full({4, 4}, 1.0);
  CHECK(bce_dice_loss(ones, ones).item() <= 2e-7);
  CHECK(bce_dice_loss(ones, ones).item() >= 0.0);

  // y all ones, p all 0.5 on a single 2x2 image:
  // Dice = 1 - 2*2/(4+2+eps) ~ 1/3, BCE = -log 0.5
  auto y = Tensor64::full({2, 2}, 1.0);
  auto p = Tensor64::full({2, 2}, 0.5);
  double loss = bce_dice_loss(y, p).item();
  CHECK(loss == doctest::Approx(1.0 / 3.0 + std::log(2.0)).epsilon(1e-6));
  CHECK(loss == doctest::Approx(1.0265).epsilon(1e-3));

  // batch dimension: two identical samples give the same loss as one
  auto y2 = Tensor64::full({2, 2, 2}, 1.0);
  auto p2 = Tensor64::full({2, 2, 2}, 0.5);
  CHECK(bce_dice_loss(y2, p2).item() == doctest::Approx(loss).epsilon(1e-12));

  // empty foreground: the smoothed Dice numerator is 0, so the Dice term is
  // exactly 1 however good the prediction; only the BCE term can move
  auto zeros = Tensor64::zeros({3, 3});
  CHECK(bce_dice_loss(zeros, zeros).item() == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("bce_dice_loss: validation errors") {
  auto y = Tensor64::full({2, 2}, 1.0);
  CHECK_THROWS_AS(bce_dice_loss(y, Tensor64::full({2, 3}, 0.5)), shape_error);
  CHECK_THROWS_AS(bce_dice_loss(Tensor64::full({2, 2}, 0.3), y), value_error);
  CHECK_THROWS_AS(bce_dice_loss(Tensor64::full({4}, 1.0), Tensor64::full({4}, 0.5)),
                  shape_error);
}

TEST_CASE("bce_dice_loss: gradient matches finite differences") {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    Rng rng(seed);
    std::vector<double> yd(2 * 3 * 3);
    for (auto& v : yd) v = rng.uniform(0.0, 1.0) < 0.4 ? 1.0 : 0.0;
    auto y = Tensor64::from({2, 3, 3}, yd);
    std::vector<double> pd(2 * 3 * 3);
    for (auto& v : pd) v = rng.uniform(0.1, 0.9);
    auto p = Tensor64::from({2, 3, 3}, pd);
    auto err = grad_check([&](Tensor64& q) { return bce_dice_loss(y, q); }, p);
    CHECK(err < 1e-6);
  }
}

TEST_CASE("bce_dice_loss: nonnegative and minimised at p = y") {
  // grid search over all 2x2 binary masks and all p in {0,.25,.5,.75,1}^4
  const double grid[5] = {0.0, 0.25, 0.5, 0.75, 1.0};
  for (unsigned ybits = 0; ybits < 16; ++ybits) {
    auto ym = bits_to_mask(ybits, 4);
    auto y = Tensor64::from({2, 2}, {ym[0], ym[1], ym[2], ym[3]});
    double at_truth = bce_dice_loss(y, Tensor64::from({2, 2}, {ym[0], ym[1], ym[2], ym[3]}))
                          .item();
    for (int a = 0; a < 5; ++a)
      for (int b = 0; b < 5; ++b)
        for (int c = 0; c < 5; ++c)
          for (int d = 0; d < 5; ++d) {
            auto p = Tensor64::from({2, 2}, {grid[a], grid[b], grid[c], grid[d]});
            double l = bce_dice_loss(y, p).item();
            CHECK(l >= -1e-6);
            CHECK(at_truth <= l + 1e-12);
          }
  }
}

TEST_CASE("dsc: examples and conventions") {
  std::vector<float> a = {1, 1, 0, 0}, b = {0, 0, 1, 1};
  CHECK(dsc(a, a) == 1.0);
  CHECK(dsc(a, b) == 0.0);  // disjoint nonempty

  // |P| = 4, |G| = 4, overlap 2
  std::vector<float> P = {1, 1, 1, 1, 0, 0, 0, 0};
  std::vector<float> G = {1, 1, 0, 0, 1, 1, 0, 0};
  CHECK(dsc(P, G) == 0.5);

  std::vector<float> empty(4, 0.0f);
  CHECK(dsc(empty, empty) == 1.0);  // correct prediction of absence
  CHECK(iou(empty, empty) == 1.0);

  CHECK_THROWS_AS(dsc({0.5f, 0.0f}, {0.0f, 0.0f}), value_error);
  CHECK_THROWS_AS(dsc({0.0f}, {0.0f, 0.0f}), shape_error);
}

TEST_CASE("confusion counting oracle") {
  std::vector<float> z(16, 0.0f);
  auto c0 = confusion_counts_oracle(z, z, 4, 4);
  CHECK(c0.inter == 0);
  CHECK(c0.np == 0);
  CHECK(c0.ng == 0);

  // checkerboard vs its inverse on 4x4
  std::vector<float> cb(16), inv(16);
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 4; ++c) {
      cb[r * 4 + c] = (r + c) % 2 == 0 ? 1.0f : 0.0f;
      inv[r * 4 + c] = 1.0f - cb[r * 4 + c];
    }
  auto cc = confusion_counts_oracle(cb, inv, 4, 4);
  CHECK(cc.inter == 0);
  CHECK(cc.np == 8);
  CHECK(cc.ng == 8);

  // random masks: dsc from oracle counts equals dsc(P,G)
  Rng rng(9);
  for (int rep = 0; rep < 50; ++rep) {
    std::vector<float> P(30), G(30);
    for (auto& v : P) v = rng.uniform(0.0, 1.0) < 0.5 ? 1.0f : 0.0f;
    for (auto& v : G) v = rng.uniform(0.0, 1.0) < 0.5 ? 1.0f : 0.0f;
    auto c = confusion_counts_oracle(P, G, 5, 6);
    double want = (c.np + c.ng) == 0 ? 1.0 : 2.0 * double(c.inter) / double(c.np + c.ng);
    CHECK(std::abs(dsc(P, G) - want) < 1e-15);
    double uni = double(c.np + c.ng - c.inter);
    double want_iou = uni == 0 ? 1.0 : double(c.inter) / uni;
    CHECK(std::abs(iou(P, G) - want_iou) < 1e-15);
  }
}

TEST_CASE("dsc/iou: exhaustive properties on 3x3 masks") {
  // all 2^9 x 2^9 binary pairs: bounds, symmetry, Dice-Jaccard identity
  for (unsigned pb = 0; pb < 512; ++pb) {
    auto P = bits_to_mask(pb, 9);
    for (unsigned gb = 0; gb < 512; ++gb) {
      auto G = bits_to_mask(gb, 9);
      double d = dsc(P, G), j = iou(P, G);
      REQUIRE(d >= 0.0);
      REQUIRE(d <= 1.0);
      REQUIRE(j >= 0.0);
      REQUIRE(j <= 1.0);
      REQUIRE(d == dsc(G, P));
      REQUIRE(j == iou(G, P));
      if (pb != 0 || gb != 0)  // nonempty union: d = 2j/(1+j)
        REQUIRE(std::abs(d - 2.0 * j / (1.0 + j)) < 1e-14);
    }
  }
}

TEST_CASE("miou") {
  std::vector<float> a = {1, 1, 0, 0}, b = {0, 0, 1, 1}, c = {1, 0, 1, 0};
  CHECK(miou({a, b, c}, {a, b, c}) == 1.0);  // perfect, 3 classes

  // class 1 perfect, class 2 fully wrong (disjoint nonempty)
  CHECK(miou({a, a}, {a, b}) == 0.5);

  // single class reduces to plain IoU
  CHECK(miou({c}, {a}) == iou(c, a));

  CHECK_THROWS_AS(miou({a, b}, {a}), shape_error);
  CHECK_THROWS_AS(miou({}, {}), value_error);
}

TEST_CASE("segmentation_loss: multi-class composition") {
  // one-hot target, 2 classes on 2x2
  auto target = Tensor64::from({2, 2, 2}, {1, 1, 0, 0, 0, 0, 1, 1});

  // strongly correct logits give a small loss; uniform logits a larger one
  auto good = Tensor64::from({2, 2, 2}, {9, 9, -9, -9, -9, -9, 9, 9});
  auto flat = Tensor64::zeros({2, 2, 2});
  double lg = segmentation_loss(good, target).item();
  double lf = segmentation_loss(flat, target).item();
  CHECK(lg < 0.01);
  CHECK(lf > 10 * lg);

  // hand composition: mean over classes of per-class losses on softmax probs
  auto probs = softmax(flat, 0);
  double want = 0.5 * (bce_dice_loss(select_channel(target, 0), select_channel(probs, 0)).item() +
                       bce_dice_loss(select_channel(target, 1), select_channel(probs, 1)).item());
  CHECK(lf == doctest::Approx(want).epsilon(1e-12));

  // gradient through softmax and both loss terms
  Rng rng(17);
  auto err = grad_check(
      [&](Tensor64& logits) { return segmentation_loss(logits, target); },
      Tensor64::randn({2, 2, 2}, rng));
  CHECK(err < 1e-6);

  CHECK_THROWS_AS(segmentation_loss(Tensor64::zeros({4}), Tensor64::zeros({4})), shape_error);
}

TEST_CASE("metrics CSV report") {
  std::vector<MetricRow> rows = {{"s0", "1", 0.5, 1.0 / 3.0},
                                 {"s0", "2", 1.0, 1.0},
                                 {"s0", "avg", 0.75, 2.0 / 3.0}};
  auto csv = metrics_csv(rows);
  CHECK(csv.rfind("sample_id,class_id,dsc,iou\n", 0) == 0);
  CHECK(csv.find("s0,1,0.5,0.3333333333\n") != std::string::npos);
  CHECK(csv.find("s0,avg,0.75,") != std::string::npos);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 4);
}
