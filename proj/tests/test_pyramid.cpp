#include <cmath>
#include <set>
#include <sstream>
#include <vector>

#include "doctest.h"
#include "oracles.hpp"
#include "test_util.hpp"
#include "tfd/pyramid.hpp"

using tfd::AnchorConfig;
using tfd::Box;
using tfd::FpnParams;
using tfd::GradTape;
using tfd::HeadParams;
using tfd::Pyramid;
using tfd::Rng;
using tfd::Shape;
using tfd::Tensor;

TEST_CASE("pyramid levels halve from p3 down to a single cell") {
  Rng rng(41);
  FpnParams fpn = tfd::init_fpn(6, 8, 8, 8, rng);
  Tensor b3 = random_tensor(rng, Shape{1, 16, 16, 6});
  Tensor b4 = random_tensor(rng, Shape{1, 8, 8, 8});
  Tensor b5 = random_tensor(rng, Shape{1, 4, 4, 8});
  Pyramid p = tfd::build_pyramid(b3, b4, b5, fpn);
  CHECK(p.p3.shape() == Shape{1, 16, 16, 8});
  CHECK(p.p4.shape() == Shape{1, 8, 8, 8});
  CHECK(p.p5.shape() == Shape{1, 4, 4, 8});
  CHECK(p.p6.shape() == Shape{1, 2, 2, 8});
  CHECK(p.p7.shape() == Shape{1, 1, 1, 8});
}

TEST_CASE("pyramid rejects inputs that break the halving chain") {
  Rng rng(42);
  FpnParams fpn = tfd::init_fpn(6, 8, 8, 8, rng);
  Tensor b3 = random_tensor(rng, Shape{1, 16, 16, 6});
  Tensor b4 = random_tensor(rng, Shape{1, 8, 8, 8});
  Tensor b5 = random_tensor(rng, Shape{1, 4, 4, 8});

  Tensor bad4 = random_tensor(rng, Shape{1, 7, 8, 8});
  CHECK_THROWS_AS(tfd::build_pyramid(b3, bad4, b5, fpn), tfd::ShapeError);
  Tensor bad3 = random_tensor(rng, Shape{1, 12, 12, 6});  // 12 % 16 != 0
  CHECK_THROWS_AS(tfd::build_pyramid(bad3, random_tensor(rng, Shape{1, 6, 6, 8}),
                                     random_tensor(rng, Shape{1, 3, 3, 8}), fpn),
                  tfd::ShapeError);
}

TEST_CASE("zero taps give a zero pyramid (fresh biases are zero)") {
  Rng rng(43);
  FpnParams fpn = tfd::init_fpn(4, 4, 4, 6, rng);
  Pyramid p = tfd::build_pyramid(Tensor::zeros(Shape{1, 16, 16, 4}),
                                 Tensor::zeros(Shape{1, 8, 8, 4}),
                                 Tensor::zeros(Shape{1, 4, 4, 4}), fpn);
  for (const Tensor* t : p.levels()) {
    for (double v : t->values()) CHECK(v == 0.0);
  }
}

TEST_CASE("top-down path feeds coarse information into fine levels") {
  Rng rng(44);
  FpnParams fpn = tfd::init_fpn(4, 4, 4, 6, rng);
  Tensor b3 = random_tensor(rng, Shape{1, 16, 16, 4});
  Tensor b4 = random_tensor(rng, Shape{1, 8, 8, 4});
  Tensor b5 = random_tensor(rng, Shape{1, 4, 4, 4});
  Pyramid before = tfd::build_pyramid(b3, b4, b5, fpn);
  Tensor b5_shift = b5.clone();
  for (auto& v : b5_shift.values()) v += 1.0;
  Pyramid after = tfd::build_pyramid(b3, b4, b5_shift, fpn);
  CHECK(oracle::max_abs_diff(before.p3, after.p3) > 1e-9);
  CHECK(oracle::max_abs_diff(before.p4, after.p4) > 1e-9);
}

TEST_CASE("head outputs have anchor-major channel counts and params are shared") {
  Rng rng(45);
  HeadParams heads = tfd::init_heads(8, 2, 3, 9, 0.01, rng);
  Tensor fine = random_tensor(rng, Shape{1, 8, 8, 8});
  Tensor coarse = random_tensor(rng, Shape{1, 2, 2, 8});
  tfd::HeadOutput a = tfd::run_head(fine, heads);
  tfd::HeadOutput b = tfd::run_head(coarse, heads);
  CHECK(a.cls.shape() == Shape{1, 8, 8, 27});
  CHECK(a.box.shape() == Shape{1, 8, 8, 36});
  CHECK(b.cls.shape() == Shape{1, 2, 2, 27});

  // same parameters drive every level: on constant inputs, cells whose full
  // receptive field (radius 3 here) stays inside both maps must agree exactly
  Tensor flat = Tensor::full(Shape{1, 8, 8, 8}, 0.3);
  Tensor flat2 = Tensor::full(Shape{1, 10, 10, 8}, 0.3);
  tfd::HeadOutput fa = tfd::run_head(flat, heads);
  tfd::HeadOutput fb = tfd::run_head(flat2, heads);
  CHECK(fa.cls.at(0, 4, 4, 5) == doctest::Approx(fb.cls.at(0, 4, 4, 5)).epsilon(1e-12));
  CHECK(fa.box.at(0, 4, 4, 7) == doctest::Approx(fb.box.at(0, 4, 4, 7)).epsilon(1e-12));
}

TEST_CASE("fresh heads predict the background prior probability") {
  Rng rng(46);
  const double pi = 0.01;
  HeadParams heads = tfd::init_heads(8, 1, 2, 9, pi, rng);
  Tensor level = Tensor::zeros(Shape{1, 4, 4, 8});
  tfd::HeadOutput out = tfd::run_head(level, heads);
  // zero input + zero trunk bias -> logits equal the prior bias exactly
  const double want = -std::log((1.0 - pi) / pi);
  for (double v : out.cls.values()) CHECK(v == doctest::Approx(want).epsilon(1e-9));
  const double p = 1.0 / (1.0 + std::exp(-out.cls.at(0, 0, 0, 0)));
  CHECK(p == doctest::Approx(pi).epsilon(1e-9));
}

TEST_CASE("focal loss hand values") {
  CHECK(tfd::focal_loss_term(1.0, 2.0, 0.25) == 0.0);
  // gamma 0, alpha 1 reduces to plain cross-entropy
  CHECK(tfd::focal_loss_term(0.7, 0.0, 1.0) == doctest::Approx(-std::log(0.7)).epsilon(1e-12));
  CHECK(tfd::focal_loss_term(0.9, 2.0, 0.25) ==
        doctest::Approx(0.25 * 0.01 * -std::log(0.9)).epsilon(1e-9));

  // well-classified examples are damped relative to cross-entropy
  for (double p : {0.6, 0.9, 0.99}) {
    CHECK(tfd::focal_loss_term(p, 2.0, 0.25) < 0.25 * -std::log(p));
  }
  // monotone decreasing in p'
  double prev = tfd::focal_loss_term(0.05, 2.0, 0.25);
  for (double p = 0.1; p < 1.0; p += 0.05) {
    const double cur = tfd::focal_loss_term(p, 2.0, 0.25);
    CHECK(cur < prev);
    prev = cur;
  }
}

TEST_CASE("alpha weights follow inverse class frequency") {
  auto a = tfd::alpha_from_frequency({90, 10});
  CHECK(a[0] == doctest::Approx(0.05).epsilon(1e-12));
  CHECK(a[1] == doctest::Approx(0.45).epsilon(1e-12));

  auto b = tfd::alpha_from_frequency({50, 50, 50});
  for (double v : b) CHECK(v == doctest::Approx(0.25).epsilon(1e-12));

  auto c = tfd::alpha_from_frequency({123});
  CHECK(c[0] == doctest::Approx(0.25).epsilon(1e-12));

  CHECK_THROWS(tfd::alpha_from_frequency({10, 0}));
  CHECK_THROWS(tfd::alpha_from_frequency({}));
  // extreme imbalance would push the rare class's alpha past 1
  CHECK_THROWS(tfd::alpha_from_frequency({1, 1000000, 1000000, 1000000, 1000000}));
}

TEST_CASE("anchor grids are scale-major, centered on stride midpoints") {
  AnchorConfig cfg;
  auto anchors = tfd::make_anchors(cfg, 0, 2, 3);  // level 0 => stride 8
  REQUIRE(anchors.size() == 2 * 3 * 9);

  // first cell, first anchor: scale 1.0, ratio 0.5 (wide), size 16
  const Box& a0 = anchors[0];
  CHECK(a0.cx() == doctest::Approx(4.0).epsilon(1e-12));
  CHECK(a0.cy() == doctest::Approx(4.0).epsilon(1e-12));
  CHECK(a0.width() == doctest::Approx(16.0 / std::sqrt(0.5)).epsilon(1e-12));
  CHECK(a0.height() == doctest::Approx(16.0 * std::sqrt(0.5)).epsilon(1e-12));

  // anchor index 1 keeps the scale and moves to ratio 1.0
  CHECK(anchors[1].width() == doctest::Approx(16.0).epsilon(1e-12));
  CHECK(anchors[1].height() == doctest::Approx(16.0).epsilon(1e-12));
  // anchor index 3 moves to the next scale, back to ratio 0.5
  CHECK(anchors[3].width() ==
        doctest::Approx(16.0 * std::pow(2.0, -1.0 / 3.0) / std::sqrt(0.5)).epsilon(1e-12));

  // scan order is (y, x, anchor): entry 9 is cell (0,1)
  CHECK(anchors[9].cx() == doctest::Approx(12.0).epsilon(1e-12));
  CHECK(anchors[9].cy() == doctest::Approx(4.0).epsilon(1e-12));
  // entry 3*9 starts row y=1
  CHECK(anchors[27].cy() == doctest::Approx(12.0).epsilon(1e-12));

  // every anchor preserves its area across ratios at fixed scale
  for (int s = 0; s < 3; ++s) {
    const double area0 = anchors[static_cast<std::size_t>(s * 3)].area();
    for (int r = 1; r < 3; ++r) {
      CHECK(anchors[static_cast<std::size_t>(s * 3 + r)].area() ==
            doctest::Approx(area0).epsilon(1e-9));
    }
  }
}

TEST_CASE("anchor dump lists level, center, and size per line") {
  AnchorConfig cfg;
  std::ostringstream os;
  tfd::dump_anchors(os, cfg, {{2, 2}, {1, 1}, {1, 1}, {1, 1}, {1, 1}});
  std::istringstream is(os.str());
  std::string line;
  int count = 0, level, first_level = -1;
  double cx, cy, w, h;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    REQUIRE(static_cast<bool>(ls >> level >> cx >> cy >> w >> h));
    if (first_level < 0) first_level = level;
    ++count;
  }
  CHECK(count == (4 + 1 + 1 + 1 + 1) * 9);
  CHECK(first_level == 3);
}

TEST_CASE("box encoding round-trips through decoding") {
  Rng rng(47);
  for (int trial = 0; trial < 100; ++trial) {
    Box anchor = random_box(rng, 100.0, 30.0);
    Box target = random_box(rng, 100.0, 30.0);
    Box back = tfd::decode_box(anchor, tfd::encode_box(anchor, target));
    CHECK(std::abs(back.x1 - target.x1) < 1e-9);
    CHECK(std::abs(back.y1 - target.y1) < 1e-9);
    CHECK(std::abs(back.x2 - target.x2) < 1e-9);
    CHECK(std::abs(back.y2 - target.y2) < 1e-9);
  }
  // identity: anchor onto itself encodes to zeros
  Box a{10, 20, 30, 50};
  auto d = tfd::encode_box(a, a);
  for (double v : d) CHECK(std::abs(v) < 1e-12);

  // decode clamps absurd log-size deltas instead of overflowing
  Box blown = tfd::decode_box(a, {0.0, 0.0, 100.0, 100.0});
  CHECK(std::isfinite(blown.x2));
  CHECK(blown.width() <= (a.width() * std::exp(8.0) + 1e-6));
}

TEST_CASE("anchor matching hand case") {
  std::vector<Box> anchors = {
      {0, 0, 10, 10},     // exactly gt 0
      {100, 100, 110, 110},  // far from everything
      {1, 1, 11, 11},     // strong overlap with gt 0
      {40, 40, 44, 44},   // middling overlap with gt 1
      {39, 39, 50, 50},   // strong overlap with gt 1
  };
  std::vector<Box> gts = {{0, 0, 10, 10}, {40, 40, 48, 48}};
  auto m = tfd::match_anchors(anchors, gts, 0.5, 0.4);
  CHECK(m[0] == 0);
  CHECK(m[1] == tfd::kAnchorNegative);
  CHECK(m[2] == 0);
  CHECK(m[4] == 1);
  CHECK(m == oracle::match_anchors_ref(anchors, gts, 0.5, 0.4));
}

TEST_CASE("every gt claims its best anchor even below the fg threshold") {
  // the lone anchor overlaps gt poorly, but it is still the best one
  std::vector<Box> anchors = {{0, 0, 8, 8}, {50, 50, 58, 58}};
  std::vector<Box> gts = {{4, 4, 12, 12}};
  auto m = tfd::match_anchors(anchors, gts, 0.5, 0.4);
  CHECK(m[0] == 0);
  CHECK(m[1] == tfd::kAnchorNegative);
}

TEST_CASE("empty gt list marks every anchor negative") {
  std::vector<Box> anchors = {{0, 0, 8, 8}, {5, 5, 20, 20}};
  auto m = tfd::match_anchors(anchors, {}, 0.5, 0.4);
  for (int v : m) CHECK(v == tfd::kAnchorNegative);
}

TEST_CASE("anchor matching agrees with the exhaustive oracle on random scenes") {
  Rng rng(48);
  for (int trial = 0; trial < 120; ++trial) {
    std::vector<Box> anchors, gts;
    const int na = rng.uniform_int(1, 25);
    const int ng = rng.uniform_int(0, 5);
    for (int i = 0; i < na; ++i) anchors.push_back(random_box(rng, 60.0, 25.0));
    for (int i = 0; i < ng; ++i) gts.push_back(random_box(rng, 60.0, 25.0));
    CHECK(tfd::match_anchors(anchors, gts, 0.5, 0.4) ==
          oracle::match_anchors_ref(anchors, gts, 0.5, 0.4));
  }
}

TEST_CASE("smooth l1 hand values and gradient") {
  // pred == target -> zero loss
  Tensor pred = Tensor::from(Shape{1, 1, 1, 4}, {1.0, 2.0, 3.0, 4.0});
  std::vector<double> targets = {1.0, 2.0, 3.0, 4.0};
  std::vector<unsigned char> mask = {1, 1, 1, 1};
  CHECK(tfd::smooth_l1_loss(pred, targets, mask, 1.0 / 9.0, 1.0).item() == 0.0);

  // |d| = 1 with beta = 1/9 sits on the linear branch: 1 - beta/2
  Tensor pred2 = Tensor::from(Shape{1, 1, 1, 1}, {2.0});
  CHECK(tfd::smooth_l1_loss(pred2, {1.0}, {1}, 1.0 / 9.0, 1.0).item() ==
        doctest::Approx(1.0 - 1.0 / 18.0).epsilon(1e-12));

  // |d| < beta sits on the quadratic branch: d^2 / (2 beta)
  Tensor pred3 = Tensor::from(Shape{1, 1, 1, 1}, {0.05});
  CHECK(tfd::smooth_l1_loss(pred3, {0.0}, {1}, 1.0 / 9.0, 1.0).item() ==
        doctest::Approx(0.5 * 0.05 * 0.05 * 9.0).epsilon(1e-12));

  // masked-out coordinates contribute nothing
  Tensor pred4 = Tensor::from(Shape{1, 1, 1, 2}, {5.0, 1.0});
  CHECK(tfd::smooth_l1_loss(pred4, {0.0, 1.0}, {0, 1}, 1.0 / 9.0, 1.0).item() == 0.0);

  Rng rng(49);
  Tensor logits = random_tensor(rng, Shape{1, 2, 2, 4}, -2.0, 2.0);
  std::vector<double> t(16);
  std::vector<unsigned char> mk(16);
  for (std::size_t i = 0; i < t.size(); ++i) {
    t[i] = rng.uniform(-2.0, 2.0);
    mk[i] = rng.uniform() < 0.7 ? 1 : 0;
  }
  auto f = [&](const Tensor& x) { return tfd::smooth_l1_loss(x, t, mk, 1.0 / 9.0, 0.25); };
  CHECK(tfd::grad_check(f, logits, 1e-6) < 1e-6);
}

TEST_CASE("sigmoid focal loss value and gradient against finite differences") {
  Rng rng(50);
  const int C = 3;
  Tensor logits = random_tensor(rng, Shape{1, 2, 2, 2 * C}, -3.0, 3.0);
  std::vector<signed char> targets(static_cast<std::size_t>(logits.numel()));
  for (auto& v : targets) {
    const double u = rng.uniform();
    v = u < 0.2 ? 1 : (u < 0.9 ? 0 : -1);
  }
  std::vector<double> alphas = {0.2, 0.25, 0.3};

  // value cross-check against the scalar helper
  Tensor loss = tfd::sigmoid_focal_loss(logits, targets, alphas, C, 2.0, 0.5);
  double want = 0.0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (targets[i] < 0) continue;
    const double p = 1.0 / (1.0 + std::exp(-logits.values()[i]));
    const int cls = static_cast<int>(i) % C;
    const double p_prime = targets[i] == 1 ? p : 1.0 - p;
    const double alpha_t = targets[i] == 1 ? alphas[static_cast<std::size_t>(cls)]
                                           : 1.0 - alphas[static_cast<std::size_t>(cls)];
    want += tfd::focal_loss_term(p_prime, 2.0, alpha_t);
  }
  CHECK(loss.item() == doctest::Approx(0.5 * want).epsilon(1e-9));

  auto f = [&](const Tensor& x) { return tfd::sigmoid_focal_loss(x, targets, alphas, C, 2.0, 0.5); };
  CHECK(tfd::grad_check(f, logits, 1e-6) < 1e-6);

  // gamma = 0 case exercises the log-free branch of the derivative
  auto g = [&](const Tensor& x) { return tfd::sigmoid_focal_loss(x, targets, alphas, C, 0.0, 1.0); };
  CHECK(tfd::grad_check(g, logits, 1e-6) < 1e-6);
}

TEST_CASE("build_targets flattens levels and counts positives once") {
  AnchorConfig cfg;
  std::vector<std::vector<Box>> levels;
  levels.push_back(tfd::make_anchors(cfg, 0, 4, 4));
  levels.push_back(tfd::make_anchors(cfg, 1, 2, 2));

  // one gt the size of a stride-8 anchor, centered on cell (1,1)
  std::vector<Box> gts = {{4, 4, 20, 20}};
  std::vector<int> cls = {1};
  tfd::Targets t = tfd::build_targets(levels, gts, cls, 3, 0.5, 0.4);
  REQUIRE(t.levels.size() == 2);
  CHECK(t.num_positive >= 1);

  int pos_logits = 0, ignored = 0;
  for (const auto& lt : t.levels) {
    for (signed char v : lt.cls) {
      if (v == 1) ++pos_logits;
      if (v == -1) ++ignored;
    }
  }
  // each positive anchor raises exactly one class logit
  CHECK(pos_logits == t.num_positive);

  // per-anchor box targets appear iff the anchor is positive
  int masked = 0;
  for (const auto& lt : t.levels) {
    for (unsigned char v : lt.box_mask) masked += v;
  }
  CHECK(masked == 4 * t.num_positive);

  // positive anchors decode back to the gt box
  const auto& lt = t.levels[0];
  const auto& anchors = levels[0];
  for (std::size_t a = 0; a < anchors.size(); ++a) {
    if (!lt.box_mask[a * 4]) continue;
    std::array<double, 4> d = {lt.box[a * 4 + 0], lt.box[a * 4 + 1], lt.box[a * 4 + 2],
                               lt.box[a * 4 + 3]};
    Box back = tfd::decode_box(anchors[a], d);
    CHECK(std::abs(back.x1 - gts[0].x1) < 1e-9);
    CHECK(std::abs(back.y2 - gts[0].y2) < 1e-9);
    // the raised logit is the labeled class
    CHECK(lt.cls[a * 3 + 1] == 1);
    CHECK(lt.cls[a * 3 + 0] == 0);
  }

  // no gt at all: everything negative, nothing masked
  tfd::Targets empty = tfd::build_targets(levels, {}, {}, 3, 0.5, 0.4);
  CHECK(empty.num_positive == 0);
  for (const auto& l : empty.levels) {
    for (signed char v : l.cls) CHECK(v == 0);
    for (unsigned char v : l.box_mask) CHECK(v == 0);
  }
}
