#include <cmath>
#include <vector>

#include "aslip/error.hpp"
#include "aslip/loss.hpp"
#include "doctest.h"

using namespace aslip;
using namespace aslip::loss;
using Eigen::Vector2d;

TEST_CASE("bce closed forms") {
  CHECK(slip_bce(1.0 - 1e-7, true, 1.0) < 1e-6);
  CHECK(slip_bce(0.5, false, 1.0) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(slip_bce(0.5, true, 1.0) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(slip_bce(0.5, true, 2.0) == doctest::Approx(2.0 * std::log(2.0)).epsilon(1e-12));
  // clamped, never infinite
  CHECK(std::isfinite(slip_bce(0.0, true, 1.0)));
  CHECK(std::isfinite(slip_bce(1.0, false, 1.0)));
}

TEST_CASE("huber closed forms") {
  CHECK(mag_huber(2.0, 2.0, 1.0) == 0.0);
  CHECK(mag_huber(1.5, 1.0, 1.0) == doctest::Approx(0.125));
  CHECK(mag_huber(3.0, 1.0, 1.0) == doctest::Approx(1.5));
  CHECK(mag_huber(-1.0, 1.0, 1.0) == doctest::Approx(1.5));
}

TEST_CASE("cosine direction loss") {
  const Vector2d d(0.6, 0.8);
  CHECK(dir_cosine(d, d) == doctest::Approx(0.0));
  CHECK(dir_cosine(-d, d) == doctest::Approx(2.0));
  CHECK(dir_cosine(Vector2d(-0.8, 0.6), d) == doctest::Approx(1.0));
}

TEST_CASE("auxiliary logit loss") {
  CHECK(dir_auxiliary(Vector2d(1, 0), Vector2d(1, 0)) == 0.0);
  CHECK(dir_auxiliary(Vector2d(0, 0), Vector2d(1, 0)) == doctest::Approx(0.5));
}

TEST_CASE("smoothness") {
  CHECK(smoothness(Vector2d(1, 0), Vector2d(1, 0)) == doctest::Approx(0.0));
  CHECK(smoothness(Vector2d(1, 0), Vector2d(0, 1)) == doctest::Approx(1.0));
}

TEST_CASE("direction normalization") {
  bool degenerate = false;
  CHECK(normalize_direction(Vector2d(3, 4), &degenerate).isApprox(Vector2d(0.6, 0.8)));
  CHECK_FALSE(degenerate);
  CHECK(normalize_direction(Vector2d(1e-9, 0), &degenerate) == Vector2d(1, 0));
  CHECK(degenerate);
}

TEST_CASE("labels from displacement") {
  auto l = SlipLabel::from_displacement(Vector2d(0.3, 0.4), 0.5);
  CHECK_FALSE(l.is_slip);  // exactly epsilon is not slip
  l = SlipLabel::from_displacement(Vector2d(3, 4), 0.5);
  CHECK(l.is_slip);
  CHECK(l.d_star.isApprox(Vector2d(0.6, 0.8)));
  CHECK(l.magnitude() == doctest::Approx(5.0));
}

TEST_CASE("weighted sum with the default weights") {
  LossComponents c;
  c.slip = 0.1;
  c.mag = 0.2;
  c.dir = 0.3;
  c.smooth = 0.4;
  CHECK(weighted_total(c, LossWeights{}) == doctest::Approx(0.84).epsilon(1e-12));
}

TEST_CASE("batch loss masking") {
  LossConfig cfg;
  SUBCASE("perfect predictions on all-slip batch") {
    std::vector<SlipLabel> labels{SlipLabel::from_displacement(Vector2d(2, 0), 0.5),
                                  SlipLabel::from_displacement(Vector2d(0, -3), 0.5)};
    const std::vector<double> p{1.0, 1.0}, mag{2.0, 3.0};
    const std::vector<Vector2d> logits{Vector2d(1, 0), Vector2d(0, -1)};
    const auto c = evaluate(p, mag, logits, labels, cfg);
    CHECK(c.total < 1e-5);
    CHECK(c.slip_windows == 2);
  }
  SUBCASE("no-slip batch is BCE only") {
    std::vector<SlipLabel> labels(3);
    const std::vector<double> p{0.2, 0.5, 0.7}, mag{5.0, 1.0, 9.0};
    const std::vector<Vector2d> logits(3, Vector2d(-1, 0));
    const auto c = evaluate(p, mag, logits, labels, cfg);
    const double bce = (slip_bce(0.2, false, 1) + slip_bce(0.5, false, 1) + slip_bce(0.7, false, 1)) / 3.0;
    CHECK(c.slip == doctest::Approx(bce));
    CHECK(c.mag == 0.0);
    CHECK(c.dir == 0.0);
    CHECK(c.smooth == 0.0);
    CHECK(c.total == doctest::Approx(cfg.weights.slip * bce));
  }
  SUBCASE("first window contributes no smoothness") {
    std::vector<SlipLabel> labels{SlipLabel::from_displacement(Vector2d(2, 0), 0.5)};
    const auto c = evaluate(std::vector<double>{1.0}, std::vector<double>{2.0},
                            std::vector<Vector2d>{Vector2d(0, 1)}, labels, cfg);
    CHECK(c.smooth == 0.0);
    CHECK(c.smooth_windows == 0);
  }
  SUBCASE("misaligned batches") {
    std::vector<SlipLabel> labels(2);
    CHECK_THROWS_AS(evaluate(std::vector<double>{0.5}, std::vector<double>{0.0, 0.0},
                             std::vector<Vector2d>(2, Vector2d(1, 0)), labels, cfg),
                    UsageError);
  }
}

TEST_CASE("tape loss equals the plain evaluation") {
  LossConfig cfg;
  std::vector<SlipLabel> labels{SlipLabel::from_displacement(Vector2d(2, 1), 0.5), SlipLabel{},
                                SlipLabel::from_displacement(Vector2d(-1, 3), 0.5)};
  labels[2].has_prev = true;
  labels[2].prev_d_star = Vector2d(0, 1);
  const std::vector<double> p{0.8, 0.3, 0.6}, mag{1.5, 0.2, 2.5};
  const std::vector<Vector2d> logits{Vector2d(0.5, 0.1), Vector2d(-1, 1), Vector2d(0.3, -0.7)};
  const auto ref = evaluate(p, mag, logits, labels, cfg);

  ag::Tape<double> tape;
  ag::Tensor<double> tp({3}), tm({3}), tl({3, 2});
  for (int i = 0; i < 3; ++i) {
    tp.values(i) = p[i];
    tm.values(i) = mag[i];
    tl.values(2 * i) = logits[i].x();
    tl.values(2 * i + 1) = logits[i].y();
  }
  LossComponents c;
  auto total = total_loss(tape, tape.variable(tp), tape.variable(tm), tape.variable(tl), labels, cfg, &c);
  CHECK(tape.value(total).item() == doctest::Approx(ref.total).epsilon(1e-12));
  CHECK(c.smooth == doctest::Approx(ref.smooth).epsilon(1e-12));
}

TEST_CASE("auxiliary gradient does not vanish at the antipode") {
  LossConfig cfg;
  std::vector<SlipLabel> labels{SlipLabel::from_displacement(Vector2d(2, 0), 0.5)};
  ag::Tape<double> tape;
  ag::Tensor<double> tl({1, 2});
  tl.values << -1.0, 0.0;
  auto logits = tape.variable(tl);
  auto total = total_loss(tape, tape.variable(ag::Tensor<double>({1}, Eigen::VectorXd::Constant(1, 0.9))),
                          tape.variable(ag::Tensor<double>({1}, Eigen::VectorXd::Constant(1, 2.0))), logits, labels,
                          cfg);
  tape.backward(total);
  CHECK(tape.grad(logits).norm() > 0.1);
}
