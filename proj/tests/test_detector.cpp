#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>

#include "test_support.hpp"
#include "tp/binary_io.hpp"
#include "tp/detector.hpp"
#include "tp/error.hpp"
#include "tp/rng.hpp"

using namespace tp;

namespace {

// Straight-line three-layer evaluation with explicit index arithmetic.
double naive_forward(const DetectorModel& m, const std::vector<double>& h) {
  const std::size_t d = m.d_in();
  const auto w1 = m.w1(), b1 = m.b1(), w2 = m.w2(), b2 = m.b2(), w3 = m.w3();
  double hidden1[128], hidden2[64];
  for (int r = 0; r < 128; ++r) {
    double acc = 0;
    for (std::size_t c = 0; c < d; ++c) acc += w1[r * d + c] * h[c];
    acc += b1[r];
    hidden1[r] = acc < 0 ? 0 : acc;
  }
  for (int r = 0; r < 64; ++r) {
    double acc = 0;
    for (int c = 0; c < 128; ++c) acc += w2[r * 128 + c] * hidden1[c];
    acc += b2[r];
    hidden2[r] = acc < 0 ? 0 : acc;
  }
  double out = 0;
  for (int c = 0; c < 64; ++c) out += w3[c] * hidden2[c];
  out += m.b3();
  return 1.0 / (1.0 + std::exp(-out));
}

// Class means 0 and gap·u for a direction u fixed by d alone.
std::vector<LabeledState> gaussian_clouds(std::size_t n, std::size_t d, double gap, std::uint64_t seed) {
  rng::Engine dir_eng(d);
  std::vector<double> dir(d);
  double norm = 0;
  for (double& x : dir) {
    x = dir_eng.normal();
    norm += x * x;
  }
  rng::Engine eng(seed);
  for (double& x : dir) x *= gap / std::sqrt(norm);
  std::vector<LabeledState> out;
  for (std::size_t i = 0; i < n; ++i) {
    const int y = static_cast<int>(i % 2);
    std::vector<double> v(d);
    for (std::size_t j = 0; j < d; ++j) v[j] = eng.normal() + (y ? dir[j] : 0.0);
    out.push_back({std::move(v), y, "g", i + 1});
  }
  return out;
}

double accuracy_at(const DetectorModel& m, const std::vector<LabeledState>& s, double tau) {
  const auto scores = detector_scores(m, s);
  std::size_t ok = 0;
  for (std::size_t i = 0; i < s.size(); ++i) ok += (scores[i] >= tau) == (s[i].label == 1);
  return static_cast<double>(ok) / static_cast<double>(s.size());
}

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

}  // namespace

TEST_CASE("forward pass") {
  DetectorModel zero(5);
  CHECK(detector_forward(zero, std::vector<double>{1, 2, 3, 4, 5}) == 0.5);

  auto m = DetectorModel::random(24, 3);
  rng::Engine eng(9);
  for (int t = 0; t < 20; ++t) {
    std::vector<double> h(24);
    for (double& x : h) x = 3 * eng.normal();
    CHECK(std::abs(detector_forward(m, h) - naive_forward(m, h)) <= 1e-12);
  }

  CHECK_THROWS_AS(detector_forward(m, std::vector<double>(23)), ContractViolation);
}

TEST_CASE("output is monotone in a scaled last layer") {
  // b2 = 1 with everything upstream zero gives a2 = 1 for every unit.
  DetectorModel m(3);
  auto p = m.params();
  for (std::size_t k = 0; k < 64; ++k) p[m.off_b2() + k] = 1.0;
  double prev = 0.5;
  for (double scale : {0.001, 0.01, 0.1, 1.0, 10.0, 1e3, 1e6}) {
    for (std::size_t k = 0; k < 64; ++k) p[m.off_w3() + k] = scale;
    const double s = detector_forward(m, std::vector<double>{0.3, -1, 2});
    CHECK(s >= prev);
    CHECK(s < 1.0);
    CHECK(s > 0.0);
    prev = s;
  }
  CHECK(prev > 1 - 1e-12);
}

TEST_CASE("scores stay inside (0, 1) for extreme inputs") {
  auto m = DetectorModel::random(4, 1);
  for (double mag : {1e3, 1e8, 1e15}) {
    for (double sign : {-1.0, 1.0}) {
      const double s = detector_forward(m, std::vector<double>{sign * mag, -mag, mag, 0});
      CHECK(s > 0.0);
      CHECK(s < 1.0);
      CHECK_FALSE(std::isnan(s));
    }
  }
}

TEST_CASE("analytic gradients match finite differences") {
  auto m = DetectorModel::random(16, 5);
  auto batch = gaussian_clouds(8, 16, 2.0, 6);
  CHECK(gradient_check(m, batch, 77, 200) <= 1e-6);
}

TEST_CASE("zero inputs give zero first-layer weight gradients") {
  auto m = DetectorModel::random(6, 2);
  auto p = m.params();
  for (std::size_t j = 0; j < 128; ++j) p[m.off_b1() + j] = 0.0;
  std::vector<LabeledState> batch{{std::vector<double>(6, 0.0), 1, "z", 1}, {std::vector<double>(6, 0.0), 0, "z", 2}};
  std::vector<double> g;
  bce_loss_and_gradient(m, batch, &g);
  for (std::size_t i = 0; i < m.off_b1(); ++i) REQUIRE(g[i] == 0.0);
}

TEST_CASE("duplicated sample doubles the summed gradient") {
  auto m = DetectorModel::random(10, 4);
  auto one = gaussian_clouds(2, 10, 1.0, 8);
  one.resize(1);
  std::vector<LabeledState> two{one[0], one[0]};
  std::vector<double> g1, g2;
  const double l1 = bce_loss_and_gradient(m, one, &g1);
  const double l2 = bce_loss_and_gradient(m, two, &g2);
  CHECK(l2 == doctest::Approx(2 * l1).epsilon(1e-14));
  for (std::size_t i = 0; i < g1.size(); ++i) REQUIRE(std::abs(g2[i] - 2 * g1[i]) <= 1e-13 * (1 + std::abs(g1[i])));
}

TEST_CASE("training separates Gaussian clouds") {
  const auto train = gaussian_clouds(2000, 64, 4.0, 100);
  const auto val = gaussian_clouds(1000, 64, 4.0, 101);
  TrainConfig cfg;
  cfg.seed = 7;
  auto result = train_detector(train, val, cfg);
  CHECK(result.history.size() == 30);

  // The Bayes rule for unit-covariance clouds at distance 4 errs with
  // probability Phi(-2).
  const double bayes_accuracy = normal_cdf(2.0);
  CHECK(bayes_accuracy == doctest::Approx(0.97725).epsilon(1e-4));
  const double acc = accuracy_at(result.model, train, 0.5);
  MESSAGE("train accuracy " << acc << " (Bayes " << bayes_accuracy << ")");
  CHECK(acc >= bayes_accuracy - 0.01);
  CHECK(roc_auc(detector_scores(result.model, val), [&] {
          std::vector<int> y;
          for (const auto& s : val) y.push_back(s.label);
          return y;
        }()) >= 0.99);

  SUBCASE("flipped labels give the same accuracy") {
    auto ftrain = train, fval = val;
    for (auto& s : ftrain) s.label = 1 - s.label;
    for (auto& s : fval) s.label = 1 - s.label;
    auto flipped = train_detector(ftrain, fval, cfg);
    CHECK(std::abs(accuracy_at(flipped.model, ftrain, 0.5) - acc) <= 0.01);
  }
  SUBCASE("same seed gives a bit-identical model") {
    auto again = train_detector(train, val, cfg);
    CHECK(again.model == result.model);
    CHECK(again.best_epoch == result.best_epoch);
  }
}

TEST_CASE("training loss decreases on separable data") {
  auto train = gaussian_clouds(1024, 8, 8.0, 12);
  auto val = gaussian_clouds(256, 8, 8.0, 13);
  TrainConfig cfg;
  cfg.batch_size = 64;
  cfg.seed = 3;
  auto result = train_detector(train, val, cfg);
  int rises = 0;
  for (std::size_t e = 1; e < result.history.size(); ++e)
    rises += result.history[e].train_loss > result.history[e - 1].train_loss;
  CHECK(rises <= 3);
}

TEST_CASE("training rejects single-class data") {
  auto s = gaussian_clouds(10, 3, 1.0, 1);
  for (auto& x : s) x.label = 1;
  CHECK_THROWS_AS(train_detector(s, s, TrainConfig{}), TrainingError);
}

TEST_CASE("divergence names the epoch") {
  auto s = gaussian_clouds(10, 3, 1.0, 1);
  TrainConfig cfg;
  cfg.learning_rate = 1e300;
  try {
    train_detector(s, s, cfg);
    FAIL("expected divergence");
  } catch (const DivergenceError& e) {
    CHECK(e.epoch() == 0);
  }
}

TEST_CASE("calibration thresholds") {
  const std::vector<double> neg{0.1, 0.2, 0.3, 0.9};
  const std::vector<int> zeros(4, 0);
  const std::vector<double> alphas{0.0, 0.25, 1.0};
  auto table = calibrate_scores(neg, zeros, alphas);
  CHECK(table.threshold(0.25) == 0.9);
  CHECK(table.threshold(1.0) == 0.1);
  CHECK(table.threshold(0.0) == std::nextafter(0.9, 2.0));
  CHECK_THROWS_AS(table.threshold(0.5), CalibrationError);

  const std::vector<int> ones(4, 1);
  CHECK_THROWS_AS(calibrate_scores(neg, ones, alphas), CalibrationError);
}

TEST_CASE("calibration is monotone and meets its FPR target") {
  rng::Engine eng(21);
  std::vector<double> scores;
  std::vector<int> labels;
  for (int i = 0; i < 3000; ++i) {
    labels.push_back(static_cast<int>(eng.below(2)));
    scores.push_back(1.0 / (1.0 + std::exp(-(eng.normal() + 2.0 * labels.back()))));
  }
  std::vector<double> alphas;
  for (int i = 0; i <= 20; ++i) alphas.push_back(i / 20.0);
  auto table = calibrate_scores(scores, labels, alphas);
  for (std::size_t i = 0; i < table.entries.size(); ++i) {
    const auto [alpha, t] = table.entries[i];
    CHECK(evaluate_scores(scores, labels, t).fpr <= alpha);
    if (i > 0) CHECK(t <= table.entries[i - 1].second);
  }
}

TEST_CASE("confusion metrics") {
  const std::vector<double> s{0.8, 0.6, 0.7, 0.1};
  const std::vector<int> y{1, 1, 0, 0};
  auto m = evaluate_scores(s, y, 0.5);
  CHECK(m.tpr == 1.0);
  CHECK(m.fpr == 0.5);
  CHECK(m.lr_plus == 2.0);

  auto perfect = evaluate_scores(std::vector<double>{0.9, 0.8, 0.2, 0.1}, y, 0.5);
  CHECK(std::isinf(perfect.lr_plus));
  CHECK(perfect.acc_top50 == 1.0);

  auto none = evaluate_scores(s, y, 0.99);
  CHECK(std::isnan(none.lr_plus));

  CHECK_THROWS_AS(evaluate_scores(s, std::vector<int>{1, 1, 1, 1}, 0.5), EvaluationError);
}

TEST_CASE("top-half accuracy of label-independent scores is near chance") {
  rng::Engine eng(5);
  std::vector<double> s;
  std::vector<int> y;
  for (int i = 0; i < 10000; ++i) {
    s.push_back(eng.uniform());
    y.push_back(eng.uniform() < 0.5);
  }
  CHECK(std::abs(evaluate_scores(s, y, 0.5).acc_top50 - 0.5) <= 0.05);
}

TEST_CASE("0/1 risk on a balanced set") {
  // FNR + FPR = (1 - TPR) + FPR = 2 (1 - balanced accuracy).
  rng::Engine eng(17);
  std::vector<double> s;
  std::vector<int> y;
  for (int i = 0; i < 2000; ++i) {
    y.push_back(i % 2);
    s.push_back(eng.uniform() * 0.6 + 0.3 * y.back());
  }
  for (double tau : {0.2, 0.4, 0.5, 0.7}) {
    auto m = evaluate_scores(s, y, tau);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < s.size(); ++i) correct += (s[i] >= tau) == (y[i] == 1);
    const double accuracy = static_cast<double>(correct) / static_cast<double>(s.size());
    const double balanced = 0.5 * (m.tpr + (1 - m.fpr));
    CHECK(balanced == doctest::Approx(accuracy).epsilon(1e-12));
    CHECK((1 - m.tpr) + m.fpr == doctest::Approx(2 * (1 - balanced)).epsilon(1e-12));
  }
}

TEST_CASE("roc_auc") {
  CHECK(roc_auc(std::vector<double>{0.1, 0.2, 0.8, 0.9}, std::vector<int>{0, 0, 1, 1}) == 1.0);
  CHECK(roc_auc(std::vector<double>{0.5, 0.5}, std::vector<int>{0, 1}) == 0.5);
  // one inversion among four pairs
  CHECK(roc_auc(std::vector<double>{0.1, 0.7, 0.6, 0.9}, std::vector<int>{0, 0, 1, 1}) == 0.75);
}

TEST_CASE("checkpoint round trip") {
  auto dir = tp::testing::temp_dir("detector_io");
  DetectorCheckpoint ck{DetectorModel::random(7, 11), {{{0.01, 0.83}, {0.05, 0.6}}}, "cafe"};
  save_detector(dir / "d.tpdet", ck);
  auto back = load_detector(dir / "d.tpdet");
  CHECK(back.model == ck.model);
  CHECK(back.calibration == ck.calibration);
  CHECK(back.config_hash == "cafe");

  auto raw = io::read_file(dir / "d.tpdet");
  io::write_file(dir / "cut.tpdet", raw.substr(0, raw.size() - 3));
  CHECK_THROWS_AS(load_detector(dir / "cut.tpdet"), ParseError);
  CHECK_THROWS_AS(load_detector(dir / "missing.tpdet"), IoError);
}
