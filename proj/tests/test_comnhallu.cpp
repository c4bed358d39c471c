#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "test_support.hpp"
#include "tp/comnhallu.hpp"
#include "tp/detector.hpp"
#include "tp/error.hpp"

using namespace tp;
using linalg::Matrix;
using tp::testing::vectors_of;

namespace {

std::vector<std::vector<double>> gaussian_rows(std::size_t n, std::size_t d, std::uint64_t seed) {
  rng::Engine eng(seed);
  std::vector<std::vector<double>> out(n, std::vector<double>(d));
  for (auto& r : out)
    for (double& x : r) x = eng.normal() * (1.0 + static_cast<double>(&x - r.data()) * 0.1);
  return out;
}

Matrix standard_basis(std::size_t d, std::size_t k) {
  Matrix m(d, k);
  for (std::size_t j = 0; j < k; ++j) m(j, j) = 1.0;
  return m;
}

// Cosines of the principal angles between two orthonormal frames.
std::vector<double> principal_cosines(const Matrix& a, const Matrix& b) {
  const Matrix c = linalg::matmul_tn(a, b);
  auto eig = linalg::sym_eig(linalg::matmul_nt(c, c));
  std::vector<double> out;
  for (double v : eig.values) out.push_back(std::sqrt(std::clamp(v, 0.0, 1.0)));
  return out;
}

double trace_of_projected(const Matrix& rows, const Matrix& frame) {
  const Matrix p = linalg::matmul(rows, frame);
  double s = 0;
  for (double x : p.data()) s += x * x;
  return s / static_cast<double>(rows.rows() - 1);
}

std::vector<LabeledState> planted_domain(const tp::testing::PlantedGeometry& g, const tp::testing::DomainMap& map,
                                         std::size_t n, std::uint64_t seed) {
  rng::Engine eng(seed);
  std::vector<LabeledState> out;
  for (std::size_t i = 0; i < n; ++i) {
    const int y = eng.uniform() < 0.5;
    out.push_back({map.apply(g.draw(y, eng)), y, "p", i + 1});
  }
  return out;
}

}  // namespace

TEST_CASE("center_normalize") {
  auto c = center_normalize({{3, 4}, {-3, -4}});
  CHECK(c.mean == std::vector<double>{0, 0});
  CHECK(c.rows(0, 0) == doctest::Approx(0.6));
  CHECK(c.rows(0, 1) == doctest::Approx(0.8));
  CHECK(c.rows(1, 0) == doctest::Approx(-0.6));
  CHECK(c.rows(1, 1) == doctest::Approx(-0.8));

  Diagnostics diag;
  CHECK_THROWS_AS(center_normalize({{1, 2}, {1, 2}}, &diag), DegenerateDataError);
  CHECK(diag.messages.size() == 1);

  auto partial = center_normalize({{0, 0}, {1, 1}, {-1, -1}}, &diag);
  CHECK(partial.dropped == 1);
  CHECK(partial.kept == std::vector<std::size_t>{1, 2});

  auto r = center_normalize(gaussian_rows(100, 32, 4));
  for (std::size_t i = 0; i < r.rows.rows(); ++i) CHECK(std::abs(linalg::frobenius_norm(r.rows.row(i)) - 1) <= 1e-12);

  CHECK_THROWS_AS(center_normalize({{1, 2}}), ContractViolation);
}

TEST_CASE("build_subspace") {
  Matrix rows(4, 3);
  rows(0, 0) = 1;
  rows(1, 0) = -1;
  rows(2, 0) = 1;
  rows(3, 0) = -1;
  auto s = build_subspace(rows, 1);
  CHECK(std::abs(s.basis(0, 0)) == doctest::Approx(1.0));
  CHECK(s.basis(1, 0) == doctest::Approx(0.0));
  CHECK(s.basis(2, 0) == doctest::Approx(0.0));

  rng::Engine eng(8);
  const Matrix planted = linalg::random_isometry(64, 2, eng);
  std::vector<std::vector<double>> data;
  for (int i = 0; i < 200; ++i) {
    const double a = 3 * eng.normal(), b = eng.normal();
    std::vector<double> v(64);
    for (std::size_t j = 0; j < 64; ++j) v[j] = a * planted(j, 0) + b * planted(j, 1) + 1e-6 * eng.normal();
    data.push_back(v);
  }
  auto recovered = build_subspace(center_normalize(data).rows, 2);
  for (double c : principal_cosines(recovered.basis, planted)) CHECK(std::acos(std::min(c, 1.0)) <= 1e-3);

  try {
    build_subspace(Matrix(5, 8, 1.0), 5);
    FAIL("expected rank error");
  } catch (const RankError& e) {
    CHECK(e.achievable_rank() == 4);
  }
}

TEST_CASE("align_subspaces") {
  const Matrix k = standard_basis(8, 3);
  auto same = align_subspaces(k, k);
  CHECK(linalg::max_abs(linalg::subtract(same.m, Matrix::identity(3))) == 0.0);
  CHECK(same.k_s_align == k);

  rng::Engine eng(12);
  const Matrix k_s = linalg::random_isometry(20, 5, eng);
  const Matrix r = linalg::random_orthogonal(5, eng);
  const Matrix k_t = linalg::matmul(k_s, r);
  auto a = align_subspaces(k_s, k_t);
  CHECK(linalg::max_abs(linalg::subtract(a.m, r)) <= 1e-8);
  // Same span: projectors agree.
  CHECK(linalg::max_abs(linalg::subtract(linalg::matmul_nt(a.k_s_align, a.k_s_align), linalg::matmul_nt(k_t, k_t))) <=
        1e-8);

  CHECK_THROWS_AS(align_subspaces(k_s, standard_basis(20, 4)), DimensionError);
  CHECK_THROWS_AS(align_subspaces(k_s, standard_basis(16, 5)), DimensionError);
}

TEST_CASE("anchored alignment recovers a frame rotation") {
  rng::Engine eng(13);
  const Matrix k_s = linalg::random_isometry(30, 4, eng);
  const Matrix k_t = linalg::random_isometry(18, 4, eng);
  const Matrix r = linalg::random_orthogonal(4, eng);
  Matrix p_s(20, 4);
  for (double& x : p_s.data()) x = eng.normal();
  const Matrix p_t = linalg::matmul(p_s, r);
  auto a = align_subspaces_anchored(k_s, k_t, p_s, p_t);
  CHECK(linalg::max_abs(linalg::subtract(a.m, r)) <= 1e-10);
  CHECK(a.k_s_align.rows() == 30);
  CHECK_THROWS_AS(align_subspaces_anchored(k_s, k_t, p_s, Matrix(19, 4)), ContractViolation);
}

TEST_CASE("project_state") {
  AlignmentBundle b;
  b.d_prime = 2;
  b.target.mean = {0, 0, 0};
  b.target.basis = standard_basis(3, 2);
  b.source = b.target;
  b.m = Matrix::identity(2);
  auto p = project_state(std::vector<double>{1, 2, 3}, Domain::kTarget, b);
  CHECK(p[0] == doctest::Approx(1 / std::sqrt(14.0)));
  CHECK(p[1] == doctest::Approx(2 / std::sqrt(14.0)));

  Diagnostics diag;
  auto z = project_state(std::vector<double>{0, 0, 0}, Domain::kSource, b, &diag);
  CHECK(z == std::vector<double>{0, 0});
  CHECK(diag.messages.size() == 1);

  CHECK_THROWS_AS(project_state(std::vector<double>{1, 2}, Domain::kTarget, b), ContractViolation);
}

TEST_CASE("fit_comnhallu properties") {
  const auto x = gaussian_rows(120, 40, 21);
  auto b = fit_comnhallu(x, x, 16);

  SUBCASE("identity collapse") {
    auto ps = project_states(x, Domain::kSource, b);
    auto pt = project_states(x, Domain::kTarget, b);
    CHECK(linalg::max_abs(linalg::subtract(ps, pt)) <= 1e-8);
  }
  SUBCASE("batch projection matches row-by-row") {
    auto batch = project_states(x, Domain::kTarget, b);
    for (std::size_t i = 0; i < x.size(); ++i) {
      auto row = project_state(x[i], Domain::kTarget, b);
      for (std::size_t j = 0; j < row.size(); ++j) REQUIRE(std::abs(row[j] - batch(i, j)) <= 1e-12);
    }
  }
  SUBCASE("orthonormal target basis and contractive alignment") {
    const auto y = gaussian_rows(150, 40, 22);
    auto c = fit_comnhallu(y, x, 16);
    CHECK(linalg::orthonormality_error(c.target.basis) <= 1e-10);
    for (std::size_t j = 0; j < 16; ++j) CHECK(linalg::frobenius_norm(c.source.basis.col(j)) <= 1 + 1e-12);
    // Columns of K_S^align stay in span(K_S).
    const auto k_s = build_subspace(center_normalize(y).rows, 16).basis;
    const Matrix back = linalg::matmul(k_s, linalg::matmul_tn(k_s, c.source.basis));
    CHECK(linalg::max_abs(linalg::subtract(back, c.source.basis)) <= 1e-8);
  }
  SUBCASE("top eigenvalues capture the most variance") {
    const auto rows = center_normalize(x).rows;
    const auto s = build_subspace(rows, 16);
    double top = 0;
    for (double v : s.variances) top += v;
    CHECK(trace_of_projected(rows, s.basis) == doctest::Approx(top).epsilon(1e-10));
    rng::Engine eng(5);
    for (int t = 0; t < 20; ++t) CHECK(trace_of_projected(rows, linalg::random_isometry(40, 16, eng)) <= top);
  }
  SUBCASE("deterministic") { CHECK(fit_comnhallu(x, x, 16) == b); }
}

TEST_CASE("cross-dimension fit needs anchors") {
  const auto s = gaussian_rows(60, 30, 1), t = gaussian_rows(60, 20, 2);
  CHECK_THROWS_AS(fit_comnhallu(s, t, 4), DimensionError);
  AnchorPairs a{gaussian_rows(3, 30, 3), gaussian_rows(3, 20, 4)};
  CHECK_THROWS_AS(fit_comnhallu(s, t, 4, &a), RankError);
  a = {gaussian_rows(12, 30, 3), gaussian_rows(12, 20, 4)};
  auto b = fit_comnhallu(s, t, 4, &a);
  CHECK(b.source.basis.rows() == 30);
  CHECK(b.target.basis.rows() == 20);
}

TEST_CASE("correlation alignment transfers when domains share coordinates") {
  tp::testing::PlantedGeometry g(3);
  tp::testing::DomainMap shared(64, 64, 40);
  const auto s_fit = planted_domain(g, shared, 1500, 1), t_fit = planted_domain(g, shared, 1500, 2);
  const auto t_val = planted_domain(g, shared, 500, 3), s_test = planted_domain(g, shared, 800, 4);
  auto b = fit_comnhallu(vectors_of(s_fit), vectors_of(t_fit), 16);
  // Independent samples of one distribution span nearly the same subspace,
  // so M is close to orthogonal (a rotation inside near-degenerate blocks).
  CHECK(linalg::max_abs(linalg::subtract(linalg::matmul_tn(b.m, b.m), Matrix::identity(16))) <= 0.1);
  TrainConfig cfg;
  cfg.seed = 2;
  auto r = train_detector(project_labeled(t_fit, Domain::kTarget, b), project_labeled(t_val, Domain::kTarget, b), cfg);
  const auto ps = project_labeled(s_test, Domain::kSource, b);
  CHECK(roc_auc(detector_scores(r.model, ps), tp::testing::labels_of(ps)) >= 0.9);
}

TEST_CASE("bundle round trip") {
  auto dir = tp::testing::temp_dir("bundle_io");
  AnchorPairs a{gaussian_rows(12, 30, 3), gaussian_rows(12, 20, 4)};
  auto b = fit_comnhallu(gaussian_rows(60, 30, 1), gaussian_rows(60, 20, 2), 4, &a);
  b.config_hash = "h1";
  save_bundle(dir / "b.tpbundle", b);
  auto back = load_bundle(dir / "b.tpbundle");
  CHECK(back.source.mean == b.source.mean);
  CHECK(back.target.mean == b.target.mean);
  CHECK(back.source.basis == b.source.basis);
  CHECK(back.target.basis == b.target.basis);
  CHECK(back.m == b.m);
  CHECK(back.d_prime == 4);
  CHECK(back.config_hash == "h1");
  CHECK_THROWS_AS(load_bundle(dir / "nope.tpbundle"), IoError);
}
