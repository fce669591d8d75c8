#include <doctest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "panda/alignment.hpp"

using namespace panda;

namespace {

Matrix random_matrix(std::mt19937_64& rng, Index r, Index c, double lo = -2.0, double hi = 2.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Matrix m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

// Element-wise evaluation of s(rx, ry) = rx·ry / (|rx||ry|).
Matrix brute_force_similarity(const Matrix& rx, const Matrix& ry) {
  Matrix s(rx.rows(), ry.rows());
  for (Index a = 0; a < rx.rows(); ++a) {
    for (Index b = 0; b < ry.rows(); ++b) {
      double dot = 0, nx = 0, ny = 0;
      for (Index k = 0; k < rx.cols(); ++k) {
        dot += rx(a, k) * ry(b, k);
        nx += rx(a, k) * rx(a, k);
        ny += ry(b, k) * ry(b, k);
      }
      s(a, b) = dot / (std::sqrt(nx) * std::sqrt(ny));
    }
  }
  return s;
}

Matrix random_stochastic(std::mt19937_64& rng, Index n) {
  Matrix m = random_matrix(rng, n, n, 0.05, 1.0);
  for (Index r = 0; r < n; ++r) m.row(r) /= m.row(r).sum();
  return m;
}

Matrix permutation(const std::vector<int>& p) {
  const Index n = static_cast<Index>(p.size());
  Matrix m = Matrix::Zero(n, n);
  for (Index i = 0; i < n; ++i) m(i, p[static_cast<std::size_t>(i)]) = 1.0;
  return m;
}

}  // namespace

TEST_CASE("cosine_similarity") {
  Eigen::RowVector3d v(0.3, -1.2, 2.0);
  CHECK(cosine_similarity(v, v).value == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(cosine_similarity(Eigen::RowVector2d(1, 0), Eigen::RowVector2d(0, 1)).value == 0.0);
  // dot = 2 + 2 + 4 = 8, both norms 3.
  CHECK(std::abs(cosine_similarity(Eigen::RowVector3d(1, 2, 2), Eigen::RowVector3d(2, 1, 2)).value - 8.0 / 9.0) < 1e-15);

  auto zero = cosine_similarity(Eigen::RowVector2d(0, 0), Eigen::RowVector2d(1, 1));
  CHECK(zero.value == 0.0);
  CHECK(zero.degenerate);
  CHECK_FALSE(cosine_similarity(v, v).degenerate);
  CHECK_THROWS_AS(cosine_similarity(RowVector(RowVector::Zero(2)), RowVector(RowVector::Ones(3))), ShapeError);

  // Works for other scalar types too.
  CHECK(cosine_similarity(Eigen::RowVector2f(1, 0), Eigen::RowVector2f(1, 0)).value == 1.0f);
}

TEST_CASE("similarity_matrix against the double loop") {
  std::mt19937_64 rng(42);
  for (int trial = 0; trial < 100; ++trial) {
    const Index m = 1 + trial % 16;
    const Index d = 1 + (trial * 7) % 64;
    Matrix rx = random_matrix(rng, m, d);
    Matrix ry = random_matrix(rng, m, d);
    Matrix oracle = brute_force_similarity(rx, ry);
    CHECK((similarity_matrix(rx, ry) - oracle).cwiseAbs().maxCoeff() < 1e-12);
    Tape t;
    CHECK((similarity_matrix(t.constant(rx), t.constant(ry)).value() - oracle).cwiseAbs().maxCoeff() < 1e-12);
  }

  Matrix unit = Matrix::Identity(3, 5);
  CHECK((similarity_matrix(unit, unit).diagonal().array() - 1.0).abs().maxCoeff() < 1e-15);

  Matrix one_x(1, 3), one_y(1, 3);
  one_x << 1, 2, 2;
  one_y << 2, 1, 2;
  Matrix s = similarity_matrix(one_x, one_y);
  CHECK(s.rows() == 1);
  CHECK(std::abs(s(0, 0) - 8.0 / 9.0) < 1e-15);

  CHECK_THROWS_AS(similarity_matrix(Matrix::Ones(2, 3), Matrix::Ones(3, 3)), ShapeError);
}

TEST_CASE("normalize") {
  Matrix z = normalize(Matrix::Zero(2, 2), Normalize::rows, 1.0);
  CHECK((z.array() - 0.5).abs().maxCoeff() < 1e-15);

  std::mt19937_64 rng(1);
  Matrix s = random_matrix(rng, 5, 5, -1, 1);
  Matrix rows = normalize(s, Normalize::rows, 0.1);
  Matrix cols = normalize(s, Normalize::cols, 0.1);
  CHECK((rows.rowwise().sum().array() - 1.0).abs().maxCoeff() < 1e-12);
  CHECK((cols.colwise().sum().array() - 1.0).abs().maxCoeff() < 1e-12);

  Matrix sharp = normalize(s, Normalize::rows, 1e-3);
  for (Index r = 0; r < 5; ++r) {
    Index arg;
    s.row(r).maxCoeff(&arg);
    CHECK(sharp(r, arg) > 1.0 - 1e-6);
  }
  CHECK_THROWS_AS(normalize(s, Normalize::rows, 0.0), ParameterError);
}

TEST_CASE("ground_truth_matrix") {
  CHECK(ground_truth_matrix(2, 0.0) == Matrix::Identity(2, 2));
  Matrix smooth = ground_truth_matrix(2, 0.1);
  CHECK(std::abs(smooth(0, 0) - 0.9) < 1e-15);
  CHECK(std::abs(smooth(0, 1) - 0.1) < 1e-15);
  CHECK(ground_truth_matrix(1, 0.3) == Matrix::Ones(1, 1));
  Matrix g5 = ground_truth_matrix(5, 0.05);
  CHECK((g5.rowwise().sum().array() - 1.0).abs().maxCoeff() < 1e-15);
  CHECK_THROWS_AS(ground_truth_matrix(2, 0.5), ParameterError);
  CHECK_THROWS_AS(ground_truth_matrix(2, -0.1), ParameterError);
  CHECK_THROWS_AS(ground_truth_matrix(0, 0.0), ParameterError);

  CHECK(effective_smoothing(0.05, 4) == 0.05);
  CHECK(effective_smoothing(0.05, 20) == 0.025);
}

TEST_CASE("kl_divergence") {
  Matrix eye = Matrix::Identity(2, 2);
  Matrix half = Matrix::Constant(2, 2, 0.5);
  // (1/4)·(1·ln 2 + 1·ln 2)
  CHECK(std::abs(kl_divergence(eye, half) - std::log(2.0) / 2.0) < 1e-12);
  Tape t;
  CHECK(std::abs(kl_divergence(t.constant(eye), t.constant(half)).scalar() - std::log(2.0) / 2.0) < 1e-12);

  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    Matrix p = random_matrix(rng, 1 + trial % 6, 1 + trial % 6, 1e-3, 3.0);
    CHECK(kl_divergence(p, p) == 0.0);
    Matrix a = random_stochastic(rng, 1 + trial % 6);
    Matrix b = random_stochastic(rng, a.rows());
    CHECK(kl_divergence(a, b) >= 0.0);
  }

  Matrix anti(2, 2);
  anti << 0, 1, 1, 0;
  Matrix holes(2, 2);
  holes << 0.5, 0.0, 0.5, 0.5;
  CHECK_THROWS_AS(kl_divergence(anti, holes), DivergenceError);
  CHECK_THROWS_AS(kl_divergence(t.constant(anti), t.constant(holes)), DivergenceError);
  CHECK_NOTHROW(kl_divergence(holes.transpose().eval(), Matrix(Matrix::Constant(2, 2, 0.5))));
}

TEST_CASE("contrastive_loss") {
  Matrix gt = ground_truth_matrix(3, 0.05);
  CHECK(contrastive_loss(gt, gt, gt) == 0.0);

  // Only the S_V term survives: ½·(1/9)·Σ (1/3)·ln((1/3)/GT_ij).
  Matrix uniform = Matrix::Constant(3, 3, 1.0 / 3.0);
  double oracle = 0.0;
  for (Index i = 0; i < 3; ++i) {
    for (Index j = 0; j < 3; ++j) oracle += (1.0 / 3.0) * std::log((1.0 / 3.0) / gt(i, j));
  }
  oracle = 0.5 * oracle / 9.0;
  CHECK(std::abs(contrastive_loss(gt, uniform, gt) - oracle) < 1e-15);

  std::mt19937_64 rng(8);
  Matrix a = random_stochastic(rng, 3);
  Matrix b = random_stochastic(rng, 3);
  CHECK(contrastive_loss(a, b, gt) == contrastive_loss(b, a, gt));
  CHECK(contrastive_loss(a, b, gt, true) >= 0.0);
}

TEST_CASE("contrastive loss is minimized at S_T == GT") {
  // S_T is parameterized through a row softmax of free logits; S_V = GT.
  Matrix gt = ground_truth_matrix(4, 0.05);
  ParamStore store;
  std::mt19937_64 rng(21);
  store.add("z", random_matrix(rng, 4, 4));
  OptimConfig cfg;
  cfg.learning_rate = 0.05;
  Optimizer opt(cfg);
  double loss = 0.0;
  for (int step = 0; step < 3000; ++step) {
    Tape t;
    Var s_t = softmax(t.parameter(store, "z"), 1, 1.0);
    Var g = t.constant(gt);
    Var l = scale(add(kl_divergence(s_t, g), kl_divergence(g, g)), 0.5);
    loss = l.scalar();
    t.backward(l);
    opt.step(store, t.parameter_gradients());
  }
  Matrix s_t = softmax_values(store.at("z"), 1, 1.0);
  CHECK(loss < 1e-8);
  CHECK((s_t - gt).cwiseAbs().maxCoeff() < 1e-3);
}

TEST_CASE("permutation equivariance") {
  std::mt19937_64 rng(13);
  const std::vector<int> perm = {2, 0, 3, 1};
  Matrix p = permutation(perm);
  for (int trial = 0; trial < 10; ++trial) {
    Matrix rx = random_matrix(rng, 4, 7);
    Matrix ry = random_matrix(rng, 4, 7);
    auto base = make_similarity_batch(rx, ry, 0.1, 0.05);
    auto moved = make_similarity_batch(p * rx, p * ry, 0.1, 0.05);
    CHECK((moved.s - p * base.s * p.transpose()).cwiseAbs().maxCoeff() < 1e-12);
    Matrix pgt = p * base.gt * p.transpose();
    const double l0 = contrastive_loss(base.s_t, base.s_v, base.gt);
    const double l1 = contrastive_loss(moved.s_t, moved.s_v, pgt);
    CHECK(std::abs(l0 - l1) < 1e-12);
  }
}

TEST_CASE("per-index contrastive terms") {
  std::mt19937_64 rng(17);
  ParamStore store;
  store.add("x", random_matrix(rng, 3, 5));
  store.add("y", random_matrix(rng, 3, 5));
  for (bool reverse : {false, true}) {
    Tape t;
    Var s = similarity_matrix(t.parameter(store, "x"), t.parameter(store, "y"));
    auto terms = contrastive_terms(s, 0.1, 0.05, reverse);
    CHECK(terms.per_index.size() == 3);
    const double whole = contrastive_loss(s, 0.1, 0.05, reverse).scalar();
    CHECK(std::abs(terms.total.scalar() - whole) < 1e-15);
    auto batch = make_similarity_batch(store.at("x"), store.at("y"), 0.1, 0.05);
    CHECK(std::abs(whole - contrastive_loss(batch.s_t, batch.s_v, batch.gt, reverse)) < 1e-15);

    auto f = [reverse](Tape& tp, const ParamStore& st) {
      Var sm = similarity_matrix(tp.parameter(st, "x"), tp.parameter(st, "y"));
      auto tt = contrastive_terms(sm, 0.1, 0.05, reverse);
      return add(scale(tt.per_index[0], 3.0), tt.total);
    };
    CHECK(finite_difference_check(f, store, 1e-6).max_rel_error < 1e-6);
  }
}

TEST_CASE("total_loss") {
  LossReport r = total_loss({0.1, 0.2}, 2.0, 1.0, 0.5, 0.1);
  CHECK(std::abs(r.total - 1.4) < 1e-12);
  CHECK(std::abs(r.total - r.recomposed()) < 1e-12);

  LossReport zero = total_loss({0.0, 0.0}, 0.0, 0.0);
  CHECK(zero.total == 0.0);

  LossReport defaults = total_loss({}, 1.0, 1.0);
  CHECK(defaults.lambda1 == 0.5);
  CHECK(defaults.lambda2 == 0.1);

  LossReport cnt = total_loss({0.3}, 2.0, 1.0, 0.5, 0.1, Ablation::cnt);
  CHECK_FALSE(cnt.l_ove.has_value());
  CHECK(cnt.l_ind.empty());
  CHECK(std::abs(cnt.total - 0.1) < 1e-15);

  LossReport sub = total_loss({}, 0.0, 0.0, 0.5, 0.1, Ablation::sub_only, 0.7);
  CHECK(sub.total == 0.7);
  CHECK_FALSE(sub.l_cnt.has_value());
  CHECK_THROWS_AS(total_loss({}, 0.0, 0.0, 0.5, 0.1, Ablation::sub_only), ParameterError);
  CHECK_THROWS_AS(total_loss({std::nan("")}, 0.0, 0.0), NumericError);

  CHECK(parse_ablation("cnt+ind") == Ablation::cnt_ind);
  CHECK(to_string(parse_ablation("cnt+ind+ove")) == "cnt+ind+ove");
  CHECK_THROWS_AS(parse_ablation("everything"), ParameterError);
}
