#include <doctest.h>

#include <cmath>
#include <random>

#include "panda/tensor.hpp"

using namespace panda;

namespace {

Matrix mat(std::initializer_list<std::initializer_list<double>> rows) {
  Matrix m(static_cast<Index>(rows.size()), static_cast<Index>(rows.begin()->size()));
  Index r = 0;
  for (const auto& row : rows) {
    Index c = 0;
    for (double v : row) m(r, c++) = v;
    ++r;
  }
  return m;
}

Matrix random_matrix(std::mt19937_64& rng, Index r, Index c, double lo = -2.0, double hi = 2.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Matrix m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

// Checks a scalar-valued composition of ops against central differences.
double op_gradient_error(const std::function<Var(Tape&, const ParamStore&)>& f, ParamStore& store) {
  return finite_difference_check(f, store, 1e-6).max_rel_error;
}

}  // namespace

TEST_CASE("matmul") {
  Tape t;
  Var eye = t.constant(Matrix::Identity(2, 2));
  Var b = t.constant(mat({{3, 4}, {5, 6}}));
  CHECK(matmul(eye, b).value() == mat({{3, 4}, {5, 6}}));

  // Hand summation: 1*5+2*7, 1*6+2*8, 3*5+4*7, 3*6+4*8.
  Var x = t.constant(mat({{1, 2}, {3, 4}}));
  Var y = t.constant(mat({{5, 6}, {7, 8}}));
  CHECK(matmul(x, y).value() == mat({{19, 22}, {43, 50}}));

  Var p = t.constant(Matrix::Zero(2, 3));
  Var q = t.constant(Matrix::Zero(2, 3));
  try {
    matmul(p, q);
    FAIL("expected shape error");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
  }
}

TEST_CASE("softmax") {
  Tape t;
  Matrix half = softmax(t.constant(mat({{0, 0}})), 1, 1.0).value();
  CHECK(half(0, 0) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(half(0, 1) == doctest::Approx(0.5).epsilon(1e-15));

  // exp(ln 1) = 1, exp(ln 3) = 3, normalizer 4.
  Matrix q = softmax(t.constant(mat({{std::log(1.0), std::log(3.0)}})), 1, 1.0).value();
  CHECK(std::abs(q(0, 0) - 0.25) < 1e-14);
  CHECK(std::abs(q(0, 1) - 0.75) < 1e-14);

  Matrix big = softmax(t.constant(mat({{1000, 0}})), 1, 1.0).value();
  CHECK(std::isfinite(big(0, 0)));
  CHECK(big(0, 0) == doctest::Approx(1.0));
  CHECK(big(0, 1) < 1e-300);

  CHECK_THROWS_AS(softmax(t.constant(mat({{1, 2}})), 1, 0.0), ParameterError);
  CHECK_THROWS_AS(softmax(t.constant(mat({{1, 2}})), 1, -1.0), ParameterError);
}

TEST_CASE("softmax slices sum to one and stay positive") {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    Matrix a = random_matrix(rng, 1 + trial % 5, 1 + trial % 7, -20, 20);
    for (int axis : {0, 1}) {
      Matrix s = softmax_values(a, axis, 0.3 + 0.1 * (trial % 4));
      CHECK((s.array() > 0.0).all());
      if (axis == 1) {
        CHECK((s.rowwise().sum().array() - 1.0).abs().maxCoeff() < 1e-12);
      } else {
        CHECK((s.colwise().sum().array() - 1.0).abs().maxCoeff() < 1e-12);
      }
    }
  }
}

TEST_CASE("layer_norm") {
  Tape t;
  Var one = t.constant(Matrix::Ones(1, 3));
  Var zero = t.constant(Matrix::Zero(1, 3));
  Matrix flat = layer_norm(t.constant(mat({{1, 1, 1}})), one, zero, 1e-5).value();
  CHECK(flat.cwiseAbs().maxCoeff() == 0.0);

  // mean 1, variance 1.
  Var g1 = t.constant(Matrix::Ones(1, 2));
  Var b0 = t.constant(Matrix::Zero(1, 2));
  Matrix unit = layer_norm(t.constant(mat({{0, 2}})), g1, b0, 1e-15).value();
  CHECK(std::abs(unit(0, 0) + 1.0) < 1e-9);
  CHECK(std::abs(unit(0, 1) - 1.0) < 1e-9);

  Var g2 = t.constant(Matrix::Constant(1, 2, 2.0));
  Var b1 = t.constant(Matrix::Constant(1, 2, 1.0));
  Matrix affine = layer_norm(t.constant(mat({{0, 2}})), g2, b1, 1e-15).value();
  CHECK(std::abs(affine(0, 0) + 1.0) < 1e-9);
  CHECK(std::abs(affine(0, 1) - 3.0) < 1e-9);

  CHECK_THROWS_AS(layer_norm(t.constant(mat({{0, 2, 3}})), g1, b0), ShapeError);
}

TEST_CASE("backward") {
  {
    Tape t;
    Var x = t.leaf(mat({{1, 2, 3}}));
    Var loss = sum(x);
    t.backward(loss);
    CHECK(*t.grad(x) == mat({{1, 1, 1}}));
  }
  {
    Tape t;
    Var x = t.leaf(mat({{1, 2, 3}}));
    t.backward(sum(hadamard(x, x)));
    CHECK(*t.grad(x) == mat({{2, 4, 6}}));
  }
  {
    Tape t;
    Var x = t.leaf(mat({{1, 2}}));
    Var p = t.leaf(mat({{5}}));
    t.backward(sum(x));
    CHECK(t.grad(p) == nullptr);
  }
  {
    Tape t;
    Var x = t.leaf(mat({{1, 2}}));
    CHECK_THROWS_AS(t.backward(x), ContractError);
  }
}

TEST_CASE("backward is deterministic across fresh tapes") {
  ParamStore store;
  std::mt19937_64 rng(3);
  store.add("w", random_matrix(rng, 4, 3));
  auto run = [&] {
    Tape t;
    Var w = t.parameter(store, "w");
    t.backward(sum(softmax(matmul(w, transpose(w)), 1, 0.5)));
    return t.parameter_gradients().at("w");
  };
  Matrix a = run();
  Matrix b = run();
  CHECK(std::memcmp(a.data(), b.data(), sizeof(double) * a.size()) == 0);
}

TEST_CASE("op gradients match central differences") {
  std::mt19937_64 rng(11);
  ParamStore store;
  store.add("a", random_matrix(rng, 3, 4));
  store.add("b", random_matrix(rng, 4, 3));
  store.add("row", random_matrix(rng, 1, 4));
  store.add("gamma", random_matrix(rng, 1, 4));
  store.add("beta", random_matrix(rng, 1, 4));
  store.add("sq", random_matrix(rng, 3, 3));
  store.add("sq2", random_matrix(rng, 3, 3));
  store.add("table", random_matrix(rng, 5, 4));

  auto p = [](Tape& t, const ParamStore& s, const char* n) { return t.parameter(s, n); };
  // Weighted sums expose every output element to the check.
  auto weighted = [](Tape& t, Var x) {
    Matrix w(x.rows(), x.cols());
    for (Index i = 0; i < w.size(); ++i) w.data()[i] = 0.3 + 0.17 * static_cast<double>(i % 7);
    return sum(hadamard(x, t.constant(w)));
  };

  SUBCASE("matmul") {
    CHECK(op_gradient_error([&](Tape& t, const ParamStore& s) {
      return weighted(t, matmul(p(t, s, "a"), p(t, s, "b")));
    }, store) < 1e-5);
  }
  SUBCASE("add, sub, scale, transpose") {
    CHECK(op_gradient_error([&](Tape& t, const ParamStore& s) {
      Var ab = matmul(p(t, s, "a"), p(t, s, "b"));
      return weighted(t, scale(sub(add(ab, transpose(ab)), p(t, s, "sq")), -1.5));
    }, store) < 1e-5);
  }
  SUBCASE("add_row, gelu, mean_rows") {
    CHECK(op_gradient_error([&](Tape& t, const ParamStore& s) {
      return weighted(t, mean_rows(gelu(add_row(p(t, s, "a"), p(t, s, "row")))));
    }, store) < 1e-5);
  }
  SUBCASE("softmax on both axes") {
    CHECK(op_gradient_error([&](Tape& t, const ParamStore& s) {
      Var x = p(t, s, "sq");
      return add(weighted(t, softmax(x, 1, 0.7)), weighted(t, softmax(x, 0, 1.3)));
    }, store) < 1e-5);
  }
  SUBCASE("layer_norm") {
    CHECK(op_gradient_error([&](Tape& t, const ParamStore& s) {
      return weighted(t, layer_norm(p(t, s, "a"), p(t, s, "gamma"), p(t, s, "beta")));
    }, store) < 1e-5);
  }
  SUBCASE("normalize_rows") {
    CHECK(op_gradient_error([&](Tape& t, const ParamStore& s) {
      return weighted(t, normalize_rows(p(t, s, "a")));
    }, store) < 1e-5);
  }
  SUBCASE("slices, concats, gather") {
    CHECK(op_gradient_error([&](Tape& t, const ParamStore& s) {
      Var a = p(t, s, "a");
      Var top = slice_rows(a, 1, 2);
      Var left = slice_cols(a, 0, 3);
      Var rows = concat_rows({top, gather_rows(p(t, s, "table"), {4, 0, 4})});
      Var cols = concat_cols({slice_rows(left, 0, 2), slice_rows(rows, 0, 2)});
      return add(weighted(t, rows), weighted(t, cols));
    }, store) < 1e-5);
  }
  SUBCASE("cross_entropy") {
    CHECK(op_gradient_error([&](Tape& t, const ParamStore& s) {
      return cross_entropy(p(t, s, "a"), {0, 3, 2});
    }, store) < 1e-5);
  }
  SUBCASE("kl_divergence in both arguments") {
    CHECK(op_gradient_error([&](Tape& t, const ParamStore& s) {
      Var a = softmax(p(t, s, "sq"), 1, 1.0);
      Var b = softmax(p(t, s, "sq2"), 0, 1.0);
      return add(kl_divergence(a, b), kl_divergence(b, a));
    }, store) < 1e-5);
  }
}

TEST_CASE("optimizer") {
  SUBCASE("sgd one step") {
    ParamStore s;
    s.add("p", Matrix::Constant(1, 1, 1.0));
    Optimizer opt({Algorithm::sgd, 0.1});
    opt.step(s, {{"p", Matrix::Constant(1, 1, 2.0)}});
    CHECK(s.at("p")(0, 0) == doctest::Approx(0.8).epsilon(1e-15));
  }
  SUBCASE("frozen entries are untouched") {
    ParamStore s;
    s.add("p", Matrix::Constant(1, 1, 1.0), true);
    Optimizer opt({Algorithm::sgd, 0.1});
    opt.step(s, {{"p", Matrix::Constant(1, 1, 123.0)}});
    CHECK(s.at("p")(0, 0) == 1.0);
    Optimizer adam(OptimConfig{});
    adam.step(s, {{"p", Matrix::Constant(1, 1, -5.0)}});
    CHECK(s.at("p")(0, 0) == 1.0);
  }
  SUBCASE("adam first step") {
    // m̂ = g, v̂ = g², so the step is lr·g/(|g|+eps) ≈ lr.
    ParamStore s;
    s.add("p", Matrix::Constant(1, 1, 1.0));
    OptimConfig cfg;
    cfg.learning_rate = 0.001;
    Optimizer opt(cfg);
    opt.step(s, {{"p", Matrix::Constant(1, 1, 1.0)}});
    const double expected = 1.0 - 0.001 * 1.0 / (1.0 + 1e-8);
    CHECK(std::abs(s.at("p")(0, 0) - expected) < 1e-15);
  }
  SUBCASE("unknown gradient name") {
    ParamStore s;
    s.add("p", Matrix::Constant(1, 1, 1.0));
    Optimizer opt(OptimConfig{});
    CHECK_THROWS_AS(opt.step(s, {{"q", Matrix::Constant(1, 1, 1.0)}}), ContractError);
  }
  SUBCASE("invalid config") {
    OptimConfig cfg;
    cfg.learning_rate = 0.0;
    CHECK_THROWS_AS(Optimizer{cfg}, ParameterError);
    cfg.learning_rate = 1e-3;
    cfg.adam_beta2 = 1.0;
    CHECK_THROWS_AS(Optimizer{cfg}, ParameterError);
  }
}

TEST_CASE("optimizer never mutates frozen entries (random property)") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    ParamStore s;
    for (int k = 0; k < 6; ++k) s.add("p" + std::to_string(k), random_matrix(rng, 2, 3), k % 2 == 0);
    ParamStore before = s;
    Gradients g;
    for (const auto& name : s.names()) g[name] = random_matrix(rng, 2, 3);
    OptimConfig cfg;
    cfg.algorithm = trial % 2 ? Algorithm::sgd : Algorithm::adam;
    cfg.weight_decay = 0.01;
    Optimizer opt(cfg);
    for (int step = 0; step < 3; ++step) opt.step(s, g);
    for (const auto& name : s.names()) {
      const bool same = std::memcmp(s.at(name).data(), before.at(name).data(), 6 * sizeof(double)) == 0;
      CHECK(same == s.is_frozen(name));
    }
  }
}

TEST_CASE("finite_difference_check") {
  std::mt19937_64 rng(9);
  ParamStore s;
  s.add("p", random_matrix(rng, 3, 5));
  auto squares = [](Tape& t, const ParamStore& st) {
    Var p = t.parameter(st, "p");
    return sum(hadamard(p, p));
  };
  GradCheckReport r = finite_difference_check(squares, s, 1e-5);
  CHECK(r.max_rel_error < 1e-6);
  CHECK(r.checked == 15);

  auto constant = [](Tape& t, const ParamStore&) { return t.constant(Matrix::Constant(1, 1, 4.0)); };
  CHECK(finite_difference_check(constant, s, 1e-5).max_rel_error < 1e-12);

  CHECK_THROWS_AS(finite_difference_check(squares, s, 1e-2), ParameterError);

  int calls = 0;
  auto flaky = [&calls](Tape& t, const ParamStore&) {
    return t.constant(Matrix::Constant(1, 1, static_cast<double>(++calls)));
  };
  CHECK_THROWS_AS(finite_difference_check(flaky, s, 1e-5), CheckError);
}
