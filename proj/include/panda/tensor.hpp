#pragma once

// Reverse-mode differentiation over dense row-major matrices.
//
// A Tape records one forward pass. Every Var is a handle to a node on its
// tape; ops are free functions that take Vars and register a backward
// closure. Tapes are cheap and are rebuilt for every forward pass.

#include <Eigen/Dense>

#include <cstddef>
#include <deque>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "panda/errors.hpp"

namespace panda {

template <typename Scalar>
using MatrixT = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using RowVectorT = Eigen::Matrix<Scalar, 1, Eigen::Dynamic, Eigen::RowMajor>;

using Matrix = MatrixT<double>;
using RowVector = RowVectorT<double>;
using Index = Eigen::Index;

std::string shape_string(Index rows, Index cols);

template <typename Derived>
std::string shape_string(const Eigen::MatrixBase<Derived>& m) {
  return shape_string(m.rows(), m.cols());
}

/// Named parameter tensors plus the set of names the optimizer must not touch.
class ParamStore {
 public:
  void add(const std::string& name, Matrix value, bool frozen = false);

  bool contains(const std::string& name) const { return entries_.count(name) > 0; }
  const Matrix& at(const std::string& name) const;
  Matrix& at(const std::string& name);

  bool is_frozen(const std::string& name) const { return frozen_.count(name) > 0; }
  void set_frozen(const std::string& name, bool frozen);
  // Freezes every entry not in `trainable`.
  void freeze_all_except(const std::set<std::string>& trainable);

  const std::map<std::string, Matrix>& entries() const { return entries_; }
  const std::set<std::string>& frozen() const { return frozen_; }
  std::vector<std::string> names() const;
  std::vector<std::string> trainable_names() const;
  std::size_t trainable_count() const;
  std::size_t total_count() const;

  bool bitwise_equal(const ParamStore& other) const;

 private:
  std::map<std::string, Matrix> entries_;
  std::set<std::string> frozen_;
};

using Gradients = std::map<std::string, Matrix>;

class Tape;

class Var {
 public:
  Var() = default;

  const Matrix& value() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  double scalar() const;
  bool requires_grad() const;
  bool valid() const { return tape_ != nullptr; }
  Tape& tape() const;
  std::size_t id() const { return id_; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, const Matrix&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value);
  Var leaf(Matrix value, bool requires_grad = true);
  // Frozen entries enter the tape as constants; the rest are tracked leaves.
  Var parameter(const ParamStore& store, const std::string& name);

  // Records an op result. `backward` receives the upstream gradient and is
  // only kept when some input requires a gradient.
  Var record(Matrix value, bool requires_grad, Backward backward);

  void backward(const Var& loss);

  const Matrix& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  // Null when no gradient reached the node.
  const Matrix* grad(const Var& v) const;
  Gradients parameter_gradients() const;

  template <typename Derived>
  void accumulate(std::size_t id, const Eigen::MatrixBase<Derived>& g) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return;
    if (!n.has_grad) {
      n.grad = g;
      n.has_grad = true;
    } else {
      n.grad += g;
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    bool has_grad = false;
    Backward backward;
  };

  std::deque<Node> nodes_;
  std::map<std::string, std::size_t> parameters_;
};

// ---------------------------------------------------------------------------
// Differentiable ops. Broadcasting is explicit: add_row broadcasts a 1×c bias
// over rows and scale multiplies by a plain scalar; everything else requires
// matching shapes.

Var matmul(const Var& a, const Var& b);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var hadamard(const Var& a, const Var& b);
Var add_row(const Var& a, const Var& row);
Var scale(const Var& a, double factor);
Var transpose(const Var& a);
Var sum(const Var& a);
Var mean(const Var& a);
// 1×c mean over rows.
Var mean_rows(const Var& a);
Var slice_rows(const Var& a, Index begin, Index count);
Var slice_cols(const Var& a, Index begin, Index count);
Var concat_rows(const std::vector<Var>& parts);
Var concat_cols(const std::vector<Var>& parts);
Var gather_rows(const Var& table, const std::vector<int>& ids);
Var gelu(const Var& a);

// axis 1 normalizes each row, axis 0 normalizes each column.
Var softmax(const Var& a, int axis, double temperature = 1.0);
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
// Each row divided by its L2 norm, floored at `floor`.
Var normalize_rows(const Var& a, double floor = 1e-12);
// Mean negative log-likelihood of `labels` under row-softmax(logits).
Var cross_entropy(const Var& logits, const std::vector<int>& labels);
// Matrix-averaged KL divergence (1/N²)·Σ P log(P/Q) with 0·log 0 = 0.
Var kl_divergence(const Var& p, const Var& q);
// The N×N summands of kl_divergence, already divided by N².
Var kl_terms(const Var& p, const Var& q);

// Plain (tape-free) softmax used by the ops above and by evaluation code.
Matrix softmax_values(const Matrix& a, int axis, double temperature = 1.0);

// ---------------------------------------------------------------------------

enum class Algorithm { sgd, adam };

struct OptimConfig {
  Algorithm algorithm = Algorithm::adam;
  double learning_rate = 1e-3;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.0;

  void validate() const;
};

// Updates non-frozen entries; frozen entries are never written.
class Optimizer {
 public:
  explicit Optimizer(OptimConfig cfg);

  void step(ParamStore& store, const Gradients& grads);
  const OptimConfig& config() const { return cfg_; }
  long steps_taken() const { return steps_; }

 private:
  struct Moments {
    Matrix m;
    Matrix v;
    long t = 0;
  };

  OptimConfig cfg_;
  std::map<std::string, Moments> moments_;
  long steps_ = 0;
};

// ---------------------------------------------------------------------------

using ScalarFunction = std::function<Var(Tape&, const ParamStore&)>;

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_parameter;
  Index worst_index = -1;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t checked = 0;
};

// Central differences against backward() for every element of the named
// entries (all trainable entries when `names` is empty). Relative error is
// |a-n| / max(1, |a|, |n|).
GradCheckReport finite_difference_check(const ScalarFunction& f, ParamStore& store,
                                        double eps,
                                        const std::vector<std::string>& names = {});

}  // namespace panda
