#pragma once

// Vision-text contrastive alignment: cosine similarity matrices, softmax
// normalization over rows (S_T) and columns (S_V), a smoothed ground-truth
// matrix, the matrix-averaged KL divergence, the symmetric contrastive loss
// and the weighted total objective.
//
// Plain-value versions are templates over Eigen expressions; the Var
// overloads record the same math on a tape for training.

#include <Eigen/Dense>

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "panda/errors.hpp"
#include "panda/tensor.hpp"

namespace panda {

inline constexpr double kNormFloor = 1e-12;
inline constexpr double kDefaultLambda1 = 0.5;
inline constexpr double kDefaultLambda2 = 0.1;
inline constexpr double kDefaultTemperature = 0.1;
inline constexpr double kDefaultSmoothing = 0.05;

template <typename Scalar>
struct Cosine {
  Scalar value;
  bool degenerate;  // one of the inputs was the zero vector
};

template <typename DerivedX, typename DerivedY>
Cosine<typename DerivedX::Scalar> cosine_similarity(const Eigen::MatrixBase<DerivedX>& rx,
                                                    const Eigen::MatrixBase<DerivedY>& ry) {
  using Scalar = typename DerivedX::Scalar;
  if (rx.size() != ry.size()) {
    throw ShapeError("cosine_similarity: dimension mismatch " + std::to_string(rx.size()) + " vs " +
                     std::to_string(ry.size()));
  }
  const Scalar nx = rx.norm();
  const Scalar ny = ry.norm();
  if (nx == Scalar(0) || ny == Scalar(0)) return {Scalar(0), true};
  const Scalar dot = rx.reshaped().dot(ry.reshaped());
  return {dot / (std::max(nx, Scalar(kNormFloor)) * std::max(ny, Scalar(kNormFloor))), false};
}

// S[a][b] = cos(Rx.row(a), Ry.row(b)).
template <typename DerivedX, typename DerivedY>
MatrixT<typename DerivedX::Scalar> similarity_matrix(const Eigen::MatrixBase<DerivedX>& rx,
                                                     const Eigen::MatrixBase<DerivedY>& ry) {
  using Scalar = typename DerivedX::Scalar;
  if (rx.rows() != ry.rows() || rx.cols() != ry.cols()) {
    throw ShapeError("similarity_matrix: " + shape_string(rx) + " vs " + shape_string(ry));
  }
  MatrixT<Scalar> nx = rx;
  MatrixT<Scalar> ny = ry;
  for (Index r = 0; r < nx.rows(); ++r) {
    nx.row(r) /= std::max(nx.row(r).norm(), Scalar(kNormFloor));
    ny.row(r) /= std::max(ny.row(r).norm(), Scalar(kNormFloor));
  }
  return nx * ny.transpose();
}

enum class Normalize { rows, cols };

// Softmax along rows (S_T) or columns (S_V) at `temperature`.
Matrix normalize(const Matrix& s, Normalize mode, double temperature);

// Identity smoothed to 1-ε(M-1) on the diagonal and ε elsewhere.
template <typename Scalar = double>
MatrixT<Scalar> ground_truth_matrix(int m, Scalar eps) {
  if (m < 1) throw ParameterError("ground_truth_matrix needs M >= 1");
  if (m == 1) return MatrixT<Scalar>::Ones(1, 1);
  if (!(eps >= Scalar(0) && eps < Scalar(1) / Scalar(m))) {
    throw ParameterError("smoothing must lie in [0, 1/M) = [0, " + std::to_string(1.0 / m) + ")");
  }
  MatrixT<Scalar> gt = MatrixT<Scalar>::Constant(m, m, eps);
  gt.diagonal().setConstant(Scalar(1) - eps * Scalar(m - 1));
  return gt;
}

// (1/N²)·Σ_ij P_ij log(P_ij / Q_ij), 0·log 0 = 0.
template <typename DerivedP, typename DerivedQ>
typename DerivedP::Scalar kl_divergence(const Eigen::MatrixBase<DerivedP>& p,
                                        const Eigen::MatrixBase<DerivedQ>& q) {
  using Scalar = typename DerivedP::Scalar;
  if (p.rows() != q.rows() || p.cols() != q.cols() || p.rows() != p.cols()) {
    throw ShapeError("kl_divergence: needs equal square matrices, got " + shape_string(p) + " and " +
                     shape_string(q));
  }
  Scalar acc(0);
  for (Index i = 0; i < p.rows(); ++i) {
    for (Index j = 0; j < p.cols(); ++j) {
      const Scalar a = p(i, j);
      if (a == Scalar(0)) continue;
      if (q(i, j) == Scalar(0)) {
        throw DivergenceError("kl_divergence: P > 0 where Q == 0 at (" + std::to_string(i) + "," +
                              std::to_string(j) + ")");
      }
      acc += a * std::log(a / q(i, j));
    }
  }
  return acc / static_cast<Scalar>(p.size());
}

// ½·[D(S_T‖GT) + D(S_V‖GT)], or with each divergence flipped when `reverse`.
template <typename DerivedT, typename DerivedV, typename DerivedG>
typename DerivedT::Scalar contrastive_loss(const Eigen::MatrixBase<DerivedT>& s_t,
                                           const Eigen::MatrixBase<DerivedV>& s_v,
                                           const Eigen::MatrixBase<DerivedG>& gt, bool reverse = false) {
  if (reverse) return 0.5 * (kl_divergence(gt, s_t) + kl_divergence(gt, s_v));
  return 0.5 * (kl_divergence(s_t, gt) + kl_divergence(s_v, gt));
}

struct SimilarityBatch {
  Matrix s;
  Matrix s_t;
  Matrix s_v;
  Matrix gt;
  double temperature = kDefaultTemperature;
};

SimilarityBatch make_similarity_batch(const Matrix& rx, const Matrix& ry, double temperature,
                                      double smoothing);

// Smoothing actually applied to an M×M ground truth: the configured ε,
// capped at half the admissible bound so large batches keep a dominant
// diagonal.
double effective_smoothing(double smoothing, int m);

// ---------------------------------------------------------------------------
// Differentiable versions.

Var similarity_matrix(const Var& rx, const Var& ry);

struct ContrastiveTerms {
  Var total;
  // total split by index: row i of S_T plus column i of S_V.
  std::vector<Var> per_index;
};

// Contrastive loss of a similarity matrix against the smoothed ground truth.
Var contrastive_loss(const Var& s, double temperature, double smoothing, bool reverse = false);
ContrastiveTerms contrastive_terms(const Var& s, double temperature, double smoothing,
                                   bool reverse = false);

// ---------------------------------------------------------------------------
// Weighted objective.

// Which terms enter the objective: the prompt-free sub-pair loss alone, or
// the count / individual / overall terms.
enum class Ablation { sub_only, cnt, cnt_ind, full };

std::string to_string(Ablation a);
Ablation parse_ablation(const std::string& s);
bool uses_count(Ablation a);
bool uses_individual(Ablation a);
bool uses_overall(Ablation a);

struct LossReport {
  std::vector<double> l_ind;
  std::optional<double> l_ove;
  std::optional<double> l_cnt;
  std::optional<double> l_sub;
  double total = 0.0;
  double lambda1 = kDefaultLambda1;
  double lambda2 = kDefaultLambda2;

  double l_ind_sum() const;
  // λ1·l_ove + λ2·l_cnt + Σ l_ind (or l_sub alone).
  double recomposed() const;
};

// Absent terms are left unset; `l_sub` is required for Ablation::sub_only.
LossReport total_loss(const std::vector<double>& l_ind, double l_ove, double l_cnt,
                      double lambda1 = kDefaultLambda1, double lambda2 = kDefaultLambda2,
                      Ablation ablation = Ablation::full, std::optional<double> l_sub = std::nullopt);

}  // namespace panda
