#include "panda/alignment.hpp"

#include <algorithm>
#include <numeric>

namespace panda {

Matrix normalize(const Matrix& s, Normalize mode, double temperature) {
  return softmax_values(s, mode == Normalize::rows ? 1 : 0, temperature);
}

double effective_smoothing(double smoothing, int m) {
  if (m <= 1) return 0.0;
  return std::min(smoothing, 0.5 / static_cast<double>(m));
}

SimilarityBatch make_similarity_batch(const Matrix& rx, const Matrix& ry, double temperature,
                                      double smoothing) {
  SimilarityBatch b;
  b.s = similarity_matrix(rx, ry);
  b.s_t = normalize(b.s, Normalize::rows, temperature);
  b.s_v = normalize(b.s, Normalize::cols, temperature);
  b.gt = ground_truth_matrix(static_cast<int>(b.s.rows()), effective_smoothing(smoothing, static_cast<int>(b.s.rows())));
  b.temperature = temperature;
  return b;
}

Var similarity_matrix(const Var& rx, const Var& ry) {
  if (rx.rows() != ry.rows() || rx.cols() != ry.cols()) {
    throw ShapeError("similarity_matrix: " + shape_string(rx.value()) + " vs " + shape_string(ry.value()));
  }
  return matmul(normalize_rows(rx, kNormFloor), transpose(normalize_rows(ry, kNormFloor)));
}

namespace {

struct Normalized {
  Var s_t;
  Var s_v;
  Var gt;
};

Normalized normalized(const Var& s, double temperature, double smoothing) {
  if (s.rows() != s.cols()) throw ShapeError("similarity matrix must be square, got " + shape_string(s.value()));
  const int m = static_cast<int>(s.rows());
  Tape& t = s.tape();
  return Normalized{softmax(s, 1, temperature), softmax(s, 0, temperature),
                    t.constant(ground_truth_matrix(m, effective_smoothing(smoothing, m)))};
}

}  // namespace

Var contrastive_loss(const Var& s, double temperature, double smoothing, bool reverse) {
  Normalized n = normalized(s, temperature, smoothing);
  if (reverse) return scale(add(kl_divergence(n.gt, n.s_t), kl_divergence(n.gt, n.s_v)), 0.5);
  return scale(add(kl_divergence(n.s_t, n.gt), kl_divergence(n.s_v, n.gt)), 0.5);
}

ContrastiveTerms contrastive_terms(const Var& s, double temperature, double smoothing, bool reverse) {
  Normalized n = normalized(s, temperature, smoothing);
  Var rows = reverse ? kl_terms(n.gt, n.s_t) : kl_terms(n.s_t, n.gt);
  Var cols = reverse ? kl_terms(n.gt, n.s_v) : kl_terms(n.s_v, n.gt);
  ContrastiveTerms out;
  const Index m = s.rows();
  for (Index i = 0; i < m; ++i) {
    out.per_index.push_back(scale(add(sum(slice_rows(rows, i, 1)), sum(slice_cols(cols, i, 1))), 0.5));
  }
  out.total = out.per_index.front();
  for (std::size_t i = 1; i < out.per_index.size(); ++i) out.total = add(out.total, out.per_index[i]);
  return out;
}

// ---------------------------------------------------------------------------

std::string to_string(Ablation a) {
  switch (a) {
    case Ablation::sub_only: return "sub_only";
    case Ablation::cnt: return "cnt";
    case Ablation::cnt_ind: return "cnt+ind";
    case Ablation::full: return "cnt+ind+ove";
  }
  return "?";
}

Ablation parse_ablation(const std::string& s) {
  if (s == "sub_only" || s == "sub") return Ablation::sub_only;
  if (s == "cnt") return Ablation::cnt;
  if (s == "cnt+ind" || s == "cnt_ind") return Ablation::cnt_ind;
  if (s == "cnt+ind+ove" || s == "full") return Ablation::full;
  throw ParameterError("unknown ablation '" + s + "' (sub_only, cnt, cnt+ind, cnt+ind+ove)");
}

bool uses_count(Ablation a) { return a != Ablation::sub_only; }
bool uses_individual(Ablation a) { return a == Ablation::cnt_ind || a == Ablation::full; }
bool uses_overall(Ablation a) { return a == Ablation::full; }

double LossReport::l_ind_sum() const { return std::accumulate(l_ind.begin(), l_ind.end(), 0.0); }

double LossReport::recomposed() const {
  if (l_sub) return *l_sub;
  double t = 0.0;
  if (l_ove) t += lambda1 * *l_ove;
  if (l_cnt) t += lambda2 * *l_cnt;
  return t + l_ind_sum();
}

LossReport total_loss(const std::vector<double>& l_ind, double l_ove, double l_cnt, double lambda1,
                      double lambda2, Ablation ablation, std::optional<double> l_sub) {
  auto finite = [](double v, const char* what) {
    if (!std::isfinite(v)) throw NumericError(std::string("loss component ") + what + " is not finite");
  };
  LossReport r;
  r.lambda1 = lambda1;
  r.lambda2 = lambda2;
  if (ablation == Ablation::sub_only) {
    if (!l_sub) throw ParameterError("sub_only objective needs the sub-pair loss");
    finite(*l_sub, "l_sub");
    r.l_sub = l_sub;
    r.total = *l_sub;
    return r;
  }
  if (uses_individual(ablation)) {
    for (double v : l_ind) finite(v, "l_ind");
    r.l_ind = l_ind;
  }
  if (uses_overall(ablation)) {
    finite(l_ove, "l_ove");
    r.l_ove = l_ove;
  }
  finite(l_cnt, "l_cnt");
  r.l_cnt = l_cnt;
  r.total = r.recomposed();
  return r;
}

}  // namespace panda
