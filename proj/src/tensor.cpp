#include "panda/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

namespace panda {

std::string shape_string(Index rows, Index cols) {
  std::ostringstream os;
  os << "[" << rows << "x" << cols << "]";
  return os.str();
}

// ---------------------------------------------------------------------------
// ParamStore

void ParamStore::add(const std::string& name, Matrix value, bool frozen) {
  if (entries_.count(name)) throw ContractError("duplicate parameter '" + name + "'");
  entries_.emplace(name, std::move(value));
  if (frozen) frozen_.insert(name);
}

const Matrix& ParamStore::at(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw ContractError("unknown parameter '" + name + "'");
  return it->second;
}

Matrix& ParamStore::at(const std::string& name) {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw ContractError("unknown parameter '" + name + "'");
  return it->second;
}

void ParamStore::set_frozen(const std::string& name, bool frozen) {
  if (!contains(name)) throw ContractError("cannot freeze unknown parameter '" + name + "'");
  if (frozen) {
    frozen_.insert(name);
  } else {
    frozen_.erase(name);
  }
}

void ParamStore::freeze_all_except(const std::set<std::string>& trainable) {
  for (const auto& name : trainable) {
    if (!contains(name)) throw ContractError("unknown trainable parameter '" + name + "'");
  }
  frozen_.clear();
  for (const auto& [name, _] : entries_) {
    if (!trainable.count(name)) frozen_.insert(name);
  }
}

std::vector<std::string> ParamStore::names() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& [name, _] : entries_) out.push_back(name);
  return out;
}

std::vector<std::string> ParamStore::trainable_names() const {
  std::vector<std::string> out;
  for (const auto& [name, _] : entries_) {
    if (!is_frozen(name)) out.push_back(name);
  }
  return out;
}

std::size_t ParamStore::trainable_count() const {
  std::size_t n = 0;
  for (const auto& [name, value] : entries_) {
    if (!is_frozen(name)) n += static_cast<std::size_t>(value.size());
  }
  return n;
}

std::size_t ParamStore::total_count() const {
  std::size_t n = 0;
  for (const auto& [_, value] : entries_) n += static_cast<std::size_t>(value.size());
  return n;
}

bool ParamStore::bitwise_equal(const ParamStore& other) const {
  if (frozen_ != other.frozen_ || entries_.size() != other.entries_.size()) return false;
  for (const auto& [name, value] : entries_) {
    auto it = other.entries_.find(name);
    if (it == other.entries_.end()) return false;
    const Matrix& o = it->second;
    if (o.rows() != value.rows() || o.cols() != value.cols()) return false;
    if (value.size() > 0 &&
        std::memcmp(value.data(), o.data(), sizeof(double) * static_cast<std::size_t>(value.size())) != 0) {
      return false;
    }
  }
  return true;
}

// ---------------------------------------------------------------------------
// Tape

const Matrix& Var::value() const { return tape().value(id_); }

double Var::scalar() const {
  const Matrix& v = value();
  if (v.size() != 1) throw ContractError("scalar() on tensor of shape " + shape_string(v));
  return v(0, 0);
}

bool Var::requires_grad() const { return tape().requires_grad(id_); }

Tape& Var::tape() const {
  if (!tape_) throw ContractError("use of an unbound Var");
  return *tape_;
}

Var Tape::constant(Matrix value) { return record(std::move(value), false, nullptr); }

Var Tape::leaf(Matrix value, bool requires_grad) {
  nodes_.push_back(Node{std::move(value), Matrix(), requires_grad, false, nullptr});
  return Var(this, nodes_.size() - 1);
}

Var Tape::parameter(const ParamStore& store, const std::string& name) {
  auto it = parameters_.find(name);
  if (it != parameters_.end()) return Var(this, it->second);
  Var v = leaf(store.at(name), !store.is_frozen(name));
  parameters_.emplace(name, v.id());
  return v;
}

Var Tape::record(Matrix value, bool requires_grad, Backward backward) {
  nodes_.push_back(Node{std::move(value), Matrix(), requires_grad,
                        false, requires_grad ? std::move(backward) : nullptr});
  return Var(this, nodes_.size() - 1);
}

void Tape::backward(const Var& loss) {
  if (&loss.tape() != this) throw ContractError("backward() on a Var from another tape");
  const Matrix& v = loss.value();
  if (v.size() != 1) {
    throw ContractError("backward() needs a scalar loss, got " + shape_string(v));
  }
  for (auto& n : nodes_) {
    n.has_grad = false;
    n.grad.resize(0, 0);
  }
  accumulate(loss.id(), Matrix::Ones(1, 1));
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.has_grad || !n.backward) continue;
    n.backward(*this, n.grad);
  }
}

const Matrix* Tape::grad(const Var& v) const {
  const Node& n = nodes_[v.id()];
  return n.has_grad ? &n.grad : nullptr;
}

Gradients Tape::parameter_gradients() const {
  Gradients out;
  for (const auto& [name, id] : parameters_) {
    const Node& n = nodes_[id];
    if (n.requires_grad && n.has_grad) out.emplace(name, n.grad);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Ops

namespace {

Tape& same_tape(const Var& a, const Var& b) {
  if (&a.tape() != &b.tape()) throw ContractError("operands live on different tapes");
  return a.tape();
}

void require_same_shape(const char* op, const Var& a, const Var& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.value()) + " vs " +
                     shape_string(b.value()));
  }
}

}  // namespace

Var matmul(const Var& a, const Var& b) {
  Tape& t = same_tape(a, b);
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions disagree " + shape_string(a.value()) + " x " +
                     shape_string(b.value()));
  }
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(a.value() * b.value(), a.requires_grad() || b.requires_grad(),
                  [ia, ib](Tape& tp, const Matrix& g) {
                    if (tp.requires_grad(ia)) tp.accumulate(ia, g * tp.value(ib).transpose());
                    if (tp.requires_grad(ib)) tp.accumulate(ib, tp.value(ia).transpose() * g);
                  });
}

Var add(const Var& a, const Var& b) {
  Tape& t = same_tape(a, b);
  require_same_shape("add", a, b);
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(a.value() + b.value(), a.requires_grad() || b.requires_grad(),
                  [ia, ib](Tape& tp, const Matrix& g) {
                    tp.accumulate(ia, g);
                    tp.accumulate(ib, g);
                  });
}

Var sub(const Var& a, const Var& b) {
  Tape& t = same_tape(a, b);
  require_same_shape("sub", a, b);
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(a.value() - b.value(), a.requires_grad() || b.requires_grad(),
                  [ia, ib](Tape& tp, const Matrix& g) {
                    tp.accumulate(ia, g);
                    tp.accumulate(ib, -g);
                  });
}

Var hadamard(const Var& a, const Var& b) {
  Tape& t = same_tape(a, b);
  require_same_shape("hadamard", a, b);
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(a.value().cwiseProduct(b.value()), a.requires_grad() || b.requires_grad(),
                  [ia, ib](Tape& tp, const Matrix& g) {
                    if (tp.requires_grad(ia)) tp.accumulate(ia, g.cwiseProduct(tp.value(ib)));
                    if (tp.requires_grad(ib)) tp.accumulate(ib, g.cwiseProduct(tp.value(ia)));
                  });
}

Var add_row(const Var& a, const Var& row) {
  Tape& t = same_tape(a, row);
  if (row.rows() != 1 || row.cols() != a.cols()) {
    throw ShapeError("add_row: expected [1x" + std::to_string(a.cols()) + "] row, got " +
                     shape_string(row.value()));
  }
  Matrix out = a.value();
  out.rowwise() += row.value().row(0);
  const std::size_t ia = a.id(), ir = row.id();
  return t.record(std::move(out), a.requires_grad() || row.requires_grad(),
                  [ia, ir](Tape& tp, const Matrix& g) {
                    tp.accumulate(ia, g);
                    if (tp.requires_grad(ir)) tp.accumulate(ir, g.colwise().sum());
                  });
}

Var scale(const Var& a, double factor) {
  const std::size_t ia = a.id();
  return a.tape().record(a.value() * factor, a.requires_grad(),
                         [ia, factor](Tape& tp, const Matrix& g) { tp.accumulate(ia, g * factor); });
}

Var transpose(const Var& a) {
  const std::size_t ia = a.id();
  return a.tape().record(a.value().transpose(), a.requires_grad(),
                         [ia](Tape& tp, const Matrix& g) { tp.accumulate(ia, g.transpose()); });
}

Var sum(const Var& a) {
  const std::size_t ia = a.id();
  const Index r = a.rows(), c = a.cols();
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return a.tape().record(std::move(out), a.requires_grad(), [ia, r, c](Tape& tp, const Matrix& g) {
    tp.accumulate(ia, Matrix::Constant(r, c, g(0, 0)));
  });
}

Var mean(const Var& a) {
  if (a.value().size() == 0) throw ShapeError("mean of an empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.value().size()));
}

Var mean_rows(const Var& a) {
  if (a.rows() == 0) throw ShapeError("mean_rows of a tensor with no rows");
  const std::size_t ia = a.id();
  const Index r = a.rows();
  Matrix out = a.value().colwise().mean();
  return a.tape().record(std::move(out), a.requires_grad(), [ia, r](Tape& tp, const Matrix& g) {
    tp.accumulate(ia, g.replicate(r, 1) / static_cast<double>(r));
  });
}

Var slice_rows(const Var& a, Index begin, Index count) {
  if (begin < 0 || count < 0 || begin + count > a.rows()) {
    throw ShapeError("slice_rows: range [" + std::to_string(begin) + "," +
                     std::to_string(begin + count) + ") outside " + shape_string(a.value()));
  }
  const std::size_t ia = a.id();
  const Index r = a.rows(), c = a.cols();
  return a.tape().record(a.value().middleRows(begin, count), a.requires_grad(),
                         [ia, r, c, begin, count](Tape& tp, const Matrix& g) {
                           Matrix full = Matrix::Zero(r, c);
                           full.middleRows(begin, count) = g;
                           tp.accumulate(ia, full);
                         });
}

Var slice_cols(const Var& a, Index begin, Index count) {
  if (begin < 0 || count < 0 || begin + count > a.cols()) {
    throw ShapeError("slice_cols: range [" + std::to_string(begin) + "," +
                     std::to_string(begin + count) + ") outside " + shape_string(a.value()));
  }
  const std::size_t ia = a.id();
  const Index r = a.rows(), c = a.cols();
  return a.tape().record(a.value().middleCols(begin, count), a.requires_grad(),
                         [ia, r, c, begin, count](Tape& tp, const Matrix& g) {
                           Matrix full = Matrix::Zero(r, c);
                           full.middleCols(begin, count) = g;
                           tp.accumulate(ia, full);
                         });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows of nothing");
  Tape& t = parts.front().tape();
  const Index c = parts.front().cols();
  Index r = 0;
  bool rg = false;
  for (const Var& p : parts) {
    same_tape(parts.front(), p);
    if (p.cols() != c) {
      throw ShapeError("concat_rows: column mismatch " + shape_string(parts.front().value()) +
                       " vs " + shape_string(p.value()));
    }
    r += p.rows();
    rg = rg || p.requires_grad();
  }
  Matrix out(r, c);
  std::vector<std::pair<std::size_t, Index>> spans;
  Index at = 0;
  for (const Var& p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    spans.emplace_back(p.id(), p.rows());
    at += p.rows();
  }
  return t.record(std::move(out), rg, [spans](Tape& tp, const Matrix& g) {
    Index off = 0;
    for (const auto& [id, rows] : spans) {
      if (tp.requires_grad(id)) tp.accumulate(id, g.middleRows(off, rows));
      off += rows;
    }
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols of nothing");
  Tape& t = parts.front().tape();
  const Index r = parts.front().rows();
  Index c = 0;
  bool rg = false;
  for (const Var& p : parts) {
    same_tape(parts.front(), p);
    if (p.rows() != r) {
      throw ShapeError("concat_cols: row mismatch " + shape_string(parts.front().value()) +
                       " vs " + shape_string(p.value()));
    }
    c += p.cols();
    rg = rg || p.requires_grad();
  }
  Matrix out(r, c);
  std::vector<std::pair<std::size_t, Index>> spans;
  Index at = 0;
  for (const Var& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    spans.emplace_back(p.id(), p.cols());
    at += p.cols();
  }
  return t.record(std::move(out), rg, [spans](Tape& tp, const Matrix& g) {
    Index off = 0;
    for (const auto& [id, cols] : spans) {
      if (tp.requires_grad(id)) tp.accumulate(id, g.middleCols(off, cols));
      off += cols;
    }
  });
}

Var gather_rows(const Var& table, const std::vector<int>& ids) {
  const Matrix& tv = table.value();
  Matrix out(static_cast<Index>(ids.size()), tv.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= tv.rows()) {
      throw InputError("gather_rows: id " + std::to_string(ids[i]) + " outside table of " +
                       std::to_string(tv.rows()) + " rows");
    }
    out.row(static_cast<Index>(i)) = tv.row(ids[i]);
  }
  const std::size_t it = table.id();
  const Index r = tv.rows(), c = tv.cols();
  return table.tape().record(std::move(out), table.requires_grad(),
                             [it, r, c, ids](Tape& tp, const Matrix& g) {
                               Matrix full = Matrix::Zero(r, c);
                               for (std::size_t i = 0; i < ids.size(); ++i) {
                                 full.row(ids[i]) += g.row(static_cast<Index>(i));
                               }
                               tp.accumulate(it, full);
                             });
}

Var gelu(const Var& a) {
  constexpr double kAlpha = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kBeta = 0.044715;
  const Matrix& x = a.value();
  Matrix out(x.rows(), x.cols());
  for (Index i = 0; i < x.size(); ++i) {
    const double v = x.data()[i];
    out.data()[i] = 0.5 * v * (1.0 + std::tanh(kAlpha * (v + kBeta * v * v * v)));
  }
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), a.requires_grad(), [ia](Tape& tp, const Matrix& g) {
    const Matrix& xv = tp.value(ia);
    Matrix dx(xv.rows(), xv.cols());
    for (Index i = 0; i < xv.size(); ++i) {
      const double v = xv.data()[i];
      const double th = std::tanh(kAlpha * (v + kBeta * v * v * v));
      const double d = 0.5 * (1.0 + th) +
                       0.5 * v * (1.0 - th * th) * kAlpha * (1.0 + 3.0 * kBeta * v * v);
      dx.data()[i] = g.data()[i] * d;
    }
    tp.accumulate(ia, dx);
  });
}

Matrix softmax_values(const Matrix& a, int axis, double temperature) {
  if (!(temperature > 0.0)) {
    throw ParameterError("softmax temperature must be positive, got " + std::to_string(temperature));
  }
  if (axis != 0 && axis != 1) throw ParameterError("softmax axis must be 0 or 1");
  Matrix out(a.rows(), a.cols());
  if (axis == 1) {
    for (Index r = 0; r < a.rows(); ++r) {
      const double mx = a.row(r).maxCoeff();
      out.row(r) = ((a.row(r).array() - mx) / temperature).exp().matrix();
      out.row(r) /= out.row(r).sum();
    }
  } else {
    for (Index c = 0; c < a.cols(); ++c) {
      const double mx = a.col(c).maxCoeff();
      out.col(c) = ((a.col(c).array() - mx) / temperature).exp().matrix();
      out.col(c) /= out.col(c).sum();
    }
  }
  return out;
}

Var softmax(const Var& a, int axis, double temperature) {
  Matrix out = softmax_values(a.value(), axis, temperature);
  const std::size_t ia = a.id();
  return a.tape().record(out, a.requires_grad(), [ia, out, axis, temperature](Tape& tp, const Matrix& g) {
    Matrix gy = g.cwiseProduct(out);
    Matrix dx;
    if (axis == 1) {
      Eigen::VectorXd s = gy.rowwise().sum();
      dx = gy - out.cwiseProduct(s.replicate(1, out.cols()));
    } else {
      RowVector s = gy.colwise().sum();
      dx = gy - out.cwiseProduct(s.replicate(out.rows(), 1));
    }
    tp.accumulate(ia, dx / temperature);
  });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  Tape& t = same_tape(x, gamma);
  same_tape(x, beta);
  const Index c = x.cols();
  if (gamma.rows() != 1 || gamma.cols() != c || beta.rows() != 1 || beta.cols() != c) {
    throw ShapeError("layer_norm: gamma " + shape_string(gamma.value()) + " / beta " +
                     shape_string(beta.value()) + " do not match input " + shape_string(x.value()));
  }
  if (!(eps > 0.0)) throw ParameterError("layer_norm eps must be positive");
  const Matrix& xv = x.value();
  Matrix xhat(xv.rows(), c);
  Eigen::VectorXd inv_std(xv.rows());
  for (Index r = 0; r < xv.rows(); ++r) {
    const double mu = xv.row(r).mean();
    const double var = (xv.row(r).array() - mu).square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (xv.row(r).array() - mu) * inv_std(r);
  }
  Matrix out = xhat.array().rowwise() * gamma.value().row(0).array();
  out.rowwise() += beta.value().row(0);
  const std::size_t ix = x.id(), ig = gamma.id(), ib = beta.id();
  const bool rg = x.requires_grad() || gamma.requires_grad() || beta.requires_grad();
  return t.record(std::move(out), rg, [ix, ig, ib, xhat, inv_std](Tape& tp, const Matrix& g) {
    if (tp.requires_grad(ig)) tp.accumulate(ig, g.cwiseProduct(xhat).colwise().sum());
    if (tp.requires_grad(ib)) tp.accumulate(ib, g.colwise().sum());
    if (tp.requires_grad(ix)) {
      Matrix dxhat = g.array().rowwise() * tp.value(ig).row(0).array();
      Matrix dx(dxhat.rows(), dxhat.cols());
      for (Index r = 0; r < dxhat.rows(); ++r) {
        const double m1 = dxhat.row(r).mean();
        const double m2 = dxhat.row(r).dot(xhat.row(r)) / static_cast<double>(dxhat.cols());
        dx.row(r) = (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2) * inv_std(r);
      }
      tp.accumulate(ix, dx);
    }
  });
}

Var normalize_rows(const Var& a, double floor) {
  const Matrix& av = a.value();
  Eigen::VectorXd norms(av.rows());
  Matrix out(av.rows(), av.cols());
  for (Index r = 0; r < av.rows(); ++r) {
    norms(r) = std::max(av.row(r).norm(), floor);
    out.row(r) = av.row(r) / norms(r);
  }
  const std::size_t ia = a.id();
  return a.tape().record(out, a.requires_grad(), [ia, out, norms, floor](Tape& tp, const Matrix& g) {
    Matrix dx(g.rows(), g.cols());
    for (Index r = 0; r < g.rows(); ++r) {
      if (norms(r) > floor) {
        dx.row(r) = (g.row(r) - out.row(r) * g.row(r).dot(out.row(r))) / norms(r);
      } else {
        dx.row(r) = g.row(r) / floor;
      }
    }
    tp.accumulate(ia, dx);
  });
}

Var cross_entropy(const Var& logits, const std::vector<int>& labels) {
  const Matrix& z = logits.value();
  if (static_cast<Index>(labels.size()) != z.rows()) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for logits " +
                     shape_string(z));
  }
  Matrix probs = softmax_values(z, 1, 1.0);
  double loss = 0.0;
  for (Index r = 0; r < z.rows(); ++r) {
    const int y = labels[static_cast<std::size_t>(r)];
    if (y < 0 || y >= z.cols()) throw InputError("cross_entropy: label " + std::to_string(y) + " out of range");
    const double mx = z.row(r).maxCoeff();
    const double lse = mx + std::log((z.row(r).array() - mx).exp().sum());
    loss += lse - z(r, y);
  }
  const double n = static_cast<double>(z.rows());
  Matrix out(1, 1);
  out(0, 0) = loss / n;
  const std::size_t iz = logits.id();
  return logits.tape().record(std::move(out), logits.requires_grad(),
                              [iz, probs, labels, n](Tape& tp, const Matrix& g) {
                                Matrix d = probs;
                                for (std::size_t r = 0; r < labels.size(); ++r) {
                                  d(static_cast<Index>(r), labels[r]) -= 1.0;
                                }
                                tp.accumulate(iz, d * (g(0, 0) / n));
                              });
}

Var kl_terms(const Var& p, const Var& q) {
  Tape& t = same_tape(p, q);
  require_same_shape("kl_divergence", p, q);
  const Matrix& pv = p.value();
  const Matrix& qv = q.value();
  if (pv.rows() != pv.cols()) throw ShapeError("kl_divergence expects square matrices, got " + shape_string(pv));
  const double n2 = static_cast<double>(pv.size());
  Matrix out(pv.rows(), pv.cols());
  for (Index i = 0; i < pv.size(); ++i) {
    const double a = pv.data()[i];
    const double b = qv.data()[i];
    if (a < 0.0 || b < 0.0) throw DivergenceError("kl_divergence: negative entry");
    if (a > 0.0 && b == 0.0) {
      throw DivergenceError("kl_divergence: P > 0 where Q == 0 at flat index " + std::to_string(i));
    }
    out.data()[i] = a > 0.0 ? a * std::log(a / b) / n2 : 0.0;
  }
  const std::size_t ip = p.id(), iq = q.id();
  return t.record(std::move(out), p.requires_grad() || q.requires_grad(),
                  [ip, iq, n2](Tape& tp, const Matrix& g) {
                    const Matrix& a = tp.value(ip);
                    const Matrix& b = tp.value(iq);
                    if (tp.requires_grad(ip)) {
                      Matrix d(a.rows(), a.cols());
                      for (Index i = 0; i < a.size(); ++i) {
                        const double x = a.data()[i];
                        d.data()[i] = x > 0.0 ? g.data()[i] * (std::log(x / b.data()[i]) + 1.0) / n2 : 0.0;
                      }
                      tp.accumulate(ip, d);
                    }
                    if (tp.requires_grad(iq)) {
                      Matrix d(a.rows(), a.cols());
                      for (Index i = 0; i < a.size(); ++i) {
                        const double x = a.data()[i];
                        d.data()[i] = x > 0.0 ? -g.data()[i] * x / (b.data()[i] * n2) : 0.0;
                      }
                      tp.accumulate(iq, d);
                    }
                  });
}

Var kl_divergence(const Var& p, const Var& q) { return sum(kl_terms(p, q)); }

// ---------------------------------------------------------------------------
// Optimizer

void OptimConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ParameterError("learning_rate must be positive");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0)) throw ParameterError("adam_beta1 must be in [0,1)");
  if (!(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) throw ParameterError("adam_beta2 must be in [0,1)");
  if (!(adam_eps > 0.0)) throw ParameterError("adam_eps must be positive");
  if (!(weight_decay >= 0.0)) throw ParameterError("weight_decay must be nonnegative");
}

Optimizer::Optimizer(OptimConfig cfg) : cfg_(cfg) { cfg_.validate(); }

void Optimizer::step(ParamStore& store, const Gradients& grads) {
  for (const auto& [name, g] : grads) {
    if (!store.contains(name)) throw ContractError("gradient for unknown parameter '" + name + "'");
    const Matrix& p = store.at(name);
    if (g.rows() != p.rows() || g.cols() != p.cols()) {
      throw ShapeError("gradient for '" + name + "' has shape " + shape_string(g) +
                       ", parameter is " + shape_string(p));
    }
  }
  for (const auto& [name, g] : grads) {
    if (store.is_frozen(name)) continue;
    Matrix& p = store.at(name);
    Matrix grad = g;
    if (cfg_.weight_decay > 0.0) grad += cfg_.weight_decay * p;
    if (cfg_.algorithm == Algorithm::sgd) {
      p -= cfg_.learning_rate * grad;
      continue;
    }
    Moments& mo = moments_[name];
    if (mo.t == 0) {
      mo.m = Matrix::Zero(p.rows(), p.cols());
      mo.v = Matrix::Zero(p.rows(), p.cols());
    }
    ++mo.t;
    mo.m = cfg_.adam_beta1 * mo.m + (1.0 - cfg_.adam_beta1) * grad;
    mo.v = cfg_.adam_beta2 * mo.v + (1.0 - cfg_.adam_beta2) * grad.cwiseProduct(grad);
    const double bc1 = 1.0 - std::pow(cfg_.adam_beta1, static_cast<double>(mo.t));
    const double bc2 = 1.0 - std::pow(cfg_.adam_beta2, static_cast<double>(mo.t));
    p.array() -= cfg_.learning_rate * (mo.m.array() / bc1) /
                 ((mo.v.array() / bc2).sqrt() + cfg_.adam_eps);
  }
  ++steps_;
}

// ---------------------------------------------------------------------------
// Finite-difference verification

namespace {

double evaluate(const ScalarFunction& f, const ParamStore& store) {
  Tape tape;
  return f(tape, store).scalar();
}

}  // namespace

GradCheckReport finite_difference_check(const ScalarFunction& f, ParamStore& store, double eps,
                                        const std::vector<std::string>& names) {
  if (!(eps >= 1e-7 && eps <= 1e-3)) {
    throw ParameterError("finite-difference eps must lie in [1e-7, 1e-3]");
  }
  std::vector<std::string> targets = names.empty() ? store.trainable_names() : names;

  Tape tape;
  Var loss = f(tape, store);
  const double base = loss.scalar();
  const double again = evaluate(f, store);
  if (std::memcmp(&base, &again, sizeof(double)) != 0) {
    throw CheckError("function under check is not deterministic");
  }
  tape.backward(loss);
  Gradients analytic = tape.parameter_gradients();

  GradCheckReport report;
  for (const auto& name : targets) {
    Matrix& p = store.at(name);
    const Matrix* a = nullptr;
    auto it = analytic.find(name);
    if (it != analytic.end()) a = &it->second;
    for (Index i = 0; i < p.size(); ++i) {
      const double orig = p.data()[i];
      p.data()[i] = orig + eps;
      const double fp = evaluate(f, store);
      p.data()[i] = orig - eps;
      const double fm = evaluate(f, store);
      p.data()[i] = orig;
      const double numeric = (fp - fm) / (2.0 * eps);
      const double an = a ? a->data()[i] : 0.0;
      const double rel = std::abs(an - numeric) /
                         std::max({1.0, std::abs(an), std::abs(numeric)});
      ++report.checked;
      if (rel > report.max_rel_error || report.worst_index < 0) {
        report.max_rel_error = rel;
        report.worst_parameter = name;
        report.worst_index = i;
        report.worst_analytic = an;
        report.worst_numeric = numeric;
      }
    }
  }
  return report;
}

}  // namespace panda
