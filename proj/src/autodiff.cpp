#include "maple/autodiff.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace maple {

Parameter& ParamStore::add(const std::string& name, Matrix value) {
  auto [it, inserted] = params_.try_emplace(name);
  if (!inserted) throw std::invalid_argument("duplicate parameter: " + name);
  it->second.name = name;
  it->second.grad = Matrix::Zero(value.rows(), value.cols());
  it->second.value = std::move(value);
  return it->second;
}

Parameter& ParamStore::at(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("unknown parameter: " + name);
  return it->second;
}

const Parameter& ParamStore::at(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("unknown parameter: " + name);
  return it->second;
}

void ParamStore::zero_grad() {
  for (auto& [_, p] : params_) p.grad.setZero(p.value.rows(), p.value.cols());
}

std::size_t ParamStore::num_scalars() const {
  std::size_t n = 0;
  for (const auto& [_, p] : params_) n += static_cast<std::size_t>(p.value.size());
  return n;
}

bool ParamStore::all_finite() const {
  for (const auto& [_, p] : params_)
    if (!p.value.allFinite()) return false;
  return true;
}

namespace ad {

const Matrix& Var::value() const { return tape->value(*this); }

Var Tape::push(Matrix value, bool requires_grad, Backward backward) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = record_ && requires_grad;
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::constant(Matrix value) { return push(std::move(value), false, nullptr); }

Var Tape::input(Matrix value) { return push(std::move(value), true, nullptr); }

Var Tape::param(const Parameter& p) {
  if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return Var{this, it->second};
  Var v = push(p.value, true, nullptr);
  nodes_[v.id].param = &p;
  param_nodes_.emplace(&p, v.id);
  return v;
}

Matrix& Tape::grad_buffer(int id) {
  Node& n = nodes_[id];
  if (n.grad.size() == 0) n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

Matrix Tape::grad(Var v) const {
  const Node& n = nodes_[v.id];
  if (n.grad.size() == 0) return Matrix::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

void Tape::backward(Var root) {
  if (!record_) throw std::logic_error("backward() on a non-recording tape");
  if (root.tape != this || root.rows() != 1 || root.cols() != 1)
    throw std::invalid_argument("backward() needs a 1x1 root on this tape");
  if (!nodes_[root.id].requires_grad) return;
  for (auto& n : nodes_) n.grad.resize(0, 0);
  grad_buffer(root.id)(0, 0) = 1.0;
  for (int i = root.id; i >= 0; --i) {
    Node& n = nodes_[i];
    if (n.grad.size() == 0) continue;
    if (n.backward) n.backward(*this, i);
  }
}

Matrix Tape::param_grad(const Parameter& p) const {
  if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return grad(Var{const_cast<Tape*>(this), it->second});
  return Matrix::Zero(p.value.rows(), p.value.cols());
}

void Tape::add_param_grads(ParamStore& store) const {
  for (auto& [name, p] : store) {
    auto it = param_nodes_.find(&p);
    if (it == param_nodes_.end()) continue;
    const Node& n = nodes_[static_cast<std::size_t>(it->second)];
    if (n.grad.size() != 0) p.grad += n.grad;
  }
}

namespace {

Tape& same_tape(Var a, Var b) {
  if (a.tape != b.tape) throw std::invalid_argument("operands live on different tapes");
  return *a.tape;
}

void check_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw std::invalid_argument(std::string(op) + ": shape mismatch");
}

// Accumulates into operand `id` when it participates in differentiation.
template <class Expr>
void accumulate(Tape& t, int id, const Expr& e) {
  if (t.node_requires_grad(id)) t.grad_buffer(id) += e;
}

}  // namespace

Var add(Var a, Var b) {
  Tape& t = same_tape(a, b);
  check_same_shape(a.value(), b.value(), "add");
  const int ia = a.id, ib = b.id;
  return t.push(a.value() + b.value(), t.requires_grad(a) || t.requires_grad(b),
                [ia, ib](Tape& t, int self) {
                  const Matrix& g = t.node_grad(self);
                  accumulate(t, ia, g);
                  accumulate(t, ib, g);
                });
}

Var sub(Var a, Var b) {
  Tape& t = same_tape(a, b);
  check_same_shape(a.value(), b.value(), "sub");
  const int ia = a.id, ib = b.id;
  return t.push(a.value() - b.value(), t.requires_grad(a) || t.requires_grad(b),
                [ia, ib](Tape& t, int self) {
                  const Matrix& g = t.node_grad(self);
                  accumulate(t, ia, g);
                  accumulate(t, ib, -g);
                });
}

Var scale(Var a, double s) {
  Tape& t = *a.tape;
  const int ia = a.id;
  return t.push(a.value() * s, t.requires_grad(a),
                [ia, s](Tape& t, int self) { accumulate(t, ia, t.node_grad(self) * s); });
}

Var matmul(Var a, Var b) {
  Tape& t = same_tape(a, b);
  if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dimension mismatch");
  const int ia = a.id, ib = b.id;
  return t.push(a.value() * b.value(), t.requires_grad(a) || t.requires_grad(b),
                [ia, ib](Tape& t, int self) {
                  const Matrix& g = t.node_grad(self);
                  if (t.node_requires_grad(ia)) t.grad_buffer(ia).noalias() += g * t.value({&t, ib}).transpose();
                  if (t.node_requires_grad(ib)) t.grad_buffer(ib).noalias() += t.value({&t, ia}).transpose() * g;
                });
}

Var linear(Var x, Var weight, Var bias) {
  Tape& t = same_tape(x, weight);
  if (x.cols() != weight.rows() || bias.rows() != 1 || bias.cols() != weight.cols())
    throw std::invalid_argument("linear: shape mismatch");
  Matrix out(x.rows(), weight.cols());
  out.noalias() = x.value() * weight.value();
  out.rowwise() += bias.value().row(0);
  const int ix = x.id, iw = weight.id, ib = bias.id;
  const bool rg = t.requires_grad(x) || t.requires_grad(weight) || t.requires_grad(bias);
  return t.push(std::move(out), rg, [ix, iw, ib](Tape& t, int self) {
    const Matrix& g = t.node_grad(self);
    if (t.node_requires_grad(ix)) t.grad_buffer(ix).noalias() += g * t.value({&t, iw}).transpose();
    if (t.node_requires_grad(iw)) t.grad_buffer(iw).noalias() += t.value({&t, ix}).transpose() * g;
    if (t.node_requires_grad(ib)) t.grad_buffer(ib) += g.colwise().sum();
  });
}

double gelu_value(double x) { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); }

Var gelu(Var x) {
  Tape& t = *x.tape;
  const Matrix& in = x.value();
  Matrix out(in.rows(), in.cols());
  const bool grad = t.recording() && t.requires_grad(x);
  Matrix deriv;
  if (grad) deriv.resize(in.rows(), in.cols());
  const double inv_sqrt2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
  for (Eigen::Index i = 0; i < in.size(); ++i) {
    const double v = in.data()[i];
    const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
    out.data()[i] = v * cdf;
    if (grad) deriv.data()[i] = cdf + v * inv_sqrt2pi * std::exp(-0.5 * v * v);
  }
  const int ix = x.id;
  return t.push(std::move(out), grad, [ix, deriv = std::move(deriv)](Tape& t, int self) {
    accumulate(t, ix, t.node_grad(self).cwiseProduct(deriv));
  });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  Tape& t = same_tape(x, gamma);
  const Matrix& in = x.value();
  const Eigen::Index n = in.rows(), d = in.cols();
  if (gamma.rows() != 1 || gamma.cols() != d || beta.rows() != 1 || beta.cols() != d)
    throw std::invalid_argument("layer_norm: affine shape mismatch");
  Matrix xhat(n, d);
  Vector inv_std(n);
  for (Eigen::Index r = 0; r < n; ++r) {
    const double mean = in.row(r).mean();
    const double var = (in.row(r).array() - mean).square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (in.row(r).array() - mean) * inv_std(r);
  }
  Matrix out = xhat.array().rowwise() * gamma.value().row(0).array();
  out.rowwise() += beta.value().row(0);
  const int ix = x.id, ig = gamma.id, ib = beta.id;
  const bool rg = t.requires_grad(x) || t.requires_grad(gamma) || t.requires_grad(beta);
  return t.push(std::move(out), rg,
                [ix, ig, ib, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t, int self) {
                  const Matrix& g = t.node_grad(self);
                  if (t.node_requires_grad(ig)) t.grad_buffer(ig) += g.cwiseProduct(xhat).colwise().sum();
                  if (t.node_requires_grad(ib)) t.grad_buffer(ib) += g.colwise().sum();
                  if (!t.node_requires_grad(ix)) return;
                  const auto gamma_row = t.value({&t, ig}).row(0).array();
                  Matrix& gx = t.grad_buffer(ix);
                  const double d = static_cast<double>(g.cols());
                  for (Eigen::Index r = 0; r < g.rows(); ++r) {
                    const Eigen::ArrayXd gh = (g.row(r).array() * gamma_row).transpose();
                    const Eigen::ArrayXd xh = xhat.row(r).array().transpose();
                    const double mean_gh = gh.sum() / d;
                    const double mean_ghx = (gh * xh).sum() / d;
                    gx.row(r).array() += (inv_std(r) * (gh - mean_gh - xh * mean_ghx)).transpose();
                  }
                });
}

Var stop_gradient(Var a) { return a.tape->constant(a.value()); }

Var gather_rows(Var x, std::vector<int> rows) {
  Tape& t = *x.tape;
  const Matrix& in = x.value();
  Matrix out(static_cast<Eigen::Index>(rows.size()), in.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] < 0 || rows[r] >= in.rows()) throw std::invalid_argument("gather_rows: index out of range");
    out.row(static_cast<Eigen::Index>(r)) = in.row(rows[r]);
  }
  const int ix = x.id;
  return t.push(std::move(out), t.requires_grad(x), [ix, rows = std::move(rows)](Tape& t, int self) {
    const Matrix& g = t.node_grad(self);
    Matrix& gx = t.grad_buffer(ix);
    for (std::size_t r = 0; r < rows.size(); ++r) gx.row(rows[r]) += g.row(static_cast<Eigen::Index>(r));
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no operands");
  Tape& t = *parts[0].tape;
  const Eigen::Index n = parts[0].rows();
  Eigen::Index total = 0;
  bool rg = false;
  std::vector<int> ids;
  std::vector<Eigen::Index> widths;
  for (const Var& p : parts) {
    if (p.tape != &t || p.rows() != n) throw std::invalid_argument("concat_cols: row mismatch");
    total += p.cols();
    rg = rg || t.requires_grad(p);
    ids.push_back(p.id);
    widths.push_back(p.cols());
  }
  Matrix out(n, total);
  Eigen::Index c = 0;
  for (const Var& p : parts) {
    out.middleCols(c, p.cols()) = p.value();
    c += p.cols();
  }
  return t.push(std::move(out), rg, [ids = std::move(ids), widths = std::move(widths)](Tape& t, int self) {
    const Matrix& g = t.node_grad(self);
    Eigen::Index c = 0;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      accumulate(t, ids[i], g.middleCols(c, widths[i]));
      c += widths[i];
    }
  });
}

Var assemble_rows(Var src, Var fill, std::vector<int> map) {
  Tape& t = same_tape(src, fill);
  if (fill.rows() != 1 || fill.cols() != src.cols()) throw std::invalid_argument("assemble_rows: fill must be 1 x D");
  Matrix out(static_cast<Eigen::Index>(map.size()), src.cols());
  for (std::size_t r = 0; r < map.size(); ++r) {
    if (map[r] >= src.rows()) throw std::invalid_argument("assemble_rows: index out of range");
    out.row(static_cast<Eigen::Index>(r)) = map[r] >= 0 ? src.value().row(map[r]) : fill.value().row(0);
  }
  const int is = src.id, ifl = fill.id;
  return t.push(std::move(out), t.requires_grad(src) || t.requires_grad(fill),
                [is, ifl, map = std::move(map)](Tape& t, int self) {
                  const Matrix& g = t.node_grad(self);
                  const bool gs = t.node_requires_grad(is), gf = t.node_requires_grad(ifl);
                  for (std::size_t r = 0; r < map.size(); ++r) {
                    const auto row = g.row(static_cast<Eigen::Index>(r));
                    if (map[r] >= 0) {
                      if (gs) t.grad_buffer(is).row(map[r]) += row;
                    } else if (gf) {
                      t.grad_buffer(ifl).row(0) += row;
                    }
                  }
                });
}

Var group_max(Var x, int group) {
  Tape& t = *x.tape;
  const Matrix& in = x.value();
  if (group < 1 || in.rows() % group != 0) throw std::invalid_argument("group_max: rows not divisible by group");
  const Eigen::Index groups = in.rows() / group, d = in.cols();
  Matrix out(groups, d);
  std::vector<int> arg(static_cast<std::size_t>(groups * d));
  for (Eigen::Index g = 0; g < groups; ++g) {
    for (Eigen::Index c = 0; c < d; ++c) {
      Eigen::Index best = g * group;
      for (Eigen::Index r = best + 1; r < (g + 1) * group; ++r)
        if (in(r, c) > in(best, c)) best = r;
      out(g, c) = in(best, c);
      arg[static_cast<std::size_t>(g * d + c)] = static_cast<int>(best);
    }
  }
  const int ix = x.id;
  return t.push(std::move(out), t.requires_grad(x), [ix, d, arg = std::move(arg)](Tape& t, int self) {
    const Matrix& g = t.node_grad(self);
    Matrix& gx = t.grad_buffer(ix);
    for (Eigen::Index r = 0; r < g.rows(); ++r)
      for (Eigen::Index c = 0; c < d; ++c) gx(arg[static_cast<std::size_t>(r * d + c)], c) += g(r, c);
  });
}

Var attention(Var q, Var k, Var v, int heads, int group) {
  Tape& t = same_tape(q, k);
  const Matrix &Q = q.value(), &K = k.value(), &V = v.value();
  check_same_shape(Q, K, "attention");
  check_same_shape(Q, V, "attention");
  const Eigen::Index n = Q.rows(), d = Q.cols();
  if (heads < 1 || d % heads != 0) throw std::invalid_argument("attention: heads must divide width");
  if (group < 1 || n % group != 0) throw std::invalid_argument("attention: rows not divisible by group");
  const Eigen::Index dh = d / heads, groups = n / group;
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Matrix out(n, d);
  // probs[g * heads + h] is the (group x group) attention matrix.
  std::vector<Matrix> probs(static_cast<std::size_t>(groups * heads));
  for (Eigen::Index g = 0; g < groups; ++g) {
    for (Eigen::Index h = 0; h < heads; ++h) {
      const auto qb = Q.block(g * group, h * dh, group, dh);
      const auto kb = K.block(g * group, h * dh, group, dh);
      const auto vb = V.block(g * group, h * dh, group, dh);
      Matrix s = (qb * kb.transpose()) * inv_scale;
      for (Eigen::Index r = 0; r < group; ++r) {
        const double m = s.row(r).maxCoeff();
        s.row(r) = (s.row(r).array() - m).exp();
        s.row(r) /= s.row(r).sum();
      }
      out.block(g * group, h * dh, group, dh).noalias() = s * vb;
      probs[static_cast<std::size_t>(g * heads + h)] = std::move(s);
    }
  }
  const int iq = q.id, ik = k.id, iv = v.id;
  const bool rg = t.requires_grad(q) || t.requires_grad(k) || t.requires_grad(v);
  return t.push(std::move(out), rg,
                [iq, ik, iv, heads, group, groups, dh, inv_scale, probs = std::move(probs)](Tape& t, int self) {
                  const Matrix& G = t.node_grad(self);
                  const Matrix &Q = t.value({&t, iq}), &K = t.value({&t, ik}), &V = t.value({&t, iv});
                  const bool gq = t.node_requires_grad(iq), gk = t.node_requires_grad(ik),
                             gv = t.node_requires_grad(iv);
                  for (Eigen::Index g = 0; g < groups; ++g) {
                    for (Eigen::Index h = 0; h < heads; ++h) {
                      const Matrix& p = probs[static_cast<std::size_t>(g * heads + h)];
                      const auto go = G.block(g * group, h * dh, group, dh);
                      if (gv) t.grad_buffer(iv).block(g * group, h * dh, group, dh).noalias() += p.transpose() * go;
                      if (!gq && !gk) continue;
                      const Matrix dp = go * V.block(g * group, h * dh, group, dh).transpose();
                      Matrix ds = p.cwiseProduct(dp);
                      const Vector row_dot = ds.rowwise().sum();
                      ds -= p.cwiseProduct(row_dot.replicate(1, group));
                      ds *= inv_scale;
                      if (gq)
                        t.grad_buffer(iq).block(g * group, h * dh, group, dh).noalias() +=
                            ds * K.block(g * group, h * dh, group, dh);
                      if (gk)
                        t.grad_buffer(ik).block(g * group, h * dh, group, dh).noalias() +=
                            ds.transpose() * Q.block(g * group, h * dh, group, dh);
                    }
                  }
                });
}

Var sum_all(Var a) {
  Tape& t = *a.tape;
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  const int ia = a.id;
  return t.push(std::move(out), t.requires_grad(a), [ia](Tape& t, int self) {
    const double g = t.node_grad(self)(0, 0);
    t.grad_buffer(ia).array() += g;
  });
}

Var mean_all(Var a) { return scale(sum_all(a), 1.0 / static_cast<double>(a.value().size())); }

Matrix softmax_rows(const Matrix& logits) {
  Matrix p(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const double m = logits.row(r).maxCoeff();
    p.row(r) = (logits.row(r).array() - m).exp();
    p.row(r) /= p.row(r).sum();
  }
  return p;
}

Var cross_entropy(Var logits, std::span<const int> labels) {
  Tape& t = *logits.tape;
  const Matrix& z = logits.value();
  if (static_cast<Eigen::Index>(labels.size()) != z.rows())
    throw std::invalid_argument("cross_entropy: label count mismatch");
  Matrix p = softmax_rows(z);
  double loss = 0.0;
  for (Eigen::Index r = 0; r < z.rows(); ++r) {
    const int y = labels[static_cast<std::size_t>(r)];
    if (y < 0 || y >= z.cols()) throw std::invalid_argument("cross_entropy: label out of range");
    const double m = z.row(r).maxCoeff();
    const double lse = m + std::log((z.row(r).array() - m).exp().sum());
    loss += lse - z(r, y);
  }
  const double n = static_cast<double>(z.rows());
  Matrix out(1, 1);
  out(0, 0) = loss / n;
  std::vector<int> ys(labels.begin(), labels.end());
  const int il = logits.id;
  return t.push(std::move(out), t.requires_grad(logits),
                [il, n, p = std::move(p), ys = std::move(ys)](Tape& t, int self) {
                  const double g = t.node_grad(self)(0, 0) / n;
                  Matrix d = p;
                  for (std::size_t r = 0; r < ys.size(); ++r) d(static_cast<Eigen::Index>(r), ys[r]) -= 1.0;
                  t.grad_buffer(il) += d * g;
                });
}

namespace {

// Backpropagates dL/dq through q = softmax(z) row-wise.
Matrix softmax_backward(const Matrix& q, const Matrix& dq) {
  const Vector dot = q.cwiseProduct(dq).rowwise().sum();
  return q.cwiseProduct(dq - dot.replicate(1, q.cols()));
}

}  // namespace

Var kl_to_logits(const Matrix& target, Var logits, double eps) {
  Tape& t = *logits.tape;
  const Matrix& z = logits.value();
  check_same_shape(target, z, "kl_to_logits");
  Matrix q = softmax_rows(z);
  double loss = 0.0;
  Matrix dq(z.rows(), z.cols());
  for (Eigen::Index r = 0; r < z.rows(); ++r) {
    for (Eigen::Index c = 0; c < z.cols(); ++c) {
      const double p = target(r, c);
      const double qc = std::max(q(r, c), eps);
      if (p > 0.0) loss += p * (std::log(p) - std::log(qc));
      dq(r, c) = q(r, c) > eps ? -p / q(r, c) : 0.0;
    }
  }
  const double n = static_cast<double>(z.rows());
  Matrix out(1, 1);
  out(0, 0) = loss / n;
  const int il = logits.id;
  return t.push(std::move(out), t.requires_grad(logits),
                [il, n, q = std::move(q), dq = std::move(dq)](Tape& t, int self) {
                  const double g = t.node_grad(self)(0, 0) / n;
                  t.grad_buffer(il) += softmax_backward(q, dq) * g;
                });
}

Var entropy_of_logits(Var logits, double eps) {
  Tape& t = *logits.tape;
  const Matrix& z = logits.value();
  Matrix q = softmax_rows(z);
  double h = 0.0;
  Matrix dq(z.rows(), z.cols());
  for (Eigen::Index r = 0; r < z.rows(); ++r) {
    for (Eigen::Index c = 0; c < z.cols(); ++c) {
      const double qc = q(r, c);
      const double lq = std::log(std::max(qc, eps));
      h -= qc * lq;
      dq(r, c) = -(lq + (qc > eps ? 1.0 : 0.0));
    }
  }
  const double n = static_cast<double>(z.rows());
  Matrix out(1, 1);
  out(0, 0) = h / n;
  const int il = logits.id;
  return t.push(std::move(out), t.requires_grad(logits),
                [il, n, q = std::move(q), dq = std::move(dq)](Tape& t, int self) {
                  const double g = t.node_grad(self)(0, 0) / n;
                  t.grad_buffer(il) += softmax_backward(q, dq) * g;
                });
}

Var square(Var a) {
  Tape& t = *a.tape;
  const int ia = a.id;
  return t.push(a.value().array().square().matrix(), t.requires_grad(a), [ia](Tape& t, int self) {
    accumulate(t, ia, 2.0 * t.node_grad(self).cwiseProduct(t.value({&t, ia})));
  });
}

Var mse(Var a, Var b) {
  check_same_shape(a.value(), b.value(), "mse");
  return mean_all(square(sub(a, b)));
}

}  // namespace ad
}  // namespace maple
