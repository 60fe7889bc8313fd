// Reverse-mode automatic differentiation over dense row-major matrices.
//
// A Tape records every operation applied to Var handles together with a
// closure that propagates the output gradient back to the operands.
// Parameters live outside the tape (in a ParamStore) and are only read during
// a forward pass; their gradients are collected on the tape and copied out
// with Tape::add_param_grads().
#pragma once

#include <Eigen/Dense>

#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace maple {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

/// A named learnable tensor with its gradient accumulator.
struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;
};

/// Ordered collection of parameters keyed by module path.
///
/// Backed by std::map so references stay valid after insertion and
/// iteration order is deterministic.
class ParamStore {
 public:
  Parameter& add(const std::string& name, Matrix value);
  Parameter& at(const std::string& name);
  const Parameter& at(const std::string& name) const;
  bool contains(const std::string& name) const { return params_.count(name) != 0; }

  void zero_grad();
  std::size_t size() const { return params_.size(); }
  std::size_t num_scalars() const;
  bool all_finite() const;

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::map<std::string, Parameter> params_;
};

namespace ad {

class Tape;

/// Handle to a node on a tape.
struct Var {
  Tape* tape = nullptr;
  int id = -1;

  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const { return value()(0, 0); }
};

class Tape {
 public:
  /// With record=false the tape keeps values only; backward() is unavailable.
  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value);
  /// Differentiable leaf whose gradient can be read back with grad().
  Var input(Matrix value);
  /// Leaf bound to a parameter; repeated calls return the same node.
  Var param(const Parameter& p);

  const Matrix& value(Var v) const { return nodes_[v.id].value; }
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
  bool recording() const { return record_; }

  /// Gradient of the last backward() root with respect to v (zeros if unreached).
  Matrix grad(Var v) const;

  /// Backpropagates from a 1x1 root. Parameter gradients of earlier
  /// backward() calls are replaced.
  void backward(Var root);

  /// Gradient of the last root with respect to p (zeros if p was unused).
  Matrix param_grad(const Parameter& p) const;
  /// Adds every collected parameter gradient into the matching
  /// Parameter::grad of `store`.
  void add_param_grads(ParamStore& store) const;

  using Backward = std::function<void(Tape&, int self)>;
  Var push(Matrix value, bool requires_grad, Backward backward);

  /// Grad buffer of node id, allocated on first use.
  Matrix& grad_buffer(int id);
  const Matrix& node_grad(int id) const { return nodes_[id].grad; }
  bool node_requires_grad(int id) const { return nodes_[id].requires_grad; }

  std::size_t num_nodes() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    const Parameter* param = nullptr;
    Backward backward;
  };
  bool record_;
  std::vector<Node> nodes_;
  std::map<const Parameter*, int> param_nodes_;
};

// ---- elementwise and linear algebra ---------------------------------------

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var scale(Var a, double s);
Var matmul(Var a, Var b);
/// x * W + b, with b a 1 x out row broadcast over rows.
Var linear(Var x, Var weight, Var bias);
Var gelu(Var x);
Var square(Var a);
/// Row-wise layer normalization with affine gamma/beta (1 x cols each).
Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);
/// Detached copy: same value, no gradient flows to `a`.
Var stop_gradient(Var a);

// ---- structural -----------------------------------------------------------

Var gather_rows(Var x, std::vector<int> rows);
Var concat_cols(std::span<const Var> parts);
/// Output row r is src[map[r]] when map[r] >= 0, otherwise fill's single row.
Var assemble_rows(Var src, Var fill, std::vector<int> map);
/// Channel-wise max over consecutive blocks of `group` rows. Ties route the
/// gradient to the first maximal row.
Var group_max(Var x, int group);

/// Multi-head scaled dot-product attention restricted to consecutive blocks
/// of `group` rows. q, k, v are (rows x D); heads must divide D.
Var attention(Var q, Var k, Var v, int heads, int group);

// ---- reductions and losses ------------------------------------------------

Var sum_all(Var a);
Var mean_all(Var a);
/// Mean over rows of -log softmax(logits)[row, label].
Var cross_entropy(Var logits, std::span<const int> labels);
/// Mean over rows of KL(target || softmax(logits)), softmax entries clamped
/// at eps inside the log. target rows are constants.
Var kl_to_logits(const Matrix& target, Var logits, double eps = 1e-8);
/// Mean over rows of the Shannon entropy of softmax(logits), clamped at eps.
Var entropy_of_logits(Var logits, double eps = 1e-8);
/// Mean of squared differences over all entries.
Var mse(Var a, Var b);

// ---- value helpers --------------------------------------------------------

Matrix softmax_rows(const Matrix& logits);
double gelu_value(double x);

}  // namespace ad
}  // namespace maple
