#include "maple/autodiff.hpp"
#include "maple/random.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <functional>

using namespace maple;
using ad::Tape;
using ad::Var;

namespace {

using GraphFn = std::function<Var(Tape&, std::vector<Var>&)>;

Matrix random_matrix(Rng& rng, Eigen::Index r, Eigen::Index c, double scale = 1.0) {
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
  return m;
}

double eval(const GraphFn& f, const std::vector<Matrix>& inputs) {
  Tape tape(false);
  std::vector<Var> vars;
  for (const auto& m : inputs) vars.push_back(tape.input(m));
  return f(tape, vars).scalar();
}

// Largest relative deviation between analytic and central-difference
// gradients over every input entry.
double max_grad_error(const GraphFn& f, std::vector<Matrix> inputs, double h = 1e-6) {
  Tape tape;
  std::vector<Var> vars;
  for (const auto& m : inputs) vars.push_back(tape.input(m));
  Var out = f(tape, vars);
  tape.backward(out);
  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const Matrix analytic = tape.grad(vars[k]);
    for (Eigen::Index i = 0; i < inputs[k].size(); ++i) {
      const double saved = inputs[k].data()[i];
      inputs[k].data()[i] = saved + h;
      const double up = eval(f, inputs);
      inputs[k].data()[i] = saved - h;
      const double down = eval(f, inputs);
      inputs[k].data()[i] = saved;
      const double numeric = (up - down) / (2 * h);
      const double a = analytic.data()[i];
      worst = std::max(worst, std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-6}));
    }
  }
  return worst;
}

// sum((x + C)^2) with a fixed random C, so every output entry carries a
// distinct upstream gradient.
Var project(Tape& tape, Var x, std::uint64_t seed) {
  Rng rng(seed);
  return ad::sum_all(ad::square(ad::add(x, tape.constant(random_matrix(rng, x.rows(), x.cols())))));
}

}  // namespace

TEST(Autodiff, ElementwiseAndLinearOps) {
  Rng rng(1);
  const Matrix a = random_matrix(rng, 3, 4), b = random_matrix(rng, 3, 4), w = random_matrix(rng, 4, 2),
               bias = random_matrix(rng, 1, 2);
  EXPECT_LT(max_grad_error([](Tape& t, auto& v) { return project(t, ad::add(v[0], v[1]), 2); }, {a, b}), 1e-6);
  EXPECT_LT(max_grad_error([](Tape& t, auto& v) { return project(t, ad::sub(v[0], v[1]), 3); }, {a, b}), 1e-6);
  EXPECT_LT(max_grad_error([](Tape& t, auto& v) { return project(t, ad::scale(v[0], -2.5), 5); }, {a}), 1e-6);
  EXPECT_LT(max_grad_error([](Tape& t, auto& v) { return project(t, ad::matmul(v[0], v[1]), 6); }, {a, w}), 1e-6);
  EXPECT_LT(max_grad_error([](Tape& t, auto& v) { return project(t, ad::linear(v[0], v[1], v[2]), 7); }, {a, w, bias}), 1e-6);
  EXPECT_LT(max_grad_error([](Tape& t, auto& v) { return project(t, ad::gelu(v[0]), 8); }, {a}), 1e-6);
  EXPECT_LT(max_grad_error([](Tape& t, auto& v) { return project(t, ad::square(v[0]), 9); }, {a}), 1e-6);
  EXPECT_LT(max_grad_error([](Tape&, auto& v) { return ad::mean_all(v[0]); }, {a}), 1e-6);
}

TEST(Autodiff, NormalizationAndReshaping) {
  Rng rng(2);
  const Matrix x = random_matrix(rng, 6, 5), gamma = random_matrix(rng, 1, 5), beta = random_matrix(rng, 1, 5);
  EXPECT_LT(max_grad_error([](Tape& t, auto& v) { return project(t, ad::layer_norm(v[0], v[1], v[2]), 10); }, {x, gamma, beta}), 1e-5);
  EXPECT_LT(max_grad_error([](Tape& t, auto& v) { return project(t, ad::gather_rows(v[0], {4, 0, 4, 2}), 11); }, {x}), 1e-6);
  EXPECT_LT(max_grad_error([](Tape& t, auto& v) { return project(t, ad::group_max(v[0], 3), 12); }, {x}), 1e-6);
  const Matrix y = random_matrix(rng, 6, 2);
  EXPECT_LT(max_grad_error([](Tape& t, auto& v) {
              const Var parts[] = {v[0], v[1]};
              return project(t, ad::concat_cols(parts), 13);
            }, {x, y}), 1e-6);
  const Matrix src = random_matrix(rng, 3, 5), fill = random_matrix(rng, 1, 5);
  EXPECT_LT(max_grad_error([](Tape& t, auto& v) { return project(t, ad::assemble_rows(v[0], v[1], {2, -1, 0, -1, 1}), 14); }, {src, fill}), 1e-6);
}

TEST(Autodiff, AttentionAndLosses) {
  Rng rng(3);
  const Matrix q = random_matrix(rng, 6, 4), k = random_matrix(rng, 6, 4), v = random_matrix(rng, 6, 4);
  EXPECT_LT(max_grad_error([](Tape& t, auto& x) { return project(t, ad::attention(x[0], x[1], x[2], 2, 3), 15); }, {q, k, v}), 1e-5);
  const Matrix logits = random_matrix(rng, 3, 4);
  const std::vector<int> labels{1, 3, 0};
  EXPECT_LT(max_grad_error([&](Tape&, auto& x) { return ad::cross_entropy(x[0], labels); }, {logits}), 1e-6);
  const Matrix target = ad::softmax_rows(random_matrix(rng, 3, 4));
  EXPECT_LT(max_grad_error([&](Tape&, auto& x) { return ad::kl_to_logits(target, x[0]); }, {logits}), 1e-6);
  EXPECT_LT(max_grad_error([](Tape&, auto& x) { return ad::entropy_of_logits(x[0]); }, {logits}), 1e-6);
  const Matrix other = random_matrix(rng, 3, 4);
  EXPECT_LT(max_grad_error([](Tape&, auto& x) { return ad::mse(x[0], x[1]); }, {logits, other}), 1e-6);
}

TEST(Autodiff, AttentionMatchesHandComputation) {
  // one head, group of two tokens, D = 2
  Matrix q(2, 2), k(2, 2), v(2, 2);
  q << 1, 0, 0, 1;
  k << 1, 1, 0, 2;
  v << 1, 2, 3, 4;
  Tape tape(false);
  const Matrix out = ad::attention(tape.constant(q), tape.constant(k), tape.constant(v), 1, 2).value();
  const double s = 1.0 / std::sqrt(2.0);
  for (int i = 0; i < 2; ++i) {
    const double l0 = q.row(i).dot(k.row(0)) * s, l1 = q.row(i).dot(k.row(1)) * s;
    const double w0 = std::exp(l0) / (std::exp(l0) + std::exp(l1));
    for (int c = 0; c < 2; ++c) EXPECT_NEAR(out(i, c), w0 * v(0, c) + (1 - w0) * v(1, c), 1e-14);
  }
}

TEST(Autodiff, StopGradientBlocksFlow) {
  Tape tape;
  Var x = tape.input(Matrix::Constant(2, 2, 3.0));
  Var y = ad::add(ad::square(ad::stop_gradient(x)), x);
  tape.backward(ad::sum_all(y));
  EXPECT_EQ(tape.grad(x), Matrix::Ones(2, 2));
}

TEST(Autodiff, ParamGradsAccumulateIntoStore) {
  ParamStore store;
  store.add("w", Matrix::Constant(1, 3, 2.0));
  Tape tape;
  Var w = tape.param(store.at("w"));
  tape.backward(ad::sum_all(ad::add(ad::square(w), w)));
  store.zero_grad();
  tape.add_param_grads(store);
  EXPECT_EQ(store.at("w").grad, Matrix::Constant(1, 3, 5.0));
}

TEST(Autodiff, SoftmaxAndGeluValues) {
  Matrix l(1, 3);
  l << 1000.0, 1000.0, -1000.0;
  const Matrix p = ad::softmax_rows(l);
  EXPECT_NEAR(p(0, 0), 0.5, 1e-15);
  EXPECT_EQ(p(0, 2), 0.0);
  for (double x : {-3.0, -0.5, 0.0, 0.7, 4.0}) EXPECT_NEAR(ad::gelu_value(x), 0.5 * x * (1 + std::erf(x / std::sqrt(2.0))), 1e-15);
}

TEST(Autodiff, NonRecordingTapeKeepsValuesOnly) {
  Tape tape(false);
  Var x = tape.input(Matrix::Constant(2, 2, 1.5));
  Var y = ad::gelu(x);
  EXPECT_FALSE(tape.recording());
  EXPECT_NEAR(y.value()(0, 0), ad::gelu_value(1.5), 1e-15);
}
