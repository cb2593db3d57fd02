#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "lexnmt/autodiff.hpp"

#include <functional>
#include <random>

using namespace lexnmt;
using Tape = ad::Tape<double>;
using Var = ad::Var<double>;

namespace {

Matrix random_matrix(Eigen::Index r, Eigen::Index c, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  Matrix m(r, c);
  for (Eigen::Index j = 0; j < c; ++j)
    for (Eigen::Index i = 0; i < r; ++i) m(i, j) = lo + (hi - lo) * uniform01(rng);
  return m;
}

// f maps leaf handles to an arbitrary-shaped output; the scalar under test is
// sum(output .* probe) for a fixed random probe.
using Graph = std::function<Var(Tape&, const std::vector<Var>&)>;

double max_gradient_error(const Graph& f, std::vector<Matrix> inputs) {
  std::vector<Matrix> grads;
  for (const auto& x : inputs) grads.push_back(Matrix::Zero(x.rows(), x.cols()));
  Matrix probe;
  auto evaluate = [&](bool with_grad) {
    Tape tape;
    std::vector<Var> leaves;
    for (std::size_t k = 0; k < inputs.size(); ++k) leaves.push_back(tape.parameter(inputs[k], with_grad ? &grads[k] : nullptr));
    Var out = f(tape, leaves);
    if (probe.size() == 0) probe = random_matrix(out.rows(), out.cols(), 99);
    Var scalar = ad::sum(ad::cwise_product(out, tape.constant(probe)));
    if (with_grad) tape.backward(scalar);
    return scalar.value()(0, 0);
  };
  evaluate(true);
  double worst = 0.0;
  const double h = 1e-6;
  for (std::size_t k = 0; k < inputs.size(); ++k)
    for (Eigen::Index i = 0; i < inputs[k].size(); ++i) {
      const double saved = inputs[k](i);
      inputs[k](i) = saved + h;
      const double up = evaluate(false);
      inputs[k](i) = saved - h;
      const double down = evaluate(false);
      inputs[k](i) = saved;
      const double numeric = (up - down) / (2 * h);
      worst = std::max(worst, std::abs(numeric - grads[k](i)) / std::max(1.0, std::abs(numeric)));
    }
  return worst;
}

}  // namespace

TEST_CASE("elementwise and linear ops match finite differences") {
  const Matrix a = random_matrix(3, 4, 1), b = random_matrix(4, 2, 2), c = random_matrix(3, 4, 3);
  const Matrix positive = random_matrix(3, 4, 4, 0.5, 2.0);

  CHECK(max_gradient_error([](Tape&, const std::vector<Var>& x) { return ad::product(x[0], x[1]); }, {a, b}) < 1e-7);
  CHECK(max_gradient_error([](Tape&, const std::vector<Var>& x) { return ad::transpose_product(x[0], x[1]); },
                           {a, c}) < 1e-7);
  CHECK(max_gradient_error([](Tape&, const std::vector<Var>& x) { return x[0] + x[1]; }, {a, c}) < 1e-7);
  CHECK(max_gradient_error([](Tape&, const std::vector<Var>& x) { return x[0] - x[1]; }, {a, c}) < 1e-7);
  CHECK(max_gradient_error([](Tape&, const std::vector<Var>& x) { return ad::cwise_product(x[0], x[1]); }, {a, c}) <
        1e-7);
  CHECK(max_gradient_error([](Tape&, const std::vector<Var>& x) { return ad::sigmoid(x[0]); }, {a}) < 1e-7);
  CHECK(max_gradient_error([](Tape&, const std::vector<Var>& x) { return ad::tanh(x[0]); }, {a}) < 1e-7);
  CHECK(max_gradient_error([](Tape&, const std::vector<Var>& x) { return ad::one_minus(x[0]); }, {a}) < 1e-7);
  CHECK(max_gradient_error([](Tape&, const std::vector<Var>& x) { return ad::log(x[0]); }, {positive}) < 1e-6);
  CHECK(max_gradient_error([](Tape&, const std::vector<Var>& x) { return ad::exp(x[0]); }, {a}) < 1e-7);
  CHECK(max_gradient_error([](Tape&, const std::vector<Var>& x) { return ad::add_scalar(x[0], 0.3); }, {a}) < 1e-7);
  CHECK(max_gradient_error([](Tape&, const std::vector<Var>& x) { return ad::scale(x[0], -2.5); }, {a}) < 1e-7);
}

TEST_CASE("structural ops match finite differences") {
  const Matrix a = random_matrix(3, 4, 5), b = random_matrix(2, 4, 6), v = random_matrix(3, 1, 7);
  CHECK(max_gradient_error([](Tape&, const std::vector<Var>& x) { return ad::vconcat<double>({x[0], x[1], x[0]}); },
                           {a, b}) < 1e-7);
  CHECK(max_gradient_error([](Tape&, const std::vector<Var>& x) { return ad::hconcat<double>({x[0], x[1], x[0]}); },
                           {v, random_matrix(3, 2, 8)}) < 1e-7);
  CHECK(max_gradient_error([](Tape&, const std::vector<Var>& x) { return ad::middle_rows(x[0], 1, 2); }, {a}) < 1e-7);
  CHECK(max_gradient_error([](Tape&, const std::vector<Var>& x) { return ad::column(x[0], 2); }, {a}) < 1e-7);
  CHECK(max_gradient_error([](Tape&, const std::vector<Var>& x) { return ad::replicate_cols(x[0], 3); }, {v}) < 1e-7);
  CHECK(max_gradient_error([](Tape&, const std::vector<Var>& x) { return ad::softmax(x[0]); }, {v}) < 1e-7);
  CHECK(max_gradient_error([](Tape&, const std::vector<Var>& x) { return ad::log_softmax(x[0]); }, {v}) < 1e-7);
  CHECK(max_gradient_error([](Tape&, const std::vector<Var>& x) { return ad::element(x[0], 2, 1); }, {a}) < 1e-7);
  CHECK(max_gradient_error([](Tape&, const std::vector<Var>& x) { return ad::sum(x[0]); }, {a}) < 1e-7);
}

TEST_CASE("sparse product matches finite differences and the dense product") {
  Matrix dense = random_matrix(5, 3, 11, 0.0, 1.0);
  dense(1, 2) = 0.0;
  dense(4, 0) = 0.0;
  auto sparse = std::make_shared<const Eigen::SparseMatrix<double>>(dense.sparseView());
  const Matrix v = random_matrix(3, 1, 12);
  CHECK(max_gradient_error([&](Tape&, const std::vector<Var>& x) { return ad::sparse_product(sparse, x[0]); }, {v}) <
        1e-7);
  Tape tape;
  Var out = ad::sparse_product(sparse, tape.constant(v));
  CHECK((out.value() - dense * v).norm() < 1e-14);
}

TEST_CASE("a leaf used twice accumulates both contributions") {
  Matrix x(1, 1);
  x << 3.0;
  Matrix g = Matrix::Zero(1, 1);
  Tape tape;
  Var a = tape.parameter(x, &g);
  tape.backward(ad::cwise_product(a, a));
  CHECK(g(0, 0) == doctest::Approx(6.0));
}

TEST_CASE("gradient sinks accumulate across tapes") {
  Matrix x = Matrix::Constant(2, 1, 1.0);
  Matrix g = Matrix::Zero(2, 1);
  for (int k = 0; k < 3; ++k) {
    Tape tape;
    tape.backward(ad::sum(ad::scale(tape.parameter(x, &g), 2.0)));
  }
  CHECK(g(0, 0) == doctest::Approx(6.0));
  CHECK(g(1, 0) == doctest::Approx(6.0));
}

TEST_CASE("softmax output is a distribution even for large logits") {
  Tape tape;
  Matrix logits(3, 1);
  logits << 1000.0, 999.0, -1000.0;
  Var p = ad::softmax(tape.constant(logits));
  CHECK(p.value().sum() == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(all_finite(ad::log_softmax(tape.constant(logits)).value()));
}

TEST_CASE("non-recording tape refuses backward and ignores sinks") {
  Matrix x = Matrix::Ones(2, 2);
  Matrix g = Matrix::Zero(2, 2);
  Tape tape(false);
  Var out = ad::sum(tape.parameter(x, &g));
  CHECK(out.value()(0, 0) == 4.0);
  CHECK_THROWS_AS(tape.backward(out), std::logic_error);
  CHECK(g.isZero());
}

TEST_CASE("shape errors are reported") {
  Tape tape;
  Var a = tape.constant(Matrix::Zero(2, 3));
  Var b = tape.constant(Matrix::Zero(2, 2));
  CHECK_THROWS_AS(ad::product(a, b), std::invalid_argument);
  CHECK_THROWS_AS(a + b, std::invalid_argument);
  CHECK_THROWS_AS(tape.backward(a), std::invalid_argument);
}

TEST_CASE("truncate drops nodes after the mark") {
  Tape tape;
  Var a = tape.constant(Matrix::Ones(1, 1));
  const auto mark = tape.size();
  ad::scale(a, 2.0);
  ad::scale(a, 3.0);
  CHECK(tape.size() == mark + 2);
  tape.truncate(mark);
  CHECK(tape.size() == mark);
}
