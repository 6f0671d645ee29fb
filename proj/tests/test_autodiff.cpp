#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "facecap/autodiff.hpp"
#include "test_util.hpp"

using namespace facecap;
namespace t = testutil;

namespace {

Mat random_mat(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  Mat m(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = g(rng);
  return m;
}

// Checks d(value())/d(param) against the accumulated analytic gradient.
void check_grad(ad::Var param, const std::function<ad::Var()>& build, double tol = 1e-6) {
  ad::Var loss = build();
  param->grad.setZero();
  ad::backward(loss);
  Mat analytic = param->grad;
  Mat fd = t::fd_gradient(param, [&] { return build()->val(0, 0); });
  CHECK(t::rel_err(analytic, fd) < tol);
}

}  // namespace

TEST_CASE("binary and unary op gradients") {
  std::mt19937_64 rng(1);
  ad::Var a = ad::leaf(random_mat(3, 4, rng));
  ad::Var b = ad::leaf(random_mat(3, 4, rng));
  ad::Var w = ad::leaf(random_mat(4, 5, rng));
  ad::Var row = ad::leaf(random_mat(1, 4, rng));

  check_grad(a, [&] { return ad::sum_all(ad::add(a, b)); });
  check_grad(b, [&] { return ad::sum_all(ad::sub(a, b)); });
  check_grad(a, [&] { return ad::sum_all(ad::cmul(a, b)); });
  check_grad(a, [&] { return ad::mean_all(ad::scale(a, 2.5)); });
  check_grad(w, [&] { return ad::sum_all(ad::matmul(a, w)); });
  check_grad(a, [&] { return ad::sum_all(ad::matmul(a, w)); });
  check_grad(a, [&] { return ad::sum_all(ad::transpose(a)); });
  check_grad(row, [&] { return ad::sum_all(ad::add_row(a, row)); });
  check_grad(a, [&] { return ad::sum_all(ad::tanh_(a)); });
  check_grad(a, [&] { return ad::sum_all(ad::exp_(ad::scale(a, 0.3))); });
  check_grad(a, [&] { return ad::mean_all(ad::mean_rows(ad::cmul(a, a))); });
}

TEST_CASE("relu gradient away from the kink") {
  Mat m(2, 2);
  m << 1.5, -2.0, 0.7, -0.3;
  ad::Var a = ad::leaf(m);
  check_grad(a, [&] { return ad::sum_all(ad::cmul(ad::relu(a), a)); });
}

TEST_CASE("structural op gradients") {
  std::mt19937_64 rng(2);
  ad::Var a = ad::leaf(random_mat(3, 4, rng));
  ad::Var b = ad::leaf(random_mat(2, 4, rng));
  check_grad(a, [&] { return ad::sum_all(ad::cmul(ad::concat_rows(a, b), ad::concat_rows(a, b))); });
  check_grad(b, [&] { return ad::sum_all(ad::cmul(ad::concat_rows(a, b), ad::concat_rows(a, b))); });
  check_grad(a, [&] { return ad::sum_all(ad::cmul(ad::slice_rows(a, 1, 2), ad::slice_rows(a, 1, 2))); });
  check_grad(a, [&] { return ad::sum_all(ad::cmul(ad::reshape(a, 4, 3), ad::reshape(a, 4, 3))); });
}

TEST_CASE("concat_rows tolerates zero-row operands") {
  ad::Var a = ad::constant(Mat::Zero(0, 3));
  ad::Var b = ad::constant(Mat::Ones(2, 3));
  CHECK(ad::concat_rows(a, b)->val.rows() == 2);
  CHECK(ad::concat_rows(b, a)->val.rows() == 2);
}

TEST_CASE("reshape is row-major") {
  Mat m(2, 3);
  m << 1, 2, 3, 4, 5, 6;
  Mat r = ad::reshape(ad::constant(m), 3, 2)->val;
  CHECK(r(0, 0) == 1);
  CHECK(r(0, 1) == 2);
  CHECK(r(1, 0) == 3);
  CHECK(r(2, 1) == 6);
  CHECK_THROWS(ad::reshape(ad::constant(m), 4, 2));
}

TEST_CASE("softmax rows sum to one and gradient checks") {
  std::mt19937_64 rng(3);
  ad::Var a = ad::leaf(random_mat(4, 6, rng));
  Mat sm = ad::softmax_rows(a)->val;
  for (Eigen::Index i = 0; i < sm.rows(); ++i)
    CHECK(std::abs(sm.row(i).sum() - 1.0) < 1e-12);
  ad::Var probe = ad::constant(random_mat(4, 6, rng));
  check_grad(a, [&] { return ad::sum_all(ad::cmul(ad::softmax_rows(a), probe)); });
}

TEST_CASE("cross entropy matches manual log-softmax and gradient checks") {
  std::mt19937_64 rng(4);
  ad::Var logits = ad::leaf(random_mat(3, 5, rng));
  std::vector<int> targets{2, 0, 4};
  double manual = 0.0;
  for (int i = 0; i < 3; ++i) {
    Eigen::RowVectorXd r = logits->val.row(i);
    double mx = r.maxCoeff();
    double z = (r.array() - mx).exp().sum();
    manual -= r(targets[static_cast<size_t>(i)]) - mx - std::log(z);
  }
  manual /= 3.0;
  CHECK(ad::cross_entropy_rows(logits, targets)->val(0, 0) == doctest::Approx(manual).epsilon(1e-12));
  check_grad(logits, [&] { return ad::cross_entropy_rows(logits, targets); });
  CHECK_THROWS(ad::cross_entropy_rows(logits, {0, 1}));
}

TEST_CASE("logsumexp is stable and gradient checks") {
  Mat big(1, 3);
  big << 1000.0, 1000.0, 1000.0;
  CHECK(ad::logsumexp_all(ad::constant(big))->val(0, 0) ==
        doctest::Approx(1000.0 + std::log(3.0)).epsilon(1e-12));
  std::mt19937_64 rng(5);
  ad::Var a = ad::leaf(random_mat(2, 4, rng));
  check_grad(a, [&] { return ad::logsumexp_all(a); });
}

TEST_CASE("row_max takes the first index on ties and gradient checks") {
  Mat m(2, 3);
  m << 2.0, 2.0, 1.0, 0.0, 5.0, 5.0;
  ad::Var a = ad::leaf(m);
  ad::Var mx = ad::row_max(a);
  CHECK(mx->val(0, 0) == 2.0);
  CHECK(mx->val(1, 0) == 5.0);
  a->grad.setZero();
  ad::backward(ad::sum_all(mx));
  CHECK(a->grad(0, 0) == 1.0);  // first of the tied pair
  CHECK(a->grad(0, 1) == 0.0);
  CHECK(a->grad(1, 1) == 1.0);
  CHECK(a->grad(1, 2) == 0.0);

  std::mt19937_64 rng(6);
  ad::Var b = ad::leaf(random_mat(3, 4, rng));  // distinct entries a.s.
  check_grad(b, [&] { return ad::sum_all(ad::row_max(b)); });
}

TEST_CASE("embedding scatter-adds gradients for repeated ids") {
  std::mt19937_64 rng(7);
  ad::Var table = ad::leaf(random_mat(5, 3, rng));
  std::vector<int> ids{1, 3, 1};
  check_grad(table, [&] {
    ad::Var e = ad::embedding(table, ids);
    return ad::sum_all(ad::cmul(e, e));
  });
  CHECK_THROWS(ad::embedding(table, {5}));
  CHECK_THROWS(ad::embedding(table, {-1}));
}

TEST_CASE("layer norm gradient checks for input, gain and bias") {
  std::mt19937_64 rng(8);
  ad::Var a = ad::leaf(random_mat(3, 6, rng));
  ad::Var gain = ad::leaf(Mat::Ones(1, 6) + 0.1 * random_mat(1, 6, rng));
  ad::Var bias = ad::leaf(0.1 * random_mat(1, 6, rng));
  ad::Var probe = ad::constant(random_mat(3, 6, rng));
  auto build = [&] {
    return ad::sum_all(ad::cmul(ad::layer_norm_rows(a, gain, bias), probe));
  };
  check_grad(a, build, 1e-5);
  check_grad(gain, build, 1e-5);
  check_grad(bias, build, 1e-5);
}

TEST_CASE("l2 normalize: unit rows, gradient, zero-norm rejection") {
  std::mt19937_64 rng(9);
  ad::Var a = ad::leaf(random_mat(3, 4, rng));
  Mat v = ad::l2_normalize_rows(a)->val;
  for (Eigen::Index i = 0; i < v.rows(); ++i)
    CHECK(std::abs(v.row(i).norm() - 1.0) < 1e-12);
  ad::Var probe = ad::constant(random_mat(3, 4, rng));
  check_grad(a, [&] { return ad::sum_all(ad::cmul(ad::l2_normalize_rows(a), probe)); });
  CHECK_THROWS(ad::l2_normalize_rows(ad::constant(Mat::Zero(1, 4))));
}

TEST_CASE("scale_by propagates into the scalar") {
  std::mt19937_64 rng(10);
  ad::Var a = ad::leaf(random_mat(2, 3, rng));
  Mat sm(1, 1);
  sm << 0.7;
  ad::Var s = ad::leaf(sm);
  check_grad(s, [&] { return ad::sum_all(ad::scale_by(a, s)); });
  check_grad(a, [&] { return ad::sum_all(ad::scale_by(a, s)); });
}

TEST_CASE("detach blocks gradient flow") {
  Mat m(1, 1);
  m << 3.0;
  ad::Var a = ad::leaf(m);
  ad::Var loss = ad::sum_all(ad::cmul(ad::detach(a), a));
  a->grad.setZero();
  ad::backward(loss);
  CHECK(a->grad(0, 0) == doctest::Approx(3.0));  // only the live factor
}

TEST_CASE("backward rejects non-scalar roots and handles shared subgraphs") {
  std::mt19937_64 rng(11);
  ad::Var a = ad::leaf(random_mat(2, 2, rng));
  CHECK_THROWS(ad::backward(ad::add(a, a)));
  // shared subgraph: f = sum(x) with x reused twice, df/da = 2
  ad::Var x = ad::scale(a, 1.0);
  ad::Var loss = ad::sum_all(ad::add(x, x));
  a->grad.setZero();
  ad::backward(loss);
  CHECK(a->grad(0, 0) == doctest::Approx(2.0));
}

TEST_CASE("deep composite gradient check") {
  std::mt19937_64 rng(12);
  ad::Var w1 = ad::leaf(random_mat(4, 5, rng));
  ad::Var w2 = ad::leaf(random_mat(5, 3, rng));
  ad::Var x = ad::constant(random_mat(2, 4, rng));
  auto build = [&] {
    ad::Var h = ad::tanh_(ad::matmul(x, w1));
    ad::Var y = ad::softmax_rows(ad::matmul(h, w2));
    return ad::mean_all(ad::cmul(y, y));
  };
  check_grad(w1, build, 1e-5);
  check_grad(w2, build, 1e-5);
}
