#pragma once

// Reverse-mode automatic differentiation over Eigen matrices.
// Nodes are created in forward order; node ids therefore give a valid
// topological order for the backward sweep.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <unordered_set>
#include <vector>

namespace facecap::ad {

using Mat = Eigen::MatrixXd;

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
  Mat val;
  Mat grad;
  std::vector<Var> parents;
  std::function<void(Node&)> backward_fn;
  bool requires_grad = false;
  std::uint64_t id = 0;

  Node(Mat v, bool rg) : val(std::move(v)), requires_grad(rg) {
    grad = Mat::Zero(val.rows(), val.cols());
    static std::uint64_t counter = 0;
    id = ++counter;
  }
};

inline Var constant(Mat v) { return std::make_shared<Node>(std::move(v), false); }
inline Var leaf(Mat v) { return std::make_shared<Node>(std::move(v), true); }

inline Var make_op(Mat v, std::vector<Var> parents, std::function<void(Node&)> bw) {
  bool rg = false;
  for (const auto& p : parents) rg = rg || p->requires_grad;
  auto n = std::make_shared<Node>(std::move(v), rg);
  if (rg) {
    n->parents = std::move(parents);
    n->backward_fn = std::move(bw);
  }
  return n;
}

// Detached copy: value flows, gradient does not.
inline Var detach(const Var& a) { return constant(a->val); }

inline void check_finite(const Mat& m, const char* what) {
  if (!m.allFinite()) throw std::invalid_argument(std::string("non-finite values in ") + what);
}

inline Var add(const Var& a, const Var& b) {
  return make_op(a->val + b->val, {a, b}, [a, b](Node& n) {
    if (a->requires_grad) a->grad += n.grad;
    if (b->requires_grad) b->grad += n.grad;
  });
}

inline Var sub(const Var& a, const Var& b) {
  return make_op(a->val - b->val, {a, b}, [a, b](Node& n) {
    if (a->requires_grad) a->grad += n.grad;
    if (b->requires_grad) b->grad -= n.grad;
  });
}

inline Var cmul(const Var& a, const Var& b) {
  return make_op(a->val.cwiseProduct(b->val), {a, b}, [a, b](Node& n) {
    if (a->requires_grad) a->grad += n.grad.cwiseProduct(b->val);
    if (b->requires_grad) b->grad += n.grad.cwiseProduct(a->val);
  });
}

inline Var scale(const Var& a, double s) {
  return make_op(a->val * s, {a}, [a, s](Node& n) {
    if (a->requires_grad) a->grad += n.grad * s;
  });
}

// Multiply a matrix by a 1x1 variable (e.g. a learnable temperature).
inline Var scale_by(const Var& a, const Var& s) {
  return make_op(a->val * s->val(0, 0), {a, s}, [a, s](Node& n) {
    if (a->requires_grad) a->grad += n.grad * s->val(0, 0);
    if (s->requires_grad) s->grad(0, 0) += (n.grad.cwiseProduct(a->val)).sum();
  });
}

inline Var matmul(const Var& a, const Var& b) {
  return make_op(a->val * b->val, {a, b}, [a, b](Node& n) {
    if (a->requires_grad) a->grad += n.grad * b->val.transpose();
    if (b->requires_grad) b->grad += a->val.transpose() * n.grad;
  });
}

inline Var transpose(const Var& a) {
  return make_op(a->val.transpose(), {a}, [a](Node& n) {
    if (a->requires_grad) a->grad += n.grad.transpose();
  });
}

// Adds a 1 x d row vector to every row of a.
inline Var add_row(const Var& a, const Var& row) {
  Mat v = a->val;
  v.rowwise() += Eigen::RowVectorXd(row->val.row(0));
  return make_op(std::move(v), {a, row}, [a, row](Node& n) {
    if (a->requires_grad) a->grad += n.grad;
    if (row->requires_grad) row->grad.row(0) += n.grad.colwise().sum();
  });
}

inline Var tanh_(const Var& a) {
  Mat v = a->val.array().tanh().matrix();
  return make_op(v, {a}, [a, v](Node& n) {
    if (a->requires_grad)
      a->grad += n.grad.cwiseProduct((1.0 - v.array().square()).matrix());
  });
}

inline Var relu(const Var& a) {
  Mat v = a->val.cwiseMax(0.0);
  return make_op(v, {a}, [a](Node& n) {
    if (a->requires_grad)
      a->grad += n.grad.cwiseProduct((a->val.array() > 0.0).cast<double>().matrix());
  });
}

inline Var concat_rows(const Var& a, const Var& b) {
  if (a->val.rows() == 0) return b;
  if (b->val.rows() == 0) return a;
  Mat v(a->val.rows() + b->val.rows(), a->val.cols());
  v << a->val, b->val;
  return make_op(std::move(v), {a, b}, [a, b](Node& n) {
    if (a->requires_grad) a->grad += n.grad.topRows(a->val.rows());
    if (b->requires_grad) b->grad += n.grad.bottomRows(b->val.rows());
  });
}

inline Var slice_rows(const Var& a, Eigen::Index r0, Eigen::Index count) {
  return make_op(a->val.middleRows(r0, count), {a}, [a, r0, count](Node& n) {
    if (a->requires_grad) a->grad.middleRows(r0, count) += n.grad;
  });
}

inline Var softmax_rows(const Var& a) {
  Mat v = a->val;
  for (Eigen::Index i = 0; i < v.rows(); ++i) {
    double mx = v.row(i).maxCoeff();
    v.row(i) = (v.row(i).array() - mx).exp();
    v.row(i) /= v.row(i).sum();
  }
  return make_op(v, {a}, [a, v](Node& n) {
    if (!a->requires_grad) return;
    for (Eigen::Index i = 0; i < v.rows(); ++i) {
      double dot = n.grad.row(i).dot(v.row(i));
      a->grad.row(i) += (n.grad.row(i).array() - dot).matrix().cwiseProduct(v.row(i));
    }
  });
}

// Mean of -log softmax(row_i)[targets[i]] over all rows.
inline Var cross_entropy_rows(const Var& logits, const std::vector<int>& targets) {
  const Mat& x = logits->val;
  if (static_cast<Eigen::Index>(targets.size()) != x.rows())
    throw std::invalid_argument("cross_entropy_rows: target count != row count");
  Mat probs(x.rows(), x.cols());
  double loss = 0.0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    double mx = x.row(i).maxCoeff();
    Eigen::RowVectorXd e = (x.row(i).array() - mx).exp();
    double z = e.sum();
    probs.row(i) = e / z;
    loss -= x(i, targets[i]) - mx - std::log(z);
  }
  loss /= static_cast<double>(x.rows());
  Mat out(1, 1);
  out(0, 0) = loss;
  return make_op(std::move(out), {logits}, [logits, probs, targets](Node& n) {
    if (!logits->requires_grad) return;
    double g = n.grad(0, 0) / static_cast<double>(probs.rows());
    Mat d = probs;
    for (Eigen::Index i = 0; i < d.rows(); ++i) d(i, targets[i]) -= 1.0;
    logits->grad += d * g;
  });
}

inline Var sum_all(const Var& a) {
  Mat out(1, 1);
  out(0, 0) = a->val.sum();
  return make_op(std::move(out), {a}, [a](Node& n) {
    if (a->requires_grad) a->grad.array() += n.grad(0, 0);
  });
}

inline Var mean_all(const Var& a) {
  double cnt = static_cast<double>(a->val.size());
  Mat out(1, 1);
  out(0, 0) = a->val.sum() / cnt;
  return make_op(std::move(out), {a}, [a, cnt](Node& n) {
    if (a->requires_grad) a->grad.array() += n.grad(0, 0) / cnt;
  });
}

// Column vector of row means.
inline Var mean_rows(const Var& a) {
  double cnt = static_cast<double>(a->val.cols());
  Mat out = a->val.rowwise().mean();
  return make_op(std::move(out), {a}, [a, cnt](Node& n) {
    if (a->requires_grad) a->grad += (n.grad.col(0) / cnt).replicate(1, a->val.cols());
  });
}

// Row-wise max as an n x 1 column; ties resolve to the lowest column index.
inline Var row_max(const Var& a) {
  Mat out(a->val.rows(), 1);
  std::vector<Eigen::Index> arg(a->val.rows());
  for (Eigen::Index i = 0; i < a->val.rows(); ++i) {
    Eigen::Index j;
    out(i, 0) = a->val.row(i).maxCoeff(&j);
    arg[i] = j;
  }
  return make_op(std::move(out), {a}, [a, arg](Node& n) {
    if (!a->requires_grad) return;
    for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(arg.size()); ++i)
      a->grad(i, arg[i]) += n.grad(i, 0);
  });
}

// log(sum(exp(entries))) over the whole matrix, numerically stable.
inline Var logsumexp_all(const Var& a) {
  double mx = a->val.maxCoeff();
  Mat e = (a->val.array() - mx).exp();
  double z = e.sum();
  Mat out(1, 1);
  out(0, 0) = mx + std::log(z);
  Mat soft = e / z;
  return make_op(std::move(out), {a}, [a, soft](Node& n) {
    if (a->requires_grad) a->grad += soft * n.grad(0, 0);
  });
}

inline Var exp_(const Var& a) {
  Mat v = a->val.array().exp().matrix();
  return make_op(v, {a}, [a, v](Node& n) {
    if (a->requires_grad) a->grad += n.grad.cwiseProduct(v);
  });
}

// Row lookup into an embedding table.
inline Var embedding(const Var& table, const std::vector<int>& ids) {
  Mat v(static_cast<Eigen::Index>(ids.size()), table->val.cols());
  for (size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= table->val.rows())
      throw std::out_of_range("embedding: token id out of vocabulary range");
    v.row(static_cast<Eigen::Index>(i)) = table->val.row(ids[i]);
  }
  return make_op(std::move(v), {table}, [table, ids](Node& n) {
    if (!table->requires_grad) return;
    for (size_t i = 0; i < ids.size(); ++i)
      table->grad.row(ids[i]) += n.grad.row(static_cast<Eigen::Index>(i));
  });
}

// Per-row layer normalization with learned gain/bias (1 x d each).
inline Var layer_norm_rows(const Var& a, const Var& gain, const Var& bias, double eps = 1e-5) {
  const Mat& x = a->val;
  Eigen::Index d = x.cols();
  Mat xhat(x.rows(), d);
  Eigen::VectorXd inv_sigma(x.rows());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    double mu = x.row(i).mean();
    Eigen::RowVectorXd c = x.row(i).array() - mu;
    double var = c.squaredNorm() / static_cast<double>(d);
    double is = 1.0 / std::sqrt(var + eps);
    inv_sigma(i) = is;
    xhat.row(i) = c * is;
  }
  Mat v = xhat;
  for (Eigen::Index i = 0; i < v.rows(); ++i)
    v.row(i) = v.row(i).cwiseProduct(gain->val.row(0)) + bias->val.row(0);
  return make_op(std::move(v), {a, gain, bias}, [a, gain, bias, xhat, inv_sigma](Node& n) {
    Eigen::Index d = xhat.cols();
    for (Eigen::Index i = 0; i < xhat.rows(); ++i) {
      Eigen::RowVectorXd dy = n.grad.row(i);
      if (gain->requires_grad) gain->grad.row(0) += dy.cwiseProduct(xhat.row(i));
      if (bias->requires_grad) bias->grad.row(0) += dy;
      if (a->requires_grad) {
        Eigen::RowVectorXd dyh = dy.cwiseProduct(gain->val.row(0));
        double m1 = dyh.mean();
        double m2 = dyh.cwiseProduct(xhat.row(i)).mean();
        a->grad.row(i) +=
            inv_sigma(i) * (dyh.array() - m1 - xhat.row(i).array() * m2).matrix();
      }
      (void)d;
    }
  });
}

// L2-normalizes each row; zero rows are rejected.
inline Var l2_normalize_rows(const Var& a) {
  const Mat& x = a->val;
  Eigen::VectorXd inv_norm(x.rows());
  Mat v(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    double nrm = x.row(i).norm();
    if (nrm == 0.0) throw std::invalid_argument("l2_normalize_rows: zero-norm row");
    inv_norm(i) = 1.0 / nrm;
    v.row(i) = x.row(i) * inv_norm(i);
  }
  return make_op(v, {a}, [a, v, inv_norm](Node& n) {
    if (!a->requires_grad) return;
    for (Eigen::Index i = 0; i < v.rows(); ++i) {
      double dot = n.grad.row(i).dot(v.row(i));
      a->grad.row(i) += inv_norm(i) * (n.grad.row(i) - dot * v.row(i));
    }
  });
}

// Row-major reshape: entry (i, j) of the input maps to flat index
// i * cols_in + j, read back as rows x cols.
inline Var reshape(const Var& a, Eigen::Index rows, Eigen::Index cols) {
  if (a->val.size() != rows * cols)
    throw std::invalid_argument("reshape: element count mismatch");
  Mat v(rows, cols);
  Eigen::Index ci = a->val.cols();
  for (Eigen::Index k = 0; k < rows * cols; ++k)
    v(k / cols, k % cols) = a->val(k / ci, k % ci);
  return make_op(std::move(v), {a}, [a, rows, cols, ci](Node& n) {
    if (!a->requires_grad) return;
    for (Eigen::Index k = 0; k < rows * cols; ++k)
      a->grad(k / ci, k % ci) += n.grad(k / cols, k % cols);
  });
}

inline void backward(const Var& root) {
  if (root->val.size() != 1)
    throw std::invalid_argument("backward: root must be a scalar (1x1)");
  root->grad(0, 0) = 1.0;
  std::vector<Var> order;
  std::unordered_set<Node*> seen;
  std::vector<Var> stack{root};
  while (!stack.empty()) {
    Var v = stack.back();
    stack.pop_back();
    if (!v->requires_grad || seen.count(v.get())) continue;
    seen.insert(v.get());
    order.push_back(v);
    for (const auto& p : v->parents) stack.push_back(p);
  }
  std::sort(order.begin(), order.end(),
            [](const Var& x, const Var& y) { return x->id > y->id; });
  for (const auto& v : order)
    if (v->backward_fn) v->backward_fn(*v);
}

}  // namespace facecap::ad
