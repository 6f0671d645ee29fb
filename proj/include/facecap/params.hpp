#pragma once

// Named parameter store, AdamW with global-norm clipping, the linear
// warmup/decay schedule, and binary checkpoint serialization.

#include "facecap/autodiff.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace facecap {

using ad::Mat;
using ad::Var;

class ParameterStore {
 public:
  Var add(const std::string& name, Mat init) {
    if (params_.count(name)) throw std::invalid_argument("duplicate parameter: " + name);
    Var v = ad::leaf(std::move(init));
    params_.emplace(name, v);
    return v;
  }

  Var get(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("unknown parameter: " + name);
    return it->second;
  }

  bool has(const std::string& name) const { return params_.count(name) != 0; }

  const std::map<std::string, Var>& all() const { return params_; }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& [k, v] : params_) out.push_back(k);
    return out;
  }

  void zero_grads() {
    for (auto& [k, v] : params_) v->grad.setZero();
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [k, v] : params_) n += static_cast<std::size_t>(v->val.size());
    return n;
  }

  void save(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open checkpoint for writing: " + path);
    const char magic[8] = {'F', 'C', 'C', 'K', 'P', 'T', '1', '\n'};
    f.write(magic, 8);
    std::uint64_t cnt = params_.size();
    f.write(reinterpret_cast<const char*>(&cnt), 8);
    for (const auto& [name, v] : params_) {
      std::uint64_t len = name.size();
      f.write(reinterpret_cast<const char*>(&len), 8);
      f.write(name.data(), static_cast<std::streamsize>(len));
      std::int64_t r = v->val.rows(), c = v->val.cols();
      f.write(reinterpret_cast<const char*>(&r), 8);
      f.write(reinterpret_cast<const char*>(&c), 8);
      std::vector<double> row(static_cast<std::size_t>(c));
      for (std::int64_t i = 0; i < r; ++i) {
        for (std::int64_t j = 0; j < c; ++j) row[static_cast<std::size_t>(j)] = v->val(i, j);
        f.write(reinterpret_cast<const char*>(row.data()),
                static_cast<std::streamsize>(sizeof(double) * row.size()));
      }
    }
    if (!f) throw std::runtime_error("checkpoint write failed: " + path);
  }

  // Loads values into already-registered parameters; shapes must match.
  void load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open checkpoint: " + path);
    char magic[8];
    f.read(magic, 8);
    if (!f || std::memcmp(magic, "FCCKPT1\n", 8) != 0)
      throw std::runtime_error("bad checkpoint magic: " + path);
    std::uint64_t cnt = 0;
    f.read(reinterpret_cast<char*>(&cnt), 8);
    for (std::uint64_t k = 0; k < cnt; ++k) {
      std::uint64_t len = 0;
      f.read(reinterpret_cast<char*>(&len), 8);
      std::string name(len, '\0');
      f.read(name.data(), static_cast<std::streamsize>(len));
      std::int64_t r = 0, c = 0;
      f.read(reinterpret_cast<char*>(&r), 8);
      f.read(reinterpret_cast<char*>(&c), 8);
      Mat m(r, c);
      for (std::int64_t i = 0; i < r; ++i) {
        std::vector<double> row(static_cast<std::size_t>(c));
        f.read(reinterpret_cast<char*>(row.data()),
               static_cast<std::streamsize>(sizeof(double) * row.size()));
        for (std::int64_t j = 0; j < c; ++j) m(i, j) = row[static_cast<std::size_t>(j)];
      }
      if (!f) throw std::runtime_error("truncated checkpoint: " + path);
      auto it = params_.find(name);
      if (it == params_.end()) throw std::runtime_error("checkpoint has unknown parameter: " + name);
      if (it->second->val.rows() != r || it->second->val.cols() != c)
        throw std::runtime_error("checkpoint shape mismatch for: " + name);
      it->second->val = std::move(m);
    }
  }

 private:
  std::map<std::string, Var> params_;
};

inline Mat xavier_init(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng) {
  double s = std::sqrt(6.0 / static_cast<double>(rows + cols));
  std::uniform_real_distribution<double> dist(-s, s);
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = dist(rng);
  return m;
}

inline Mat normal_init(Eigen::Index rows, Eigen::Index cols, double stddev,
                       std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = dist(rng);
  return m;
}

// Linear warmup to lr_max over the first warmup_fraction of steps,
// then linear decay to zero at total_steps.
inline double lr_at_step(std::int64_t step, std::int64_t total_steps, double lr_max,
                         double warmup_fraction) {
  if (total_steps <= 0) return 0.0;
  auto warmup = static_cast<std::int64_t>(warmup_fraction * static_cast<double>(total_steps));
  if (warmup < 1) warmup = 1;
  if (step <= warmup)
    return lr_max * static_cast<double>(step) / static_cast<double>(warmup);
  double frac = static_cast<double>(total_steps - step) /
                static_cast<double>(total_steps - warmup);
  return lr_max * std::max(0.0, frac);
}

class AdamW {
 public:
  AdamW(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8,
        double weight_decay = 0.01)
      : beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {}

  // Applies one update. Parameters whose gradient is identically zero are
  // left untouched (no moment update, no weight decay).
  void step(ParameterStore& store, double lr, double clip_norm) {
    double total_sq = 0.0;
    for (const auto& [name, v] : store.all()) total_sq += v->grad.squaredNorm();
    double gscale = 1.0;
    double gnorm = std::sqrt(total_sq);
    if (clip_norm > 0.0 && gnorm > clip_norm) gscale = clip_norm / gnorm;
    ++t_;
    double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (const auto& [name, v] : store.all()) {
      if (v->grad.isZero(0.0)) continue;
      auto& st = state_[name];
      if (st.m.size() == 0) {
        st.m = Mat::Zero(v->val.rows(), v->val.cols());
        st.v = Mat::Zero(v->val.rows(), v->val.cols());
      }
      Mat g = v->grad * gscale;
      st.m = beta1_ * st.m + (1.0 - beta1_) * g;
      st.v = beta2_ * st.v + (1.0 - beta2_) * g.cwiseProduct(g);
      Mat mhat = st.m / bc1;
      Mat vhat = st.v / bc2;
      v->val -= lr * (mhat.array() / (vhat.array().sqrt() + eps_)).matrix();
      v->val -= lr * weight_decay_ * v->val;
    }
  }

  double last_grad_norm(const ParameterStore& store) const {
    double total_sq = 0.0;
    for (const auto& [name, v] : store.all()) total_sq += v->grad.squaredNorm();
    return std::sqrt(total_sq);
  }

 private:
  struct Slot {
    Mat m, v;
  };
  double beta1_, beta2_, eps_, weight_decay_;
  std::int64_t t_ = 0;
  std::map<std::string, Slot> state_;
};

}  // namespace facecap
