#pragma once

// Shared single-head attention / feed-forward building blocks and
// sinusoidal positional encodings.

#include <cmath>
#include <random>
#include <string>

#include "facecap/autodiff.hpp"
#include "facecap/params.hpp"

namespace facecap {

using ad::Var;

struct AttentionParams {
  Var wq, bq, wk, bk, wv, bv, wo, bo;
};

inline AttentionParams make_attention(ParameterStore& ps, const std::string& prefix, int d,
                                      std::mt19937_64& rng) {
  AttentionParams p;
  p.wq = ps.add(prefix + ".wq", xavier_init(d, d, rng));
  p.bq = ps.add(prefix + ".bq", Mat::Zero(1, d));
  p.wk = ps.add(prefix + ".wk", xavier_init(d, d, rng));
  p.bk = ps.add(prefix + ".bk", Mat::Zero(1, d));
  p.wv = ps.add(prefix + ".wv", xavier_init(d, d, rng));
  p.bv = ps.add(prefix + ".bv", Mat::Zero(1, d));
  p.wo = ps.add(prefix + ".wo", xavier_init(d, d, rng));
  p.bo = ps.add(prefix + ".bo", Mat::Zero(1, d));
  return p;
}

// Scaled dot-product attention, scaling exactly 1/sqrt(d). `mask` (optional,
// Lq x Lk) is added to the pre-softmax logits; use large negatives to block.
inline Var attention(const AttentionParams& p, const Var& queries, const Var& keys_values,
                     const Mat* mask = nullptr) {
  ad::check_finite(queries->val, "attention queries");
  ad::check_finite(keys_values->val, "attention keys/values");
  Var q = ad::add_row(ad::matmul(queries, p.wq), p.bq);
  Var k = ad::add_row(ad::matmul(keys_values, p.wk), p.bk);
  Var v = ad::add_row(ad::matmul(keys_values, p.wv), p.bv);
  double d = static_cast<double>(q->val.cols());
  Var scores = ad::scale(ad::matmul(q, ad::transpose(k)), 1.0 / std::sqrt(d));
  if (mask) scores = ad::add(scores, ad::constant(*mask));
  Var weights = ad::softmax_rows(scores);
  Var ctx = ad::matmul(weights, v);
  return ad::add_row(ad::matmul(ctx, p.wo), p.bo);
}

struct FfnParams {
  Var w1, b1, w2, b2;
};

inline FfnParams make_ffn(ParameterStore& ps, const std::string& prefix, int d, int hidden,
                          std::mt19937_64& rng) {
  FfnParams p;
  p.w1 = ps.add(prefix + ".w1", xavier_init(d, hidden, rng));
  p.b1 = ps.add(prefix + ".b1", Mat::Zero(1, hidden));
  p.w2 = ps.add(prefix + ".w2", xavier_init(hidden, d, rng));
  p.b2 = ps.add(prefix + ".b2", Mat::Zero(1, d));
  return p;
}

inline Var ffn(const FfnParams& p, const Var& x) {
  return ad::add_row(ad::matmul(ad::relu(ad::add_row(ad::matmul(x, p.w1), p.b1)), p.w2), p.b2);
}

struct LayerNormParams {
  Var gain, bias;
};

inline LayerNormParams make_layer_norm(ParameterStore& ps, const std::string& prefix, int d) {
  LayerNormParams p;
  p.gain = ps.add(prefix + ".gain", Mat::Ones(1, d));
  p.bias = ps.add(prefix + ".bias", Mat::Zero(1, d));
  return p;
}

inline Var layer_norm(const LayerNormParams& p, const Var& x) {
  return ad::layer_norm_rows(x, p.gain, p.bias);
}

inline Mat sinusoidal_positions(Eigen::Index len, Eigen::Index d) {
  Mat pe = Mat::Zero(len, d);
  for (Eigen::Index pos = 0; pos < len; ++pos)
    for (Eigen::Index i = 0; i < d; i += 2) {
      double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(d));
      pe(pos, i) = std::sin(static_cast<double>(pos) * freq);
      if (i + 1 < d) pe(pos, i + 1) = std::cos(static_cast<double>(pos) * freq);
    }
  return pe;
}

inline Mat causal_mask(Eigen::Index len) {
  Mat m = Mat::Zero(len, len);
  for (Eigen::Index i = 0; i < len; ++i)
    for (Eigen::Index j = i + 1; j < len; ++j) m(i, j) = -1e30;
  return m;
}

}  // namespace facecap
