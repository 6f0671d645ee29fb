#pragma once

// Face naming: name-chain embedding, face prefix, prefix-augmented
// self-attention, fixed-length name features, and the symmetric
// face-name contrastive loss.

#include <algorithm>
#include <memory>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "facecap/autodiff.hpp"
#include "facecap/corpus.hpp"
#include "facecap/layers.hpp"
#include "facecap/params.hpp"
#include "facecap/tokenizer.hpp"

namespace facecap {

struct NameChain {
  std::vector<std::string> names;
  std::vector<int> token_ids;                     // <ENT>-separated
  std::vector<std::pair<int, int>> boundaries;    // per-name token ranges
};

// Person names deduplicated in first-occurrence order, joined by <ENT>.
inline NameChain build_name_chain(const std::vector<std::string>& names,
                                  const HashTokenizer& tok) {
  NameChain c;
  std::set<std::string> seen;
  for (const auto& n : names) {
    if (seen.count(n)) continue;
    seen.insert(n);
    c.names.push_back(n);
  }
  for (size_t i = 0; i < c.names.size(); ++i) {
    if (i) c.token_ids.push_back(SpecialTokens::kEnt);
    int start = static_cast<int>(c.token_ids.size());
    for (int id : tok.encode(c.names[i])) c.token_ids.push_back(id);
    c.boundaries.emplace_back(start, static_cast<int>(c.token_ids.size()));
  }
  return c;
}

struct FacePrefix {
  ad::Var states;            // n x d_hidden
  std::vector<bool> masked;  // length n
  Eigen::Index count() const { return states ? states->val.rows() : 0; }
};

struct FaceNamingConfig {
  int vocab = 1000;
  int d_face = 512;
  int d_hidden = 64;
  int num_layers = 2;
  int ffn_dim = 128;
  int name_feature_len = 20;
  int max_faces = 4;
};

struct PaOutputs {
  ad::Var attended_names;  // L x d_hidden
  ad::Var face_states;     // n x d_hidden (last layer)
};

class FaceNamingModule {
 public:
  FaceNamingModule(const FaceNamingConfig& cfg, ParameterStore& ps, std::mt19937_64& rng)
      : cfg_(cfg) {
    chain_embed_ = ps.add("facenaming.chain_embed",
                          normal_init(cfg.vocab, cfg.d_hidden, 0.05, rng));
    face_w_ = ps.add("facenaming.face_proj.w", xavier_init(cfg.d_face, cfg.d_hidden, rng));
    face_b_ = ps.add("facenaming.face_proj.b", Mat::Zero(1, cfg.d_hidden));
    for (int i = 0; i < cfg.num_layers; ++i) {
      std::string p = "facenaming.layer" + std::to_string(i);
      Layer ly;
      ly.attn = make_attention(ps, p + ".attn", cfg.d_hidden, rng);
      ly.ln1 = make_layer_norm(ps, p + ".ln1", cfg.d_hidden);
      ly.ffn = make_ffn(ps, p + ".ffn", cfg.d_hidden, cfg.ffn_dim, rng);
      ly.ln2 = make_layer_norm(ps, p + ".ln2", cfg.d_hidden);
      layers_.push_back(ly);
    }
    out_w_ = ps.add("facenaming.out_proj.w", xavier_init(cfg.d_hidden, cfg.d_hidden, rng));
    out_b_ = ps.add("facenaming.out_proj.b", Mat::Zero(1, cfg.d_hidden));
  }

  const FaceNamingConfig& config() const { return cfg_; }

  // One row per chain token, plus sinusoidal positions.
  ad::Var embed_name_chain(const NameChain& chain) const {
    if (chain.token_ids.empty())
      return ad::constant(Mat::Zero(0, cfg_.d_hidden));
    ad::Var emb = ad::embedding(chain_embed_, chain.token_ids);
    Mat pos = sinusoidal_positions(emb->val.rows(), cfg_.d_hidden);
    return ad::add(emb, ad::constant(pos));
  }

  // Projects face feature vectors into the model dimension. Faces beyond
  // max_faces are dropped, keeping the highest-norm features.
  FacePrefix face_prefix(const std::vector<Eigen::VectorXd>& faces) const {
    FacePrefix out;
    std::vector<Eigen::VectorXd> kept = faces;
    if (static_cast<int>(kept.size()) > cfg_.max_faces) {
      std::stable_sort(kept.begin(), kept.end(),
                       [](const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
                         return a.norm() > b.norm();
                       });
      kept.resize(static_cast<size_t>(cfg_.max_faces));
    }
    Mat f(static_cast<Eigen::Index>(kept.size()), cfg_.d_face);
    for (size_t i = 0; i < kept.size(); ++i) {
      if (kept[i].size() != cfg_.d_face)
        throw ValidationError("face_prefix: face feature dim " +
                              std::to_string(kept[i].size()) + " != configured d_face " +
                              std::to_string(cfg_.d_face));
      f.row(static_cast<Eigen::Index>(i)) = kept[i].transpose();
    }
    out.states = ad::add_row(ad::matmul(ad::constant(f), face_w_), face_b_);
    out.masked.assign(kept.size(), false);
    return out;
  }

  // Queries come from the full [H_F; H_N] sequence so face states evolve
  // across layers; masked prefix rows are blocked as keys.
  PaOutputs pa_self_attention(const ad::Var& names, const FacePrefix& prefix) const {
    ad::check_finite(names->val, "pa_self_attention names");
    Eigen::Index n = prefix.count();
    Eigen::Index len = n + names->val.rows();
    if (len == 0) throw ValidationError("pa_self_attention: empty sequence");
    ad::Var x = n > 0 ? ad::concat_rows(prefix.states, names) : names;
    Mat mask = Mat::Zero(len, len);
    for (Eigen::Index j = 0; j < n; ++j)
      if (prefix.masked[static_cast<size_t>(j)]) mask.col(j).setConstant(-1e30);
    for (const auto& ly : layers_) {
      ad::Var a = attention(ly.attn, x, x, &mask);
      x = layer_norm(ly.ln1, ad::add(x, a));
      x = layer_norm(ly.ln2, ad::add(x, ffn(ly.ffn, x)));
    }
    PaOutputs out;
    out.face_states = n > 0 ? ad::slice_rows(x, 0, n) : ad::constant(Mat::Zero(0, cfg_.d_hidden));
    out.attended_names = names->val.rows() > 0
                             ? ad::slice_rows(x, n, names->val.rows())
                             : ad::constant(Mat::Zero(0, cfg_.d_hidden));
    return out;
  }

  // Pad-or-truncate to name_feature_len rows, then a position-wise
  // feed-forward projection.
  ad::Var name_features(const ad::Var& attended_names) const {
    Eigen::Index L = attended_names->val.rows();
    Eigen::Index target = cfg_.name_feature_len;
    ad::Var fixed;
    if (L == target) {
      fixed = attended_names;
    } else if (L > target) {
      fixed = ad::slice_rows(attended_names, 0, target);
    } else if (L == 0) {
      fixed = ad::constant(Mat::Zero(target, cfg_.d_hidden));
    } else {
      fixed = ad::concat_rows(attended_names,
                              ad::constant(Mat::Zero(target - L, cfg_.d_hidden)));
    }
    return ad::add_row(ad::matmul(fixed, out_w_), out_b_);
  }

  // Convenience: full module forward for one sample.
  struct Forward {
    ad::Var h_e;         // name_feature_len x d_hidden
    ad::Var face_states; // n x d_hidden
  };
  Forward forward(const Sample& sample, const HashTokenizer& tok) const {
    NameChain chain = build_name_chain(sample.names, tok);
    ad::Var h_n = embed_name_chain(chain);
    FacePrefix prefix = face_prefix(sample.faces);
    if (h_n->val.rows() == 0 && prefix.count() == 0)
      return {name_features(ad::constant(Mat::Zero(0, cfg_.d_hidden))),
              ad::constant(Mat::Zero(0, cfg_.d_hidden))};
    PaOutputs pa = pa_self_attention(h_n, prefix);
    return {name_features(pa.attended_names), pa.face_states};
  }

 private:
  struct Layer {
    AttentionParams attn;
    LayerNormParams ln1;
    FfnParams ffn;
    LayerNormParams ln2;
  };
  FaceNamingConfig cfg_;
  ad::Var chain_embed_, face_w_, face_b_, out_w_, out_b_;
  std::vector<Layer> layers_;
};

// Ground-truth name embeddings for the alignment loss: per-name mean of
// token-embedding rows plus the appended <NONAME> row. Values only; the
// embedding table sees no gradient from this path.
inline Mat gt_name_matrix(const std::vector<std::string>& caption_person_names,
                          const HashTokenizer& tok, const Mat& token_embed_table) {
  std::vector<std::string> uniq;
  std::set<std::string> seen;
  for (const auto& n : caption_person_names)
    if (!seen.count(n)) {
      seen.insert(n);
      uniq.push_back(n);
    }
  Mat out(static_cast<Eigen::Index>(uniq.size()) + 1, token_embed_table.cols());
  for (size_t i = 0; i < uniq.size(); ++i) {
    Eigen::RowVectorXd acc = Eigen::RowVectorXd::Zero(token_embed_table.cols());
    auto ids = tok.encode(uniq[i]);
    for (int id : ids) acc += token_embed_table.row(id);
    out.row(static_cast<Eigen::Index>(i)) = acc / static_cast<double>(ids.size());
  }
  out.row(out.rows() - 1) = token_embed_table.row(SpecialTokens::kNoName);
  return out;
}

struct FaceNameAlignment {
  Mat A;  // n x m dot products
  double sim_fn = 0.0, sim_nf = 0.0;
  double loss_fn = 0.0, loss_nf = 0.0, loss_sym = 0.0;
};

struct ContrastiveSample {
  ad::Var face_states;  // n x d (0 rows = no faces)
  Mat gt_names;         // m x d, includes <NONAME>, stop-gradient by construction
};

struct ContrastiveResult {
  ad::Var batch_loss;  // mean symmetric loss over face-bearing samples
  std::vector<FaceNameAlignment> per_sample;
};

// Eqs. of the symmetric face naming loss. Face-less samples contribute zero
// loss and are excluded from every denominator.
inline ContrastiveResult contrastive_loss(const std::vector<ContrastiveSample>& batch) {
  ContrastiveResult res;
  res.per_sample.resize(batch.size());
  std::vector<size_t> active;
  for (size_t i = 0; i < batch.size(); ++i)
    if (batch[i].face_states && batch[i].face_states->val.rows() > 0) active.push_back(i);
  if (active.empty()) {
    res.batch_loss = ad::constant(Mat::Zero(1, 1));
    return res;
  }
  auto sim_fn = [&](size_t k, size_t b) {  // sim_d(F_k, N_b): mean over faces of max over names
    ad::Var a = ad::matmul(batch[k].face_states, ad::constant(batch[b].gt_names.transpose()));
    return ad::mean_all(ad::row_max(a));
  };
  auto sim_nf = [&](size_t k, size_t b) {  // sim_d(N_k, F_b): mean over names of max over faces
    ad::Var a = ad::matmul(batch[b].face_states, ad::constant(batch[k].gt_names.transpose()));
    return ad::mean_all(ad::row_max(ad::transpose(a)));
  };
  ad::Var total;
  for (size_t b : active) {
    ad::Var pos_fn, pos_nf, den_fn, den_nf;
    for (size_t k : active) {
      ad::Var sfn = sim_fn(k, b);
      ad::Var snf = sim_nf(k, b);
      den_fn = den_fn ? ad::concat_rows(den_fn, sfn) : sfn;
      den_nf = den_nf ? ad::concat_rows(den_nf, snf) : snf;
      if (k == b) {
        pos_fn = sfn;
        pos_nf = snf;
      }
    }
    ad::Var loss_fn = ad::sub(ad::logsumexp_all(den_fn), pos_fn);
    ad::Var loss_nf = ad::sub(ad::logsumexp_all(den_nf), pos_nf);
    ad::Var loss = ad::add(loss_fn, loss_nf);
    auto& diag = res.per_sample[b];
    diag.A = batch[b].face_states->val * batch[b].gt_names.transpose();
    diag.sim_fn = pos_fn->val(0, 0);
    diag.sim_nf = pos_nf->val(0, 0);
    diag.loss_fn = loss_fn->val(0, 0);
    diag.loss_nf = loss_nf->val(0, 0);
    diag.loss_sym = loss->val(0, 0);
    total = total ? ad::add(total, loss) : loss;
  }
  res.batch_loss = ad::scale(total, 1.0 / static_cast<double>(active.size()));
  return res;
}

}  // namespace facecap
