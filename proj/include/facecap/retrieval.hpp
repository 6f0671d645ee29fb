#pragma once

// Image-conditioned sentence retrieval with a lead-3 guarantee, the
// dual-encoder alignment tuning losses (InfoNCE + pooled-L2 bridge), the
// token-window truncation, and the embedding cache format.

#include <Eigen/Core>
#include <json.hpp>

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "facecap/autodiff.hpp"
#include "facecap/corpus.hpp"
#include "facecap/params.hpp"
#include "facecap/tokenizer.hpp"

namespace facecap {

struct RetrievedSegment {
  std::vector<int> sentence_indices;  // strictly increasing
  std::vector<std::string> sentences;
};

class DualEncoder {
 public:
  virtual ~DualEncoder() = default;
  virtual Eigen::VectorXd encode_image(const Sample& s) const = 0;
  virtual Eigen::VectorXd encode_text(const std::string& text) const = 0;
};

// Hashed bag-of-words text featurizer shared by the toy towers.
inline Eigen::VectorXd hashed_text_features(const std::string& text, int dim) {
  HashTokenizer tok(dim + SpecialTokens::kFirstWord);
  Eigen::VectorXd v = Eigen::VectorXd::Zero(dim);
  for (const auto& w : split_words(text))
    v(tok.word_id(w) - SpecialTokens::kFirstWord) += 1.0;
  double n = v.norm();
  if (n > 0.0) v /= n;
  return v;
}

// Trainable toy dual encoder: linear towers over hashed text features and
// precomputed image embeddings, a learnable logit scale, and a linear
// bridge into the frozen reference encoder's dimension.
class ToyDualEncoder : public DualEncoder {
 public:
  ToyDualEncoder(int d_image, int d_text_hash, int d_emb, int d_ref, std::uint64_t seed,
                 ParameterStore* store = nullptr)
      : d_image_(d_image), d_hash_(d_text_hash), owned_(store ? nullptr : new ParameterStore) {
    ParameterStore& ps = store ? *store : *owned_;
    std::mt19937_64 rng(seed);
    img_proj_ = ps.add("retrieval.img_proj", xavier_init(d_image, d_emb, rng));
    text_proj_ = ps.add("retrieval.text_proj", xavier_init(d_text_hash, d_emb, rng));
    Mat ls(1, 1);
    ls(0, 0) = std::log(1.0 / 0.07);
    logit_scale_ = ps.add("retrieval.logit_scale", ls);
    bridge_ = ps.add("retrieval.bridge", xavier_init(d_emb, d_ref, rng));
  }

  Eigen::VectorXd encode_image(const Sample& s) const override {
    if (s.image_emb.size() != d_image_)
      throw ValidationError("encode_image: expected image embedding of dim " +
                            std::to_string(d_image_));
    return img_proj_->val.transpose() * s.image_emb;
  }

  Eigen::VectorXd encode_text(const std::string& text) const override {
    return text_proj_->val.transpose() * hashed_text_features(text, d_hash_);
  }

  ad::Var image_tower(const Mat& image_rows) const {
    return ad::matmul(ad::constant(image_rows), img_proj_);
  }

  ad::Var text_tower(const std::vector<std::string>& captions) const {
    Mat feats(static_cast<Eigen::Index>(captions.size()), d_hash_);
    for (size_t i = 0; i < captions.size(); ++i)
      feats.row(static_cast<Eigen::Index>(i)) =
          hashed_text_features(captions[i], d_hash_).transpose();
    return ad::matmul(ad::constant(feats), text_proj_);
  }

  ad::Var bridge(const ad::Var& text_emb) const { return ad::matmul(text_emb, bridge_); }
  ad::Var logit_scale() const { return logit_scale_; }
  int text_hash_dim() const { return d_hash_; }

 private:
  int d_image_, d_hash_;
  std::unique_ptr<ParameterStore> owned_;
  ad::Var img_proj_, text_proj_, logit_scale_, bridge_;
};

// Top-k by cosine similarity to the image embedding, lead-3 union,
// original order preserved. Equal similarities break toward the lower index.
inline RetrievedSegment retrieve(const Sample& sample, const DualEncoder& encoder, int k) {
  if (k < 1) throw ValidationError("retrieve: k must be >= 1");
  if (sample.sentences.empty()) throw ValidationError("retrieve: sample has no sentences");
  if (sample.image_emb.size() == 0)
    throw ValidationError("retrieve: image embedding unavailable");
  Eigen::VectorXd img = encoder.encode_image(sample);
  double img_norm = img.norm();
  if (img_norm == 0.0) throw ValidationError("retrieve: zero-norm image embedding");
  const int n = static_cast<int>(sample.sentences.size());
  std::vector<std::pair<double, int>> sims;
  sims.reserve(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    Eigen::VectorXd t = encoder.encode_text(sample.sentences[static_cast<size_t>(i)]);
    double tn = t.norm();
    if (tn == 0.0) throw ValidationError("retrieve: zero-norm sentence embedding at index " +
                                         std::to_string(i));
    sims.emplace_back(img.dot(t) / (img_norm * tn), i);
  }
  std::vector<int> order(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    double sa = sims[static_cast<size_t>(a)].first, sb = sims[static_cast<size_t>(b)].first;
    if (sa != sb) return sa > sb;
    return a < b;
  });
  std::vector<bool> chosen(static_cast<size_t>(n), false);
  for (int i = 0; i < std::min(k, n); ++i) chosen[static_cast<size_t>(order[static_cast<size_t>(i)])] = true;
  for (int i = 0; i < std::min(3, n); ++i) chosen[static_cast<size_t>(i)] = true;
  RetrievedSegment seg;
  for (int i = 0; i < n; ++i)
    if (chosen[static_cast<size_t>(i)]) {
      seg.sentence_indices.push_back(i);
      seg.sentences.push_back(sample.sentences[static_cast<size_t>(i)]);
    }
  return seg;
}

// Maps a caption to the frozen reference encoder's pooled representation.
using FrozenTextReference = std::function<Eigen::VectorXd(const std::string&)>;

// Fixed random projection over hashed features, standing in for a frozen
// pretrained encoder's average-pooled output.
inline FrozenTextReference make_frozen_reference(int d_hash, int d_ref,
                                                 std::uint64_t seed = 17) {
  std::mt19937_64 rng(seed);
  auto proj = std::make_shared<Mat>(xavier_init(d_hash, d_ref, rng));
  return [proj, d_hash](const std::string& text) -> Eigen::VectorXd {
    return proj->transpose() * hashed_text_features(text, d_hash);
  };
}

struct AlignmentLosses {
  ad::Var infonce;
  ad::Var bridge_l2;
};

// Symmetric in-batch InfoNCE over cosine logits with learnable temperature,
// plus the mean squared L2 bridge to the frozen reference encoder.
inline AlignmentLosses alignment_losses(const std::vector<Sample>& batch,
                                        const ToyDualEncoder& encoder,
                                        const FrozenTextReference& reference) {
  if (batch.size() < 2)
    throw ValidationError("alignment_losses: batch must have >= 2 samples");
  const auto b = static_cast<Eigen::Index>(batch.size());
  Mat image_rows(b, batch[0].image_emb.size());
  std::vector<std::string> captions;
  for (Eigen::Index i = 0; i < b; ++i) {
    image_rows.row(i) = batch[static_cast<size_t>(i)].image_emb.transpose();
    captions.push_back(batch[static_cast<size_t>(i)].caption);
  }
  ad::Var img = ad::l2_normalize_rows(encoder.image_tower(image_rows));
  ad::Var txt_raw = encoder.text_tower(captions);
  ad::Var txt = ad::l2_normalize_rows(txt_raw);
  ad::Var scale = ad::exp_(encoder.logit_scale());
  ad::Var logits = ad::scale_by(ad::matmul(img, ad::transpose(txt)), scale);
  std::vector<int> diag(static_cast<size_t>(b));
  for (Eigen::Index i = 0; i < b; ++i) diag[static_cast<size_t>(i)] = static_cast<int>(i);
  ad::Var loss_i2t = ad::cross_entropy_rows(logits, diag);
  ad::Var loss_t2i = ad::cross_entropy_rows(ad::transpose(logits), diag);
  ad::Var infonce = ad::scale(ad::add(loss_i2t, loss_t2i), 0.5);

  ad::Var projected = encoder.bridge(txt_raw);
  Mat ref_rows(b, reference(captions[0]).size());
  for (Eigen::Index i = 0; i < b; ++i)
    ref_rows.row(i) = reference(captions[static_cast<size_t>(i)]).transpose();
  ad::Var diff = ad::sub(projected, ad::constant(ref_rows));
  ad::Var bridge_l2 =
      ad::scale(ad::sum_all(ad::cmul(diff, diff)), 1.0 / static_cast<double>(b));
  return {infonce, bridge_l2};
}

// Maximal contiguous sentence window around the anchor with at most
// window_tokens whitespace tokens, expanding symmetrically and spilling
// leftover budget across article boundaries.
inline Sample truncate_window(const Sample& sample, int window_tokens) {
  if (window_tokens < 1) throw ValidationError("truncate_window: window must be >= 1");
  const int n = static_cast<int>(sample.sentences.size());
  std::vector<int> tok_count(static_cast<size_t>(n));
  int total = 0;
  for (int i = 0; i < n; ++i) {
    tok_count[static_cast<size_t>(i)] =
        static_cast<int>(split_words(sample.sentences[static_cast<size_t>(i)]).size());
    total += tok_count[static_cast<size_t>(i)];
  }
  if (total <= window_tokens) return sample;
  int anchor = sample.anchor;
  int budget = window_tokens - tok_count[static_cast<size_t>(anchor)];
  if (budget < 0) {
    // Single over-long anchor sentence: hard-truncate it to the budget.
    auto words = split_words(sample.sentences[static_cast<size_t>(anchor)]);
    std::string cut;
    for (int i = 0; i < window_tokens; ++i) {
      if (i) cut += ' ';
      cut += words[static_cast<size_t>(i)];
    }
    Sample out = sample;
    out.sentences = {cut};
    out.anchor = 0;
    return out;
  }
  int lo = anchor, hi = anchor;
  bool grew = true;
  while (grew) {
    grew = false;
    if (lo > 0 && tok_count[static_cast<size_t>(lo - 1)] <= budget) {
      budget -= tok_count[static_cast<size_t>(lo - 1)];
      --lo;
      grew = true;
    }
    if (hi + 1 < n && tok_count[static_cast<size_t>(hi + 1)] <= budget) {
      budget -= tok_count[static_cast<size_t>(hi + 1)];
      ++hi;
      grew = true;
    }
  }
  Sample out = sample;
  out.sentences.assign(sample.sentences.begin() + lo, sample.sentences.begin() + hi + 1);
  out.anchor = anchor - lo;
  return out;
}

// --- Embedding cache: float32 little-endian rows + JSON sidecar ---

struct EmbeddingCache {
  int dim = 0;
  std::vector<std::string> ids;
  Mat rows;  // count x dim, as doubles
};

inline void write_embedding_cache(const std::string& bin_path, const EmbeddingCache& c) {
  std::ofstream f(bin_path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write embedding cache: " + bin_path);
  for (Eigen::Index i = 0; i < c.rows.rows(); ++i)
    for (Eigen::Index j = 0; j < c.rows.cols(); ++j) {
      float x = static_cast<float>(c.rows(i, j));
      f.write(reinterpret_cast<const char*>(&x), 4);
    }
  nlohmann::json side;
  side["dim"] = c.dim;
  side["count"] = c.ids.size();
  side["ids"] = c.ids;
  std::ofstream sj(bin_path + ".json");
  sj << side.dump() << '\n';
}

inline EmbeddingCache read_embedding_cache(const std::string& bin_path) {
  std::ifstream sj(bin_path + ".json");
  if (!sj) throw std::runtime_error("missing embedding cache sidecar: " + bin_path + ".json");
  nlohmann::json side = nlohmann::json::parse(sj);
  EmbeddingCache c;
  c.dim = side.at("dim").get<int>();
  c.ids = side.at("ids").get<std::vector<std::string>>();
  auto count = static_cast<Eigen::Index>(side.at("count").get<std::size_t>());
  c.rows.resize(count, c.dim);
  std::ifstream f(bin_path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read embedding cache: " + bin_path);
  for (Eigen::Index i = 0; i < count; ++i)
    for (Eigen::Index j = 0; j < c.dim; ++j) {
      float x;
      f.read(reinterpret_cast<char*>(&x), 4);
      c.rows(i, j) = static_cast<double>(x);
    }
  if (!f) throw std::runtime_error("truncated embedding cache: " + bin_path);
  return c;
}

}  // namespace facecap
