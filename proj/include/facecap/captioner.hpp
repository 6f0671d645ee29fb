#pragma once

// Encoder-decoder captioner: visual feature mapper, encoder cross-attention
// over [H_V; H_E], caption NLL, total loss, training loop and beam-search
// generation, over a toy trainable transformer backbone.

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "facecap/autodiff.hpp"
#include "facecap/beam_search.hpp"
#include "facecap/corpus.hpp"
#include "facecap/facenaming.hpp"
#include "facecap/layers.hpp"
#include "facecap/params.hpp"
#include "facecap/retrieval.hpp"
#include "facecap/tokenizer.hpp"

namespace facecap {

struct RunConfig {
  int epochs = 16;
  int batch_size = 32;
  double lr = 3e-5;
  double warmup_fraction = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  double grad_clip_norm = 0.1;
  int article_max_tokens = 512;
  int caption_max_tokens = 100;
  int beam_size = 5;
  int l_I = 20;
  int name_feature_len = 20;
  int retrieval_k = 8;
  std::uint64_t seed = 0;
  // architecture
  int vocab = 1000;
  int d_hidden = 64;
  int d_image = 32;
  int d_face = 16;
  int enc_layers = 2;
  int dec_layers = 2;
  int pa_layers = 2;
  int ffn_dim = 128;
  int max_faces = 4;
  int retrieval_text_hash = 64;
  int retrieval_emb_dim = 32;
  int retrieval_ref_dim = 48;
  // component flags (Table-2 ladder: VF / NF / RS)
  bool use_visual = true;
  bool use_face = true;
  bool use_retrieval = true;
  bool freeze_backbone = false;
  bool retrieval_use_tuned = true;

  void validate() const {
    auto pos = [](double v, const char* name) {
      if (!(v > 0)) throw ValidationError(std::string("config: ") + name + " must be positive");
    };
    pos(epochs, "epochs");
    pos(batch_size, "batch_size");
    pos(lr, "lr");
    pos(beta1, "beta1");
    pos(beta2, "beta2");
    pos(eps, "eps");
    pos(grad_clip_norm, "grad_clip_norm");
    pos(article_max_tokens, "article_max_tokens");
    pos(caption_max_tokens, "caption_max_tokens");
    pos(beam_size, "beam_size");
    pos(l_I, "l_I");
    pos(name_feature_len, "name_feature_len");
    pos(retrieval_k, "retrieval_k");
    pos(vocab, "vocab");
    pos(d_hidden, "d_hidden");
    pos(d_image, "d_image");
    pos(d_face, "d_face");
    pos(enc_layers, "enc_layers");
    pos(dec_layers, "dec_layers");
    pos(pa_layers, "pa_layers");
    pos(ffn_dim, "ffn_dim");
    pos(max_faces, "max_faces");
    if (weight_decay < 0) throw ValidationError("config: weight_decay must be >= 0");
    if (!(warmup_fraction > 0.0 && warmup_fraction < 1.0))
      throw ValidationError("config: warmup_fraction must be in (0,1)");
  }
};

namespace cfgio {

template <typename F>
void for_each_field(RunConfig& c, F&& f) {
  f("epochs", c.epochs);
  f("batch_size", c.batch_size);
  f("lr", c.lr);
  f("warmup_fraction", c.warmup_fraction);
  f("beta1", c.beta1);
  f("beta2", c.beta2);
  f("eps", c.eps);
  f("weight_decay", c.weight_decay);
  f("grad_clip_norm", c.grad_clip_norm);
  f("article_max_tokens", c.article_max_tokens);
  f("caption_max_tokens", c.caption_max_tokens);
  f("beam_size", c.beam_size);
  f("l_I", c.l_I);
  f("name_feature_len", c.name_feature_len);
  f("retrieval_k", c.retrieval_k);
  f("seed", c.seed);
  f("vocab", c.vocab);
  f("d_hidden", c.d_hidden);
  f("d_image", c.d_image);
  f("d_face", c.d_face);
  f("enc_layers", c.enc_layers);
  f("dec_layers", c.dec_layers);
  f("pa_layers", c.pa_layers);
  f("ffn_dim", c.ffn_dim);
  f("max_faces", c.max_faces);
  f("retrieval_text_hash", c.retrieval_text_hash);
  f("retrieval_emb_dim", c.retrieval_emb_dim);
  f("retrieval_ref_dim", c.retrieval_ref_dim);
  f("use_visual", c.use_visual);
  f("use_face", c.use_face);
  f("use_retrieval", c.use_retrieval);
  f("freeze_backbone", c.freeze_backbone);
  f("retrieval_use_tuned", c.retrieval_use_tuned);
}

inline void assign(int& dst, const std::string& v) { dst = std::stoi(v); }
inline void assign(double& dst, const std::string& v) { dst = std::stod(v); }
inline void assign(std::uint64_t& dst, const std::string& v) { dst = std::stoull(v); }
inline void assign(bool& dst, const std::string& v) {
  if (v == "true" || v == "1") dst = true;
  else if (v == "false" || v == "0") dst = false;
  else throw ValidationError("config: bad boolean value: " + v);
}

}  // namespace cfgio

// Flat key=value config; later keys override earlier ones.
inline void apply_config_line(RunConfig& c, const std::string& key, const std::string& value) {
  bool found = false;
  cfgio::for_each_field(c, [&](const char* name, auto& field) {
    if (key == name) {
      cfgio::assign(field, value);
      found = true;
    }
  });
  if (!found) throw ValidationError("config: unknown key: " + key);
}

inline RunConfig load_config_file(const std::string& path, RunConfig base = {}) {
  std::ifstream f(path);
  if (!f) throw ValidationError("cannot open config file: " + path);
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    auto h = line.find('#');
    if (h != std::string::npos) line = line.substr(0, h);
    auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ValidationError(path + ":" + std::to_string(lineno) + ": expected key=value");
    auto trim = [](std::string s) {
      auto a = s.find_first_not_of(" \t\r");
      auto b = s.find_last_not_of(" \t\r");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    apply_config_line(base, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return base;
}

inline nlohmann::json config_to_json(const RunConfig& cfg) {
  nlohmann::json j;
  cfgio::for_each_field(const_cast<RunConfig&>(cfg),
                        [&](const char* name, auto& field) { j[name] = field; });
  return j;
}

inline RunConfig config_from_json(const nlohmann::json& j) {
  RunConfig c;
  cfgio::for_each_field(c, [&](const char* name, auto& field) {
    if (j.contains(name)) field = j.at(name).template get<std::decay_t<decltype(field)>>();
  });
  return c;
}

// Maps hash-token ids back to words, by corpus frequency (ties: smaller word).
class Lexicon {
 public:
  static Lexicon build(const std::vector<Sample>& data, const HashTokenizer& tok) {
    std::map<int, std::map<std::string, int>> counts;
    auto feed = [&](const std::string& text) {
      for (const auto& w : split_words(text)) counts[tok.word_id(w)][w]++;
    };
    for (const auto& s : data) {
      feed(s.caption);
      for (const auto& sent : s.sentences) feed(sent);
    }
    Lexicon lx;
    for (const auto& [id, words] : counts) {
      int best = -1;
      std::string bw;
      for (const auto& [w, c] : words)
        if (c > best || (c == best && w < bw)) {
          best = c;
          bw = w;
        }
      lx.id2word_[id] = bw;
    }
    return lx;
  }

  std::string decode(const std::vector<int>& ids) const {
    std::string out;
    for (int id : ids) {
      auto it = id2word_.find(id);
      if (it == id2word_.end()) continue;
      if (!out.empty()) out += ' ';
      out += it->second;
    }
    return out;
  }

  void save(const std::string& path) const {
    nlohmann::json j;
    for (const auto& [id, w] : id2word_) j[std::to_string(id)] = w;
    std::ofstream f(path);
    f << j.dump() << '\n';
  }

  static Lexicon load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open lexicon: " + path);
    nlohmann::json j = nlohmann::json::parse(f);
    Lexicon lx;
    for (auto it = j.begin(); it != j.end(); ++it)
      lx.id2word_[std::stoi(it.key())] = it.value().get<std::string>();
    return lx;
  }

 private:
  std::map<int, std::string> id2word_;
};

struct GenerationResult {
  std::string caption;
  std::vector<int> token_ids;
  double beam_logprob = 0.0;
  std::vector<double> step_logprobs;
};

class CaptionModel {
 public:
  explicit CaptionModel(const RunConfig& cfg)
      : cfg_(cfg), tok_(cfg.vocab) {
    cfg_.validate();
    std::mt19937_64 rng(cfg_.seed);
    tok_embed_ = store_.add("backbone.tok_embed", normal_init(cfg_.vocab, cfg_.d_hidden, 0.05, rng));
    for (int i = 0; i < cfg_.enc_layers; ++i) {
      std::string p = "backbone.enc" + std::to_string(i);
      EncLayer ly;
      ly.self_attn = make_attention(store_, p + ".self", cfg_.d_hidden, rng);
      ly.ln1 = make_layer_norm(store_, p + ".ln1", cfg_.d_hidden);
      ly.ffn = make_ffn(store_, p + ".ffn", cfg_.d_hidden, cfg_.ffn_dim, rng);
      ly.ln2 = make_layer_norm(store_, p + ".ln2", cfg_.d_hidden);
      enc_.push_back(ly);
    }
    for (int i = 0; i < cfg_.dec_layers; ++i) {
      std::string p = "backbone.dec" + std::to_string(i);
      DecLayer ly;
      ly.self_attn = make_attention(store_, p + ".self", cfg_.d_hidden, rng);
      ly.ln1 = make_layer_norm(store_, p + ".ln1", cfg_.d_hidden);
      ly.cross_attn = make_attention(store_, p + ".cross", cfg_.d_hidden, rng);
      ly.ln2 = make_layer_norm(store_, p + ".ln2", cfg_.d_hidden);
      ly.ffn = make_ffn(store_, p + ".ffn", cfg_.d_hidden, cfg_.ffn_dim, rng);
      ly.ln3 = make_layer_norm(store_, p + ".ln3", cfg_.d_hidden);
      dec_.push_back(ly);
    }
    lm_w_ = store_.add("backbone.lm_head.w", xavier_init(cfg_.d_hidden, cfg_.vocab, rng));
    lm_b_ = store_.add("backbone.lm_head.b", Mat::Zero(1, cfg_.vocab));

    if (cfg_.use_visual) {
      std::mt19937_64 vrng(cfg_.seed + 101);
      vis_w1_ = store_.add("visual.map.w1", xavier_init(cfg_.d_image, 10 * cfg_.d_image, vrng));
      vis_b1_ = store_.add("visual.map.b1", Mat::Zero(1, 10 * cfg_.d_image));
      vis_w2_ = store_.add("visual.map.w2",
                           xavier_init(10 * cfg_.d_image, cfg_.l_I * cfg_.d_image, vrng));
      vis_b2_ = store_.add("visual.map.b2", Mat::Zero(1, cfg_.l_I * cfg_.d_image));
      if (cfg_.d_image != cfg_.d_hidden) {
        vis_adapter_w_ = store_.add("visual.adapter.w",
                                    xavier_init(cfg_.d_image, cfg_.d_hidden, vrng));
        vis_adapter_b_ = store_.add("visual.adapter.b", Mat::Zero(1, cfg_.d_hidden));
      }
      for (int i = 0; i < cfg_.enc_layers; ++i)
        vis_ffn_.push_back(make_ffn(store_, "visual.enc" + std::to_string(i) + ".ffn",
                                    cfg_.d_hidden, cfg_.ffn_dim, vrng));
    }
    if (cfg_.use_visual || cfg_.use_face) {
      std::mt19937_64 frng(cfg_.seed + 202);
      for (int i = 0; i < cfg_.enc_layers; ++i) {
        std::string p = "fusion.enc" + std::to_string(i);
        FusionLayer ly;
        ly.cross_attn = make_attention(store_, p + ".cross", cfg_.d_hidden, frng);
        ly.ln = make_layer_norm(store_, p + ".ln", cfg_.d_hidden);
        fusion_.push_back(ly);
      }
    }
    if (cfg_.use_face) {
      std::mt19937_64 nrng(cfg_.seed + 303);
      FaceNamingConfig fc;
      fc.vocab = cfg_.vocab;
      fc.d_face = cfg_.d_face;
      fc.d_hidden = cfg_.d_hidden;
      fc.num_layers = cfg_.pa_layers;
      fc.ffn_dim = cfg_.ffn_dim;
      fc.name_feature_len = cfg_.name_feature_len;
      fc.max_faces = cfg_.max_faces;
      facenaming_ = std::make_unique<FaceNamingModule>(fc, store_, nrng);
    }
    if (cfg_.use_retrieval) {
      retrieval_encoder_ = std::make_unique<ToyDualEncoder>(
          cfg_.d_image, cfg_.retrieval_text_hash, cfg_.retrieval_emb_dim,
          cfg_.retrieval_ref_dim, cfg_.seed + 404, &store_);
    }
  }

  const RunConfig& config() const { return cfg_; }
  ParameterStore& params() { return store_; }
  const ParameterStore& params() const { return store_; }
  const HashTokenizer& tokenizer() const { return tok_; }
  FaceNamingModule* face_naming() { return facenaming_.get(); }
  ToyDualEncoder* retrieval_encoder() { return retrieval_encoder_.get(); }
  int truncation_warnings() const { return truncation_warnings_; }

  // MLP over the image [CLS] embedding, reshaped row-major to l_I x d_image.
  ad::Var map_visual(const Eigen::VectorXd& cls) const {
    if (!cfg_.use_visual) throw ValidationError("map_visual: visual features disabled");
    if (cls.size() != cfg_.d_image)
      throw ValidationError("map_visual: expected input dim " + std::to_string(cfg_.d_image) +
                            ", got " + std::to_string(cls.size()));
    ad::check_finite(Mat(cls.transpose()), "map_visual input");
    ad::Var x = ad::constant(cls.transpose());
    ad::Var h = ad::tanh_(ad::add_row(ad::matmul(x, vis_w1_), vis_b1_));
    ad::Var flat = ad::add_row(ad::matmul(h, vis_w2_), vis_b2_);
    return ad::reshape(flat, cfg_.l_I, cfg_.d_image);
  }

  // Article sentences after windowing and (optionally) retrieval.
  std::vector<std::string> article_segment(const Sample& sample) const {
    Sample windowed = truncate_window(sample, cfg_.article_max_tokens);
    if (cfg_.use_retrieval && sample.image_emb.size() > 0) {
      RetrievedSegment seg = retrieve(windowed, *retrieval_encoder_, cfg_.retrieval_k);
      return seg.sentences;
    }
    return windowed.sentences;
  }

  std::vector<int> article_tokens(const Sample& sample) const {
    std::vector<int> ids;
    for (const auto& sent : article_segment(sample))
      for (int id : tok_.encode(sent)) ids.push_back(id);
    if (static_cast<int>(ids.size()) > cfg_.article_max_tokens) {
      ids.resize(static_cast<size_t>(cfg_.article_max_tokens));
      ++truncation_warnings_;
    }
    return ids;
  }

  struct SampleState {
    ad::Var memory;       // encoder output
    ad::Var face_states;  // only when use_face and faces present
    Mat gt_names;         // includes <NONAME>
    bool has_faces = false;
  };

  SampleState encode_sample(const Sample& sample) const {
    ad::Var h_v, h_e;
    if (cfg_.use_visual && sample.image_emb.size() > 0) {
      ad::Var hv = map_visual(sample.image_emb);
      h_v = vis_adapter_w_ ? ad::add_row(ad::matmul(hv, vis_adapter_w_), vis_adapter_b_) : hv;
    }
    SampleState st;
    if (cfg_.use_face) {
      auto fwd = facenaming_->forward(sample, tok_);
      h_e = fwd.h_e;
      st.face_states = fwd.face_states;
      st.has_faces = fwd.face_states->val.rows() > 0;
      std::vector<std::string> person_names;
      for (const auto& e : sample.entities)
        if (e.type == EntityType::PERSON) person_names.push_back(e.surface);
      st.gt_names = gt_name_matrix(person_names, tok_, tok_embed_->val);
    }
    st.memory = encode_fused(article_tokens(sample), h_v, h_e);
    return st;
  }

  // Encoder over article tokens with a per-layer cross-attention sublayer
  // into [H_V; H_E]. With both absent this is the plain text encoder.
  ad::Var encode_fused(const std::vector<int>& tokens, ad::Var h_v, ad::Var h_e) const {
    std::vector<int> ids = tokens;
    if (ids.empty()) ids.push_back(SpecialTokens::kPad);
    ad::Var x = ad::add(ad::embedding(tok_embed_, ids),
                        ad::constant(sinusoidal_positions(
                            static_cast<Eigen::Index>(ids.size()), cfg_.d_hidden)));
    bool has_v = h_v && h_v->val.rows() > 0;
    bool has_e = h_e && h_e->val.rows() > 0;
    for (size_t i = 0; i < enc_.size(); ++i) {
      const auto& ly = enc_[i];
      x = layer_norm(ly.ln1, ad::add(x, attention(ly.self_attn, x, x)));
      if (has_v || has_e) {
        if (has_v && !vis_ffn_.empty())
          h_v = ad::add(h_v, ffn(vis_ffn_[i], h_v));
        ad::Var mem = has_v && has_e ? ad::concat_rows(h_v, h_e) : (has_v ? h_v : h_e);
        const auto& fu = fusion_[i];
        x = layer_norm(fu.ln, ad::add(x, attention(fu.cross_attn, x, mem)));
      }
      x = layer_norm(ly.ln2, ad::add(x, ffn(ly.ffn, x)));
    }
    return x;
  }

  // Teacher-forced logits: one row per target position.
  ad::Var caption_logits(const ad::Var& memory, const std::vector<int>& decoder_input) const {
    ad::Var y = ad::add(ad::embedding(tok_embed_, decoder_input),
                        ad::constant(sinusoidal_positions(
                            static_cast<Eigen::Index>(decoder_input.size()), cfg_.d_hidden)));
    Mat cm = causal_mask(static_cast<Eigen::Index>(decoder_input.size()));
    for (const auto& ly : dec_) {
      y = layer_norm(ly.ln1, ad::add(y, attention(ly.self_attn, y, y, &cm)));
      y = layer_norm(ly.ln2, ad::add(y, attention(ly.cross_attn, y, memory)));
      y = layer_norm(ly.ln3, ad::add(y, ffn(ly.ffn, y)));
    }
    return ad::add_row(ad::matmul(y, lm_w_), lm_b_);
  }

  std::vector<int> caption_target_ids(const Sample& sample) const {
    std::vector<int> ids = tok_.encode(sample.caption);
    if (static_cast<int>(ids.size()) > cfg_.caption_max_tokens - 1)
      ids.resize(static_cast<size_t>(cfg_.caption_max_tokens - 1));
    ids.push_back(SpecialTokens::kEos);
    return ids;
  }

  // Mean over tokens of -log p(y_t | y_<t).
  ad::Var caption_nll_sample(const SampleState& st, const Sample& sample) const {
    std::vector<int> target = caption_target_ids(sample);
    std::vector<int> input;
    input.push_back(SpecialTokens::kBos);
    input.insert(input.end(), target.begin(), target.end() - 1);
    return ad::cross_entropy_rows(caption_logits(st.memory, input), target);
  }

  struct BatchLoss {
    ad::Var total;
    double l_cap = 0.0;
    double l_face = 0.0;
    std::vector<FaceNameAlignment> alignments;
  };

  // L = L_cap + L_{f<->n}, unit weights.
  BatchLoss total_loss(const std::vector<Sample>& batch) const {
    if (batch.empty()) throw ValidationError("total_loss: empty batch");
    ad::Var cap_sum;
    std::vector<ContrastiveSample> cs;
    for (const auto& s : batch) {
      SampleState st = encode_sample(s);
      ad::Var nll = caption_nll_sample(st, s);
      cap_sum = cap_sum ? ad::add(cap_sum, nll) : nll;
      if (cfg_.use_face) cs.push_back({st.face_states, st.gt_names});
    }
    ad::Var l_cap = ad::scale(cap_sum, 1.0 / static_cast<double>(batch.size()));
    BatchLoss out;
    out.l_cap = l_cap->val(0, 0);
    if (cfg_.use_face) {
      ContrastiveResult cr = contrastive_loss(cs);
      out.l_face = cr.batch_loss->val(0, 0);
      out.alignments = std::move(cr.per_sample);
      out.total = ad::add(l_cap, cr.batch_loss);
    } else {
      out.total = l_cap;
    }
    return out;
  }

  double caption_nll(const std::vector<Sample>& batch) const {
    ad::Var sum;
    for (const auto& s : batch) {
      SampleState st = encode_sample(s);
      ad::Var nll = caption_nll_sample(st, s);
      sum = sum ? ad::add(sum, nll) : nll;
    }
    return sum->val(0, 0) / static_cast<double>(batch.size());
  }

  GenerationResult generate(const Sample& sample, const Lexicon& lexicon,
                            int beam_size = -1) const {
    if (beam_size < 0) beam_size = cfg_.beam_size;
    SampleState st = encode_sample(sample);
    StepScorer scorer = [&](const std::vector<int>& prefix) {
      std::vector<int> input;
      input.push_back(SpecialTokens::kBos);
      input.insert(input.end(), prefix.begin(), prefix.end());
      ad::Var logits = caption_logits(st.memory, input);
      Eigen::RowVectorXd last = logits->val.row(logits->val.rows() - 1);
      double mx = last.maxCoeff();
      Eigen::RowVectorXd e = (last.array() - mx).exp();
      double z = e.sum();
      return Eigen::VectorXd((last.array() - mx - std::log(z)).transpose());
    };
    BeamHypothesis best = beam_search(scorer, cfg_.vocab, SpecialTokens::kEos,
                                      cfg_.caption_max_tokens, beam_size);
    GenerationResult res;
    res.token_ids = best.tokens;
    res.beam_logprob = best.logprob;
    res.step_logprobs = best.step_logprobs;
    res.caption = lexicon.decode(best.tokens);
    return res;
  }

 private:
  struct EncLayer {
    AttentionParams self_attn;
    LayerNormParams ln1;
    FfnParams ffn;
    LayerNormParams ln2;
  };
  struct DecLayer {
    AttentionParams self_attn;
    LayerNormParams ln1;
    AttentionParams cross_attn;
    LayerNormParams ln2;
    FfnParams ffn;
    LayerNormParams ln3;
  };
  struct FusionLayer {
    AttentionParams cross_attn;
    LayerNormParams ln;
  };

  RunConfig cfg_;
  HashTokenizer tok_;
  ParameterStore store_;
  ad::Var tok_embed_, lm_w_, lm_b_;
  std::vector<EncLayer> enc_;
  std::vector<DecLayer> dec_;
  ad::Var vis_w1_, vis_b1_, vis_w2_, vis_b2_, vis_adapter_w_, vis_adapter_b_;
  std::vector<FfnParams> vis_ffn_;
  std::vector<FusionLayer> fusion_;
  std::unique_ptr<FaceNamingModule> facenaming_;
  std::unique_ptr<ToyDualEncoder> retrieval_encoder_;
  mutable int truncation_warnings_ = 0;
};

struct TrainStepLog {
  int step = 0;
  double lr = 0.0;
  double l_cap = 0.0;
  double l_face = 0.0;
};

struct TrainResult {
  std::vector<TrainStepLog> log;
  bool aborted_on_nan = false;
  int steps_run = 0;
};

// AdamW with linear warmup/decay and global-norm clipping. A NaN loss
// aborts training and restores the last good parameter values.
inline TrainResult train(CaptionModel& model, const std::vector<Sample>& data,
                         const RunConfig& cfg) {
  cfg.validate();
  if (data.empty()) throw ValidationError("train: empty dataset");
  AdamW opt(cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay);
  std::mt19937_64 shuffle_rng(cfg.seed * 6364136223846793005ULL + 1442695040888963407ULL);
  const auto n = data.size();
  const auto batches_per_epoch = (n + static_cast<size_t>(cfg.batch_size) - 1) /
                                 static_cast<size_t>(cfg.batch_size);
  const auto total_steps = static_cast<std::int64_t>(batches_per_epoch) * cfg.epochs;
  TrainResult res;
  std::int64_t step = 0;
  std::map<std::string, Mat> snapshot;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<size_t> order(n);
    for (size_t i = 0; i < n; ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    for (size_t b0 = 0; b0 < n; b0 += static_cast<size_t>(cfg.batch_size)) {
      std::vector<Sample> batch;
      for (size_t i = b0; i < std::min(n, b0 + static_cast<size_t>(cfg.batch_size)); ++i)
        batch.push_back(data[order[i]]);
      snapshot.clear();
      for (const auto& [name, v] : model.params().all()) snapshot[name] = v->val;
      model.params().zero_grads();
      auto loss = model.total_loss(batch);
      double lv = loss.total->val(0, 0);
      if (!std::isfinite(lv)) {
        for (const auto& [name, m] : snapshot)
          model.params().get(name)->val = m;
        res.aborted_on_nan = true;
        return res;
      }
      ad::backward(loss.total);
      if (cfg.freeze_backbone)
        for (const auto& [name, v] : model.params().all())
          if (name.rfind("backbone.", 0) == 0) v->grad.setZero();
      ++step;
      double lr = lr_at_step(step, total_steps, cfg.lr, cfg.warmup_fraction);
      opt.step(model.params(), lr, cfg.grad_clip_norm);
      res.log.push_back({static_cast<int>(step), lr, loss.l_cap, loss.l_face});
      res.steps_run = static_cast<int>(step);
    }
  }
  return res;
}

}  // namespace facecap
