#pragma once

// Caption metrics (BLEU-4, ROUGE-L, METEOR, CIDEr) following the
// coco-caption scoring conventions, plus named-entity precision/recall and
// subset-sliced reporting. Scores are reported on the x100 scale.
//
// METEOR runs the exact and Porter-stem matcher stages; a synonym table can
// be plugged in, so absolute METEOR values differ from setups that use a
// lexical synonym resource.

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "facecap/corpus.hpp"
#include "facecap/stemmer.hpp"
#include "facecap/tokenizer.hpp"

namespace facecap {

namespace metrics_detail {

inline std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> out;
  for (auto& w : split_words(text)) {
    std::string lw = w;
    std::transform(lw.begin(), lw.end(), lw.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    out.push_back(std::move(lw));
  }
  return out;
}

inline std::string lower(const std::string& s) {
  std::string out = s;
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

using NgramCounts = std::map<std::vector<std::string>, int>;

inline NgramCounts ngram_counts(const std::vector<std::string>& toks, int nmax) {
  NgramCounts c;
  for (int n = 1; n <= nmax; ++n)
    for (size_t i = 0; i + static_cast<size_t>(n) <= toks.size(); ++i)
      c[std::vector<std::string>(toks.begin() + static_cast<long>(i),
                                 toks.begin() + static_cast<long>(i) + n)]++;
  return c;
}

inline size_t lcs_length(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  std::vector<std::vector<size_t>> dp(a.size() + 1, std::vector<size_t>(b.size() + 1, 0));
  for (size_t i = 1; i <= a.size(); ++i)
    for (size_t j = 1; j <= b.size(); ++j)
      dp[i][j] = a[i - 1] == b[j - 1] ? dp[i - 1][j - 1] + 1
                                      : std::max(dp[i - 1][j], dp[i][j - 1]);
  return dp[a.size()][b.size()];
}

}  // namespace metrics_detail

struct CaptionScores {
  double bleu4 = 0.0;
  double meteor = 0.0;
  double rougeL = 0.0;
  double cider = 0.0;
};

// Corpus BLEU-4 with the coco-caption accumulation: clipped n-gram matches,
// closest reference length, exp(1 - 1/ratio) brevity penalty.
inline double bleu4_corpus(const std::map<std::string, std::string>& cands,
                           const std::map<std::string, std::vector<std::string>>& refs) {
  using namespace metrics_detail;
  constexpr int kN = 4;
  constexpr double kSmall = 1e-9, kTiny = 1e-15;
  double correct[kN] = {0, 0, 0, 0}, guess[kN] = {0, 0, 0, 0};
  long testlen = 0, reflen = 0;
  for (const auto& [id, cand] : cands) {
    auto ct = tokenize(cand);
    const auto& rlist = refs.at(id);
    long best_ref = 0, best_diff = std::numeric_limits<long>::max();
    NgramCounts ref_max;
    for (const auto& r : rlist) {
      auto rt = tokenize(r);
      long diff = std::labs(static_cast<long>(rt.size()) - static_cast<long>(ct.size()));
      if (diff < best_diff) {
        best_diff = diff;
        best_ref = static_cast<long>(rt.size());
      }
      for (const auto& [g, c] : ngram_counts(rt, kN)) {
        auto& slot = ref_max[g];
        slot = std::max(slot, c);
      }
    }
    testlen += static_cast<long>(ct.size());
    reflen += best_ref;
    auto cc = ngram_counts(ct, kN);
    for (const auto& [g, c] : cc) {
      int n = static_cast<int>(g.size()) - 1;
      auto it = ref_max.find(g);
      correct[n] += std::min(c, it == ref_max.end() ? 0 : it->second);
    }
    for (int n = 0; n < kN; ++n)
      guess[n] += std::max<long>(0, static_cast<long>(ct.size()) - n);
  }
  double bleu = 1.0;
  for (int n = 0; n < kN; ++n) bleu *= (correct[n] + kTiny) / (guess[n] + kSmall);
  bleu = std::pow(bleu, 1.0 / kN);
  double ratio = (static_cast<double>(testlen) + kTiny) / (static_cast<double>(reflen) + kSmall);
  if (ratio < 1.0) bleu *= std::exp(1.0 - 1.0 / ratio);
  return bleu;
}

// ROUGE-L F-measure (beta = 1.2), max over references, averaged over samples.
inline double rougeL_corpus(const std::map<std::string, std::string>& cands,
                            const std::map<std::string, std::vector<std::string>>& refs) {
  using namespace metrics_detail;
  constexpr double kBeta = 1.2;
  double total = 0.0;
  for (const auto& [id, cand] : cands) {
    auto ct = tokenize(cand);
    double pmax = 0.0, rmax = 0.0;
    for (const auto& r : refs.at(id)) {
      auto rt = tokenize(r);
      double lcs = static_cast<double>(lcs_length(rt, ct));
      if (!ct.empty()) pmax = std::max(pmax, lcs / static_cast<double>(ct.size()));
      if (!rt.empty()) rmax = std::max(rmax, lcs / static_cast<double>(rt.size()));
    }
    if (pmax > 0.0 && rmax > 0.0)
      total += ((1.0 + kBeta * kBeta) * pmax * rmax) / (rmax + kBeta * kBeta * pmax);
  }
  return total / static_cast<double>(cands.size());
}

// CIDEr with TF-IDF n-gram weighting (n = 1..4), document frequencies over
// the evaluation references, clipped term products and the gaussian length
// penalty (sigma = 6), x10 scaling per image.
inline double cider_corpus(const std::map<std::string, std::string>& cands,
                           const std::map<std::string, std::vector<std::string>>& refs) {
  using namespace metrics_detail;
  constexpr int kN = 4;
  constexpr double kSigma = 6.0;
  std::map<std::vector<std::string>, int> doc_freq;
  for (const auto& [id, rlist] : refs) {
    std::set<std::vector<std::string>> seen;
    for (const auto& r : rlist)
      for (const auto& [g, c] : ngram_counts(tokenize(r), kN)) seen.insert(g);
    for (const auto& g : seen) doc_freq[g]++;
  }
  double log_docs = std::log(static_cast<double>(refs.size()));

  struct Vec {
    std::array<std::map<std::vector<std::string>, double>, 4> v;
    std::array<double, 4> norm{};
    double length = 0.0;  // bigram count, matching the coco scorer
  };
  auto to_vec = [&](const std::vector<std::string>& toks) {
    Vec out;
    for (const auto& [g, c] : ngram_counts(toks, kN)) {
      auto it = doc_freq.find(g);
      double df = std::log(std::max(1.0, it == doc_freq.end() ? 0.0 : double(it->second)));
      int n = static_cast<int>(g.size()) - 1;
      double w = static_cast<double>(c) * (log_docs - df);
      out.v[static_cast<size_t>(n)][g] = w;
      out.norm[static_cast<size_t>(n)] += w * w;
      if (n == 1) out.length += static_cast<double>(c);
    }
    for (auto& x : out.norm) x = std::sqrt(x);
    return out;
  };

  double total = 0.0;
  for (const auto& [id, cand] : cands) {
    Vec hyp = to_vec(tokenize(cand));
    const auto& rlist = refs.at(id);
    std::array<double, 4> acc{};
    for (const auto& r : rlist) {
      Vec rv = to_vec(tokenize(r));
      double delta = hyp.length - rv.length;
      for (size_t n = 0; n < 4; ++n) {
        double val = 0.0;
        for (const auto& [g, w] : hyp.v[n]) {
          auto it = rv.v[n].find(g);
          if (it != rv.v[n].end()) val += std::min(w, it->second) * it->second;
        }
        if (hyp.norm[n] != 0.0 && rv.norm[n] != 0.0) val /= hyp.norm[n] * rv.norm[n];
        val *= std::exp(-(delta * delta) / (2.0 * kSigma * kSigma));
        acc[n] += val;
      }
    }
    double score = (acc[0] + acc[1] + acc[2] + acc[3]) / 4.0;
    score /= static_cast<double>(rlist.size());
    total += score * 10.0;
  }
  return total / static_cast<double>(cands.size());
}

// Pluggable synonym stage: returns true when two (unstemmed) words should
// count as synonyms. The default build plugs in nothing.
using SynonymMatcher = std::function<bool(const std::string&, const std::string&)>;

// METEOR with exact, stem and (optional) synonym matcher stages;
// alpha = 0.9, beta = 3, gamma = 0.5; max over references.
inline double meteor_corpus(const std::map<std::string, std::string>& cands,
                            const std::map<std::string, std::vector<std::string>>& refs,
                            const SynonymMatcher& synonyms = nullptr) {
  using namespace metrics_detail;
  constexpr double kAlpha = 0.9, kBeta = 3.0, kGamma = 0.5;
  auto score_pair = [&](const std::vector<std::string>& hyp,
                        const std::vector<std::string>& ref) {
    std::vector<std::pair<size_t, size_t>> matches;  // (hyp idx, ref idx)
    std::vector<bool> hyp_used(hyp.size(), false), ref_used(ref.size(), false);
    auto run_stage = [&](auto&& eq) {
      for (size_t i = 0; i < hyp.size(); ++i) {
        if (hyp_used[i]) continue;
        for (size_t j = 0; j < ref.size(); ++j) {
          if (ref_used[j]) continue;
          if (eq(hyp[i], ref[j])) {
            matches.emplace_back(i, j);
            hyp_used[i] = ref_used[j] = true;
            break;
          }
        }
      }
    };
    run_stage([](const std::string& a, const std::string& b) { return a == b; });
    run_stage([](const std::string& a, const std::string& b) {
      return porter_stem(a) == porter_stem(b);
    });
    if (synonyms)
      run_stage([&](const std::string& a, const std::string& b) { return synonyms(a, b); });
    double m = static_cast<double>(matches.size());
    if (m == 0.0 || hyp.empty() || ref.empty()) return 0.0;
    double p = m / static_cast<double>(hyp.size());
    double r = m / static_cast<double>(ref.size());
    double fmean = p * r / (kAlpha * p + (1.0 - kAlpha) * r);
    std::sort(matches.begin(), matches.end());
    double chunks = 1.0;
    for (size_t k = 1; k < matches.size(); ++k)
      if (matches[k].first != matches[k - 1].first + 1 ||
          matches[k].second != matches[k - 1].second + 1)
        chunks += 1.0;
    double penalty = kGamma * std::pow(chunks / m, kBeta);
    return fmean * (1.0 - penalty);
  };
  double total = 0.0;
  for (const auto& [id, cand] : cands) {
    auto hyp = tokenize(cand);
    double best = 0.0;
    for (const auto& r : refs.at(id)) best = std::max(best, score_pair(hyp, tokenize(r)));
    total += best;
  }
  return total / static_cast<double>(cands.size());
}

inline void check_id_sets(const std::map<std::string, std::string>& cands,
                          const std::map<std::string, std::vector<std::string>>& refs) {
  if (cands.size() != refs.size())
    throw ValidationError("caption_metrics: candidate/reference id sets differ in size");
  for (const auto& [id, c] : cands) {
    auto it = refs.find(id);
    if (it == refs.end())
      throw ValidationError("caption_metrics: id '" + id + "' missing from references");
    if (it->second.empty())
      throw ValidationError("caption_metrics: empty reference list for id '" + id + "'");
  }
}

// All four caption scores, x100.
inline CaptionScores caption_metrics(const std::map<std::string, std::string>& cands,
                                     const std::map<std::string, std::vector<std::string>>& refs,
                                     const SynonymMatcher& synonyms = nullptr) {
  check_id_sets(cands, refs);
  if (cands.empty()) throw ValidationError("caption_metrics: empty corpus");
  CaptionScores s;
  s.bleu4 = 100.0 * bleu4_corpus(cands, refs);
  s.rougeL = 100.0 * rougeL_corpus(cands, refs);
  s.meteor = 100.0 * meteor_corpus(cands, refs, synonyms);
  s.cider = 100.0 * cider_corpus(cands, refs);
  return s;
}

struct EntityPR {
  double precision = 0.0;
  double recall = 0.0;
  std::size_t matched = 0;
  std::size_t cand_total = 0;
  std::size_t ref_total = 0;
};

using EntityMultiset = std::vector<EntitySpan>;

// Micro-averaged precision/recall over (lowercased surface, type) pairs with
// multiset semantics; optionally restricted to a single type.
inline EntityPR entity_scores(const std::map<std::string, EntityMultiset>& cand,
                              const std::map<std::string, EntityMultiset>& ref,
                              std::optional<EntityType> only_type = std::nullopt) {
  EntityPR out;
  for (const auto& [id, cents] : cand) {
    auto rit = ref.find(id);
    std::map<std::pair<std::string, EntityType>, int> rc;
    if (rit != ref.end())
      for (const auto& e : rit->second) {
        if (only_type && e.type != *only_type) continue;
        rc[{metrics_detail::lower(e.surface), e.type}]++;
        out.ref_total++;
      }
    for (const auto& e : cents) {
      if (only_type && e.type != *only_type) continue;
      out.cand_total++;
      auto key = std::make_pair(metrics_detail::lower(e.surface), e.type);
      auto it = rc.find(key);
      if (it != rc.end() && it->second > 0) {
        it->second--;
        out.matched++;
      }
    }
  }
  // Reference entities from ids absent in cand still count toward recall.
  for (const auto& [id, rents] : ref) {
    if (cand.count(id)) continue;
    for (const auto& e : rents)
      if (!only_type || e.type == *only_type) out.ref_total++;
  }
  out.precision = out.cand_total ? static_cast<double>(out.matched) / double(out.cand_total) : 0.0;
  out.recall = out.ref_total ? static_cast<double>(out.matched) / double(out.ref_total) : 0.0;
  return out;
}

struct MetricReport {
  CaptionScores captions;
  EntityPR entities;
  std::map<EntityType, EntityPR> per_type;
  std::size_t sample_count = 0;
  bool has_metrics = false;  // false for empty subsets
};

inline MetricReport build_report(const std::map<std::string, std::string>& cands,
                                 const std::map<std::string, std::vector<std::string>>& refs,
                                 const std::map<std::string, EntityMultiset>& cand_entities,
                                 const std::map<std::string, EntityMultiset>& ref_entities,
                                 bool by_type) {
  MetricReport r;
  r.sample_count = cands.size();
  if (cands.empty()) return r;
  r.has_metrics = true;
  r.captions = caption_metrics(cands, refs);
  r.entities = entity_scores(cand_entities, ref_entities);
  if (by_type)
    for (EntityType t : {EntityType::PERSON, EntityType::GPE, EntityType::ORG})
      r.per_type[t] = entity_scores(cand_entities, ref_entities, t);
  return r;
}

// One report per subset plus "overall". Every evaluated id must belong to
// exactly one subset.
inline std::map<std::string, MetricReport> subset_report(
    const std::map<std::string, std::string>& cands,
    const std::map<std::string, std::vector<std::string>>& refs,
    const std::map<std::string, EntityMultiset>& cand_entities,
    const std::map<std::string, EntityMultiset>& ref_entities,
    const std::map<Cell, std::vector<std::string>>& subsets, bool by_type = true) {
  std::map<std::string, std::string> id2cell;
  for (const auto& [cell, ids] : subsets)
    for (const auto& id : ids) id2cell[id] = to_string(cell);
  for (const auto& [id, c] : cands)
    if (!id2cell.count(id))
      throw ValidationError("subset_report: id '" + id + "' not covered by any subset");
  std::map<std::string, MetricReport> out;
  for (const auto& [cell, ids] : subsets) {
    std::map<std::string, std::string> c;
    std::map<std::string, std::vector<std::string>> r;
    std::map<std::string, EntityMultiset> ce, re;
    for (const auto& id : ids) {
      auto it = cands.find(id);
      if (it == cands.end()) continue;
      c[id] = it->second;
      r[id] = refs.at(id);
      if (cand_entities.count(id)) ce[id] = cand_entities.at(id);
      if (ref_entities.count(id)) re[id] = ref_entities.at(id);
    }
    out[to_string(cell)] = build_report(c, r, ce, re, by_type);
  }
  out["overall"] = build_report(cands, refs, cand_entities, ref_entities, by_type);
  return out;
}

}  // namespace facecap
