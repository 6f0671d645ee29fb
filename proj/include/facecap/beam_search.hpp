#pragma once

// Length-unnormalized beam search over an arbitrary step scorer.
// Ties break toward the earlier finish step, then lexicographic token ids.

#include <Eigen/Core>

#include <algorithm>
#include <functional>
#include <stdexcept>
#include <vector>

namespace facecap {

struct BeamHypothesis {
  std::vector<int> tokens;  // excludes the end-of-sequence token
  double logprob = 0.0;
  std::vector<double> step_logprobs;  // includes the eos step when eos-finished
  int finish_step = 0;
  bool eos_finished = false;
};

// Returns log-probabilities over the vocabulary given a token prefix.
using StepScorer = std::function<Eigen::VectorXd(const std::vector<int>&)>;

namespace detail {
inline bool better(const BeamHypothesis& a, const BeamHypothesis& b) {
  if (a.logprob != b.logprob) return a.logprob > b.logprob;
  if (a.finish_step != b.finish_step) return a.finish_step < b.finish_step;
  return a.tokens < b.tokens;
}
}  // namespace detail

// Standard semantics: each step expands every live hypothesis with every
// token, keeps the best beam_size continuations overall, and only then moves
// eos-ending ones to the finished set. With beam_size 1 this is exactly
// greedy decoding.
inline BeamHypothesis beam_search(const StepScorer& scorer, int vocab_size, int eos_id,
                                  int max_len, int beam_size) {
  if (beam_size < 1) throw std::invalid_argument("beam_search: beam_size must be >= 1");
  if (max_len < 1) throw std::invalid_argument("beam_search: max_len must be >= 1");
  std::vector<BeamHypothesis> live{BeamHypothesis{}};
  std::vector<BeamHypothesis> finished;
  for (int step = 0; step < max_len && !live.empty(); ++step) {
    std::vector<BeamHypothesis> candidates;
    for (const auto& h : live) {
      Eigen::VectorXd lp = scorer(h.tokens);
      for (int t = 0; t < vocab_size; ++t) {
        BeamHypothesis nh = h;
        nh.logprob += lp(t);
        nh.step_logprobs.push_back(lp(t));
        if (t == eos_id) {
          nh.finish_step = step + 1;
          nh.eos_finished = true;
        } else {
          nh.tokens.push_back(t);
        }
        candidates.push_back(std::move(nh));
      }
    }
    std::sort(candidates.begin(), candidates.end(), detail::better);
    if (static_cast<int>(candidates.size()) > beam_size) candidates.resize(beam_size);
    live.clear();
    for (auto& c : candidates) {
      if (c.eos_finished)
        finished.push_back(std::move(c));
      else
        live.push_back(std::move(c));
    }
  }
  for (auto& h : live) {
    h.finish_step = max_len;
    finished.push_back(std::move(h));
  }
  std::sort(finished.begin(), finished.end(), detail::better);
  return finished.front();
}

}  // namespace facecap
