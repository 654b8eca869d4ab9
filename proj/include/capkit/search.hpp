#pragma once

// Greedy and beam decoding over any model exposing a next-token distribution.

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <stdexcept>
#include <vector>

#include "capkit/data.hpp"

namespace capkit {

struct DecodeOutput {
  std::vector<TokenId> tokens;           // no specials
  std::vector<double> step_log_probs;    // one per emitted token, plus <end> when reached
  double log_prob = 0.0;
  std::vector<std::vector<double>> attention;  // optional, one map per step
};

/// Opaque per-hypothesis decoder state.
struct DecodeState {
  virtual ~DecodeState() = default;
};

class StepModel {
 public:
  struct Step {
    std::vector<double> log_probs;  // over the vocabulary, for the next token
    std::shared_ptr<const DecodeState> next;
    std::vector<double> attention;
  };

  virtual ~StepModel() = default;
  virtual std::size_t vocab_size() const = 0;
  /// State before any token has been consumed.
  virtual std::shared_ptr<const DecodeState> start() const = 0;
  /// Consumes `token` and returns the distribution over what follows it.
  virtual Step step(const DecodeState& state, TokenId token) const = 0;
};

inline std::vector<double> log_softmax(std::span<const double> logits) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : logits) mx = std::max(mx, v);
  double s = 0.0;
  for (double v : logits) s += std::exp(v - mx);
  const double lse = mx + std::log(s);
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
  return out;
}

namespace detail {
inline bool emittable(TokenId t) { return t != Vocabulary::kPad && t != Vocabulary::kStart; }
}  // namespace detail

/// Argmax decoding (ties to the lowest id) from <start> until <end> or until
/// `max_len` decisions have been made. <pad> and <start> are never emitted.
inline DecodeOutput greedy_decode(const StepModel& model, std::size_t max_len) {
  DecodeOutput out;
  auto state = model.start();
  TokenId token = Vocabulary::kStart;
  for (std::size_t step = 0; step < max_len; ++step) {
    auto r = model.step(*state, token);
    TokenId best = Vocabulary::kEnd;
    for (TokenId v = 0; v < r.log_probs.size(); ++v)
      if (detail::emittable(v) && r.log_probs[v] > r.log_probs[best]) best = v;
    if (!r.attention.empty()) out.attention.push_back(std::move(r.attention));
    out.step_log_probs.push_back(r.log_probs[best]);
    out.log_prob += r.log_probs[best];
    if (best == Vocabulary::kEnd) break;
    out.tokens.push_back(best);
    token = best;
    state = r.next;
  }
  return out;
}

struct BeamOptions {
  std::size_t beam_size = 3;
  std::size_t max_len = 30;
  bool length_normalize = false;
};

/// Beam search. Each round ranks every one-token extension of the live
/// hypotheses and keeps the best `k`; extensions ending in <end> retire and
/// shrink `k`. Hypotheses still live after `max_len` rounds retire as they
/// are. Returns up to beam_size hypotheses by descending score (raw log-prob
/// sum, or per-step mean with length_normalize).
inline std::vector<DecodeOutput> beam_decode(const StepModel& model, const BeamOptions& opt) {
  if (opt.beam_size == 0) throw std::invalid_argument("beam_size must be >= 1");
  struct Hyp {
    DecodeOutput out;
    std::shared_ptr<const DecodeState> state;
    TokenId last;
  };
  struct Candidate {
    double score;
    std::size_t hyp;
    TokenId token;
  };
  std::vector<Hyp> live{{DecodeOutput{}, model.start(), Vocabulary::kStart}};
  std::vector<DecodeOutput> finished;
  std::size_t k = opt.beam_size;
  for (std::size_t step = 0; step < opt.max_len && k > 0 && !live.empty(); ++step) {
    std::vector<StepModel::Step> expanded;
    std::vector<Candidate> cands;
    for (std::size_t h = 0; h < live.size(); ++h) {
      expanded.push_back(model.step(*live[h].state, live[h].last));
      const auto& lp = expanded.back().log_probs;
      for (TokenId v = 0; v < lp.size(); ++v)
        if (detail::emittable(v)) cands.push_back({live[h].out.log_prob + lp[v], h, v});
    }
    std::stable_sort(cands.begin(), cands.end(),
                     [](const Candidate& a, const Candidate& b) { return a.score > b.score; });
    if (cands.size() > k) cands.resize(k);
    std::vector<Hyp> next;
    for (const auto& c : cands) {
      const auto& st = expanded[c.hyp];
      DecodeOutput out = live[c.hyp].out;
      out.step_log_probs.push_back(st.log_probs[c.token]);
      out.log_prob = c.score;
      if (!st.attention.empty()) out.attention.push_back(st.attention);
      if (c.token == Vocabulary::kEnd) {
        finished.push_back(std::move(out));
        --k;
      } else {
        out.tokens.push_back(c.token);
        next.push_back({std::move(out), st.next, c.token});
      }
    }
    live = std::move(next);
  }
  for (auto& hyp : live) finished.push_back(std::move(hyp.out));
  auto score = [&](const DecodeOutput& o) {
    if (!opt.length_normalize || o.step_log_probs.empty()) return o.log_prob;
    return o.log_prob / static_cast<double>(o.step_log_probs.size());
  };
  std::stable_sort(finished.begin(), finished.end(),
                   [&](const DecodeOutput& a, const DecodeOutput& b) { return score(a) > score(b); });
  if (finished.size() > opt.beam_size) finished.resize(opt.beam_size);
  return finished;
}

}  // namespace capkit
