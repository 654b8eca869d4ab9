#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

namespace capkit {

using Words = std::vector<std::string>;

struct EvalItem {
  Words candidate;
  std::vector<Words> references;
};

using EvalSet = std::vector<EvalItem>;

struct MetricReport {
  std::array<double, 4> bleu{};
  double meteor = 0.0;
  double rouge_l = 0.0;
  double cider = 0.0;
};

namespace detail {

using NgramCounts = std::map<Words, int>;

inline NgramCounts ngrams(const Words& s, std::size_t n) {
  NgramCounts out;
  for (std::size_t i = 0; i + n <= s.size(); ++i) out[Words(s.begin() + i, s.begin() + i + n)]++;
  return out;
}

inline void check_eval_set(const EvalSet& set) {
  if (set.empty()) throw std::invalid_argument("empty evaluation set");
  for (const auto& item : set)
    if (item.references.empty()) throw std::invalid_argument("evaluation item has no references");
}

}  // namespace detail

/// Corpus BLEU-1..n_max, each x100.
inline std::vector<double> bleu(const EvalSet& set, std::size_t n_max = 4) {
  if (n_max < 1 || n_max > 4) throw std::invalid_argument("BLEU order must be in [1, 4]");
  detail::check_eval_set(set);
  std::vector<double> matched(n_max, 0.0), total(n_max, 0.0);
  double c = 0.0, r = 0.0;
  for (const auto& item : set) {
    c += static_cast<double>(item.candidate.size());
    std::size_t best = item.references.front().size();
    for (const auto& ref : item.references) {
      const auto d = [&](std::size_t len) {
        return len > item.candidate.size() ? len - item.candidate.size() : item.candidate.size() - len;
      };
      if (d(ref.size()) < d(best) || (d(ref.size()) == d(best) && ref.size() < best)) best = ref.size();
    }
    r += static_cast<double>(best);
    for (std::size_t n = 1; n <= n_max; ++n) {
      auto cand = detail::ngrams(item.candidate, n);
      detail::NgramCounts clip;
      for (const auto& ref : item.references)
        for (const auto& [g, k] : detail::ngrams(ref, n)) clip[g] = std::max(clip[g], k);
      for (const auto& [g, k] : cand) {
        total[n - 1] += k;
        auto it = clip.find(g);
        if (it != clip.end()) matched[n - 1] += std::min(k, it->second);
      }
    }
  }
  const double bp = (c > 0.0 && c < r) ? std::exp(1.0 - r / c) : 1.0;
  std::vector<double> out(n_max, 0.0);
  double log_sum = 0.0;
  bool zero = false;
  for (std::size_t n = 0; n < n_max; ++n) {
    if (matched[n] == 0.0) zero = true;
    if (!zero) log_sum += std::log(matched[n] / total[n]);
    out[n] = zero ? 0.0 : 100.0 * bp * std::exp(log_sum / static_cast<double>(n + 1));
  }
  return out;
}

inline std::size_t lcs_length(const Words& a, const Words& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

/// Mean over images of the best LCS F-measure (beta = 1.2), x100.
inline double rouge_l(const EvalSet& set, double beta = 1.2) {
  detail::check_eval_set(set);
  double total = 0.0;
  for (const auto& item : set) {
    double best = 0.0;
    for (const auto& ref : item.references) {
      const double lcs = static_cast<double>(lcs_length(item.candidate, ref));
      if (lcs == 0.0) continue;
      const double p = lcs / static_cast<double>(item.candidate.size());
      const double r = lcs / static_cast<double>(ref.size());
      best = std::max(best, (1.0 + beta * beta) * p * r / (r + beta * beta * p));
    }
    total += best;
  }
  return 100.0 * total / static_cast<double>(set.size());
}

/// TF-IDF cosine consensus over n = 1..4, x100.
inline double cider(const EvalSet& set) {
  detail::check_eval_set(set);
  const double m = static_cast<double>(set.size());
  double corpus = 0.0;
  std::array<std::map<Words, double>, 4> df;
  for (const auto& item : set)
    for (std::size_t n = 1; n <= 4; ++n) {
      std::set<Words> seen;
      for (const auto& ref : item.references)
        for (const auto& g : detail::ngrams(ref, n)) seen.insert(g.first);
      for (const auto& g : seen) df[n - 1][g] += 1.0;
    }
  auto vec = [&](const Words& s, std::size_t n) {
    std::map<Words, double> v;
    const auto counts = detail::ngrams(s, n);
    double len = 0.0;
    for (const auto& [g, k] : counts) len += k;
    for (const auto& [g, k] : counts) {
      auto it = df[n - 1].find(g);
      const double idf = it == df[n - 1].end() ? std::log(m) : std::log(m / it->second);
      v[g] = (k / len) * idf;
    }
    return v;
  };
  for (const auto& item : set) {
    double image = 0.0;
    for (std::size_t n = 1; n <= 4; ++n) {
      auto cand = vec(item.candidate, n);
      std::map<Words, double> mean;
      for (const auto& ref : item.references)
        for (const auto& [g, w] : vec(ref, n)) mean[g] += w / static_cast<double>(item.references.size());
      double dot = 0.0, nc = 0.0, nr = 0.0;
      for (const auto& [g, w] : cand) {
        nc += w * w;
        auto it = mean.find(g);
        if (it != mean.end()) dot += w * it->second;
      }
      for (const auto& [g, w] : mean) nr += w * w;
      if (nc > 0.0 && nr > 0.0) image += dot / (std::sqrt(nc) * std::sqrt(nr));
    }
    corpus += image / 4.0;
  }
  return 100.0 * corpus / m;
}

// ---------------------------------------------------------------------------
// Porter (1980) suffix stripper.

class PorterStemmer {
 public:
  static std::string stem(std::string word) {
    if (word.size() <= 2) return word;
    PorterStemmer s(std::move(word));
    s.step1ab();
    s.step1c();
    s.step2();
    s.step3();
    s.step4();
    s.step5();
    return s.b_.substr(0, static_cast<std::size_t>(s.k_ + 1));
  }

 private:
  explicit PorterStemmer(std::string w) : b_(std::move(w)), k_(static_cast<int>(b_.size()) - 1) {}

  bool cons(int i) const {
    switch (b_[static_cast<std::size_t>(i)]) {
      case 'a': case 'e': case 'i': case 'o': case 'u': return false;
      case 'y': return i == 0 ? true : !cons(i - 1);
      default: return true;
    }
  }

  // Number of VC sequences in b[0..j].
  int m() const {
    int n = 0, i = 0;
    while (true) {
      if (i > j_) return n;
      if (!cons(i)) break;
      ++i;
    }
    ++i;
    while (true) {
      while (true) {
        if (i > j_) return n;
        if (cons(i)) break;
        ++i;
      }
      ++i;
      ++n;
      while (true) {
        if (i > j_) return n;
        if (!cons(i)) break;
        ++i;
      }
      ++i;
    }
  }

  bool vowel_in_stem() const {
    for (int i = 0; i <= j_; ++i)
      if (!cons(i)) return true;
    return false;
  }

  bool double_c(int j) const {
    return j >= 1 && b_[static_cast<std::size_t>(j)] == b_[static_cast<std::size_t>(j - 1)] && cons(j);
  }

  bool cvc(int i) const {
    if (i < 2 || !cons(i) || cons(i - 1) || !cons(i - 2)) return false;
    const char ch = b_[static_cast<std::size_t>(i)];
    return ch != 'w' && ch != 'x' && ch != 'y';
  }

  bool ends(const std::string& s) {
    const int len = static_cast<int>(s.size());
    if (len > k_ + 1) return false;
    if (b_.compare(static_cast<std::size_t>(k_ - len + 1), s.size(), s) != 0) return false;
    j_ = k_ - len;
    return true;
  }

  void set_to(const std::string& s) {
    b_.replace(static_cast<std::size_t>(j_ + 1), static_cast<std::size_t>(k_ - j_), s);
    k_ = j_ + static_cast<int>(s.size());
  }

  void r(const std::string& s) {
    if (m() > 0) set_to(s);
  }

  char at(int i) const { return b_[static_cast<std::size_t>(i)]; }

  void step1ab() {
    if (at(k_) == 's') {
      if (ends("sses")) k_ -= 2;
      else if (ends("ies")) set_to("i");
      else if (at(k_ - 1) != 's') --k_;
    }
    if (ends("eed")) {
      if (m() > 0) --k_;
    } else if ((ends("ed") || ends("ing")) && vowel_in_stem()) {
      k_ = j_;
      if (ends("at")) set_to("ate");
      else if (ends("bl")) set_to("ble");
      else if (ends("iz")) set_to("ize");
      else if (double_c(k_)) {
        --k_;
        const char ch = at(k_);
        if (ch == 'l' || ch == 's' || ch == 'z') ++k_;
      } else {
        j_ = k_;
        if (m() == 1 && cvc(k_)) set_to("e");
      }
    }
  }

  void step1c() {
    if (ends("y") && vowel_in_stem()) b_[static_cast<std::size_t>(k_)] = 'i';
  }

  bool rule(std::initializer_list<std::pair<const char*, const char*>> rules) {
    for (const auto& [suffix, repl] : rules) {
      if (ends(suffix)) {
        r(repl);
        return true;
      }
    }
    return false;
  }

  void step2() {
    if (k_ < 1) return;
    switch (at(k_ - 1)) {
      case 'a': rule({{"ational", "ate"}, {"tional", "tion"}}); break;
      case 'c': rule({{"enci", "ence"}, {"anci", "ance"}}); break;
      case 'e': rule({{"izer", "ize"}}); break;
      case 'l': rule({{"bli", "ble"}, {"alli", "al"}, {"entli", "ent"}, {"eli", "e"}, {"ousli", "ous"}}); break;
      case 'o': rule({{"ization", "ize"}, {"ation", "ate"}, {"ator", "ate"}}); break;
      case 's': rule({{"alism", "al"}, {"iveness", "ive"}, {"fulness", "ful"}, {"ousness", "ous"}}); break;
      case 't': rule({{"aliti", "al"}, {"iviti", "ive"}, {"biliti", "ble"}}); break;
      case 'g': rule({{"logi", "log"}}); break;
      default: break;
    }
  }

  void step3() {
    switch (at(k_)) {
      case 'e': rule({{"icate", "ic"}, {"ative", ""}, {"alize", "al"}}); break;
      case 'i': rule({{"iciti", "ic"}}); break;
      case 'l': rule({{"ical", "ic"}, {"ful", ""}}); break;
      case 's': rule({{"ness", ""}}); break;
      default: break;
    }
  }

  void step4() {
    if (k_ < 1) return;
    auto any = [&](std::initializer_list<const char*> list) {
      for (const char* s : list)
        if (ends(s)) return true;
      return false;
    };
    bool hit = false;
    switch (at(k_ - 1)) {
      case 'a': hit = any({"al"}); break;
      case 'c': hit = any({"ance", "ence"}); break;
      case 'e': hit = any({"er"}); break;
      case 'i': hit = any({"ic"}); break;
      case 'l': hit = any({"able", "ible"}); break;
      case 'n': hit = any({"ant", "ement", "ment", "ent"}); break;
      case 'o':
        if (ends("ion") && j_ >= 0 && (at(j_) == 's' || at(j_) == 't')) hit = true;
        else hit = any({"ou"});
        break;
      case 's': hit = any({"ism"}); break;
      case 't': hit = any({"ate", "iti"}); break;
      case 'u': hit = any({"ous"}); break;
      case 'v': hit = any({"ive"}); break;
      case 'z': hit = any({"ize"}); break;
      default: break;
    }
    if (hit && m() > 1) k_ = j_;
  }

  void step5() {
    j_ = k_;
    if (at(k_) == 'e') {
      const int a = m();
      if (a > 1 || (a == 1 && !cvc(k_ - 1))) --k_;
    }
    if (at(k_) == 'l' && double_c(k_) && m() > 1) --k_;
  }

  std::string b_;
  int k_;
  int j_ = 0;
};

inline std::string porter_stem(const std::string& word) { return PorterStemmer::stem(word); }

struct MeteorParams {
  double alpha = 0.9;
  double beta = 3.0;
  double gamma = 0.5;
};

/// Greedy two-stage (exact, then stem) unigram alignment against one
/// reference; returns candidate index -> reference index or -1.
inline std::vector<int> meteor_align(const Words& cand, const Words& ref) {
  std::vector<int> align(cand.size(), -1);
  std::vector<bool> used(ref.size(), false);
  for (std::size_t i = 0; i < cand.size(); ++i)
    for (std::size_t j = 0; j < ref.size(); ++j)
      if (!used[j] && cand[i] == ref[j]) {
        align[i] = static_cast<int>(j);
        used[j] = true;
        break;
      }
  std::vector<std::string> ref_stems(ref.size());
  for (std::size_t j = 0; j < ref.size(); ++j) ref_stems[j] = porter_stem(ref[j]);
  for (std::size_t i = 0; i < cand.size(); ++i) {
    if (align[i] >= 0) continue;
    const auto s = porter_stem(cand[i]);
    for (std::size_t j = 0; j < ref.size(); ++j)
      if (!used[j] && s == ref_stems[j]) {
        align[i] = static_cast<int>(j);
        used[j] = true;
        break;
      }
  }
  return align;
}

inline double meteor_sentence(const Words& cand, const Words& ref, const MeteorParams& p = {}) {
  const auto align = meteor_align(cand, ref);
  double m = 0.0, chunks = 0.0;
  int prev = -2;
  bool in_chunk = false;
  for (int a : align) {
    if (a < 0) {
      in_chunk = false;
      continue;
    }
    m += 1.0;
    if (!in_chunk || a != prev + 1) chunks += 1.0;
    in_chunk = true;
    prev = a;
  }
  if (m == 0.0) return 0.0;
  const double precision = m / static_cast<double>(cand.size());
  const double recall = m / static_cast<double>(ref.size());
  const double f = precision * recall / (p.alpha * precision + (1.0 - p.alpha) * recall);
  const double penalty = p.gamma * std::pow(chunks / m, p.beta);
  return (1.0 - penalty) * f;
}

/// Exact + stem METEOR without the synonym stage, best over references, x100.
inline double meteor_lite(const EvalSet& set, const MeteorParams& p = {}) {
  detail::check_eval_set(set);
  double total = 0.0;
  for (const auto& item : set) {
    double best = 0.0;
    for (const auto& ref : item.references) best = std::max(best, meteor_sentence(item.candidate, ref, p));
    total += best;
  }
  return 100.0 * total / static_cast<double>(set.size());
}

inline MetricReport score_all(const EvalSet& set) {
  MetricReport r;
  const auto b = bleu(set, 4);
  std::copy(b.begin(), b.end(), r.bleu.begin());
  r.meteor = meteor_lite(set);
  r.rouge_l = rouge_l(set);
  r.cider = cider(set);
  return r;
}

}  // namespace capkit
