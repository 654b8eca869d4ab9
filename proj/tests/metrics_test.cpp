#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "capkit/data.hpp"
#include "capkit/metrics.hpp"
#include "capkit/rng.hpp"
#include "oracles.hpp"

namespace capkit {
namespace {

Words w(const std::string& s) { return tokenize(s); }

EvalSet one(const std::string& cand, std::vector<std::string> refs) {
  EvalItem item{w(cand), {}};
  for (const auto& r : refs) item.references.push_back(w(r));
  return {item};
}

std::vector<oracle::Image> to_oracle(const EvalSet& set) {
  std::vector<oracle::Image> out;
  for (const auto& i : set) out.push_back({i.candidate, i.references});
  return out;
}

EvalSet random_corpus(Rng& rng, std::size_t images, std::size_t vocab, std::size_t max_len) {
  EvalSet set;
  for (std::size_t i = 0; i < images; ++i) {
    auto sentence = [&] {
      Words s(1 + rng.below(max_len));
      for (auto& t : s) t = "w" + std::to_string(rng.below(vocab));
      return s;
    };
    EvalItem item{sentence(), {}};
    const std::size_t refs = 1 + rng.below(4);
    for (std::size_t r = 0; r < refs; ++r) item.references.push_back(sentence());
    set.push_back(std::move(item));
  }
  return set;
}

// ---------------------------------------------------------------------------
// BLEU

TEST(Bleu, PerfectMatchIsHundred) {
  auto set = one("a red circle on the left", {"something else entirely", "a red circle on the left"});
  for (double b : bleu(set)) EXPECT_NEAR(b, 100.0, 1e-9);
}

TEST(Bleu, ClippedUnigrams) {
  EXPECT_NEAR(bleu(one("the the the the", {"the cat sat"}), 1)[0], 25.0, 1e-9);
}

TEST(Bleu, BigramHandCount) {
  EXPECT_NEAR(bleu(one("the cat sat on", {"the cat sat down"}), 2)[1], 100.0 * std::sqrt(0.5), 1e-9);
  EXPECT_NEAR(bleu(one("the cat sat on", {"the cat sat down"}), 2)[1], 70.71, 5e-3);
}

TEST(Bleu, BrevityPenalty) {
  EXPECT_NEAR(bleu(one("the cat", {"the cat sat on mats"}), 1)[0], 100.0 * std::exp(1.0 - 5.0 / 2.0), 1e-9);
}

TEST(Bleu, ClosestLengthTieGoesToShorterReference) {
  // c = 4; references of length 3 and 5 are equally close. Choosing 3 gives BP = 1.
  auto set = one("a b c d", {"a b c", "a b c d e"});
  EXPECT_NEAR(bleu(set, 1)[0], 100.0, 1e-9);
  auto shorter = one("a b c d", {"a b c d e", "a b c"});
  EXPECT_NEAR(bleu(shorter, 1)[0], 100.0, 1e-9);
}

TEST(Bleu, MissingHigherOrderMatchZeroesThatOrder) {
  auto b = bleu(one("cat the", {"the cat"}));
  EXPECT_NEAR(b[0], 100.0, 1e-9);
  EXPECT_EQ(b[1], 0.0);
  EXPECT_EQ(b[3], 0.0);
}

TEST(Bleu, MatchesBruteForceOracle) {
  Rng rng(100);
  for (int trial = 0; trial < 20; ++trial) {
    auto set = random_corpus(rng, 1 + rng.below(5), 2 + rng.below(7), 6);
    auto got = bleu(set, 4);
    for (std::size_t n = 1; n <= 4; ++n) EXPECT_NEAR(got[n - 1], oracle::bleu(to_oracle(set), n), 1e-9) << trial;
  }
}

TEST(Bleu, Errors) {
  EXPECT_THROW(bleu({}), std::invalid_argument);
  EXPECT_THROW(bleu(one("a", {"a"}), 5), std::invalid_argument);
  EXPECT_THROW(bleu({EvalItem{w("a"), {}}}), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// ROUGE-L

TEST(RougeL, IdenticalIsHundred) { EXPECT_NEAR(rouge_l(one("a b c", {"x y", "a b c"})), 100.0, 1e-9); }

TEST(RougeL, HandLcsCase) {
  const double p = 2.0 / 3.0, r = 2.0 / 5.0;
  const double f = (1 + 1.44) * p * r / (r + 1.44 * p);
  EXPECT_NEAR(rouge_l(one("the cat sat", {"the cat on the mat"})), 100.0 * f, 1e-9);
  EXPECT_NEAR(rouge_l(one("the cat sat", {"the cat on the mat"})), 47.85, 1e-2);
}

TEST(RougeL, DisjointAndEmptyScoreZero) {
  EXPECT_EQ(rouge_l(one("a b", {"c d"})), 0.0);
  EXPECT_EQ(rouge_l({EvalItem{{}, {w("c d")}}}), 0.0);
}

TEST(RougeL, LcsLength) {
  EXPECT_EQ(lcs_length(w("a b c b d a b"), w("b d c a b a")), 4u);
  EXPECT_EQ(lcs_length({}, w("a")), 0u);
}

// ---------------------------------------------------------------------------
// CIDEr

TEST(Cider, OrdersWithoutNgramsContributeZero) {
  // Three tokens have no 4-gram, so one of the four orders scores 0.
  EvalSet set{{w("a red circle"), {w("a red circle")}}, {w("one blue square"), {w("one blue square")}}};
  EXPECT_NEAR(cider(set), 75.0, 1e-9);
}

TEST(Cider, IdenticalWithDisjointCorpusIsHundred) {
  EvalSet set{{w("a red circle here"), {w("a red circle here")}},
              {w("one blue square there"), {w("one blue square there")}}};
  EXPECT_NEAR(cider(set), 100.0, 1e-9);
}

TEST(Cider, NoSharedNgramIsZero) {
  EvalSet set{{w("x y z"), {w("a red circle here")}},
              {w("one blue square there"), {w("one blue square there")}}};
  EXPECT_NEAR(cider(set), 50.0, 1e-9);
}

TEST(Cider, MatchesBruteForceOracle) {
  EvalSet hand{{w("a red circle on the left"), {w("a red circle"), w("the circle is red")}},
               {w("a blue square"), {w("a blue square on the right"), w("blue square")}}};
  EXPECT_NEAR(cider(hand), oracle::cider(to_oracle(hand)), 1e-9);
  Rng rng(101);
  for (int trial = 0; trial < 20; ++trial) {
    auto set = random_corpus(rng, 2 + rng.below(4), 3 + rng.below(6), 6);
    EXPECT_NEAR(cider(set), oracle::cider(to_oracle(set)), 1e-9) << trial;
  }
}

TEST(Cider, EmptySetRejected) { EXPECT_THROW(cider({}), std::invalid_argument); }

// ---------------------------------------------------------------------------
// METEOR-lite

TEST(Porter, ReferenceVocabulary) {
  const std::vector<std::pair<std::string, std::string>> cases{
      {"caresses", "caress"}, {"ponies", "poni"},       {"ties", "ti"},
      {"caress", "caress"},   {"cats", "cat"},           {"feed", "feed"},
      {"agreed", "agre"},     {"plastered", "plaster"},  {"bled", "bled"},
      {"motoring", "motor"},  {"sing", "sing"},          {"conflated", "conflat"},
      {"troubled", "troubl"}, {"sized", "size"},         {"hopping", "hop"},
      {"tanned", "tan"},      {"falling", "fall"},       {"hissing", "hiss"},
      {"fizzed", "fizz"},     {"failing", "fail"},       {"filing", "file"},
      {"happy", "happi"},     {"sky", "sky"},            {"relational", "relat"},
      {"conditional", "condit"}, {"rational", "ration"}, {"digitizer", "digit"},
      {"generalizations", "gener"}, {"oscillators", "oscil"}, {"triplicate", "triplic"},
      {"hopefulness", "hope"}, {"electrical", "electr"}, {"adjustable", "adjust"},
      {"effective", "effect"}, {"communism", "commun"},  {"goodness", "good"},
      {"controll", "control"}, {"roll", "roll"},         {"cease", "ceas"},
      {"running", "run"},     {"runs", "run"},           {"ies", "i"},
      {"is", "is"},           {"a", "a"}};
  for (const auto& [word, stem] : cases) EXPECT_EQ(porter_stem(word), stem) << word;
}

TEST(Meteor, IdenticalFiveTokens) {
  EXPECT_NEAR(meteor_lite(one("a b c d e", {"a b c d e"})), 100.0 * (1.0 - 0.5 / 125.0), 1e-9);
  EXPECT_NEAR(meteor_lite(one("a b c d e", {"a b c d e"})), 99.6, 1e-9);
}

TEST(Meteor, NoOverlapIsZero) { EXPECT_EQ(meteor_lite(one("a b", {"c d"})), 0.0); }

TEST(Meteor, StemStageMatchesInflections) {
  auto align = meteor_align(w("a dog runs"), w("a dog running"));
  EXPECT_EQ(align, (std::vector<int>{0, 1, 2}));
  EXPECT_NEAR(meteor_lite(one("a dog runs", {"a dog running"})), 100.0 * (1.0 - 0.5 / 27.0), 1e-9);
}

TEST(Meteor, ChunkPenaltyForScrambledOrder) {
  // Three aligned words in three chunks: penalty 0.5, F = 1.
  EXPECT_NEAR(meteor_lite(one("c b a", {"a b c"})), 50.0, 1e-9);
}

TEST(Meteor, FragmentationAndRecallWeighting) {
  // m = 2 of cand 2 / ref 4: P = 1, R = 0.5, one chunk.
  const double f = 0.5 / (0.9 + 0.1 * 0.5);
  EXPECT_NEAR(meteor_lite(one("a b", {"a b c d"})), 100.0 * f * (1.0 - 0.5 / 8.0), 1e-9);
}

// ---------------------------------------------------------------------------
// Properties shared by every metric

TEST(AllMetrics, PermutationInvariant) {
  Rng rng(102);
  for (int trial = 0; trial < 10; ++trial) {
    auto set = random_corpus(rng, 5, 6, 6);
    auto base = score_all(set);
    auto shuffled = set;
    rng.shuffle(shuffled);
    for (auto& item : shuffled) rng.shuffle(item.references);
    auto other = score_all(shuffled);
    for (std::size_t n = 0; n < 4; ++n) EXPECT_NEAR(base.bleu[n], other.bleu[n], 1e-9);
    EXPECT_NEAR(base.meteor, other.meteor, 1e-9);
    EXPECT_NEAR(base.rouge_l, other.rouge_l, 1e-9);
    EXPECT_NEAR(base.cider, other.cider, 1e-9);
  }
}

TEST(AllMetrics, RangeAndFinite) {
  Rng rng(103);
  for (int trial = 0; trial < 20; ++trial) {
    auto r = score_all(random_corpus(rng, 1 + rng.below(6), 4, 6));
    for (double v : {r.bleu[0], r.bleu[1], r.bleu[2], r.bleu[3], r.meteor, r.rouge_l, r.cider}) {
      EXPECT_TRUE(std::isfinite(v));
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 100.0 + 1e-9);
    }
  }
}

TEST(AllMetrics, CandidateEqualsReference) {
  EvalSet set{{w("a red circle is shown"), {w("a red circle is shown")}},
              {w("the blue square sits left"), {w("the blue square sits left"), w("blue square")}}};
  auto r = score_all(set);
  for (double b : r.bleu) EXPECT_NEAR(b, 100.0, 1e-9);
  EXPECT_NEAR(r.rouge_l, 100.0, 1e-9);
  EXPECT_NEAR(r.meteor, 100.0 * (1.0 - 0.5 / 125.0), 1e-9);
}

}  // namespace
}  // namespace capkit
