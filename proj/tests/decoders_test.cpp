#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <map>

#include "capkit/decoders.hpp"
#include "capkit/gradcheck.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

namespace capkit {
namespace {

using testing::Mat;
using testing::to_mat;

void randomize(ParameterStore& store, Rng& rng, double scale = 0.5) {
  for (auto& p : store.items())
    for (auto& v : p.tensor.mutable_data()) v = rng.uniform(-scale, scale);
}

std::vector<Tensor> all_params(ParameterStore& store) {
  std::vector<Tensor> out;
  for (auto& p : store.items()) out.push_back(p.tensor);
  return out;
}

Tensor logits3(std::size_t b, std::size_t t, std::size_t v, std::vector<double> values) {
  return Tensor({b, t, v}, std::move(values));
}

// ---------------------------------------------------------------------------
// label_smoothed_loss

TEST(LabelSmoothing, OneHotPredictionWithoutSmoothingIsZero) {
  auto l = label_smoothed_loss(logits3(1, 1, 2, {1000.0, 0.0}), {0}, {1}, 0.0);
  EXPECT_EQ(l.item(), 0.0);
}

TEST(LabelSmoothing, UniformTwoWayIsLn2ForAnyEpsilon) {
  for (double eps : {0.0, 0.1, 0.5, 0.9}) {
    auto l = label_smoothed_loss(logits3(1, 1, 2, {0.3, 0.3}), {1}, {1}, eps);
    EXPECT_NEAR(l.item(), std::log(2.0), 1e-12) << eps;
  }
}

TEST(LabelSmoothing, ConfidentTwoWayCase) {
  // p = [0.99, 0.01] via logits [ln 0.99, ln 0.01]
  auto l = label_smoothed_loss(logits3(1, 1, 2, {std::log(0.99), std::log(0.01)}), {0}, {1}, 0.1);
  const double expected = -(0.95 * std::log(0.99) + 0.05 * std::log(0.01));
  EXPECT_NEAR(l.item(), expected, 1e-12);
  EXPECT_NEAR(l.item(), 0.2398, 1e-4);
}

TEST(LabelSmoothing, SimplexGridMinimizerIsSmoothedTarget) {
  const double eps = 0.1;
  const int steps = 30;
  auto loss_at = [&](double a, double b, double c) {
    return label_smoothed_loss(logits3(1, 1, 3, {std::log(a), std::log(b), std::log(c)}), {0}, {1}, eps).item();
  };
  const double qa = 1.0 - eps + eps / 3.0, qb = eps / 3.0;
  const double at_q = loss_at(qa, qb, qb);
  double best = INFINITY;
  int bi = -1, bj = -1;
  for (int i = 1; i < steps; ++i)
    for (int j = 1; i + j < steps; ++j) {
      const double l = loss_at(i / double(steps), j / double(steps), (steps - i - j) / double(steps));
      EXPECT_GE(l, at_q - 1e-12);
      if (l < best) best = l, bi = i, bj = j;
    }
  EXPECT_EQ(bi, 28);
  EXPECT_EQ(bj, 1);
}

TEST(LabelSmoothing, AveragesOverNonPadPositionsOnly) {
  // Row 0 has two live positions, row 1 one; the padded slot carries junk.
  auto logits = logits3(2, 2, 2, {0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 50.0, -50.0});
  auto l = label_smoothed_loss(logits, {0, 1, 1, 0}, {2, 1}, 0.0);
  EXPECT_NEAR(l.item(), std::log(2.0), 1e-12);
}

TEST(LabelSmoothing, PadPositionsGetExactlyZeroGradient) {
  Rng rng(11);
  auto logits = testing::random_tensor({2, 3, 4}, rng, -3.0, 3.0).set_requires_grad(true);
  label_smoothed_loss(logits, {1, 2, 3, 0, 3, 1}, {3, 1}, 0.1).backward();
  const auto g = logits.grad();
  for (std::size_t t = 1; t < 3; ++t)
    for (std::size_t v = 0; v < 4; ++v) EXPECT_EQ(g[(1 * 3 + t) * 4 + v], 0.0);
  double live = 0.0;
  for (std::size_t v = 0; v < 4; ++v) live += std::abs(g[v]);
  EXPECT_GT(live, 0.0);
}

TEST(LabelSmoothing, Errors) {
  auto l = logits3(1, 2, 3, std::vector<double>(6, 0.0));
  EXPECT_THROW(label_smoothed_loss(l, {1, 1}, {3}, 0.1), std::invalid_argument);
  EXPECT_THROW(label_smoothed_loss(l, {1, 1}, {2}, 1.0), std::invalid_argument);
  EXPECT_THROW(label_smoothed_loss(l, {1, 1}, {0}, 0.1), std::invalid_argument);
}

TEST(LabelSmoothing, GradientCheck) {
  Rng rng(12);
  auto logits = testing::random_tensor({2, 3, 5}, rng, -2.0, 2.0);
  auto f = [](const Tensor& x) { return label_smoothed_loss(x, {1, 2, 4, 3, 0, 0}, {3, 1}, 0.1); };
  EXPECT_LT(gradient_check(f, logits), 1e-6);
}

TEST(TeacherForcing, ShiftsInputsAndTargets) {
  std::vector<CaptionPair> pairs{{0, {1, 7, 8, 2}}, {1, {1, 9, 2}}};
  auto tf = teacher_forcing(make_batch(pairs));
  EXPECT_EQ(tf.steps, 3u);
  EXPECT_EQ(tf.inputs, (std::vector<TokenId>{1, 7, 8, 1, 9, 2}));
  EXPECT_EQ(tf.targets, (std::vector<TokenId>{7, 8, 2, 9, 2, 0}));
  EXPECT_EQ(tf.lengths, (std::vector<std::size_t>{3, 2}));
}

// ---------------------------------------------------------------------------
// Positional encoding

TEST(PositionalEncoding, FirstRowAlternatesZeroOne) {
  auto pe = positional_encoding(4, 6);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(pe.at(0, i), i % 2 == 0 ? 0.0 : 1.0);
}

TEST(PositionalEncoding, ClosedFormAndRange) {
  auto pe = positional_encoding(30, 8);
  EXPECT_NEAR(pe.at(1, 0), 0.8414709848078965, 1e-15);
  EXPECT_NEAR(pe.at(3, 3), std::cos(3.0 / std::pow(10000.0, 2.0 / 8.0)), 1e-15);
  for (double v : pe.data()) {
    EXPECT_GE(v, -1.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(PositionalEncoding, OddWidthRejected) { EXPECT_THROW(positional_encoding(4, 5), std::invalid_argument); }

// ---------------------------------------------------------------------------
// LSTM

LstmConfig tiny_lstm(std::size_t v = 5) {
  LstmConfig c;
  c.vocab = v;
  c.embed = 2;
  c.channels = 2;
  c.hidden = 2;
  c.attention = 3;
  c.dropout = 0.0;
  return c;
}

TEST(LstmInit, IdenticalAnnotationsMeanIsThatRow) {
  Rng rng(20);
  ParameterStore store;
  LstmDecoder dec(tiny_lstm(), store, rng);
  auto ann = dec.prepare(Tensor({3, 2}, {0.4, -0.2, 0.4, -0.2, 0.4, -0.2}), 1, 3);
  EXPECT_EQ(ann.mean().values(), (std::vector<double>{0.4, -0.2}));
}

TEST(LstmInit, ZeroMapsGiveZeroState) {
  Rng rng(21);
  ParameterStore store;
  LstmDecoder dec(tiny_lstm(), store, rng);
  for (auto* g : {&dec.init_h(), &dec.init_c()}) {
    auto w = g->w;
    for (auto& v : w.mutable_data()) v = 0.0;
  }
  auto s = dec.init_state(dec.prepare(testing::random_tensor({4, 2}, rng), 1, 4));
  for (double v : s.h.data()) EXPECT_EQ(v, 0.0);
  for (double v : s.c.data()) EXPECT_EQ(v, 0.0);
}

TEST(LstmInit, HandCaseOneByOneMaps) {
  Rng rng(22);
  ParameterStore store;
  auto cfg = tiny_lstm();
  cfg.channels = 1;
  cfg.hidden = 1;
  LstmDecoder dec(cfg, store, rng);
  auto set = [](const Tensor& t, double v) {
    auto x = t;
    x.mutable_data()[0] = v;
  };
  set(dec.init_h().w, 0.5);
  set(dec.init_h().b, 0.1);
  set(dec.init_c().w, -0.25);
  set(dec.init_c().b, 0.0);
  // P = 2 with annotations 1 and 3: mean 2.
  auto s = dec.init_state(dec.prepare(Tensor({2, 1}, {1.0, 3.0}), 1, 2));
  EXPECT_NEAR(s.h.item(), std::tanh(1.1), 1e-15);
  EXPECT_NEAR(s.c.item(), std::tanh(-0.5), 1e-15);
}

TEST(LstmStep, LogitsCoverVocabulary) {
  Rng rng(23);
  ParameterStore store;
  LstmDecoder dec(tiny_lstm(7), store, rng);
  auto ann = dec.prepare(testing::random_tensor({6, 2}, rng), 2, 3);
  auto r = dec.step({1, 4}, dec.init_state(ann), ann);
  EXPECT_EQ(r.logits.shape(), (Shape{2, 7}));
  EXPECT_EQ(r.alpha.shape(), (Shape{2, 3}));
  EXPECT_THROW(dec.step({1, 7}, dec.init_state(ann), ann), std::out_of_range);
}

TEST(LstmStep, ZeroCellWeightsFromZeroCellStayZero) {
  Rng rng(24);
  ParameterStore store;
  LstmDecoder dec(tiny_lstm(), store, rng);
  for (const auto& g : dec.gates()) {
    auto w = g.w, b = g.b;
    for (auto& v : w.mutable_data()) v = 0.0;
    for (auto& v : b.mutable_data()) v = 0.0;
  }
  auto ann = dec.prepare(testing::random_tensor({3, 2}, rng), 1, 3);
  LstmState s{testing::random_tensor({1, 2}, rng), Tensor({1, 2}, 0.0)};
  auto r = dec.step({3}, s, ann);
  for (double v : r.state.c.data()) EXPECT_EQ(v, 0.0);
  for (double v : r.state.h.data()) EXPECT_EQ(v, 0.0);
}

oracle::LstmWeights lstm_weights(const LstmDecoder& dec) {
  oracle::LstmWeights w;
  const auto& a = dec.attention_params();
  w.embed = to_mat(dec.embedding_table());
  w.w_a = to_mat(a.w_a);
  w.w_h = to_mat(a.w_h);
  w.score = to_mat(a.score);
  w.att_b = a.bias.values();
  if (a.gated()) {
    w.gate_w = to_mat(a.gate_w);
    w.gate_b = a.gate_b.item();
  }
  const auto& g = dec.gates();
  w.wi = to_mat(g[0].w), w.bi = g[0].b.values();
  w.wf = to_mat(g[1].w), w.bf = g[1].b.values();
  w.wo = to_mat(g[2].w), w.bo = g[2].b.values();
  w.wg = to_mat(g[3].w), w.bg = g[3].b.values();
  w.out_w = to_mat(dec.output().w);
  w.out_b = dec.output().b.values();
  return w;
}

void expect_close(const std::vector<double>& a, std::span<const double> b, double tol) {
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], tol) << i;
}

TEST(LstmStep, MatchesScalarOracleOverSeveralSteps) {
  for (bool gate : {false, true}) {
    Rng rng(25);
    ParameterStore store;
    auto cfg = tiny_lstm();
    cfg.gate = gate;
    LstmDecoder dec(cfg, store, rng);
    randomize(store, rng);
    auto ann_t = testing::random_tensor({4, 2}, rng);
    auto ann = dec.prepare(ann_t, 1, 4);
    auto w = lstm_weights(dec);
    auto state = dec.init_state(ann);
    std::vector<double> h = state.h.values(), c = state.c.values();
    for (TokenId tok : {1, 4, 3}) {
      auto got = dec.step({tok}, state, ann);
      auto want = oracle::lstm_step(w, to_mat(ann_t), tok, h, c);
      expect_close(want.logits, got.logits.data(), 1e-12);
      expect_close(want.h, got.state.h.data(), 1e-12);
      expect_close(want.c, got.state.c.data(), 1e-12);
      expect_close(want.alpha, got.alpha.data(), 1e-12);
      state = got.state;
      h = want.h;
      c = want.c;
    }
  }
}

TEST(LstmStep, BatchedRowsMatchSingleImageRuns) {
  Rng rng(26);
  ParameterStore store;
  LstmDecoder dec(tiny_lstm(), store, rng);
  randomize(store, rng);
  auto ann_t = testing::random_tensor({6, 2}, rng);
  auto both = dec.step({1, 3}, dec.init_state(dec.prepare(ann_t, 2, 3)), dec.prepare(ann_t, 2, 3));
  for (std::size_t b = 0; b < 2; ++b) {
    auto one_ann = dec.prepare(rows(ann_t, 3 * b, 3), 1, 3);
    auto one = dec.step({b == 0 ? TokenId{1} : TokenId{3}}, dec.init_state(one_ann), one_ann);
    for (std::size_t v = 0; v < 5; ++v) EXPECT_NEAR(one.logits.at(0, v), both.logits.at(b, v), 1e-14);
  }
}

Batch tiny_batch() {
  std::vector<CaptionPair> pairs{{0, {1, 4, 3, 2}}, {1, {1, 3, 2}}};
  return make_batch(pairs);
}

TEST(LstmLoss, GradientCheckFullModel) {
  Rng rng(27);
  ParameterStore store;
  LstmDecoder dec(tiny_lstm(), store, rng);
  randomize(store, rng);
  auto ann_t = testing::random_tensor({6, 2}, rng);
  auto tf = teacher_forcing(tiny_batch());
  auto loss = [&] { return dec.loss(tf, dec.prepare(ann_t, 2, 3), 0.1, 1.0); };
  Rng pick(28);
  EXPECT_LT(gradient_check_sampled(loss, all_params(store), 80, pick), 1e-3);
}

TEST(LstmLoss, PadInputsDoNotAffectLoss) {
  Rng rng(29);
  ParameterStore store;
  LstmDecoder dec(tiny_lstm(), store, rng);
  auto ann_t = testing::random_tensor({6, 2}, rng);
  auto tf = teacher_forcing(tiny_batch());
  const double base = dec.loss(tf, dec.prepare(ann_t, 2, 3), 0.1, 0.0).item();
  tf.inputs[1 * tf.steps + 2] = 4;  // slot past row 1's length
  EXPECT_EQ(dec.loss(tf, dec.prepare(ann_t, 2, 3), 0.1, 0.0).item(), base);
}

// ---------------------------------------------------------------------------
// Transformer

TransformerConfig tiny_tf(std::size_t layers = 1, std::size_t heads = 1, std::size_t d = 4) {
  TransformerConfig c;
  c.vocab = 6;
  c.channels = 3;
  c.d_model = d;
  c.heads = heads;
  c.layers = layers;
  c.d_ff = 5;
  c.max_len = 6;
  c.dropout = 0.1;
  return c;
}

oracle::TransformerWeights tf_weights(ParameterStore& s, const TransformerConfig& c) {
  auto m = [&](const std::string& n) { return to_mat(s.get(n)); };
  auto v = [&](const std::string& n) { return s.get(n).values(); };
  oracle::TransformerWeights w;
  w.embed = m("tf.embed");
  w.mem_w = m("tf.mem.w");
  w.mem_b = v("tf.mem.b");
  w.out_w = m("tf.out.w");
  w.out_b = v("tf.out.b");
  for (std::size_t l = 0; l < c.layers; ++l) {
    const std::string p = "tf.block" + std::to_string(l);
    oracle::BlockWeights b;
    for (std::size_t h = 0; h < c.heads; ++h) {
      const auto i = std::to_string(h);
      b.sq.push_back(m(p + ".self.q" + i));
      b.sk.push_back(m(p + ".self.k" + i));
      b.sv.push_back(m(p + ".self.v" + i));
      b.cq.push_back(m(p + ".cross.q" + i));
      b.ck.push_back(m(p + ".cross.k" + i));
      b.cv.push_back(m(p + ".cross.v" + i));
    }
    b.so = m(p + ".self.o");
    b.co = m(p + ".cross.o");
    b.ff1 = m(p + ".ff1.w");
    b.ff1_b = v(p + ".ff1.b");
    b.ff2 = m(p + ".ff2.w");
    b.ff2_b = v(p + ".ff2.b");
    for (int k = 0; k < 3; ++k) {
      b.ln_g[k] = v(p + ".ln" + std::to_string(k) + ".g");
      b.ln_b[k] = v(p + ".ln" + std::to_string(k) + ".b");
    }
    w.blocks.push_back(std::move(b));
  }
  return w;
}

TEST(Transformer, OutputShapeAndMaxLen) {
  Rng rng(30);
  ParameterStore store;
  TransformerDecoder dec(tiny_tf(2, 2), store, rng);
  auto ann = testing::random_tensor({2 * 4, 3}, rng);
  auto y = dec.decode_train({1, 3, 4, 1, 5, 2}, 2, 3, ann, 4);
  EXPECT_EQ(y.shape(), (Shape{2, 3, 6}));
  EXPECT_THROW(dec.decode_train(std::vector<TokenId>(7, 1), 1, 7, rows(ann, 0, 4), 4), std::invalid_argument);
}

TEST(Transformer, RejectsHeadsThatDoNotDivide) {
  Rng rng(31);
  ParameterStore store;
  EXPECT_THROW(TransformerDecoder(tiny_tf(1, 3), store, rng), std::invalid_argument);
}

TEST(Transformer, EvaluationModeIsDeterministic) {
  Rng rng(32);
  ParameterStore store;
  TransformerDecoder dec(tiny_tf(2, 2), store, rng);
  auto ann = testing::random_tensor({4, 3}, rng);
  auto a = dec.decode_train({1, 3, 4}, 1, 3, ann, 4);
  auto b = dec.decode_train({1, 3, 4}, 1, 3, ann, 4);
  EXPECT_EQ(a.values(), b.values());
}

TEST(Transformer, SingleBlockMatchesOracle) {
  Rng rng(33);
  ParameterStore store;
  auto cfg = tiny_tf(1, 1, 4);
  TransformerDecoder dec(cfg, store, rng);
  randomize(store, rng);
  auto ann = testing::random_tensor({3, 3}, rng);
  auto got = dec.decode_train({1, 4}, 1, 2, ann, 3);
  auto want = oracle::transformer_forward(tf_weights(store, cfg), {1, 4}, to_mat(ann));
  expect_close(want.v, got.data(), 1e-12);
}

TEST(Transformer, StackedMultiHeadMatchesOracle) {
  Rng rng(34);
  ParameterStore store;
  auto cfg = tiny_tf(2, 2, 4);
  TransformerDecoder dec(cfg, store, rng);
  randomize(store, rng);
  auto ann = testing::random_tensor({5, 3}, rng);
  auto got = dec.decode_train({1, 4, 3, 5}, 1, 4, ann, 5);
  auto want = oracle::transformer_forward(tf_weights(store, cfg), {1, 4, 3, 5}, to_mat(ann));
  expect_close(want.v, got.data(), 1e-12);
}

TEST(Transformer, BatchRowsAreIndependent) {
  Rng rng(35);
  ParameterStore store;
  TransformerDecoder dec(tiny_tf(2, 2), store, rng);
  auto ann = testing::random_tensor({2 * 3, 3}, rng);
  auto both = dec.decode_train({1, 3, 4, 1, 5, 2}, 2, 3, ann, 3);
  auto first = dec.decode_train({1, 3, 4}, 1, 3, rows(ann, 0, 3), 3);
  auto second = dec.decode_train({1, 5, 2}, 1, 3, rows(ann, 3, 3), 3);
  for (std::size_t i = 0; i < 18; ++i) {
    EXPECT_NEAR(both.data()[i], first.data()[i], 1e-12);
    EXPECT_NEAR(both.data()[18 + i], second.data()[i], 1e-12);
  }
}

TEST(Transformer, CausalityProbe) {
  Rng rng(36);
  ParameterStore store;
  TransformerDecoder dec(tiny_tf(2, 2), store, rng);
  randomize(store, rng);
  auto ann = testing::random_tensor({3, 3}, rng);
  const std::vector<TokenId> base{1, 3, 4, 5, 2};
  auto ref = dec.decode_train(base, 1, 5, ann, 3);
  for (std::size_t p = 1; p < base.size(); ++p) {
    auto probe = base;
    probe[p] = probe[p] == 3 ? 4 : 3;
    auto y = dec.decode_train(probe, 1, 5, ann, 3);
    for (std::size_t t = 0; t < p; ++t)
      for (std::size_t v = 0; v < 6; ++v) EXPECT_EQ(y.data()[t * 6 + v], ref.data()[t * 6 + v]);
    double diff = 0.0;
    for (std::size_t v = 0; v < 6; ++v) diff += std::abs(y.data()[p * 6 + v] - ref.data()[p * 6 + v]);
    EXPECT_GT(diff, 0.0);
  }
}

TEST(TransformerLoss, GradientCheckFullModel) {
  Rng rng(37);
  ParameterStore store;
  TransformerDecoder dec(tiny_tf(1, 2), store, rng);
  randomize(store, rng);
  auto ann = testing::random_tensor({6, 3}, rng);
  auto tf = teacher_forcing(tiny_batch());
  auto loss = [&] { return dec.loss(tf, ann, 3, 0.1); };
  Rng pick(38);
  EXPECT_LT(gradient_check_sampled(loss, all_params(store), 80, pick), 1e-3);
}

TEST(TransformerLoss, DropoutOnlyInTraining) {
  Rng rng(39);
  ParameterStore store;
  auto cfg = tiny_tf(1, 1);
  cfg.dropout = 0.5;
  TransformerDecoder dec(cfg, store, rng);
  auto ann = testing::random_tensor({6, 3}, rng);
  auto tf = teacher_forcing(tiny_batch());
  Rng d1(1), d2(2);
  const double eval = dec.loss(tf, ann, 3, 0.1).item();
  EXPECT_EQ(dec.loss(tf, ann, 3, 0.1).item(), eval);
  EXPECT_NE(dec.loss(tf, ann, 3, 0.1, &d1).item(), dec.loss(tf, ann, 3, 0.1, &d2).item());
}

// ---------------------------------------------------------------------------
// Search

/// Next-token log-probs as a function of the consumed prefix.
class RiggedModel final : public StepModel {
 public:
  using Table = std::function<std::vector<double>(const std::vector<TokenId>&)>;
  RiggedModel(std::size_t vocab, Table table) : vocab_(vocab), table_(std::move(table)) {}

  std::size_t vocab_size() const override { return vocab_; }
  std::shared_ptr<const DecodeState> start() const override { return std::make_shared<Prefix>(); }
  Step step(const DecodeState& s, TokenId token) const override {
    auto next = std::make_shared<Prefix>(static_cast<const Prefix&>(s));
    next->ids.push_back(token);
    ++calls;
    return {table_(next->ids), next, {}};
  }

  mutable std::size_t calls = 0;

 private:
  struct Prefix : DecodeState {
    std::vector<TokenId> ids;
  };
  std::size_t vocab_;
  Table table_;
};

std::vector<double> probs(std::vector<double> p) {
  for (auto& v : p) v = std::log(v);
  return p;
}

/// Random distribution per prefix, memoised so the model is a fixed function.
RiggedModel random_model(std::size_t vocab, std::uint64_t seed) {
  auto memo = std::make_shared<std::map<std::vector<TokenId>, std::vector<double>>>();
  return RiggedModel(vocab, [=](const std::vector<TokenId>& prefix) {
    auto it = memo->find(prefix);
    if (it != memo->end()) return it->second;
    Rng r(seed);
    for (TokenId t : prefix) r = Rng(r.next_u64() ^ (t + 1) * 0x9E3779B97F4A7C15ULL);
    std::vector<double> logits(vocab);
    for (auto& v : logits) v = r.uniform(-3.0, 3.0);
    auto lp = log_softmax(logits);
    memo->emplace(prefix, lp);
    return lp;
  });
}

struct Best {
  double score = -INFINITY;
  std::vector<TokenId> tokens;
  std::size_t complete = 0;
};

/// Every sequence that ends in <end> within max_len decisions, or runs to
/// max_len tokens without it.
void enumerate(const RiggedModel& m, std::size_t max_len, std::vector<TokenId> prefix, double score, Best& best) {
  std::vector<TokenId> consumed{Vocabulary::kStart};
  consumed.insert(consumed.end(), prefix.begin(), prefix.end());
  if (prefix.size() == max_len) {
    ++best.complete;
    if (score > best.score) best = {score, prefix, best.complete};
    return;
  }
  auto state = m.start();
  StepModel::Step r;
  for (TokenId t : consumed) {
    r = m.step(*state, t);
    state = r.next;
  }
  for (TokenId v = Vocabulary::kEnd; v < m.vocab_size(); ++v) {
    if (v == Vocabulary::kEnd) {
      ++best.complete;
      if (score + r.log_probs[v] > best.score) best = {score + r.log_probs[v], prefix, best.complete};
    } else {
      auto next = prefix;
      next.push_back(v);
      enumerate(m, max_len, next, score + r.log_probs[v], best);
    }
  }
}

TEST(Greedy, AlwaysEndGivesEmptyCaption) {
  RiggedModel m(5, [](const auto&) { return probs({0.1, 0.1, 0.6, 0.1, 0.1}); });
  auto out = greedy_decode(m, 10);
  EXPECT_TRUE(out.tokens.empty());
  EXPECT_NEAR(out.log_prob, std::log(0.6), 1e-15);
}

TEST(Greedy, SpellsRiggedSequence) {
  const std::vector<TokenId> script{4, 3, 4, 2};
  RiggedModel m(5, [&](const std::vector<TokenId>& prefix) {
    std::vector<double> p(5, 0.05);
    p[script[prefix.size() - 1]] = 0.8;
    return probs(p);
  });
  auto out = greedy_decode(m, 10);
  EXPECT_EQ(out.tokens, (std::vector<TokenId>{4, 3, 4}));
  EXPECT_EQ(out.step_log_probs.size(), 4u);
}

TEST(Greedy, NeverEmitsStartOrPadAndRespectsMaxLen) {
  RiggedModel m(5, [](const auto&) { return probs({0.4, 0.3, 0.05, 0.2, 0.05}); });
  auto out = greedy_decode(m, 4);
  EXPECT_EQ(out.tokens, (std::vector<TokenId>{3, 3, 3, 3}));
}

TEST(Greedy, TiesGoToLowestId) {
  RiggedModel m(6, [](const std::vector<TokenId>& p) {
    return p.size() > 1 ? probs({0.1, 0.1, 0.5, 0.1, 0.1, 0.1}) : probs({0.1, 0.1, 0.1, 0.1, 0.3, 0.3});
  });
  EXPECT_EQ(greedy_decode(m, 5).tokens, (std::vector<TokenId>{4}));
}

TEST(Beam, WidthOneEqualsGreedy) {
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    auto m = random_model(5, seed);
    auto g = greedy_decode(m, 4);
    auto b = beam_decode(m, {1, 4, false});
    ASSERT_EQ(b.size(), 1u);
    EXPECT_EQ(b[0].tokens, g.tokens) << seed;
    EXPECT_EQ(b[0].step_log_probs, g.step_log_probs) << seed;
    EXPECT_EQ(b[0].log_prob, g.log_prob) << seed;
  }
}

TEST(Beam, WidthTwoRecoversBetterSequenceThanGreedy) {
  // Greedy takes 3 (0.5) but every continuation of 3 is flat; 4 (0.4) leads to
  // a confident <end>.
  RiggedModel m(5, [](const std::vector<TokenId>& p) {
    if (p.size() == 1) return probs({0.01, 0.01, 0.08, 0.5, 0.4});
    if (p[1] == 3) return probs({0.01, 0.01, 0.33, 0.33, 0.32});
    return probs({0.01, 0.01, 0.96, 0.01, 0.01});
  });
  EXPECT_EQ(greedy_decode(m, 3).tokens, (std::vector<TokenId>{3}));
  auto b = beam_decode(m, {2, 3, false});
  Best best;
  enumerate(m, 3, {}, 0.0, best);
  EXPECT_EQ(b.front().tokens, (std::vector<TokenId>{4}));
  EXPECT_EQ(b.front().tokens, best.tokens);
  EXPECT_NEAR(b.front().log_prob, best.score, 1e-12);
}

TEST(Beam, FullWidthFindsExhaustiveOptimum) {
  for (std::size_t vocab : {3u, 4u, 5u})
    for (std::size_t max_len : {1u, 2u, 3u, 4u})
      for (std::uint64_t seed = 0; seed < 6; ++seed) {
        auto m = random_model(vocab, seed * 31 + vocab);
        Best best;
        enumerate(m, max_len, {}, 0.0, best);
        auto b = beam_decode(m, {best.complete, max_len, false});
        ASSERT_FALSE(b.empty());
        EXPECT_EQ(b.front().tokens, best.tokens) << vocab << " " << max_len << " " << seed;
        EXPECT_NEAR(b.front().log_prob, best.score, 1e-12);
        EXPECT_EQ(b.size(), best.complete);
      }
}

TEST(Beam, ScoresAreNonIncreasingAndContractHolds) {
  auto m = random_model(5, 99);
  auto b = beam_decode(m, {4, 4, false});
  ASSERT_EQ(b.size(), 4u);
  for (std::size_t i = 1; i < b.size(); ++i) EXPECT_GE(b[i - 1].log_prob, b[i].log_prob);
  for (const auto& o : b) {
    EXPECT_LE(o.tokens.size(), 4u);
    for (TokenId t : o.tokens) {
      EXPECT_NE(t, Vocabulary::kPad);
      EXPECT_NE(t, Vocabulary::kStart);
      EXPECT_NE(t, Vocabulary::kEnd);
    }
  }
  EXPECT_THROW(beam_decode(m, {0, 4, false}), std::invalid_argument);
}

TEST(Beam, LengthNormalizationReranks) {
  auto m = random_model(5, 7);
  auto raw = beam_decode(m, {6, 4, false});
  auto norm = beam_decode(m, {6, 4, true});
  for (std::size_t i = 1; i < norm.size(); ++i) {
    EXPECT_GE(norm[i - 1].log_prob / norm[i - 1].step_log_probs.size(),
              norm[i].log_prob / norm[i].step_log_probs.size());
  }
  EXPECT_EQ(raw.size(), norm.size());
}

TEST(StepModels, DecodersPlugIntoSearch) {
  Rng rng(40);
  AnnotationGrid grid(3, 3, std::vector<double>(9, 0.2));
  {
    ParameterStore store;
    auto cfg = tiny_lstm(6);
    cfg.channels = 3;
    LstmDecoder dec(cfg, store, rng);
    LstmStepModel m(dec, grid);
    auto g = greedy_decode(m, 5);
    auto b = beam_decode(m, {1, 5, false});
    EXPECT_EQ(g.tokens, b[0].tokens);
    EXPECT_FALSE(g.attention.empty());
    EXPECT_EQ(g.attention[0].size(), 3u);
  }
  {
    ParameterStore store;
    TransformerDecoder dec(tiny_tf(1, 2), store, rng);
    TransformerStepModel m(dec, grid);
    auto g = greedy_decode(m, 5);
    EXPECT_EQ(g.tokens, beam_decode(m, {1, 5, false})[0].tokens);
    // The last-position logits agree with a full teacher-forced pass.
    std::vector<TokenId> prefix{1};
    prefix.insert(prefix.end(), g.tokens.begin(), g.tokens.end());
    auto full = dec.decode_train(prefix, 1, prefix.size(), grid.tensor(), 3);
    auto lp = log_softmax(full.data().subspan(0, 6));
    EXPECT_NEAR(lp[g.tokens.empty() ? 2 : g.tokens[0]], g.step_log_probs[0], 1e-12);
  }
}

}  // namespace
}  // namespace capkit
