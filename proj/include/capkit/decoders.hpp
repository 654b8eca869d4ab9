#pragma once

#include <cmath>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "capkit/attention.hpp"
#include "capkit/data.hpp"
#include "capkit/search.hpp"

namespace capkit {

// ---------------------------------------------------------------------------
// Loss

/// Mean over positions t < lengths[b] of -sum_v q_v log p_v with
/// q = (1 - eps) onehot(target) + eps / V. logits is B x T x V.
///
/// Evaluated as logsumexp(x) - q.x, where logsumexp(x) = x_m - log p_m for
/// the row maximum m, so no log of an underflowed probability is taken.
inline Tensor label_smoothed_loss(const Tensor& logits, const std::vector<TokenId>& targets,
                                  const std::vector<std::size_t>& lengths, double epsilon) {
  if (logits.rank() != 3) throw ShapeError("logits must be B x T x V, got " + shape_str(logits.shape()));
  if (epsilon < 0.0 || epsilon >= 1.0) throw std::invalid_argument("label smoothing must be in [0, 1)");
  const std::size_t b = logits.dim(0), t = logits.dim(1), v = logits.dim(2);
  if (targets.size() != b * t || lengths.size() != b) throw ShapeError("targets/lengths do not match logits");
  const std::size_t rows = b * t;
  Tensor q({rows, v}, 0.0), pick({rows, v}, 0.0), live({rows, 1}, 0.0);
  auto qd = q.mutable_data(), pd = pick.mutable_data(), ld = live.mutable_data();
  const auto x = logits.data();
  for (std::size_t r = 0; r < rows; ++r) {
    std::size_t m = 0;
    for (std::size_t k = 1; k < v; ++k)
      if (x[r * v + k] > x[r * v + m]) m = k;
    pd[r * v + m] = 1.0;
  }
  std::size_t valid = 0;
  for (std::size_t i = 0; i < b; ++i) {
    if (lengths[i] > t) {
      throw std::invalid_argument("length " + std::to_string(lengths[i]) + " exceeds T=" + std::to_string(t));
    }
    for (std::size_t j = 0; j < lengths[i]; ++j) {
      const TokenId y = targets[i * t + j];
      if (y >= v) throw std::out_of_range("target id " + std::to_string(y) + " >= vocabulary " + std::to_string(v));
      const std::size_t r = i * t + j;
      for (std::size_t k = 0; k < v; ++k) qd[r * v + k] = epsilon / static_cast<double>(v);
      qd[r * v + y] += 1.0 - epsilon;
      ld[r] = 1.0;
      ++valid;
    }
  }
  if (valid == 0) throw std::invalid_argument("label_smoothed_loss over zero positions");
  auto flat = reshape(logits, {rows, v});
  auto lse = sub(row_sum(multiply(pick, flat)), log(row_sum(multiply(pick, softmax(flat, 1)))));
  auto per_row = sub(lse, row_sum(multiply(q, flat)));
  return scale(sum(multiply(live, per_row)), 1.0 / static_cast<double>(valid));
}

/// Shifted views of a batch of <start> ... <end> sequences.
struct TeacherForcing {
  std::size_t batch = 0, steps = 0;  // steps = T - 1
  std::vector<TokenId> inputs;       // B x steps
  std::vector<TokenId> targets;      // B x steps
  std::vector<std::size_t> lengths;  // target positions per row
};

inline TeacherForcing teacher_forcing(const Batch& batch) {
  if (batch.steps < 2) throw std::invalid_argument("sequences need at least <start> and <end>");
  TeacherForcing tf;
  tf.batch = batch.size();
  tf.steps = batch.steps - 1;
  for (std::size_t b = 0; b < tf.batch; ++b) {
    for (std::size_t t = 0; t < tf.steps; ++t) {
      tf.inputs.push_back(batch.at(b, t));
      tf.targets.push_back(batch.at(b, t + 1));
    }
    tf.lengths.push_back(batch.lengths[b] == 0 ? 0 : batch.lengths[b] - 1);
  }
  return tf;
}

// ---------------------------------------------------------------------------
// Attention LSTM

struct LstmConfig {
  std::size_t vocab = 0;
  std::size_t embed = 512;
  std::size_t channels = 64;
  std::size_t hidden = 512;
  std::size_t attention = 512;
  bool gate = true;
  double dropout = 0.5;
};

struct LstmState {
  Tensor h, c;  // B x D
};

struct LstmStepResult {
  Tensor logits;  // B x V
  LstmState state;
  Tensor alpha;   // B x P
};

class LstmDecoder {
 public:
  struct Gate {
    Tensor w, b;
  };

  LstmDecoder(const LstmConfig& config, ParameterStore& store, Rng& rng) : config_(config) {
    if (config.vocab == 0 || config.embed == 0 || config.channels == 0 || config.hidden == 0 ||
        config.attention == 0) {
      throw std::invalid_argument("LSTM dimensions must be positive");
    }
    const auto& c = config;
    embed_ = store.weight("lstm.embed", c.vocab, c.embed, rng);
    init_h_ = {store.weight("lstm.init_h.w", c.channels, c.hidden, rng), store.bias("lstm.init_h.b", c.hidden)};
    init_c_ = {store.weight("lstm.init_c.w", c.channels, c.hidden, rng), store.bias("lstm.init_c.b", c.hidden)};
    att_ = SoftAttentionParams::create(store, "lstm.att", c.channels, c.hidden, c.attention, c.gate, rng);
    const std::size_t in = c.embed + c.channels + c.hidden;
    for (const char* g : {"i", "f", "o", "g"}) {
      gates_.push_back({store.weight(std::string("lstm.cell.w_") + g, in, c.hidden, rng),
                        store.bias(std::string("lstm.cell.b_") + g, c.hidden)});
    }
    out_ = {store.weight("lstm.out.w", c.hidden, c.vocab, rng), store.bias("lstm.out.b", c.vocab)};
  }

  const LstmConfig& config() const { return config_; }
  const Tensor& embedding_table() const { return embed_; }
  const SoftAttentionParams& attention_params() const { return att_; }
  const Gate& init_h() const { return init_h_; }
  const Gate& init_c() const { return init_c_; }
  /// Input, forget, output and candidate maps over concat(embed, z, h).
  const std::vector<Gate>& gates() const { return gates_; }
  const Gate& output() const { return out_; }

  PreparedAnnotations prepare(const Tensor& values, std::size_t batch, std::size_t positions) const {
    return prepare_annotations(values, batch, positions, att_);
  }

  /// h0 = tanh(W_h mean(a) + b_h), c0 = tanh(W_c mean(a) + b_c).
  LstmState init_state(const PreparedAnnotations& ann) const {
    auto mean = ann.mean();
    return {tanh(linear(mean, init_h_.w, init_h_.b)), tanh(linear(mean, init_c_.w, init_c_.b))};
  }

  /// One step for B sequences. Dropout before the output projection when
  /// `rng` is given.
  LstmStepResult step(const std::vector<TokenId>& prev, const LstmState& s, const PreparedAnnotations& ann,
                      Rng* rng = nullptr) const {
    if (prev.size() != ann.batch) throw ShapeError("token batch does not match annotations");
    for (TokenId t : prev)
      if (t >= config_.vocab) throw std::out_of_range("token id " + std::to_string(t) + " >= vocabulary");
    auto att = soft_attention(ann, s.h, att_);
    auto x = concat({embedding(embed_, prev), att.context, s.h}, 1);
    auto i = sigmoid(linear(x, gates_[0].w, gates_[0].b));
    auto f = sigmoid(linear(x, gates_[1].w, gates_[1].b));
    auto o = sigmoid(linear(x, gates_[2].w, gates_[2].b));
    auto g = tanh(linear(x, gates_[3].w, gates_[3].b));
    auto c = add(multiply(f, s.c), multiply(i, g));
    auto h = multiply(o, tanh(c));
    auto feat = rng ? dropout(h, config_.dropout, *rng, true) : h;
    return {linear(feat, out_.w, out_.b), {h, c}, att.alpha};
  }

  struct Forward {
    Tensor logits;  // B x steps x V
    std::vector<Tensor> alphas;
    std::vector<Tensor> live;  // per step, B x 1 indicator
  };

  Forward teacher_forced(const TeacherForcing& tf, const PreparedAnnotations& ann, Rng* rng = nullptr) const {
    if (tf.batch != ann.batch) throw ShapeError("teacher-forcing batch does not match annotations");
    Forward out;
    auto state = init_state(ann);
    std::vector<Tensor> per_step;
    for (std::size_t t = 0; t < tf.steps; ++t) {
      std::vector<TokenId> prev(tf.batch);
      Tensor live({tf.batch, 1}, 0.0);
      for (std::size_t b = 0; b < tf.batch; ++b) {
        prev[b] = tf.inputs[b * tf.steps + t];
        live.mutable_data()[b] = t < tf.lengths[b] ? 1.0 : 0.0;
      }
      auto r = step(prev, state, ann, rng);
      per_step.push_back(r.logits);
      out.alphas.push_back(r.alpha);
      out.live.push_back(live);
      state = r.state;
    }
    auto wide = per_step.size() == 1 ? per_step.front() : concat(per_step, 1);
    out.logits = reshape(wide, {tf.batch, tf.steps, config_.vocab});
    return out;
  }

  /// Label-smoothed cross-entropy plus the doubly stochastic attention
  /// penalty (skipped when lambda = 0).
  Tensor loss(const TeacherForcing& tf, const PreparedAnnotations& ann, double epsilon, double lambda,
              Rng* rng = nullptr) const {
    auto fw = teacher_forced(tf, ann, rng);
    auto l = label_smoothed_loss(fw.logits, tf.targets, tf.lengths, epsilon);
    if (lambda > 0.0) l = add(l, doubly_stochastic_penalty(fw.alphas, fw.live, lambda));
    return l;
  }

 private:
  LstmConfig config_;
  Tensor embed_;
  Gate init_h_, init_c_;
  SoftAttentionParams att_;
  std::vector<Gate> gates_;
  Gate out_;
};

class LstmStepModel final : public StepModel {
 public:
  LstmStepModel(const LstmDecoder& decoder, const AnnotationGrid& grid) : decoder_(decoder) {
    NoGradGuard guard;
    ann_ = decoder.prepare(grid.tensor(), 1, grid.positions);
  }

  std::size_t vocab_size() const override { return decoder_.config().vocab; }

  std::shared_ptr<const DecodeState> start() const override {
    NoGradGuard guard;
    auto s = std::make_shared<State>();
    s->s = decoder_.init_state(ann_);
    return s;
  }

  Step step(const DecodeState& state, TokenId token) const override {
    NoGradGuard guard;
    const auto& s = static_cast<const State&>(state);
    auto r = decoder_.step({token}, s.s, ann_);
    auto next = std::make_shared<State>();
    next->s = r.state;
    auto alpha = r.alpha.data();
    return {log_softmax(r.logits.data()), next, std::vector<double>(alpha.begin(), alpha.end())};
  }

 private:
  struct State : DecodeState {
    LstmState s;
  };
  const LstmDecoder& decoder_;
  PreparedAnnotations ann_;
};

// ---------------------------------------------------------------------------
// Transformer

/// PE(pos, 2i) = sin(pos / 10000^(2i/d)), PE(pos, 2i+1) = cos(same).
inline Tensor positional_encoding(std::size_t max_len, std::size_t d_model) {
  if (d_model == 0 || d_model % 2 != 0) throw std::invalid_argument("positional encoding needs even d_model");
  Tensor pe({max_len, d_model}, 0.0);
  auto d = pe.mutable_data();
  for (std::size_t pos = 0; pos < max_len; ++pos)
    for (std::size_t i = 0; i < d_model; i += 2) {
      const double angle =
          static_cast<double>(pos) / std::pow(10000.0, static_cast<double>(i) / static_cast<double>(d_model));
      d[pos * d_model + i] = std::sin(angle);
      d[pos * d_model + i + 1] = std::cos(angle);
    }
  return pe;
}

struct TransformerConfig {
  std::size_t vocab = 0;
  std::size_t channels = 64;
  std::size_t d_model = 512;
  std::size_t heads = 2;
  std::size_t layers = 3;
  std::size_t d_ff = 2048;
  std::size_t max_len = 32;  // positions, including <start>
  double dropout = 0.1;
};

struct DecoderBlock {
  MultiHeadParams self_attn, cross_attn;
  Tensor ff1_w, ff1_b, ff2_w, ff2_b;
  Tensor ln_g[3], ln_b[3];
};

class TransformerDecoder {
 public:
  TransformerDecoder(const TransformerConfig& config, ParameterStore& store, Rng& rng)
      : config_(config), pe_(positional_encoding(config.max_len, config.d_model)) {
    const auto& c = config;
    if (c.vocab == 0 || c.channels == 0 || c.d_ff == 0 || c.max_len == 0) {
      throw std::invalid_argument("transformer dimensions must be positive");
    }
    if (c.layers == 0) throw std::invalid_argument("transformer needs at least one layer");
    if (c.heads == 0 || c.d_model % c.heads != 0) {
      throw std::invalid_argument(std::to_string(c.heads) + " heads do not divide d_model " +
                                  std::to_string(c.d_model));
    }
    embed_ = store.weight("tf.embed", c.vocab, c.d_model, rng);
    mem_w_ = store.weight("tf.mem.w", c.channels, c.d_model, rng);
    mem_b_ = store.bias("tf.mem.b", c.d_model);
    for (std::size_t l = 0; l < c.layers; ++l) {
      const std::string p = "tf.block" + std::to_string(l);
      DecoderBlock blk;
      blk.self_attn = MultiHeadParams::create(store, p + ".self", c.d_model, c.heads, rng);
      blk.cross_attn = MultiHeadParams::create(store, p + ".cross", c.d_model, c.heads, rng);
      blk.ff1_w = store.weight(p + ".ff1.w", c.d_model, c.d_ff, rng);
      blk.ff1_b = store.bias(p + ".ff1.b", c.d_ff);
      blk.ff2_w = store.weight(p + ".ff2.w", c.d_ff, c.d_model, rng);
      blk.ff2_b = store.bias(p + ".ff2.b", c.d_model);
      for (int k = 0; k < 3; ++k) {
        blk.ln_g[k] = store.bias(p + ".ln" + std::to_string(k) + ".g", c.d_model, 1.0);
        blk.ln_b[k] = store.bias(p + ".ln" + std::to_string(k) + ".b", c.d_model);
      }
      blocks_.push_back(std::move(blk));
    }
    out_w_ = store.weight("tf.out.w", c.d_model, c.vocab, rng);
    out_b_ = store.bias("tf.out.b", c.vocab);
  }

  const TransformerConfig& config() const { return config_; }
  const std::vector<DecoderBlock>& blocks() const { return blocks_; }
  const Tensor& embedding_table() const { return embed_; }
  const Tensor& positional_table() const { return pe_; }

  /// Annotations (B*P) x N projected to d_model.
  Tensor memory(const Tensor& annotations) const { return linear(annotations, mem_w_, mem_b_); }

  /// Logits (B*T) x V for B sequences of length T stacked row-wise.
  Tensor forward_rows(const std::vector<TokenId>& ids, std::size_t batch, std::size_t steps, const Tensor& memory,
                      std::size_t positions, Rng* rng = nullptr) const {
    const auto& c = config_;
    if (steps == 0 || ids.size() != batch * steps) throw ShapeError("token ids do not form B x T");
    if (steps > c.max_len) {
      throw std::invalid_argument("sequence length " + std::to_string(steps) + " exceeds max_len " +
                                  std::to_string(c.max_len));
    }
    if (memory.rank() != 2 || memory.dim(0) != batch * positions || memory.dim(1) != c.d_model) {
      throw ShapeError("memory " + shape_str(memory.shape()) + " does not match batch/positions");
    }
    for (TokenId t : ids)
      if (t >= c.vocab) throw std::out_of_range("token id " + std::to_string(t) + " >= vocabulary");

    std::vector<std::size_t> pos(batch * steps);
    for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = i % steps;
    auto x = add(scale(embedding(embed_, ids), std::sqrt(static_cast<double>(c.d_model))), embedding(pe_, pos));
    x = drop(x, rng);

    const auto self_mask = block_mask(batch, steps, steps, true);
    const auto cross_mask = block_mask(batch, steps, positions, false);
    const AttentionMask* cross = batch > 1 ? &cross_mask : nullptr;
    for (const auto& blk : blocks_) {
      x = norm(add(x, drop(multi_head_attention(x, x, x, blk.self_attn, &self_mask), rng)), blk, 0);
      x = norm(add(x, drop(multi_head_attention(x, memory, memory, blk.cross_attn, cross), rng)), blk, 1);
      auto ff = linear(relu(linear(x, blk.ff1_w, blk.ff1_b)), blk.ff2_w, blk.ff2_b);
      x = norm(add(x, drop(ff, rng)), blk, 2);
    }
    return linear(x, out_w_, out_b_);
  }

  /// Logits B x T x V.
  Tensor decode_train(const std::vector<TokenId>& ids, std::size_t batch, std::size_t steps,
                      const Tensor& annotations, std::size_t positions, Rng* rng = nullptr) const {
    auto rows = forward_rows(ids, batch, steps, memory(annotations), positions, rng);
    return reshape(rows, {batch, steps, config_.vocab});
  }

  Tensor loss(const TeacherForcing& tf, const Tensor& annotations, std::size_t positions, double epsilon,
              Rng* rng = nullptr) const {
    auto logits = decode_train(tf.inputs, tf.batch, tf.steps, annotations, positions, rng);
    return label_smoothed_loss(logits, tf.targets, tf.lengths, epsilon);
  }

 private:
  Tensor drop(const Tensor& x, Rng* rng) const { return rng ? dropout(x, config_.dropout, *rng, true) : x; }

  static Tensor norm(const Tensor& x, const DecoderBlock& blk, int k) {
    return add(multiply(layer_norm(x), blk.ln_g[k]), blk.ln_b[k]);
  }

  TransformerConfig config_;
  Tensor pe_;
  Tensor embed_, mem_w_, mem_b_;
  std::vector<DecoderBlock> blocks_;
  Tensor out_w_, out_b_;
};

/// Re-runs the decoder over the whole prefix at every step.
class TransformerStepModel final : public StepModel {
 public:
  TransformerStepModel(const TransformerDecoder& decoder, const AnnotationGrid& grid)
      : decoder_(decoder), positions_(grid.positions) {
    NoGradGuard guard;
    memory_ = decoder.memory(grid.tensor());
  }

  std::size_t vocab_size() const override { return decoder_.config().vocab; }

  std::shared_ptr<const DecodeState> start() const override { return std::make_shared<State>(); }

  Step step(const DecodeState& state, TokenId token) const override {
    NoGradGuard guard;
    auto next = std::make_shared<State>(static_cast<const State&>(state));
    next->prefix.push_back(token);
    // Past the positional table the last window is reused; callers cap
    // decoding at max_len so this only guards against misuse.
    const std::size_t limit = decoder_.config().max_len;
    std::vector<TokenId> window = next->prefix;
    if (window.size() > limit) window.erase(window.begin(), window.end() - static_cast<std::ptrdiff_t>(limit));
    auto logits = decoder_.forward_rows(window, 1, window.size(), memory_, positions_);
    const auto v = decoder_.config().vocab;
    auto all = logits.data();
    return {log_softmax(all.subspan((window.size() - 1) * v, v)), next, {}};
  }

 private:
  struct State : DecodeState {
    std::vector<TokenId> prefix;
  };
  const TransformerDecoder& decoder_;
  std::size_t positions_;
  Tensor memory_;
};

}  // namespace capkit
