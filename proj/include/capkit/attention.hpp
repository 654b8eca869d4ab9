#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "capkit/annotation.hpp"
#include "capkit/functional.hpp"
#include "capkit/optim.hpp"

namespace capkit {

/// Boolean T_q x T_k matrix; true = the key may be attended.
struct AttentionMask {
  std::size_t rows = 0, cols = 0;
  std::vector<std::uint8_t> allowed;

  AttentionMask(std::size_t r, std::size_t c, bool fill = false) : rows(r), cols(c), allowed(r * c, fill) {}

  bool operator()(std::size_t i, std::size_t j) const { return allowed[i * cols + j] != 0; }
  void set(std::size_t i, std::size_t j, bool v) { allowed[i * cols + j] = v; }

  void validate() const {
    for (std::size_t i = 0; i < rows; ++i) {
      bool any = false;
      for (std::size_t j = 0; j < cols && !any; ++j) any = (*this)(i, j);
      if (!any) throw std::invalid_argument("attention mask row " + std::to_string(i) + " allows no keys");
    }
  }
};

inline constexpr double kMaskedLogit = -1e9;

inline AttentionMask causal_mask(std::size_t t) {
  if (t == 0) throw std::invalid_argument("causal mask needs T >= 1");
  AttentionMask m(t, t);
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t j = 0; j <= i; ++j) m.set(i, j, true);
  return m;
}

/// Block-diagonal mask for B sequences stacked row-wise: query rows of
/// sequence b see only key rows of sequence b (and, if causal, only earlier
/// positions within it).
inline AttentionMask block_mask(std::size_t batch, std::size_t tq, std::size_t tk, bool causal) {
  AttentionMask m(batch * tq, batch * tk);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < tq; ++i)
      for (std::size_t j = 0; j < tk; ++j)
        if (!causal || j <= i) m.set(b * tq + i, b * tk + j, true);
  return m;
}

inline Tensor additive_mask(const AttentionMask& m) {
  Tensor t({m.rows, m.cols}, 0.0);
  auto d = t.mutable_data();
  for (std::size_t i = 0; i < m.allowed.size(); ++i) d[i] = m.allowed[i] ? 0.0 : kMaskedLogit;
  return t;
}

struct AttentionResult {
  Tensor output;   // T_q x d_v
  Tensor weights;  // T_q x T_k
};

/// softmax(Q K^T / sqrt(d_k)) V, with disallowed logits pushed to -1e9.
inline AttentionResult scaled_dot_product_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                                    const AttentionMask* mask = nullptr) {
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2 || q.dim(1) != k.dim(1) || k.dim(0) != v.dim(0)) {
    throw ShapeError("attention shapes incompatible: Q" + shape_str(q.shape()) + " K" + shape_str(k.shape()) +
                     " V" + shape_str(v.shape()));
  }
  auto logits = scale(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(q.dim(1))));
  if (mask) {
    if (mask->rows != q.dim(0) || mask->cols != k.dim(0)) throw ShapeError("attention mask shape mismatch");
    mask->validate();
    logits = add(logits, additive_mask(*mask));
  }
  auto weights = softmax(logits, 1);
  return {matmul(weights, v), weights};
}

struct MultiHeadParams {
  std::size_t heads = 1;
  std::size_t d_model = 0;
  std::vector<Tensor> wq, wk, wv;  // per head, d_model x d_k
  Tensor wo;                       // d_model x d_model

  std::size_t d_k() const { return d_model / heads; }

  static MultiHeadParams create(ParameterStore& store, const std::string& prefix, std::size_t d_model,
                                std::size_t heads, Rng& rng) {
    if (heads == 0 || d_model % heads != 0) {
      throw std::invalid_argument(std::to_string(heads) + " heads do not divide d_model " + std::to_string(d_model));
    }
    MultiHeadParams p;
    p.heads = heads;
    p.d_model = d_model;
    const std::size_t dk = d_model / heads;
    for (std::size_t i = 0; i < heads; ++i) {
      const auto h = std::to_string(i);
      p.wq.push_back(store.weight(prefix + ".q" + h, d_model, dk, rng));
      p.wk.push_back(store.weight(prefix + ".k" + h, d_model, dk, rng));
      p.wv.push_back(store.weight(prefix + ".v" + h, d_model, dk, rng));
    }
    p.wo = store.weight(prefix + ".o", d_model, d_model, rng);
    return p;
  }
};

/// Concat(head_1..head_h) W^O with head_i = Attention(x_q W_i^Q, x_k W_i^K, x_v W_i^V).
inline Tensor multi_head_attention(const Tensor& xq, const Tensor& xk, const Tensor& xv, const MultiHeadParams& p,
                                   const AttentionMask* mask = nullptr) {
  if (p.heads == 0 || p.d_model % p.heads != 0) throw std::invalid_argument("heads must divide d_model");
  if (xq.dim(1) != p.d_model || xk.dim(1) != p.d_model || xv.dim(1) != p.d_model) {
    throw ShapeError("multi-head inputs must have width d_model=" + std::to_string(p.d_model));
  }
  std::vector<Tensor> heads;
  heads.reserve(p.heads);
  for (std::size_t i = 0; i < p.heads; ++i) {
    heads.push_back(
        scaled_dot_product_attention(matmul(xq, p.wq[i]), matmul(xk, p.wk[i]), matmul(xv, p.wv[i]), mask).output);
  }
  auto cat = heads.size() == 1 ? heads.front() : concat(heads, 1);
  return matmul(cat, p.wo);
}

// ---------------------------------------------------------------------------
// Additive soft attention over annotation vectors (LSTM decoder).

struct SoftAttentionParams {
  Tensor w_a;     // N x A
  Tensor w_h;     // D x A
  Tensor bias;    // A
  Tensor score;   // A x 1
  Tensor gate_w;  // D x 1, undefined when gating is off
  Tensor gate_b;  // 1

  bool gated() const { return gate_w.defined(); }

  static SoftAttentionParams create(ParameterStore& store, const std::string& prefix, std::size_t n, std::size_t d,
                                    std::size_t a, bool gate, Rng& rng) {
    SoftAttentionParams p;
    p.w_a = store.weight(prefix + ".w_a", n, a, rng);
    p.w_h = store.weight(prefix + ".w_h", d, a, rng);
    p.bias = store.bias(prefix + ".b", a);
    p.score = store.weight(prefix + ".score", a, 1, rng);
    if (gate) {
      p.gate_w = store.weight(prefix + ".gate.w", d, 1, rng);
      p.gate_b = store.bias(prefix + ".gate.b", 1);
    }
    return p;
  }
};

/// Annotations of B images stacked as (B*P) x N, with the per-position
/// projection hoisted out of the time loop.
struct PreparedAnnotations {
  std::size_t batch = 0, positions = 0;
  Tensor values;     // (B*P) x N
  Tensor projected;  // (B*P) x A
  Tensor pool;       // B x (B*P), ones on each image's block
  std::vector<std::size_t> owner;  // row -> image index, length B*P

  Tensor mean() const { return scale(matmul(pool, values), 1.0 / static_cast<double>(positions)); }
};

inline PreparedAnnotations prepare_annotations(const Tensor& values, std::size_t batch, std::size_t positions,
                                               const SoftAttentionParams& p) {
  if (positions == 0) throw std::invalid_argument("soft attention over zero positions");
  if (values.rank() != 2 || values.dim(0) != batch * positions || values.dim(1) != p.w_a.dim(0)) {
    throw ShapeError("annotations " + shape_str(values.shape()) + " do not match batch/positions/channels");
  }
  PreparedAnnotations out;
  out.batch = batch;
  out.positions = positions;
  out.values = values;
  out.projected = matmul(values, p.w_a);
  out.pool = Tensor({batch, batch * positions}, 0.0);
  auto d = out.pool.mutable_data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < positions; ++i) {
      d[b * batch * positions + b * positions + i] = 1.0;
      out.owner.push_back(b);
    }
  return out;
}

struct SoftAttentionResult {
  Tensor context;  // B x N
  Tensor alpha;    // B x P
};

/// e_i = score . tanh(W_a a_i + W_h h + b); alpha = softmax(e);
/// z = sum_i alpha_i a_i, scaled by sigmoid(gate(h)) when gated.
inline SoftAttentionResult soft_attention(const PreparedAnnotations& ann, const Tensor& h_prev,
                                          const SoftAttentionParams& p) {
  if (h_prev.rank() != 2 || h_prev.dim(0) != ann.batch || h_prev.dim(1) != p.w_h.dim(0)) {
    throw ShapeError("hidden state " + shape_str(h_prev.shape()) + " does not match attention params");
  }
  auto hidden = embedding(matmul(h_prev, p.w_h), ann.owner);
  auto e = matmul(tanh(add(add(ann.projected, hidden), p.bias)), p.score);
  auto alpha = softmax(reshape(e, {ann.batch, ann.positions}), 1);
  auto weighted = multiply(reshape(alpha, {ann.batch * ann.positions, 1}), ann.values);
  auto z = matmul(ann.pool, weighted);
  if (p.gated()) z = multiply(z, sigmoid(linear(h_prev, p.gate_w, p.gate_b)));
  return {z, alpha};
}

/// Single-image convenience form.
inline SoftAttentionResult soft_attention(const AnnotationGrid& grid, const Tensor& h_prev,
                                          const SoftAttentionParams& p) {
  if (grid.positions == 0) throw std::invalid_argument("soft attention over zero positions");
  auto h = h_prev.rank() == 1 ? reshape(h_prev, {1, h_prev.dim(0)}) : h_prev;
  return soft_attention(prepare_annotations(grid.tensor(), 1, grid.positions, p), h, p);
}

/// lambda * sum_i (1 - sum_t alpha_{t,i})^2, averaged over the batch. Each
/// alpha_t is B x P; step_mask[t] is a B x 1 tensor of 0/1 marking live steps.
inline Tensor doubly_stochastic_penalty(const std::vector<Tensor>& alphas, const std::vector<Tensor>& step_mask,
                                        double lambda) {
  if (alphas.empty()) throw std::invalid_argument("no attention maps");
  Tensor total;
  for (std::size_t t = 0; t < alphas.size(); ++t) {
    auto a = step_mask.empty() ? alphas[t] : multiply(alphas[t], step_mask[t]);
    total = total.defined() ? add(total, a) : a;
  }
  auto gap = sub(Tensor::scalar(1.0), total);
  return scale(sum(multiply(gap, gap)), lambda / static_cast<double>(alphas.front().dim(0)));
}

}  // namespace capkit
