#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "capkit/functional.hpp"
#include "capkit/rng.hpp"
#include "capkit/tensor.hpp"

namespace capkit {

struct NamedParameter {
  std::string name;
  Tensor tensor;
};

/// Ordered registry of every trainable tensor of a model. Names are unique
/// and double as checkpoint keys.
class ParameterStore {
 public:
  Tensor& add(std::string name, Tensor t) {
    for (const auto& p : params_) {
      if (p.name == name) throw std::invalid_argument("duplicate parameter name: " + name);
    }
    t.set_requires_grad(true);
    params_.push_back({std::move(name), std::move(t)});
    return params_.back().tensor;
  }

  /// Scaled-uniform weights: U(-s, s) with s = sqrt(6 / (fan_in + fan_out)).
  Tensor weight(const std::string& name, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
    Tensor t({fan_in, fan_out});
    const double s = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    for (auto& v : t.mutable_data()) v = rng.uniform(-s, s);
    return add(name, std::move(t));
  }

  Tensor bias(const std::string& name, std::size_t n, double value = 0.0) {
    return add(name, Tensor({n}, value));
  }

  const Tensor& get(const std::string& name) const {
    for (const auto& p : params_) {
      if (p.name == name) return p.tensor;
    }
    throw std::out_of_range("no parameter named " + name);
  }

  std::vector<NamedParameter>& items() { return params_; }
  const std::vector<NamedParameter>& items() const { return params_; }
  std::size_t size() const { return params_.size(); }

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.tensor.size();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

 private:
  std::vector<NamedParameter> params_;
};

struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::uint64_t t = 0;
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// One bias-corrected Adam update over `params`, reading each tensor's grad.
/// Parameters without a grad buffer are treated as having zero gradient.
inline void adam_step(std::vector<NamedParameter*> params, AdamState& state) {
  if (state.m.empty()) {
    for (auto* p : params) {
      state.m.emplace_back(p->tensor.size(), 0.0);
      state.v.emplace_back(p->tensor.size(), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw std::invalid_argument("Adam state does not match parameter list");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (state.m[i].size() != params[i]->tensor.size()) {
      throw ShapeError("Adam moments are not congruent with parameter " + params[i]->name);
    }
    if (params[i]->tensor.has_grad() && !all_finite(params[i]->tensor.grad())) {
      throw std::runtime_error("non-finite gradient in parameter " + params[i]->name);
    }
  }
  ++state.t;
  const double t = static_cast<double>(state.t);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i]->tensor;
    if (!p.has_grad()) {
      // Moments still decay so every parameter sees the same clock.
      for (std::size_t j = 0; j < p.size(); ++j) {
        state.m[i][j] *= state.beta1;
        state.v[i][j] *= state.beta2;
      }
    }
    auto w = p.mutable_data();
    const auto g = p.grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      if (p.has_grad()) {
        m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
        v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
      }
      const double mhat = m[j] / c1;
      const double vhat = v[j] / c2;
      w[j] -= state.lr * mhat / (std::sqrt(vhat) + state.epsilon);
    }
  }
}

/// Rescales gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
inline double clip_grad_norm(const std::vector<NamedParameter*>& params, double max_norm) {
  double sq = 0.0;
  for (auto* p : params) {
    if (!p->tensor.has_grad()) continue;
    for (double g : p->tensor.grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double f = max_norm / norm;
    for (auto* p : params) {
      if (!p->tensor.has_grad()) continue;
      for (double& g : p->tensor.mutable_grad()) g *= f;
    }
  }
  return norm;
}

}  // namespace capkit
